use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prefpaint_core::diffusion::train_base;
use prefpaint_core::registry::Checkpoint;
use prefpaint_core::synthetic::{gen_dataset, win_rate};
use prefpaint_server::api::{router, AppState};
use prefpaint_server::ids::Id;
use prefpaint_server::service::{Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "prefpaint", version, about = "Human-in-the-loop preference fine-tuning for inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "PREFPAINT_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Seed for tasks that do not name one (overrides config.json).
        #[arg(long, env = "PREFPAINT_SEED")]
        seed: Option<u64>,
        /// Checkpoint from `train-base` to register as the domain root if
        /// the domain has none yet.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "shapes")]
        domain: String,
    },
    /// Train a base model on the synthetic shape dataset and write a checkpoint.
    TrainBase {
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, env = "PREFPAINT_SEED", default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Directory whose config.json sets the model shape.
        #[arg(long, env = "PREFPAINT_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Oracle-judged win rate of one model node against another.
    EvalWinrate {
        #[arg(long)]
        candidate: Id,
        #[arg(long)]
        baseline: Id,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, env = "PREFPAINT_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long, env = "PREFPAINT_SEED", default_value_t = 0)]
        seed: u64,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Serve {
            port,
            host,
            data_dir,
            workers,
            seed,
            base,
            domain,
        } => serve(&host, port, &data_dir, workers, seed, base.as_deref(), &domain),
        Command::TrainBase {
            steps,
            seed,
            out,
            data_dir,
        } => train(steps, seed, &out, data_dir.as_deref()),
        Command::EvalWinrate {
            candidate,
            baseline,
            pairs,
            data_dir,
            seed,
        } => eval(candidate, baseline, pairs, &data_dir, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve(
    host: &str,
    port: u16,
    data_dir: &Path,
    workers: usize,
    seed: Option<u64>,
    base: Option<&Path>,
    domain: &str,
) -> CliResult {
    let mut config = ServiceConfig::load(data_dir)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let app = AppState::open(data_dir, config, workers)?;
    if let Some(path) = base {
        if let Some(root) = app.service.registry().root_for(domain) {
            log::info!("domain {domain:?} already has root node {}", root.node_id);
        } else {
            let Checkpoint::Base(weights) = Checkpoint::from_bytes(&fs::read(path)?)? else {
                return Err(format!("{} holds an adapter, not a base model", path.display()).into());
            };
            let root = app.service.import_base(&weights, domain, &format!("imported from {}", path.display()))?;
            log::info!("registered {} as root node {} of {domain:?}", path.display(), root.node_id);
        }
    }
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(app.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!("shutting down; waiting for running tasks");
            })
            .await
    })?;
    app.queue.shutdown();
    Ok(())
}

fn train(steps: usize, seed: u64, out: &Path, data_dir: Option<&Path>) -> CliResult {
    let config = match data_dir {
        Some(dir) => ServiceConfig::load(dir)?,
        None => ServiceConfig::default(),
    };
    let templates = prefpaint_core::synthetic::templates(&config.diffusion.prompt_vocab, config.diffusion.image_side)?;
    let dataset = gen_dataset(&templates, config.dataset_per_class, config.dataset_jitter, seed)?;
    log::info!("training on {} images for {steps} steps (seed {seed})", dataset.len());
    let started = std::time::Instant::now();
    let trained = train_base(&dataset, &config.diffusion, steps, seed)?;
    fs::write(out, Checkpoint::Base(trained.weights).to_bytes()?)?;
    let curve_path = out.with_extension("loss.csv");
    fs::write(&curve_path, trained.curve.to_csv())?;
    let tail = trained.curve.window_mean(steps.saturating_sub(100), steps).unwrap_or(f64::NAN);
    log::info!(
        "wrote {} and {} in {:.0?}; mean loss over the last 100 steps {tail:.4}",
        out.display(),
        curve_path.display(),
        started.elapsed()
    );
    Ok(())
}

fn eval(candidate: Id, baseline: Id, pairs: usize, data_dir: &Path, seed: u64) -> CliResult {
    let service = Service::open(data_dir, ServiceConfig::load(data_dir)?)?;
    let registry = service.registry();
    let (cand, base) = (registry.resolve_weights(candidate.0)?, registry.resolve_weights(baseline.0)?);
    let cfg = service.config();
    let wr = win_rate(&cand, &base, service.schedule(), service.templates(), pairs, seed, &cfg.scenario)?;
    println!(
        "{}",
        serde_json::json!({
            "candidate": candidate,
            "baseline": baseline,
            "wins": wr.wins,
            "ties": wr.ties,
            "losses": wr.losses,
            "win_rate": wr.rate(),
        })
    );
    Ok(())
}
