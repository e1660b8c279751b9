mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};

use prefpaint_core::registry::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_prefpaint");

fn write_tiny_config(dir: &std::path::Path) {
    let cfg = serde_json::to_vec_pretty(&common::tiny_config()).unwrap();
    std::fs::write(dir.join(prefpaint_server::service::CONFIG_FILE), cfg).unwrap();
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_get(addr: &str, path: &str) -> String {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    response
}

#[test]
fn train_serve_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let ckpt = dir.path().join("base.pfpt");

    let out = Command::new(BIN)
        .args(["train-base", "--steps", "10", "--out"])
        .arg(&ckpt)
        .env("PREFPAINT_DATA_DIR", dir.path())
        .env("PREFPAINT_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let Checkpoint::Base(weights) = Checkpoint::from_bytes(&std::fs::read(&ckpt).unwrap()).unwrap() else {
        panic!("train-base must write a base checkpoint");
    };
    assert_eq!(weights.arch().hidden, 32);
    let curve = std::fs::read_to_string(dir.path().join("base.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11, "header plus one row per step");

    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_tiny_config(&data);
    let mut server = KillOnDrop(
        Command::new(BIN)
            .args(["serve", "--port", "0", "--workers", "1", "--domain", "shapes", "--base"])
            .arg(&ckpt)
            .arg("--data-dir")
            .arg(&data)
            .env("RUST_LOG", "info")
            .stderr(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let stderr = BufReader::new(server.0.stderr.take().unwrap());
    let mut addr = None;
    for line in stderr.lines() {
        let line = line.unwrap();
        if let Some(rest) = line.split("listening on http://").nth(1) {
            addr = Some(rest.trim().to_string());
            break;
        }
    }
    let addr = addr.expect("server reports its address");
    let tree = http_get(&addr, "/tree");
    assert!(tree.starts_with("HTTP/1.1 200"), "{tree}");
    assert!(tree.contains("\"roots\":[\"1\"]"), "{tree}");
    assert!(http_get(&addr, "/tasks/1").starts_with("HTTP/1.1 404"));
    drop(server);

    let out = Command::new(BIN)
        .args(["eval-winrate", "--candidate", "1", "--baseline", "1", "--pairs", "6"])
        .env("PREFPAINT_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let total = ["wins", "ties", "losses"].iter().map(|k| report[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(total, 6);
    let rate = report["win_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(BIN).args(["eval-winrate", "--candidate", "x"]).output().unwrap();
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["eval-winrate", "--candidate", "1", "--baseline", "2"])
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}
