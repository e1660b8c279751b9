#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use prefpaint_core::diffusion::DiffusionConfig;
use prefpaint_core::preference::DpoConfig;
use prefpaint_server::api::{router, AppState};
use prefpaint_server::service::ServiceConfig;
use serde_json::Value;
use tower::ServiceExt;

/// A model small enough to train and sample in well under a second.
pub fn tiny_config() -> ServiceConfig {
    ServiceConfig {
        diffusion: DiffusionConfig {
            timesteps: 20,
            hidden_dim: 32,
            time_embed_dim: 8,
            ..DiffusionConfig::default()
        },
        dpo: DpoConfig {
            timestep_subsample: 4,
            epochs: 1,
            batch_pairs: 4,
            ..DpoConfig::default()
        },
        dataset_per_class: 8,
        train_steps: 20,
        ..ServiceConfig::default()
    }
}

pub struct Client {
    pub app: Arc<AppState>,
    pub router: Router,
}

impl Client {
    pub fn new(dir: &std::path::Path, config: ServiceConfig) -> Self {
        let app = AppState::open(dir, config, 1).unwrap();
        Self {
            router: router(app.clone()),
            app,
        }
    }

    pub async fn raw(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        let resp = self.router.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = self.raw(method, uri, body).await;
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, v)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body)).await
    }

    /// Polls a task until it is finished or failed.
    pub async fn wait_task(&self, task_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let (status, task) = self.get(&format!("/tasks/{task_id}")).await;
            assert_eq!(status, StatusCode::OK);
            if task["state"] == "finished" || task["state"] == "failed" {
                return task;
            }
            assert!(Instant::now() < deadline, "task {task_id} stuck: {task}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    /// Enqueues via `uri`, waits, and returns the finished task's result_ref.
    pub async fn run(&self, uri: &str, body: Value) -> String {
        let (status, task) = self.post(uri, body).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{task}");
        let done = self.wait_task(task["task_id"].as_str().unwrap()).await;
        assert_eq!(done["state"], "finished", "{done}");
        done["result_ref"].as_str().unwrap().to_string()
    }

    pub async fn train_root(&self, domain: &str) -> String {
        self.run("/models", serde_json::json!({ "domain": domain, "seed": 1 })).await
    }
}

pub fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn unb64(text: &str) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD.decode(text).unwrap()
}
