mod common;

use axum::http::StatusCode;
use common::{b64, tiny_config, Client};
use prefpaint_core::image::{parse_pgm, Image, Mask};
use serde_json::{json, Value};

fn ratings(batch: &Value, value_for: impl Fn(usize) -> i32) -> Value {
    let records: Vec<Value> = batch["items"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, item)| json!({ "sample_id": item["sample_id"], "value": value_for(i) }))
        .collect();
    json!({ "records": records, "rater_id": "tester" })
}

async fn sample_batch(c: &Client, node: &str, body: Value) -> Value {
    let batch_id = c.run(&format!("/models/{node}/sample"), body).await;
    let (status, batch) = c.get(&format!("/batches/{batch_id}")).await;
    assert_eq!(status, StatusCode::OK);
    batch
}

fn gradient_image() -> Image {
    Image::new(16, (0..256).map(|i| (i as f32 / 255.0) * 2.0 - 1.0).collect()).unwrap()
}

#[tokio::test]
async fn fresh_install_then_root_training() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let (status, tree) = c.get("/tree").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(tree["nodes"], json!([]));

    let root = c.train_root("shapes").await;
    let (_, tree) = c.get("/tree").await;
    assert_eq!(tree["roots"], json!([root]));
    assert_eq!(tree["nodes"][0]["parent_id"], Value::Null);
    assert_eq!(tree["nodes"][0]["kind"], "base");

    // one root per domain
    let (status, _) = c.post("/models", json!({ "domain": "shapes" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, other) = c.get("/tree?domain=elsewhere").await;
    assert_eq!(other["nodes"], json!([]));
}

#[tokio::test]
async fn sampling_assigns_prompts_round_robin() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let root = c.train_root("shapes").await;
    let batch = sample_batch(&c, &root, json!({ "count": 8 })).await;
    let items = batch["items"].as_array().unwrap();
    assert_eq!(items.len(), 8);
    assert_eq!(batch["status"], "open");
    assert_eq!(batch["node_id"], root);

    let vocab = ["circle", "square", "cross"];
    let mut expected = [0usize; 3];
    for i in 0..8 {
        expected[i % 3] += 1;
    }
    for (k, token) in vocab.iter().enumerate() {
        let n = items.iter().filter(|it| it["prompt"] == *token).count();
        assert_eq!(n, expected[k], "{token}");
    }
    // a group shares its conditioning image and mask
    for it in items {
        let mate = items.iter().find(|o| o["group"] == it["group"]).unwrap();
        assert_eq!(it["mask_ref"], mate["mask_ref"]);
        assert_eq!(it["known_ref"], mate["known_ref"]);
    }

    for bad in [json!({ "count": 0 }), json!({ "count": 65 }), json!({ "count": 2, "prompts": ["blob"] })] {
        let (status, body) = c.post(&format!("/models/{root}/sample"), bad).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    let (status, _) = c.post("/models/99/sample", json!({ "count": 2 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn feedback_rules_and_pair_counts() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let root = c.train_root("shapes").await;
    let batch = sample_batch(&c, &root, json!({ "count": 8, "prompts": ["circle"] })).await;
    let id = batch["batch_id"].as_str().unwrap();
    let uri = format!("/batches/{id}/feedback");

    let mut partial = ratings(&batch, |_| 0);
    partial["records"].as_array_mut().unwrap().pop();
    let (status, body) = c.post(&uri, partial).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("all items must be rated"), "{body}");

    let (status, body) = c.post(&uri, ratings(&batch, |i| if i == 0 { 1 } else { 0 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("protocol"), "{body}");

    // one group with 4 likes and 4 dislikes: 16 candidate pairs, capped at 4
    let (likes, dislikes, cap) = (4usize, 4usize, c.app.service.config().max_pairs_per_group);
    let (status, body) = c.post(&uri, ratings(&batch, |i| if i % 2 == 0 { 0 } else { -1 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["accepted"], 8);
    assert_eq!(body["pairs_formed"], (likes * dislikes).min(cap));
    assert!(body.get("warning").is_none());

    let (status, _) = c.post(&uri, ratings(&batch, |_| 0)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, stored) = c.get(&format!("/batches/{id}")).await;
    assert_eq!(stored["status"], "submitted");
    assert_eq!(stored["feedback"].as_array().unwrap().len(), 8);

    let all_liked = sample_batch(&c, &root, json!({ "count": 4 })).await;
    let id = all_liked["batch_id"].as_str().unwrap();
    let (status, body) = c.post(&format!("/batches/{id}/feedback"), ratings(&all_liked, |_| 0)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["pairs_formed"], 0);
    assert!(body["warning"].is_string());

    let (status, _) = c.post("/batches/404/feedback", json!({ "records": [] })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn finetunes_grow_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let root = c.train_root("shapes").await;
    let other_root = c.train_root("other").await;

    let rated = sample_batch(&c, &root, json!({ "count": 6, "prompts": ["cross"] })).await;
    let rated_id = rated["batch_id"].as_str().unwrap().to_string();
    let (_, fb) = c
        .post(&format!("/batches/{rated_id}/feedback"), ratings(&rated, |i| -((i % 2) as i32)))
        .await;
    assert!(fb["pairs_formed"].as_u64().unwrap() > 0);

    let empty = sample_batch(&c, &root, json!({ "count": 3 })).await;
    let empty_id = empty["batch_id"].as_str().unwrap().to_string();
    c.post(&format!("/batches/{empty_id}/feedback"), ratings(&empty, |_| -1)).await;

    let open = sample_batch(&c, &root, json!({ "count": 2 })).await;

    let uri = format!("/models/{root}/finetune");
    let (status, body) = c.post(&uri, json!({ "batch_ids": [empty_id] })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("feedback"), "{body}");
    let (status, _) = c.post(&uri, json!({ "batch_ids": [open["batch_id"]] })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, body) = c
        .post(&format!("/models/{other_root}/finetune"), json!({ "batch_ids": [rated_id] }))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("lineage"), "{body}");
    let (status, _) = c
        .post(&uri, json!({ "batch_ids": [rated_id], "dpo": { "beta_pref": -1.0 } }))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let before = c.get("/tree").await.1["nodes"].as_array().unwrap().len();
    let child = c
        .run(&uri, json!({ "batch_ids": [rated_id, empty_id], "dpo": { "epochs": 2 } }))
        .await;
    let (_, tree) = c.get("/tree").await;
    let nodes = tree["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), before + 1);
    let node = nodes.iter().find(|n| n["node_id"] == child).unwrap();
    assert_eq!(node["parent_id"], root);
    assert_eq!(node["kind"], "adapter");

    // a batch from the root stays usable further down its lineage
    let grandchild = c
        .run(&format!("/models/{child}/finetune"), json!({ "batch_ids": [rated_id] }))
        .await;
    let (_, view) = c.get(&format!("/models/{grandchild}")).await;
    assert_eq!(view["lineage"], json!([root, child, grandchild]));
    assert_eq!(view["node"]["depth"], 2);
}

#[tokio::test]
async fn inference_keeps_known_pixels_and_lands_in_showcase() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let root = c.train_root("shapes").await;
    let image = gradient_image().to_pgm();
    let mask = Mask::rect_hole(16, 3, 5, 6, 7);
    let body = json!({ "image": b64(&image), "mask": b64(&mask.to_pgm()), "prompt": "square", "seed": 5 });
    let uri = format!("/models/{root}/infer");

    let entry_id = c.run(&uri, body.clone()).await;
    let (status, entry) = c.get(&format!("/showcase/{entry_id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(entry["prompt"], "square");
    let (_, output) = c.raw(axum::http::Method::GET, &format!("/blobs/{}", entry["output_ref"].as_str().unwrap()), None).await;
    let (_, uploaded) = c.raw(axum::http::Method::GET, &format!("/blobs/{}", entry["input_ref"].as_str().unwrap()), None).await;
    assert_eq!(uploaded, image, "upload round-trips byte for byte");
    let (_, _, out_px) = parse_pgm(&output).unwrap();
    let (_, _, in_px) = parse_pgm(&image).unwrap();
    for i in 0..256 {
        if mask.is_known(i) {
            assert_eq!(out_px[i], in_px[i], "pixel {i}");
        }
    }

    let (_, showcase) = c.get("/showcase").await;
    assert_eq!(showcase["total"], 1);
    let first = &showcase["entries"][0];
    for field in ["input_ref", "mask_ref", "output_ref", "prompt", "node_id", "created_at"] {
        assert!(!first[field].is_null(), "{field}");
    }

    let again = c.run(&uri, body).await;
    let (_, second) = c.get(&format!("/showcase/{again}")).await;
    assert_eq!(second["output_ref"], entry["output_ref"], "same seed, same bytes");
    let (_, showcase) = c.get("/showcase?per_page=1").await;
    assert_eq!(showcase["entries"][0]["entry_id"], again, "newest first");
}

#[tokio::test]
async fn inference_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let root = c.train_root("shapes").await;
    let uri = format!("/models/{root}/infer");
    let image = b64(&gradient_image().to_pgm());
    let hole = b64(&Mask::rect_hole(16, 0, 0, 4, 4).to_pgm());
    let cases = [
        (json!({ "image": image, "mask": b64(&Mask::all_known(16).to_pgm()), "prompt": "circle" }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "image": b64(&Image::filled(8, 0.0).to_pgm()), "mask": hole, "prompt": "circle" }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "image": image, "mask": hole, "prompt": "triangle" }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "image": b64(b"P2 not binary"), "mask": hole, "prompt": "circle" }), StatusCode::BAD_REQUEST),
        (json!({ "image": "***", "mask": hole, "prompt": "circle" }), StatusCode::BAD_REQUEST),
        (json!({ "image": image, "prompt": "circle" }), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, expected) in cases {
        let (status, resp) = c.post(&uri, body.clone()).await;
        assert_eq!(status, expected, "{body} -> {resp}");
    }
    let (status, _) = c.post("/models/77/infer", json!({ "image": image, "mask": hole, "prompt": "circle" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(c.get("/tasks?kind=infer").await.1, json!([]));
}

#[tokio::test]
async fn task_views_and_blob_lookups() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(dir.path(), tiny_config());
    let root = c.train_root("shapes").await;
    c.run(&format!("/models/{root}/sample"), json!({ "count": 2 })).await;

    let (status, list) = c.get("/tasks").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<u64> = list
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["task_id"].as_str().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ids, vec![2, 1]);
    assert_eq!(c.get("/tasks").await.1, list, "reads do not change state");
    let (_, finished) = c.get("/tasks?state=finished&kind=sample_pairs").await;
    assert_eq!(finished.as_array().unwrap().len(), 1);
    assert_eq!(c.get("/tasks/42").await.0, StatusCode::NOT_FOUND);
    assert_eq!(c.get("/tasks/abc").await.0, StatusCode::NOT_FOUND);

    assert_eq!(c.get("/blobs/not-a-hash").await.0, StatusCode::NOT_FOUND);
    let missing = prefpaint_core::registry::digest(b"never stored");
    assert_eq!(c.get(&format!("/blobs/{missing}")).await.0, StatusCode::NOT_FOUND);

    let (_, cfg) = c.get("/config").await;
    assert_eq!(cfg["image_side"], 16);
    assert_eq!(cfg["prompt_vocab"], json!(["circle", "square", "cross"]));
}

#[tokio::test]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (root, batch_id) = {
        let c = Client::new(dir.path(), tiny_config());
        let root = c.train_root("shapes").await;
        let batch = sample_batch(&c, &root, json!({ "count": 2 })).await;
        c.app.queue.shutdown();
        (root, batch["batch_id"].as_str().unwrap().to_string())
    };
    let c = Client::new(dir.path(), tiny_config());
    assert_eq!(c.get("/tree").await.1["roots"], json!([root]));
    assert_eq!(c.get(&format!("/batches/{batch_id}")).await.0, StatusCode::OK);
    assert_eq!(c.get("/tasks").await.1.as_array().unwrap().len(), 2);
}
