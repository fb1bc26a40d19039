use std::sync::Arc;
use std::time::Duration;

use gotcha_core::dialog_model::ModelDims;
use gotcha_core::gallery::{gen_synthetic, Gallery, SyntheticSpec};
use gotcha_core::service::{router, AppState, ServiceConfig};
use gotcha_core::trainer::{Checkpoint, TrainConfig};
use serde_json::{json, Value};

struct Server {
    base: String,
    client: reqwest::Client,
    gallery: Gallery,
}

impl Server {
    async fn start(with_model: bool, ttl: Duration) -> Self {
        let gallery = gen_synthetic(SyntheticSpec {
            n: 60,
            attrs: 40,
            feat_dim: 8,
            noise: 0.1,
            seed: 21,
        })
        .unwrap();
        let ckpt = Checkpoint::fresh(TrainConfig::default(), ModelDims::new(40, 8, 8).unwrap()).unwrap();
        let mut config = ServiceConfig::from_checkpoint(&ckpt);
        config.ttl = ttl;
        let model = with_model.then(|| ckpt.params.clone());
        let state = Arc::new(AppState::new(gallery.clone(), model, config).unwrap());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
        Self {
            base,
            client: reqwest::Client::new(),
            gallery,
        }
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    async fn create(&self, body: Value) -> (String, Value) {
        let (status, v) = self.post("/sessions", body).await;
        assert_eq!(status, 201, "{v}");
        (v["session_id"].as_str().unwrap().to_owned(), v)
    }
}

fn zeros() -> Value {
    json!({ "relevance": vec![0; 40] })
}

#[tokio::test]
async fn create_returns_a_gallery_candidate() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    let (_, a) = s.create(json!({ "seed": 3 })).await;
    let (_, b) = s.create(json!({ "seed": 3 })).await;
    assert_eq!(a["round"], 1);
    assert_eq!(a["disclosure_budget"], 20);
    assert_eq!(a["candidate"]["id"], b["candidate"]["id"]);
    assert_ne!(a["session_id"], b["session_id"]);
    let id = a["candidate"]["id"].as_str().unwrap();
    let index = s.gallery.index_of(id).expect("candidate is in the gallery");
    let attrs: Vec<i8> = serde_json::from_value(a["candidate"]["attributes"].clone()).unwrap();
    assert_eq!(attrs, s.gallery.attributes(index));

    let (status, item) = s.get(&format!("/gallery/items/{id}")).await;
    assert_eq!(status, 200);
    assert_eq!(item["id"], id);
    assert_eq!(s.get("/gallery/items/missing").await.0, 404);
}

#[tokio::test]
async fn create_rejects_bad_requests() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    assert_eq!(s.post("/sessions", json!({ "mode": "telepathy" })).await.0, 400);
    assert_eq!(s.post("/sessions", json!({ "schedule": [0.1, 0.5] })).await.0, 400);
    let r = s
        .client
        .post(format!("{}/sessions", s.base))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);

    let empty = Server::start(false, Duration::from_secs(60)).await;
    assert_eq!(empty.post("/sessions", json!({})).await.0, 503);
    let (status, health) = empty.get("/healthz").await;
    assert_eq!(status, 200);
    assert_eq!(health["model_loaded"], false);
}

#[tokio::test]
async fn feedback_flow_and_state() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    let (sid, created) = s.create(json!({})).await;

    let (status, state) = s.get(&format!("/sessions/{sid}")).await;
    assert_eq!(status, 200);
    assert_eq!(state["round"], 1);
    assert_eq!(state["transcript"].as_array().unwrap().len(), 0);

    let (status, next) = s.post(&format!("/sessions/{sid}/feedback"), zeros()).await;
    assert_eq!(status, 200);
    assert_eq!(next["round"], 2);
    assert_eq!(next["done"], false);
    assert_eq!(next["disclosure_budget"], 28);
    assert_ne!(next["candidate"]["id"], created["candidate"]["id"]);

    let (_, state) = s.get(&format!("/sessions/{sid}")).await;
    let transcript = state["transcript"].as_array().unwrap();
    assert_eq!(transcript.len(), 1);
    assert_eq!(transcript[0]["candidate_id"], created["candidate"]["id"]);
    assert_eq!(state["history"].as_array().unwrap().len(), 2);

    for (body, what) in [
        (json!({ "relevance": vec![0; 39] }), "short"),
        (json!({ "relevance": vec![2; 40] }), "out of range"),
        (json!({ "relevance": vec![1; 40] }), "over budget"),
        (json!({ "relevance": "yes" }), "wrong type"),
    ] {
        assert_eq!(s.post(&format!("/sessions/{sid}/feedback"), body).await.0, 422, "{what}");
    }
    assert_eq!(s.get("/sessions/nope").await.0, 404);
    assert_eq!(s.post("/sessions/nope/feedback", zeros()).await.0, 404);
}

#[tokio::test]
async fn full_disclosure_has_no_budget() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    let (sid, created) = s.create(json!({ "mode": "full" })).await;
    assert_eq!(created["disclosure_budget"], 40);
    let (status, _) = s.post(&format!("/sessions/{sid}/feedback"), json!({ "relevance": vec![-1; 40] })).await;
    assert_eq!(status, 200);
}

#[tokio::test]
async fn rounds_are_capped_and_never_repeat() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    let (sid, created) = s.create(json!({ "seed": 8 })).await;
    let mut shown = vec![created["candidate"]["id"].clone()];
    for round in 1..=5 {
        let (status, v) = s.post(&format!("/sessions/{sid}/feedback"), zeros()).await;
        assert_eq!(status, 200);
        assert_eq!(v["done"], round == 5);
        shown.push(v["candidate"]["id"].clone());
    }
    let mut unique = shown.clone();
    unique.sort_by_key(|v| v.to_string());
    unique.dedup();
    assert_eq!(unique.len(), shown.len());
    assert_eq!(s.post(&format!("/sessions/{sid}/feedback"), zeros()).await.0, 409);
}

#[tokio::test]
async fn confirm_closes_the_session() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    let (sid, created) = s.create(json!({})).await;
    let first = created["candidate"]["id"].clone();
    let (_, next) = s.post(&format!("/sessions/{sid}/feedback"), zeros()).await;
    assert_eq!(s.post(&format!("/sessions/{sid}/confirm"), json!({ "candidate_id": first })).await.0, 409);
    let (status, body) = s
        .post(&format!("/sessions/{sid}/confirm"), json!({ "candidate_id": next["candidate"]["id"] }))
        .await;
    assert_eq!(status, 200);
    assert_eq!(body["done"], true);
    assert_eq!(s.post(&format!("/sessions/{sid}/feedback"), zeros()).await.0, 409);
    let (_, state) = s.get(&format!("/sessions/{sid}")).await;
    assert_eq!(state["matched"], true);
    assert_eq!(s.post("/sessions/nope/confirm", json!({ "candidate_id": "x" })).await.0, 404);
}

#[tokio::test]
async fn interleaved_sessions_stay_isolated() {
    let s = Server::start(true, Duration::from_secs(60)).await;
    let mut budget_one = vec![1; 20];
    budget_one.extend([0; 20]);
    let feedback = json!({ "relevance": budget_one });

    let (solo, _) = s.create(json!({ "seed": 4 })).await;
    let mut alone = Vec::new();
    for _ in 0..3 {
        alone.push(s.post(&format!("/sessions/{solo}/feedback"), feedback.clone()).await.1["candidate"]["id"].clone());
    }

    let (a, _) = s.create(json!({ "seed": 4 })).await;
    let (b, _) = s.create(json!({ "seed": 5 })).await;
    let mut mixed = Vec::new();
    for _ in 0..3 {
        s.post(&format!("/sessions/{b}/feedback"), zeros()).await;
        mixed.push(s.post(&format!("/sessions/{a}/feedback"), feedback.clone()).await.1["candidate"]["id"].clone());
    }
    assert_eq!(alone, mixed);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let s = Server::start(true, Duration::from_millis(50)).await;
    let (sid, _) = s.create(json!({})).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert_eq!(s.get(&format!("/sessions/{sid}")).await.0, 404);
}
