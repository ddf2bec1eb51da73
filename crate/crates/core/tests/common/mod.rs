//! Shared fixtures: an in-process chat-completions stub and synthetic datasets.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use qualcode::corpus::{QuoteCodePair, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

struct StubState {
    codes: BTreeMap<String, String>,
    calls: AtomicUsize,
}

/// Chat-completions server that answers each prompt with the golden code of
/// its target sentence. Lives as long as the value.
pub struct StubServer {
    pub addr: SocketAddr,
    state: Arc<StubState>,
    _runtime: tokio::runtime::Runtime,
}

impl StubServer {
    pub fn start(codes: BTreeMap<String, String>) -> Self {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        let state = Arc::new(StubState { codes, calls: AtomicUsize::new(0) });
        let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(state.clone());
        let addr = runtime.block_on(async {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            let addr = listener.local_addr().unwrap();
            tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
            addr
        });
        Self { addr, state, _runtime: runtime }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Requests the server has answered.
    pub fn calls(&self) -> usize {
        self.state.calls.load(Ordering::SeqCst)
    }
}

async fn chat(State(state): State<Arc<StubState>>, Json(body): Json<Value>) -> Json<Value> {
    state.calls.fetch_add(1, Ordering::SeqCst);
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    let quote = prompt.rsplit("Sentence: ").next().unwrap_or_default().trim_end_matches("\nCode:");
    let code = state.codes.get(quote).cloned().unwrap_or_else(|| "no idea".into());
    Json(json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": code}}]}))
}

const WORDS: [&str; 24] = [
    "people", "feel", "worried", "about", "work", "sleep", "food", "money", "family", "time", "learning", "language",
    "friends", "weather", "stress", "future", "home", "city", "always", "never", "often", "good", "bad", "really",
];

/// `n` pairs with unique quotes and short word-only codes.
pub fn synthetic_pairs(n: usize, seed: u64, split: Split) -> Vec<QuoteCodePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(6..18);
            let mut quote: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            quote[0] = "I";
            let quote = format!("{} number {i}.", quote.join(" "));
            let code_len = rng.random_range(1..4);
            let code: Vec<&str> = (0..code_len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            QuoteCodePair {
                id: format!("pair-{i:03}"),
                quote,
                code: code.join(" "),
                source: format!("src{}", i % 3),
                split,
            }
        })
        .collect()
}

pub fn code_map(pairs: &[QuoteCodePair]) -> BTreeMap<String, String> {
    pairs.iter().map(|p| (p.quote.clone(), p.code.clone())).collect()
}
