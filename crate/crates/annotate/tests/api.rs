//! REST-level tests: full two-stage flow, blinding, auth, replay.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use qualcode::agreement::{self, LabelRating, GOLD_SOURCE};
use qualcode_annotate::model::Sentence;
use qualcode_annotate::service::DEFAULT_PROJECT_ID;
use qualcode_annotate::{router, store, EventStore, Service, State};
use serde_json::{json, Value};
use tower::ServiceExt;

const ADMIN: &str = "admin-secret";

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("Content-Type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

/// Fails if any key or value in a rater-facing payload could reveal authorship.
fn assert_blind(v: &Value, model_names: &[&str]) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                assert!(!["provenance", "source", "sources", "author", "origin"].contains(&k.as_str()), "key {k} in {v}");
                assert_blind(child, model_names);
            }
        }
        Value::Array(a) => a.iter().for_each(|c| assert_blind(c, model_names)),
        Value::String(s) => {
            assert!(!s.starts_with("coder:") && !s.starts_with("model:") && s != GOLD_SOURCE, "value {s}");
            assert!(!model_names.contains(&s.as_str()), "model name {s} leaked");
        }
        _ => {}
    }
}

const MODELS: [&str; 6] = ["llama-7b", "mistral-7b", "zephyr", "tinyllama", "gemma", "phi"];

fn freeze_body(sentences: &[String]) -> Value {
    let mut model_labels = BTreeMap::new();
    let mut golden = BTreeMap::new();
    for s in sentences {
        let per: BTreeMap<String, String> = MODELS.iter().map(|m| (m.to_string(), format!("{m} idea for {s}"))).collect();
        model_labels.insert(s.clone(), per);
        golden.insert(s.clone(), format!("gold idea for {s}"));
    }
    json!({ "model_labels": model_labels, "golden": golden })
}

#[tokio::test]
async fn full_flow_on_default_fixture() {
    let svc = Arc::new(Service::in_memory(ADMIN));
    let raters: Vec<String> = ["e1", "e2", "e3"].map(String::from).to_vec();
    let created = svc.ensure_default_project(&raters).unwrap().unwrap();
    assert!(svc.ensure_default_project(&raters).unwrap().is_none());
    let app = router(svc.clone(), None);
    let tokens = created.rater_tokens;
    let p = DEFAULT_PROJECT_ID;
    let mut rater_payloads = Vec::new();

    let mut pending = 0;
    let mut sentence_ids = Vec::new();
    for r in &raters {
        let (st, tasks) = call(&app, "GET", &format!("/projects/{p}/tasks?rater={r}"), Some(&tokens[r]), None).await;
        assert_eq!(st, StatusCode::OK);
        pending += tasks["tasks"].as_array().unwrap().iter().filter(|t| t["completed"] == false).count();
        sentence_ids = tasks["tasks"].as_array().unwrap().iter().map(|t| t["sentence_id"].as_str().unwrap().to_string()).collect();
        rater_payloads.push(tasks);
    }
    assert_eq!(pending, 45);
    assert_eq!(sentence_ids.len(), 15);

    // Freezing early names the missing submissions.
    let (st, err) = call(&app, "POST", &format!("/projects/{p}/freeze"), Some(ADMIN), Some(freeze_body(&sentence_ids))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains("e1/Quote1"));

    let mut completed_before = 0;
    for (i, r) in raters.iter().enumerate() {
        for (j, s) in sentence_ids.iter().enumerate() {
            let body = json!({"project": p, "rater": r, "sentence": s, "code": format!("{r} code {j}"), "difficulty": 1 + (i + j) % 3});
            let (st, ack) = call(&app, "POST", "/stage1", Some(&tokens[r]), Some(body)).await;
            assert_eq!(st, StatusCode::OK, "{ack}");
            rater_payloads.push(ack);
        }
        let (_, tasks) = call(&app, "GET", &format!("/projects/{p}/tasks?rater={r}"), Some(&tokens[r]), None).await;
        assert_eq!(tasks["completed"], 15);
        completed_before += 15;
    }
    assert_eq!(completed_before, 45);

    let bad = json!({"project": p, "rater": "e1", "sentence": "Quote1", "code": "x", "difficulty": 4});
    assert_eq!(call(&app, "POST", "/stage1", Some(&tokens["e1"]), Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (st, _) = call(&app, "POST", &format!("/projects/{p}/freeze"), Some(ADMIN), Some(freeze_body(&sentence_ids))).await;
    assert_eq!(st, StatusCode::OK);

    let late = json!({"project": p, "rater": "e1", "sentence": "Quote1", "code": "late", "difficulty": 1});
    assert_eq!(call(&app, "POST", "/stage1", Some(&tokens["e1"]), Some(late)).await.0, StatusCode::CONFLICT);

    // Pool: 3 coders + 6 models + GS; each rater sees all but their own label.
    let export = svc.export(p).unwrap();
    assert!(export.labels.values().all(|pool| pool.len() == 10));
    let mut order_e1 = Vec::new();
    for r in &raters {
        let (_, tasks) = call(&app, "GET", &format!("/projects/{p}/tasks?rater={r}"), Some(&tokens[r]), None).await;
        for t in tasks["tasks"].as_array().unwrap() {
            let cards = t["labels"].as_array().unwrap();
            assert_eq!(cards.len(), 9);
            assert!(cards.iter().all(|c| !c["text"].as_str().unwrap().starts_with(r.as_str())));
            for (k, c) in cards.iter().enumerate() {
                let body = json!({"project": p, "rater": r, "sentence": t["sentence_id"], "handle": c["handle"], "value": 1 + k % 5});
                let (st, ack) = call(&app, "POST", "/stage2/ratings", Some(&tokens[r]), Some(body)).await;
                assert_eq!(st, StatusCode::OK, "{ack}");
            }
        }
        if r == "e1" {
            order_e1 = tasks["tasks"][0]["labels"].as_array().unwrap().iter().map(|c| c["handle"].clone()).collect();
        }
        rater_payloads.push(tasks);
    }
    let (_, e2_tasks) = call(&app, "GET", &format!("/projects/{p}/tasks?rater=e2"), Some(&tokens["e2"]), None).await;
    let order_e2: Vec<Value> = e2_tasks["tasks"][0]["labels"].as_array().unwrap().iter().map(|c| c["handle"].clone()).collect();
    assert_ne!(order_e1, order_e2, "raters get independent permutations");
    assert_eq!(e2_tasks["completed"], 15);
    rater_payloads.push(e2_tasks);

    // Handle from another rater's assignment (e1's own label) is refused for e1.
    let pool = &svc.export(p).unwrap().labels["Quote1"];
    let own = pool.iter().find(|l| l.text.starts_with("e1 code")).unwrap().handle.clone();
    let body = json!({"project": p, "rater": "e1", "sentence": "Quote1", "handle": own, "value": 5});
    assert_eq!(call(&app, "POST", "/stage2/ratings", Some(&tokens["e1"]), Some(body)).await.0, StatusCode::FORBIDDEN);
    let body = json!({"project": p, "rater": "e1", "sentence": "Quote1", "handle": order_e1[0], "value": 0});
    assert_eq!(call(&app, "POST", "/stage2/ratings", Some(&tokens["e1"]), Some(body)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    for payload in &rater_payloads {
        assert_blind(payload, &MODELS);
    }

    assert_eq!(call(&app, "POST", &format!("/projects/{p}/close"), Some(ADMIN), None).await.0, StatusCode::OK);
    let (st, bundle) = call(&app, "GET", &format!("/projects/{p}/export"), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(bundle["completeness"]["complete"], true);
    assert_eq!(bundle["difficulty"].as_array().unwrap().len(), 45);
    // 3 raters x 15 sentences x 9 visible labels, no shared texts.
    assert_eq!(bundle["label_ratings"].as_array().unwrap().len(), 3 * 15 * 9);
    let (st, csv) = call(&app, "GET", &format!("/projects/{p}/export?format=ratings"), Some(ADMIN), None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(csv.as_str().unwrap().starts_with("expert,sentence,source,value\n"));
}

#[tokio::test]
async fn auth_rules() {
    let svc = Arc::new(Service::in_memory(ADMIN));
    let app = router(svc.clone(), None);
    let body = json!({"id": "p", "sentences": [{"id": "s1", "text": "It rains."}], "raters": ["a", "b"]});
    assert_eq!(call(&app, "POST", "/projects", None, Some(body.clone())).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&app, "POST", "/projects", Some("nope"), Some(body.clone())).await.0, StatusCode::FORBIDDEN);
    let (st, created) = call(&app, "POST", "/projects", Some(ADMIN), Some(body.clone())).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(call(&app, "POST", "/projects", Some(ADMIN), Some(body)).await.0, StatusCode::CONFLICT);
    let empty = json!({"id": "q", "sentences": [], "raters": ["a"]});
    assert_eq!(call(&app, "POST", "/projects", Some(ADMIN), Some(empty)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let ta = created["rater_tokens"]["a"].as_str().unwrap();
    assert_eq!(call(&app, "GET", "/projects/p/tasks?rater=a", Some(ta), None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "GET", "/projects/p/tasks?rater=b", Some(ta), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", "/projects/p/tasks?rater=a", Some("forged"), None).await.0, StatusCode::UNAUTHORIZED);
    let as_b = json!({"project": "p", "rater": "b", "sentence": "s1", "code": "rain", "difficulty": 1});
    assert_eq!(call(&app, "POST", "/stage1", Some(ta), Some(as_b)).await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", "/projects/p/export", Some(ta), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", "/projects/p", Some(ta), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(call(&app, "GET", "/projects/zz/tasks?rater=a", Some(ADMIN), None).await.0, StatusCode::NOT_FOUND);
}

fn rating(expert: &str, sentence: &str, source: &str, value: u8) -> LabelRating {
    LabelRating { expert: expert.into(), sentence: sentence.into(), source: source.into(), value }
}

#[test]
fn export_feeds_dgs() {
    // Two sentences, three experts; ratings chosen so the model's DGS is
    // 1.0 on s1 and -0.5 on s2 when computed directly.
    let svc = Service::in_memory(ADMIN);
    let sentences = vec![Sentence { id: "s1".into(), text: "One.".into() }, Sentence { id: "s2".into(), text: "Two.".into() }];
    svc.create_project(qualcode_annotate::CreateProject {
        id: "p".into(),
        sentences,
        raters: vec!["e1".into(), "e2".into(), "e3".into()],
        exclude_own_labels: true,
        seed: Some(1),
    })
    .unwrap();
    for r in ["e1", "e2", "e3"] {
        for s in ["s1", "s2"] {
            svc.submit_stage1(qualcode_annotate::Stage1Request {
                project: "p".into(),
                rater: r.into(),
                sentence: s.into(),
                code: format!("{r}-{s}"),
                difficulty: 2,
            })
            .unwrap();
        }
    }
    let one = |v: &str| -> BTreeMap<String, String> { [("m".to_string(), v.to_string())].into() };
    svc.freeze(
        "p",
        qualcode_annotate::FreezeRequest {
            model_labels: [("s1".into(), one("model-s1")), ("s2".into(), one("model-s2"))].into(),
            golden: [("s1".into(), "gold-s1".into()), ("s2".into(), "gold-s2".into())].into(),
        },
    )
    .unwrap();
    let script = [
        ("e1", "s1", 5, 3),
        ("e2", "s1", 4, 4),
        ("e3", "s1", 2, 0),
        ("e1", "s2", 2, 4),
        ("e2", "s2", 0, 5),
        ("e3", "s2", 4, 3),
    ];
    let handle_of = |s: &str, text: &str| {
        svc.export("p").unwrap().labels[s].iter().find(|l| l.text == text).unwrap().handle.clone()
    };
    let mut direct = Vec::new();
    for (e, s, model_v, gold_v) in script {
        for (text, source, v) in [(format!("model-{s}"), "model:m", model_v), (format!("gold-{s}"), GOLD_SOURCE, gold_v)] {
            if v == 0 {
                continue;
            }
            svc.submit_rating(qualcode_annotate::RatingRequest {
                project: "p".into(),
                rater: e.into(),
                sentence: s.into(),
                handle: handle_of(s, &text),
                value: v,
            })
            .unwrap();
            direct.push(rating(e, s, source, v));
        }
    }
    let bundle = svc.export("p").unwrap();
    assert!(!bundle.completeness.complete);
    let parsed: Vec<LabelRating> = csv::Reader::from_reader(bundle.label_ratings_csv().as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    let mut sorted_direct = direct.clone();
    sorted_direct.sort_by(|a, b| (&a.expert, &a.sentence, &a.source).cmp(&(&b.expert, &b.sentence, &b.source)));
    let mut sorted_parsed = parsed.clone();
    sorted_parsed.sort_by(|a, b| (&a.expert, &a.sentence, &a.source).cmp(&(&b.expert, &b.sentence, &b.source)));
    assert_eq!(sorted_parsed, sorted_direct);
    assert_eq!(agreement::dgs(&parsed, "model:m", "s1").unwrap(), 1.0);
    assert_eq!(agreement::dgs(&parsed, "model:m", "s2").unwrap(), -0.5);
}

#[test]
fn log_replay_reconstructs_state() {
    let dir = tempfile::tempdir().unwrap();
    let sentences = vec![Sentence { id: "s1".into(), text: "It rains.".into() }];
    let expected;
    {
        let (store, state) = EventStore::open(dir.path()).unwrap();
        let svc = Service::new(store.with_snapshot_every(2), state, ADMIN);
        svc.create_project(qualcode_annotate::CreateProject {
            id: "p".into(),
            sentences,
            raters: vec!["a".into()],
            exclude_own_labels: false,
            seed: None,
        })
        .unwrap();
        for (code, d) in [("rain", 1), ("weather", 2), ("storm", 3)] {
            svc.submit_stage1(qualcode_annotate::Stage1Request {
                project: "p".into(),
                rater: "a".into(),
                sentence: "s1".into(),
                code: code.into(),
                difficulty: d,
            })
            .unwrap();
        }
        expected = (*svc.state()).clone();
    }
    let events = store::read_log(dir.path()).unwrap();
    assert_eq!(events.len(), 4);
    assert_eq!(State::replay(&events).unwrap(), expected);
    // Snapshot at seq 4 plus empty tail, and after removing the snapshot, full replay.
    let reopened = Service::open(dir.path(), ADMIN).unwrap();
    assert_eq!(*reopened.state(), expected);
    std::fs::remove_file(dir.path().join(store::SNAPSHOT_FILE)).unwrap();
    let replayed = Service::open(dir.path(), ADMIN).unwrap();
    assert_eq!(*replayed.state(), expected);
    let entry = expected.projects["p"].stage1_entry("a", "s1").unwrap();
    assert_eq!((entry.code.as_str(), entry.version), ("storm", 3));
}

#[tokio::test]
async fn serves_ui_bundle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>annotate</h1>").unwrap();
    let app = router(Arc::new(Service::in_memory(ADMIN)), Some(dir.path().to_path_buf()));
    let (st, body) = call(&app, "GET", "/index.html", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, Value::String("<h1>annotate</h1>".into()));
}
