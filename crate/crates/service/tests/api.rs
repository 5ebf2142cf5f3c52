use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use percept_core::cells::{Metric, ValueMethod};
use percept_core::harness::{HarnessConfig, SetKind, Workbench};
use percept_core::injection::{decide, CompiledPlan};
use percept_core::nn::{build_model, default_architecture, sgd_fit, Hyper};
use percept_core::ontology::{ConceptDag, TYPE_A};
use percept_core::trains::{generate_dataset, DatasetConfig};
use percept_service::*;
use serde_json::{json, Value};
use tower::ServiceExt;

const RC: &str = "∃has.ReinforcedCar";

struct Fixture {
    _dir: tempfile::TempDir,
    state: Arc<AppState>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let dag = ConceptDag::default_dag();
        let cfg = DatasetConfig { n: 1600, balance: 0.5, seed: 31, ..DatasetConfig::default() };
        let manifest = generate_dataset(&cfg, dag, dir.path()).unwrap();
        let train = manifest.labeled(&(0..800).collect::<Vec<_>>(), TYPE_A).unwrap();
        let model = build_model(&[1, 32, 128], &default_architecture(32, 128), 1).unwrap();
        let hyper = Hyper { lr: 0.01, batch: 32, epochs: 3, momentum: 0.9, weight_decay: 0.0 };
        let model = sgd_fit(&model, &train, &hyper, 2).unwrap().model;
        let config = HarnessConfig { seed: 3, validation_size: 20, set_cap: 200, ..HarnessConfig::default() };
        let wb = Workbench::new(model, manifest, dag.clone(), config).unwrap();
        let split = wb.split(RC).unwrap();
        let sel = wb.concept_selection(&split, Metric::Intersection, ValueMethod::Median).unwrap().expect("selection");
        let probe = wb.train_probe(&split).unwrap().probe;
        let state = AppState::new(wb, vec![sel], vec![probe]).unwrap();
        Fixture { _dir: dir, state: Arc::new(state) }
    })
}

async fn call(req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(fixture().state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_forward(body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/forward").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b) = call(req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn encode(s: &str) -> String {
    s.bytes().map(|b| if b.is_ascii_alphanumeric() || b == b'.' { (b as char).to_string() } else { format!("%{b:02X}") }).collect()
}

fn sample_id(row: usize) -> String {
    fixture().state.wb.manifest.records[row].id.clone()
}

#[tokio::test]
async fn summary_and_schema() {
    let (s, v) = get_json("/api/summary").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["task"], TYPE_A);
    assert_eq!(v["manifest"]["samples"], 1600);
    assert_eq!(v["manifest"]["task_positives"], 800);
    assert_eq!(v["scope_neurons"], 96);
    assert_eq!(v["selections"], json!([RC]));
    let (s, v) = get_json("/api/schema").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["endpoints"].as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn concepts_report_selection() {
    let (_, v) = get_json("/api/concepts").await;
    let list = v["concepts"].as_array().unwrap();
    let rc = list.iter().find(|c| c["name"] == RC).unwrap();
    let sel = fixture().state.selection(RC).unwrap();
    assert_eq!(rc["selected"], true);
    assert_eq!(rc["relevant"], true);
    assert_eq!(rc["probe"], true);
    assert_eq!(rc["neurons"], sel.selection.neurons.len());
    assert_eq!(rc["threshold"].as_f64().unwrap(), sel.selection.threshold);
    let open = list.iter().find(|c| c["name"] == "∃has.OpenRoofCar").unwrap();
    assert_eq!(open["selected"], false);
    assert_eq!(open["relevant"], false);
}

#[tokio::test]
async fn samples_filter_and_limit() {
    let (s, v) = get_json(&format!("/api/samples?label={}&limit=7", encode("TypeA=false,∃has.PassengerCar=true"))).await;
    assert_eq!(s, StatusCode::OK);
    let list = v["samples"].as_array().unwrap();
    assert_eq!(list.len(), 7);
    let wb = &fixture().state.wb;
    let expected =
        wb.manifest.records.iter().filter(|r| r.label(TYPE_A) == Some(false) && r.label("∃has.PassengerCar") == Some(true)).count();
    assert_eq!(v["total"], expected);
    for item in list {
        assert_eq!(item["labels"][TYPE_A], false);
        assert_eq!(item["labels"]["∃has.PassengerCar"], true);
    }
    let (_, all) = get_json("/api/samples").await;
    assert_eq!(all["samples"].as_array().unwrap().len(), DEFAULT_LIMIT);
    assert_eq!(all["total"], 1600);
    for bad in ["/api/samples?label=TypeA", "/api/samples?label=Nope%3Dtrue", "/api/samples?limit=x", "/api/samples?limit=10001"] {
        assert_eq!(get_json(bad).await.0, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
}

#[tokio::test]
async fn image_is_png() {
    let id = sample_id(5);
    let (s, body) = call(Request::get(format!("/api/samples/{id}/image")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let img = image::load_from_memory_with_format(&body, image::ImageFormat::Png).unwrap().to_luma8();
    let raw = fixture().state.wb.manifest.load_image(5).unwrap();
    assert_eq!((img.width() as usize, img.height() as usize), (raw.width, raw.height));
    assert_eq!(img.into_raw(), raw.pixels);
    let (s, _) = call(Request::get("/api/samples/nope/image").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sensitivity_marks_selected() {
    let (s, v) = get_json(&format!("/api/sensitivity/{}?metric=intersection", encode(RC))).await;
    assert_eq!(s, StatusCode::OK);
    let neurons = v["neurons"].as_array().unwrap();
    assert_eq!(neurons.len(), 96);
    let threshold = v["threshold"].as_f64().unwrap();
    let selected: Vec<&Value> = neurons.iter().filter(|n| n["selected"] == true).collect();
    assert_eq!(selected.len(), fixture().state.selection(RC).unwrap().selection.neurons.len());
    assert!(selected.iter().all(|n| n["value"].as_f64().unwrap() >= threshold));
    // Another metric has no matching selection.
    let (_, v) = get_json(&format!("/api/sensitivity/{}?metric=spearman", encode(RC))).await;
    assert!(v["threshold"].is_null());
    assert_eq!(get_json("/api/sensitivity/Nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&format!("/api/sensitivity/{}?metric=foo", encode(RC))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn empty_injection_is_plain_forward() {
    let wb = &fixture().state.wb;
    for row in [0, 17, 801] {
        let id = sample_id(row);
        let plain = wb.model.score(&wb.manifest.load_image(row).unwrap().to_tensor()).unwrap();
        let (s, v) = post_forward(json!({ "sample_id": id, "injections": [] })).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["output_score"].as_f64().unwrap(), plain);
        assert_eq!(v["baseline_score"].as_f64().unwrap(), plain);
        assert_eq!(v["output_label"], decide(plain));
        assert!(v["injected_neurons"].as_array().unwrap().is_empty());
        assert_eq!(v["probe_readouts"].as_array().unwrap().len(), 1);
        let (_, off) = post_forward(json!({ "sample_id": id, "injections": [{ "concept": RC, "state": "off" }] })).await;
        assert_eq!(off, v);
    }
}

#[tokio::test]
async fn injection_matches_harness() {
    let state = &fixture().state;
    let wb = &state.wb;
    let split = wb.split(RC).unwrap();
    let sel = state.selection(RC).unwrap();
    let rows: Vec<usize> = split.sets.get(SetKind::S1).iter().take(25).copied().collect();
    assert!(!rows.is_empty());
    let expected = wb.scores(&rows, &CompiledPlan::new(&wb.model, &[&sel.present]).unwrap()).unwrap();
    for (&row, &score) in rows.iter().zip(&expected) {
        let body = json!({ "sample_id": sample_id(row), "injections": [{ "concept": RC, "state": "present" }] });
        let (s, v) = post_forward(body.clone()).await;
        assert_eq!(s, StatusCode::OK);
        assert!((v["output_score"].as_f64().unwrap() - score).abs() < 1e-12);
        assert_eq!(v["injected_neurons"].as_array().unwrap().len(), sel.present.len());
        assert_eq!(post_forward(body).await.1, v);
    }
}

#[tokio::test]
async fn forward_errors() {
    let id = sample_id(0);
    let cases = [
        (json!({ "sample_id": "missing", "injections": [] }), StatusCode::NOT_FOUND),
        (json!({ "sample_id": id, "injections": [{ "concept": RC, "state": "maybe" }] }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "sample_id": id, "injections": [{ "concept": RC }] }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "sample_id": id, "injections": "x" }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "injections": [] }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "sample_id": id, "injections": [{ "concept": "Nope", "state": "present" }] }), StatusCode::UNPROCESSABLE_ENTITY),
        (
            json!({ "sample_id": id, "injections": [{ "concept": RC, "state": "present" }, { "concept": RC, "state": "absent" }] }),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (json!({ "sample_id": id, "injections": [{ "concept": "EmptyTrain", "state": "present" }] }), StatusCode::CONFLICT),
    ];
    for (body, status) in cases {
        let (s, v) = post_forward(body.clone()).await;
        assert_eq!(s, status, "{body}");
        assert!(v["error"].is_string());
    }
    let req = Request::post("/api/forward").body(Body::from("{not json")).unwrap();
    assert_eq!(call(req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}
