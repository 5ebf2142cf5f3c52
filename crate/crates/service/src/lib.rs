//! JSON-over-HTTP view of one model, its manifest, concept selections and
//! probes. Everything is loaded once and never mutated by a request.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use percept_core::cells::{scan_columns, Metric};
use percept_core::harness::{ConceptSelection, HarnessError, Workbench};
use percept_core::injection::{decide, forward_compiled, CompiledPlan, ConceptState, InjectionPlan};
use percept_core::probes::{probe_predict, Probe};
use percept_core::trains::LabelFilter;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_LIMIT: usize = 50;
pub const MAX_LIMIT: usize = 10_000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<HarnessError> for ServiceError {
    fn from(e: HarnessError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// Loaded artifacts shared by every request.
#[derive(Debug)]
pub struct AppState {
    pub wb: Workbench,
    selections: BTreeMap<String, ConceptSelection>,
    probes: Vec<Probe>,
    ids: HashMap<String, usize>,
}

impl AppState {
    /// Checks that every selection and probe fits the workbench's model.
    pub fn new(wb: Workbench, selections: Vec<ConceptSelection>, probes: Vec<Probe>) -> Result<Self, ServiceError> {
        let mut by_concept = BTreeMap::new();
        for sel in selections {
            let concept = wb.canonical(sel.concept()).map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
            for plan in [&sel.present, &sel.absent] {
                CompiledPlan::new(&wb.model, &[plan]).map_err(|e| ServiceError::Unprocessable(format!("selection {concept}: {e}")))?;
            }
            if by_concept.insert(concept.clone(), sel).is_some() {
                return Err(ServiceError::Unprocessable(format!("two selections for {concept}")));
            }
        }
        for p in &probes {
            if let Some(id) = p.input_neurons.iter().find(|&&id| wb.model.global_index(id).is_none()) {
                return Err(ServiceError::Unprocessable(format!("probe {} reads {id}, which the model lacks", p.concept)));
            }
        }
        let ids = wb.manifest.records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Self { wb, selections: by_concept, probes, ids })
    }

    pub fn selection(&self, concept: &str) -> Option<&ConceptSelection> {
        self.selections.get(concept)
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    fn row(&self, id: &str) -> Result<usize, ServiceError> {
        self.ids.get(id).copied().ok_or_else(|| ServiceError::NotFound(format!("sample '{id}'")))
    }

    fn concept(&self, name: &str) -> Result<String, ServiceError> {
        self.wb.canonical(name).map_err(|_| ServiceError::NotFound(format!("concept '{name}'")))
    }

    pub fn summary(&self) -> Value {
        let model = &self.wb.model;
        let task = self.wb.dag.task();
        let positives = self.wb.manifest.records.iter().filter(|r| r.label(task) == Some(true)).count();
        json!({
            "task": task,
            "model": {
                "input_shape": model.input_shape(),
                "layers": model.layer_specs(),
                "neuron_count": model.neuron_count(),
                "param_count": model.param_count(),
                "seed": model.seed(),
            },
            "manifest": {
                "samples": self.wb.manifest.len(),
                "task_positives": positives,
            },
            "scope": self.wb.config.scope,
            "scope_neurons": self.wb.scope().len(),
            "concept_count": self.wb.dag.len(),
            "selections": self.selections.keys().collect::<Vec<_>>(),
            "probes": self.probes.iter().map(|p| &p.concept).collect::<Vec<_>>(),
        })
    }

    pub fn concepts(&self) -> Result<Value, ServiceError> {
        let relevant = self.wb.relevant_set()?;
        let probed: HashSet<&str> = self.probes.iter().map(|p| p.concept.as_str()).collect();
        let list: Vec<Value> = self
            .wb
            .dag
            .names()
            .map(|name| {
                let sel = self.selections.get(name);
                json!({
                    "name": name,
                    "relevant": relevant.contains(name),
                    "selected": sel.is_some(),
                    "neurons": sel.map_or(0, |s| s.selection.neurons.len()),
                    "threshold": sel.map(|s| s.selection.threshold),
                    "metric": sel.map(|s| s.selection.metric),
                    "method": sel.map(|s| s.method),
                    "validation_score": sel.map(|s| s.selection.validation_score),
                    "probe": probed.contains(name),
                })
            })
            .collect();
        Ok(json!({ "concepts": list }))
    }

    pub fn samples(&self, label: Option<&str>, limit: Option<usize>) -> Result<Value, ServiceError> {
        let filter = LabelFilter::parse(label.unwrap_or("")).map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        for (c, _) in &filter.terms {
            self.concept(c).map_err(|_| ServiceError::Unprocessable(format!("unknown concept '{c}' in label filter")))?;
        }
        let limit = limit.unwrap_or(DEFAULT_LIMIT);
        if limit > MAX_LIMIT {
            return Err(ServiceError::Unprocessable(format!("limit above {MAX_LIMIT}")));
        }
        let matching: Vec<usize> = (0..self.wb.manifest.len()).filter(|&i| filter.matches(&self.wb.manifest.records[i])).collect();
        let samples: Vec<Value> = matching
            .iter()
            .take(limit)
            .map(|&i| {
                let r = &self.wb.manifest.records[i];
                json!({ "id": r.id, "index": i, "labels": r.labels })
            })
            .collect();
        Ok(json!({ "total": matching.len(), "samples": samples }))
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        let row = self.row(id)?;
        let img = self.wb.manifest.load_image(row).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels)
            .ok_or_else(|| ServiceError::Internal("image buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn sensitivity(&self, concept: &str, metric: Option<&str>) -> Result<Value, ServiceError> {
        let concept = self.concept(concept)?;
        let metric: Metric = metric.unwrap_or("intersection").parse().map_err(ServiceError::Unprocessable)?;
        let split = self.wb.split(&concept)?;
        let ds = self.wb.dataset(&split, usize::MAX, usize::MAX)?;
        if ds.acts_p.rows() == 0 || ds.acts_n.rows() == 0 {
            return Err(ServiceError::Unprocessable(format!("{concept} has no positives or no negatives in the manifest")));
        }
        let sel = self.selections.get(&concept).filter(|s| s.selection.metric == metric);
        let chosen: HashSet<_> = sel.map(|s| s.selection.neurons.iter().copied().collect()).unwrap_or_default();
        let neurons: Vec<Value> = scan_columns(&ds, metric)
            .iter()
            .map(|r| {
                json!({
                    "neuron": r.neuron.to_string(),
                    "layer": r.neuron.layer,
                    "offset": r.neuron.offset,
                    "value": r.value,
                    "selected": chosen.contains(&r.neuron),
                })
            })
            .collect();
        Ok(json!({
            "concept": concept,
            "metric": metric,
            "positives": ds.acts_p.rows(),
            "negatives": ds.acts_n.rows(),
            "threshold": sel.map(|s| s.selection.threshold),
            "neurons": neurons,
        }))
    }

    pub fn forward(&self, body: &[u8]) -> Result<ForwardResponse, ServiceError> {
        let req: ForwardRequest =
            serde_json::from_slice(body).map_err(|e| ServiceError::Unprocessable(format!("malformed request: {e}")))?;
        let row = self.row(&req.sample_id)?;
        let mut seen = HashSet::new();
        let mut plans: Vec<&InjectionPlan> = Vec::new();
        for inj in &req.injections {
            let concept =
                self.wb.canonical(&inj.concept).map_err(|_| ServiceError::Unprocessable(format!("unknown concept '{}'", inj.concept)))?;
            if !seen.insert(concept.clone()) {
                return Err(ServiceError::Unprocessable(format!("{concept} listed twice")));
            }
            let state = match inj.state {
                Toggle::Off => continue,
                Toggle::Present => ConceptState::Present,
                Toggle::Absent => ConceptState::Absent,
            };
            let sel = self.selections.get(&concept).ok_or_else(|| ServiceError::Conflict(format!("{concept} has no selection")))?;
            plans.push(sel.plan(state));
        }
        let compiled = CompiledPlan::new(&self.wb.model, &plans).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let x = self.wb.manifest.load_image(row).map_err(|e| ServiceError::Internal(e.to_string()))?.to_tensor();
        let (out, taps) = forward_compiled(&self.wb.model, &x, &compiled).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let score = out.data()[0];
        let probe_readouts = self
            .probes
            .iter()
            .map(|p| {
                let r = probe_predict(p, &taps).map_err(|e| ServiceError::Internal(e.to_string()))?;
                Ok(ProbeReadout { concept: p.concept.clone(), score: r.score, presence: r.presence })
            })
            .collect::<Result<_, ServiceError>>()?;
        let injected_neurons = plans
            .iter()
            .flat_map(|p| {
                p.values.iter().map(|(id, v)| InjectedNeuron {
                    concept: p.concept.clone(),
                    state: p.state,
                    neuron: id.to_string(),
                    layer: id.layer,
                    offset: id.offset,
                    value: *v,
                })
            })
            .collect();
        Ok(ForwardResponse {
            sample_id: req.sample_id,
            output_score: score,
            output_label: decide(score),
            baseline_score: self.wb.plain_score(row),
            probe_readouts,
            injected_neurons,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    Present,
    Absent,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub concept: String,
    pub state: Toggle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardRequest {
    pub sample_id: String,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReadout {
    pub concept: String,
    pub score: f64,
    pub presence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedNeuron {
    pub concept: String,
    pub state: ConceptState,
    pub neuron: String,
    pub layer: usize,
    pub offset: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardResponse {
    pub sample_id: String,
    pub output_score: f64,
    pub output_label: bool,
    /// Output of the same sample without injection.
    pub baseline_score: f64,
    pub probe_readouts: Vec<ProbeReadout>,
    pub injected_neurons: Vec<InjectedNeuron>,
}

#[derive(Debug, Deserialize)]
struct SampleQuery {
    label: Option<String>,
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct MetricQuery {
    metric: Option<String>,
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn summary(State(s): State<Shared>) -> Json<Value> {
    Json(s.summary())
}

async fn concepts(State(s): State<Shared>) -> Result<Json<Value>, ServiceError> {
    Ok(Json(s.concepts()?))
}

async fn samples(
    State(s): State<Shared>,
    q: Result<Query<SampleQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Value>, ServiceError> {
    let Query(q) = q.map_err(|e| ServiceError::Unprocessable(e.body_text()))?;
    Ok(Json(s.samples(q.label.as_deref(), q.limit)?))
}

async fn image(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let png = blocking(move || s.image_png(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn sensitivity(
    State(s): State<Shared>,
    Path(concept): Path<String>,
    Query(q): Query<MetricQuery>,
) -> Result<Json<Value>, ServiceError> {
    Ok(Json(blocking(move || s.sensitivity(&concept, q.metric.as_deref())).await?))
}

async fn forward(State(s): State<Shared>, body: Bytes) -> Result<Json<ForwardResponse>, ServiceError> {
    Ok(Json(blocking(move || s.forward(&body)).await?))
}

async fn schema() -> Json<Value> {
    Json(schema_document())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/summary", get(summary))
        .route("/api/concepts", get(concepts))
        .route("/api/samples", get(samples))
        .route("/api/samples/{id}/image", get(image))
        .route("/api/sensitivity/{concept}", get(sensitivity))
        .route("/api/forward", post(forward))
        .route("/api/schema", get(schema))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Runs [`serve`] on a fresh multi-threaded runtime until the server stops.
pub fn serve_blocking(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(Arc::new(state), addr))
}

/// Endpoint listing with parameter and response shapes.
pub fn schema_document() -> Value {
    json!({
        "title": "percept service",
        "version": env!("CARGO_PKG_VERSION"),
        "errors": {
            "404": "unknown sample id or concept",
            "409": "injection of a concept without a selection",
            "422": "malformed query or injection list",
            "body": { "error": "string" }
        },
        "endpoints": [
            {
                "method": "GET", "path": "/api/summary",
                "response": { "task": "string", "model": "object", "manifest": "object", "scope": "string|object",
                              "scope_neurons": "integer", "concept_count": "integer", "selections": ["string"], "probes": ["string"] }
            },
            {
                "method": "GET", "path": "/api/concepts",
                "response": { "concepts": [{ "name": "string", "relevant": "boolean", "selected": "boolean", "neurons": "integer",
                              "threshold": "number|null", "metric": "string|null", "method": "string|null",
                              "validation_score": "number|null", "probe": "boolean" }] }
            },
            {
                "method": "GET", "path": "/api/samples",
                "query": { "label": "comma-separated concept=true|false terms", "limit": format!("integer, default {DEFAULT_LIMIT}, at most {MAX_LIMIT}") },
                "response": { "total": "integer", "samples": [{ "id": "string", "index": "integer", "labels": "object" }] }
            },
            { "method": "GET", "path": "/api/samples/{id}/image", "response": "image/png" },
            {
                "method": "GET", "path": "/api/sensitivity/{concept}",
                "query": { "metric": "spearman|accuracy|intersection, default intersection" },
                "response": { "concept": "string", "metric": "string", "positives": "integer", "negatives": "integer",
                              "threshold": "number|null",
                              "neurons": [{ "neuron": "string", "layer": "integer", "offset": "integer", "value": "number", "selected": "boolean" }] }
            },
            {
                "method": "POST", "path": "/api/forward",
                "body": { "sample_id": "string", "injections": [{ "concept": "string", "state": "present|absent|off" }] },
                "response": { "sample_id": "string", "output_score": "number", "output_label": "boolean", "baseline_score": "number",
                              "probe_readouts": [{ "concept": "string", "score": "number", "presence": "boolean" }],
                              "injected_neurons": [{ "concept": "string", "state": "string", "neuron": "string", "layer": "integer",
                                                     "offset": "integer", "value": "number" }] }
            },
            { "method": "GET", "path": "/api/schema", "response": "this document" }
        ]
    })
}
