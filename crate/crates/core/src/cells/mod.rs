//! Concept neurons: per-neuron sensitivity to a concept, threshold-searched
//! selection, and the activation values used for injection.

mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::injection::{match_ratio, CompiledPlan, ConceptState, InjectionError, InjectionPlan, StateCache};
use crate::nn::{ModelGraph, NeuronId, NnError, Tensor};

pub use metrics::{
    accuracy_sensitivity, intersection_sensitivity, kde_modes, median, midranks, spearman_sensitivity, DensityGrid, Kde, Metric,
    GRID_POINTS,
};

#[derive(Debug, Error)]
pub enum CellsError {
    #[error("no neuron exceeds sensitivity {floor} for {concept} under {metric}")]
    NoConceptNeurons { concept: String, metric: Metric, floor: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checksum mismatch: header {expected}, payload {actual}")]
    Checksum { expected: String, actual: String },
    #[error("neuron {0} is not part of the model or dataset")]
    UnknownNeuron(NeuronId),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl CellsError {
    pub fn is_numeric(&self) -> bool {
        match self {
            CellsError::Nn(e) => e.is_numeric(),
            CellsError::Injection(e) => e.is_numeric(),
            _ => false,
        }
    }
}

/// Which neurons a scan considers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronScope {
    All,
    /// Activation outputs of hidden dense layers.
    Dense,
    Layers(Vec<usize>),
}

impl NeuronScope {
    pub fn layers(&self, model: &ModelGraph) -> Vec<usize> {
        match self {
            NeuronScope::All => (0..model.layer_count()).collect(),
            NeuronScope::Dense => model.dense_hidden_layers(),
            NeuronScope::Layers(ls) => ls.clone(),
        }
    }

    pub fn neurons(&self, model: &ModelGraph) -> Result<Vec<NeuronId>, CellsError> {
        let mut layers = self.layers(model);
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l >= model.layer_count()) {
            return Err(CellsError::Invalid(format!("layer {bad} out of range")));
        }
        Ok(layers.into_iter().flat_map(|l| model.neurons_in_layer(l)).collect())
    }
}

impl fmt::Display for NeuronScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeuronScope::All => f.write_str("all"),
            NeuronScope::Dense => f.write_str("dense"),
            NeuronScope::Layers(ls) => {
                let parts: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
                write!(f, "layers:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for NeuronScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(NeuronScope::All),
            "dense" => Ok(NeuronScope::Dense),
            _ => s
                .strip_prefix("layers:")
                .ok_or_else(|| format!("unknown scope '{s}' (all, dense or layers:I,J)"))?
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad layer '{t}': {e}")))
                .collect::<Result<Vec<_>, _>>()
                .map(NeuronScope::Layers),
        }
    }
}

/// Row-major `f32` matrix; rows are samples, columns neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, CellsError> {
        if data.len() != rows * cols {
            return Err(CellsError::Dimension(format!("{rows}x{cols} matrix with {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CellsError::Invalid("activation matrix holds non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f32>]) -> Result<Self, CellsError> {
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(CellsError::Dimension(format!("row of {} values, expected {cols}", r.len())));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c] as f64).collect()
    }
}

/// Activations of the scoped neurons on positive and negative samples of a concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub concept: String,
    pub neuron_ids: Vec<NeuronId>,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    pub acts_p: ActivationMatrix,
    pub acts_n: ActivationMatrix,
}

impl ConceptDataset {
    pub fn new(
        concept: impl Into<String>,
        neuron_ids: Vec<NeuronId>,
        positive_ids: Vec<String>,
        negative_ids: Vec<String>,
        acts_p: ActivationMatrix,
        acts_n: ActivationMatrix,
    ) -> Result<Self, CellsError> {
        if !neuron_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(CellsError::Invalid("neuron ids must be strictly ascending".into()));
        }
        for (m, ids, name) in [(&acts_p, &positive_ids, "positive"), (&acts_n, &negative_ids, "negative")] {
            if m.cols() != neuron_ids.len() || m.rows() != ids.len() {
                return Err(CellsError::Dimension(format!(
                    "{name} matrix is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    ids.len(),
                    neuron_ids.len()
                )));
            }
        }
        let pos: std::collections::HashSet<&String> = positive_ids.iter().collect();
        if let Some(dup) = negative_ids.iter().find(|id| pos.contains(id)) {
            return Err(CellsError::Invalid(format!("sample {dup} is both positive and negative")));
        }
        Ok(Self { concept: concept.into(), neuron_ids, positive_ids, negative_ids, acts_p, acts_n })
    }

    /// Runs the model on every sample and keeps the columns in `neuron_ids`.
    pub fn collect(
        model: &ModelGraph,
        concept: &str,
        neuron_ids: Vec<NeuronId>,
        positives: &[(String, Tensor)],
        negatives: &[(String, Tensor)],
    ) -> Result<Self, CellsError> {
        let cols: Vec<usize> =
            neuron_ids.iter().map(|&id| model.global_index(id).ok_or(CellsError::UnknownNeuron(id))).collect::<Result<_, _>>()?;
        let matrix = |set: &[(String, Tensor)]| -> Result<ActivationMatrix, CellsError> {
            let rows = set
                .par_iter()
                .map(|(_, x)| {
                    let (_, taps) = model.forward_taps(x)?;
                    Ok(cols.iter().map(|&c| taps.values()[c] as f32).collect())
                })
                .collect::<Result<Vec<Vec<f32>>, NnError>>()?;
            ActivationMatrix::from_rows(cols.len(), &rows)
        };
        let ids = |set: &[(String, Tensor)]| set.iter().map(|(id, _)| id.clone()).collect();
        Self::new(concept, neuron_ids, ids(positives), ids(negatives), matrix(positives)?, matrix(negatives)?)
    }

    pub fn cols(&self) -> usize {
        self.neuron_ids.len()
    }

    pub fn column_of(&self, id: NeuronId) -> Option<usize> {
        self.neuron_ids.binary_search(&id).ok()
    }

    /// Positive and negative activations of one column.
    pub fn column(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        (self.acts_p.column(c), self.acts_n.column(c))
    }

    /// Dataset restricted to the first `p` positives and `n` negatives.
    pub fn truncate(&self, p: usize, n: usize) -> Self {
        let take = |m: &ActivationMatrix, k: usize| ActivationMatrix {
            rows: k.min(m.rows),
            cols: m.cols,
            data: m.data[..k.min(m.rows) * m.cols].to_vec(),
        };
        Self {
            concept: self.concept.clone(),
            neuron_ids: self.neuron_ids.clone(),
            positive_ids: self.positive_ids.iter().take(p).cloned().collect(),
            negative_ids: self.negative_ids.iter().take(n).cloned().collect(),
            acts_p: take(&self.acts_p, p),
            acts_n: take(&self.acts_n, n),
        }
    }

    /// Dump: one JSON header line, then the positive rows and the negative
    /// rows as little-endian `f32`.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(4 * (self.acts_p.data.len() + self.acts_n.data.len()));
        for v in self.acts_p.data.iter().chain(&self.acts_n.data) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let header = DumpHeader {
            concept: self.concept.clone(),
            rows: self.acts_p.rows + self.acts_n.rows,
            cols: self.cols(),
            positives: self.acts_p.rows,
            neuron_ids: self.neuron_ids.clone(),
            sample_ids: self.positive_ids.iter().chain(&self.negative_ids).cloned().collect(),
            sha256: hex(&Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self, CellsError> {
        let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CellsError::Invalid("dump has no header line".into()))?;
        let header: DumpHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| CellsError::Invalid(format!("dump header: {e}")))?;
        let payload = &bytes[split + 1..];
        if payload.len() != 4 * header.rows * header.cols {
            return Err(CellsError::Dimension(format!(
                "header declares {}x{} values, payload holds {}",
                header.rows,
                header.cols,
                payload.len() as f64 / 4.0
            )));
        }
        if header.neuron_ids.len() != header.cols || header.sample_ids.len() != header.rows || header.positives > header.rows {
            return Err(CellsError::Dimension("header ids disagree with declared rows/cols".into()));
        }
        let actual = hex(&Sha256::digest(payload));
        if actual != header.sha256 {
            return Err(CellsError::Checksum { expected: header.sha256, actual });
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let cut = header.positives * header.cols;
        let mut ids = header.sample_ids;
        let negative_ids = ids.split_off(header.positives);
        Self::new(
            header.concept,
            header.neuron_ids,
            ids,
            negative_ids,
            ActivationMatrix::new(header.positives, header.cols, values[..cut].to_vec())?,
            ActivationMatrix::new(header.rows - header.positives, header.cols, values[cut..].to_vec())?,
        )
    }

    pub fn export_dump(&self, path: &Path) -> Result<(), CellsError> {
        std::fs::write(path, self.to_dump_bytes())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    concept: String,
    rows: usize,
    cols: usize,
    positives: usize,
    neuron_ids: Vec<NeuronId>,
    sample_ids: Vec<String>,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn import_activation_dump(path: &Path) -> Result<ConceptDataset, CellsError> {
    ConceptDataset::from_dump_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub neuron: NeuronId,
    pub metric: Metric,
    pub value: f64,
}

/// One record per dataset column, in `NeuronId` order.
pub fn scan_columns(ds: &ConceptDataset, metric: Metric) -> Vec<SensitivityRecord> {
    (0..ds.cols())
        .into_par_iter()
        .map(|c| {
            let (p, n) = ds.column(c);
            SensitivityRecord { neuron: ds.neuron_ids[c], metric, value: metric.eval(&p, &n) }
        })
        .collect()
}

/// As [`scan_columns`], after checking every column names a neuron of `model`.
pub fn scan_model(model: &ModelGraph, ds: &ConceptDataset, metric: Metric) -> Result<Vec<SensitivityRecord>, CellsError> {
    if ds.cols() > model.neuron_count() {
        return Err(CellsError::Dimension(format!("{} columns for a model of {} neurons", ds.cols(), model.neuron_count())));
    }
    if let Some(&bad) = ds.neuron_ids.iter().find(|&&id| model.global_index(id).is_none()) {
        return Err(CellsError::UnknownNeuron(bad));
    }
    Ok(scan_columns(ds, metric))
}

pub fn write_sensitivity_csv<W: Write>(records: &[SensitivityRecord], out: W) -> Result<(), CellsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["neuron", "layer", "metric", "value"]).map_err(csv_err)?;
    for r in records {
        w.write_record([r.neuron.offset.to_string(), r.neuron.layer.to_string(), r.metric.to_string(), format!("{:.6}", r.value)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CellsError {
    CellsError::Io(std::io::Error::other(e))
}

/// Records sorted by descending value, ties by neuron id.
pub fn ranked(records: &[SensitivityRecord]) -> Vec<SensitivityRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.neuron.cmp(&b.neuron)));
    v
}

/// Neurons at or above `threshold`.
pub fn count_at_threshold(records: &[SensitivityRecord], threshold: f64) -> usize {
    records.iter().filter(|r| r.value >= threshold).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Neurons at or below this sensitivity are never admitted.
    pub floor: f64,
    /// Search stops once this many admissions pass without a new best.
    pub patience: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { floor: 0.5, patience: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub concept: String,
    pub metric: Metric,
    /// Sensitivity of the last admitted neuron.
    pub threshold: f64,
    /// In admission order.
    pub neurons: Vec<NeuronId>,
    pub validation_score: f64,
    /// Validation score after each admission.
    pub curve: Vec<f64>,
}

/// Admits neurons in descending sensitivity and keeps the prefix with the
/// best `evaluate` score; ties keep the shorter prefix.
pub fn threshold_search(
    concept: &str,
    metric: Metric,
    records: &[SensitivityRecord],
    cfg: &SelectionConfig,
    mut evaluate: impl FnMut(&[NeuronId]) -> Result<f64, CellsError>,
) -> Result<SelectionResult, CellsError> {
    let candidates: Vec<SensitivityRecord> = ranked(records).into_iter().take_while(|r| r.value > cfg.floor).collect();
    if candidates.is_empty() {
        return Err(CellsError::NoConceptNeurons { concept: concept.to_string(), metric, floor: cfg.floor });
    }
    let ids: Vec<NeuronId> = candidates.iter().map(|r| r.neuron).collect();
    let mut curve = Vec::new();
    let (mut best_len, mut best_score) = (0, f64::NEG_INFINITY);
    for k in 1..=ids.len() {
        let score = evaluate(&ids[..k])?;
        curve.push(score);
        if score > best_score {
            best_score = score;
            best_len = k;
        }
        if k - best_len > cfg.patience {
            break;
        }
    }
    Ok(SelectionResult {
        concept: concept.to_string(),
        metric,
        threshold: candidates[best_len - 1].value,
        neurons: ids[..best_len].to_vec(),
        validation_score: best_score,
        curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMethod {
    Median,
    Mode,
}

impl fmt::Display for ValueMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueMethod::Median => "median",
            ValueMethod::Mode => "mode",
        })
    }
}

impl FromStr for ValueMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(ValueMethod::Median),
            "mode" => Ok(ValueMethod::Mode),
            _ => Err(format!("unknown value method '{s}' (median or mode)")),
        }
    }
}

/// Present and absent activation values of one neuron.
pub fn neuron_values(ds: &ConceptDataset, id: NeuronId, method: ValueMethod) -> Result<(f64, f64), CellsError> {
    let c = ds.column_of(id).ok_or(CellsError::UnknownNeuron(id))?;
    let (p, n) = ds.column(c);
    if p.is_empty() || n.is_empty() {
        return Err(CellsError::Invalid(format!("concept {} needs positive and negative samples", ds.concept)));
    }
    Ok(match method {
        ValueMethod::Median => (median(&p), median(&n)),
        ValueMethod::Mode => kde_modes(&p, &n),
    })
}

/// Present plan (statistic over positives) and absent plan (over negatives).
pub fn compute_injection_values(
    ds: &ConceptDataset,
    neurons: &[NeuronId],
    method: ValueMethod,
) -> Result<(InjectionPlan, InjectionPlan), CellsError> {
    if neurons.is_empty() {
        return Err(CellsError::Invalid("no neurons selected".into()));
    }
    let values = neurons.par_iter().map(|&id| neuron_values(ds, id, method).map(|v| (id, v))).collect::<Result<Vec<_>, _>>()?;
    let plan = |state, pick: fn(&(f64, f64)) -> f64| {
        InjectionPlan::new(ds.concept.clone(), state, values.iter().map(|(id, v)| (*id, pick(v))).collect::<BTreeMap<_, _>>())
    };
    Ok((plan(ConceptState::Present, |v| v.0), plan(ConceptState::Absent, |v| v.1)))
}

/// Samples with the plan state to inject and the expected output label.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub cache: StateCache,
    pub states: Vec<ConceptState>,
    pub expected: Vec<bool>,
}

impl ValidationSet {
    pub fn new(cache: StateCache, cases: Vec<(ConceptState, bool)>) -> Result<Self, CellsError> {
        if cache.len() != cases.len() {
            return Err(CellsError::Dimension(format!("{} cached states for {} cases", cache.len(), cases.len())));
        }
        let (states, expected) = cases.into_iter().unzip();
        Ok(Self { cache, states, expected })
    }

    pub fn build(model: &ModelGraph, start: usize, cases: &[(Tensor, ConceptState, bool)]) -> Result<Self, CellsError> {
        let inputs: Vec<Tensor> = cases.iter().map(|c| c.0.clone()).collect();
        let cache = StateCache::build(model, start, &inputs)?;
        Self::new(cache, cases.iter().map(|c| (c.1, c.2)).collect())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Match ratio with each case injected by the plan of its state.
    pub fn success(&self, model: &ModelGraph, present: &InjectionPlan, absent: &InjectionPlan) -> Result<f64, CellsError> {
        let plans = [CompiledPlan::new(model, &[present])?, CompiledPlan::new(model, &[absent])?];
        let scores = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let plan = if self.states[i] == ConceptState::Present { &plans[0] } else { &plans[1] };
                self.cache.score(model, i, plan)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match_ratio(&scores, &self.expected))
    }
}

/// Threshold search where each prefix is scored by validation success with median values.
pub fn select_concept_neurons(
    model: &ModelGraph,
    ds: &ConceptDataset,
    records: &[SensitivityRecord],
    validation: &ValidationSet,
    cfg: &SelectionConfig,
) -> Result<SelectionResult, CellsError> {
    if validation.is_empty() {
        return Err(CellsError::Invalid("validation set is empty".into()));
    }
    let metric = records.first().map(|r| r.metric).unwrap_or(Metric::Intersection);
    let mut values: BTreeMap<NeuronId, (f64, f64)> = BTreeMap::new();
    threshold_search(&ds.concept, metric, records, cfg, |prefix| {
        let last = *prefix.last().expect("prefixes are nonempty");
        let v = neuron_values(ds, last, ValueMethod::Median)?;
        values.insert(last, v);
        let pick = |f: fn(&(f64, f64)) -> f64| prefix.iter().map(|id| (*id, f(&values[id]))).collect::<BTreeMap<_, _>>();
        let present = InjectionPlan::new(ds.concept.clone(), ConceptState::Present, pick(|v| v.0));
        let absent = InjectionPlan::new(ds.concept.clone(), ConceptState::Absent, pick(|v| v.1));
        validation.success(model, &present, &absent)
    })
}
