//! Experiment pipelines: scan, select, compute values and evaluate S1 to S4,
//! plus the sweeps, probe experiments and the relevance census. Every report
//! is a pure function of the manifest, the model and the configuration.

mod experiments;
mod report;
mod sets;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{
    compute_injection_values, scan_columns, select_concept_neurons, ActivationMatrix, CellsError, ConceptDataset, Metric, NeuronScope,
    SelectionConfig, SelectionResult, ValidationSet, ValueMethod,
};
use crate::injection::{match_ratio, CompiledPlan, ConceptState, InjectionError, InjectionPlan, StateCache};
use crate::nn::{ModelGraph, NeuronId, NnError};
use crate::ontology::{ConceptDag, OntologyError};
use crate::probes::{train_probe, Probe, ProbeArch, ProbeError, ProbeFit};
use crate::seeds;
use crate::trains::{DataError, Manifest};

pub use experiments::*;
pub use report::{fmt_ratio, ExperimentReport, Table, INSUFFICIENT_DATA, NULL_CELL};
pub use sets::{build_sets, classify, partition, validation_quota, CounterfactualSets, SetKind};

/// Cached feature cells above this many values are refused.
const MAX_FEATURE_VALUES: usize = 200_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Cells(#[from] CellsError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    /// Whether the failure is a non-finite value rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            HarnessError::Cells(e) => e.is_numeric(),
            HarnessError::Injection(e) => e.is_numeric(),
            HarnessError::Probe(e) => e.is_numeric(),
            HarnessError::Nn(e) => e.is_numeric(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub scope: NeuronScope,
    /// Cap on positives and on negatives used to find concept neurons.
    pub per_class: usize,
    /// Cap on each of S1 to S4.
    pub set_cap: usize,
    pub validation_size: usize,
    pub selection: SelectionConfig,
    pub relevant: Vec<String>,
    pub nonrelevant: Vec<String>,
    /// Neuron-count sweep points; the full scope is always added as the last.
    pub counts: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Extra thresholds at which the census counts neurons.
    pub census_thresholds: Vec<f64>,
    pub probe_arch: ProbeArch,
    /// Correction ratios over fewer cases are reported as insufficient data.
    pub min_false_negatives: usize,
    /// Cap on the samples of each relation direction.
    pub relation_cap: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scope: NeuronScope::Dense,
            per_class: 1000,
            set_cap: 1000,
            validation_size: 100,
            selection: SelectionConfig::default(),
            relevant: ["EmptyTrain", "WarTrain", "∃has.PassengerCar", "∃has.ReinforcedCar"].map(String::from).to_vec(),
            nonrelevant: ["∃has.OpenRoofCar", "MixedTrain", "LongFreightTrain", "∃has.LongWagon"].map(String::from).to_vec(),
            counts: vec![0, 1, 2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64],
            sizes: vec![40, 100, 200, 500, 1000, 2000],
            census_thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95],
            probe_arch: ProbeArch::Linear,
            min_false_negatives: 20,
            relation_cap: 1000,
        }
    }
}

/// Data one concept's pipelines draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSplit {
    pub concept: String,
    /// Concept-pool rows scored during selection, with their set.
    pub validation: Vec<(usize, SetKind)>,
    /// Concept-pool rows in draw order; prefixes give smaller datasets.
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Eval-pool sets.
    pub sets: CounterfactualSets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SetScore {
    pub kind: SetKind,
    pub n: usize,
    /// `None` when the set is empty.
    pub ratio: Option<f64>,
}

/// One pipeline run evaluated on S1 to S4.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub concept: String,
    pub condition: String,
    pub positives: usize,
    pub negatives: usize,
    pub neurons: usize,
    pub threshold: Option<f64>,
    pub sets: Vec<SetScore>,
    /// Mean over nonempty sets; `None` for a null cell.
    pub mean: Option<f64>,
}

impl CellOutcome {
    pub fn is_null(&self) -> bool {
        self.mean.is_none()
    }

    pub fn set(&self, kind: SetKind) -> &SetScore {
        &self.sets[kind as usize]
    }

    pub const HEADER: [&'static str; 15] = [
        "concept",
        "condition",
        "positives",
        "negatives",
        "neurons",
        "threshold",
        "S1",
        "n_S1",
        "S2",
        "n_S2",
        "S3",
        "n_S3",
        "S4",
        "n_S4",
        "mean",
    ];

    pub fn row(&self) -> Vec<String> {
        let mut r = vec![
            self.concept.clone(),
            self.condition.clone(),
            self.positives.to_string(),
            self.negatives.to_string(),
            self.neurons.to_string(),
            fmt_ratio(self.threshold),
        ];
        for s in &self.sets {
            r.push(fmt_ratio(s.ratio));
            r.push(s.n.to_string());
        }
        r.push(fmt_ratio(self.mean));
        r
    }
}

/// A trained model over a manifest, with every sample's state at the first
/// scoped layer and its scoped activations cached.
#[derive(Debug)]
pub struct Workbench {
    pub model: ModelGraph,
    pub manifest: Manifest,
    pub dag: ConceptDag,
    pub config: HarnessConfig,
    scope: Vec<NeuronId>,
    /// Position of each scoped neuron within a trace from `cache.start()`.
    trace_index: Vec<usize>,
    cache: StateCache,
    features: Vec<Vec<f32>>,
    plain: Vec<f64>,
    concept_pool: Vec<usize>,
    eval_pool: Vec<usize>,
}

impl Workbench {
    pub fn new(model: ModelGraph, manifest: Manifest, dag: ConceptDag, config: HarnessConfig) -> Result<Self, HarnessError> {
        if manifest.is_empty() {
            return Err(HarnessError::Invalid("manifest is empty".into()));
        }
        let scope = config.scope.neurons(&model)?;
        let start = scope.first().map(|id| id.layer).ok_or_else(|| HarnessError::Invalid("scope has no neurons".into()))?;
        if scope.len() * manifest.len() > MAX_FEATURE_VALUES {
            return Err(HarnessError::Invalid(format!(
                "scope of {} neurons over {} samples is too large to cache; choose dense or layers:",
                scope.len(),
                manifest.len()
            )));
        }
        let base = model.layer_range(start).start;
        let trace_index: Vec<usize> = scope.iter().map(|&id| model.global_index(id).expect("scope comes from the model") - base).collect();
        let rows = (0..manifest.len())
            .into_par_iter()
            .map(|i| -> Result<(Vec<f64>, Vec<f32>, f64), HarnessError> {
                let x = manifest.load_image(i)?.to_tensor();
                let state = model.layer_input(&x, start)?;
                let cache = StateCache::from_states(start, vec![state]);
                let (score, trace) = cache.trace(&model, 0, &CompiledPlan::default())?;
                let feats = trace_index.iter().map(|&j| trace[j] as f32).collect();
                let state = cache.states()[0].clone();
                Ok((state, feats, score))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut states = Vec::with_capacity(rows.len());
        let mut features = Vec::with_capacity(rows.len());
        let mut plain = Vec::with_capacity(rows.len());
        for (s, f, p) in rows {
            states.push(s);
            features.push(f);
            plain.push(p);
        }
        let mut order: Vec<usize> = (0..manifest.len()).collect();
        order.shuffle(&mut seeds::rng(seeds::derive_named(config.seed, "pools")));
        let mut eval_pool = order.split_off(order.len() / 2);
        let mut concept_pool = order;
        concept_pool.sort_unstable();
        eval_pool.sort_unstable();
        Ok(Self {
            model,
            manifest,
            dag,
            config,
            scope,
            trace_index,
            cache: StateCache::from_states(start, states),
            features,
            plain,
            concept_pool,
            eval_pool,
        })
    }

    pub fn scope(&self) -> &[NeuronId] {
        &self.scope
    }

    pub fn start_layer(&self) -> usize {
        self.cache.start()
    }

    pub fn concept_pool(&self) -> &[usize] {
        &self.concept_pool
    }

    pub fn eval_pool(&self) -> &[usize] {
        &self.eval_pool
    }

    /// Un-injected model output of a manifest row.
    pub fn plain_score(&self, row: usize) -> f64 {
        self.plain[row]
    }

    pub fn features(&self, row: usize) -> &[f32] {
        &self.features[row]
    }

    pub fn canonical(&self, concept: &str) -> Result<String, HarnessError> {
        Ok(self.dag.canonical(concept)?.to_string())
    }

    pub fn label(&self, row: usize, concept: &str) -> Result<bool, HarnessError> {
        let r = &self.manifest.records[row];
        r.label(concept).ok_or_else(|| HarnessError::Data(DataError::Parse(format!("record {} has no label '{concept}'", r.id))))
    }

    pub fn split(&self, concept: &str) -> Result<ConceptSplit, HarnessError> {
        let concept = self.canonical(concept)?;
        let seed = self.config.seed;
        let groups = partition(&self.manifest, &self.dag, &concept, &self.concept_pool)?;
        let quota = validation_quota(groups.clone().map(|g| g.len()), self.config.validation_size);
        let mut validation = Vec::new();
        for kind in SetKind::ALL {
            let mut group = groups[kind as usize].clone();
            group.shuffle(&mut seeds::rng(seeds::derive_named(seed, &format!("validation:{concept}:{kind}"))));
            validation.extend(group.into_iter().take(quota[kind as usize]).map(|r| (r, kind)));
        }
        validation.sort_unstable();
        let held: std::collections::HashSet<usize> = validation.iter().map(|v| v.0).collect();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for &r in self.concept_pool.iter().filter(|r| !held.contains(r)) {
            if self.label(r, &concept)? {
                positives.push(r);
            } else {
                negatives.push(r);
            }
        }
        for (list, name) in [(&mut positives, "positives"), (&mut negatives, "negatives")] {
            list.shuffle(&mut seeds::rng(seeds::derive_named(seed, &format!("{name}:{concept}"))));
            list.truncate(self.config.per_class);
        }
        let sets = build_sets(&self.manifest, &self.dag, &concept, &self.eval_pool, self.config.set_cap, seed)?;
        Ok(ConceptSplit { concept, validation, positives, negatives, sets })
    }

    /// Scoped activations of the first `p` positives and `n` negatives.
    pub fn dataset(&self, split: &ConceptSplit, p: usize, n: usize) -> Result<ConceptDataset, HarnessError> {
        let pos = &split.positives[..p.min(split.positives.len())];
        let neg = &split.negatives[..n.min(split.negatives.len())];
        let matrix = |rows: &[usize]| {
            let data: Vec<f32> = rows.iter().flat_map(|&r| self.features[r].iter().copied()).collect();
            ActivationMatrix::new(rows.len(), self.scope.len(), data)
        };
        let ids = |rows: &[usize]| rows.iter().map(|&r| self.manifest.records[r].id.clone()).collect();
        Ok(ConceptDataset::new(split.concept.clone(), self.scope.clone(), ids(pos), ids(neg), matrix(pos)?, matrix(neg)?)?)
    }

    pub fn validation_set(&self, split: &ConceptSplit) -> Result<ValidationSet, HarnessError> {
        let rows: Vec<usize> = split.validation.iter().map(|v| v.0).collect();
        let cases = split.validation.iter().map(|v| (v.1.state(), v.1.expected())).collect();
        Ok(ValidationSet::new(self.cache.select(&rows), cases)?)
    }

    /// Output scores of `rows` under `plan`.
    pub fn scores(&self, rows: &[usize], plan: &CompiledPlan) -> Result<Vec<f64>, HarnessError> {
        Ok(rows.par_iter().map(|&r| self.cache.score(&self.model, r, plan)).collect::<Result<Vec<_>, _>>()?)
    }

    /// Output score and scoped activations of one row under `plan`.
    pub fn trace(&self, row: usize, plan: &CompiledPlan) -> Result<(f64, Vec<f64>), HarnessError> {
        let (score, trace) = self.cache.trace(&self.model, row, plan)?;
        Ok((score, self.trace_index.iter().map(|&j| trace[j]).collect()))
    }

    /// Match ratio on each set, the present plan on S1/S2 and the absent plan on S3/S4.
    pub fn evaluate(
        &self,
        sets: &CounterfactualSets,
        present: &InjectionPlan,
        absent: &InjectionPlan,
    ) -> Result<Vec<SetScore>, HarnessError> {
        let plans = [CompiledPlan::new(&self.model, &[present])?, CompiledPlan::new(&self.model, &[absent])?];
        SetKind::ALL
            .iter()
            .map(|&kind| {
                let rows = sets.get(kind);
                if rows.is_empty() {
                    return Ok(SetScore { kind, n: 0, ratio: None });
                }
                let plan = if kind.state() == ConceptState::Present { &plans[0] } else { &plans[1] };
                let scores = self.scores(rows, plan)?;
                Ok(SetScore { kind, n: rows.len(), ratio: Some(match_ratio(&scores, &vec![kind.expected(); rows.len()])) })
            })
            .collect()
    }

    /// Neuron selection on the first `p`/`n` samples; `None` when no neuron
    /// clears the sensitivity floor.
    pub fn select(
        &self,
        split: &ConceptSplit,
        metric: Metric,
        p: usize,
        n: usize,
    ) -> Result<Option<(ConceptDataset, SelectionResult)>, HarnessError> {
        let ds = self.dataset(split, p, n)?;
        let records = scan_columns(&ds, metric);
        let validation = self.validation_set(split)?;
        match select_concept_neurons(&self.model, &ds, &records, &validation, &self.config.selection) {
            Ok(sel) => Ok(Some((ds, sel))),
            Err(CellsError::NoConceptNeurons { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Full pipeline: select, compute values with `method`, evaluate.
    pub fn pipeline_cell(
        &self,
        split: &ConceptSplit,
        metric: Metric,
        method: ValueMethod,
        p: usize,
        n: usize,
        condition: &str,
    ) -> Result<CellOutcome, HarnessError> {
        let selected = self.select(split, metric, p, n)?;
        self.outcome(split, selected.as_ref(), method, p, n, condition)
    }

    pub fn outcome(
        &self,
        split: &ConceptSplit,
        selected: Option<&(ConceptDataset, SelectionResult)>,
        method: ValueMethod,
        p: usize,
        n: usize,
        condition: &str,
    ) -> Result<CellOutcome, HarnessError> {
        let positives = p.min(split.positives.len());
        let negatives = n.min(split.negatives.len());
        let Some((ds, sel)) = selected else {
            return Ok(CellOutcome {
                concept: split.concept.clone(),
                condition: condition.to_string(),
                positives,
                negatives,
                neurons: 0,
                threshold: None,
                sets: SetKind::ALL.iter().map(|&kind| SetScore { kind, n: split.sets.get(kind).len(), ratio: None }).collect(),
                mean: None,
            });
        };
        let (present, absent) = compute_injection_values(ds, &sel.neurons, method)?;
        let sets = self.evaluate(&split.sets, &present, &absent)?;
        Ok(CellOutcome {
            concept: split.concept.clone(),
            condition: condition.to_string(),
            positives,
            negatives,
            neurons: sel.neurons.len(),
            threshold: Some(sel.threshold),
            mean: mean_ratio(&sets),
            sets,
        })
    }

    /// Present and absent plans from selection with the intersection metric and median values.
    pub fn concept_plans(&self, split: &ConceptSplit) -> Result<Option<(InjectionPlan, InjectionPlan)>, HarnessError> {
        let Some((ds, sel)) = self.select(split, Metric::Intersection, usize::MAX, usize::MAX)? else {
            return Ok(None);
        };
        Ok(Some(compute_injection_values(&ds, &sel.neurons, ValueMethod::Median)?))
    }

    /// Selection with `metric` over the whole split, plus plans computed with `method`.
    pub fn concept_selection(
        &self,
        split: &ConceptSplit,
        metric: Metric,
        method: ValueMethod,
    ) -> Result<Option<ConceptSelection>, HarnessError> {
        let Some((ds, selection)) = self.select(split, metric, usize::MAX, usize::MAX)? else {
            return Ok(None);
        };
        let (present, absent) = compute_injection_values(&ds, &selection.neurons, method)?;
        Ok(Some(ConceptSelection { selection, method, present, absent }))
    }

    /// Probe over the scoped neurons, trained on the split's samples.
    pub fn train_probe(&self, split: &ConceptSplit) -> Result<ProbeFit, HarnessError> {
        let ds = self.dataset(split, usize::MAX, usize::MAX)?;
        let seed = seeds::derive_named(self.config.seed, &format!("probe:{}", split.concept));
        Ok(train_probe(&self.model, &ds, self.config.probe_arch, seed)?)
    }

    /// Probe readout on a row's un-injected scoped activations.
    pub fn probe_presence(&self, probe: &Probe, row: usize) -> Result<bool, HarnessError> {
        self.check_probe(probe)?;
        let (_, acts) = self.trace(row, &CompiledPlan::default())?;
        Ok(probe.predict_row(&acts)?.presence)
    }

    fn check_probe(&self, probe: &Probe) -> Result<(), HarnessError> {
        if probe.input_neurons != self.scope {
            return Err(HarnessError::Invalid(format!("probe for {} does not read the harness scope", probe.concept)));
        }
        Ok(())
    }

    /// Fraction of rows whose probe presence differs between the plain and the injected pass.
    pub fn flip_rate(&self, plan: &InjectionPlan, probe: &Probe, rows: &[usize]) -> Result<f64, HarnessError> {
        self.check_probe(probe)?;
        if rows.is_empty() {
            return Err(ProbeError::Empty.into());
        }
        let compiled = CompiledPlan::new(&self.model, &[plan])?;
        let plain = CompiledPlan::default();
        let flips = rows
            .par_iter()
            .map(|&r| -> Result<bool, HarnessError> {
                let (_, before) = self.trace(r, &plain)?;
                let (_, after) = self.trace(r, &compiled)?;
                Ok(probe.predict_row(&before)?.presence != probe.predict_row(&after)?.presence)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(flips.iter().filter(|&&f| f).count() as f64 / rows.len() as f64)
    }
}

/// Selected neurons of one concept with both plans; the unit `select` saves
/// and the service loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSelection {
    pub selection: SelectionResult,
    pub method: ValueMethod,
    pub present: InjectionPlan,
    pub absent: InjectionPlan,
}

impl ConceptSelection {
    pub fn concept(&self) -> &str {
        &self.selection.concept
    }

    pub fn plan(&self, state: ConceptState) -> &InjectionPlan {
        match state {
            ConceptState::Present => &self.present,
            ConceptState::Absent => &self.absent,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).expect("selections serialise");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let sel: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))?;
        if sel.present.concept != sel.selection.concept || sel.absent.concept != sel.selection.concept {
            return Err(HarnessError::Invalid(format!("{}: plans name a different concept", path.display())));
        }
        Ok(sel)
    }
}

pub fn mean_ratio(sets: &[SetScore]) -> Option<f64> {
    let ratios: Vec<f64> = sets.iter().filter_map(|s| s.ratio).collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}
