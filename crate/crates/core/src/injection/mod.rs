//! Forward passes with selected neuron activations overwritten by plan values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ActivationVector, ModelGraph, NeuronId, NnError, Tensor};

/// Output decision threshold.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum InjectionError {
    #[error("neuron {0} does not exist in the model")]
    UnknownNeuron(NeuronId),
    #[error("plan value for {0} is not finite")]
    NonFinite(NeuronId),
    #[error("plan touches layer {layer}, before the cached layer {start}")]
    BeforeCache { layer: usize, start: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("plan parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl InjectionError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, InjectionError::Nn(e) if e.is_numeric())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptState {
    Present,
    Absent,
}

impl ConceptState {
    pub fn name(self) -> &'static str {
        match self {
            ConceptState::Present => "present",
            ConceptState::Absent => "absent",
        }
    }

    pub fn as_bool(self) -> bool {
        self == ConceptState::Present
    }
}

impl fmt::Display for ConceptState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConceptState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "present" => Ok(ConceptState::Present),
            "absent" => Ok(ConceptState::Absent),
            _ => Err(format!("unknown concept state '{s}'")),
        }
    }
}

/// Replacement activation values for one concept/state pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PlanDoc", try_from = "PlanDoc")]
pub struct InjectionPlan {
    pub concept: String,
    pub state: ConceptState,
    pub values: BTreeMap<NeuronId, f64>,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    concept: String,
    state: ConceptState,
    values: Vec<(usize, usize, f64)>,
}

impl From<InjectionPlan> for PlanDoc {
    fn from(p: InjectionPlan) -> Self {
        let values = p.values.iter().map(|(id, v)| (id.layer, id.offset, *v)).collect();
        PlanDoc { concept: p.concept, state: p.state, values }
    }
}

impl TryFrom<PlanDoc> for InjectionPlan {
    type Error = String;

    fn try_from(d: PlanDoc) -> Result<Self, Self::Error> {
        let mut values = BTreeMap::new();
        for (layer, offset, v) in d.values {
            if values.insert(NeuronId::new(layer, offset), v).is_some() {
                return Err(format!("neuron [{layer}, {offset}] listed twice"));
            }
        }
        Ok(InjectionPlan { concept: d.concept, state: d.state, values })
    }
}

impl InjectionPlan {
    pub fn new(concept: impl Into<String>, state: ConceptState, values: BTreeMap<NeuronId, f64>) -> Self {
        Self { concept: concept.into(), state, values }
    }

    pub fn empty(concept: impl Into<String>, state: ConceptState) -> Self {
        Self::new(concept, state, BTreeMap::new())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialise")
    }

    pub fn from_json(text: &str) -> Result<Self, InjectionError> {
        serde_json::from_str(text).map_err(|e| InjectionError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), InjectionError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, InjectionError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Plans merged and grouped by layer, validated against one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompiledPlan {
    by_layer: BTreeMap<usize, Vec<(usize, f64)>>,
    /// Neurons assigned by more than one plan; the last plan wins.
    pub conflicts: Vec<NeuronId>,
}

impl CompiledPlan {
    pub fn new(model: &ModelGraph, plans: &[&InjectionPlan]) -> Result<Self, InjectionError> {
        let mut merged: BTreeMap<NeuronId, f64> = BTreeMap::new();
        let mut conflicts = Vec::new();
        for plan in plans {
            for (&id, &v) in &plan.values {
                if model.global_index(id).is_none() {
                    return Err(InjectionError::UnknownNeuron(id));
                }
                if !v.is_finite() {
                    return Err(InjectionError::NonFinite(id));
                }
                if merged.insert(id, v).is_some() {
                    log::warn!("neuron {id} assigned by several plans; keeping the value from '{}'", plan.concept);
                    conflicts.push(id);
                }
            }
        }
        let mut by_layer: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (id, v) in merged {
            by_layer.entry(id.layer).or_default().push((id.offset, v));
        }
        conflicts.sort_unstable();
        conflicts.dedup();
        Ok(Self { by_layer, conflicts })
    }

    pub fn is_empty(&self) -> bool {
        self.by_layer.is_empty()
    }

    pub fn first_layer(&self) -> Option<usize> {
        self.by_layer.keys().next().copied()
    }

    pub fn neurons(&self) -> Vec<NeuronId> {
        self.by_layer.iter().flat_map(|(&l, vs)| vs.iter().map(move |&(o, _)| NeuronId::new(l, o))).collect()
    }

    fn apply(&self, layer: usize, out: &mut [f64]) {
        if let Some(vs) = self.by_layer.get(&layer) {
            for &(o, v) in vs {
                out[o] = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedPass {
    pub output: Tensor,
    pub taps: ActivationVector,
    pub conflicts: Vec<NeuronId>,
}

/// Forward pass where each planned neuron is overwritten right after its layer runs.
pub fn inject_forward(model: &ModelGraph, input: &Tensor, plans: &[InjectionPlan]) -> Result<InjectedPass, InjectionError> {
    let refs: Vec<&InjectionPlan> = plans.iter().collect();
    let compiled = CompiledPlan::new(model, &refs)?;
    let (output, taps) = forward_compiled(model, input, &compiled)?;
    Ok(InjectedPass { output, taps, conflicts: compiled.conflicts })
}

pub fn forward_compiled(model: &ModelGraph, input: &Tensor, plan: &CompiledPlan) -> Result<(Tensor, ActivationVector), InjectionError> {
    let state = model.layer_input(input, 0)?;
    let mut taps = Vec::with_capacity(model.neuron_count());
    let out = model.run_from(0, &state, &mut |l, out| {
        plan.apply(l, out);
        taps.extend_from_slice(out);
    })?;
    let output = Tensor::new(model.output_shape().to_vec(), out)?;
    Ok((output, ActivationVector::new(taps)))
}

/// Scalar model output under a compiled plan.
pub fn injected_score(model: &ModelGraph, input: &Tensor, plan: &CompiledPlan) -> Result<f64, InjectionError> {
    let state = model.layer_input(input, 0)?;
    Ok(model.run_from(0, &state, &mut |l, out| plan.apply(l, out))?[0])
}

/// Inputs of one layer for a set of samples, so repeated injections skip the
/// layers before it. Results are bit-identical to full passes.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCache {
    start: usize,
    states: Vec<Vec<f64>>,
}

impl StateCache {
    pub fn build(model: &ModelGraph, start: usize, inputs: &[Tensor]) -> Result<Self, InjectionError> {
        let states = inputs.par_iter().map(|x| model.layer_input(x, start)).collect::<Result<Vec<_>, NnError>>()?;
        Ok(Self { start, states })
    }

    pub fn from_states(start: usize, states: Vec<Vec<f64>>) -> Self {
        Self { start, states }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// A cache over the chosen rows.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self { start: self.start, states: rows.iter().map(|&r| self.states[r].clone()).collect() }
    }

    pub fn score(&self, model: &ModelGraph, row: usize, plan: &CompiledPlan) -> Result<f64, InjectionError> {
        if let Some(layer) = plan.first_layer().filter(|&l| l < self.start) {
            return Err(InjectionError::BeforeCache { layer, start: self.start });
        }
        Ok(model.run_from(self.start, &self.states[row], &mut |l, out| plan.apply(l, out))?[0])
    }

    /// Output score plus the outputs of layers `start..`, concatenated.
    pub fn trace(&self, model: &ModelGraph, row: usize, plan: &CompiledPlan) -> Result<(f64, Vec<f64>), InjectionError> {
        if let Some(layer) = plan.first_layer().filter(|&l| l < self.start) {
            return Err(InjectionError::BeforeCache { layer, start: self.start });
        }
        let mut taps = Vec::new();
        let out = model.run_from(self.start, &self.states[row], &mut |l, out| {
            plan.apply(l, out);
            taps.extend_from_slice(out);
        })?;
        Ok((out[0], taps))
    }

    pub fn scores(&self, model: &ModelGraph, plan: &CompiledPlan) -> Result<Vec<f64>, InjectionError> {
        (0..self.states.len()).into_par_iter().map(|r| self.score(model, r, plan)).collect()
    }
}

pub fn decide(score: f64) -> bool {
    score >= DECISION_THRESHOLD
}

/// Fraction of scores whose thresholded label equals the expectation.
pub fn match_ratio(scores: &[f64], expected: &[bool]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(expected).filter(|(s, e)| decide(**s) == **e).count();
    hits as f64 / scores.len() as f64
}

/// Success ratio of one plan on `(input, expected label)` pairs.
pub fn expectation_eval(model: &ModelGraph, plan: &InjectionPlan, eval_set: &[(Tensor, bool)]) -> Result<f64, InjectionError> {
    if eval_set.is_empty() {
        return Err(InjectionError::EmptyEvalSet);
    }
    let compiled = CompiledPlan::new(model, &[plan])?;
    let scores = eval_set.par_iter().map(|(x, _)| injected_score(model, x, &compiled)).collect::<Result<Vec<_>, _>>()?;
    let expected: Vec<bool> = eval_set.iter().map(|(_, e)| *e).collect();
    Ok(match_ratio(&scores, &expected))
}
