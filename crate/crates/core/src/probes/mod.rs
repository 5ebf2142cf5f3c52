//! Mapping networks: small classifiers over internal activations that report
//! whether the main model perceives a concept.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::ConceptDataset;
use crate::container::{self, ContainerError};
use crate::injection::{forward_compiled, CompiledPlan, InjectionError, InjectionPlan};
use crate::nn::{accuracy, build_model, sgd_fit, ActivationVector, Hyper, LayerSpec, ModelGraph, NeuronId, NnError, Tensor};
use crate::seeds;

pub const PROBE_KIND: &str = "probe";
pub const MIN_PER_CLASS: usize = 200;
/// Held-out test samples per class when enough data exists.
pub const TEST_PER_CLASS: usize = 500;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe needs {MIN_PER_CLASS} samples per class, got {positives} positive / {negatives} negative")]
    TooFewSamples { positives: usize, negatives: usize },
    #[error("probe expects {expected} inputs, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("neuron {0} is not part of the model")]
    UnknownNeuron(NeuronId),
    #[error("sample list is empty")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl ProbeError {
    pub fn is_numeric(&self) -> bool {
        match self {
            ProbeError::Nn(e) => e.is_numeric(),
            ProbeError::Injection(e) => e.is_numeric(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeArch {
    Linear,
    Mlp16,
}

impl fmt::Display for ProbeArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeArch::Linear => "linear",
            ProbeArch::Mlp16 => "mlp16",
        })
    }
}

impl FromStr for ProbeArch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ProbeArch::Linear),
            "mlp16" => Ok(ProbeArch::Mlp16),
            _ => Err(format!("unknown probe architecture '{s}' (linear or mlp16)")),
        }
    }
}

impl ProbeArch {
    fn specs(self, inputs: usize) -> Vec<LayerSpec> {
        match self {
            ProbeArch::Linear => vec![LayerSpec::dense(inputs, 1), LayerSpec::Sigmoid],
            ProbeArch::Mlp16 => {
                vec![LayerSpec::dense(inputs, 16), LayerSpec::Relu, LayerSpec::dense(16, 1), LayerSpec::Sigmoid]
            }
        }
    }
}

pub fn default_hyper() -> Hyper {
    Hyper { lr: 0.05, batch: 32, epochs: 40, momentum: 0.9, weight_decay: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProbeHeader {
    concept: String,
    arch: ProbeArch,
    input_neurons: Vec<NeuronId>,
    input_index: Vec<usize>,
    source_neurons: usize,
    seed: u64,
}

/// Classifier over standardised activations of `input_neurons`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub concept: String,
    pub arch: ProbeArch,
    pub input_neurons: Vec<NeuronId>,
    /// Positions of `input_neurons` in a full tap vector of the source model.
    input_index: Vec<usize>,
    /// Neuron count of the source model.
    source_neurons: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub net: ModelGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub presence: bool,
    pub score: f64,
}

impl Probe {
    /// Untrained probe with identity standardisation.
    pub fn new(source: &ModelGraph, concept: &str, input_neurons: Vec<NeuronId>, arch: ProbeArch, seed: u64) -> Result<Self, ProbeError> {
        let input_index =
            input_neurons.iter().map(|&id| source.global_index(id).ok_or(ProbeError::UnknownNeuron(id))).collect::<Result<Vec<_>, _>>()?;
        let d = input_neurons.len();
        if d == 0 {
            return Err(ProbeError::Empty);
        }
        Ok(Self {
            concept: concept.to_string(),
            arch,
            input_neurons,
            input_index,
            source_neurons: source.neuron_count(),
            seed,
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            net: build_model(&[d], &arch.specs(d), seed)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_neurons.len()
    }

    fn standardise(&self, row: impl Iterator<Item = f64>) -> Tensor {
        let data = row.zip(self.mean.iter().zip(&self.scale)).map(|(x, (m, s))| (x - m) / s).collect();
        Tensor::vector(data).expect("probe input is nonempty")
    }

    /// Readout from raw (unstandardised) values of `input_neurons`.
    pub fn predict_row(&self, row: &[f64]) -> Result<Readout, ProbeError> {
        if row.len() != self.input_dim() {
            return Err(ProbeError::Dimension { expected: self.input_dim(), found: row.len() });
        }
        let score = self.net.score(&self.standardise(row.iter().copied()))?;
        Ok(Readout { presence: score >= 0.5, score })
    }

    pub fn predict_f32(&self, row: &[f32]) -> Result<Readout, ProbeError> {
        self.predict_row(&row.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }

    /// Accuracy over rows and expected presences.
    pub fn accuracy_on(&self, rows: &[Vec<f64>], labels: &[bool]) -> Result<f64, ProbeError> {
        if rows.is_empty() {
            return Err(ProbeError::Empty);
        }
        let hits = rows
            .par_iter()
            .zip(labels)
            .map(|(r, &l)| self.predict_row(r).map(|o| o.presence == l))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|&h| h)
            .count();
        Ok(hits as f64 / rows.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (model_body, params) = self.net.to_container();
        let header = ProbeHeader {
            concept: self.concept.clone(),
            arch: self.arch,
            input_neurons: self.input_neurons.clone(),
            input_index: self.input_index.clone(),
            source_neurons: self.source_neurons,
            seed: self.seed,
        };
        let body = serde_json::json!({ "probe": header, "model": model_body });
        let payload: Vec<f64> = self.mean.iter().chain(&self.scale).chain(&params).copied().collect();
        container::encode(PROBE_KIND, body, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let (body, payload) = container::decode(bytes, PROBE_KIND)?;
        let header: ProbeHeader = serde_json::from_value(body["probe"].clone()).map_err(|e| ContainerError::Header(e.to_string()))?;
        let d = header.input_neurons.len();
        if payload.len() < 2 * d || header.input_index.len() != d {
            return Err(ContainerError::Header("probe payload shorter than its standardisation".into()).into());
        }
        let net = ModelGraph::from_container(body["model"].clone(), &payload[2 * d..])?;
        Ok(Self {
            concept: header.concept,
            arch: header.arch,
            input_neurons: header.input_neurons,
            input_index: header.input_index,
            source_neurons: header.source_neurons,
            seed: header.seed,
            mean: payload[..d].to_vec(),
            scale: payload[d..2 * d].to_vec(),
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        std::fs::write(path, self.to_bytes()).map_err(ContainerError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        Self::from_bytes(&std::fs::read(path).map_err(ContainerError::Io)?)
    }
}

/// Readout from a full tap vector of the source model.
pub fn probe_predict(probe: &Probe, taps: &ActivationVector) -> Result<Readout, ProbeError> {
    if taps.len() != probe.source_neurons {
        return Err(ProbeError::Dimension { expected: probe.source_neurons, found: taps.len() });
    }
    let row: Vec<f64> = probe.input_index.iter().map(|&i| taps.values()[i]).collect();
    probe.predict_row(&row)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub probe: Probe,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains on the dataset's rows, holding out a balanced test split of up to
/// [`TEST_PER_CLASS`] per class (a quarter of the smaller class at most).
pub fn train_probe(model: &ModelGraph, ds: &ConceptDataset, arch: ProbeArch, seed: u64) -> Result<ProbeFit, ProbeError> {
    train_probe_with(model, ds, arch, seed, &default_hyper())
}

pub fn train_probe_with(
    model: &ModelGraph,
    ds: &ConceptDataset,
    arch: ProbeArch,
    seed: u64,
    hyper: &Hyper,
) -> Result<ProbeFit, ProbeError> {
    let (np, nn) = (ds.acts_p.rows(), ds.acts_n.rows());
    if np < MIN_PER_CLASS || nn < MIN_PER_CLASS {
        return Err(ProbeError::TooFewSamples { positives: np, negatives: nn });
    }
    let mut probe = Probe::new(model, &ds.concept, ds.neuron_ids.clone(), arch, seed)?;
    let test_per_class = TEST_PER_CLASS.min(np.min(nn) / 4);
    let mut rng = seeds::rng(seeds::derive_named(seed, "probe-split"));
    let mut split = |rows: usize| {
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let train = order.split_off(test_per_class);
        (train, order)
    };
    let (train_p, test_p) = split(np);
    let (train_n, test_n) = split(nn);
    let row = |positive: bool, r: usize| -> Vec<f64> {
        let m = if positive { &ds.acts_p } else { &ds.acts_n };
        m.row(r).iter().map(|&v| v as f64).collect()
    };
    let train_rows: Vec<(Vec<f64>, bool)> =
        train_p.iter().map(|&r| (row(true, r), true)).chain(train_n.iter().map(|&r| (row(false, r), false))).collect();

    let d = probe.input_dim();
    let count = train_rows.len() as f64;
    for j in 0..d {
        let mean = train_rows.iter().map(|(r, _)| r[j]).sum::<f64>() / count;
        let var = train_rows.iter().map(|(r, _)| (r[j] - mean).powi(2)).sum::<f64>() / count;
        probe.mean[j] = mean;
        probe.scale[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let data: Vec<(Tensor, f64)> =
        train_rows.iter().map(|(r, y)| (probe.standardise(r.iter().copied()), if *y { 1.0 } else { 0.0 })).collect();
    let fit = sgd_fit(&probe.net, &data, hyper, seeds::derive_named(seed, "probe-fit"))?;
    probe.net = fit.model;
    log::debug!("probe {} train accuracy {:.4}", probe.concept, accuracy(&probe.net, &data)?);

    let test_rows: Vec<Vec<f64>> = test_p.iter().map(|&r| row(true, r)).chain(test_n.iter().map(|&r| row(false, r))).collect();
    let test_labels: Vec<bool> = (0..test_rows.len()).map(|i| i < test_p.len()).collect();
    let test_accuracy = probe.accuracy_on(&test_rows, &test_labels)?;
    Ok(ProbeFit { probe, test_accuracy, train_size: train_rows.len(), test_size: test_rows.len() })
}

/// Fraction of samples whose probe presence changes once `plan` is injected.
pub fn flip_rate(model: &ModelGraph, plan: &InjectionPlan, probe: &Probe, samples: &[Tensor]) -> Result<f64, ProbeError> {
    if samples.is_empty() {
        return Err(ProbeError::Empty);
    }
    let compiled = CompiledPlan::new(model, &[plan])?;
    let flips = samples
        .par_iter()
        .map(|x| -> Result<bool, ProbeError> {
            let (_, before) = model.forward_taps(x)?;
            let (_, after) = forward_compiled(model, x, &compiled)?;
            Ok(probe_predict(probe, &before)?.presence != probe_predict(probe, &after)?.presence)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(flips.iter().filter(|&&f| f).count() as f64 / samples.len() as f64)
}
