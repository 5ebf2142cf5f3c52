use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerSpec};
use super::{ModelGraph, NnError, Tensor};

/// Random-access labelled examples with labels in `{0, 1}`.
pub trait LabeledData: Sync {
    fn len(&self) -> usize;
    fn input(&self, index: usize) -> Tensor;
    fn label(&self, index: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabeledData for [(Tensor, f64)] {
    fn len(&self) -> usize {
        <[(Tensor, f64)]>::len(self)
    }
    fn input(&self, index: usize) -> Tensor {
        self[index].0.clone()
    }
    fn label(&self, index: usize) -> f64 {
        self[index].1
    }
}

impl LabeledData for Vec<(Tensor, f64)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn input(&self, index: usize) -> Tensor {
        self[index].0.clone()
    }
    fn label(&self, index: usize) -> f64 {
        self[index].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub momentum: f64,
    /// L2 penalty coefficient, applied to every parameter.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { lr: 0.01, batch: 32, epochs: 10, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// Per-layer parameter gradients, same layout as the model parameters.
pub type Gradients = Vec<Vec<f64>>;

fn check_head(model: &ModelGraph) -> Result<(), NnError> {
    let last = model.layer_count() - 1;
    if !matches!(model.layer_spec(last), LayerSpec::Sigmoid) || model.layer_width(last) != 1 {
        return Err(NnError::Spec("binary cross-entropy needs a width-1 sigmoid output layer".into()));
    }
    if last == 0 {
        return Err(NnError::Spec("sigmoid head needs a producing layer".into()));
    }
    Ok(())
}

/// Binary cross-entropy of one example, computed on the logit feeding the sigmoid head.
pub fn example_loss(model: &ModelGraph, input: &Tensor, label: f64) -> Result<f64, NnError> {
    check_head(model)?;
    let last = model.layer_count() - 1;
    let (_, taps) = model.forward_taps(input)?;
    let z = taps.layer(model, last - 1)[0];
    Ok(layer::softplus(z) - label * z)
}

/// Loss and parameter gradients of one example.
pub fn loss_and_grad(model: &ModelGraph, input: &Tensor, label: f64) -> Result<(f64, Gradients), NnError> {
    check_head(model)?;
    let mut grads: Gradients = model.layers.iter().map(|l| vec![0.0; l.params.len()]).collect();
    let loss = accumulate_grad(model, input, label, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_grad(model: &ModelGraph, input: &Tensor, label: f64, grads: &mut Gradients) -> Result<f64, NnError> {
    let n = model.layer_count();
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(n);
    model.run_from(0, input.data(), &mut |_, out| outs.push(out.to_vec()))?;
    let z = outs[n - 2][0];
    let p = outs[n - 1][0];
    let loss = layer::softplus(z) - label * z;
    // d(loss)/dz for sigmoid + BCE.
    let mut grad = vec![p - label];
    for i in (0..n - 1).rev() {
        let layer = &model.layers[i];
        let input_i: &[f64] = if i == 0 { input.data() } else { &outs[i - 1] };
        let need = i > 0;
        let next = layer::backward(&layer.spec, &layer.params, model.layer_input_shape(i), input_i, &outs[i], &grad, &mut grads[i], need);
        match next {
            Some(g) => grad = g,
            None => break,
        }
    }
    Ok(loss)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: ModelGraph,
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
}

/// Minibatch SGD with momentum on binary cross-entropy. The shuffle order is
/// drawn from a ChaCha stream seeded by `seed`, so runs are reproducible.
pub fn sgd_fit(model: &ModelGraph, data: &dyn LabeledData, hyper: &Hyper, seed: u64) -> Result<FitOutcome, NnError> {
    sgd_fit_with(model, data, hyper, seed, &mut |_, _| {})
}

/// [`sgd_fit`] with a per-epoch callback `(epoch, mean_loss)`.
pub fn sgd_fit_with(
    model: &ModelGraph,
    data: &dyn LabeledData,
    hyper: &Hyper,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<FitOutcome, NnError> {
    check_head(model)?;
    if data.is_empty() {
        return Err(NnError::Spec("empty training set".into()));
    }
    if hyper.batch == 0 {
        return Err(NnError::Spec("batch size must be positive".into()));
    }
    for i in 0..data.len() {
        let y = data.label(i);
        if y != 0.0 && y != 1.0 {
            return Err(NnError::Spec(format!("label {y} at index {i} is not 0 or 1")));
        }
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Gradients = model.layers.iter().map(|l| vec![0.0; l.params.len()]).collect();
    let mut grads: Gradients = velocity.clone();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch) {
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for &i in batch {
                total += accumulate_grad(&model, &data.input(i), data.label(i), &mut grads).map_err(|e| match e {
                    NnError::NumericFault { .. } => NnError::Diverged { epoch, history: history.clone() },
                    other => other,
                })?;
            }
            let scale = 1.0 / batch.len() as f64;
            for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((p, v), g) in layer.params.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = hyper.momentum * *v - hyper.lr * (g * scale + hyper.weight_decay * *p);
                    *p += *v;
                }
            }
        }
        let mean = total / data.len() as f64;
        let weights_ok = model.layers.iter().all(|l| l.params.iter().all(|p| p.is_finite()));
        if !mean.is_finite() || !weights_ok {
            return Err(NnError::Diverged { epoch, history });
        }
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(FitOutcome { model, history })
}

/// Fraction of examples whose thresholded (0.5) score matches the label.
pub fn accuracy(model: &ModelGraph, data: &dyn LabeledData) -> Result<f64, NnError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let score = model.score(&data.input(i))?;
        if (score >= 0.5) == (data.label(i) >= 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Analytic vs. central-difference gradients for one example.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

const FD_STEP: f64 = 1e-5;
/// Denominator floor so parameters with ~zero gradient compare on absolute error.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_FLOOR);
    (a - b).abs() / denom
}

/// Compares backprop gradients against central finite differences (h = 1e-5).
pub fn gradient_check(model: &ModelGraph, input: &Tensor, label: f64) -> Result<GradientCheck, NnError> {
    let (_, grads) = loss_and_grad(model, input, label)?;
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = model.clone();
    for layer in 0..model.layer_count() {
        for j in 0..model.params(layer).len() {
            let orig = model.params(layer)[j];
            probe.layers[layer].params[j] = orig + FD_STEP;
            let up = example_loss(&probe, input, label)?;
            probe.layers[layer].params[j] = orig - FD_STEP;
            let down = example_loss(&probe, input, label)?;
            probe.layers[layer].params[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let max_rel_error = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
    Ok(GradientCheck { analytic, numeric, max_rel_error })
}
