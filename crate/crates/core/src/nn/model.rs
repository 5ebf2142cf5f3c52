use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerSpec};
use super::{NnError, Tensor};

/// Position of a neuron: the layer that produces it and its row-major offset
/// inside that layer's output. Ordered by `(layer, offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct NeuronId {
    pub layer: usize,
    pub offset: usize,
}

impl NeuronId {
    pub fn new(layer: usize, offset: usize) -> Self {
        Self { layer, offset }
    }
}

impl From<(usize, usize)> for NeuronId {
    fn from((layer, offset): (usize, usize)) -> Self {
        Self { layer, offset }
    }
}

impl From<NeuronId> for (usize, usize) {
    fn from(id: NeuronId) -> Self {
        (id.layer, id.offset)
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}", self.layer, self.offset)
    }
}

/// Every layer output of one forward pass, concatenated in `NeuronId` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    values: Vec<f64>,
}

impl ActivationVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, model: &ModelGraph, id: NeuronId) -> Option<f64> {
        model.global_index(id).map(|i| self.values[i])
    }

    pub fn layer(&self, model: &ModelGraph, layer: usize) -> &[f64] {
        &self.values[model.layer_range(layer)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) params: Vec<f64>,
}

/// A feedforward stack with weights and a fixed global neuron ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    pub(crate) layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    neuron_count: usize,
    seed: u64,
}

/// Builds a model, initialising weights uniformly in `±sqrt(6 / fan_in)` with
/// zero biases from a ChaCha stream seeded by `seed`.
pub fn build_model(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<ModelGraph, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|spec| {
            let n = spec.param_count();
            let fan_in = spec.fan_in();
            let mut params = vec![0.0; n];
            if fan_in > 0 {
                let bias_len = match *spec {
                    LayerSpec::Dense { units, .. } => units,
                    LayerSpec::Conv2d { filters, .. } => filters,
                    _ => 0,
                };
                let limit = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[..n - bias_len] {
                    *p = rng.gen_range(-limit..limit);
                }
            }
            Layer { spec: *spec, params }
        })
        .collect();
    ModelGraph::from_layers(input_shape.to_vec(), layers, seed)
}

impl ModelGraph {
    pub(crate) fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, seed: u64) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Spec("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::Spec(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut current = input_shape.clone();
        let mut total = 0;
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.spec.output_shape(&current).map_err(|msg| {
                let prev = if i == 0 { "input".to_string() } else { format!("layer {} ({})", i - 1, layers[i - 1].spec.name()) };
                NnError::Spec(format!("{prev} -> layer {i} ({}): {msg}", layer.spec.name()))
            })?;
            if layer.params.len() != layer.spec.param_count() {
                return Err(NnError::Spec(format!(
                    "layer {i}: expected {} parameters, found {}",
                    layer.spec.param_count(),
                    layer.params.len()
                )));
            }
            if layer.params.iter().any(|p| !p.is_finite()) {
                return Err(NnError::Spec(format!("layer {i}: non-finite weight")));
            }
            offsets.push(total);
            total += next.iter().product::<usize>();
            shapes.push(next.clone());
            current = next;
        }
        offsets.push(total);
        Ok(Self { input_shape, layers, shapes, offsets, neuron_count: total, seed })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty model")
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_spec(&self, layer: usize) -> &LayerSpec {
        &self.layers[layer].spec
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn layer_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Input shape of `layer`.
    pub fn layer_input_shape(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        self.offsets[layer + 1] - self.offsets[layer]
    }

    /// Slice of an [`ActivationVector`] holding `layer`'s outputs.
    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn neuron_count(&self) -> usize {
        self.neuron_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    pub fn params(&self, layer: usize) -> &[f64] {
        &self.layers[layer].params
    }

    /// Flat copy of all parameters, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params.iter().copied()).collect()
    }

    /// Replaces a layer's parameters (weights then biases).
    pub fn set_params(&mut self, layer: usize, params: Vec<f64>) -> Result<(), NnError> {
        let l = self.layers.get_mut(layer).ok_or_else(|| NnError::Spec(format!("no layer {layer}")))?;
        if params.len() != l.params.len() {
            return Err(NnError::Spec(format!("layer {layer} takes {} parameters, got {}", l.params.len(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::Spec(format!("layer {layer}: non-finite weight")));
        }
        l.params = params;
        Ok(())
    }

    pub fn global_index(&self, id: NeuronId) -> Option<usize> {
        (id.layer < self.layers.len() && id.offset < self.layer_width(id.layer)).then(|| self.offsets[id.layer] + id.offset)
    }

    pub fn neuron_at(&self, index: usize) -> Option<NeuronId> {
        if index >= self.neuron_count {
            return None;
        }
        let layer = self.offsets.partition_point(|&o| o <= index) - 1;
        Some(NeuronId::new(layer, index - self.offsets[layer]))
    }

    pub fn neurons_in_layer(&self, layer: usize) -> impl Iterator<Item = NeuronId> {
        (0..self.layer_width(layer)).map(move |o| NeuronId::new(layer, o))
    }

    pub fn all_neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.layers.len()).flat_map(move |l| self.neurons_in_layer(l))
    }

    /// Runs layers `start..` on `state` (the input of layer `start`), handing
    /// each layer's output to `hook` before the next layer consumes it.
    pub fn run_from(&self, start: usize, state: &[f64], hook: &mut dyn FnMut(usize, &mut [f64])) -> Result<Vec<f64>, NnError> {
        self.run_span(start, self.layers.len(), state, hook)
    }

    /// Input of layer `layer` (the network input itself for layer 0).
    pub fn layer_input(&self, input: &Tensor, layer: usize) -> Result<Vec<f64>, NnError> {
        self.check_input(input)?;
        if layer == 0 {
            return Ok(input.data().to_vec());
        }
        self.run_span(0, layer, input.data(), &mut |_, _| {})
    }

    /// Runs layers `start..end`.
    pub fn run_span(&self, start: usize, end: usize, state: &[f64], hook: &mut dyn FnMut(usize, &mut [f64])) -> Result<Vec<f64>, NnError> {
        if start >= end || end > self.layers.len() {
            return Err(NnError::Spec(format!("layer span {start}..{end} out of range")));
        }
        let expected: usize = self.layer_input_shape(start).iter().product();
        if state.len() != expected {
            return Err(NnError::Shape(format!("layer {start} expects {expected} inputs, got {}", state.len())));
        }
        let mut current = state.to_vec();
        for i in start..end {
            let layer = &self.layers[i];
            let mut out = layer::forward(&layer.spec, &layer.params, self.layer_input_shape(i), &current);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NumericFault { layer: i });
            }
            hook(i, &mut out);
            current = out;
        }
        Ok(current)
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(NnError::Shape(format!("model expects input {:?}, got {:?}", self.input_shape, input.shape())));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input)?;
        let out = self.run_from(0, input.data(), &mut |_, _| {})?;
        Ok(Tensor::from_parts_unchecked(self.output_shape().to_vec(), out))
    }

    /// Forward pass that also records every layer output.
    pub fn forward_taps(&self, input: &Tensor) -> Result<(Tensor, ActivationVector), NnError> {
        self.check_input(input)?;
        let mut taps = Vec::with_capacity(self.neuron_count);
        let out = self.run_from(0, input.data(), &mut |_, out| taps.extend_from_slice(out))?;
        Ok((Tensor::from_parts_unchecked(self.output_shape().to_vec(), out), ActivationVector::new(taps)))
    }

    /// Scalar output of a single-unit head.
    pub fn score(&self, input: &Tensor) -> Result<f64, NnError> {
        Ok(self.forward(input)?.data()[0])
    }

    /// Index of the first dense layer, if any.
    pub fn first_dense_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.spec, LayerSpec::Dense { .. }))
    }

    /// Activation layers that follow a hidden dense layer (every dense layer
    /// except the output head). This is "the dense part" of a conv net.
    pub fn dense_hidden_layers(&self) -> Vec<usize> {
        let last_dense = self.layers.iter().rposition(|l| matches!(l.spec, LayerSpec::Dense { .. }));
        (1..self.layers.len())
            .filter(|&i| {
                matches!(self.layers[i].spec, LayerSpec::Relu | LayerSpec::Sigmoid)
                    && matches!(self.layers[i - 1].spec, LayerSpec::Dense { .. })
                    && Some(i - 1) != last_dense
            })
            .collect()
    }
}

/// The default conv net for the TypeA task on `[1, height, width]` images.
pub fn default_architecture(height: usize, width: usize) -> Vec<LayerSpec> {
    let flat = 16 * (height / 4) * (width / 4);
    vec![
        LayerSpec::conv_same(1, 8, 3),
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { size: 2 },
        LayerSpec::conv_same(8, 16, 3),
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::dense(flat, 64),
        LayerSpec::Relu,
        LayerSpec::dense(64, 32),
        LayerSpec::Relu,
        LayerSpec::dense(32, 1),
        LayerSpec::Sigmoid,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let specs = default_architecture(16, 32);
        let a = build_model(&[1, 16, 32], &specs, 11).unwrap();
        let b = build_model(&[1, 16, 32], &specs, 11).unwrap();
        let c = build_model(&[1, 16, 32], &specs, 12).unwrap();
        let bits = |m: &ModelGraph| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn neuron_count_includes_flatten_passthrough() {
        let m = build_model(&[1, 2, 2], &[LayerSpec::Flatten, LayerSpec::dense(4, 2)], 0).unwrap();
        assert_eq!(m.neuron_count(), 4 + 2);
        assert_eq!(m.neuron_at(5), Some(NeuronId::new(1, 1)));
        assert_eq!(m.global_index(NeuronId::new(1, 0)), Some(4));
        assert_eq!(m.global_index(NeuronId::new(1, 2)), None);
    }

    #[test]
    fn mismatched_dense_names_offending_pair() {
        let err = build_model(&[4], &[LayerSpec::dense(4, 3), LayerSpec::dense(5, 3)], 0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, NnError::Spec(_)));
        assert!(msg.contains("layer 0") && msg.contains("layer 1"), "{msg}");
    }

    #[test]
    fn weights_respect_init_bounds_and_zero_bias() {
        let m = build_model(&[10], &[LayerSpec::dense(10, 5)], 3).unwrap();
        let limit = (6.0f64 / 10.0).sqrt();
        let p = m.params(0);
        assert!(p[..50].iter().all(|w| w.abs() <= limit));
        assert!(p[50..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weights_sigmoid_head_gives_half() {
        let mut m = build_model(&[3], &[LayerSpec::dense(3, 1), LayerSpec::Sigmoid], 1).unwrap();
        m.set_params(0, vec![0.0; 4]).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(m.score(&x).unwrap(), 0.5);
    }

    #[test]
    fn identity_dense_taps_equal_input() {
        let mut m = build_model(&[3], &[LayerSpec::dense(3, 3), LayerSpec::Relu], 1).unwrap();
        let mut p = vec![0.0; 12];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        m.set_params(0, p).unwrap();
        let x = Tensor::vector(vec![0.25, -1.5, 4.0]).unwrap();
        let (_, taps) = m.forward_taps(&x).unwrap();
        assert_eq!(taps.layer(&m, 0), x.data());
        assert_eq!(taps.len(), m.neuron_count());
    }

    #[test]
    fn relu_clamps_negative() {
        let m = build_model(&[1, 1, 1], &[LayerSpec::Relu], 0).unwrap();
        let x = Tensor::new(vec![1, 1, 1], vec![-2.0]).unwrap();
        let (out, taps) = m.forward_taps(&x).unwrap();
        assert_eq!(out.data(), &[0.0]);
        assert_eq!(taps.values(), &[0.0]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = build_model(&[3], &[LayerSpec::dense(3, 1)], 0).unwrap();
        assert!(m.forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn overflow_reports_numeric_fault_with_layer() {
        let mut m = build_model(&[1], &[LayerSpec::dense(1, 1), LayerSpec::dense(1, 1)], 0).unwrap();
        m.set_params(0, vec![1e300, 0.0]).unwrap();
        m.set_params(1, vec![1e300, 0.0]).unwrap();
        let err = m.forward(&Tensor::vector(vec![1e10]).unwrap()).unwrap_err();
        assert!(matches!(err, NnError::NumericFault { layer: 0 }), "{err:?}");
    }

    #[test]
    fn dense_hidden_layers_of_default_net() {
        let m = build_model(&[1, 32, 128], &default_architecture(32, 128), 0).unwrap();
        assert_eq!(m.dense_hidden_layers(), vec![8, 10]);
        assert_eq!(m.layer_width(8), 64);
        assert_eq!(m.layer_width(10), 32);
        assert_eq!(m.output_shape(), &[1]);
    }
}
