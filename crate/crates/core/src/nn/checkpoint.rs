use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::model::Layer;
use super::{ModelGraph, NnError};
use crate::container::{self, ContainerError};

pub const MODEL_KIND: &str = "model";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    seed: u64,
    neuron_count: usize,
}

impl ModelGraph {
    pub(crate) fn to_container(&self) -> (serde_json::Value, Vec<f64>) {
        let header = ModelHeader {
            input_shape: self.input_shape().to_vec(),
            layers: self.layer_specs(),
            seed: self.seed(),
            neuron_count: self.neuron_count(),
        };
        (serde_json::to_value(header).expect("header serialises"), self.flat_params())
    }

    pub(crate) fn from_container(body: serde_json::Value, payload: &[f64]) -> Result<Self, NnError> {
        let header: ModelHeader = serde_json::from_value(body).map_err(|e| ContainerError::Header(e.to_string()))?;
        let expected: usize = header.layers.iter().map(|l| l.param_count()).sum();
        if expected != payload.len() {
            return Err(ContainerError::Header(format!("layers need {expected} parameters, payload holds {}", payload.len())).into());
        }
        let mut rest = payload;
        let layers = header
            .layers
            .iter()
            .map(|spec| {
                let (head, tail) = rest.split_at(spec.param_count());
                rest = tail;
                Layer { spec: *spec, params: head.to_vec() }
            })
            .collect();
        let model = ModelGraph::from_layers(header.input_shape, layers, header.seed)?;
        if model.neuron_count() != header.neuron_count {
            return Err(ContainerError::Header(format!(
                "header neuron_count {} disagrees with layers ({})",
                header.neuron_count,
                model.neuron_count()
            ))
            .into());
        }
        Ok(model)
    }
}

pub fn checkpoint_save(model: &ModelGraph, path: &Path) -> Result<(), NnError> {
    let (body, payload) = model.to_container();
    container::write_file(path, MODEL_KIND, body, &payload)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<ModelGraph, NnError> {
    let (body, payload) = container::read_file(path, MODEL_KIND)?;
    ModelGraph::from_container(body, &payload)
}

pub fn checkpoint_bytes(model: &ModelGraph) -> Vec<u8> {
    let (body, payload) = model.to_container();
    container::encode(MODEL_KIND, body, &payload)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelGraph, NnError> {
    let (body, payload) = container::decode(bytes, MODEL_KIND)?;
    ModelGraph::from_container(body, &payload)
}
