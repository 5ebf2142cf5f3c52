use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_train, render, DataError, GrayImage, TrainSpec};
use crate::nn::{LabeledData, Tensor};
use crate::ontology::{normalize_name, ConceptDag};
use crate::seeds;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    /// Fraction of samples that are instances of the task concept.
    pub balance: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n: 10_000, balance: 0.5, seed: 0, width: 128, height: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub train: TrainSpec,
    pub labels: BTreeMap<String, bool>,
    /// Relative to the manifest directory.
    pub image: String,
}

impl SampleRecord {
    pub fn label(&self, concept: &str) -> Option<bool> {
        self.labels.get(concept).or_else(|| self.labels.get(&normalize_name(concept))).copied()
    }
}

/// Records of one dataset directory, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(dir.join(MANIFEST_FILE))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| DataError::Parse(format!("{MANIFEST_FILE} line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self { root: dir.to_path_buf(), records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.records[index].image)
    }

    pub fn load_image(&self, index: usize) -> Result<GrayImage, DataError> {
        GrayImage::from_pgm(&fs::read(self.image_path(index))?)
    }

    /// Images for `indices`, loaded in parallel.
    pub fn load_images(&self, indices: &[usize]) -> Result<Vec<GrayImage>, DataError> {
        indices.par_iter().map(|&i| self.load_image(i)).collect()
    }

    /// Re-evaluates every record against `dag`; the first mismatch is an error.
    pub fn audit(&self, dag: &ConceptDag) -> Result<(), DataError> {
        self.records.par_iter().try_for_each(|r| audit_record(r, dag))
    }

    /// Images and 0/1 targets for `concept` over `indices`.
    pub fn labeled(&self, indices: &[usize], concept: &str) -> Result<ImageSet, DataError> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.records[i]
                    .label(concept)
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .ok_or_else(|| DataError::Parse(format!("record {} has no label '{concept}'", self.records[i].id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ImageSet { images: self.load_images(indices)?, labels })
    }

    fn write(&self) -> Result<(), DataError> {
        let mut out = BufWriter::new(fs::File::create(self.root.join(MANIFEST_FILE))?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| DataError::Parse(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn audit_record(r: &SampleRecord, dag: &ConceptDag) -> Result<(), DataError> {
    let fresh = dag.evaluate(&r.train).values;
    if fresh.len() != r.labels.len() {
        return Err(DataError::Audit { id: r.id.clone(), concept: "<label set>".into() });
    }
    for (name, v) in &fresh {
        if r.labels.get(name) != Some(v) {
            return Err(DataError::Audit { id: r.id.clone(), concept: name.clone() });
        }
    }
    Ok(())
}

/// Grayscale images with binary targets; pixels are converted on access.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<GrayImage>,
    pub labels: Vec<f64>,
}

impl LabeledData for ImageSet {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn input(&self, index: usize) -> Tensor {
        self.images[index].to_tensor()
    }

    fn label(&self, index: usize) -> f64 {
        self.labels[index]
    }
}

/// Writes `cfg.n` samples to `out_dir`. Exactly `round(n * balance)` samples
/// are task-concept positives, placed at seed-shuffled positions.
pub fn generate_dataset(cfg: &DatasetConfig, dag: &ConceptDag, out_dir: &Path) -> Result<Manifest, DataError> {
    if cfg.n == 0 {
        return Err(DataError::InvalidTrain("dataset size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.balance) {
        return Err(DataError::Balance(cfg.balance));
    }
    let task = dag.task().to_string();
    let positives = (cfg.n as f64 * cfg.balance).round() as usize;
    let mut targets: Vec<bool> = (0..cfg.n).map(|i| i < positives).collect();
    targets.shuffle(&mut seeds::rng(seeds::derive_named(cfg.seed, "targets")));

    fs::create_dir_all(out_dir.join("img"))?;
    let records = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let sub = seeds::derive(cfg.seed, i as u64);
            let train = generate_train(sub, &[(task.clone(), targets[i])], dag).map_err(|e| match e {
                DataError::Unsatisfiable(_) => DataError::Balance(cfg.balance),
                other => other,
            })?;
            let id = format!("{i:06}");
            let image = format!("img/{id}.pgm");
            fs::write(out_dir.join(&image), render(&train, cfg.width, cfg.height)?.to_pgm())?;
            let rec = SampleRecord { labels: dag.evaluate(&train).values, id, train, image };
            audit_record(&rec, dag)?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    manifest.write()?;
    log::info!("wrote {} samples ({positives} {task}) to {}", cfg.n, out_dir.display());
    Ok(manifest)
}

/// Conjunction of `concept=value` requirements, e.g. `TypeA=true,EmptyTrain=false`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelFilter {
    pub terms: Vec<(String, bool)>,
}

impl LabelFilter {
    pub fn new(terms: Vec<(String, bool)>) -> Self {
        Self { terms }
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut terms = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.rsplit_once('=').ok_or_else(|| DataError::Parse(format!("filter term '{part}' lacks '='")))?;
            let value = match value.trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                v => return Err(DataError::Parse(format!("filter value '{v}' is not a boolean"))),
            };
            terms.push((normalize_name(name), value));
        }
        Ok(Self { terms })
    }

    pub fn matches(&self, record: &SampleRecord) -> bool {
        self.terms.iter().all(|(c, v)| record.label(c) == Some(*v))
    }
}

/// Indices (ascending) of up to `limit` matching records, drawn uniformly without replacement.
pub fn subsample_indices(manifest: &Manifest, filter: &LabelFilter, limit: usize, seed: u64) -> Vec<usize> {
    let matching: Vec<usize> = (0..manifest.len()).filter(|&i| filter.matches(&manifest.records[i])).collect();
    let mut rng = seeds::rng(seed);
    let mut picked: Vec<usize> = matching.choose_multiple(&mut rng, limit.min(matching.len())).copied().collect();
    picked.sort_unstable();
    picked
}

pub fn subsample<'a>(manifest: &'a Manifest, filter: &LabelFilter, limit: usize, seed: u64) -> Vec<&'a SampleRecord> {
    subsample_indices(manifest, filter, limit, seed).into_iter().map(|i| &manifest.records[i]).collect()
}
