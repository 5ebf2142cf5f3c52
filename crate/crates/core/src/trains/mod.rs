//! Symbolic trains: sampling under concept constraints, rasterisation, and
//! the on-disk dataset (JSON-lines manifest plus PGM images).
//!
//! Ground truth always comes from the symbolic [`TrainSpec`]; pixels are
//! derived from it and never inspected for labels.

mod dataset;
mod render;

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{ConceptDag, OntologyError};
use crate::seeds;

pub use dataset::{
    generate_dataset, subsample, subsample_indices, DatasetConfig, ImageSet, LabelFilter, Manifest, SampleRecord, MANIFEST_FILE,
};
pub use render::{layout, render, GlyphBox, GrayImage, MIN_HEIGHT, SLOT_WIDTH};

/// Rejection budget for constrained generation.
pub const REJECTION_BUDGET: usize = 100_000;
pub const MAX_CARS: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no train satisfying {0} found within {REJECTION_BUDGET} draws")]
    Unsatisfiable(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid train: {0}")]
    InvalidTrain(String),
    #[error("balance {0} cannot be met")]
    Balance(f64),
    #[error("label audit failed for sample {id}: {concept}")]
    Audit { id: String, concept: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WagonKind {
    Passenger,
    FreightLoaded,
    Empty,
    ReinforcedPassengerless,
    Locomotive,
}

impl WagonKind {
    pub const CARS: [WagonKind; 4] = [WagonKind::Passenger, WagonKind::FreightLoaded, WagonKind::Empty, WagonKind::ReinforcedPassengerless];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WagonSpec {
    pub kind: WagonKind,
    pub long: bool,
    pub open_roof: bool,
    pub reinforced: bool,
}

impl WagonSpec {
    pub fn locomotive() -> Self {
        Self { kind: WagonKind::Locomotive, long: false, open_roof: false, reinforced: false }
    }

    /// A car; `reinforced` follows from the kind (reinforced cars never carry passengers).
    pub fn car(kind: WagonKind, long: bool, open_roof: bool) -> Self {
        Self { kind, long, open_roof, reinforced: kind == WagonKind::ReinforcedPassengerless }
    }
}

/// A locomotive followed by one to four cars.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainSpec {
    pub wagons: Vec<WagonSpec>,
    pub seed: u64,
}

impl TrainSpec {
    /// Wagons after the locomotive.
    pub fn cars(&self) -> &[WagonSpec] {
        self.wagons.get(1..).unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.wagons.len();
        if !(2..=MAX_CARS + 1).contains(&n) {
            return Err(DataError::InvalidTrain(format!("{n} wagons (need 2..=5)")));
        }
        if self.wagons[0] != WagonSpec::locomotive() {
            return Err(DataError::InvalidTrain("first wagon must be a plain locomotive".into()));
        }
        for (i, w) in self.cars().iter().enumerate() {
            if w.kind == WagonKind::Locomotive {
                return Err(DataError::InvalidTrain(format!("second locomotive at position {}", i + 1)));
            }
            if w.reinforced != (w.kind == WagonKind::ReinforcedPassengerless) {
                return Err(DataError::InvalidTrain(format!("reinforced flag inconsistent at position {}", i + 1)));
            }
        }
        Ok(())
    }
}

/// Unconstrained draw. Car count is uniform on 1..=4; `long` and `open_roof`
/// are independent of the kind.
pub fn sample_wagons<R: Rng>(rng: &mut R) -> Vec<WagonSpec> {
    let cars = rng.gen_range(1..=MAX_CARS);
    let mut wagons = Vec::with_capacity(cars + 1);
    wagons.push(WagonSpec::locomotive());
    for _ in 0..cars {
        let u: f64 = rng.gen();
        let kind = match u {
            u if u < 0.30 => WagonKind::Passenger,
            u if u < 0.50 => WagonKind::FreightLoaded,
            u if u < 0.80 => WagonKind::Empty,
            _ => WagonKind::ReinforcedPassengerless,
        };
        let long = rng.gen_bool(0.3);
        let open_roof = rng.gen_bool(0.25);
        wagons.push(WagonSpec::car(kind, long, open_roof));
    }
    wagons
}

/// Draws a train satisfying every `(concept, value)` constraint by rejection.
pub fn generate_train(seed: u64, constraints: &[(String, bool)], dag: &ConceptDag) -> Result<TrainSpec, DataError> {
    let resolved: Vec<(usize, bool)> = constraints.iter().map(|(c, v)| dag.resolve(c).map(|i| (i, *v))).collect::<Result<_, _>>()?;
    let mut rng = seeds::rng(seed);
    for _ in 0..REJECTION_BUDGET {
        let train = TrainSpec { wagons: sample_wagons(&mut rng), seed };
        if resolved.is_empty() {
            return Ok(train);
        }
        let values = dag.evaluate_vec(&train);
        if resolved.iter().all(|&(i, v)| values[i] == v) {
            return Ok(train);
        }
    }
    let desc = constraints.iter().map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join(",");
    Err(DataError::Unsatisfiable(desc))
}

/// Fixed pool of unconstrained trains used as flip witnesses for relevance.
pub fn witness_pool() -> &'static [TrainSpec] {
    static POOL: OnceLock<Vec<TrainSpec>> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut rng = seeds::rng(0x7261_696E);
        (0..4000u64).map(|i| TrainSpec { wagons: sample_wagons(&mut rng), seed: i }).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(name: &str, v: bool) -> (String, bool) {
        (name.to_string(), v)
    }

    #[test]
    fn empty_train_constraint_yields_only_empty_cars() {
        let dag = ConceptDag::default_dag();
        for seed in 0..50 {
            let t = generate_train(seed, &[c("EmptyTrain", true)], dag).unwrap();
            t.validate().unwrap();
            assert!(t.cars().iter().all(|w| w.kind == WagonKind::Empty));
        }
    }

    #[test]
    fn type_a_without_empty_means_war_train() {
        let dag = ConceptDag::default_dag();
        for seed in 0..50 {
            let t = generate_train(seed, &[c("TypeA", true), c("EmptyTrain", false)], dag).unwrap();
            assert!(t.cars().iter().any(|w| w.reinforced));
            assert!(t.cars().iter().any(|w| w.kind == WagonKind::Passenger));
        }
    }

    #[test]
    fn contradictory_constraints_exhaust_budget() {
        let dag = ConceptDag::default_dag();
        let err = generate_train(1, &[c("EmptyTrain", true), c("∃has.PassengerCar", true)], dag).unwrap_err();
        assert!(matches!(err, DataError::Unsatisfiable(_)));
    }

    #[test]
    fn generation_is_deterministic() {
        let dag = ConceptDag::default_dag();
        let a = generate_train(99, &[c("TypeA", false)], dag).unwrap();
        let b = generate_train(99, &[c("TypeA", false)], dag).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_constraint_is_rejected() {
        let dag = ConceptDag::default_dag();
        assert!(matches!(generate_train(1, &[c("RuralTrain", true)], dag), Err(DataError::Ontology(_))));
    }

    #[test]
    fn witness_pool_covers_every_task_branch() {
        let dag = ConceptDag::default_dag();
        let pool = witness_pool();
        let count = |name: &str| pool.iter().filter(|t| dag.evaluate(t).get(name) == Some(true)).count();
        assert!(count("EmptyTrain") > 50);
        assert!(count("WarTrain") > 50);
        assert!(count("MixedTrain") > 50);
        assert!(pool.iter().all(|t| t.validate().is_ok()));
    }

    #[test]
    fn validate_rejects_bad_trains() {
        let mut t = TrainSpec { wagons: vec![WagonSpec::locomotive()], seed: 0 };
        assert!(t.validate().is_err());
        t.wagons.push(WagonSpec::locomotive());
        assert!(t.validate().is_err());
        t.wagons[1] = WagonSpec { reinforced: true, ..WagonSpec::car(WagonKind::Passenger, false, false) };
        assert!(t.validate().is_err());
    }
}
