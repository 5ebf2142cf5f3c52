use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::injection::ConceptState;
use crate::ontology::{ConceptDag, OntologyError};
use crate::seeds;
use crate::trains::{Manifest, TrainSpec};

/// Counterfactual partition a sample falls into for one concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetKind {
    /// Not an instance of the task; forcing the concept present makes it one.
    S1,
    /// Not an instance of the task, and stays that way with the concept present.
    S2,
    /// Instance of the task; forcing the concept absent removes it.
    S3,
    /// Instance of the task regardless of the concept.
    S4,
}

impl SetKind {
    pub const ALL: [SetKind; 4] = [SetKind::S1, SetKind::S2, SetKind::S3, SetKind::S4];

    pub fn name(self) -> &'static str {
        match self {
            SetKind::S1 => "S1",
            SetKind::S2 => "S2",
            SetKind::S3 => "S3",
            SetKind::S4 => "S4",
        }
    }

    /// Which plan is injected into members.
    pub fn state(self) -> ConceptState {
        match self {
            SetKind::S1 | SetKind::S2 => ConceptState::Present,
            SetKind::S3 | SetKind::S4 => ConceptState::Absent,
        }
    }

    /// Model label expected after injection.
    pub fn expected(self) -> bool {
        matches!(self, SetKind::S1 | SetKind::S4)
    }

    /// The other set with the same task label.
    pub fn sibling(self) -> SetKind {
        match self {
            SetKind::S1 => SetKind::S2,
            SetKind::S2 => SetKind::S1,
            SetKind::S3 => SetKind::S4,
            SetKind::S4 => SetKind::S3,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set membership of one train for `concept` under `dag`'s task concept.
pub fn classify(dag: &ConceptDag, train: &TrainSpec, concept: usize) -> Result<SetKind, OntologyError> {
    let task = dag.resolve(dag.task())?;
    let base = dag.evaluate_vec(train);
    Ok(if !base[task] {
        if dag.intervene_vec(train, concept, true)[task] {
            SetKind::S1
        } else {
            SetKind::S2
        }
    } else if !dag.intervene_vec(train, concept, false)[task] {
        SetKind::S3
    } else {
        SetKind::S4
    })
}

/// Manifest row indices of S1 to S4, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualSets {
    pub concept: String,
    pub rows: [Vec<usize>; 4],
}

impl CounterfactualSets {
    pub fn get(&self, kind: SetKind) -> &[usize] {
        &self.rows[kind.index()]
    }

    pub fn sizes(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.rows[i].len())
    }
}

/// Rows of `candidates` grouped by set, unbounded and in candidate order.
pub fn partition(manifest: &Manifest, dag: &ConceptDag, concept: &str, candidates: &[usize]) -> Result<[Vec<usize>; 4], OntologyError> {
    let c = dag.resolve(concept)?;
    let mut out: [Vec<usize>; 4] = Default::default();
    for &row in candidates {
        out[classify(dag, &manifest.records[row].train, c)?.index()].push(row);
    }
    Ok(out)
}

/// S1 to S4 over `candidates`, each capped at `cap` by a seeded uniform draw.
pub fn build_sets(
    manifest: &Manifest,
    dag: &ConceptDag,
    concept: &str,
    candidates: &[usize],
    cap: usize,
    seed: u64,
) -> Result<CounterfactualSets, OntologyError> {
    let canonical = dag.canonical(concept)?.to_string();
    let groups = partition(manifest, dag, &canonical, candidates)?;
    let rows = SetKind::ALL.map(|kind| {
        let group = &groups[kind.index()];
        let mut rng = seeds::rng(seeds::derive_named(seed, &format!("set:{canonical}:{kind}")));
        let mut picked: Vec<usize> = group.choose_multiple(&mut rng, cap.min(group.len())).copied().collect();
        picked.sort_unstable();
        picked
    });
    Ok(CounterfactualSets { concept: canonical, rows })
}

/// Splits `total` cases evenly over the four sets; a set that runs short
/// passes its share to its sibling.
pub fn validation_quota(available: [usize; 4], total: usize) -> [usize; 4] {
    let base = total / 4;
    let mut quota = [base; 4];
    // Remainder goes to the lowest sets first.
    for q in quota.iter_mut().take(total % 4) {
        *q += 1;
    }
    let mut out = [0; 4];
    for (a, b) in [(0, 1), (2, 3)] {
        let pair = quota[a] + quota[b];
        out[a] = available[a].min(quota[a]);
        out[b] = available[b].min(pair - out[a]);
        out[a] = available[a].min(pair - out[b]);
    }
    out
}
