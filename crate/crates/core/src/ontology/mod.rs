//! Grounded evaluator for the trains concept DAG.
//!
//! Leaves are wagon-level predicates computed from a [`TrainSpec`]; every
//! internal node carries a boolean formula over other nodes. Subsumption
//! axioms are closed into definitions, so evaluation is total. Interventions
//! force one node and re-evaluate only the nodes that depend on it.

mod formula;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trains::{TrainSpec, WagonKind, WagonSpec};
pub use formula::Formula;

pub const DEFAULT_DAG_JSON: &str = include_str!("default_dag.json");
pub const TYPE_A: &str = "TypeA";

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("unknown concept '{0}'")]
    UnknownConcept(String),
    #[error("unknown leaf predicate '{0}'")]
    UnknownPredicate(String),
    #[error("formula for '{node}': {msg}")]
    Formula { node: String, msg: String },
    #[error("concept graph has a cycle through '{0}'")]
    Cycle(String),
    #[error("duplicate concept '{0}'")]
    Duplicate(String),
    #[error("malformed concept graph document: {0}")]
    Document(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Built-in wagon-level predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predicate {
    HasPassengerCar,
    HasReinforcedCar,
    HasEmptyWagon,
    HasFreightWagon,
    HasLongWagon,
    HasOpenRoofCar,
    HasLongPassengerCar,
    OnlyEmptyOrLocomotive,
    AtLeastTwoPassengerCars,
    AtLeastTwoLongWagons,
    AtLeastThreeWagons,
    AtLeastTwoFreightWagons,
}

impl Predicate {
    pub const ALL: [Predicate; 12] = [
        Predicate::HasPassengerCar,
        Predicate::HasReinforcedCar,
        Predicate::HasEmptyWagon,
        Predicate::HasFreightWagon,
        Predicate::HasLongWagon,
        Predicate::HasOpenRoofCar,
        Predicate::HasLongPassengerCar,
        Predicate::OnlyEmptyOrLocomotive,
        Predicate::AtLeastTwoPassengerCars,
        Predicate::AtLeastTwoLongWagons,
        Predicate::AtLeastThreeWagons,
        Predicate::AtLeastTwoFreightWagons,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::HasPassengerCar => "∃has.PassengerCar",
            Predicate::HasReinforcedCar => "∃has.ReinforcedCar",
            Predicate::HasEmptyWagon => "∃has.EmptyWagon",
            Predicate::HasFreightWagon => "∃has.FreightWagon",
            Predicate::HasLongWagon => "∃has.LongWagon",
            Predicate::HasOpenRoofCar => "∃has.OpenRoofCar",
            Predicate::HasLongPassengerCar => "∃has.LongPassengerCar",
            Predicate::OnlyEmptyOrLocomotive => "∀has.EmptyOrLocomotive",
            Predicate::AtLeastTwoPassengerCars => "≥2has.PassengerCar",
            Predicate::AtLeastTwoLongWagons => "≥2has.LongWagon",
            Predicate::AtLeastThreeWagons => "≥3has.Wagon",
            Predicate::AtLeastTwoFreightWagons => "≥2has.FreightWagon",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let name = normalize_name(name);
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn eval(self, train: &TrainSpec) -> bool {
        let cars = train.cars();
        let count = |f: &dyn Fn(&WagonSpec) -> bool| cars.iter().filter(|w| f(w)).count();
        let is = |kind: WagonKind| move |w: &WagonSpec| w.kind == kind;
        match self {
            Predicate::HasPassengerCar => count(&is(WagonKind::Passenger)) >= 1,
            Predicate::HasReinforcedCar => count(&|w| w.reinforced) >= 1,
            Predicate::HasEmptyWagon => count(&is(WagonKind::Empty)) >= 1,
            Predicate::HasFreightWagon => count(&is(WagonKind::FreightLoaded)) >= 1,
            Predicate::HasLongWagon => count(&|w| w.long) >= 1,
            Predicate::HasOpenRoofCar => count(&|w| w.open_roof) >= 1,
            Predicate::HasLongPassengerCar => count(&|w| w.kind == WagonKind::Passenger && w.long) >= 1,
            Predicate::OnlyEmptyOrLocomotive => train.wagons.iter().all(|w| matches!(w.kind, WagonKind::Empty | WagonKind::Locomotive)),
            Predicate::AtLeastTwoPassengerCars => count(&is(WagonKind::Passenger)) >= 2,
            Predicate::AtLeastTwoLongWagons => count(&|w| w.long) >= 2,
            Predicate::AtLeastThreeWagons => cars.len() >= 3,
            Predicate::AtLeastTwoFreightWagons => count(&is(WagonKind::FreightLoaded)) >= 2,
        }
    }
}

/// Accepts ASCII spellings (`exists:`, `forall:`, `>=`) for the logic symbols.
pub fn normalize_name(name: &str) -> String {
    let name = name.trim();
    let name = if let Some(rest) = name.strip_prefix("exists:") {
        format!("∃{rest}")
    } else if let Some(rest) = name.strip_prefix("forall:") {
        format!("∀{rest}")
    } else {
        name.to_string()
    };
    name.replace(">=", "≥")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formula: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DagDoc {
    version: u32,
    #[serde(default = "default_task")]
    task: String,
    nodes: Vec<NodeDoc>,
}

fn default_task() -> String {
    TYPE_A.to_string()
}

#[derive(Debug, Clone)]
enum Definition {
    Leaf(Predicate),
    Formula(Formula),
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    def: Definition,
    source: Option<String>,
}

/// Concept graph with nodes stored in topological order.
#[derive(Debug, Clone)]
pub struct ConceptDag {
    version: u32,
    task: String,
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    /// Direct dependents of each node (nodes whose formula mentions it).
    dependents: Vec<Vec<usize>>,
}

/// How a node's value in an assignment was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Evaluated,
    Forced,
}

/// Truth value of every concept for one train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAssignment {
    pub values: BTreeMap<String, bool>,
    pub forced: BTreeSet<String>,
}

impl ConceptAssignment {
    pub fn get(&self, concept: &str) -> Option<bool> {
        self.values.get(concept).copied()
    }

    pub fn provenance(&self, concept: &str) -> Option<Provenance> {
        self.values.contains_key(concept).then(|| if self.forced.contains(concept) { Provenance::Forced } else { Provenance::Evaluated })
    }
}

impl ConceptDag {
    /// The embedded default graph.
    pub fn default_dag() -> &'static ConceptDag {
        static DAG: OnceLock<ConceptDag> = OnceLock::new();
        DAG.get_or_init(|| ConceptDag::from_json(DEFAULT_DAG_JSON).expect("embedded concept graph is valid"))
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, OntologyError> {
        let doc: DagDoc = serde_json::from_str(text).map_err(|e| OntologyError::Document(e.to_string()))?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: DagDoc) -> Result<Self, OntologyError> {
        let mut names = HashMap::new();
        for (i, n) in doc.nodes.iter().enumerate() {
            if names.insert(n.name.clone(), i).is_some() {
                return Err(OntologyError::Duplicate(n.name.clone()));
            }
        }
        let mut parsed: Vec<(String, Definition, Option<String>)> = Vec::with_capacity(doc.nodes.len());
        for n in &doc.nodes {
            let def = match (&n.predicate, &n.formula) {
                (Some(p), None) => Definition::Leaf(Predicate::from_name(p).ok_or_else(|| OntologyError::UnknownPredicate(p.clone()))?),
                (None, Some(f)) => Definition::Formula(
                    Formula::parse(f, &|name| names.get(name).copied())
                        .map_err(|msg| OntologyError::Formula { node: n.name.clone(), msg })?,
                ),
                _ => return Err(OntologyError::Document(format!("node '{}' needs exactly one of predicate or formula", n.name))),
            };
            parsed.push((n.name.clone(), def, n.formula.clone()));
        }

        // Topological order (Kahn), stable with respect to document order.
        let count = parsed.len();
        let deps: Vec<Vec<usize>> = parsed
            .iter()
            .map(|(_, d, _)| match d {
                Definition::Leaf(_) => Vec::new(),
                Definition::Formula(f) => f.references(),
            })
            .collect();
        let mut placed = vec![false; count];
        let mut order = Vec::with_capacity(count);
        while order.len() < count {
            let next = (0..count).find(|&i| !placed[i] && deps[i].iter().all(|&d| placed[d]));
            match next {
                Some(i) => {
                    placed[i] = true;
                    order.push(i);
                }
                None => {
                    let stuck = (0..count).find(|&i| !placed[i]).unwrap();
                    return Err(OntologyError::Cycle(parsed[stuck].0.clone()));
                }
            }
        }
        let mut new_index = vec![0; count];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let mut slots: Vec<Option<(String, Definition, Option<String>)>> = parsed.into_iter().map(Some).collect();
        let nodes: Vec<Node> = order
            .iter()
            .map(|&old| {
                let (name, def, source) = slots[old].take().unwrap();
                let def = match def {
                    Definition::Formula(f) => Definition::Formula(f.remap(&new_index)),
                    leaf => leaf,
                };
                Node { name, def, source }
            })
            .collect();
        let index: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
        let mut dependents = vec![Vec::new(); count];
        for (i, n) in nodes.iter().enumerate() {
            if let Definition::Formula(f) = &n.def {
                for r in f.references() {
                    dependents[r].push(i);
                }
            }
        }
        if !index.contains_key(&doc.task) {
            return Err(OntologyError::UnknownConcept(doc.task));
        }
        Ok(Self { version: doc.version, task: doc.task, nodes, index, dependents })
    }

    pub fn to_json(&self) -> String {
        let doc = DagDoc {
            version: self.version,
            task: self.task.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| match &n.def {
                    Definition::Leaf(p) => NodeDoc { name: n.name.clone(), predicate: Some(p.name().into()), formula: None },
                    Definition::Formula(_) => NodeDoc { name: n.name.clone(), predicate: None, formula: n.source.clone() },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("document serialises")
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// The task concept the classifier is trained on.
    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Concept names in topological order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    pub fn name(&self, index: usize) -> &str {
        &self.nodes[index].name
    }

    pub fn is_leaf(&self, index: usize) -> bool {
        matches!(self.nodes[index].def, Definition::Leaf(_))
    }

    /// Resolves a concept name (ASCII aliases allowed) to its node index.
    pub fn resolve(&self, name: &str) -> Result<usize, OntologyError> {
        self.index
            .get(name)
            .or_else(|| self.index.get(&normalize_name(name)))
            .copied()
            .ok_or_else(|| OntologyError::UnknownConcept(name.to_string()))
    }

    /// Canonical spelling of a concept name.
    pub fn canonical(&self, name: &str) -> Result<&str, OntologyError> {
        self.resolve(name).map(|i| self.name(i))
    }

    fn eval_node(&self, i: usize, train: &TrainSpec, values: &[bool]) -> bool {
        match &self.nodes[i].def {
            Definition::Leaf(p) => p.eval(train),
            Definition::Formula(f) => f.eval(values),
        }
    }

    /// Node values indexed like [`ConceptDag::names`].
    pub fn evaluate_vec(&self, train: &TrainSpec) -> Vec<bool> {
        let mut values = vec![false; self.nodes.len()];
        for i in 0..self.nodes.len() {
            values[i] = self.eval_node(i, train, &values);
        }
        values
    }

    /// Every node reachable from `node` through dependent edges (excluding `node`).
    pub fn strict_ancestors(&self, node: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = self.dependents[node].clone();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.dependents[n].iter().copied());
            }
        }
        seen
    }

    /// Every node `node`'s definition depends on, transitively, plus `node` itself.
    pub fn definitional_closure(&self, node: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                if let Definition::Formula(f) = &self.nodes[n].def {
                    stack.extend(f.references());
                }
            }
        }
        seen
    }

    /// Forces `node` to `value` and re-evaluates its strict ancestors bottom-up.
    pub fn intervene_vec(&self, train: &TrainSpec, node: usize, value: bool) -> Vec<bool> {
        let mut values = self.evaluate_vec(train);
        values[node] = value;
        let ancestors = self.strict_ancestors(node);
        // Indices are topological, so ascending order is bottom-up.
        for &a in &ancestors {
            values[a] = self.eval_node(a, train, &values);
        }
        values
    }

    fn to_assignment(&self, values: Vec<bool>, forced: Option<usize>) -> ConceptAssignment {
        ConceptAssignment {
            values: self.nodes.iter().zip(values).map(|(n, v)| (n.name.clone(), v)).collect(),
            forced: forced.into_iter().map(|i| self.nodes[i].name.clone()).collect(),
        }
    }

    pub fn evaluate(&self, train: &TrainSpec) -> ConceptAssignment {
        self.to_assignment(self.evaluate_vec(train), None)
    }

    pub fn intervene(&self, train: &TrainSpec, concept: &str, value: bool) -> Result<ConceptAssignment, OntologyError> {
        let node = self.resolve(concept)?;
        Ok(self.to_assignment(self.intervene_vec(train, node, value), Some(node)))
    }

    /// Concepts whose forced flip can change `target` for some train: the
    /// definitional closure of `target`, filtered by a flip witness found among
    /// `witnesses`. `target` itself is always included.
    pub fn relevant_concepts_with(&self, target: &str, witnesses: &[TrainSpec]) -> Result<BTreeSet<String>, OntologyError> {
        let t = self.resolve(target)?;
        let baselines: Vec<Vec<bool>> = witnesses.iter().map(|w| self.evaluate_vec(w)).collect();
        let mut out = BTreeSet::new();
        for c in self.definitional_closure(t) {
            let witnessed = c == t
                || witnesses
                    .iter()
                    .zip(&baselines)
                    .any(|(train, base)| [true, false].into_iter().any(|v| self.intervene_vec(train, c, v)[t] != base[t]));
            if witnessed {
                out.insert(self.nodes[c].name.clone());
            }
        }
        Ok(out)
    }

    /// [`ConceptDag::relevant_concepts_with`] over a fixed pool of generated trains.
    pub fn relevant_concepts(&self, target: &str) -> Result<BTreeSet<String>, OntologyError> {
        self.relevant_concepts_with(target, crate::trains::witness_pool())
    }
}
