pub mod cells;
pub mod container;
pub mod harness;
pub mod injection;
pub mod nn;
pub mod ontology;
pub mod probes;
pub mod seeds;
pub mod trains;
