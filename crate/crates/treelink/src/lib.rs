//! Joint coreference resolution and entity linking as structured prediction
//! over directed spanning trees.
//!
//! The crate provides two models over a shared scoring stack:
//!
//! * a **local** antecedent-ranking model, where every span picks one earlier
//!   span, one candidate entity, or a dummy option, and
//! * a **global** spanning-tree model over a graph of a virtual root, entity
//!   nodes and mention nodes, trained with a Matrix-Tree-Theorem partition
//!   function and decoded with Chu-Liu/Edmonds maximum arborescences.
//!
//! Supporting modules cover the corpus/alias-table data model and file
//! formats ([`corpus`]), a synthetic corpus generator ([`synth`]), the full
//! coreference and linking metric suite ([`metrics`]), brute-force oracles
//! for desk-scale verification ([`oracle`] and [`verify`]), and the training
//! and evaluation loops ([`run`]).

pub mod corpus;
pub mod decode;
pub mod global;
pub mod graph;
pub mod local;
pub mod metrics;
pub mod oracle;
pub mod run;
pub mod scorer;
pub mod synth;
pub mod verify;
