//! Scenario runner, workload generator, checkers and auditors.

pub mod audit;
pub mod checker;
pub mod exhaustive;
pub mod par;
pub mod runner;
pub mod scenario;
pub mod workload;
