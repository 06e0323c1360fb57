//! Scenario interpreter, snapshot persistence, invariant suite, audit
//! replay, reference model and the seeded command generator.

pub mod fuzz;
pub mod invariants;
pub mod reference;
pub mod replay;
pub mod runner;
pub mod script;
pub mod snapshot;

pub use invariants::{check_invariants, InvariantId, InvariantReport, Violation};
pub use runner::{run_scenario, RunFailure, RunOptions, RunReport, Runner};
pub use script::{parse_script, Command, ParseError};
