//! Experiment harness behind the `dpaudit` binary: configuration resolution,
//! seeded runs and sweeps, fault demos, the toy memorization study, and
//! CSV/SVG reporting. Everything numerical lives in `dpaudit-core`; this crate
//! only wires datasets, trainers and estimators together and formats results.

pub mod chart;
pub mod config;
pub mod engine;
pub mod results;
pub mod toy;
