//! Droop-controlled DER microgrid simulator with distributed secondary
//! control, an adversarial cyber layer and delay-aware semantic sampling.

pub mod channel;
pub mod cli;
pub mod error;
pub mod graph;
pub mod plant;
pub mod secondary;
pub mod semantic;
pub mod trace;
pub mod wire;
pub mod scenario;
pub mod sim;
pub mod metrics;
