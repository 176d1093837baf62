//! Desk-scale benchmark harness: synthetic worlds, the day-by-day protocol,
//! alpha sweeps against a confidence-threshold baseline, and cost
//! projection.

pub mod cost;
pub mod protocol;
pub mod synthetic;

pub use cost::{cost_projection, CostProjection, PriceModel};
pub use protocol::{
    baseline_confidence_threshold, confidence_threshold, evaluate_state, run_alpha_sweep, run_alpha_sweep_detailed, run_protocol, BaselineModel,
    DayRecord, DetailedSweep, ProtocolError, ProtocolResult, SweepResult, SweepRow,
};
pub use synthetic::{class_name, generate_synthetic, SpecError, SyntheticSpec, SyntheticWorld};
