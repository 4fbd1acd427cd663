//! Experiment orchestration: config, sweeps over (k, r, ε), baselines and CSV output.

mod config;
mod sweep;

pub use config::{
    BoundsSection, DataSection, DomainEntry, ExperimentConfig, GridPoint, ModelSection, OutputSection, Pairing,
    PairsSection, ScmSection, SweepAxis, SweepSection, CONFIG_VERSION,
};
pub use sweep::{
    read_rows, run_baselines, run_sweep, summarize, write_outputs, write_rows, write_summary, HarnessRow, PointOutcome,
    RunContext, SummaryRow, SweepResult, HARNESS_COLUMNS,
};
