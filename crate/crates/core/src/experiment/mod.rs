//! Config-driven experiments with file artifacts: single runs, sweeps and
//! the state self-check.

pub mod config;
pub mod run;
pub mod svg;
pub mod sweep;
pub mod trace_csv;
pub mod verify;

pub use config::{EtaSetting, ExperimentConfig, ExperimentKind};
pub use run::{
    execute, exit_code_for, run_experiment, Check, ExperimentResult, RunOutcome, EXIT_CONFIG, EXIT_DIVERGENCE,
    EXIT_PASS, EXIT_PROPERTY_FAILURE,
};
pub use sweep::{sweep, SweepRow};
pub use verify::{verify, verify_pretrained, VerifyReport};
