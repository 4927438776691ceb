//! Pipeline orchestration for the meta-curriculum adaptation experiments:
//! run-directory management, staged execution, and the synthetic-domain
//! protocol. The binary is a thin wrapper over this library so integration
//! tests can drive whole runs in-process.

pub mod config;
pub mod rundir;
pub mod stages;

pub use config::{Overrides, RunConfig};
pub use rundir::RunDir;
pub use stages::{run_all, run_stage, Outcome, Stage};
