//! Communication-avoiding QR over a simulated message-passing fabric, with
//! fail-stop fault injection and single-source recovery.

pub mod caqr;
mod comm;
pub mod error;
pub mod fabric;
pub mod gen;
pub mod kernels;
pub mod matrix;
pub mod qhistory;
pub mod report;
pub mod sweep;
pub mod trailing;
pub mod tsqr;
pub mod verify;

pub use caqr::{factor, reconstruct_q, Distribution, FactorConfig, Factorization, Mode};
pub use comm::Side;
pub use error::{Error, Result};
pub use fabric::{FaultPlan, KillEvent, Phase, Point, Trace, TraceEvent, TraceKind};
pub use matrix::Matrix;
pub use report::RunReport;
pub use sweep::{sweep, Sweep};
pub use trailing::Variant;
pub use verify::{compare_runs, metrics, oracle_qr, sign_normalize, Metrics};
