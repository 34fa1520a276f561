//! Polyhedral tools: a dense simplex solver, extreme-ray enumeration for
//! recourse cones, and Farkas-type feasibility tests built on them.

pub mod farkas;
pub mod lp;
pub mod matrix;
pub mod rays;

use thiserror::Error;

pub use farkas::{farkas_feasible, second_stage_value};
pub use lp::{lp_solve, LpProblem, LpResult, LpStatus, RowSense};
pub use matrix::Matrix;
pub use rays::{enumerate_rays, ConeGenerators};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("simplex iteration cap hit after {0} pivots (cycling guard)")]
    CyclingGuard(usize),
    #[error("numerically degenerate input: {0}")]
    Degenerate(String),
    #[error("second-stage problem is unbounded below")]
    UnboundedSecondStage,
}
