//! Feasibility analysis for sample average approximation (SAA).

pub mod bounds;
pub mod chain;
pub mod experiments;
pub mod kelley;
pub mod multistage;
pub mod polyhedral;
pub mod rng;
pub mod saa;
pub mod stats;
