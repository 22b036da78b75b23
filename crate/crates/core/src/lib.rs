//! Reach-avoid model predictive control for polynomial systems.

pub mod cli;
pub mod closed_loop;
pub mod config;
pub mod gbf;
pub mod mpc;
pub mod nlp;
pub mod poly;
pub mod rampc;
pub mod scenario;
pub mod solvers;
pub mod sos;
