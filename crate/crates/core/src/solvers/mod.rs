//! Numerical back ends: a semidefinite solver, an interior-point LP solver,
//! and a simplex reference implementation.

pub mod lp;
pub mod sdp;
pub mod simplex;

pub use lp::{solve_lp, LpError, LpProblem, LpSolution};
pub use sdp::{
    solve_sdp, solve_sdp_with, BlockEntry, LinearFunctional, SdpEquality, SdpError, SdpProblem, SdpSettings,
    SdpSolution, SdpStatus,
};
pub use simplex::simplex;
