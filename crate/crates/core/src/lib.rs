//! Optimal adaptive droop design for radial distribution grids.
//!
//! The pipeline models a radial feeder in squared-voltage branch-flow
//! coordinates ([`grid`]), checks a-priori feasibility conditions for the
//! restricted conic relaxation ([`conditions`]), compiles the relaxed and
//! restricted OPF variants plus the mixed-integer droop-design problem
//! ([`program`]), solves them ([`solver`]), and validates every design
//! against exact nonlinear power flow ([`powerflow`]). [`refine`] runs the
//! iterative solution-quality loop, [`droop`] holds the controller model,
//! and [`io`]/[`report`] carry the file surface used by the CLI.

pub mod conditions;
pub mod droop;
pub mod grid;
pub mod io;
mod par;
pub mod pipeline;
pub mod powerflow;
pub mod program;
pub mod refine;
pub mod report;
pub mod scenario;
pub mod solver;

pub use grid::{Bus, IbdgSpec, Line, RadialNetwork, TopologyMatrices};

