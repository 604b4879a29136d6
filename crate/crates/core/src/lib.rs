//! Solvers for state-constrained stochastic control of pumped hydroelectric storage.

// `!(v > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod config;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod io;
pub mod levelset;
pub mod pipeline;
pub mod price;
pub mod sim;
pub mod system;
pub mod viability;

pub use config::{parse_config, RunConfig};
pub use error::{Error, Result};
pub use grid::{Axis, GridSpec, ValueField};
pub use hjb::{solve_constrained_hjb, FeedbackPolicy, HjbSetup, NO_CONTROL};
pub use levelset::{
    solve_levelset, AugmentedGrid, LevelSetDiagnostics, LevelSetSetup, LevelSetSolution,
    ReconstructionResult,
};
pub use pipeline::{run_pipeline, Check, PipelineOptions, PipelineReport, Stage};
pub use price::{path_rng, PriceModel};
pub use sim::{
    compare_values, simulate_policy, PathPoint, PolicySource, SimConfig, SimReport, Tolerances,
    Verdict,
};
pub use system::{ControlGrid, ControlPoint, H3Report, HydroSystem, Inflow};
pub use viability::{analyze as analyze_viability, ViabilityResult};
