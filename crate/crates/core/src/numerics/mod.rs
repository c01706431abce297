//! Shared solver kernels: a primal-dual interior point method for small
//! smooth programs, damped fixed-point iteration, central differences and an
//! exhaustive grid oracle used to cross-check the solvers.

mod finite_diff;
mod fixed_point;
mod grid;
mod kkt;

pub use finite_diff::{finite_diff_derivative, finite_diff_gradient};
pub use fixed_point::{fixed_point_iterate, FixedPointResult};
pub use grid::{grid_oracle, GridBox, GridResult, Sense};
pub use kkt::{barrier_solve, kkt_solve, KktResiduals, KktSolution, SmoothProgram};

use serde::{Deserialize, Serialize};

/// Tolerances, damping and budgets shared by every solver in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Convergence tolerance on fixed-point and price updates.
    #[serde(rename = "tol")]
    pub tolerance: f64,
    /// Threshold on reported equilibrium residuals.
    pub residual_tol: f64,
    /// Termination tolerance of the interior point kernel.
    pub kkt_tol: f64,
    pub damping: f64,
    #[serde(rename = "max_iter")]
    pub max_iterations: usize,
    pub kkt_max_iter: usize,
    /// Points per axis for the grid oracle.
    #[serde(rename = "grid")]
    pub grid_resolution: usize,
    /// Relative step for finite-difference elasticities.
    pub fd_step: f64,
    /// Sample count for marginal-transfer curves.
    pub metc_points: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            residual_tol: 1e-6,
            kkt_tol: 1e-10,
            damping: 0.5,
            max_iterations: 10_000,
            kkt_max_iter: 500,
            grid_resolution: 200,
            fd_step: 1e-3,
            metc_points: 32,
        }
    }
}

impl SolverSettings {
    /// Returns a list of rule violations; empty when the settings are usable.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let positive = [
            ("solver.tol", self.tolerance),
            ("solver.residual_tol", self.residual_tol),
            ("solver.kkt_tol", self.kkt_tol),
            ("solver.fd_step", self.fd_step),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                out.push((field.to_string(), "must be positive".to_string()));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            out.push(("solver.damping".into(), "damping outside (0,1]".into()));
        }
        if self.max_iterations < 1 || self.kkt_max_iter < 1 {
            out.push(("solver.max_iter".into(), "iteration budget must be >= 1".into()));
        }
        if self.grid_resolution < 2 {
            out.push(("solver.grid".into(), "grid resolution must be >= 2".into()));
        }
        if self.metc_points < 2 {
            out.push(("solver.metc_points".into(), "need at least 2 curve samples".into()));
        }
        out
    }
}
