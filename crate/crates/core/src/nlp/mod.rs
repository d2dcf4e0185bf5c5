//! Generic primal-dual interior-point solver for smooth sparse nonlinear
//! programs
//!
//! ```text
//! min f(x)  s.t.  c(x) = 0,  d_L ≤ d(x) ≤ d_U,  x_L ≤ x ≤ x_U
//! ```

mod ipm;
pub mod ldl;

use std::time::Duration;

pub use ipm::solve;

use crate::error::Result;

/// A smooth nonlinear program with sparse first derivatives.
pub trait Nlp {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;

    /// Variable bounds; infinite entries mean unbounded.
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn ineq_bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn objective(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<()>;
    fn eq_constraints(&self, x: &[f64], c: &mut [f64]) -> Result<()>;
    fn ineq_constraints(&self, x: &[f64], d: &mut [f64]) -> Result<()>;

    /// Jacobian pattern of the stacked constraints, equality rows first.
    fn jacobian_structure(&self) -> Vec<(usize, usize)>;
    fn jacobian_values(&self, x: &[f64], values: &mut [f64]) -> Result<()>;

    /// Pattern of the lower triangle (`row ≥ col`) of the Lagrangian Hessian.
    /// `None` means dense.
    fn hessian_structure(&self) -> Option<Vec<(usize, usize)>> {
        None
    }

    /// Problem-supplied Gauss-Newton curvature on `hessian_structure`, given
    /// the stacked constraint multipliers.
    fn gauss_newton(&self, _x: &[f64], _multipliers: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curvature {
    /// Coloured finite differences of the Lagrangian gradient on the
    /// problem's Hessian pattern.
    FiniteDifference,
    /// Damped BFGS update of a dense Lagrangian Hessian approximation.
    QuasiNewton,
    /// Problem-supplied Gauss-Newton term, quasi-Newton when absent.
    GaussNewton,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Scaled KKT residual target.
    pub tol_kkt: f64,
    /// Constraint violation target.
    pub tol_feas: f64,
    pub max_iter: usize,
    pub curvature: Curvature,
    /// Smallest primal regularization tried when correcting inertia.
    pub regularization_floor: f64,
    pub mu_init: f64,
    pub bound_push: f64,
    /// One log line per iteration on standard error.
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            tol_feas: 1e-8,
            max_iter: 500,
            curvature: Curvature::FiniteDifference,
            regularization_floor: 1e-12,
            mu_init: 0.1,
            bound_push: 1e-2,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationCap,
    Infeasible,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::IterationCap => "iteration-cap",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NumericalFailure => "numerical-failure",
        })
    }
}

#[derive(Debug, Clone)]
pub struct NlpResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Equality multipliers.
    pub y_eq: Vec<f64>,
    /// Inequality-row multipliers.
    pub y_ineq: Vec<f64>,
    /// Lower and upper variable-bound multipliers.
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    /// Inequality slacks.
    pub slacks: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub wall_time: Duration,
}
