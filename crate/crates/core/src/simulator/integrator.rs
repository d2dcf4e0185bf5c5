//! Adaptive L-stable singly diagonally implicit Runge-Kutta integrator of
//! order 4 with an embedded order-3 error estimate (Hairer-Wanner SDIRK4).

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A stiff ODE `y' = f(t, y)` with optional quadratures `q' = g(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;

    fn jacobian(&self, t: f64, y: &[f64]) -> Result<DMatrix<f64>>;

    fn num_quadratures(&self) -> usize {
        0
    }

    fn quadrature(&self, _t: f64, _y: &[f64], _q: &mut [f64]) -> Result<()> {
        Ok(())
    }
}

const GAMMA: f64 = 0.25;
const STAGES: usize = 5;
const C: [f64; STAGES] = [0.25, 0.75, 11.0 / 20.0, 0.5, 1.0];
const A: [[f64; STAGES]; STAGES] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.25, 0.0, 0.0, 0.0],
    [17.0 / 50.0, -1.0 / 25.0, 0.25, 0.0, 0.0],
    [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25, 0.0],
    [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
];
const B: [f64; STAGES] = A[4];
const B_HAT: [f64; STAGES] = [59.0 / 48.0, -17.0 / 96.0, 225.0 / 32.0, -85.0 / 12.0, 0.0];

#[derive(Debug, Clone)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: Option<f64>,
    pub max_step: f64,
    /// Steps below this fraction of the integration span count as a collapse.
    pub min_step_fraction: f64,
    pub max_steps: usize,
    /// Record every accepted step in addition to the output times.
    pub record_steps: bool,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-9,
            initial_step: None,
            max_step: f64::INFINITY,
            min_step_fraction: 1e-12,
            max_steps: 1_000_000,
            record_steps: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_failures: usize,
    pub rhs_evaluations: usize,
    pub jacobian_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Accumulated quadratures at each recorded time.
    pub quadratures: Vec<Vec<f64>>,
    pub stats: IntegratorStats,
}

pub struct Sdirk4 {
    pub options: IntegratorOptions,
}

enum StepFailure {
    Newton(Option<Error>),
    Fatal(Error),
}

fn is_recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::DensityNonPositive { .. } | Error::ZeroDensity { .. } | Error::NonPositiveOutletDensity { .. }
    )
}

impl Sdirk4 {
    pub fn new(options: IntegratorOptions) -> Self {
        Self { options }
    }

    fn weights(&self, y0: &[f64], y1: &[f64]) -> Vec<f64> {
        y0.iter()
            .zip(y1)
            .map(|(a, b)| 1.0 / (self.options.atol + self.options.rtol * a.abs().max(b.abs())))
            .collect()
    }

    fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
        (v.map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt()
    }

    /// Integrates from `t0` to the last entry of `outputs`, stopping exactly
    /// at every time in `outputs` (recorded) and `stops` (not recorded).
    pub fn integrate<S: OdeSystem>(
        &self,
        sys: &S,
        t0: f64,
        y0: &[f64],
        outputs: &[f64],
        stops: &[f64],
    ) -> Result<Solution> {
        let n = sys.dim();
        let nq = sys.num_quadratures();
        let t_end = *outputs
            .last()
            .ok_or_else(|| Error::InvalidInput("no output times".into()))?;
        if !(t_end > t0) || outputs.windows(2).any(|w| !(w[1] > w[0])) || outputs[0] < t0 {
            return Err(Error::InvalidInput("output times must increase from t0".into()));
        }
        let span = t_end - t0;
        let h_min = self.options.min_step_fraction * span;

        let mut all_stops: Vec<(f64, bool)> = outputs.iter().map(|&t| (t, true)).collect();
        all_stops.extend(stops.iter().filter(|&&t| t > t0 && t < t_end).map(|&t| (t, false)));
        all_stops.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        all_stops.dedup_by(|b, a| {
            if (b.0 - a.0).abs() <= 1e-12 * span {
                a.1 |= b.1;
                true
            } else {
                false
            }
        });

        let mut stats = IntegratorStats::default();
        let mut sol = Solution {
            times: Vec::new(),
            states: Vec::new(),
            quadratures: Vec::new(),
            stats: IntegratorStats::default(),
        };
        let mut t = t0;
        let mut y = y0.to_vec();
        let mut q = vec![0.0; nq];
        if all_stops[0].0 == t0 && all_stops[0].1 {
            sol.times.push(t0);
            sol.states.push(y.clone());
            sol.quadratures.push(q.clone());
        }

        let mut f0 = vec![0.0; n];
        sys.rhs(t, &y, &mut f0)?;
        stats.rhs_evaluations += 1;
        let mut h = match self.options.initial_step {
            Some(h) => h,
            None => {
                let w = self.weights(&y, &y);
                let d0 = Self::rms(y.iter().zip(&w).map(|(a, b)| a * b), n);
                let d1 = Self::rms(f0.iter().zip(&w).map(|(a, b)| a * b), n);
                if d0 < 1e-5 || d1 < 1e-5 {
                    1e-6 * span
                } else {
                    0.01 * d0 / d1
                }
            }
        }
        .min(self.options.max_step)
        .min(span);

        let mut stop_idx = all_stops.iter().position(|s| s.0 > t0).unwrap_or(all_stops.len());
        let mut last_failure: Option<Error> = None;
        let mut steps = 0usize;
        while stop_idx < all_stops.len() {
            steps += 1;
            if steps > self.options.max_steps {
                return Err(Error::StepSizeCollapse { time: t, step: h });
            }
            let (target, record) = all_stops[stop_idx];
            let remaining = target - t;
            let hits = h >= remaining * (1.0 - 1e-10);
            let h_try = if hits { remaining } else { h.min(remaining) };
            if h_try < h_min {
                return Err(match last_failure.take() {
                    Some(e @ Error::DensityNonPositive { .. }) => e,
                    _ => Error::StepSizeCollapse { time: t, step: h_try },
                });
            }

            match self.step(sys, t, &y, h_try, &mut stats) {
                Ok((y_new, err, dq)) => {
                    if err <= 1.0 {
                        stats.accepted += 1;
                        last_failure = None;
                        t = if hits { target } else { t + h_try };
                        y = y_new;
                        q.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
                        if hits {
                            stop_idx += 1;
                        }
                        if (hits && record) || self.options.record_steps {
                            sol.times.push(t);
                            sol.states.push(y.clone());
                            sol.quadratures.push(q.clone());
                        }
                        let fac = (0.9 * err.max(1e-10).powf(-0.25)).clamp(0.2, 5.0);
                        // keep the natural step length after a truncated stop step
                        let base = if hits { h.max(h_try) } else { h_try };
                        h = (base * fac).min(self.options.max_step);
                    } else {
                        stats.rejected += 1;
                        let fac = (0.9 * err.powf(-0.25)).clamp(0.1, 0.9);
                        h = h_try * fac;
                    }
                }
                Err(StepFailure::Newton(e)) => {
                    stats.newton_failures += 1;
                    if let Some(e) = e {
                        last_failure = Some(e);
                    }
                    h = h_try * 0.25;
                }
                Err(StepFailure::Fatal(e)) => return Err(e),
            }
        }
        debug!(
            "integration finished: {} accepted, {} rejected, {} Newton failures",
            stats.accepted, stats.rejected, stats.newton_failures
        );
        sol.stats = stats;
        Ok(sol)
    }

    /// One SDIRK step; returns the new state, the scaled error norm and the
    /// quadrature increment.
    fn step<S: OdeSystem>(
        &self,
        sys: &S,
        t: f64,
        y: &[f64],
        h: f64,
        stats: &mut IntegratorStats,
    ) -> std::result::Result<(Vec<f64>, f64, Vec<f64>), StepFailure> {
        let n = sys.dim();
        let nq = sys.num_quadratures();
        let classify = |e: Error| {
            if is_recoverable(&e) {
                StepFailure::Newton(Some(e))
            } else {
                StepFailure::Fatal(e)
            }
        };
        let jac = sys.jacobian(t, y).map_err(classify)?;
        stats.jacobian_evaluations += 1;
        let mut iter_matrix = -jac * (h * GAMMA);
        for i in 0..n {
            iter_matrix[(i, i)] += 1.0;
        }
        let lu = iter_matrix.lu();
        if !lu.is_invertible() {
            return Err(StepFailure::Newton(None));
        }
        let w = self.weights(y, y);
        let newton_tol = 1e-3;

        let mut k: Vec<Vec<f64>> = Vec::with_capacity(STAGES);
        let mut stage_values: Vec<Vec<f64>> = Vec::with_capacity(STAGES);
        let mut fy = vec![0.0; n];
        for i in 0..STAGES {
            let ti = t + C[i] * h;
            // explicit part
            let mut base = y.to_vec();
            for (j, kj) in k.iter().enumerate() {
                let a = h * A[i][j];
                base.iter_mut().zip(kj).for_each(|(b, v)| *b += a * v);
            }
            // predictor: previous stage derivative
            let mut yi = base.clone();
            if let Some(prev) = k.last() {
                yi.iter_mut().zip(prev).for_each(|(b, v)| *b += h * GAMMA * v);
            }
            let mut converged = false;
            let mut prev_norm = f64::INFINITY;
            for _ in 0..10 {
                sys.rhs(ti, &yi, &mut fy).map_err(classify)?;
                stats.rhs_evaluations += 1;
                let resid = DVector::from_iterator(n, (0..n).map(|r| base[r] + h * GAMMA * fy[r] - yi[r]));
                let delta = lu.solve(&resid).ok_or(StepFailure::Newton(None))?;
                let norm = Self::rms(delta.iter().zip(&w).map(|(a, b)| a * b), n);
                yi.iter_mut().zip(delta.iter()).for_each(|(a, b)| *a += b);
                if !norm.is_finite() {
                    return Err(StepFailure::Newton(None));
                }
                let rate = norm / prev_norm;
                if norm <= newton_tol
                    || (prev_norm.is_finite() && rate < 1.0 && rate / (1.0 - rate) * norm <= newton_tol)
                {
                    converged = true;
                    break;
                }
                if rate >= 2.0 {
                    break;
                }
                prev_norm = norm;
            }
            if !converged {
                return Err(StepFailure::Newton(None));
            }
            let ki: Vec<f64> = yi.iter().zip(&base).map(|(a, b)| (a - b) / (h * GAMMA)).collect();
            k.push(ki);
            stage_values.push(yi);
        }
        let y_new = stage_values[STAGES - 1].clone();
        // stage derivative must be evaluable at the new state
        sys.rhs(t + h, &y_new, &mut fy).map_err(classify)?;
        stats.rhs_evaluations += 1;

        let err_raw = DVector::from_iterator(
            n,
            (0..n).map(|r| h * (0..STAGES).map(|i| (B[i] - B_HAT[i]) * k[i][r]).sum::<f64>()),
        );
        let err_vec = lu.solve(&err_raw).unwrap_or(err_raw);
        let w = self.weights(y, &y_new);
        let err = Self::rms(err_vec.iter().zip(&w).map(|(a, b)| a * b), n);

        let mut dq = vec![0.0; nq];
        if nq > 0 {
            let mut g = vec![0.0; nq];
            for (i, yi) in stage_values.iter().enumerate() {
                sys.quadrature(t + C[i] * h, yi, &mut g).map_err(classify)?;
                dq.iter_mut().zip(&g).for_each(|(a, b)| *a += h * B[i] * b);
            }
        }
        Ok((y_new, err, dq))
    }
}
