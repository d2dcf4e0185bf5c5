//! Direct transcription of the periodic optimal control problem into a
//! sparse nonlinear program on equally spaced collocation points.

use std::collections::BTreeSet;

use crate::dynamics::{BoundaryValues, Gas, MixtureModel, MixtureState, ScenarioConfig};
use crate::error::{Error, Result};
use crate::network::{ActuatorPosition, EdgeRatios, Network, RefinedNetwork, Tail};
use crate::nlp::Nlp;
use crate::simulator::{BoundaryProfiles, ControlProfiles, PeriodicProfile, Trajectory};

/// Periodic forward difference on `N` samples over a horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferentiationOperator {
    time_steps: usize,
    horizon: f64,
}

impl DifferentiationOperator {
    pub fn new(time_steps: usize, horizon: f64) -> Result<Self> {
        if time_steps < 2 {
            return Err(Error::TooFewTimeSteps(time_steps));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { time_steps, horizon })
    }

    /// `N / T`.
    pub fn rate(&self) -> f64 {
        self.time_steps as f64 / self.horizon
    }

    pub fn next(&self, n: usize) -> usize {
        (n + 1) % self.time_steps
    }

    /// `(x_{n+1} − x_n)·N/T` with the last sample wrapping to the first.
    pub fn apply(&self, samples: &[f64]) -> Vec<f64> {
        assert_eq!(samples.len(), self.time_steps);
        (0..self.time_steps)
            .map(|n| (samples[self.next(n)] - samples[n]) * self.rate())
            .collect()
    }
}

/// Position of an entry of the stacked decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableRole {
    Density {
        constituent: usize,
        node: usize,
        time: usize,
    },
    Flux {
        edge: usize,
        time: usize,
    },
    Ratio {
        actuator: usize,
        time: usize,
    },
}

/// Origin of a constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRole {
    Density {
        constituent: usize,
        node: usize,
        time: usize,
    },
    Momentum {
        edge: usize,
        time: usize,
    },
    Pressure {
        node: usize,
        time: usize,
    },
}

/// Stacked layout: per time `[ρ¹ (nw), ρ² (nw), φ (ne)]`, then all ratios
/// per time `[μ (na)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableLayout {
    pub time_steps: usize,
    pub num_withdrawal: usize,
    pub num_edges: usize,
    pub num_actuators: usize,
}

impl VariableLayout {
    fn block(&self) -> usize {
        2 * self.num_withdrawal + self.num_edges
    }

    pub fn num_vars(&self) -> usize {
        self.time_steps * (self.block() + self.num_actuators)
    }

    pub fn num_eq(&self) -> usize {
        self.time_steps * self.block()
    }

    pub fn num_ineq(&self) -> usize {
        self.time_steps * self.num_withdrawal
    }

    pub fn density(&self, m: usize, j: usize, n: usize) -> usize {
        n * self.block() + m * self.num_withdrawal + j
    }

    pub fn flux(&self, k: usize, n: usize) -> usize {
        n * self.block() + 2 * self.num_withdrawal + k
    }

    pub fn ratio(&self, a: usize, n: usize) -> usize {
        self.time_steps * self.block() + n * self.num_actuators + a
    }

    /// Equality rows share the state layout of the variables.
    pub fn density_row(&self, m: usize, j: usize, n: usize) -> usize {
        self.density(m, j, n)
    }

    pub fn momentum_row(&self, k: usize, n: usize) -> usize {
        self.flux(k, n)
    }

    pub fn pressure_row(&self, j: usize, n: usize) -> usize {
        self.num_eq() + n * self.num_withdrawal + j
    }

    pub fn variable_role(&self, index: usize) -> Option<VariableRole> {
        let nw = self.num_withdrawal;
        let states = self.time_steps * self.block();
        if index < states {
            let (time, r) = (index / self.block(), index % self.block());
            Some(if r < 2 * nw {
                VariableRole::Density {
                    constituent: r / nw,
                    node: r % nw,
                    time,
                }
            } else {
                VariableRole::Flux { edge: r - 2 * nw, time }
            })
        } else if index < self.num_vars() {
            let r = index - states;
            Some(VariableRole::Ratio {
                actuator: r % self.num_actuators,
                time: r / self.num_actuators,
            })
        } else {
            None
        }
    }

    pub fn constraint_role(&self, row: usize) -> Option<ConstraintRole> {
        let nw = self.num_withdrawal;
        if row < self.num_eq() {
            let (time, r) = (row / self.block(), row % self.block());
            Some(if r < 2 * nw {
                ConstraintRole::Density {
                    constituent: r / nw,
                    node: r % nw,
                    time,
                }
            } else {
                ConstraintRole::Momentum { edge: r - 2 * nw, time }
            })
        } else if row < self.num_eq() + self.num_ineq() {
            let r = row - self.num_eq();
            Some(ConstraintRole::Pressure {
                node: r % nw,
                time: r / nw,
            })
        } else {
            None
        }
    }
}

/// Problem dimensions as reported: pressure rows and ratio bounds are kept
/// separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemCounts {
    pub variables: usize,
    pub equalities: usize,
    /// Two-sided pressure rows.
    pub pressure_rows: usize,
    /// Ratio variables carrying finite bounds.
    pub ratio_bounds: usize,
}

/// Variable scaling of the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    /// Density unit, `p_max / σ₁²`.
    pub density: f64,
    /// Flux unit, the largest withdrawal.
    pub flux: f64,
    /// Pressure unit for momentum and pressure rows.
    pub pressure: f64,
}

/// The transcribed program. Evaluation is reentrant.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    model: MixtureModel,
    scenario: ScenarioConfig,
    layout: VariableLayout,
    diff: DifferentiationOperator,
    scaling: Scaling,
    samples: Vec<BoundaryValues>,
    hydrogen_free: bool,
    /// Actuator on each edge inlet and outlet, if any.
    inlet_actuator: Vec<Option<usize>>,
    outlet_actuator: Vec<Option<usize>>,
    exponent: f64,
    smoothing: f64,
    jac_pattern: Vec<(usize, usize)>,
    /// Emission index → pattern slot.
    jac_slots: Vec<usize>,
    hess_pattern: Vec<(usize, usize)>,
}

/// Per-time physical values.
struct Slice {
    rho: [Vec<f64>; 2],
    flux: Vec<f64>,
    ratios: EdgeRatios,
    eta: [Vec<f64>; 2],
}

/// Builds the program for `scenario` on a refined network. Boundary profiles
/// are sampled at the collocation times.
pub fn build_nlp(net: &RefinedNetwork, scenario: &ScenarioConfig, boundary: &BoundaryProfiles) -> Result<NlpProblem> {
    let model = MixtureModel::new(net, &scenario.gas);
    let topo = &model.topology;
    scenario.validate(topo)?;
    let diff = DifferentiationOperator::new(scenario.time_steps, scenario.horizon)?;
    boundary.validate(topo.num_supply, topo.num_withdrawal, scenario.horizon)?;
    let layout = VariableLayout {
        time_steps: scenario.time_steps,
        num_withdrawal: topo.num_withdrawal,
        num_edges: topo.num_edges(),
        num_actuators: topo.num_actuators(),
    };
    let mut inlet_actuator = vec![None; layout.num_edges];
    let mut outlet_actuator = vec![None; layout.num_edges];
    for (a, &(k, pos)) in topo.actuator_slots.iter().enumerate() {
        let slot = match pos {
            ActuatorPosition::Inlet => &mut inlet_actuator[k],
            ActuatorPosition::Outlet => &mut outlet_actuator[k],
        };
        if slot.is_some() {
            return Err(Error::InvalidNetwork(format!(
                "two actuators share the {pos:?} of refined edge index {k}"
            )));
        }
        *slot = Some(a);
    }
    let samples = collocation_times(&diff, scenario.time_steps)
        .iter()
        .map(|&t| boundary.at(t, &scenario.gas))
        .collect::<Result<Vec<_>>>()?;
    let hydrogen_free = samples.iter().all(|b| b.s2.iter().all(|&s| s == 0.0));
    let max_withdrawal = samples
        .iter()
        .flat_map(|b| b.w.iter())
        .fold(0.0f64, |a, w| a.max(w.abs()));
    let flux_scale = if max_withdrawal > 0.0 { max_withdrawal } else { 1.0 };
    let p_max = scenario.max_pressure();
    let scaling = Scaling {
        density: p_max / scenario.gas.sigma_sq()[0],
        flux: flux_scale,
        pressure: p_max,
    };
    let exponent = (scenario.isentropic_exponent - 1.0) / scenario.isentropic_exponent;
    let mut problem = NlpProblem {
        model,
        scenario: scenario.clone(),
        layout,
        diff,
        scaling,
        samples,
        hydrogen_free,
        inlet_actuator,
        outlet_actuator,
        exponent,
        smoothing: 1e-6 * flux_scale,
        jac_pattern: Vec::new(),
        jac_slots: Vec::new(),
        hess_pattern: Vec::new(),
    };
    problem.build_patterns()?;
    Ok(problem)
}

fn collocation_times(diff: &DifferentiationOperator, n: usize) -> Vec<f64> {
    (0..n).map(|i| diff.horizon * i as f64 / n as f64).collect()
}

impl NlpProblem {
    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn differentiation(&self) -> DifferentiationOperator {
        self.diff
    }

    /// Collocation times `t_n = n·T/N`.
    pub fn times(&self) -> Vec<f64> {
        collocation_times(&self.diff, self.layout.time_steps)
    }

    /// Boundary data sampled at each collocation time.
    pub fn boundary_samples(&self) -> &[BoundaryValues] {
        &self.samples
    }

    /// Whether the hydrogen densities are fixed at zero.
    pub fn hydrogen_free(&self) -> bool {
        self.hydrogen_free
    }

    pub fn counts(&self) -> ProblemCounts {
        ProblemCounts {
            variables: self.layout.num_vars(),
            equalities: self.layout.num_eq(),
            pressure_rows: self.layout.num_ineq(),
            ratio_bounds: self.layout.time_steps * self.layout.num_actuators,
        }
    }

    /// Scaled stacked vector from physical states and actuator values.
    pub fn pack(&self, states: &[MixtureState], ratios: &[Vec<f64>]) -> Result<Vec<f64>> {
        let l = &self.layout;
        if states.len() != l.time_steps || ratios.len() != l.time_steps {
            return Err(Error::InvalidInput(format!(
                "expected {} states and ratio vectors",
                l.time_steps
            )));
        }
        let mut x = vec![0.0; l.num_vars()];
        for (n, (s, u)) in states.iter().zip(ratios).enumerate() {
            if s.rho1.len() != l.num_withdrawal
                || s.rho2.len() != l.num_withdrawal
                || s.flux.len() != l.num_edges
                || u.len() != l.num_actuators
            {
                return Err(Error::InvalidInput(format!("state {n} does not match the layout")));
            }
            for j in 0..l.num_withdrawal {
                x[l.density(0, j, n)] = s.rho1[j] / self.scaling.density;
                x[l.density(1, j, n)] = s.rho2[j] / self.scaling.density;
            }
            for k in 0..l.num_edges {
                x[l.flux(k, n)] = s.flux[k] / self.scaling.flux;
            }
            for a in 0..l.num_actuators {
                x[l.ratio(a, n)] = u[a];
            }
        }
        Ok(x)
    }

    /// Physical states and actuator values per collocation time.
    pub fn unpack(&self, x: &[f64]) -> (Vec<MixtureState>, Vec<Vec<f64>>) {
        let l = &self.layout;
        let states = (0..l.time_steps)
            .map(|n| MixtureState {
                rho1: (0..l.num_withdrawal)
                    .map(|j| x[l.density(0, j, n)] * self.scaling.density)
                    .collect(),
                rho2: (0..l.num_withdrawal)
                    .map(|j| x[l.density(1, j, n)] * self.scaling.density)
                    .collect(),
                flux: (0..l.num_edges).map(|k| x[l.flux(k, n)] * self.scaling.flux).collect(),
            })
            .collect();
        let ratios = (0..l.time_steps)
            .map(|n| (0..l.num_actuators).map(|a| x[l.ratio(a, n)]).collect())
            .collect();
        (states, ratios)
    }

    /// Start from one state replicated over time, with ratios at their
    /// lower bounds.
    pub fn replicated_start(&self, state: &MixtureState) -> Result<Vec<f64>> {
        let n = self.layout.time_steps;
        let ratios: Vec<f64> = self.scenario.ratio_bounds.iter().map(|b| b.0).collect();
        self.pack(&vec![state.clone(); n], &vec![ratios; n])
    }

    /// Optimized trajectory on the collocation grid, closed at `t = T` by a
    /// copy of the first sample.
    pub fn trajectory(&self, x: &[f64], net: &Network) -> Result<Trajectory> {
        let (mut states, _) = self.unpack(x);
        let mut times = self.times();
        states.push(states[0].clone());
        times.push(self.diff.horizon);
        Trajectory::from_states(times, states, &self.scenario.gas, net)
    }

    fn slice(&self, x: &[f64], n: usize) -> Result<Slice> {
        let l = &self.layout;
        let rho = [0, 1].map(|m| {
            (0..l.num_withdrawal)
                .map(|j| x[l.density(m, j, n)] * self.scaling.density)
                .collect::<Vec<_>>()
        });
        let flux = (0..l.num_edges).map(|k| x[l.flux(k, n)] * self.scaling.flux).collect();
        let mut ratios = EdgeRatios::unit(l.num_edges);
        for k in 0..l.num_edges {
            if let Some(a) = self.inlet_actuator[k] {
                ratios.inlet[k] = x[l.ratio(a, n)];
            }
            if let Some(a) = self.outlet_actuator[k] {
                ratios.outlet[k] = x[l.ratio(a, n)];
            }
        }
        let mut eta = [vec![0.0; l.num_withdrawal], vec![0.0; l.num_withdrawal]];
        for j in 0..l.num_withdrawal {
            let total = rho[0][j] + rho[1][j];
            if !(total > 0.0) {
                return Err(Error::ZeroDensity { node: j });
            }
            eta[0][j] = rho[0][j] / total;
            eta[1][j] = rho[1][j] / total;
        }
        Ok(Slice { rho, flux, ratios, eta })
    }

    /// `∂η⁽ᵐ⁾/∂ρ⁽ᵐ'⁾` at withdrawal node `j`.
    fn deta(s: &Slice, j: usize, m: usize, mp: usize) -> f64 {
        let total = s.rho[0][j] + s.rho[1][j];
        if m == mp {
            (total - s.rho[m][j]) / (total * total)
        } else {
            -s.rho[m][j] / (total * total)
        }
    }

    /// Evaluates all constraint rows (equalities then pressure rows) into
    /// `rows` and emits every Jacobian entry as `(row, col, value, nonlinear)`
    /// in a fixed order independent of `x`.
    fn evaluate(&self, x: &[f64], rows: &mut [f64], sink: &mut dyn FnMut(usize, usize, f64, bool)) -> Result<()> {
        let l = &self.layout;
        let topo = &self.model.topology;
        let sig2 = self.scenario.gas.sigma_sq();
        let Scaling {
            density: rs,
            flux: fs,
            pressure: ps,
        } = self.scaling;
        let rate = self.diff.rate();
        let slices = (0..l.time_steps)
            .map(|n| self.slice(x, n))
            .collect::<Result<Vec<_>>>()?;
        for n in 0..l.time_steps {
            let s = &slices[n];
            let next = &slices[self.diff.next(n)];
            let bnd = &self.samples[n];
            let nn = self.diff.next(n);
            let inlet_conc = |k: usize, m: usize| match topo.tails[k] {
                Tail::Supply(i) => {
                    if m == 0 {
                        1.0 - bnd.alpha2[i]
                    } else {
                        bnd.alpha2[i]
                    }
                }
                Tail::Withdrawal(i) => s.eta[m][i],
            };
            for m in 0..2 {
                for j in 0..l.num_withdrawal {
                    let row = l.density_row(m, j, n);
                    let mass: f64 = topo.incoming[j]
                        .iter()
                        .map(|&k| topo.lengths[k] * s.ratios.outlet[k])
                        .sum();
                    let regulated = topo.incoming[j].iter().any(|&k| self.outlet_actuator[k].is_some());
                    let diff = next.rho[m][j] - s.rho[m][j];
                    let mut balance = -s.eta[m][j] * bnd.w[j];
                    for &k in &topo.incoming[j] {
                        balance += inlet_conc(k, m) * s.flux[k];
                    }
                    for &k in &topo.outgoing[j] {
                        balance -= inlet_conc(k, m) * s.flux[k];
                    }
                    rows[row] = (mass * rate * diff - balance) / fs;

                    sink(row, l.density(m, j, nn), mass * rate * rs / fs, regulated);
                    sink(row, l.density(m, j, n), -mass * rate * rs / fs, regulated);
                    for mp in 0..2 {
                        let d = bnd.w[j] * Self::deta(s, j, m, mp);
                        sink(row, l.density(mp, j, n), d * rs / fs, true);
                    }
                    for &k in &topo.incoming[j] {
                        let withdrawal_tail = matches!(topo.tails[k], Tail::Withdrawal(_));
                        sink(row, l.flux(k, n), -inlet_conc(k, m), withdrawal_tail);
                        if let Tail::Withdrawal(i) = topo.tails[k] {
                            for mp in 0..2 {
                                let d = -s.flux[k] * Self::deta(s, i, m, mp);
                                sink(row, l.density(mp, i, n), d * rs / fs, true);
                            }
                        }
                    }
                    for &k in &topo.outgoing[j] {
                        sink(row, l.flux(k, n), inlet_conc(k, m), true);
                        for mp in 0..2 {
                            let d = s.flux[k] * Self::deta(s, j, m, mp);
                            sink(row, l.density(mp, j, n), d * rs / fs, true);
                        }
                    }
                    for &k in &topo.incoming[j] {
                        if let Some(a) = self.outlet_actuator[k] {
                            sink(row, l.ratio(a, n), topo.lengths[k] * rate * diff / fs, true);
                        }
                    }
                }
            }
            for k in 0..l.num_edges {
                let row = l.momentum_row(k, n);
                let h = topo.heads[k];
                let (mu_in, mu_out) = (s.ratios.inlet[k], s.ratios.outlet[k]);
                let tail_rho = |m: usize| match topo.tails[k] {
                    Tail::Supply(i) => {
                        if m == 0 {
                            bnd.s1[i]
                        } else {
                            bnd.s2[i]
                        }
                    }
                    Tail::Withdrawal(i) => s.rho[m][i],
                };
                let head_total = s.rho[0][h] + s.rho[1][h];
                let rho_out = mu_out * head_total;
                if !(rho_out > 0.0) {
                    return Err(Error::MomentumRowDensity { edge: k, time_index: n });
                }
                let mut delta = 0.0;
                for m in 0..2 {
                    delta += sig2[m] * (mu_in * tail_rho(m) - mu_out * s.rho[m][h]);
                }
                let fl = topo.friction_length[k];
                let phi = s.flux[k];
                let friction = fl * phi * phi.abs() / rho_out;
                rows[row] = (-delta + friction) / ps;

                let bilinear_inlet = self.inlet_actuator[k].is_some();
                if let Tail::Withdrawal(i) = topo.tails[k] {
                    for m in 0..2 {
                        sink(row, l.density(m, i, n), -sig2[m] * mu_in * rs / ps, bilinear_inlet);
                    }
                }
                for m in 0..2 {
                    let d = sig2[m] * mu_out - friction * mu_out / rho_out;
                    sink(row, l.density(m, h, n), d * rs / ps, true);
                }
                sink(row, l.flux(k, n), 2.0 * fl * phi.abs() / rho_out * fs / ps, true);
                if let Some(a) = self.inlet_actuator[k] {
                    let d: f64 = (0..2).map(|m| -sig2[m] * tail_rho(m)).sum();
                    let withdrawal_tail = matches!(topo.tails[k], Tail::Withdrawal(_));
                    sink(row, l.ratio(a, n), d / ps, withdrawal_tail);
                }
                if let Some(a) = self.outlet_actuator[k] {
                    let d: f64 = (0..2).map(|m| sig2[m] * s.rho[m][h]).sum::<f64>() - friction * head_total / rho_out;
                    sink(row, l.ratio(a, n), d / ps, true);
                }
            }
            for j in 0..l.num_withdrawal {
                let row = l.pressure_row(j, n);
                rows[row] = (sig2[0] * s.rho[0][j] + sig2[1] * s.rho[1][j]) / ps;
                for m in 0..2 {
                    sink(row, l.density(m, j, n), sig2[m] * rs / ps, false);
                }
            }
        }
        Ok(())
    }

    fn build_patterns(&mut self) -> Result<()> {
        let l = self.layout;
        let mut probe = vec![1.0; l.num_vars()];
        for n in 0..l.time_steps {
            for j in 0..l.num_withdrawal {
                probe[l.density(1, j, n)] = 0.1;
            }
        }
        let mut rows = vec![0.0; l.num_eq() + l.num_ineq()];
        let mut emitted: Vec<(usize, usize)> = Vec::new();
        let mut nonlinear_by_row: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); rows.len()];
        self.evaluate(&probe, &mut rows, &mut |r, c, _, nl| {
            emitted.push((r, c));
            if nl {
                nonlinear_by_row[r].insert(c);
            }
        })?;
        let mut pattern = emitted.clone();
        pattern.sort_unstable();
        pattern.dedup();
        self.jac_slots = emitted
            .iter()
            .map(|e| pattern.binary_search(e).expect("emitted entry in pattern"))
            .collect();
        self.jac_pattern = pattern;

        let mut hess = BTreeSet::new();
        for set in &nonlinear_by_row {
            let v: Vec<usize> = set.iter().copied().collect();
            for (i, &a) in v.iter().enumerate() {
                for &b in &v[..=i] {
                    hess.insert((a.max(b), a.min(b)));
                }
            }
        }
        for (k, a) in self.compressors() {
            for n in 0..l.time_steps {
                let (p, u) = (l.flux(k, n), l.ratio(a, n));
                hess.insert((p, p));
                hess.insert((u, u));
                hess.insert((p.max(u), p.min(u)));
            }
        }
        self.hess_pattern = hess.into_iter().collect();
        Ok(())
    }

    /// Compressor (edge, actuator) pairs entering the energy objective.
    fn compressors(&self) -> Vec<(usize, usize)> {
        self.inlet_actuator
            .iter()
            .enumerate()
            .filter_map(|(k, a)| a.map(|a| (k, a)))
            .collect()
    }

    /// Constraint rows: equalities then pressure rows.
    pub fn constraint_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut rows = vec![0.0; self.layout.num_eq() + self.layout.num_ineq()];
        self.evaluate(x, &mut rows, &mut |_, _, _, _| {})?;
        Ok(rows)
    }

    /// Scaled equality residual: density rows divided by the flux unit,
    /// momentum rows by the pressure unit.
    pub fn equality_residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut rows = self.constraint_values(x)?;
        rows.truncate(self.layout.num_eq());
        Ok(rows)
    }

    /// Jacobian pattern of the stacked constraints.
    pub fn jacobian_pattern(&self) -> &[(usize, usize)] {
        &self.jac_pattern
    }
}

impl Nlp for NlpProblem {
    fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }

    fn num_eq(&self) -> usize {
        self.layout.num_eq()
    }

    fn num_ineq(&self) -> usize {
        self.layout.num_ineq()
    }

    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let mut lo = vec![f64::NEG_INFINITY; l.num_vars()];
        let mut hi = vec![f64::INFINITY; l.num_vars()];
        for n in 0..l.time_steps {
            for j in 0..l.num_withdrawal {
                lo[l.density(0, j, n)] = 0.0;
                lo[l.density(1, j, n)] = 0.0;
                if self.hydrogen_free {
                    hi[l.density(1, j, n)] = 0.0;
                }
            }
            for (a, &(min, max)) in self.scenario.ratio_bounds.iter().enumerate() {
                lo[l.ratio(a, n)] = min;
                hi[l.ratio(a, n)] = max;
            }
        }
        (lo, hi)
    }

    fn ineq_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let ps = self.scaling.pressure;
        let lo: Vec<f64> = self.scenario.pressure_min.iter().map(|p| p / ps).collect();
        let hi: Vec<f64> = self.scenario.pressure_max.iter().map(|p| p / ps).collect();
        let n = self.layout.time_steps;
        (lo.repeat(n), hi.repeat(n))
    }

    /// Compression energy `Σ_n (T/N) Σ_a c_a |φ| (μ^e − 1)` with `|φ|`
    /// smoothed.
    fn objective(&self, x: &[f64]) -> Result<f64> {
        let l = &self.layout;
        let dt = 1.0 / self.diff.rate();
        let mut j = 0.0;
        for n in 0..l.time_steps {
            for (k, a) in self.compressors() {
                let phi = x[l.flux(k, n)] * self.scaling.flux;
                let mu = x[l.ratio(a, n)];
                let c = self.scenario.compressor_coefficients[a];
                j += dt * c * phi.hypot(self.smoothing) * (mu.powf(self.exponent) - 1.0);
            }
        }
        Ok(j)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<()> {
        let l = &self.layout;
        let dt = 1.0 / self.diff.rate();
        grad.iter_mut().for_each(|g| *g = 0.0);
        for n in 0..l.time_steps {
            for (k, a) in self.compressors() {
                let phi = x[l.flux(k, n)] * self.scaling.flux;
                let mu = x[l.ratio(a, n)];
                let c = self.scenario.compressor_coefficients[a];
                let mag = phi.hypot(self.smoothing);
                grad[l.flux(k, n)] += dt * c * phi / mag * (mu.powf(self.exponent) - 1.0) * self.scaling.flux;
                grad[l.ratio(a, n)] += dt * c * mag * self.exponent * mu.powf(self.exponent - 1.0);
            }
        }
        Ok(())
    }

    fn eq_constraints(&self, x: &[f64], c: &mut [f64]) -> Result<()> {
        let rows = self.constraint_values(x)?;
        c.copy_from_slice(&rows[..self.layout.num_eq()]);
        Ok(())
    }

    fn ineq_constraints(&self, x: &[f64], d: &mut [f64]) -> Result<()> {
        let rows = self.constraint_values(x)?;
        d.copy_from_slice(&rows[self.layout.num_eq()..]);
        Ok(())
    }

    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        self.jac_pattern.clone()
    }

    fn jacobian_values(&self, x: &[f64], values: &mut [f64]) -> Result<()> {
        values.iter_mut().for_each(|v| *v = 0.0);
        let mut rows = vec![0.0; self.layout.num_eq() + self.layout.num_ineq()];
        let mut e = 0;
        self.evaluate(x, &mut rows, &mut |_, _, v, _| {
            values[self.jac_slots[e]] += v;
            e += 1;
        })
    }

    fn hessian_structure(&self) -> Option<Vec<(usize, usize)>> {
        Some(self.hess_pattern.clone())
    }
}

/// Per-actuator periodic profiles through the optimized ratios.
pub fn extract_controls(problem: &NlpProblem, x: &[f64]) -> Result<ControlProfiles> {
    let (_, ratios) = problem.unpack(x);
    Ok(ControlProfiles {
        ratios: PeriodicProfile::new(problem.times(), ratios, problem.diff.horizon)?,
    })
}

/// Gas used by a problem, for callers building trajectories.
pub fn problem_gas(problem: &NlpProblem) -> &Gas {
    &problem.scenario.gas
}
