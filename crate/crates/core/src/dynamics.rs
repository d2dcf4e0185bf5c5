//! Reduced network dynamics of a two-constituent gas mixture.
//!
//! The edge momentum balance is local to an edge, so the inlet mass flux is
//! eliminated algebraically and the system becomes an ODE in the nodal
//! partial densities:
//!
//! ```text
//! F ρ̇⁽ᵐ⁾ = Q_wᵀ[(|Q̲_w| η⁽ᵐ⁾ + |Q̲_s| α⁽ᵐ⁾) ⊙ φ̲] − η⁽ᵐ⁾ ⊙ w,   F = Q̄_wᵀ L M̄_w
//! ```
//!
//! `F` is diagonal (every edge has exactly one head), so applying its inverse
//! is a division by the linepack length of each withdrawal node.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{EdgeRatios, RefinedNetwork, Tail, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct GasConstituent {
    pub name: String,
    /// Isothermal speed of sound, m/s.
    pub sound_speed: f64,
}

/// The two constituents of a scenario; index 0 is natural gas, 1 is hydrogen.
#[derive(Debug, Clone, PartialEq)]
pub struct Gas {
    pub constituents: [GasConstituent; 2],
}

impl Gas {
    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sound speeds must be positive, got {sigma1} and {sigma2}"
            )));
        }
        Ok(Self {
            constituents: [
                GasConstituent {
                    name: "natural gas".into(),
                    sound_speed: sigma1,
                },
                GasConstituent {
                    name: "hydrogen".into(),
                    sound_speed: sigma2,
                },
            ],
        })
    }

    pub fn sigma(&self, m: usize) -> f64 {
        self.constituents[m].sound_speed
    }

    /// `[σ₁², σ₂²]`.
    pub fn sigma_sq(&self) -> [f64; 2] {
        [self.sigma(0).powi(2), self.sigma(1).powi(2)]
    }

    pub fn pressure(&self, rho1: f64, rho2: f64) -> f64 {
        pressure(rho1, rho2, self.sigma(0), self.sigma(1))
    }

    /// Squared sound speed of a mixture with hydrogen mass fraction `eta2`.
    pub fn mixture_sound_speed_sq(&self, eta2: f64) -> f64 {
        let [a, b] = self.sigma_sq();
        a * (1.0 - eta2) + b * eta2
    }
}

/// Sum of ideal partial pressures, Pa.
pub fn pressure(rho1: f64, rho2: f64, sigma1: f64, sigma2: f64) -> f64 {
    sigma1 * sigma1 * rho1 + sigma2 * sigma2 * rho2
}

/// Nodal partial densities (withdrawal nodes) and edge inlet mass fluxes.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
    pub flux: Vec<f64>,
}

impl MixtureState {
    pub fn pressures(&self, gas: &Gas) -> Vec<f64> {
        self.rho1
            .iter()
            .zip(&self.rho2)
            .map(|(&a, &b)| gas.pressure(a, b))
            .collect()
    }

    pub fn total_density(&self) -> Vec<f64> {
        self.rho1.iter().zip(&self.rho2).map(|(a, b)| a + b).collect()
    }
}

/// Hydrogen mass fraction `η₂ = ρ₂/(ρ₁+ρ₂)` at every withdrawal node.
pub fn nodal_concentration(state: &MixtureState) -> Result<Vec<f64>> {
    concentration(&state.rho1, &state.rho2)
}

pub(crate) fn concentration(rho1: &[f64], rho2: &[f64]) -> Result<Vec<f64>> {
    rho1.iter()
        .zip(rho2)
        .enumerate()
        .map(|(j, (&a, &b))| {
            let total = a + b;
            if total > 0.0 {
                Ok(b / total)
            } else {
                Err(Error::ZeroDensity { node: j })
            }
        })
        .collect()
}

/// Boundary data at one instant: supply constituent densities and
/// withdrawal mass fluxes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryValues {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    /// Supply hydrogen mass fraction, `s2 / (s1 + s2)`.
    pub alpha2: Vec<f64>,
    /// Withdrawal mass flux per withdrawal node, kg/(m²·s).
    pub w: Vec<f64>,
}

impl BoundaryValues {
    pub fn from_densities(s1: Vec<f64>, s2: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if s1.len() != s2.len() {
            return Err(Error::InvalidInput("supply density lengths differ".into()));
        }
        let alpha2 = s1
            .iter()
            .zip(&s2)
            .map(|(&a, &b)| {
                if a < 0.0 || b < 0.0 || a + b <= 0.0 {
                    Err(Error::InfeasibleBoundary(format!(
                        "supply densities ({a}, {b}) must be nonnegative with positive sum"
                    )))
                } else {
                    Ok(b / (a + b))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { s1, s2, alpha2, w })
    }

    /// Supply given as pressure and hydrogen mass fraction.
    pub fn from_pressure(pressure: &[f64], alpha2: &[f64], gas: &Gas, w: Vec<f64>) -> Result<Self> {
        if pressure.len() != alpha2.len() {
            return Err(Error::InvalidInput("supply pressure/fraction lengths differ".into()));
        }
        let mut s1 = Vec::with_capacity(pressure.len());
        let mut s2 = Vec::with_capacity(pressure.len());
        for (&p, &a) in pressure.iter().zip(alpha2) {
            if !(p > 0.0) || !(0.0..=1.0).contains(&a) {
                return Err(Error::InfeasibleBoundary(format!(
                    "supply pressure {p} Pa / fraction {a} out of range"
                )));
            }
            let total = p / gas.mixture_sound_speed_sq(a);
            s1.push((1.0 - a) * total);
            s2.push(a * total);
        }
        Ok(Self {
            s1,
            s2,
            alpha2: alpha2.to_vec(),
            w,
        })
    }

    pub fn supply_pressure(&self, gas: &Gas) -> Vec<f64> {
        self.s1
            .iter()
            .zip(&self.s2)
            .map(|(&a, &b)| gas.pressure(a, b))
            .collect()
    }

    fn supply(&self, i: usize, m: usize) -> f64 {
        if m == 0 {
            self.s1[i]
        } else {
            self.s2[i]
        }
    }

    fn alpha(&self, i: usize, m: usize) -> f64 {
        if m == 0 {
            1.0 - self.alpha2[i]
        } else {
            self.alpha2[i]
        }
    }
}

/// Scenario-level physical and transcription parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub gas: Gas,
    /// Horizon `T`, s.
    pub horizon: f64,
    /// Pressure bounds per withdrawal node, Pa.
    pub pressure_min: Vec<f64>,
    pub pressure_max: Vec<f64>,
    /// Ratio bounds per actuator.
    pub ratio_bounds: Vec<(f64, f64)>,
    pub isentropic_exponent: f64,
    /// Compressor efficiency coefficient `c_a` per actuator.
    pub compressor_coefficients: Vec<f64>,
    /// Number of collocation points `N`.
    pub time_steps: usize,
}

impl ScenarioConfig {
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if self.time_steps < 2 {
            return Err(Error::TooFewTimeSteps(self.time_steps));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.isentropic_exponent > 1.0) {
            return Err(Error::InvalidInput(format!(
                "isentropic exponent must exceed 1, got {}",
                self.isentropic_exponent
            )));
        }
        let nw = topo.num_withdrawal;
        if self.pressure_min.len() != nw || self.pressure_max.len() != nw {
            return Err(Error::InvalidInput(format!(
                "pressure bounds must cover {nw} withdrawal nodes"
            )));
        }
        for (lo, hi) in self.pressure_min.iter().zip(&self.pressure_max) {
            if !(*lo > 0.0 && lo < hi) {
                return Err(Error::InvalidInput(format!("invalid pressure bounds [{lo}, {hi}]")));
            }
        }
        let na = topo.num_actuators();
        if self.ratio_bounds.len() != na || self.compressor_coefficients.len() != na {
            return Err(Error::InvalidInput(format!(
                "ratio bounds and coefficients must cover {na} actuators"
            )));
        }
        for &(lo, hi) in &self.ratio_bounds {
            if !(lo >= 1.0 && hi >= lo) {
                return Err(Error::InvalidInput(format!("invalid ratio bounds [{lo}, {hi}]")));
            }
        }
        if self.compressor_coefficients.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::InvalidInput(
                "compressor coefficients must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn max_pressure(&self) -> f64 {
        self.pressure_max.iter().copied().fold(0.0, f64::max)
    }
}

/// Evaluation of one edge's eliminated flux and its sensitivities.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EdgeFlux {
    pub flux: f64,
    /// `∂φ/∂ρ⁽ᵐ⁾` at the tail and head nodes.
    pub d_tail: [f64; 2],
    pub d_head: [f64; 2],
}

/// Signed-square-root flux from the momentum balance.
pub(crate) fn eliminate_flux(delta: f64, rho_out: f64, friction_length: f64) -> f64 {
    let mag = (delta.abs() * rho_out / friction_length).sqrt();
    if delta < 0.0 {
        -mag
    } else {
        mag
    }
}

/// The reduced mixture model of a refined network.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub topology: Topology,
    pub gas: Gas,
    sigma_sq: [f64; 2],
}

impl MixtureModel {
    pub fn new(net: &RefinedNetwork, gas: &Gas) -> Self {
        Self {
            topology: Topology::new(&net.network),
            gas: gas.clone(),
            sigma_sq: gas.sigma_sq(),
        }
    }

    pub fn num_withdrawal(&self) -> usize {
        self.topology.num_withdrawal
    }

    pub fn num_edges(&self) -> usize {
        self.topology.num_edges()
    }

    fn tail_density(&self, k: usize, m: usize, rho: [&[f64]; 2], bnd: &BoundaryValues) -> f64 {
        match self.topology.tails[k] {
            Tail::Supply(i) => bnd.supply(i, m),
            Tail::Withdrawal(i) => rho[m][i],
        }
    }

    /// Pressure difference `Δ_k` and regulated outlet density of edge `k`.
    pub(crate) fn edge_drive(
        &self,
        k: usize,
        rho: [&[f64]; 2],
        bnd: &BoundaryValues,
        ratios: &EdgeRatios,
    ) -> (f64, f64) {
        let j = self.topology.heads[k];
        let (mu_in, mu_out) = (ratios.inlet[k], ratios.outlet[k]);
        let mut delta = 0.0;
        for m in 0..2 {
            delta += self.sigma_sq[m] * (mu_in * self.tail_density(k, m, rho, bnd) - mu_out * rho[m][j]);
        }
        (delta, mu_out * (rho[0][j] + rho[1][j]))
    }

    /// Flux of edge `k` with sensitivities; `floor` bounds `|φ|` from below in
    /// the derivative, which is unbounded at zero flow.
    pub(crate) fn edge_flux_eval(
        &self,
        k: usize,
        rho: [&[f64]; 2],
        bnd: &BoundaryValues,
        ratios: &EdgeRatios,
        floor: f64,
    ) -> Result<EdgeFlux> {
        let (delta, rho_out) = self.edge_drive(k, rho, bnd, ratios);
        if !(rho_out > 0.0) {
            return Err(Error::NonPositiveOutletDensity {
                edge: k,
                value: rho_out,
            });
        }
        let fl = self.topology.friction_length[k];
        let flux = eliminate_flux(delta, rho_out, fl);
        let denom = 2.0 * fl * flux.abs().max(floor);
        let (mu_in, mu_out) = (ratios.inlet[k], ratios.outlet[k]);
        let mut d_tail = [0.0; 2];
        let mut d_head = [0.0; 2];
        for m in 0..2 {
            d_tail[m] = rho_out * self.sigma_sq[m] * mu_in / denom;
            d_head[m] = (-rho_out * self.sigma_sq[m] * mu_out + delta * mu_out) / denom;
        }
        Ok(EdgeFlux { flux, d_tail, d_head })
    }

    /// Edge inlet fluxes that zero the momentum residual of every edge.
    pub fn solve_edge_flux(
        &self,
        rho1: &[f64],
        rho2: &[f64],
        bnd: &BoundaryValues,
        ratios: &EdgeRatios,
    ) -> Result<Vec<f64>> {
        (0..self.num_edges())
            .map(|k| {
                let (delta, rho_out) = self.edge_drive(k, [rho1, rho2], bnd, ratios);
                if !(rho_out > 0.0) {
                    return Err(Error::NonPositiveOutletDensity {
                        edge: k,
                        value: rho_out,
                    });
                }
                Ok(eliminate_flux(delta, rho_out, self.topology.friction_length[k]))
            })
            .collect()
    }

    /// `Σ_m σ_m²(M_w ρ⁽ᵐ⁾ + M_s s⁽ᵐ⁾) + L K (φ⊙|φ|) ⊘ (M̄_w ρ)`, per edge.
    pub fn momentum_residual(
        &self,
        rho1: &[f64],
        rho2: &[f64],
        flux: &[f64],
        bnd: &BoundaryValues,
        ratios: &EdgeRatios,
    ) -> Result<Vec<f64>> {
        (0..self.num_edges())
            .map(|k| {
                let (delta, rho_out) = self.edge_drive(k, [rho1, rho2], bnd, ratios);
                if !(rho_out > 0.0) {
                    return Err(Error::NonPositiveOutletDensity {
                        edge: k,
                        value: rho_out,
                    });
                }
                let fl = self.topology.friction_length[k];
                Ok(-delta + fl * flux[k] * flux[k].abs() / rho_out)
            })
            .collect()
    }

    /// Inlet concentration of constituent `m` carried by edge `k` (tail upwinding).
    fn inlet_concentration(&self, k: usize, m: usize, eta2: &[f64], bnd: &BoundaryValues) -> f64 {
        match self.topology.tails[k] {
            Tail::Supply(i) => bnd.alpha(i, m),
            Tail::Withdrawal(i) => {
                if m == 0 {
                    1.0 - eta2[i]
                } else {
                    eta2[i]
                }
            }
        }
    }

    /// Right-hand side of the nodal balance, `F ρ̇⁽ᵐ⁾`, for both constituents.
    pub fn balance(&self, rho1: &[f64], rho2: &[f64], flux: &[f64], bnd: &BoundaryValues) -> Result<[Vec<f64>; 2]> {
        let eta2 = concentration(rho1, rho2)?;
        let nw = self.num_withdrawal();
        let mut out = [vec![0.0; nw], vec![0.0; nw]];
        for (j, &w) in bnd.w.iter().enumerate() {
            out[0][j] -= (1.0 - eta2[j]) * w;
            out[1][j] -= eta2[j] * w;
        }
        for (k, &phi) in flux.iter().enumerate() {
            for (m, o) in out.iter_mut().enumerate() {
                let carried = self.inlet_concentration(k, m, &eta2, bnd) * phi;
                o[self.topology.heads[k]] += carried;
                if let Tail::Withdrawal(i) = self.topology.tails[k] {
                    o[i] -= carried;
                }
            }
        }
        Ok(out)
    }

    /// Time derivative of the nodal partial densities.
    pub fn density_rhs(
        &self,
        rho1: &[f64],
        rho2: &[f64],
        bnd: &BoundaryValues,
        ratios: &EdgeRatios,
        flux: &[f64],
    ) -> Result<[Vec<f64>; 2]> {
        let mass = self.topology.mass_diagonal(ratios)?;
        let mut b = self.balance(rho1, rho2, flux, bnd)?;
        for v in b.iter_mut() {
            v.iter_mut().zip(&mass).for_each(|(x, f)| *x /= f);
        }
        Ok(b)
    }

    /// Injected minus withdrawn mass flux of each constituent, network-wide.
    pub fn net_injection(&self, rho1: &[f64], rho2: &[f64], flux: &[f64], bnd: &BoundaryValues) -> Result<[f64; 2]> {
        let eta2 = concentration(rho1, rho2)?;
        let mut net = [0.0; 2];
        for (k, &phi) in flux.iter().enumerate() {
            if let Tail::Supply(i) = self.topology.tails[k] {
                net[0] += bnd.alpha(i, 0) * phi;
                net[1] += bnd.alpha(i, 1) * phi;
            }
        }
        for (j, &w) in bnd.w.iter().enumerate() {
            net[0] -= (1.0 - eta2[j]) * w;
            net[1] -= eta2[j] * w;
        }
        Ok(net)
    }

    /// `1ᵀ F ρ⁽ᵐ⁾`, the length-weighted linepack of one constituent.
    pub fn linepack(&self, rho: &[f64], ratios: &EdgeRatios) -> Result<f64> {
        let mass = self.topology.mass_diagonal(ratios)?;
        Ok(mass.iter().zip(rho).map(|(f, r)| f * r).sum())
    }

    /// Jacobian of `ρ̇` with respect to `(ρ⁽¹⁾, ρ⁽²⁾)` with the flux eliminated.
    pub fn rhs_jacobian(
        &self,
        rho1: &[f64],
        rho2: &[f64],
        bnd: &BoundaryValues,
        ratios: &EdgeRatios,
        flux_floor: f64,
    ) -> Result<DMatrix<f64>> {
        let nw = self.num_withdrawal();
        let mass = self.topology.mass_diagonal(ratios)?;
        let eta2 = concentration(rho1, rho2)?;
        let mut jac = DMatrix::zeros(2 * nw, 2 * nw);
        // η derivatives: ∂η⁽ᵐ⁾_i/∂ρ⁽ᵐ'⁾_i
        let deta = |i: usize, m: usize, mp: usize| -> f64 {
            let total = rho1[i] + rho2[i];
            let own = if m == 0 { rho1[i] } else { rho2[i] };
            if m == mp {
                (total - own) / (total * total)
            } else {
                -own / (total * total)
            }
        };
        for (j, &w) in bnd.w.iter().enumerate() {
            for m in 0..2 {
                for mp in 0..2 {
                    jac[(m * nw + j, mp * nw + j)] -= w * deta(j, m, mp);
                }
            }
        }
        for k in 0..self.num_edges() {
            let ef = self.edge_flux_eval(k, [rho1, rho2], bnd, ratios, flux_floor)?;
            let head = self.topology.heads[k];
            let tail = self.topology.tails[k];
            for m in 0..2 {
                let c = self.inlet_concentration(k, m, &eta2, bnd);
                // flux sensitivities
                let mut add = |col: usize, v: f64| {
                    jac[(m * nw + head, col)] += v;
                    if let Tail::Withdrawal(i) = tail {
                        jac[(m * nw + i, col)] -= v;
                    }
                };
                for mp in 0..2 {
                    add(mp * nw + head, c * ef.d_head[mp]);
                    if let Tail::Withdrawal(i) = tail {
                        add(mp * nw + i, c * ef.d_tail[mp]);
                        // concentration sensitivity
                        add(mp * nw + i, deta(i, m, mp) * ef.flux);
                    }
                }
            }
        }
        for r in 0..2 * nw {
            let f = mass[r % nw];
            for c in 0..2 * nw {
                jac[(r, c)] /= f;
            }
        }
        Ok(jac)
    }

    /// Warns once if any edge flux is negative.
    pub(crate) fn check_reversal(&self, flux: &[f64], time: f64) -> bool {
        if let Some(k) = flux.iter().position(|&f| f < 0.0) {
            warn!(
                "flow reversal on edge index {k} at t = {time:.1} s; tail-node upwinding of concentration is questionable"
            );
            return true;
        }
        false
    }

    /// Steady state for constant boundary data and ratios, by damped Newton
    /// on the nodal balances and momentum residuals.
    pub fn steady_state(&self, bnd: &BoundaryValues, ratios: &EdgeRatios, opts: &SteadyOptions) -> Result<SteadyState> {
        SteadySolver::new(self, bnd, ratios, opts)?.solve()
    }
}

#[derive(Debug, Clone)]
pub struct SteadyOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Pressure used to scale momentum residuals; defaults to the largest supply pressure.
    pub pressure_scale: Option<f64>,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
            pressure_scale: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub state: MixtureState,
    pub iterations: usize,
    /// Max-norm of the scaled balance and momentum residuals at `state`.
    pub residual: f64,
}

struct SteadySolver<'a> {
    model: &'a MixtureModel,
    bnd: &'a BoundaryValues,
    ratios: &'a EdgeRatios,
    opts: &'a SteadyOptions,
    flux_scale: f64,
    pressure_scale: f64,
    /// Hydrogen absent everywhere: ρ⁽²⁾ is held at exactly zero.
    no_hydrogen: bool,
}

impl<'a> SteadySolver<'a> {
    fn new(
        model: &'a MixtureModel,
        bnd: &'a BoundaryValues,
        ratios: &'a EdgeRatios,
        opts: &'a SteadyOptions,
    ) -> Result<Self> {
        let topo = &model.topology;
        if bnd.w.len() != topo.num_withdrawal || bnd.s1.len() != topo.num_supply {
            return Err(Error::InvalidInput(
                "boundary dimensions do not match the network".into(),
            ));
        }
        topo.mass_diagonal(ratios)?;
        let flux_scale = bnd.w.iter().fold(0.0f64, |a, &w| a.max(w.abs())).max(1.0);
        let pressure_scale = opts
            .pressure_scale
            .unwrap_or_else(|| bnd.supply_pressure(&model.gas).into_iter().fold(0.0, f64::max));
        Ok(Self {
            model,
            bnd,
            ratios,
            opts,
            flux_scale,
            pressure_scale,
            no_hydrogen: bnd.s2.iter().all(|&s| s == 0.0),
        })
    }

    fn dims(&self) -> (usize, usize) {
        (self.model.num_withdrawal(), self.model.num_edges())
    }

    /// Zero-flow densities propagated from the supplies through the ratios,
    /// and a minimum-norm flux satisfying total mass balance.
    fn initial_guess(&self) -> Result<Vec<f64>> {
        let topo = &self.model.topology;
        let (nw, ne) = self.dims();
        let mut rho = [vec![f64::NAN; nw], vec![f64::NAN; nw]];
        let mut changed = true;
        while changed {
            changed = false;
            for k in 0..ne {
                let j = topo.heads[k];
                if !rho[0][j].is_nan() {
                    continue;
                }
                let tail = match topo.tails[k] {
                    Tail::Supply(i) => Some([self.bnd.s1[i], self.bnd.s2[i]]),
                    Tail::Withdrawal(i) if !rho[0][i].is_nan() => Some([rho[0][i], rho[1][i]]),
                    _ => None,
                };
                if let Some(t) = tail {
                    let scale = self.ratios.inlet[k] / self.ratios.outlet[k];
                    rho[0][j] = t[0] * scale;
                    rho[1][j] = t[1] * scale;
                    changed = true;
                }
            }
        }
        let fallback = [self.bnd.s1[0], self.bnd.s2[0]];
        for m in 0..2 {
            for v in rho[m].iter_mut() {
                if v.is_nan() {
                    *v = fallback[m];
                }
            }
        }

        // φ = Q (QᵀQ)⁻¹ w, with Q = Q_w (E × nw).
        let mut q = DMatrix::zeros(ne, nw);
        for k in 0..ne {
            q[(k, topo.heads[k])] = 1.0;
            if let Tail::Withdrawal(i) = topo.tails[k] {
                q[(k, i)] = -1.0;
            }
        }
        let qtq = q.transpose() * &q;
        let w = DVector::from_column_slice(&self.bnd.w);
        let flux = match qtq.lu().solve(&w) {
            Some(y) => q * y,
            None => DVector::zeros(ne),
        };

        let mut z = Vec::with_capacity(2 * nw + ne);
        z.extend_from_slice(&rho[0]);
        z.extend_from_slice(&rho[1]);
        z.extend(flux.iter());
        Ok(z)
    }

    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], &'z [f64], &'z [f64]) {
        let (nw, _) = self.dims();
        (&z[..nw], &z[nw..2 * nw], &z[2 * nw..])
    }

    fn residual(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (rho1, rho2, flux) = self.split(z);
        let b = self.model.balance(rho1, rho2, flux, self.bnd)?;
        let mom = self.model.momentum_residual(rho1, rho2, flux, self.bnd, self.ratios)?;
        let mut g: Vec<f64> = b[0].iter().chain(&b[1]).map(|v| v / self.flux_scale).collect();
        g.extend(mom.iter().map(|v| v / self.pressure_scale));
        Ok(g)
    }

    fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let topo = &self.model.topology;
        let sigma_sq = self.model.sigma_sq;
        let (nw, ne) = self.dims();
        let (rho1, rho2, flux) = self.split(z);
        let rho = [rho1, rho2];
        let eta2 = concentration(rho1, rho2)?;
        let mut jac = DMatrix::zeros(2 * nw + ne, 2 * nw + ne);
        let deta = |i: usize, m: usize, mp: usize| -> f64 {
            let total = rho1[i] + rho2[i];
            let own = rho[m][i];
            if m == mp {
                (total - own) / (total * total)
            } else {
                -own / (total * total)
            }
        };
        for (j, &w) in self.bnd.w.iter().enumerate() {
            for m in 0..2 {
                for mp in 0..2 {
                    jac[(m * nw + j, mp * nw + j)] -= w * deta(j, m, mp);
                }
            }
        }
        for k in 0..ne {
            let head = topo.heads[k];
            for m in 0..2 {
                let c = self.model.inlet_concentration(k, m, &eta2, self.bnd);
                jac[(m * nw + head, 2 * nw + k)] += c;
                if let Tail::Withdrawal(i) = topo.tails[k] {
                    jac[(m * nw + i, 2 * nw + k)] -= c;
                    for mp in 0..2 {
                        let v = deta(i, m, mp) * flux[k];
                        jac[(m * nw + head, mp * nw + i)] += v;
                        jac[(m * nw + i, mp * nw + i)] -= v;
                    }
                }
            }
            // momentum row
            let row = 2 * nw + k;
            let (mu_in, mu_out) = (self.ratios.inlet[k], self.ratios.outlet[k]);
            let rho_out = mu_out * (rho1[head] + rho2[head]);
            let fl = topo.friction_length[k];
            let fphi = fl * flux[k] * flux[k].abs();
            for m in 0..2 {
                if let Tail::Withdrawal(i) = topo.tails[k] {
                    jac[(row, m * nw + i)] -= sigma_sq[m] * mu_in;
                }
                jac[(row, m * nw + head)] += sigma_sq[m] * mu_out - fphi * mu_out / (rho_out * rho_out);
            }
            jac[(row, 2 * nw + k)] = 2.0 * fl * flux[k].abs() / rho_out;
        }
        for r in 0..2 * nw {
            for c in 0..2 * nw + ne {
                jac[(r, c)] /= self.flux_scale;
            }
        }
        for r in 2 * nw..2 * nw + ne {
            for c in 0..2 * nw + ne {
                jac[(r, c)] /= self.pressure_scale;
            }
        }
        if self.no_hydrogen {
            // decouple ρ⁽²⁾: identity rows/columns keep its step at zero
            for j in nw..2 * nw {
                for c in 0..2 * nw + ne {
                    jac[(j, c)] = 0.0;
                    jac[(c, j)] = 0.0;
                }
                jac[(j, j)] = 1.0;
            }
        }
        Ok(jac)
    }

    fn merit(g: &[f64]) -> f64 {
        0.5 * g.iter().map(|v| v * v).sum::<f64>()
    }

    fn max_norm(g: &[f64]) -> f64 {
        g.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Residual with the flux re-eliminated from the densities.
    fn eliminated(&self, z: &[f64]) -> Result<(MixtureState, f64)> {
        let (rho1, rho2, _) = self.split(z);
        let flux = self.model.solve_edge_flux(rho1, rho2, self.bnd, self.ratios)?;
        let mut zz = z.to_vec();
        let (nw, _) = self.dims();
        zz[2 * nw..].copy_from_slice(&flux);
        let res = Self::max_norm(&self.residual(&zz)?);
        Ok((
            MixtureState {
                rho1: rho1.to_vec(),
                rho2: rho2.to_vec(),
                flux,
            },
            res,
        ))
    }

    fn solve(&self) -> Result<SteadyState> {
        let (nw, _) = self.dims();
        let mut z = self.initial_guess()?;
        let mut g = self.residual(&z)?;
        for iteration in 0..=self.opts.max_iterations {
            let (state, res) = self.eliminated(&z)?;
            if res <= self.opts.tolerance {
                return Ok(SteadyState {
                    state,
                    iterations: iteration,
                    residual: res,
                });
            }
            if iteration == self.opts.max_iterations {
                return Err(Error::NewtonNotConverged {
                    iterations: iteration,
                    residual: res,
                });
            }
            let jac = self.jacobian(&z)?;
            let rhs = -DVector::from_column_slice(&g);
            let step = match jac.clone().lu().solve(&rhs) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => {
                    // Levenberg-Marquardt fallback for singular Jacobians.
                    let jt = jac.transpose();
                    let mut normal = &jt * &jac;
                    let lambda = 1e-8 * normal.diagonal().max().max(1e-300);
                    for i in 0..normal.nrows() {
                        normal[(i, i)] += lambda;
                    }
                    normal.lu().solve(&(jt * rhs)).ok_or(Error::NewtonNotConverged {
                        iterations: iteration,
                        residual: res,
                    })?
                }
            };
            // keep total densities positive
            let mut alpha: f64 = 1.0;
            for j in 0..nw {
                let total = z[j] + z[nw + j];
                let dtotal = step[j] + step[nw + j];
                if dtotal < 0.0 {
                    alpha = alpha.min(0.9 * total / -dtotal);
                }
            }
            let m0 = Self::merit(&g);
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
                if let Ok(gt) = self.residual(&trial) {
                    if Self::merit(&gt) <= (1.0 - 2e-4 * alpha) * m0 {
                        z = trial;
                        g = gt;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NewtonNotConverged {
                    iterations: iteration,
                    residual: res,
                });
            }
            if self.no_hydrogen {
                z[nw..2 * nw].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        unreachable!()
    }
}

/// Total-density evaluator valid when the concentration is uniform and constant.
#[derive(Debug, Clone)]
pub struct HomogeneousModel {
    pub topology: Topology,
    eta2: f64,
    /// Squared generalized sound speed `a²`.
    sound_speed_sq: f64,
}

/// Reduces the mixture model to a single total-density system for a
/// network-uniform hydrogen fraction.
pub fn homogeneous_reduce(model: &MixtureModel, alpha2: &[f64]) -> Result<HomogeneousModel> {
    let first = *alpha2
        .first()
        .ok_or_else(|| Error::InvalidInput("no supply concentration given".into()))?;
    if let Some(&other) = alpha2.iter().find(|&&a| (a - first).abs() > 1e-12) {
        return Err(Error::NonUniformConcentration { first, other });
    }
    if !(0.0..=1.0).contains(&first) {
        return Err(Error::InvalidInput(format!("mass fraction {first} outside [0, 1]")));
    }
    Ok(HomogeneousModel {
        topology: model.topology.clone(),
        eta2: first,
        sound_speed_sq: model.gas.mixture_sound_speed_sq(first),
    })
}

impl HomogeneousModel {
    pub fn sound_speed(&self) -> f64 {
        self.sound_speed_sq.sqrt()
    }

    pub fn concentration(&self) -> f64 {
        self.eta2
    }

    /// `ρ⁽ᵐ⁾ = η⁽ᵐ⁾ ρ`.
    pub fn partial_densities(&self, rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            rho.iter().map(|r| (1.0 - self.eta2) * r).collect(),
            rho.iter().map(|r| self.eta2 * r).collect(),
        )
    }

    fn drive(&self, k: usize, rho: &[f64], supply: &[f64], ratios: &EdgeRatios) -> (f64, f64) {
        let tail = match self.topology.tails[k] {
            Tail::Supply(i) => supply[i],
            Tail::Withdrawal(i) => rho[i],
        };
        let head = rho[self.topology.heads[k]];
        let delta = self.sound_speed_sq * (ratios.inlet[k] * tail - ratios.outlet[k] * head);
        (delta, ratios.outlet[k] * head)
    }

    pub fn edge_flux(&self, rho: &[f64], supply_total: &[f64], ratios: &EdgeRatios) -> Result<Vec<f64>> {
        (0..self.topology.num_edges())
            .map(|k| {
                let (delta, rho_out) = self.drive(k, rho, supply_total, ratios);
                if !(rho_out > 0.0) {
                    return Err(Error::NonPositiveOutletDensity {
                        edge: k,
                        value: rho_out,
                    });
                }
                Ok(eliminate_flux(delta, rho_out, self.topology.friction_length[k]))
            })
            .collect()
    }

    /// `ρ̇ = F⁻¹ (Q_wᵀ φ − w)`.
    pub fn density_rhs(&self, rho: &[f64], supply_total: &[f64], w: &[f64], ratios: &EdgeRatios) -> Result<Vec<f64>> {
        let mass = self.topology.mass_diagonal(ratios)?;
        let flux = self.edge_flux(rho, supply_total, ratios)?;
        let mut out: Vec<f64> = w.iter().map(|w| -w).collect();
        for (k, &phi) in flux.iter().enumerate() {
            out[self.topology.heads[k]] += phi;
            if let Tail::Withdrawal(i) = self.topology.tails[k] {
                out[i] -= phi;
            }
        }
        out.iter_mut().zip(&mass).for_each(|(x, f)| *x /= f);
        Ok(out)
    }

    pub fn rhs_jacobian(
        &self,
        rho: &[f64],
        supply_total: &[f64],
        ratios: &EdgeRatios,
        flux_floor: f64,
    ) -> Result<DMatrix<f64>> {
        let nw = self.topology.num_withdrawal;
        let mass = self.topology.mass_diagonal(ratios)?;
        let mut jac = DMatrix::zeros(nw, nw);
        for k in 0..self.topology.num_edges() {
            let (delta, rho_out) = self.drive(k, rho, supply_total, ratios);
            let fl = self.topology.friction_length[k];
            let flux = eliminate_flux(delta, rho_out, fl);
            let denom = 2.0 * fl * flux.abs().max(flux_floor);
            let head = self.topology.heads[k];
            let (mu_in, mu_out) = (ratios.inlet[k], ratios.outlet[k]);
            let d_head = (-rho_out * self.sound_speed_sq * mu_out + delta * mu_out) / denom;
            jac[(head, head)] += d_head;
            if let Tail::Withdrawal(i) = self.topology.tails[k] {
                let d_tail = rho_out * self.sound_speed_sq * mu_in / denom;
                jac[(head, i)] += d_tail;
                jac[(i, head)] -= d_head;
                jac[(i, i)] -= d_tail;
            }
        }
        for r in 0..nw {
            for c in 0..nw {
                jac[(r, c)] /= mass[r];
            }
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{parse_network, refine};
    use approx::assert_relative_eq;

    const SIGMA1: f64 = 338.38;

    fn gas() -> Gas {
        Gas::new(SIGMA1, 4.0 * SIGMA1).unwrap()
    }

    fn pipe(length_km: f64, cap_km: f64) -> RefinedNetwork {
        let net = parse_network(&format!(
            r#"
[[nodes]]
id = 1
kind = "supply"
[[nodes]]
id = 2
kind = "withdrawal"
[[edges]]
id = 1
from = 1
to = 2
length_km = {length_km}
diameter_m = 0.5
friction = 0.011
"#
        ))
        .unwrap();
        refine(&net, cap_km * 1000.0).unwrap()
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(pressure(0.0, 0.0, SIGMA1, 4.0 * SIGMA1), 0.0);
        let p = pressure(43.67, 0.0, SIGMA1, 4.0 * SIGMA1);
        assert_relative_eq!(p, 338.38f64.powi(2) * 43.67, max_relative = 1e-15);
        assert!((p - 5.0e6).abs() < 0.01e6);
        let p = pressure(40.0, 1.0, SIGMA1, 4.0 * SIGMA1);
        assert_relative_eq!(p, 6.412e6, max_relative = 1e-4);
    }

    #[test]
    fn concentration_examples() {
        let st = |a: f64, b: f64| MixtureState {
            rho1: vec![a],
            rho2: vec![b],
            flux: vec![],
        };
        assert_relative_eq!(nodal_concentration(&st(36.0, 4.0)).unwrap()[0], 0.1);
        assert_eq!(nodal_concentration(&st(36.0, 0.0)).unwrap()[0], 0.0);
        assert_eq!(nodal_concentration(&st(7.0, 7.0)).unwrap()[0], 0.5);
        assert!(matches!(
            nodal_concentration(&st(0.0, 0.0)),
            Err(Error::ZeroDensity { node: 0 })
        ));
    }

    fn single_segment_flux(rho_in: f64, rho_out: f64) -> f64 {
        let net = pipe(10.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        let bnd = BoundaryValues::from_densities(vec![rho_in], vec![0.0], vec![0.0]).unwrap();
        model
            .solve_edge_flux(&[rho_out], &[0.0], &bnd, &EdgeRatios::unit(1))
            .unwrap()[0]
    }

    #[test]
    fn flux_hand_values() {
        // Δ = σ₁²·5 = 572 505 Pa; φ = √(Δ ρ_out 2D/(λℓ))
        let delta = SIGMA1 * SIGMA1 * 5.0;
        assert_relative_eq!(delta, 572_505.0, max_relative = 1e-6);
        let fwd = single_segment_flux(45.0, 40.0);
        assert_relative_eq!(fwd, (delta * 40.0 / 110.0).sqrt(), max_relative = 1e-14);
        assert!((fwd - 456.3).abs() < 0.05);
        let rev = single_segment_flux(40.0, 45.0);
        assert_relative_eq!(rev, -(delta * 45.0 / 110.0).sqrt(), max_relative = 1e-14);
        assert!((rev + 483.9).abs() < 0.05);
        assert_eq!(single_segment_flux(40.0, 40.0), 0.0);
    }

    #[test]
    fn flux_zeroes_momentum_residual() {
        let net = pipe(10.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        let bnd = BoundaryValues::from_densities(vec![41.0], vec![2.0], vec![0.0]).unwrap();
        let ratios = EdgeRatios {
            inlet: vec![1.3],
            outlet: vec![1.0],
        };
        let flux = model.solve_edge_flux(&[50.0], &[1.0], &bnd, &ratios).unwrap();
        let res = model.momentum_residual(&[50.0], &[1.0], &flux, &bnd, &ratios).unwrap();
        assert!(res[0].abs() <= 1e-12 * 12e6);
        assert!(model.solve_edge_flux(&[0.0], &[0.0], &bnd, &ratios).is_err());
    }

    #[test]
    fn rhs_vanishes_without_hydrogen_source() {
        let net = pipe(50.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        let bnd = BoundaryValues::from_densities(vec![45.0], vec![0.0], vec![0.0, 0.0, 0.0, 0.0, 300.0]).unwrap();
        let rho1 = [44.0, 43.0, 42.5, 41.0, 40.0];
        let ratios = EdgeRatios::unit(5);
        let flux = model.solve_edge_flux(&rho1, &[0.0; 5], &bnd, &ratios).unwrap();
        let rhs = model.density_rhs(&rho1, &[0.0; 5], &bnd, &ratios, &flux).unwrap();
        assert!(rhs[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn balance_telescopes_to_boundary_fluxes() {
        let net = pipe(50.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        let bnd = BoundaryValues::from_densities(vec![40.0], vec![1.5], vec![0.0; 5]).unwrap();
        let rho1 = [39.0, 38.2, 37.0, 36.1, 35.0];
        let rho2 = [1.4, 1.3, 1.31, 1.2, 1.0];
        let ratios = EdgeRatios::unit(5);
        let flux = model.solve_edge_flux(&rho1, &rho2, &bnd, &ratios).unwrap();
        let b = model.balance(&rho1, &rho2, &flux, &bnd).unwrap();
        for m in 0..2 {
            let total: f64 = b[m].iter().sum();
            let inlet = bnd.alpha(0, m) * flux[0];
            assert_relative_eq!(total, inlet, max_relative = 1e-12);
        }
        // with outlet withdrawal w the sum becomes inlet − η_out w
        let bnd = BoundaryValues::from_densities(vec![40.0], vec![1.5], vec![0.0, 0.0, 0.0, 0.0, 250.0]).unwrap();
        let b = model.balance(&rho1, &rho2, &flux, &bnd).unwrap();
        let eta_out = rho2[4] / (rho1[4] + rho2[4]);
        let total: f64 = b[1].iter().sum();
        assert_relative_eq!(total, bnd.alpha2[0] * flux[0] - eta_out * 250.0, max_relative = 1e-12);
    }

    #[test]
    fn steady_state_quiescent_network() {
        let net = refine(
            &parse_network(crate::test_fixtures::CASE_STUDY_NETWORK).unwrap(),
            10_000.0,
        )
        .unwrap();
        let model = MixtureModel::new(&net, &gas());
        let bnd = BoundaryValues::from_pressure(&[5e6], &[0.1], &gas(), vec![0.0; 12]).unwrap();
        let ratios = EdgeRatios::unit(13);
        let ss = model.steady_state(&bnd, &ratios, &SteadyOptions::default()).unwrap();
        let p = ss.state.pressures(&gas());
        assert!(p.iter().all(|&v| (v - 5e6).abs() < 1e-6));
        assert!(ss.state.flux.iter().all(|&f| f.abs() < 1e-9));
        for eta in nodal_concentration(&ss.state).unwrap() {
            assert_relative_eq!(eta, 0.1, max_relative = 1e-12);
        }
    }

    #[test]
    fn steady_state_inverts_flux_example() {
        let net = pipe(10.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        let w = (SIGMA1 * SIGMA1 * 5.0 * 40.0 / 110.0).sqrt();
        let bnd = BoundaryValues::from_densities(vec![45.0], vec![0.0], vec![w]).unwrap();
        let ss = model
            .steady_state(&bnd, &EdgeRatios::unit(1), &SteadyOptions::default())
            .unwrap();
        assert_relative_eq!(ss.state.rho1[0], 40.0, max_relative = 1e-9);
        assert_eq!(ss.state.rho2[0], 0.0);
        assert_relative_eq!(ss.state.flux[0], w, max_relative = 1e-9);
        assert!(ss.residual <= 1e-10);
    }

    #[test]
    fn homogeneous_sound_speeds() {
        let net = pipe(10.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        assert_relative_eq!(homogeneous_reduce(&model, &[0.0]).unwrap().sound_speed(), SIGMA1);
        assert_relative_eq!(
            homogeneous_reduce(&model, &[1.0]).unwrap().sound_speed(),
            4.0 * SIGMA1,
            max_relative = 1e-15
        );
        let h = homogeneous_reduce(&model, &[0.1]).unwrap();
        assert_relative_eq!(h.sound_speed().powi(2), 2.5 * SIGMA1 * SIGMA1, max_relative = 1e-14);
        assert!(matches!(
            homogeneous_reduce(&model, &[0.1, 0.2]),
            Err(Error::NonUniformConcentration { .. })
        ));
    }

    #[test]
    fn homogeneous_flux_matches_mixture_flux() {
        let net = pipe(30.0, 10.0);
        let model = MixtureModel::new(&net, &gas());
        let h = homogeneous_reduce(&model, &[0.1]).unwrap();
        let rho = [44.0, 42.0, 40.0];
        let (r1, r2) = h.partial_densities(&rho);
        let s = 46.0;
        let bnd = BoundaryValues::from_densities(vec![0.9 * s], vec![0.1 * s], vec![0.0, 0.0, 100.0]).unwrap();
        let ratios = EdgeRatios::unit(3);
        let full = model.solve_edge_flux(&r1, &r2, &bnd, &ratios).unwrap();
        let reduced = h.edge_flux(&rho, &[s], &ratios).unwrap();
        for (a, b) in full.iter().zip(&reduced) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        let rf = model.density_rhs(&r1, &r2, &bnd, &ratios, &full).unwrap();
        let rr = h.density_rhs(&rho, &[s], &bnd.w, &ratios).unwrap();
        for j in 0..3 {
            assert_relative_eq!(rf[0][j] + rf[1][j], rr[j], max_relative = 1e-10, epsilon = 1e-14);
        }
    }

    fn case_study_setup() -> (MixtureModel, BoundaryValues, EdgeRatios, Vec<f64>, Vec<f64>) {
        let net = refine(
            &parse_network(crate::test_fixtures::CASE_STUDY_NETWORK).unwrap(),
            10_000.0,
        )
        .unwrap();
        let model = MixtureModel::new(&net, &gas());
        let ratios = model.topology.edge_ratios(&[1.3, 1.15]).unwrap();
        let w: Vec<f64> = (0..12).map(|j| 2.0 + 1.5 * j as f64).collect();
        let bnd = BoundaryValues::from_pressure(&[5e6], &[0.1], &gas(), w).unwrap();
        let rho1: Vec<f64> = (0..12)
            .map(|j| 36.0 - 0.4 * j as f64 + 0.05 * (j * j % 5) as f64)
            .collect();
        let rho2: Vec<f64> = (0..12).map(|j| 1.1 + 0.02 * (j % 3) as f64).collect();
        (model, bnd, ratios, rho1, rho2)
    }

    #[test]
    fn balance_and_momentum_match_matrix_form() {
        let (model, bnd, ratios, rho1, rho2) = case_study_setup();
        let inc = model.topology.incidence(&ratios).unwrap();
        let flux: Vec<f64> = (0..13).map(|k| 50.0 + 13.0 * k as f64 - 3.0 * (k % 4) as f64).collect();
        let eta2 = concentration(&rho1, &rho2).unwrap();
        let b = model.balance(&rho1, &rho2, &flux, &bnd).unwrap();
        let abs_qw_neg = inc.q_w_neg.map(|v| -v);
        let abs_qs_neg = inc.q_s_neg.map(|v| -v);
        for m in 0..2 {
            let eta: Vec<f64> = eta2.iter().map(|e| if m == 0 { 1.0 - e } else { *e }).collect();
            let alpha = vec![bnd.alpha(0, m)];
            let c: Vec<f64> = abs_qw_neg
                .matvec(&eta)
                .iter()
                .zip(abs_qs_neg.matvec(&alpha))
                .zip(&flux)
                .map(|((a, b), f)| (a + b) * f)
                .collect();
            let expect: Vec<f64> = inc
                .q_w
                .tmatvec(&c)
                .iter()
                .zip(&eta)
                .zip(&bnd.w)
                .map(|((q, e), w)| q - e * w)
                .collect();
            for j in 0..12 {
                assert_relative_eq!(b[m][j], expect[j], max_relative = 1e-12, epsilon = 1e-10);
            }
        }
        let mom = model.momentum_residual(&rho1, &rho2, &flux, &bnd, &ratios).unwrap();
        let [a1, a2] = gas().sigma_sq();
        let p1 = inc.m_w.matvec(&rho1);
        let p2 = inc.m_w.matvec(&rho2);
        let s1 = inc.m_s.matvec(&bnd.s1);
        let s2 = inc.m_s.matvec(&bnd.s2);
        let total: Vec<f64> = rho1.iter().zip(&rho2).map(|(a, b)| a + b).collect();
        let out = inc.m_w_pos.matvec(&total);
        let lk: Vec<f64> = inc
            .lengths
            .mul(&inc.friction)
            .matvec(&flux.iter().map(|f| f * f.abs()).collect::<Vec<_>>());
        for k in 0..13 {
            let expect = a1 * (p1[k] + s1[k]) + a2 * (p2[k] + s2[k]) + lk[k] / out[k];
            assert_relative_eq!(mom[k], expect, max_relative = 1e-10, epsilon = 1e-6);
        }
    }

    #[test]
    fn rhs_jacobian_matches_finite_differences() {
        let (model, bnd, ratios, rho1, rho2) = case_study_setup();
        let jac = model.rhs_jacobian(&rho1, &rho2, &bnd, &ratios, 1e-8).unwrap();
        let eval = |r1: &[f64], r2: &[f64]| {
            let flux = model.solve_edge_flux(r1, r2, &bnd, &ratios).unwrap();
            let d = model.density_rhs(r1, r2, &bnd, &ratios, &flux).unwrap();
            [d[0].clone(), d[1].clone()].concat()
        };
        let x: Vec<f64> = [rho1.clone(), rho2.clone()].concat();
        for c in 0..24 {
            let h = 1e-6 * x[c].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let fp = eval(&xp[..12], &xp[12..]);
            let fm = eval(&xm[..12], &xm[12..]);
            for r in 0..24 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!(
                    (jac[(r, c)] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "entry ({r}, {c}): {} vs {fd}",
                    jac[(r, c)]
                );
            }
        }
    }

    #[test]
    fn steady_state_of_case_study_balances_withdrawals() {
        let (model, bnd, ratios, _, _) = case_study_setup();
        let ss = model.steady_state(&bnd, &ratios, &SteadyOptions::default()).unwrap();
        let rhs = model
            .density_rhs(&ss.state.rho1, &ss.state.rho2, &bnd, &ratios, &ss.state.flux)
            .unwrap();
        let scale = 1.0 / 10_000.0;
        assert!(rhs.iter().flatten().all(|v| v.abs() < 1e-8 * scale * 100.0));
        for eta in nodal_concentration(&ss.state).unwrap() {
            assert_relative_eq!(eta, 0.1, max_relative = 1e-9);
        }
        let inj = model
            .net_injection(&ss.state.rho1, &ss.state.rho2, &ss.state.flux, &bnd)
            .unwrap();
        assert!(inj[0].abs() < 1e-7 && inj[1].abs() < 1e-7);
    }
}
