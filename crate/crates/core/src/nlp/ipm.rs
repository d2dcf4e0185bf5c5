//! Primal-dual barrier method with slack variables for inequality rows,
//! inertia-corrected sparse KKT solves and an exact-penalty line search.

use std::time::Instant;

use log::debug;

use super::ldl::{LdlFactor, SymbolicLdl};
use super::{Curvature, Nlp, NlpResult, SolveStatus, SolverOptions};
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
const KAPPA_EPS: f64 = 10.0;
const KAPPA_MU: f64 = 0.2;
const THETA_MU: f64 = 1.5;
const KAPPA_SIGMA: f64 = 1e10;
const DELTA_C: f64 = 1e-10;
const MAX_REGULARIZATION: f64 = 1e6;
const ARMIJO: f64 = 1e-4;

/// Solves `problem` from `x0`. Errors are returned only when the starting
/// point cannot be evaluated; solver failures are reported in the status.
pub fn solve<P: Nlp + ?Sized>(problem: &P, x0: &[f64], opts: &SolverOptions) -> Result<NlpResult> {
    let start = Instant::now();
    if x0.len() != problem.num_vars() {
        return Err(Error::InvalidInput(format!(
            "start has {} entries for {} variables",
            x0.len(),
            problem.num_vars()
        )));
    }
    if !(opts.tol_kkt > 0.0 && opts.tol_feas > 0.0 && opts.max_iter >= 1) {
        return Err(Error::InvalidInput("solver tolerances must be positive".into()));
    }
    let mut solver = Solver::new(problem, opts)?;
    let mut result = solver.run(x0)?;
    result.wall_time = start.elapsed();
    Ok(result)
}

/// Where a KKT matrix entry takes its value from.
#[derive(Debug, Clone, Copy)]
enum KktSource {
    /// Diagonal of free primal variable (position in `free`).
    Diagonal(usize),
    /// Entry of the Hessian approximation.
    Hessian(usize),
    /// Problem Jacobian entry.
    Jacobian(usize),
    /// Slack column of an inequality row.
    Slack,
    /// Constraint regularization.
    Dual,
}

struct Eval {
    f: f64,
    /// Objective gradient over `x`.
    grad: Vec<f64>,
    /// `[c(x); d(x) − s]`.
    cons: Vec<f64>,
}

struct Solver<'a, P: Nlp + ?Sized> {
    p: &'a P,
    opts: &'a SolverOptions,
    n: usize,
    me: usize,
    mi: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Free primal positions (x then slacks).
    free: Vec<usize>,
    pos: Vec<usize>,
    jac_pattern: Vec<(usize, usize)>,
    hess_pattern: Vec<(usize, usize)>,
    kkt_entries: Vec<(usize, usize)>,
    kkt_sources: Vec<KktSource>,
    symbolic: SymbolicLdl,
    colors: Vec<Vec<usize>>,
    hess_by_col_group: Vec<Vec<usize>>,
    hess_by_row_group: Vec<Vec<usize>>,
    curvature: Curvature,
    /// Dense quasi-Newton matrix over `x`.
    bfgs: Vec<f64>,
    last_delta_w: f64,
}

impl<'a, P: Nlp + ?Sized> Solver<'a, P> {
    fn new(p: &'a P, opts: &'a SolverOptions) -> Result<Self> {
        let n = p.num_vars();
        let me = p.num_eq();
        let mi = p.num_ineq();
        let (xl, xu) = p.var_bounds();
        let (dl, du) = p.ineq_bounds();
        if xl.len() != n || xu.len() != n || dl.len() != mi || du.len() != mi {
            return Err(Error::InvalidInput("bound dimensions do not match the problem".into()));
        }
        let lower: Vec<f64> = xl.into_iter().chain(dl).collect();
        let upper: Vec<f64> = xu.into_iter().chain(du).collect();
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidInput("lower bound exceeds upper bound".into()));
        }
        let mut free = Vec::new();
        let mut pos = vec![NONE; n + mi];
        for i in 0..n + mi {
            if lower[i] != upper[i] {
                pos[i] = free.len();
                free.push(i);
            }
        }
        let jac_pattern = p.jacobian_structure();
        if jac_pattern.iter().any(|&(r, c)| r >= me + mi || c >= n) {
            return Err(Error::InvalidInput("Jacobian pattern out of range".into()));
        }

        let mut curvature = opts.curvature;
        if curvature == Curvature::GaussNewton {
            let probe = p.hessian_structure().is_some() && p.gauss_newton(&vec![0.0; n], &vec![0.0; me + mi]).is_some();
            if !probe {
                curvature = Curvature::QuasiNewton;
            }
        }
        let supplied = match curvature {
            Curvature::QuasiNewton => None,
            _ => p.hessian_structure(),
        };
        let hess_pattern: Vec<(usize, usize)> = match &supplied {
            Some(pat) => pat
                .iter()
                .map(|&(r, c)| (r.max(c), r.min(c)))
                .filter(|&(r, c)| pos[r] != NONE && pos[c] != NONE)
                .collect(),
            None => {
                let fx: Vec<usize> = (0..n).filter(|&i| pos[i] != NONE).collect();
                let mut v = Vec::new();
                for (a, &i) in fx.iter().enumerate() {
                    for &j in &fx[..=a] {
                        v.push((i, j));
                    }
                }
                v
            }
        };
        let mut hess_pattern = hess_pattern;
        hess_pattern.sort_unstable();
        hess_pattern.dedup();

        let nf = free.len();
        let mut kkt_entries = Vec::new();
        let mut kkt_sources = Vec::new();
        for (a, _) in free.iter().enumerate() {
            kkt_entries.push((a, a));
            kkt_sources.push(KktSource::Diagonal(a));
        }
        for (e, &(r, c)) in hess_pattern.iter().enumerate() {
            kkt_entries.push((pos[r], pos[c]));
            kkt_sources.push(KktSource::Hessian(e));
        }
        for (e, &(r, c)) in jac_pattern.iter().enumerate() {
            if pos[c] != NONE {
                kkt_entries.push((nf + r, pos[c]));
                kkt_sources.push(KktSource::Jacobian(e));
            }
        }
        for i in 0..mi {
            if pos[n + i] != NONE {
                kkt_entries.push((nf + me + i, pos[n + i]));
                kkt_sources.push(KktSource::Slack);
            }
        }
        for r in 0..me + mi {
            kkt_entries.push((nf + r, nf + r));
            kkt_sources.push(KktSource::Dual);
        }
        let symbolic = SymbolicLdl::new(nf + me + mi, &kkt_entries);

        let (colors, by_col, by_row) = if curvature == Curvature::FiniteDifference {
            color_hessian(n, &hess_pattern)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        let bfgs = if curvature == Curvature::QuasiNewton {
            let mut b = vec![0.0; n * n];
            for i in 0..n {
                b[i * n + i] = 1.0;
            }
            b
        } else {
            Vec::new()
        };
        debug!(
            "KKT system: {} primal, {} dual, {} entries, {} factor nonzeros, {} colours",
            nf,
            me + mi,
            kkt_entries.len(),
            symbolic.factor_nnz(),
            colors.len()
        );
        Ok(Self {
            p,
            opts,
            n,
            me,
            mi,
            lower,
            upper,
            free,
            pos,
            jac_pattern,
            hess_pattern,
            kkt_entries,
            kkt_sources,
            symbolic,
            colors,
            hess_by_col_group: by_col,
            hess_by_row_group: by_row,
            curvature,
            bfgs,
            last_delta_w: 0.0,
        })
    }

    fn m(&self) -> usize {
        self.me + self.mi
    }

    fn has_lower(&self, i: usize) -> bool {
        self.pos[i] != NONE && self.lower[i].is_finite()
    }

    fn has_upper(&self, i: usize) -> bool {
        self.pos[i] != NONE && self.upper[i].is_finite()
    }

    fn push_into_bounds(&self, i: usize, v: f64) -> f64 {
        let (l, u) = (self.lower[i], self.upper[i]);
        if l == u {
            return l;
        }
        let k = self.opts.bound_push;
        let mut v = v;
        let width = if l.is_finite() && u.is_finite() {
            u - l
        } else {
            f64::INFINITY
        };
        if l.is_finite() {
            let push = (k * l.abs().max(1.0)).min(k * width);
            v = v.max(l + push);
        }
        if u.is_finite() {
            let push = (k * u.abs().max(1.0)).min(k * width);
            v = v.min(u - push);
        }
        v
    }

    fn evaluate(&self, w: &[f64]) -> Result<Eval> {
        let x = &w[..self.n];
        let f = self.p.objective(x)?;
        let mut grad = vec![0.0; self.n];
        self.p.gradient(x, &mut grad)?;
        let mut cons = vec![0.0; self.m()];
        self.p.eq_constraints(x, &mut cons[..self.me])?;
        self.p.ineq_constraints(x, &mut cons[self.me..])?;
        for i in 0..self.mi {
            cons[self.me + i] -= w[self.n + i];
        }
        if !f.is_finite() || grad.iter().chain(&cons).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite problem evaluation".into()));
        }
        Ok(Eval { f, grad, cons })
    }

    fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.jac_pattern.len()];
        self.p.jacobian_values(x, &mut v)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite Jacobian entry".into()));
        }
        Ok(v)
    }

    /// `Jᵀ y` over the primal space `(x, s)`.
    fn jt_mul(&self, jac: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n + self.mi];
        for (&(r, c), &v) in self.jac_pattern.iter().zip(jac) {
            out[c] += v * y[r];
        }
        for i in 0..self.mi {
            out[self.n + i] -= y[self.me + i];
        }
        out
    }

    fn barrier_value(&self, w: &[f64], f: f64, mu: f64) -> f64 {
        let mut v = f;
        for &i in &self.free {
            if self.lower[i].is_finite() {
                v -= mu * (w[i] - self.lower[i]).ln();
            }
            if self.upper[i].is_finite() {
                v -= mu * (self.upper[i] - w[i]).ln();
            }
        }
        v
    }

    fn barrier_gradient(&self, w: &[f64], grad: &[f64], mu: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.n + self.mi];
        g[..self.n].copy_from_slice(grad);
        for &i in &self.free {
            if self.lower[i].is_finite() {
                g[i] -= mu / (w[i] - self.lower[i]);
            }
            if self.upper[i].is_finite() {
                g[i] += mu / (self.upper[i] - w[i]);
            }
        }
        g
    }

    /// Scaled optimality error for barrier parameter `mu`.
    fn optimality_error(
        &self,
        w: &[f64],
        ev: &Eval,
        jac: &[f64],
        y: &[f64],
        zl: &[f64],
        zu: &[f64],
        mu: f64,
    ) -> (f64, f64, f64, f64) {
        let jty = self.jt_mul(jac, y);
        let mut dual: f64 = 0.0;
        let mut compl: f64 = 0.0;
        let mut z_sum = 0.0;
        let mut z_count = 0usize;
        for &i in &self.free {
            let g = if i < self.n { ev.grad[i] } else { 0.0 };
            dual = dual.max((g + jty[i] - zl[i] + zu[i]).abs());
            if self.lower[i].is_finite() {
                compl = compl.max(((w[i] - self.lower[i]) * zl[i] - mu).abs());
                z_sum += zl[i];
                z_count += 1;
            }
            if self.upper[i].is_finite() {
                compl = compl.max(((self.upper[i] - w[i]) * zu[i] - mu).abs());
                z_sum += zu[i];
                z_count += 1;
            }
        }
        let y_sum: f64 = y.iter().map(|v| v.abs()).sum();
        let s_max = 100.0;
        let s_d = ((y_sum + z_sum) / (self.m() + z_count).max(1) as f64).max(s_max) / s_max;
        let primal = ev.cons.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let dual = dual / s_d;
        (dual.max(primal).max(compl), dual, primal, compl)
    }

    fn lagrangian_gradient(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.n];
        self.p.gradient(x, &mut g)?;
        let jac = self.jacobian(x)?;
        for (&(r, c), &v) in self.jac_pattern.iter().zip(&jac) {
            g[c] += v * y[r];
        }
        Ok(g)
    }

    fn hessian(&mut self, x: &[f64], y: &[f64], grad: &[f64], jac: &[f64]) -> Result<Vec<f64>> {
        match self.curvature {
            Curvature::FiniteDifference => {
                let mut base = grad.to_vec();
                for (&(r, c), &v) in self.jac_pattern.iter().zip(jac) {
                    base[c] += v * y[r];
                }
                let mut acc = vec![0.0; self.hess_pattern.len()];
                let mut xp = x.to_vec();
                for (g, group) in self.colors.iter().enumerate() {
                    let steps: Vec<f64> = group.iter().map(|&c| 1.5e-8 * x[c].abs().max(1.0)).collect();
                    for (&c, &h) in group.iter().zip(&steps) {
                        xp[c] = x[c] + h;
                    }
                    let gp = self.lagrangian_gradient(&xp, y)?;
                    for &c in group {
                        xp[c] = x[c];
                    }
                    let step_of = |c: usize| steps[group.binary_search(&c).unwrap()];
                    for &e in &self.hess_by_col_group[g] {
                        let (r, c) = self.hess_pattern[e];
                        acc[e] += (gp[r] - base[r]) / step_of(c);
                    }
                    for &e in &self.hess_by_row_group[g] {
                        let (r, c) = self.hess_pattern[e];
                        acc[e] += (gp[c] - base[c]) / step_of(r);
                    }
                }
                for (e, &(r, c)) in self.hess_pattern.iter().enumerate() {
                    if r != c {
                        acc[e] *= 0.5;
                    }
                }
                Ok(acc)
            }
            Curvature::GaussNewton => self
                .p
                .gauss_newton(x, y)
                .map(|v| {
                    // values follow the problem's pattern; remap onto ours
                    let pat = self.p.hessian_structure().unwrap_or_default();
                    let mut out = vec![0.0; self.hess_pattern.len()];
                    for (&(r, c), &val) in pat.iter().zip(&v) {
                        let key = (r.max(c), r.min(c));
                        if let Ok(e) = self.hess_pattern.binary_search(&key) {
                            out[e] += val;
                        }
                    }
                    out
                })
                .ok_or_else(|| Error::InvalidInput("Gauss-Newton term unavailable".into())),
            Curvature::QuasiNewton => Ok(self
                .hess_pattern
                .iter()
                .map(|&(r, c)| self.bfgs[r * self.n + c])
                .collect()),
        }
    }

    fn bfgs_update(&mut self, s: &[f64], yv: &[f64]) {
        let n = self.n;
        let bs: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.bfgs[i * n + j] * s[j]).sum())
            .collect();
        let sbs: f64 = s.iter().zip(&bs).map(|(a, b)| a * b).sum();
        let sy: f64 = s.iter().zip(yv).map(|(a, b)| a * b).sum();
        if !(sbs > 1e-300) {
            return;
        }
        let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
        let r: Vec<f64> = yv.iter().zip(&bs).map(|(y, b)| theta * y + (1.0 - theta) * b).collect();
        let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
        if !(sr > 1e-300) {
            return;
        }
        for i in 0..n {
            for j in 0..n {
                self.bfgs[i * n + j] += r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
            }
        }
    }

    fn kkt_values(&self, sigma: &[f64], hess: &[f64], jac: &[f64], delta_w: f64, delta_c: f64) -> Vec<f64> {
        self.kkt_sources
            .iter()
            .map(|src| match *src {
                KktSource::Diagonal(a) => sigma[self.free[a]] + delta_w,
                KktSource::Hessian(e) => hess[e],
                KktSource::Jacobian(e) => jac[e],
                KktSource::Slack => -1.0,
                KktSource::Dual => -delta_c,
            })
            .collect()
    }

    fn kkt_matvec(&self, vals: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (&(r, c), &a) in self.kkt_entries.iter().zip(vals) {
            out[r] += a * v[c];
            if r != c {
                out[c] += a * v[r];
            }
        }
        out
    }

    /// Factorizes with inertia correction; returns the factor, the matrix
    /// values used and the primal regularization.
    fn factor_kkt(
        &mut self,
        sigma: &[f64],
        hess: &[f64],
        jac: &[f64],
        min_delta: f64,
    ) -> Option<(LdlFactor, Vec<f64>, f64)> {
        let nf = self.free.len();
        let m = self.m();
        let good = |f: &LdlFactor| {
            let i = f.inertia();
            i.positive == nf && i.negative == m && i.zero == 0
        };
        let mut delta_w = min_delta;
        if delta_w == 0.0 {
            let vals = self.kkt_values(sigma, hess, jac, 0.0, DELTA_C);
            if let Some(f) = self.symbolic.factor(&vals) {
                if good(&f) {
                    return Some((f, vals, 0.0));
                }
            }
            delta_w = if self.last_delta_w == 0.0 {
                self.opts.regularization_floor
            } else {
                (self.last_delta_w / 3.0).max(self.opts.regularization_floor)
            };
        }
        while delta_w <= MAX_REGULARIZATION {
            let vals = self.kkt_values(sigma, hess, jac, delta_w, DELTA_C);
            if let Some(f) = self.symbolic.factor(&vals) {
                if good(&f) {
                    self.last_delta_w = delta_w;
                    return Some((f, vals, delta_w));
                }
            }
            delta_w *= 10.0;
        }
        None
    }

    fn solve_kkt(&self, factor: &LdlFactor, vals: &[f64], rhs: &[f64]) -> Vec<f64> {
        let mut x = factor.solve(rhs);
        for _ in 0..3 {
            let kx = self.kkt_matvec(vals, &x);
            let r: Vec<f64> = rhs.iter().zip(&kx).map(|(a, b)| a - b).collect();
            let rn = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let bn = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if rn <= 1e-14 * bn.max(1.0) {
                break;
            }
            let d = factor.solve(&r);
            x.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        x
    }

    fn fraction_to_boundary(&self, w: &[f64], dw: &[f64], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for &i in &self.free {
            if self.lower[i].is_finite() && dw[i] < 0.0 {
                alpha = alpha.min(-tau * (w[i] - self.lower[i]) / dw[i]);
            }
            if self.upper[i].is_finite() && dw[i] > 0.0 {
                alpha = alpha.min(tau * (self.upper[i] - w[i]) / dw[i]);
            }
        }
        alpha
    }

    fn dual_fraction(&self, z: &[f64], dz: &[f64], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for (&zi, &d) in z.iter().zip(dz) {
            if d < 0.0 && zi > 0.0 {
                alpha = alpha.min(-tau * zi / d);
            }
        }
        alpha
    }

    fn run(&mut self, x0: &[f64]) -> Result<NlpResult> {
        let n = self.n;
        let me = self.me;
        let mi = self.mi;
        let nw = n + mi;
        let m = self.m();
        let nf = self.free.len();
        let opts = self.opts;

        let mut w = vec![0.0; nw];
        for i in 0..n {
            w[i] = self.push_into_bounds(i, x0[i]);
        }
        {
            let mut d = vec![0.0; mi];
            self.p.ineq_constraints(&w[..n], &mut d)?;
            for i in 0..mi {
                w[n + i] = self.push_into_bounds(n + i, d[i]);
            }
        }
        let mut zl: Vec<f64> = (0..nw).map(|i| if self.has_lower(i) { 1.0 } else { 0.0 }).collect();
        let mut zu: Vec<f64> = (0..nw).map(|i| if self.has_upper(i) { 1.0 } else { 0.0 }).collect();
        let mut ev = self.evaluate(&w)?;
        let mut jac = self.jacobian(&w[..n])?;

        // least-squares multiplier estimate
        let mut y = vec![0.0; m];
        if m > 0 {
            let ones = vec![1.0; nw];
            let zero_h = vec![0.0; self.hess_pattern.len()];
            let vals = self.kkt_values(&ones, &zero_h, &jac, 0.0, 1e-8);
            if let Some(f) = self.symbolic.factor(&vals) {
                let mut rhs = vec![0.0; nf + m];
                for (a, &i) in self.free.iter().enumerate() {
                    let g = if i < n { ev.grad[i] } else { 0.0 };
                    rhs[a] = -(g - zl[i] + zu[i]);
                }
                let sol = self.solve_kkt(&f, &vals, &rhs);
                let cand = &sol[nf..];
                if cand.iter().all(|v| v.abs() <= 1e3) {
                    y.copy_from_slice(cand);
                }
            }
        }

        let mu_min = opts.tol_kkt / 10.0;
        let mut mu = opts.mu_init;
        let mut tau = (1.0 - mu).max(0.99);
        let mut nu: f64 = 1.0;
        let mut status = SolveStatus::IterationCap;
        let mut iterations = 0;
        let mut min_delta = 0.0;
        let mut reg_retries = 0;
        let mut tiny_steps = 0;
        let mut last_alpha = 0.0;
        loop {
            let (e0, _, primal, _) = self.optimality_error(&w, &ev, &jac, &y, &zl, &zu, 0.0);
            if opts.verbose {
                eprintln!(
                    "iter {iterations:4}  obj {:+.8e}  inf_pr {primal:.2e}  kkt {e0:.2e}  alpha {last_alpha:.2e}  mu {mu:.2e}  reg {:.1e}",
                    ev.f, self.last_delta_w
                );
            }
            if e0 <= opts.tol_kkt && primal <= opts.tol_feas {
                status = SolveStatus::Converged;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }
            // monotone barrier update
            loop {
                let (emu, ..) = self.optimality_error(&w, &ev, &jac, &y, &zl, &zu, mu);
                if mu <= mu_min || emu > KAPPA_EPS * mu {
                    break;
                }
                mu = mu_min.max((KAPPA_MU * mu).min(mu.powf(THETA_MU)));
                tau = (1.0 - mu).max(0.99);
                nu = nu.max(1.0);
            }

            let sigma: Vec<f64> = (0..nw)
                .map(|i| {
                    let mut s = 0.0;
                    if self.has_lower(i) {
                        s += zl[i] / (w[i] - self.lower[i]);
                    }
                    if self.has_upper(i) {
                        s += zu[i] / (self.upper[i] - w[i]);
                    }
                    s
                })
                .collect();
            let hess = match self.hessian(&w[..n], &y, &ev.grad, &jac) {
                Ok(h) => h,
                Err(_) => {
                    status = SolveStatus::NumericalFailure;
                    break;
                }
            };
            let Some((factor, vals, delta_w)) = self.factor_kkt(&sigma, &hess, &jac, min_delta) else {
                status = SolveStatus::NumericalFailure;
                break;
            };
            let gphi = self.barrier_gradient(&w, &ev.grad, mu);
            let jty = self.jt_mul(&jac, &y);
            let mut rhs = vec![0.0; nf + m];
            for (a, &i) in self.free.iter().enumerate() {
                rhs[a] = -(gphi[i] + jty[i]);
            }
            for r in 0..m {
                rhs[nf + r] = -ev.cons[r];
            }
            let sol = self.solve_kkt(&factor, &vals, &rhs);
            let mut dw = vec![0.0; nw];
            for (a, &i) in self.free.iter().enumerate() {
                dw[i] = sol[a];
            }
            let dy = &sol[nf..];
            let mut dzl = vec![0.0; nw];
            let mut dzu = vec![0.0; nw];
            for &i in &self.free {
                if self.lower[i].is_finite() {
                    let gap = w[i] - self.lower[i];
                    dzl[i] = mu / gap - zl[i] - zl[i] / gap * dw[i];
                }
                if self.upper[i].is_finite() {
                    let gap = self.upper[i] - w[i];
                    dzu[i] = mu / gap - zu[i] + zu[i] / gap * dw[i];
                }
            }

            // penalty parameter
            let c_norm: f64 = ev.cons.iter().map(|v| v.abs()).sum();
            let gd: f64 = gphi.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let mut curv = 0.0;
            {
                let full: Vec<f64> = {
                    let mut v = vec![0.0; nf + m];
                    for (a, &i) in self.free.iter().enumerate() {
                        v[a] = dw[i];
                    }
                    v
                };
                let kv = self.kkt_matvec(&vals, &full);
                for a in 0..nf {
                    curv += full[a] * kv[a];
                }
            }
            if c_norm > 0.0 {
                let needed = (gd + 0.5 * curv.max(0.0)) / (0.9 * c_norm);
                if needed > nu {
                    nu = needed.max(nu * 1.5);
                }
            }
            let merit = |s: &Self, w: &[f64], e: &Eval| {
                s.barrier_value(w, e.f, mu) + nu * e.cons.iter().map(|v| v.abs()).sum::<f64>()
            };
            let phi0 = merit(self, &w, &ev);
            let dmerit = gd - nu * c_norm;

            let alpha_max = self.fraction_to_boundary(&w, &dw, tau);
            let alpha_z = self
                .dual_fraction(&zl, &dzl, tau)
                .min(self.dual_fraction(&zu, &dzu, tau));
            let tiny = dw
                .iter()
                .zip(&w)
                .all(|(d, x)| d.abs() <= 10.0 * f64::EPSILON * (1.0 + x.abs()));

            let mut accepted: Option<(Vec<f64>, Eval, f64)> = None;
            if tiny {
                let trial: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + alpha_max * b).collect();
                if let Ok(e) = self.evaluate(&trial) {
                    accepted = Some((trial, e, alpha_max));
                }
                tiny_steps += 1;
            } else {
                tiny_steps = 0;
                let mut alpha = alpha_max;
                let mut first = true;
                while alpha > 1e-14 {
                    let trial: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + alpha * b).collect();
                    if let Ok(e) = self.evaluate(&trial) {
                        if merit(self, &trial, &e) <= phi0 + ARMIJO * alpha * dmerit {
                            accepted = Some((trial, e, alpha));
                            break;
                        }
                        if first && alpha == alpha_max && m > 0 {
                            // second-order correction for the constraint curvature
                            let mut rhs2 = vec![0.0; nf + m];
                            for r in 0..m {
                                rhs2[nf + r] = -e.cons[r];
                            }
                            let corr = self.solve_kkt(&factor, &vals, &rhs2);
                            let mut dsoc = dw.clone();
                            for (a, &i) in self.free.iter().enumerate() {
                                dsoc[i] += corr[a];
                            }
                            let a_soc = self.fraction_to_boundary(&w, &dsoc, tau);
                            let soc: Vec<f64> = w.iter().zip(&dsoc).map(|(a, b)| a + a_soc * b).collect();
                            if let Ok(es) = self.evaluate(&soc) {
                                if merit(self, &soc, &es) <= phi0 + ARMIJO * alpha * dmerit {
                                    accepted = Some((soc, es, alpha));
                                    break;
                                }
                            }
                        }
                    }
                    first = false;
                    alpha *= 0.5;
                }
            }
            let Some((w_new, ev_new, alpha)) = accepted else {
                if reg_retries < 4 {
                    reg_retries += 1;
                    min_delta = (delta_w * 100.0).max(1e-4);
                    continue;
                }
                status = SolveStatus::NumericalFailure;
                break;
            };
            reg_retries = 0;
            min_delta = 0.0;
            last_alpha = alpha;
            let jac_new = match self.jacobian(&w_new[..n]) {
                Ok(j) => j,
                Err(_) => {
                    status = SolveStatus::NumericalFailure;
                    break;
                }
            };
            let y_new: Vec<f64> = y.iter().zip(dy).map(|(a, b)| a + alpha * b).collect();
            if self.curvature == Curvature::QuasiNewton {
                let s: Vec<f64> = (0..n).map(|i| w_new[i] - w[i]).collect();
                let mut g_new = ev_new.grad.clone();
                let mut g_old = ev.grad.clone();
                for (&(r, c), (&a, &b)) in self.jac_pattern.iter().zip(jac_new.iter().zip(&jac)) {
                    g_new[c] += a * y_new[r];
                    g_old[c] += b * y_new[r];
                }
                let yv: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
                self.bfgs_update(&s, &yv);
            }
            w = w_new;
            ev = ev_new;
            jac = jac_new;
            y = y_new;
            for &i in &self.free {
                if self.lower[i].is_finite() {
                    let gap = w[i] - self.lower[i];
                    zl[i] = (zl[i] + alpha_z * dzl[i]).clamp(mu / (KAPPA_SIGMA * gap), KAPPA_SIGMA * mu / gap);
                }
                if self.upper[i].is_finite() {
                    let gap = self.upper[i] - w[i];
                    zu[i] = (zu[i] + alpha_z * dzu[i]).clamp(mu / (KAPPA_SIGMA * gap), KAPPA_SIGMA * mu / gap);
                }
            }
            if tiny_steps >= 2 && mu > mu_min {
                mu = mu_min.max((KAPPA_MU * mu).min(mu.powf(THETA_MU)));
                tau = (1.0 - mu).max(0.99);
            }
            iterations += 1;
        }

        let (e0, _, primal, _) = self.optimality_error(&w, &ev, &jac, &y, &zl, &zu, 0.0);
        Ok(NlpResult {
            status,
            x: w[..n].to_vec(),
            y_eq: y[..me].to_vec(),
            y_ineq: y[me..].to_vec(),
            z_lower: zl[..n].to_vec(),
            z_upper: zu[..n].to_vec(),
            slacks: w[n..].to_vec(),
            objective: ev.f,
            kkt_residual: e0,
            constraint_violation: primal,
            iterations,
            wall_time: Default::default(),
        })
    }
}

/// Distance-2 colouring of the symmetric Hessian pattern so each colour's
/// columns can be perturbed together; also returns, per colour, the pattern
/// entries recovered from its column and from its row.
fn color_hessian(n: usize, pattern: &[(usize, usize)]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut active = vec![false; n];
    for &(r, c) in pattern {
        active[r] = true;
        active[c] = true;
        adj[r].push(c);
        adj[c].push(r);
    }
    for (i, a) in adj.iter_mut().enumerate() {
        a.push(i);
        a.sort_unstable();
        a.dedup();
    }
    let mut color = vec![NONE; n];
    let mut num_colors = 0;
    let mut forbidden_stamp: Vec<usize> = Vec::new();
    for c in 0..n {
        if !active[c] {
            continue;
        }
        for &r in &adj[c] {
            for &c2 in &adj[r] {
                let k = color[c2];
                if k != NONE {
                    forbidden_stamp[k] = c + 1;
                }
            }
        }
        let k = (0..num_colors)
            .find(|&k| forbidden_stamp[k] != c + 1)
            .unwrap_or_else(|| {
                num_colors += 1;
                forbidden_stamp.push(0);
                num_colors - 1
            });
        color[c] = k;
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_colors];
    for c in 0..n {
        if color[c] != NONE {
            groups[color[c]].push(c);
        }
    }
    let mut by_col = vec![Vec::new(); num_colors];
    let mut by_row = vec![Vec::new(); num_colors];
    for (e, &(r, c)) in pattern.iter().enumerate() {
        by_col[color[c]].push(e);
        if r != c {
            by_row[color[r]].push(e);
        }
    }
    (groups, by_col, by_row)
}
