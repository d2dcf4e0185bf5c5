//! Sparse LDLᵀ factorization with 1×1 pivots on a fill-reducing ordering.
//!
//! Intended for quasi-definite KKT matrices; the signs of `D` give the
//! inertia.

const NONE: usize = usize::MAX;

/// Pattern analysis reused across numeric factorizations.
#[derive(Debug, Clone)]
pub struct SymbolicLdl {
    n: usize,
    /// `perm[k]` is the original index of pivot `k`.
    perm: Vec<usize>,
    /// Upper-triangular permuted pattern, compressed by column.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// Slot in the permuted storage of every input entry.
    entry_slot: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl SymbolicLdl {
    /// `entries` lists `(row, col)` positions of a symmetric matrix, each
    /// off-diagonal pair given once in either triangle; repeats are summed.
    pub fn new(n: usize, entries: &[(usize, usize)]) -> Self {
        // full symmetric pattern for the ordering
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(r, c) in entries {
            cols[c].push(r);
            if r != c {
                cols[r].push(c);
            }
        }
        for (j, col) in cols.iter_mut().enumerate() {
            col.push(j);
            col.sort_unstable();
            col.dedup();
        }
        let mut a_p = vec![0usize; n + 1];
        let mut a_i = Vec::new();
        for (j, col) in cols.iter().enumerate() {
            a_i.extend_from_slice(col);
            a_p[j + 1] = a_i.len();
        }
        let perm: Vec<usize> = if n == 0 {
            Vec::new()
        } else {
            match amd::order(n, &a_p, &a_i, &amd::Control::default()) {
                Ok((p, _, _)) => p,
                Err(_) => (0..n).collect(),
            }
        };
        let mut iperm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }

        // permuted upper pattern, diagonal always present
        let mut upper: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mapped: Vec<(usize, usize)> = entries
            .iter()
            .map(|&(r, c)| {
                let (pr, pc) = (iperm[r], iperm[c]);
                (pr.min(pc), pr.max(pc))
            })
            .collect();
        for &(r, c) in &mapped {
            upper[c].push(r);
        }
        for (j, col) in upper.iter_mut().enumerate() {
            col.push(j);
            col.sort_unstable();
            col.dedup();
        }
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::new();
        for (j, col) in upper.iter().enumerate() {
            ai.extend_from_slice(col);
            ap[j + 1] = ai.len();
        }
        let entry_slot = mapped
            .iter()
            .map(|&(r, c)| ap[c] + ai[ap[c]..ap[c + 1]].binary_search(&r).unwrap())
            .collect();

        // elimination tree and column counts
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &ai[ap[j]..ap[j + 1]] {
                let mut i = row;
                while i != j && work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        Self {
            n,
            perm,
            ap,
            ai,
            entry_slot,
            etree,
            lp,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization; `values` follows the entry order given to `new`.
    /// Returns `None` on an exactly zero pivot.
    pub fn factor(&self, values: &[f64]) -> Option<LdlFactor> {
        let n = self.n;
        let mut ax = vec![0.0; self.ai.len()];
        for (&slot, &v) in self.entry_slot.iter().zip(values) {
            ax[slot] += v;
        }
        let nnz = self.lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut d = vec![0.0; n];
        let mut dinv = vec![0.0; n];
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();

        for k in 0..n {
            let mut nnz_y = 0;
            for p in self.ap[k]..self.ap[k + 1] {
                let b = self.ai[p];
                if b == k {
                    d[k] = ax[p];
                    continue;
                }
                y_vals[b] = ax[p];
                if !y_used[b] {
                    y_used[b] = true;
                    elim[0] = b;
                    let mut ne = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_used[next] {
                            break;
                        }
                        y_used[next] = true;
                        elim[ne] = next;
                        ne += 1;
                        next = self.etree[next];
                    }
                    while ne > 0 {
                        ne -= 1;
                        y_idx[nnz_y] = elim[ne];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let slot = next_space[c];
                let yc = y_vals[c];
                for j in self.lp[c]..slot {
                    y_vals[li[j]] -= lx[j] * yc;
                }
                li[slot] = k;
                lx[slot] = yc * dinv[c];
                d[k] -= yc * lx[slot];
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_used[c] = false;
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return None;
            }
            dinv[k] = 1.0 / d[k];
        }
        Some(LdlFactor {
            perm: self.perm.clone(),
            lp: self.lp.clone(),
            li,
            lx,
            d,
        })
    }
}

impl LdlFactor {
    pub fn inertia(&self) -> Inertia {
        let mut out = Inertia {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        for &d in &self.d {
            if d > 0.0 {
                out.positive += 1;
            } else if d < 0.0 {
                out.negative += 1;
            } else {
                out.zero += 1;
            }
        }
        out
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let mut xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                xi -= self.lx[j] * x[self.li[j]];
            }
            x[i] = xi;
        }
        let mut out = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quasidefinite(n: usize, m: usize, seed: u64) -> (Vec<(usize, usize)>, Vec<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = n + m;
        let mut dense = DMatrix::zeros(size, size);
        let mut entries = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            let v = 4.0 + rng.gen::<f64>();
            entries.push((i, i));
            vals.push(v);
            dense[(i, i)] += v;
        }
        for i in 0..m {
            entries.push((n + i, n + i));
            vals.push(-1e-3);
            dense[(n + i, n + i)] -= 1e-3;
        }
        for _ in 0..3 * size {
            let r = rng.gen_range(0..size);
            let c = rng.gen_range(0..size);
            if r == c || (r >= n && c >= n) {
                continue;
            }
            let v: f64 = rng.gen_range(-1.0..1.0);
            entries.push((r, c));
            vals.push(v);
            dense[(r, c)] += v;
            dense[(c, r)] += v;
        }
        (entries, vals, dense)
    }

    #[test]
    fn solves_quasidefinite_systems() {
        for seed in 0..5 {
            let (n, m) = (12, 5);
            let (entries, vals, dense) = random_quasidefinite(n, m, seed);
            let sym = SymbolicLdl::new(n + m, &entries);
            let f = sym.factor(&vals).unwrap();
            let b: Vec<f64> = (0..n + m).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&b);
            let r = &dense * DVector::from_column_slice(&x) - DVector::from_column_slice(&b);
            assert!(r.amax() < 1e-10, "seed {seed}: residual {}", r.amax());
            let eig = dense.symmetric_eigenvalues();
            let inertia = f.inertia();
            assert_eq!(inertia.positive, eig.iter().filter(|&&e| e > 0.0).count());
            assert_eq!(inertia.negative, eig.iter().filter(|&&e| e < 0.0).count());
        }
    }

    #[test]
    fn detects_indefinite_block() {
        // [[-1, 1], [1, -1e-8]] has two negative eigenvalues? det = 1e-8 - 1 < 0: one each
        let sym = SymbolicLdl::new(2, &[(0, 0), (1, 1), (0, 1)]);
        let f = sym.factor(&[-1.0, -1e-8, 1.0]).unwrap();
        assert_eq!(f.inertia().positive, 1);
        assert_eq!(f.inertia().negative, 1);
        assert!(sym.factor(&[0.0, 1.0, 0.0]).is_none());
    }
}
