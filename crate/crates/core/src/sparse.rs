//! Minimal compressed sparse row storage used for the incidence family and
//! for assembling Jacobians.

use nalgebra::DMatrix;

/// Coordinate-format accumulator. Duplicate entries are summed on compression.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries.push((row, col, value));
    }

    pub fn to_csr(&self) -> Csr {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut data: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            data.push(v);
            last = Some((r, c));
        }
        for r in 0..self.rows {
            indptr[r + 1] += indptr[r];
        }
        Csr {
            rows: self.rows,
            cols: self.cols,
            indptr,
            indices,
            data,
        }
    }
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: values.to_vec(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[r]..self.indptr[r + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.data[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map(|(_, v)| v).unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `selfᵀ x`.
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Csr {
        let mut t = Triplets::new(self.cols, self.rows);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.push(c, r, v);
            }
        }
        t.to_csr()
    }

    /// Applies `f` to every stored entry, keeping the pattern.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Csr {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Entries passing `keep`, with zeros dropped from the pattern.
    pub fn filter(&self, keep: impl Fn(f64) -> bool) -> Csr {
        let mut t = Triplets::new(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                if keep(v) {
                    t.push(r, c, v);
                }
            }
        }
        t.to_csr()
    }

    /// Column subset, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Csr {
        let mut map = vec![usize::MAX; self.cols];
        for (new, &old) in columns.iter().enumerate() {
            map[old] = new;
        }
        let mut t = Triplets::new(self.rows, columns.len());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                if map[c] != usize::MAX {
                    t.push(r, map[c], v);
                }
            }
        }
        t.to_csr()
    }

    /// Sparse product `self * other`.
    pub fn mul(&self, other: &Csr) -> Csr {
        assert_eq!(self.cols, other.rows);
        let mut t = Triplets::new(self.rows, other.cols);
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    t.push(r, c, a * b);
                }
            }
        }
        t.to_csr()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, 1.0);
        t.push(0, 1, 2.5);
        t.push(1, 0, -1.0);
        let m = t.to_csr();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.5);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn product_and_transpose_match_dense() {
        let mut a = Triplets::new(2, 3);
        a.push(0, 0, 1.0);
        a.push(0, 2, 2.0);
        a.push(1, 1, -3.0);
        let a = a.to_csr();
        let at = a.transpose();
        let p = at.mul(&a);
        let dense = a.to_dense().transpose() * a.to_dense();
        assert_eq!(p.to_dense(), dense);
        assert_eq!(a.tmatvec(&[1.0, 2.0]), vec![1.0, -6.0, 2.0]);
    }
}
