//! Dense vector helpers and a compressed-sparse-row matrix.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for v in x {
        *v *= alpha;
    }
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn nnz(x: &[f64]) -> usize {
    x.iter().filter(|v| **v != 0.0).count()
}

/// Row-major sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from rows of `(column, value)` pairs. Columns within a row must be
    /// strictly increasing and below `n_cols`.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(j, v) in row {
                debug_assert!(j < n_cols);
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self { n_cols, indptr, indices, values }
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, v)| v * x[j]).sum()
    }

    pub fn row_norm_sq(&self, i: usize) -> f64 {
        self.row(i).1.iter().map(|v| v * v).sum()
    }

    /// `out += alpha * row_i`
    pub fn row_axpy(&self, i: usize, alpha: f64, out: &mut [f64]) {
        let (idx, val) = self.row(i);
        for (&j, v) in idx.iter().zip(val) {
            out[j] += alpha * v;
        }
    }

    /// Rows selected by `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = idx
            .iter()
            .map(|&i| {
                let (c, v) = self.row(i);
                c.iter().copied().zip(v.iter().copied()).collect()
            })
            .collect();
        Self::from_rows(self.n_cols, &rows)
    }

    /// `A^T A v`
    pub fn gram_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for i in 0..self.n_rows() {
            let m = self.row_dot(i, v);
            if m != 0.0 {
                self.row_axpy(i, m, &mut out);
            }
        }
        out
    }

    /// Largest eigenvalue of `A^T A` by power iteration from the normalized
    /// all-ones vector. Stops once successive Rayleigh quotients agree to
    /// `rel_tol` or after `max_iter` products.
    pub fn gram_lambda_max(&self, rel_tol: f64, max_iter: usize) -> f64 {
        let d = self.n_cols;
        if d == 0 || self.nnz() == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let w = self.gram_apply(&v);
            let next = dot(&v, &w);
            let norm = norm_sq(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v = w.into_iter().map(|x| x / norm).collect();
            if (next - lambda).abs() <= rel_tol * next.abs() {
                return next.max(lambda);
            }
            lambda = next;
        }
        lambda
    }
}
