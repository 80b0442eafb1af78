//! Dense symmetric linear algebra built on a Cholesky factorization.
//!
//! Everything the fitting code needs from a symmetric positive-definite
//! matrix goes through [`CholeskyFactor`]: solves, inverses and
//! log-determinants. Determinants are always taken from the factor,
//! never expanded directly.

use ndarray::{Array1, Array2};

use crate::error::{ModelError, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Stored row-major with the strict upper triangle zeroed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    l: Vec<f64>,
}

/// Factorizes a symmetric positive-definite matrix, reading its lower triangle.
pub fn cholesky(a: &Array2<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = vec![0.0_f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            // dot of the already-computed prefixes of rows i and j
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            for (x, y) in ri.iter().zip(rj) {
                s -= x * y;
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(ModelError::NotPositiveDefinite(format!(
                        "non-positive pivot {s:.3e} at column {i}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(CholeskyFactor { n, l })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// log det(A) = 2 * sum(ln L_ii)
    pub fn log_det(&self) -> f64 {
        let n = self.n;
        (0..n).map(|i| self.l[i * n + i].ln()).sum::<f64>() * 2.0
    }

    /// Solves A x = b.
    pub fn solve_vec(&self, b: &Array1<f64>) -> Array1<f64> {
        let mut buf: Vec<f64> = b.to_vec();
        self.forward_solve(&mut buf, 1);
        self.backward_solve(&mut buf, 1);
        Array1::from_vec(buf)
    }

    /// Solves A X = B column-wise for a full right-hand-side matrix.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let m = b.ncols();
        let mut buf: Vec<f64> = b.iter().cloned().collect();
        self.forward_solve(&mut buf, m);
        self.backward_solve(&mut buf, m);
        Array2::from_shape_vec((self.n, m), buf).expect("solve_mat shape")
    }

    /// A^{-1}, symmetrized against round-off.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.n;
        let mut buf = vec![0.0_f64; n * n];
        for i in 0..n {
            buf[i * n + i] = 1.0;
        }
        self.forward_solve(&mut buf, n);
        self.backward_solve(&mut buf, n);
        let mut inv = Array2::from_shape_vec((n, n), buf).expect("inverse shape");
        symmetrize(&mut inv);
        inv
    }

    /// Tr(A^{-1} M).
    pub fn trace_solve(&self, m: &Array2<f64>) -> f64 {
        let k = m.ncols();
        let mut buf: Vec<f64> = m.iter().cloned().collect();
        self.forward_solve(&mut buf, k);
        self.backward_solve(&mut buf, k);
        (0..self.n.min(k)).map(|i| buf[i * k + i]).sum()
    }

    /// L z, mapping iid standard normals to a draw from N(0, A).
    pub fn lower_times(&self, z: &Array1<f64>) -> Array1<f64> {
        let n = self.n;
        let mut out = Array1::zeros(n);
        for i in 0..n {
            let row = &self.l[i * n..i * n + i + 1];
            let mut s = 0.0;
            for (c, zk) in row.iter().zip(z.iter()) {
                s += c * zk;
            }
            out[i] = s;
        }
        out
    }

    /// Solves L^T x = z; with A a precision matrix this maps iid standard
    /// normals to a draw from N(0, A^{-1}).
    pub fn solve_transpose_vec(&self, z: &Array1<f64>) -> Array1<f64> {
        let mut buf: Vec<f64> = z.to_vec();
        self.backward_solve(&mut buf, 1);
        Array1::from_vec(buf)
    }

    /// Forward substitution L Z = B on a row-major buffer with `m` columns.
    fn forward_solve(&self, buf: &mut [f64], m: usize) {
        let n = self.n;
        for i in 0..n {
            let (done, rest) = buf.split_at_mut(i * m);
            let zi = &mut rest[..m];
            let li = &self.l[i * n..i * n + i];
            for (k, &c) in li.iter().enumerate() {
                if c != 0.0 {
                    let zk = &done[k * m..(k + 1) * m];
                    for (a, b) in zi.iter_mut().zip(zk) {
                        *a -= c * *b;
                    }
                }
            }
            let inv = 1.0 / self.l[i * n + i];
            for a in zi.iter_mut() {
                *a *= inv;
            }
        }
    }

    /// Backward substitution L^T X = Z on a row-major buffer with `m` columns.
    fn backward_solve(&self, buf: &mut [f64], m: usize) {
        let n = self.n;
        for i in (0..n).rev() {
            let (head, tail) = buf.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let c = self.l[k * n + i];
                if c != 0.0 {
                    let xk = &tail[(k - i - 1) * m..(k - i) * m];
                    for (a, b) in xi.iter_mut().zip(xk) {
                        *a -= c * *b;
                    }
                }
            }
            let inv = 1.0 / self.l[i * n + i];
            for a in xi.iter_mut() {
                *a *= inv;
            }
        }
    }
}

/// Averages a nearly-symmetric matrix with its transpose in place.
pub fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Frobenius inner product; equals Tr(A B) when both matrices are symmetric.
pub fn trace_product_sym(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

/// v^T M v.
pub fn quad_form(m: &Array2<f64>, v: &Array1<f64>) -> f64 {
    let mut s = 0.0;
    for (i, vi) in v.iter().enumerate() {
        let mut row = 0.0;
        for (j, vj) in v.iter().enumerate() {
            row += m[(i, j)] * vj;
        }
        s += vi * row;
    }
    s
}
