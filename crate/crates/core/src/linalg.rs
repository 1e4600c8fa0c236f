//! Dense linear algebra helpers on top of faer.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::{
    cholesky_in_place, cholesky_in_place_scratch, LltRegularization,
};
use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::{Mat, MatRef, Par, Side};

use crate::error::{GkrlsError, Result};

/// Relative eigenvalue cut used for ranks, pseudo-inverses and pseudo-determinants.
pub const EIGEN_REL_TOL: f64 = 1e-10;

/// Pivot replacement (relative to a unit diagonal) for numerically singular pivots.
const PIVOT_RIDGE: f64 = 1e-10;

pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (o, &v) in out.iter_mut().zip(col.iter()) {
            *o += v * xj;
        }
    }
    out
}

pub fn mat_t_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.nrows(), x.len());
    (0..a.ncols())
        .map(|j| a.col(j).iter().zip(x).map(|(&v, &w)| v * w).sum())
        .collect()
}

/// All entries, column by column.
pub fn entries<'a>(m: MatRef<'a, f64>) -> impl Iterator<Item = f64> + 'a {
    (0..m.ncols()).flat_map(move |j| (0..m.nrows()).map(move |i| m[(i, j)]))
}

pub fn all_finite(m: MatRef<'_, f64>) -> bool {
    entries(m).all(|v| v.is_finite())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Aᵀ diag(w) A`, or `AᵀA` when no weights are given.
pub fn weighted_gram(a: MatRef<'_, f64>, w: Option<&[f64]>) -> Mat<f64> {
    let scaled = match w {
        Some(w) => {
            assert_eq!(w.len(), a.nrows());
            Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * w[i].sqrt())
        }
        None => a.to_owned(),
    };
    let mut g = scaled.transpose() * &scaled;
    symmetrize(&mut g);
    g
}

/// `Aᵀ diag(w) y`.
pub fn weighted_cross(a: MatRef<'_, f64>, w: Option<&[f64]>, y: &[f64]) -> Vec<f64> {
    match w {
        Some(w) => {
            let wy: Vec<f64> = w.iter().zip(y).map(|(a, b)| a * b).collect();
            mat_t_vec(a, &wy)
        }
        None => mat_t_vec(a, y),
    }
}

pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

/// Row-major copy of a matrix.
pub fn to_row_major(a: MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    assert_eq!(data.len(), rows * cols);
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

/// Cholesky factor of a symmetric positive (semi)definite matrix.
///
/// The matrix is first scaled to unit diagonal. Pivots that turn out
/// numerically zero or negative are replaced by a small ridge and counted in
/// [`Cholesky::repairs`]; well-conditioned systems are factored exactly.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Mat<f64>,
    inv_sqrt_diag: Vec<f64>,
    repairs: usize,
}

impl Cholesky {
    pub fn new(a: MatRef<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(GkrlsError::Dimension(format!(
                "cholesky of a {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let inv_sqrt_diag: Vec<f64> = (0..n)
            .map(|i| {
                let d = a[(i, i)];
                if d > 0.0 && d.is_finite() {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut lower = Mat::from_fn(n, n, |i, j| {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            a[(r, c)] * inv_sqrt_diag[r] * inv_sqrt_diag[c]
        });
        if !all_finite(lower.as_ref()) {
            return Err(GkrlsError::Singular {
                block: "non-finite entries".into(),
            });
        }
        let mut mem =
            MemBuffer::new(cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
        let info = cholesky_in_place(
            lower.as_mut(),
            LltRegularization {
                dynamic_regularization_delta: PIVOT_RIDGE,
                dynamic_regularization_epsilon: PIVOT_RIDGE,
            },
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|_| GkrlsError::Singular {
            block: "cholesky".into(),
        })?;
        for j in 0..n {
            for i in 0..j {
                lower[(i, j)] = 0.0;
            }
        }
        Ok(Self {
            lower,
            inv_sqrt_diag,
            repairs: info.dynamic_regularization_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Number of pivots replaced by the ridge.
    pub fn repairs(&self) -> usize {
        self.repairs
    }

    /// Index of the first pivot at or below the ridge, if any.
    pub fn first_weak_pivot(&self) -> Option<usize> {
        (0..self.dim()).find(|&i| self.lower[(i, i)] * self.lower[(i, i)] <= 2.0 * PIVOT_RIDGE)
    }

    pub fn log_det(&self) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            s += 2.0 * self.lower[(i, i)].ln() - 2.0 * self.inv_sqrt_diag[i].ln();
        }
        s
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut x = Mat::from_fn(n, b.ncols(), |i, j| b[(i, j)] * self.inv_sqrt_diag[i]);
        solve_lower_triangular_in_place(self.lower.as_ref(), x.as_mut(), Par::Seq);
        solve_upper_triangular_in_place(self.lower.transpose(), x.as_mut(), Par::Seq);
        for j in 0..x.ncols() {
            for i in 0..n {
                x[(i, j)] *= self.inv_sqrt_diag[i];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.solve_mat(rhs.as_ref());
        x.col_as_slice(0).to_vec()
    }

    pub fn inverse(&self) -> Mat<f64> {
        let mut inv = self.solve_mat(Mat::<f64>::identity(self.dim(), self.dim()).as_ref());
        symmetrize(&mut inv);
        inv
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

pub fn sym_eigen(a: MatRef<'_, f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n == 0 {
        return Ok(SymEigen {
            values: vec![],
            vectors: Mat::zeros(0, 0),
        });
    }
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| GkrlsError::Singular {
            block: format!("eigendecomposition failed: {e:?}"),
        })?;
    let s = evd.S();
    let u = evd.U();
    let s = s.column_vector();
    // faer returns ascending order; flip and fix signs so the largest-magnitude
    // entry of each eigenvector is positive.
    let values: Vec<f64> = (0..n).rev().map(|k| s[k]).collect();
    let vectors = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    let mut vectors = vectors;
    for j in 0..n {
        let mut best = 0usize;
        for i in 0..n {
            if vectors[(i, j)].abs() > vectors[(best, j)].abs() {
                best = i;
            }
        }
        if vectors[(best, j)] < 0.0 {
            for i in 0..n {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Number of eigenvalues above `rel_tol` times the largest (values descending).
pub fn positive_rank(values: &[f64], rel_tol: f64) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    values.iter().take_while(|&&v| v > rel_tol * top).count()
}

/// Moore-Penrose inverse of a symmetric PSD matrix via its eigen-decomposition.
pub fn pinv_sym(a: MatRef<'_, f64>, rel_tol: f64) -> Result<Mat<f64>> {
    let eig = sym_eigen(a)?;
    let r = positive_rank(&eig.values, rel_tol);
    let n = a.nrows();
    let mut out = Mat::zeros(n, n);
    for k in 0..r {
        let inv = 1.0 / eig.values[k];
        for j in 0..n {
            let vj = eig.vectors[(j, k)] * inv;
            for i in 0..n {
                out[(i, j)] += eig.vectors[(i, k)] * vj;
            }
        }
    }
    Ok(out)
}

/// Log pseudo-determinant over eigenvalues above the relative cut.
pub fn log_pdet(values: &[f64], rel_tol: f64) -> f64 {
    let r = positive_rank(values, rel_tol);
    values[..r].iter().map(|v| v.ln()).sum()
}

/// Indices of columns kept by a column-ordered Gram-Schmidt pass: a column is
/// dropped when its residual norm after projecting out earlier kept columns
/// falls below `rel_tol` times its own norm.
pub fn independent_columns(x: MatRef<'_, f64>, rel_tol: f64) -> Vec<usize> {
    let n = x.nrows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let mut v: Vec<f64> = x.col(j).iter().copied().collect();
        let norm0 = dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                for i in 0..n {
                    v[i] -= c * q[i];
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > rel_tol * norm0 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
            kept.push(j);
        }
    }
    kept
}
