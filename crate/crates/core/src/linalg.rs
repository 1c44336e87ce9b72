//! Small dense helpers shared by the fitting routines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SaeError};

/// Row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    data: Vec<f64>,
    n: usize,
    p: usize,
}

impl Rows {
    pub fn new(data: Vec<f64>, p: usize) -> Rows {
        assert!(p > 0 && data.len() % p == 0);
        Rows { n: data.len() / p, data, p }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.p)
    }

    pub fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        dot(self.row(i), beta)
    }

    /// `X beta` for every row.
    pub fn fitted(&self, beta: &[f64]) -> Vec<f64> {
        self.iter().map(|r| dot(r, beta)).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }

    /// Subset of rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Rows {
        let mut data = Vec::with_capacity(rows.len() * self.p);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Rows { data, n: rows.len(), p: self.p }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `X' W X` with `W = diag(w)`.
pub fn weighted_gram(x: &Rows, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut acc = vec![0.0; p * p];
    for (row, &wi) in x.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let ra = row[a] * wi;
            if ra == 0.0 {
                continue;
            }
            let base = a * p;
            for b in a..p {
                acc[base + b] += ra * row[b];
            }
        }
    }
    let mut m = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            m[(a, b)] = acc[a * p + b];
            m[(b, a)] = acc[a * p + b];
        }
    }
    m
}

/// `X' W y`.
pub fn weighted_xty(x: &Rows, w: &[f64], y: &[f64]) -> DVector<f64> {
    let p = x.ncols();
    let mut out = DVector::zeros(p);
    for ((row, &wi), &yi) in x.iter().zip(w).zip(y) {
        let f = wi * yi;
        if f == 0.0 {
            continue;
        }
        for a in 0..p {
            out[a] += row[a] * f;
        }
    }
    out
}

/// Solves a symmetric positive definite system, rejecting numerically singular input.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let p = a.nrows();
    // Symmetric diagonal equilibration before the condition check.
    let d: Vec<f64> = (0..p)
        .map(|i| {
            let v = a[(i, i)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    if d.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(SaeError::Singular(format!("{what}: zero column")));
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| a[(i, j)] * d[i] * d[j]);
    let chol = scaled
        .cholesky()
        .ok_or_else(|| SaeError::Singular(format!("{what}: not positive definite")))?;
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..p).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-13 * max) {
        return Err(SaeError::Singular(format!("{what}: rank deficient")));
    }
    let rhs = DVector::from_fn(p, |i, _| b[i] * d[i]);
    let z = chol.solve(&rhs);
    Ok(DVector::from_fn(p, |i, _| z[i] * d[i]))
}

/// Inverse of a symmetric positive definite matrix (with the same checks as [`solve_spd`]).
pub fn inverse_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let mut inv = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        inv.set_column(j, &solve_spd(a.clone(), &e, what)?);
    }
    Ok(inv)
}

/// Weighted least squares `argmin sum w_i (y_i - x_i' beta)^2`.
pub fn wls(x: &Rows, y: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    solve_spd(weighted_gram(x, w), &weighted_xty(x, w, y), "weighted least squares")
}

/// Median via selection; the slice is reordered.
pub fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn median(v: &[f64]) -> f64 {
    median_in_place(&mut v.to_vec())
}
