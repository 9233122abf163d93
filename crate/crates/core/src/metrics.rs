//! Canonical correlation analysis with a cyclic Jacobi eigensolver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

/// Eigenvalues in non-increasing order with unit eigenvectors as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: SymMatrix,
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
pub fn jacobi_eigen(m: &SymMatrix) -> Result<Eigen> {
    let n = m.n;
    if m.data.len() != n * n {
        return Err(Error::shape("jacobi_eigen", "matrix data does not match its order"));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobi_eigen input".into()));
    }
    let mut a = m.clone();
    let mut v = SymMatrix::identity(n);
    let scale: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = SymMatrix::zeros(n);
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, col, v.get(k, i));
        }
    }
    Ok(Eigen { values, vectors })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    /// Canonical correlations, non-increasing, in `[0, 1]`.
    pub correlations: Vec<f64>,
    /// Projection of the standardized `X` columns for each component.
    pub x_weights: Vec<Vec<f64>>,
    /// Projection of the standardized `Y` columns for each component.
    pub y_weights: Vec<Vec<f64>>,
}

const RIDGE: f64 = 1e-6;

struct Standardized {
    cols: Vec<Vec<f64>>,
}

fn standardize(rows: &[Vec<f64>], name: &str) -> Result<Standardized> {
    let n = rows.len();
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::shape("cca", format!("rows of {name} have different widths")));
    }
    let mut cols = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cca input {name} column {j}")));
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var <= 1e-300 || var.sqrt() <= 1e-12 * mean.abs() {
            return Err(Error::InvalidInput(format!("cca: column {j} of {name} is constant (rank deficient)")));
        }
        let sd = var.sqrt();
        cols.push(col.iter().map(|v| (v - mean) / sd).collect());
    }
    Ok(Standardized { cols })
}

fn cross(a: &Standardized, b: &Standardized, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.cols.len() * b.cols.len());
    for ca in &a.cols {
        for cb in &b.cols {
            out.push(ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>() / (n - 1) as f64);
        }
    }
    out
}

/// Condition number above which a covariance block gets the ridge.
const RIDGE_CONDITION: f64 = 1e8;

/// `C^{-1/2}` of a covariance block. Ill-conditioned blocks get a ridge of
/// `1e-6 · trace / dim` first.
fn inverse_sqrt(cov: Vec<f64>, n: usize, name: &str) -> Result<SymMatrix> {
    let mut c = SymMatrix { n, data: cov };
    let mut e = jacobi_eigen(&c)?;
    if !(e.values[n - 1] * RIDGE_CONDITION > e.values[0]) {
        let delta = RIDGE * c.trace() / n as f64;
        for i in 0..n {
            c.data[i * n + i] += delta;
        }
        e = jacobi_eigen(&c)?;
    }
    let max = e.values[0];
    let min = e.values[n - 1];
    if !(min > 1e-12 * max) {
        return Err(Error::InvalidInput(format!("cca: covariance of {name} is rank deficient after regularization")));
    }
    let mut out = SymMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..n).map(|k| e.vectors.get(i, k) * e.vectors.get(j, k) / e.values[k].sqrt()).sum();
            out.data[i * n + j] = v;
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..m {
                out[i * m + j] += av * b[l * m + j];
            }
        }
    }
    out
}

/// Top `k` canonical correlations between the rows of `x` (n×p) and `y` (n×q).
/// Columns are standardized; a covariance block with condition number above
/// `1e8` gets a ridge of `1e-6 · trace / dim` before whitening.
pub fn cca_top_components(x: &[Vec<f64>], y: &[Vec<f64>], k: usize) -> Result<CcaResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::shape("cca", format!("x has {n} rows, y has {}", y.len())));
    }
    if n == 0 || x[0].is_empty() || y[0].is_empty() {
        return Err(Error::InvalidInput("cca needs non-empty x and y".into()));
    }
    let (p, q) = (x[0].len(), y[0].len());
    if n <= p.max(q) + 1 {
        return Err(Error::InvalidInput(format!("cca needs more than {} rows, got {n}", p.max(q) + 1)));
    }
    if k == 0 || k > p.min(q) {
        return Err(Error::InvalidInput(format!("cca: k must lie in 1..={}, got {k}", p.min(q))));
    }
    let xs = standardize(x, "x")?;
    let ys = standardize(y, "y")?;
    let wx = inverse_sqrt(cross(&xs, &xs, n), p, "x")?;
    let wy = inverse_sqrt(cross(&ys, &ys, n), q, "y")?;
    let cxy = cross(&xs, &ys, n);
    // M = Wx Cxy Wy; its singular values are the canonical correlations.
    let m = matmul(&matmul(&wx.data, &cxy, p, p, q), &wy.data, p, q, q);
    let mut mtm = SymMatrix::zeros(q);
    for i in 0..q {
        for j in 0..q {
            mtm.data[i * q + j] = (0..p).map(|r| m[r * q + i] * m[r * q + j]).sum();
        }
    }
    let e = jacobi_eigen(&mtm)?;
    let mut correlations = Vec::with_capacity(k);
    let mut x_weights = Vec::with_capacity(k);
    let mut y_weights = Vec::with_capacity(k);
    for c in 0..k {
        let sigma = e.values[c].max(0.0).sqrt();
        let v: Vec<f64> = (0..q).map(|i| e.vectors.get(i, c)).collect();
        let mut u: Vec<f64> = (0..p).map(|r| (0..q).map(|i| m[r * q + i] * v[i]).sum::<f64>()).collect();
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            u.iter_mut().for_each(|a| *a /= norm);
        }
        let a = matmul(&wx.data, &u, p, p, 1);
        let b = matmul(&wy.data, &v, q, q, 1);
        // Fix the sign so the largest y weight is positive.
        let pivot = b.iter().copied().fold(0.0f64, |m, w| if w.abs() > m.abs() { w } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        correlations.push(sigma.min(1.0));
        x_weights.push(a.iter().map(|w| w * sign).collect());
        y_weights.push(b.iter().map(|w| w * sign).collect());
    }
    Ok(CcaResult {
        correlations,
        x_weights,
        y_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_on_a_hand_matrix() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let e = jacobi_eigen(&SymMatrix { n: 2, data: vec![2.0, 1.0, 1.0, 2.0] }).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let v0 = (e.vectors.get(0, 0), e.vectors.get(1, 0));
        assert!((v0.0.abs() - 0.5f64.sqrt()).abs() < 1e-14 && (v0.0 - v0.1).abs() < 1e-14);
    }

    #[test]
    fn jacobi_diagonal_is_sorted() {
        let mut m = SymMatrix::zeros(3);
        m.data[0] = 1.0;
        m.data[4] = 5.0;
        m.data[8] = 3.0;
        assert_eq!(jacobi_eigen(&m).unwrap().values, vec![5.0, 3.0, 1.0]);
    }

    #[test]
    fn rejects_small_or_constant_inputs() {
        let x = vec![vec![1.0, 2.0]; 3];
        assert!(cca_top_components(&x, &x, 1).is_err());
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let y: Vec<Vec<f64>> = (0..10).map(|i| vec![(i * i) as f64]).collect();
        assert!(cca_top_components(&x, &y, 1).is_err());
        assert!(cca_top_components(&y, &y, 2).is_err());
    }

    #[test]
    fn duplicated_columns_are_regularized() {
        // Rank-deficient x still yields a result through the ridge.
        let x: Vec<Vec<f64>> = (0..30).map(|i| {
            let a = (i as f64 * 0.7).sin();
            let b = (i as f64 * 1.3).cos();
            vec![a, b, a]
        }).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 0.1 * r[1]]).collect();
        let r = cca_top_components(&x, &y, 1).unwrap();
        assert!(r.correlations[0] > 0.999);
    }
}
