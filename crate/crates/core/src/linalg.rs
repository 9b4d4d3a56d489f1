//! Small dense linear-algebra helpers shared by the optimizer and the
//! identification routines.

use nalgebra::{DMatrix, DVector};

use crate::env_data::EnvironmentDataset;
use crate::error::{CocoError, Result};

/// Condition-number ceiling for normal-equation solves.
pub const MAX_CONDITION: f64 = 1e12;

/// Second-moment summary of one environment: `W = XᵀX/n`, `b = Xᵀy/n` and
/// `yy = yᵀy/n`. Everything the squared-loss linear model needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub yy: f64,
    pub n: usize,
}

impl GramStats {
    pub fn from_dataset(env: &EnvironmentDataset) -> Self {
        Self::from_xy(&env.x, &env.y)
    }

    pub fn from_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let n = x.nrows();
        let inv = 1.0 / n as f64;
        Self {
            w: x.tr_mul(x) * inv,
            b: x.tr_mul(y) * inv,
            yy: y.dot(y) * inv,
            n,
        }
    }

    pub fn p(&self) -> usize {
        self.b.len()
    }

    /// Squared-loss risk `½ mean (xᵀα − y)²`.
    pub fn risk(&self, alpha: &DVector<f64>) -> f64 {
        0.5 * (alpha.dot(&(&self.w * alpha)) - 2.0 * self.b.dot(alpha) + self.yy)
    }

    /// Risk gradient `Wα − b`.
    pub fn gradient(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.w * alpha - &self.b
    }

    /// Restriction to the coordinates in `idx`.
    pub fn restrict(&self, idx: &[usize]) -> Self {
        Self {
            w: self.w.select_rows(idx.iter()).select_columns(idx.iter()),
            b: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.b[i])),
            yy: self.yy,
            n: self.n,
        }
    }

    /// Entrywise mean of several summaries weighted by sample size.
    pub fn pooled(stats: &[GramStats]) -> Result<Self> {
        let first = stats
            .first()
            .ok_or_else(|| CocoError::InvalidData("no environments to pool".into()))?;
        let total: usize = stats.iter().map(|s| s.n).sum();
        let mut w = DMatrix::zeros(first.p(), first.p());
        let mut b = DVector::zeros(first.p());
        let mut yy = 0.0;
        for s in stats {
            let f = s.n as f64 / total as f64;
            w += &s.w * f;
            b += &s.b * f;
            yy += s.yy * f;
        }
        Ok(Self { w, b, yy, n: total })
    }
}

/// Ratio of the extreme eigenvalue magnitudes of a symmetric matrix.
pub fn condition_number_sym(w: &DMatrix<f64>) -> f64 {
    if w.is_empty() {
        return 1.0;
    }
    let eig = w.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `W x = b` for symmetric positive definite `W`, refusing matrices
/// whose condition number exceeds [`MAX_CONDITION`].
pub fn solve_spd(w: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if w.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let cond = condition_number_sym(w);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(CocoError::Singular(format!(
            "Gram matrix condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"
        )));
    }
    match w.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => w
            .clone()
            .lu()
            .solve(b)
            .ok_or_else(|| CocoError::Singular("normal equations are singular".into())),
    }
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Mean absolute entrywise difference.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gram_risk_matches_direct_sum() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let stats = GramStats::from_xy(&x, &y);
        let a = DVector::from_vec(vec![0.3, -0.7]);
        let r = &x * &a - &y;
        assert_abs_diff_eq!(stats.risk(&a), 0.5 * r.dot(&r) / 3.0, epsilon = 1e-14);
        let g = x.tr_mul(&r) / 3.0;
        assert_abs_diff_eq!(stats.gradient(&a), g, epsilon = 1e-14);
    }

    #[test]
    fn singular_gram_is_rejected() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve_spd(&w, &b), Err(CocoError::Singular(_))));
    }

    #[test]
    fn spd_solve() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![3.0, 5.0]);
        let x = solve_spd(&w, &b).unwrap();
        assert_abs_diff_eq!(&w * x, b, epsilon = 1e-12);
    }
}
