//! Small dense least-squares helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Ordinary least-squares fit `y ~ X`.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta: DVector<f64>,
    /// `(XᵀX)⁻¹`
    pub xtx_inv: DMatrix<f64>,
    pub rss: f64,
    pub n: usize,
}

impl OlsFit {
    pub fn dof(&self) -> usize {
        self.n.saturating_sub(self.beta.len())
    }

    /// Unbiased residual variance `RSS / (n − p)`.
    pub fn sigma2(&self) -> f64 {
        match self.dof() {
            0 => 0.0,
            d => self.rss / d as f64,
        }
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, with a
/// relative-conditioning check so near-singular systems are reported
/// instead of silently producing garbage.
pub fn spd_cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let max_diag = m.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let chol = Cholesky::new(m).ok_or_else(|| Error::RankDeficient(what.to_string()))?;
    let l = chol.l_dirty();
    let min_piv = (0..l.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_piv.is_finite() && min_piv * min_piv > max_diag * 1e-13) {
        return Err(Error::RankDeficient(what.to_string()));
    }
    Ok(chol)
}

pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let n = x.nrows();
    if n < x.ncols() {
        return Err(Error::RankDeficient(format!(
            "{} rows for {} coefficients",
            n,
            x.ncols()
        )));
    }
    let xtx = x.tr_mul(x);
    let chol = spd_cholesky(xtx, "XᵀX")?;
    let beta = chol.solve(&x.tr_mul(y));
    let resid = y - x * &beta;
    Ok(OlsFit {
        xtx_inv: chol.inverse(),
        rss: resid.norm_squared(),
        beta,
        n,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with `n − 1` denominator; zero for fewer than two values.
pub fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn sample_sd(v: &[f64]) -> f64 {
    sample_var(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 1., 2., 1., 3.]);
        let y = DVector::from_vec(vec![1., 3., 5., 7.]);
        let fit = ols(&x, &y).unwrap();
        assert_relative_eq!(fit.beta[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.beta[1], 2.0, epsilon = 1e-12);
        assert!(fit.rss < 1e-20);
        assert_eq!(fit.dof(), 2);
    }

    #[test]
    fn ols_rejects_collinear_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 2., 1., 2., 1., 2.]);
        let y = DVector::from_vec(vec![1., 2., 3.]);
        assert!(matches!(ols(&x, &y), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn variance_helpers() {
        assert_relative_eq!(sample_var(&[1., 2., 3., 4.]), 5.0 / 3.0);
        assert_eq!(sample_var(&[3.0]), 0.0);
    }
}
