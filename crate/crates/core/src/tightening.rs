//! Risk allocation across constraint rows and the deterministic constraint
//! tightening constants.
//!
//! A joint risk budget is split across individual rows by the union bound;
//! each row is then tightened by `psi * ||Sigma_x^{1/2} f||_2` where `psi`
//! depends on what is known about the disturbance distribution: the
//! distribution-free constant `sqrt((1 - delta) / delta)` when only the first
//! two moments are known, the normal quantile when the normalized margin is
//! Gaussian, or an empirical quantile of sampled margins otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::stats::{empirical_quantile, normal_quantile};

/// Minimum sample count accepted by [`psi_empirical`].
pub const MIN_QUANTILE_SAMPLES: usize = 10_000;

/// A joint risk budget and its per-row split.
#[derive(Debug, Clone)]
pub struct RiskAllocation {
    total: f64,
    deltas: Vec<f64>,
}

impl RiskAllocation {
    /// Validates an explicit per-row allocation: every `delta_i` in
    /// (0, 0.5] and their sum not exceeding the budget.
    pub fn new(total: f64, deltas: Vec<f64>) -> Result<Self> {
        check_probability(total)?;
        if deltas.is_empty() {
            return Err(Error::Domain("risk allocation needs at least one row".into()));
        }
        for (i, &d) in deltas.iter().enumerate() {
            check_probability(d).map_err(|_| {
                Error::Domain(format!("delta[{i}] = {d} outside (0, 0.5]"))
            })?;
        }
        let sum: f64 = deltas.iter().sum();
        if sum > total + 1e-12 {
            return Err(Error::Domain(format!(
                "sum of per-row risks {sum} exceeds budget {total}"
            )));
        }
        Ok(Self { total, deltas })
    }

    /// Splits the budget uniformly: `delta_i = total / n_rows`.
    pub fn uniform(total: f64, n_rows: usize) -> Result<Self> {
        check_probability(total)?;
        if n_rows == 0 {
            return Err(Error::Domain("n_rows must be positive".into()));
        }
        Self::new(total, vec![total / n_rows as f64; n_rows])
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(Error::Domain(format!("risk level {p} outside (0, 0.5]")));
    }
    Ok(())
}

/// How the per-row tightening constants were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TighteningMode {
    /// Distribution-free bound from the moment ambiguity set.
    Dr,
    /// Exact normal quantile (valid when the normalized margin is Gaussian).
    Gaussian,
    /// Empirical quantile of sampled normalized margins.
    Empirical,
}

/// Resolved per-row tightening constants.
#[derive(Debug, Clone)]
pub struct TighteningSpec {
    pub mode: TighteningMode,
    pub psis: Vec<f64>,
    /// Sample count behind each constant (empirical mode only).
    pub quantile_samples: usize,
}

impl TighteningSpec {
    pub fn dr(allocation: &RiskAllocation) -> Result<Self> {
        let psis = allocation
            .deltas()
            .iter()
            .map(|&d| psi_dr(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: TighteningMode::Dr,
            psis,
            quantile_samples: 0,
        })
    }

    pub fn gaussian(allocation: &RiskAllocation) -> Result<Self> {
        let psis = allocation
            .deltas()
            .iter()
            .map(|&d| psi_gaussian(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: TighteningMode::Gaussian,
            psis,
            quantile_samples: 0,
        })
    }

    /// Wraps externally computed empirical constants.
    pub fn empirical(psis: Vec<f64>, quantile_samples: usize) -> Result<Self> {
        for (i, &p) in psis.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Validation(format!(
                    "empirical psi[{i}] = {p} must be finite and nonnegative"
                )));
            }
        }
        Ok(Self {
            mode: TighteningMode::Empirical,
            psis,
            quantile_samples,
        })
    }
}

/// Distribution-free tightening constant `sqrt((1 - delta) / delta)`.
pub fn psi_dr(delta: f64) -> Result<f64> {
    check_probability(delta)?;
    Ok(((1.0 - delta) / delta).sqrt())
}

/// Gaussian tightening constant: the standard normal quantile at `1 - delta`.
pub fn psi_gaussian(delta: f64) -> Result<f64> {
    check_probability(delta)?;
    Ok(normal_quantile(1.0 - delta))
}

/// Empirical tightening constant: the `(1 - delta)`-quantile of sampled
/// normalized constraint margins, linearly interpolated between order
/// statistics. Requires at least [`MIN_QUANTILE_SAMPLES`] samples.
pub fn psi_empirical(samples: &[f64], delta: f64) -> Result<f64> {
    check_probability(delta)?;
    if samples.len() < MIN_QUANTILE_SAMPLES {
        return Err(Error::Validation(format!(
            "empirical quantile needs at least {MIN_QUANTILE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("empirical samples must be finite".into()));
    }
    Ok(empirical_quantile(samples, 1.0 - delta))
}

/// Tightened offset `g - psi * ||Sigma_x^{1/2} f||_2` for a single row, with
/// the square root taken as the symmetric PSD root.
pub fn tighten(f_row: &DVector<f64>, g_row: f64, sigma_x: &DMatrix<f64>, psi: f64) -> Result<f64> {
    let norms = constraint_norms(&DMatrix::from_rows(&[f_row.transpose()]), sigma_x)?;
    Ok(g_row - psi * norms[0])
}

/// `||Sigma_x^{1/2} f_i||_2` for every row of `f`, sharing one PSD square
/// root factorization. Eigenvalues of `sigma_x` in `[-1e-12, 0)` are clamped
/// to zero; anything lower is a validation error.
pub fn constraint_norms(f: &DMatrix<f64>, sigma_x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if f.ncols() != sigma_x.nrows() {
        return Err(Error::Config(format!(
            "constraint rows have {} columns but sigma_x is {}x{}",
            f.ncols(),
            sigma_x.nrows(),
            sigma_x.ncols()
        )));
    }
    let root = psd_sqrt(sigma_x, 1e-12)?;
    let products = &root * f.transpose();
    Ok((0..f.nrows()).map(|i| products.column(i).norm()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{standard_normal, stream};

    #[test]
    fn uniform_allocation_examples() {
        let a = RiskAllocation::uniform(0.1, 5).unwrap();
        assert!(a.deltas().iter().all(|&d| (d - 0.02).abs() < 1e-15));
        let b = RiskAllocation::uniform(0.5, 1).unwrap();
        assert_eq!(b.deltas(), &[0.5]);
        let c = RiskAllocation::uniform(0.1, 20).unwrap();
        assert!((c.deltas().iter().sum::<f64>() - 0.1).abs() < 1e-12);
        assert!(RiskAllocation::uniform(0.6, 5).is_err());
        assert!(RiskAllocation::uniform(0.0, 5).is_err());
    }

    #[test]
    fn dr_constants_exact() {
        assert_eq!(psi_dr(0.5).unwrap(), 1.0);
        assert_eq!(psi_dr(0.02).unwrap(), 7.0);
        assert_eq!(psi_dr(0.1).unwrap(), 3.0);
        assert!(psi_dr(0.0).is_err());
        assert!(psi_dr(0.51).is_err());
    }

    #[test]
    fn gaussian_constants() {
        assert_eq!(psi_gaussian(0.5).unwrap(), 0.0);
        assert!((psi_gaussian(0.05).unwrap() - 1.6448536270).abs() < 1e-8);
        assert!((psi_gaussian(0.02).unwrap() - 2.0537489106).abs() < 1e-8);
    }

    #[test]
    fn empirical_matches_gaussian_on_normal_draws() {
        let mut rng = stream(2024);
        let samples: Vec<f64> = (0..1_000_000).map(|_| standard_normal(&mut rng)).collect();
        let q = psi_empirical(&samples, 0.05).unwrap();
        assert!((q - 1.6449).abs() < 0.01, "q = {q}");
    }

    #[test]
    fn empirical_degenerate_and_coin_flip() {
        let constant = vec![3.25; 10_000];
        assert_eq!(psi_empirical(&constant, 0.17).unwrap(), 3.25);
        let mut flips = vec![-1.0; 5_000];
        flips.extend(vec![1.0; 5_000]);
        assert_eq!(psi_empirical(&flips, 0.4).unwrap(), 1.0);
        assert!(psi_empirical(&[1.0; 100], 0.1).is_err());
    }

    #[test]
    fn tighten_examples() {
        let f = DVector::from_vec(vec![1.0, 0.0]);
        let sigma = 0.04 * DMatrix::identity(2, 2);
        assert_eq!(tighten(&f, 1.0, &sigma, 0.0).unwrap(), 1.0);
        assert_eq!(tighten(&f, 1.0, &DMatrix::zeros(2, 2), 5.0).unwrap(), 1.0);
        let t = tighten(&f, 1.0, &sigma, 3.0).unwrap();
        assert!((t - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dr_dominates_gaussian_and_both_decrease() {
        let mut prev_dr = f64::INFINITY;
        let mut prev_g = f64::INFINITY;
        for i in 1..=1000 {
            let d = 0.5 * i as f64 / 1000.0;
            let dr = psi_dr(d).unwrap();
            let ga = psi_gaussian(d).unwrap();
            assert!(dr >= ga, "delta={d}: dr={dr} < gaussian={ga}");
            assert!(dr < prev_dr && ga < prev_g, "not strictly decreasing at {d}");
            prev_dr = dr;
            prev_g = ga;
        }
    }
}
