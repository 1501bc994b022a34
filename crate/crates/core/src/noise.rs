//! Deterministic disturbance sampling.
//!
//! RNG contract: every stream is a ChaCha8 cipher keyed by the SplitMix64
//! expansion of a 64-bit seed (`rand_core`'s `seed_from_u64`), so the
//! seed-to-stream mapping is fixed, documented and identical across
//! platforms. Uniform doubles take the top 53 bits of each 64-bit output,
//! shifted into the open interval (0, 1); distributions are obtained by
//! inverse-CDF transforms (Laplace via the signed logarithm, Gaussian via
//! the normal quantile), which keeps realizations reproducible under any
//! generator honoring the same contract.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::stats::normal_quantile;

/// Disturbance distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Laplacian,
}

/// Opens the seeded stream for a given 64-bit seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw strictly inside (0, 1).
pub fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw via the quantile transform.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    normal_quantile(open_unit(rng))
}

/// Zero-mean Laplace draw with the given scale parameter.
pub fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u = open_unit(rng);
    if u < 0.5 {
        scale * (2.0 * u).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    }
}

/// Samples `t` disturbance realizations as the rows of a `t x n` matrix.
///
/// Laplacian noise draws each component independently with scale
/// `sqrt(sigma_jj / 2)`, matching the prescribed per-component variance; a
/// non-diagonal covariance is rejected rather than improvised. Gaussian noise
/// scales standard draws by the symmetric PSD square root of `sigma_w`.
pub fn sample_noise(
    kind: NoiseKind,
    sigma_w: &DMatrix<f64>,
    t: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let n = sigma_w.nrows();
    if sigma_w.ncols() != n {
        return Err(Error::Config("sigma_w must be square".into()));
    }
    let mut rng = stream(seed);
    let mut out = DMatrix::zeros(t, n);
    match kind {
        NoiseKind::Laplacian => {
            let mut off_diag = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off_diag = off_diag.max(sigma_w[(i, j)].abs());
                    }
                }
            }
            if off_diag > 1e-12 {
                return Err(Error::Unsupported(
                    "laplacian noise requires a diagonal sigma_w; correlated Laplace sampling is not defined here".into(),
                ));
            }
            let scales: Vec<f64> = (0..n).map(|j| (sigma_w[(j, j)] / 2.0).sqrt()).collect();
            for k in 0..t {
                for j in 0..n {
                    out[(k, j)] = laplace(&mut rng, scales[j]);
                }
            }
        }
        NoiseKind::Gaussian => {
            let root = psd_sqrt(sigma_w, 1e-12)?;
            let mut z = DVector::zeros(n);
            for k in 0..t {
                for j in 0..n {
                    z[j] = standard_normal(&mut rng);
                }
                let w = &root * &z;
                for j in 0..n {
                    out[(k, j)] = w[j];
                }
            }
        }
    }
    Ok(out)
}
