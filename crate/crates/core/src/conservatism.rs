//! Conservatism of the distributionally robust tightening: build the exactly
//! and DR tightened constraint sets, erode one by the other, and measure the
//! volume of what remains.
//!
//! The volume is taken over the erosion in the original state space
//! (row-wise support-function LPs); the lifted double-dimension
//! H-representation is available from [`crate::polytope::build_lifted_diff`]
//! for construction and inspection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::{map_shards, shard_seed};
use crate::linalg::psd_sqrt;
use crate::noise::{laplace, standard_normal, stream, NoiseKind};
use crate::polytope::Polytope;
use crate::tightening::{constraint_norms, psi_empirical, psi_gaussian, RiskAllocation};
use crate::volume::{volume, VolumeEstimate};

/// How the fully informed ("exact") tightening constants are obtained.
#[derive(Debug, Clone)]
pub enum ExactTightening<'a> {
    /// Closed-form normal quantile; exact when the normalized margins are
    /// Gaussian.
    Gaussian,
    /// Empirical quantiles of sampled normalized margins
    /// `f_i'(x - xbar) / ||Sigma_x^{1/2} f_i||`, for disturbances that are not
    /// Gaussian. `noise_map` is the stacked noise-response operator mapping
    /// the disturbance sequence to the state fluctuation.
    Empirical {
        kind: NoiseKind,
        sigma_w: &'a DMatrix<f64>,
        noise_map: &'a DMatrix<f64>,
        samples: usize,
        seed: u64,
    },
}

/// Exact tightening constants for every row of `f`, one per `delta`.
///
/// Rows whose margin has zero variance get `psi = 0` (their tightening
/// offset vanishes regardless).
pub fn exact_psis(
    f: &DMatrix<f64>,
    deltas: &[f64],
    exact: &ExactTightening,
) -> Result<Vec<f64>> {
    if deltas.len() != f.nrows() {
        return Err(Error::Config(format!(
            "{} risk levels for {} rows",
            deltas.len(),
            f.nrows()
        )));
    }
    match exact {
        ExactTightening::Gaussian => deltas.iter().map(|&d| psi_gaussian(d)).collect(),
        ExactTightening::Empirical {
            kind,
            sigma_w,
            noise_map,
            samples,
            seed,
        } => empirical_margin_psis(f, deltas, *kind, sigma_w, noise_map, *samples, *seed),
    }
}

/// Samples the normalized margin of each row through the noise response and
/// returns its `(1 - delta)`-quantile. Each row runs on its own seeded
/// stream keyed by the row index, so results are independent of execution
/// order.
fn empirical_margin_psis(
    f: &DMatrix<f64>,
    deltas: &[f64],
    kind: NoiseKind,
    sigma_w: &DMatrix<f64>,
    noise_map: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = sigma_w.nrows();
    if !noise_map.ncols().is_multiple_of(n) || noise_map.nrows() != f.ncols() {
        return Err(Error::Config("noise_map shape inconsistent with rows and sigma_w".into()));
    }
    let stages = noise_map.ncols() / n;
    let laplace_scales: Option<Vec<f64>> = match kind {
        NoiseKind::Laplacian => {
            let mut off = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off = off.max(sigma_w[(i, j)].abs());
                    }
                }
            }
            if off > 1e-12 {
                return Err(Error::Unsupported(
                    "laplacian margins require a diagonal sigma_w".into(),
                ));
            }
            Some((0..n).map(|j| (sigma_w[(j, j)] / 2.0).sqrt()).collect())
        }
        NoiseKind::Gaussian => None,
    };
    let gaussian_root = match kind {
        NoiseKind::Gaussian => Some(psd_sqrt(sigma_w, 1e-12)?),
        NoiseKind::Laplacian => None,
    };

    // weights of the disturbance components in each row's margin
    let weights = noise_map.transpose() * f.transpose(); // (stages*n) x rows
    let results = map_shards(f.nrows(), |row| -> Result<f64> {
        let c = weights.column(row);
        // margin variance from the stacked second moment
        let mut var = 0.0;
        for s in 0..stages {
            let block = c.rows(s * n, n);
            var += (block.transpose() * sigma_w * block)[(0, 0)];
        }
        let std = var.max(0.0).sqrt();
        if std <= 1e-14 {
            return Ok(0.0);
        }
        let mut rng = stream(shard_seed(seed, row as u64));
        let mut margins = Vec::with_capacity(samples);
        match kind {
            NoiseKind::Laplacian => {
                let scales = laplace_scales.as_ref().unwrap();
                for _ in 0..samples {
                    let mut margin = 0.0;
                    for s in 0..stages {
                        for j in 0..n {
                            margin += c[s * n + j] * laplace(&mut rng, scales[j]);
                        }
                    }
                    margins.push(margin / std);
                }
            }
            NoiseKind::Gaussian => {
                let root = gaussian_root.as_ref().unwrap();
                let mut z = DVector::zeros(n);
                for _ in 0..samples {
                    let mut margin = 0.0;
                    for s in 0..stages {
                        for j in 0..n {
                            z[j] = standard_normal(&mut rng);
                        }
                        let w = root * &z;
                        for j in 0..n {
                            margin += c[s * n + j] * w[j];
                        }
                    }
                    margins.push(margin / std);
                }
            }
        }
        psi_empirical(&margins, deltas[row])
    });
    results.into_iter().collect()
}

/// The exactly tightened and DR tightened sets sharing the normals of the
/// original constraint set: `g_i - psi ||Sigma_x^{1/2} f_i||` with the exact
/// and the distribution-free constant respectively.
pub fn tightened_pair(
    f: &DMatrix<f64>,
    g: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
    allocation: &RiskAllocation,
    exact: &ExactTightening,
) -> Result<(Polytope, Polytope)> {
    tightened_pair_with_deltas(f, g, sigma_x, allocation.deltas(), exact)
}

/// Like [`tightened_pair`] but with raw per-row risk levels, not tied to a
/// joint budget. Useful for set-level analyses of limit cases.
pub fn tightened_pair_with_deltas(
    f: &DMatrix<f64>,
    g: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
    deltas: &[f64],
    exact: &ExactTightening,
) -> Result<(Polytope, Polytope)> {
    if g.len() != f.nrows() || deltas.len() != f.nrows() {
        return Err(Error::Config("tightened_pair: row counts disagree".into()));
    }
    let norms = constraint_norms(f, sigma_x)?;
    let psis_exact = exact_psis(f, deltas, exact)?;
    let mut g_true = DVector::zeros(g.len());
    let mut g_dr = DVector::zeros(g.len());
    for i in 0..g.len() {
        let psi_dr_i = crate::tightening::psi_dr(deltas[i])?;
        g_true[i] = g[i] - psis_exact[i] * norms[i];
        g_dr[i] = g[i] - psi_dr_i * norms[i];
    }
    Ok((
        Polytope::new(f.clone(), g_true)?,
        Polytope::new(f.clone(), g_dr)?,
    ))
}

/// Conservatism: the volume of `X_True (-) X_DR`.
///
/// When the DR set is empty the erosion degenerates to the minuend; the
/// estimate is then the volume of `X_True`, flagged `subtrahend_empty` so the
/// caller can interpret it.
pub fn conservatism(
    f: &DMatrix<f64>,
    g: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
    deltas: &[f64],
    exact: &ExactTightening,
    mc_samples: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    let (x_true, x_dr) = tightened_pair_with_deltas(f, g, sigma_x, deltas, exact)?;
    let erosion = x_true.erode(&x_dr)?;
    let mut estimate = volume(&erosion.poly, mc_samples, seed)?;
    if erosion.subtrahend_empty {
        estimate.flags.push("subtrahend_empty".into());
    }
    if !erosion.unbounded_rows.is_empty() {
        estimate
            .flags
            .push(format!("unbounded_rows: {:?}", erosion.unbounded_rows));
    }
    Ok(estimate)
}
