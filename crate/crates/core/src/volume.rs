//! Polytope volume estimation: exact products for axis-aligned boxes and
//! seeded rejection sampling from the bounding box otherwise.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{map_shards, map_shards_seq, shard_seed};
use crate::noise::{open_unit, stream};
use crate::polytope::Polytope;

/// How a volume value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMethod {
    AnalyticBox,
    MonteCarlo,
}

/// A volume value with its sampling uncertainty. `std_error` is zero exactly
/// when the value is exact.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: VolumeMethod,
    pub samples: usize,
    pub flags: Vec<String>,
}

impl VolumeEstimate {
    fn exact(value: f64, flags: Vec<String>) -> Self {
        Self {
            value,
            std_error: 0.0,
            method: VolumeMethod::AnalyticBox,
            samples: 0,
            flags,
        }
    }
}

const SHARD_SIZE: usize = 1 << 16;

/// Volume of `poly`. Empty sets report exactly zero; axis-aligned boxes are
/// computed exactly; everything else falls back to rejection sampling with
/// `n_samples` points from the seeded stream.
pub fn volume(poly: &Polytope, n_samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if poly.is_empty() {
        return Ok(VolumeEstimate::exact(0.0, vec!["empty".into()]));
    }
    if let Some(widths) = axis_aligned_widths(poly)? {
        let value = widths.iter().product();
        return Ok(VolumeEstimate::exact(value, Vec::new()));
    }
    volume_monte_carlo(poly, n_samples, seed)
}

/// Interval widths per axis when every row of `poly` is axis-aligned, `None`
/// otherwise. Errors when some axis is unbounded.
fn axis_aligned_widths(poly: &Polytope) -> Result<Option<Vec<f64>>> {
    let d = poly.dim();
    let f = poly.normals();
    let g = poly.offsets();
    let mut lower = vec![f64::NEG_INFINITY; d];
    let mut upper = vec![f64::INFINITY; d];
    for i in 0..poly.rows() {
        let row = f.row(i);
        let mut nonzero = None;
        for j in 0..d {
            if row[j] != 0.0 {
                if nonzero.is_some() {
                    return Ok(None);
                }
                nonzero = Some(j);
            }
        }
        let Some(j) = nonzero else {
            // zero row: vacuous (g >= 0) or the canonical empty marker
            if g[i] < 0.0 {
                return Ok(Some(vec![0.0; d]));
            }
            continue;
        };
        let bound = g[i] / f[(i, j)];
        if f[(i, j)] > 0.0 {
            upper[j] = upper[j].min(bound);
        } else {
            lower[j] = lower[j].max(bound);
        }
    }
    let mut widths = Vec::with_capacity(d);
    for j in 0..d {
        if !lower[j].is_finite() || !upper[j].is_finite() {
            return Err(Error::Unbounded(format!(
                "axis {j} has no finite bounds; volume is undefined"
            )));
        }
        widths.push((upper[j] - lower[j]).max(0.0));
    }
    Ok(Some(widths))
}

/// Rejection-sampling estimate from the axis-aligned bounding box, sharded in
/// shard-index order (parallel when the `parallel` feature is on).
pub fn volume_monte_carlo(poly: &Polytope, n_samples: usize, seed: u64) -> Result<VolumeEstimate> {
    mc_impl(poly, n_samples, seed, false)
}

/// Sequential twin of [`volume_monte_carlo`]; produces bit-identical results
/// and serves as the benchmark baseline.
pub fn volume_monte_carlo_seq(
    poly: &Polytope,
    n_samples: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    mc_impl(poly, n_samples, seed, true)
}

fn mc_impl(poly: &Polytope, n_samples: usize, seed: u64, sequential: bool) -> Result<VolumeEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("monte carlo volume needs at least one sample".into()));
    }
    let mut flags = Vec::new();
    if poly.is_empty() {
        return Ok(VolumeEstimate::exact(0.0, vec!["empty".into()]));
    }
    let d = poly.dim();
    if d > 8 {
        flags.push(format!(
            "dimension {d} > 8: rejection sampling accuracy degrades"
        ));
    }
    // bounding box from per-axis support values
    let mut lower = vec![0.0; d];
    let mut upper = vec![0.0; d];
    for j in 0..d {
        let mut dir = DVector::zeros(d);
        dir[j] = 1.0;
        let up = poly.support_value(&dir)?;
        dir[j] = -1.0;
        let lo = -poly.support_value(&dir)?;
        if !up.is_finite() || !lo.is_finite() {
            return Err(Error::Unbounded(format!(
                "polytope unbounded along axis {j}; monte carlo volume undefined"
            )));
        }
        lower[j] = lo;
        upper[j] = up;
    }
    let box_volume: f64 = (0..d).map(|j| (upper[j] - lower[j]).max(0.0)).product();
    if box_volume == 0.0 {
        return Ok(VolumeEstimate {
            value: 0.0,
            std_error: 0.0,
            method: VolumeMethod::MonteCarlo,
            samples: n_samples,
            flags,
        });
    }

    let n_shards = n_samples.div_ceil(SHARD_SIZE);
    let shard_hits = |shard: usize| -> u64 {
        let start = shard * SHARD_SIZE;
        let count = SHARD_SIZE.min(n_samples - start);
        let mut rng = stream(shard_seed(seed, shard as u64));
        let mut point = DVector::zeros(d);
        let mut hits = 0u64;
        for _ in 0..count {
            for j in 0..d {
                point[j] = lower[j] + (upper[j] - lower[j]) * open_unit(&mut rng);
            }
            if poly.contains(&point, 0.0) {
                hits += 1;
            }
        }
        hits
    };
    let hits: u64 = if sequential {
        map_shards_seq(n_shards, shard_hits).into_iter().sum()
    } else {
        map_shards(n_shards, shard_hits).into_iter().sum()
    };

    let p = hits as f64 / n_samples as f64;
    Ok(VolumeEstimate {
        value: box_volume * p,
        std_error: box_volume * (p * (1.0 - p) / n_samples as f64).sqrt(),
        method: VolumeMethod::MonteCarlo,
        samples: n_samples,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn unit_box_is_exact() {
        let b = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let v = volume(&b, 10, 0).unwrap();
        assert_eq!(v.value, 4.0);
        assert_eq!(v.std_error, 0.0);
        assert_eq!(v.method, VolumeMethod::AnalyticBox);
    }

    #[test]
    fn triangle_monte_carlo() {
        let t = Polytope::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        let v = volume(&t, 1_000_000, 7).unwrap();
        assert_eq!(v.method, VolumeMethod::MonteCarlo);
        assert!(
            (v.value - 0.5).abs() <= 4.0 * v.std_error,
            "value {} +- {}",
            v.value,
            v.std_error
        );
    }

    #[test]
    fn empty_set_is_exact_zero() {
        let e = Polytope::empty(3);
        let v = volume(&e, 1000, 1).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.std_error, 0.0);
        assert!(v.flags.iter().any(|f| f == "empty"));
    }

    #[test]
    fn unbounded_rejected() {
        let half = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert!(matches!(volume(&half, 100, 0), Err(Error::Unbounded(_))));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let t = Polytope::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        let a = volume_monte_carlo(&t, 300_000, 99).unwrap();
        let b = volume_monte_carlo_seq(&t, 300_000, 99).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }

    #[test]
    fn high_dimension_flagged() {
        let b = Polytope::from_box(&[0.0; 9], &[1.0; 9]).unwrap();
        // force the MC path
        let v = volume_monte_carlo(&b, 1000, 0).unwrap();
        assert!(v.flags.iter().any(|f| f.contains("dimension")));
    }
}
