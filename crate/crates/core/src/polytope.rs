//! Convex polytopes in H-representation `{x | F x <= g}` and the geometric
//! queries used by the conservatism analysis: support values, Chebyshev
//! centers, Pontryagin difference (erosion) and the lifted difference set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpOutcome};

/// Radius above which a Chebyshev ball is reported as unbounded.
const RADIUS_CAP: f64 = 1e12;

/// A convex polytope `{x | F x <= g}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    f: DMatrix<f64>,
    g: DVector<f64>,
}

impl Polytope {
    pub fn new(f: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        if f.nrows() == 0 || f.ncols() == 0 {
            return Err(Error::Config("polytope needs at least one row and one dimension".into()));
        }
        if f.nrows() != g.len() {
            return Err(Error::Config(format!(
                "row count mismatch: F has {} rows, g has {}",
                f.nrows(),
                g.len()
            )));
        }
        if f.iter().any(|x| !x.is_finite()) || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("polytope entries must be finite".into()));
        }
        Ok(Self { f, g })
    }

    /// Axis-aligned box `[lower_j, upper_j]` per coordinate.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        assert_eq!(lower.len(), upper.len());
        let d = lower.len();
        let mut f = DMatrix::zeros(2 * d, d);
        let mut g = DVector::zeros(2 * d);
        for j in 0..d {
            f[(2 * j, j)] = 1.0;
            g[2 * j] = upper[j];
            f[(2 * j + 1, j)] = -1.0;
            g[2 * j + 1] = -lower[j];
        }
        Self::new(f, g)
    }

    /// The canonical empty polytope `{x | 0'x <= -1}` in dimension `dim`.
    pub fn empty(dim: usize) -> Self {
        Self {
            f: DMatrix::zeros(1, dim),
            g: DVector::from_element(1, -1.0),
        }
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let slack = &self.f * x - &self.g;
        slack.iter().all(|&s| s <= tol)
    }

    /// Support value `sup { d'x | x in self }`, `+inf` when the polytope is
    /// unbounded in that direction.
    pub fn support_value(&self, direction: &DVector<f64>) -> Result<f64> {
        match solve_lp(direction, &self.f, &self.g)? {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Unbounded => Ok(f64::INFINITY),
            LpOutcome::Infeasible => Err(Error::EmptyPolytope(
                "support value of an empty polytope".into(),
            )),
        }
    }

    /// Center and radius of the largest inscribed ball. A negative radius
    /// means the polytope is empty (`-inf` when even the zero-normal rows are
    /// contradictory); radius `+inf` means the polytope contains arbitrarily
    /// large balls.
    pub fn chebyshev_center(&self) -> (DVector<f64>, f64) {
        let d = self.dim();
        let r = self.rows();
        let mut a = DMatrix::zeros(r + 1, d + 1);
        let mut b = DVector::zeros(r + 1);
        for i in 0..r {
            for j in 0..d {
                a[(i, j)] = self.f[(i, j)];
            }
            a[(i, d)] = self.f.row(i).norm();
            b[i] = self.g[i];
        }
        a[(r, d)] = 1.0;
        b[r] = RADIUS_CAP;
        let mut c = DVector::zeros(d + 1);
        c[d] = 1.0;
        match solve_lp(&c, &a, &b) {
            Ok(LpOutcome::Optimal { x, value }) => {
                let center = DVector::from_fn(d, |j, _| x[j]);
                let radius = if value >= RADIUS_CAP * (1.0 - 1e-9) {
                    f64::INFINITY
                } else {
                    value
                };
                (center, radius)
            }
            _ => (DVector::zeros(d), f64::NEG_INFINITY),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.chebyshev_center().1 < 0.0
    }

    /// Pontryagin difference `self (-) other`: the points of `self` that stay
    /// inside `self` under every translation from `other`.
    ///
    /// Row-wise, the offsets shrink by the support value of `other` along
    /// each normal, intersected with `self` (which matters when `other` does
    /// not contain the origin). An empty subtrahend leaves `self` unchanged;
    /// a direction in which `other` is unbounded makes the result empty.
    pub fn erode(&self, other: &Polytope) -> Result<Erosion> {
        if self.dim() != other.dim() {
            return Err(Error::Config("erosion operands must share a dimension".into()));
        }
        if other.is_empty() {
            return Ok(Erosion {
                poly: self.clone(),
                subtrahend_empty: true,
                unbounded_rows: Vec::new(),
            });
        }
        let mut unbounded_rows = Vec::new();
        let mut g = self.g.clone();
        for i in 0..self.rows() {
            let normal = self.f.row(i).transpose();
            let s = other.support_value(&normal)?;
            if s.is_infinite() {
                unbounded_rows.push(i);
            } else {
                // intersect the shifted row with the original one
                g[i] = self.g[i] - s.max(0.0);
            }
        }
        let poly = if unbounded_rows.is_empty() {
            Polytope::new(self.f.clone(), g)?
        } else {
            Polytope::empty(self.dim())
        };
        Ok(Erosion {
            poly,
            subtrahend_empty: false,
            unbounded_rows,
        })
    }
}

/// Result of a Pontryagin difference.
#[derive(Debug, Clone)]
pub struct Erosion {
    pub poly: Polytope,
    /// The subtrahend was empty, so the result equals the minuend.
    pub subtrahend_empty: bool,
    /// Rows whose erosion offset was driven to `-inf` by an unbounded
    /// subtrahend; nonempty means the result was replaced by the empty set.
    pub unbounded_rows: Vec<usize>,
}

/// Lifted H-representation of the difference construction: for
/// `z = (x1, x2)` the rows read `F x1 + F x2 <= g_true` and `F x2 <= g_dr`.
pub fn build_lifted_diff(
    f: &DMatrix<f64>,
    g_true: &DVector<f64>,
    g_dr: &DVector<f64>,
) -> Result<Polytope> {
    let r = f.nrows();
    let d = f.ncols();
    if g_true.len() != r || g_dr.len() != r {
        return Err(Error::Config("lifted difference: offset lengths must match F".into()));
    }
    let mut h = DMatrix::zeros(2 * r, 2 * d);
    h.view_mut((0, 0), (r, d)).copy_from(f);
    h.view_mut((0, d), (r, d)).copy_from(f);
    h.view_mut((r, d), (r, d)).copy_from(f);
    let mut offsets = DVector::zeros(2 * r);
    offsets.rows_mut(0, r).copy_from(g_true);
    offsets.rows_mut(r, r).copy_from(g_dr);
    Polytope::new(h, offsets)
}
