//! Compact dense two-phase simplex for the small linear programs that back
//! polytope queries and QP feasibility checks.
//!
//! Solves `maximize c'x subject to A x <= b` with free variables via the
//! split `x = x+ - x-`. Bland's rule is used for both the entering and the
//! leaving choice, so the method cannot cycle; problem sizes here stay in the
//! tens of rows, where a dense tableau is robust and dependency-free.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Outcome of a linear program.
#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Unbounded,
    Infeasible,
}

const EPS: f64 = 1e-9;
const PIVOT_EPS: f64 = 1e-11;

struct Tableau {
    rows: usize,
    cols: usize, // structural + slack + artificial columns (rhs stored separately)
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    cost: DVector<f64>,
    cost_rhs: f64,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.a[(row, col)];
        for j in 0..self.cols {
            self.a[(row, j)] /= p;
        }
        self.rhs[row] /= p;
        for i in 0..self.rows {
            if i != row {
                let factor = self.a[(i, col)];
                if factor != 0.0 {
                    for j in 0..self.cols {
                        self.a[(i, j)] -= factor * self.a[(row, j)];
                    }
                    self.rhs[i] -= factor * self.rhs[row];
                }
            }
        }
        let cfac = self.cost[col];
        if cfac != 0.0 {
            for j in 0..self.cols {
                self.cost[j] -= cfac * self.a[(row, j)];
            }
            self.cost_rhs -= cfac * self.rhs[row];
        }
        self.basis[row] = col;
    }

    /// Minimizes the current cost row. Returns false when unbounded.
    fn run(&mut self, allowed_cols: usize) -> bool {
        loop {
            // Bland: lowest-index column with negative reduced cost
            let mut entering = None;
            for j in 0..allowed_cols {
                if self.cost[j] < -EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return true;
            };
            // ratio test; ties broken by lowest basis variable index
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let coef = self.a[(i, col)];
                if coef > PIVOT_EPS {
                    let ratio = self.rhs[i] / coef;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - PIVOT_EPS
                                || (ratio < lr + PIVOT_EPS && self.basis[i] < self.basis[li])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((row, _)) = leave else {
                return false;
            };
            self.pivot(row, col);
        }
    }
}

/// Maximizes `c'x` over `{x | a x <= b}` with `x` free.
pub fn solve_lp(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LpOutcome> {
    let m = a.nrows();
    let n = a.ncols();
    if c.len() != n || b.len() != m {
        return Err(Error::Config("LP dimension mismatch".into()));
    }
    if m == 0 {
        // no constraints: optimum is 0 at the origin unless c != 0
        return Ok(if c.amax() > 0.0 {
            LpOutcome::Unbounded
        } else {
            LpOutcome::Optimal {
                x: DVector::zeros(n),
                value: 0.0,
            }
        });
    }

    // columns: x+ (n) | x- (n) | slack (m) | artificial (n_art)
    let structural = 2 * n + m;
    let mut need_artificial = Vec::new();
    for i in 0..m {
        if b[i] < 0.0 {
            need_artificial.push(i);
        }
    }
    let n_art = need_artificial.len();
    let cols = structural + n_art;

    let mut t = Tableau {
        rows: m,
        cols,
        a: DMatrix::zeros(m, cols),
        rhs: DVector::zeros(m),
        cost: DVector::zeros(cols),
        cost_rhs: 0.0,
        basis: vec![0; m],
    };

    let mut art_idx = 0;
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t.a[(i, j)] = flip * a[(i, j)];
            t.a[(i, n + j)] = -flip * a[(i, j)];
        }
        t.a[(i, 2 * n + i)] = flip; // slack
        t.rhs[i] = flip * b[i];
        if flip < 0.0 {
            let col = structural + art_idx;
            t.a[(i, col)] = 1.0;
            t.basis[i] = col;
            art_idx += 1;
        } else {
            t.basis[i] = 2 * n + i;
        }
    }

    // phase 1: minimize the sum of artificials
    if n_art > 0 {
        for j in 0..n_art {
            t.cost[structural + j] = 1.0;
        }
        // make reduced costs consistent with the initial basis
        for i in 0..m {
            if t.basis[i] >= structural {
                for j in 0..cols {
                    t.cost[j] -= t.a[(i, j)];
                }
                t.cost_rhs -= t.rhs[i];
            }
        }
        let bounded = t.run(cols);
        debug_assert!(bounded, "phase 1 objective is bounded below by zero");
        if -t.cost_rhs > 1e-7 {
            return Ok(LpOutcome::Infeasible);
        }
        // pivot any artificial still in the basis out to a structural column
        for i in 0..m {
            if t.basis[i] >= structural {
                let mut pivoted = false;
                for j in 0..structural {
                    if t.a[(i, j)].abs() > PIVOT_EPS {
                        t.pivot(i, j);
                        pivoted = true;
                        break;
                    }
                }
                if !pivoted {
                    // redundant row: freeze it by zeroing
                    for j in 0..cols {
                        t.a[(i, j)] = 0.0;
                    }
                    t.rhs[i] = 0.0;
                }
            }
        }
    }

    // phase 2: minimize -c'x over structural columns only
    t.cost.fill(0.0);
    t.cost_rhs = 0.0;
    for j in 0..n {
        t.cost[j] = -c[j];
        t.cost[n + j] = c[j];
    }
    for i in 0..m {
        let bj = t.basis[i];
        if bj < structural {
            let factor = t.cost[bj];
            if factor != 0.0 {
                for j in 0..cols {
                    t.cost[j] -= factor * t.a[(i, j)];
                }
                t.cost_rhs -= factor * t.rhs[i];
            }
        }
    }
    if !t.run(structural) {
        return Ok(LpOutcome::Unbounded);
    }

    let mut x = DVector::zeros(n);
    for i in 0..m {
        let bj = t.basis[i];
        if bj < n {
            x[bj] += t.rhs[i];
        } else if bj < 2 * n {
            x[bj - n] -= t.rhs[i];
        }
    }
    Ok(LpOutcome::Optimal {
        value: c.dot(&x),
        x,
    })
}
