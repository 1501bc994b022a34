//! Regret analysis of the paired closed loops: accumulated realized-cost
//! difference, the gap between the two optimal value functions, and its
//! closed-form decomposition at time steps where the two controllers share
//! one active set.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::model::PredictionMatrices;
use crate::qp::RowKind;

/// Which controller produced a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    FullyInformed,
    Dr,
}

/// Realized closed-loop record of one controller: states, applied inputs,
/// optimal values and active sets, all of equal length.
#[derive(Debug, Clone)]
pub struct ControllerHistory {
    pub kind: ControllerKind,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub values: Vec<f64>,
    pub active_sets: Vec<Vec<usize>>,
}

impl ControllerHistory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.states.len();
        if self.inputs.len() != l || self.values.len() != l || self.active_sets.len() != l {
            return Err(Error::Config("history fields have unequal lengths".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("history contains non-finite values".into()));
        }
        Ok(())
    }
}

fn check_paired(star: &ControllerHistory, dagger: &ControllerHistory) -> Result<()> {
    star.validate()?;
    dagger.validate()?;
    if star.len() != dagger.len() {
        return Err(Error::Config(format!(
            "paired histories must have equal lengths ({} vs {})",
            star.len(),
            dagger.len()
        )));
    }
    Ok(())
}

/// Accumulated closed-loop cost difference up to each step:
/// `sum_{i<=k} (||x_i^dag||_Q^2 + ||u_i^dag||_R^2) - (||x_i^*||_Q^2 + ||u_i^*||_R^2)`.
pub fn closed_loop_regret(
    star: &ControllerHistory,
    dagger: &ControllerHistory,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    check_paired(star, dagger)?;
    let mut out = Vec::with_capacity(star.len());
    let mut acc = 0.0;
    for k in 0..star.len() {
        let stage_star = quad_form(q, &star.states[k]) + quad_form(r, &star.inputs[k]);
        let stage_dagger = quad_form(q, &dagger.states[k]) + quad_form(r, &dagger.inputs[k]);
        acc += stage_dagger - stage_star;
        out.push(acc);
    }
    Ok(out)
}

/// Elementwise difference of the optimal value sequences.
pub fn suboptimality_gap(star_values: &[f64], dagger_values: &[f64]) -> Result<Vec<f64>> {
    if star_values.len() != dagger_values.len() {
        return Err(Error::Config("value sequences must have equal lengths".into()));
    }
    Ok(dagger_values
        .iter()
        .zip(star_values)
        .map(|(d, s)| d - s)
        .collect())
}

/// Steps whose active sets coincide as sets (order-insensitive).
pub fn matched_steps(star: &ControllerHistory, dagger: &ControllerHistory) -> Vec<usize> {
    let same = |a: &[usize], b: &[usize]| {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    };
    (0..star.len().min(dagger.len()))
        .filter(|&k| same(&star.active_sets[k], &dagger.active_sets[k]))
        .collect()
}

/// First step after which no constraint is active for either controller, for
/// the rest of the recording.
pub fn detect_phi_entry(star: &ControllerHistory, dagger: &ControllerHistory) -> Option<usize> {
    let l = star.len().min(dagger.len());
    let mut entry = None;
    for k in (0..l).rev() {
        if star.active_sets[k].is_empty() && dagger.active_sets[k].is_empty() {
            entry = Some(k);
        } else {
            break;
        }
    }
    entry
}

/// The active rows of the shared constraint set at a matched step, carrying
/// both the input-space rows and the original stacked-space data needed by
/// the gap decomposition.
#[derive(Debug, Clone)]
pub struct ActiveRows {
    /// Active rows of `M` in ascending global row order.
    pub normals: DMatrix<f64>,
    /// Row kinds aligned with `normals`.
    pub kinds: Vec<RowKind>,
    /// Raw offsets of the active input rows.
    pub input_offsets: DVector<f64>,
    /// Original stacked-space normals of the active state rows.
    pub state_normals: DMatrix<f64>,
    /// Raw (untightened) offsets of the active state rows.
    pub state_offsets: DVector<f64>,
}

/// Coefficients of the suboptimality gap at matched active sets, quadratic in
/// the current states and the tightening constants.
#[derive(Debug, Clone)]
pub struct GapTerms {
    /// Quadratic coefficient in the states (n x n).
    pub state_quad: DMatrix<f64>,
    /// Quadratic coefficient in the tightening offsets (a2 x a2).
    pub tighten_quad: DMatrix<f64>,
    /// State/tightening cross coefficient (n x a2).
    pub cross: DMatrix<f64>,
    /// Linear coefficient in the states (n).
    pub state_lin: DVector<f64>,
    /// Linear coefficient in the tightening offsets (a2).
    pub tighten_lin: DVector<f64>,
    /// State-to-input-sequence gain under the fixed active set (Nm x n).
    pub input_gain: DMatrix<f64>,
    /// Map from the state to the linear cost term, `2 S'Q T` (Nm x n).
    pub cost_map: DMatrix<f64>,
    /// Input-sequence offset induced by the raw constraint offsets (Nm).
    pub offset_input: DVector<f64>,
}

/// Builds the gap decomposition for one matched active set.
///
/// With the active rows fixed, the optimizer is affine in the current state
/// and in the tightening offsets; substituting it into the quadratic cost and
/// differencing the two controllers leaves the six-term expression evaluated
/// by [`gap_closed_form`].
pub fn gap_terms(
    pred: &PredictionMatrices,
    hessian: &DMatrix<f64>,
    active: &ActiveRows,
) -> Result<GapTerms> {
    let nm = pred.input_len();
    let chol = Cholesky::new(hessian.clone())
        .ok_or_else(|| Error::Validation("hessian is not positive definite".into()))?;
    let cost_map = 2.0 * pred.input_map.transpose() * &pred.state_weights * &pred.state_transition;
    let aqa = pred.state_transition.transpose() * &pred.state_weights * &pred.state_transition;

    let a_total = active.kinds.len();
    let a_state = active
        .kinds
        .iter()
        .filter(|k| **k == RowKind::State)
        .count();
    let a_input = a_total - a_state;
    if active.normals.nrows() != a_total
        || active.input_offsets.len() != a_input
        || active.state_normals.nrows() != a_state
        || active.state_offsets.len() != a_state
    {
        return Err(Error::Config("active-row pieces have inconsistent sizes".into()));
    }

    let (input_gain, v2, offset_input) = if a_total == 0 {
        (
            -chol.solve(&cost_map),
            DMatrix::zeros(nm, 0),
            DVector::zeros(nm),
        )
    } else {
        let hinv_mt = chol.solve(&active.normals.transpose());
        let schur = &active.normals * &hinv_mt;
        let schur = 0.5 * (&schur + schur.transpose());
        let schur_chol = Cholesky::new(schur).ok_or_else(|| Error::LicqViolation {
            detail: "matched active rows are rank deficient".into(),
        })?;
        let v = hinv_mt * schur_chol.inverse(); // Nm x a
        let mut v1 = DMatrix::zeros(nm, a_input);
        let mut v2 = DMatrix::zeros(nm, a_state);
        let (mut i1, mut i2) = (0, 0);
        for (col, kind) in active.kinds.iter().enumerate() {
            match kind {
                RowKind::Input => {
                    v1.set_column(i1, &v.column(col));
                    i1 += 1;
                }
                RowKind::State => {
                    v2.set_column(i2, &v.column(col));
                    i2 += 1;
                }
            }
        }
        let hinv_cost = chol.solve(&cost_map);
        let gain = &v * (&active.normals * &hinv_cost) - &hinv_cost
            - &v2 * (&active.state_normals * &pred.state_transition);
        let offset = &v1 * &active.input_offsets + &v2 * &active.state_offsets;
        (gain, v2, offset)
    };

    let h_alpha = hessian * &input_gain;
    let state_quad = 0.5 * input_gain.transpose() * &h_alpha
        + 0.5 * (cost_map.transpose() * &input_gain + input_gain.transpose() * &cost_map)
        + aqa;
    let tighten_quad = 0.5 * v2.transpose() * hessian * &v2;
    let cross = 0.5 * (cost_map.transpose() * &v2 + h_alpha.transpose() * &v2);
    let state_lin = cost_map.transpose() * &offset_input + h_alpha.transpose() * &offset_input;
    let tighten_lin = v2.transpose() * hessian * &offset_input;

    Ok(GapTerms {
        state_quad: 0.5 * (&state_quad + state_quad.transpose()),
        tighten_quad: 0.5 * (&tighten_quad + tighten_quad.transpose()),
        cross,
        state_lin,
        tighten_lin,
        input_gain,
        cost_map,
        offset_input,
    })
}

/// Evaluates the matched-active-set gap expression.
///
/// `psi_star_act` / `psi_dagger_act` are the tightening constants of the two
/// controllers on the active state rows, `v_act` the corresponding
/// `||Sigma_x^{1/2} f_i||` norms (shared between controllers).
pub fn gap_closed_form(
    terms: &GapTerms,
    x_star: &DVector<f64>,
    x_dagger: &DVector<f64>,
    psi_star_act: &[f64],
    psi_dagger_act: &[f64],
    v_act: &[f64],
) -> f64 {
    let a2 = v_act.len();
    debug_assert_eq!(psi_star_act.len(), a2);
    debug_assert_eq!(psi_dagger_act.len(), a2);
    let dx = x_star - x_dagger;
    let sx = x_star + x_dagger;
    let dpsi_v = DVector::from_fn(a2, |i, _| (psi_star_act[i] - psi_dagger_act[i]) * v_act[i]);
    let spsi_v = DVector::from_fn(a2, |i, _| (psi_star_act[i] + psi_dagger_act[i]) * v_act[i]);

    let mut gap = -(dx.transpose() * &terms.state_quad * &sx)[(0, 0)];
    if a2 > 0 {
        gap -= (dpsi_v.transpose() * &terms.tighten_quad * &spsi_v)[(0, 0)];
        gap += (dx.transpose() * &terms.cross * &spsi_v)[(0, 0)];
        gap += (sx.transpose() * &terms.cross * &dpsi_v)[(0, 0)];
        gap += dpsi_v.dot(&terms.tighten_lin);
    }
    gap -= dx.dot(&terms.state_lin);
    gap
}

/// Gap when no constraints are active: `-(x* - xd)' L (x* + xd)` with
/// `L = T'QT - 1/2 C' H^-1 C` (`C` the state-to-linear-cost map).
pub fn gap_unconstrained(l: &DMatrix<f64>, x_star: &DVector<f64>, x_dagger: &DVector<f64>) -> f64 {
    let dx = x_star - x_dagger;
    let sx = x_star + x_dagger;
    -(dx.transpose() * l * &sx)[(0, 0)]
}

/// The unconstrained quadratic coefficient used by [`gap_unconstrained`].
pub fn unconstrained_state_quad(
    pred: &PredictionMatrices,
    hessian: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(hessian.clone())
        .ok_or_else(|| Error::Validation("hessian is not positive definite".into()))?;
    let cost_map = 2.0 * pred.input_map.transpose() * &pred.state_weights * &pred.state_transition;
    let aqa = pred.state_transition.transpose() * &pred.state_weights * &pred.state_transition;
    let l = aqa - 0.5 * cost_map.transpose() * chol.solve(&cost_map);
    Ok(0.5 * (&l + l.transpose()))
}

/// Regret quantities of one paired run.
#[derive(Debug, Clone)]
pub struct RegretSeries {
    pub closed_loop: Vec<f64>,
    pub gap: Vec<f64>,
    pub matched_steps: Vec<usize>,
    pub phi_entry: Option<usize>,
}

impl RegretSeries {
    pub fn from_histories(
        star: &ControllerHistory,
        dagger: &ControllerHistory,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> Result<Self> {
        Ok(Self {
            closed_loop: closed_loop_regret(star, dagger, q, r)?,
            gap: suboptimality_gap(&star.values, &dagger.values)?,
            matched_steps: matched_steps(star, dagger),
            phi_entry: detect_phi_entry(star, dagger),
        })
    }
}

/// Gap magnitudes below this are treated as numerically converged.
pub const GAP_FLOOR: f64 = 1e-14;

/// Empirical convergence diagnostics after the constraint-free entry point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConvergenceReport {
    /// OLS slope of `log |gap_k|` over the post-entry window (`None` when
    /// every gap is below [`GAP_FLOOR`], i.e. converged outright).
    pub gap_log_slope: Option<f64>,
    /// All post-entry gaps were below the floor.
    pub gap_below_floor: bool,
    /// `max_k |R_k - R_{k-1}|` over the trailing window.
    pub regret_increment_tail_max: f64,
    /// Number of trailing increments inspected.
    pub tail_window: usize,
    /// False when fewer than 5 post-entry steps were available.
    pub reliable: bool,
}

/// Fits the post-entry decay diagnostics. Requires `phi_entry`.
pub fn convergence_report(series: &RegretSeries, tail_window: usize) -> Result<ConvergenceReport> {
    let Some(entry) = series.phi_entry else {
        return Err(Error::Config(
            "convergence diagnostics need a detected constraint-free entry step".into(),
        ));
    };
    let gaps = &series.gap[entry..];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &g) in gaps.iter().enumerate() {
        if g.abs() >= GAP_FLOOR {
            xs.push((entry + i) as f64);
            ys.push(g.abs().ln());
        }
    }
    let gap_below_floor = xs.is_empty();
    let gap_log_slope = if gap_below_floor { None } else { Some(ols_slope(&xs, &ys)) };

    let increments: Vec<f64> = series
        .closed_loop
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .collect();
    let take = tail_window.min(increments.len());
    let regret_increment_tail_max = increments[increments.len() - take..]
        .iter()
        .copied()
        .fold(0.0, f64::max);

    Ok(ConvergenceReport {
        gap_log_slope,
        gap_below_floor,
        regret_increment_tail_max,
        tail_window: take,
        reliable: gaps.len() >= 5,
    })
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(
        kind: ControllerKind,
        states: Vec<Vec<f64>>,
        inputs: Vec<Vec<f64>>,
        active: Vec<Vec<usize>>,
    ) -> ControllerHistory {
        let values = vec![0.0; states.len()];
        ControllerHistory {
            kind,
            states: states.into_iter().map(DVector::from_vec).collect(),
            inputs: inputs.into_iter().map(DVector::from_vec).collect(),
            values,
            active_sets: active,
        }
    }

    #[test]
    fn identical_histories_zero_regret() {
        let h = history(
            ControllerKind::FullyInformed,
            vec![vec![1.0, 0.0]; 4],
            vec![vec![0.5]; 4],
            vec![vec![]; 4],
        );
        let mut d = h.clone();
        d.kind = ControllerKind::Dr;
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 0.1);
        let reg = closed_loop_regret(&h, &d, &q, &r).unwrap();
        assert!(reg.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_hand_value() {
        let star = history(
            ControllerKind::FullyInformed,
            vec![vec![2.0]],
            vec![vec![1.0]],
            vec![vec![]],
        );
        let dagger = history(
            ControllerKind::Dr,
            vec![vec![2.0]],
            vec![vec![2.0]],
            vec![vec![]],
        );
        let q = DMatrix::zeros(1, 1);
        let r = DMatrix::from_element(1, 1, 0.1);
        let reg = closed_loop_regret(&star, &dagger, &q, &r).unwrap();
        assert!((reg[0] - 0.1 * (4.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn telescoping_increments() {
        let star = history(
            ControllerKind::FullyInformed,
            vec![vec![1.0], vec![0.5], vec![0.25]],
            vec![vec![0.2], vec![0.1], vec![0.0]],
            vec![vec![]; 3],
        );
        let dagger = history(
            ControllerKind::Dr,
            vec![vec![1.1], vec![0.6], vec![0.2]],
            vec![vec![0.3], vec![0.05], vec![0.02]],
            vec![vec![]; 3],
        );
        let q = DMatrix::from_element(1, 1, 2.0);
        let r = DMatrix::from_element(1, 1, 0.1);
        let reg = closed_loop_regret(&star, &dagger, &q, &r).unwrap();
        for k in 1..3 {
            let stage = |h: &ControllerHistory| {
                quad_form(&q, &h.states[k]) + quad_form(&r, &h.inputs[k])
            };
            let step = stage(&dagger) - stage(&star);
            assert!((reg[k] - reg[k - 1] - step).abs() <= 1e-12);
        }
    }

    #[test]
    fn gap_examples() {
        assert_eq!(suboptimality_gap(&[3.0], &[5.0]).unwrap(), vec![2.0]);
        assert_eq!(suboptimality_gap(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(suboptimality_gap(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matched_step_semantics() {
        let star = history(
            ControllerKind::FullyInformed,
            vec![vec![0.0]; 3],
            vec![vec![0.0]; 3],
            vec![vec![], vec![2, 1], vec![0]],
        );
        let dagger = history(
            ControllerKind::Dr,
            vec![vec![0.0]; 3],
            vec![vec![0.0]; 3],
            vec![vec![], vec![1, 2], vec![3]],
        );
        assert_eq!(matched_steps(&star, &dagger), vec![0, 1]);
    }

    #[test]
    fn phi_entry_detection() {
        let empty = history(
            ControllerKind::FullyInformed,
            vec![vec![0.0]; 3],
            vec![vec![0.0]; 3],
            vec![vec![]; 3],
        );
        assert_eq!(detect_phi_entry(&empty, &empty), Some(0));

        let tail_active = history(
            ControllerKind::Dr,
            vec![vec![0.0]; 3],
            vec![vec![0.0]; 3],
            vec![vec![], vec![], vec![1]],
        );
        assert_eq!(detect_phi_entry(&empty, &tail_active), None);

        let mid = history(
            ControllerKind::Dr,
            vec![vec![0.0]; 4],
            vec![vec![0.0]; 4],
            vec![vec![1], vec![], vec![], vec![]],
        );
        assert_eq!(detect_phi_entry(&empty, &mid), Some(1));
    }

    #[test]
    fn unconstrained_gap_antisymmetry() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let a = DVector::from_vec(vec![1.0, -1.0]);
        let b = DVector::from_vec(vec![0.5, 0.25]);
        assert_eq!(gap_unconstrained(&l, &a, &a), 0.0);
        let g1 = gap_unconstrained(&l, &a, &b);
        let g2 = gap_unconstrained(&l, &b, &a);
        assert!((g1 + g2).abs() < 1e-12);
    }

    #[test]
    fn synthetic_decay_slope() {
        let series = RegretSeries {
            closed_loop: vec![1.0; 40],
            gap: (0..40).map(|k| 3.0 * 0.5f64.powi(k)).collect(),
            matched_steps: (0..40).collect(),
            phi_entry: Some(0),
        };
        let rep = convergence_report(&series, 20).unwrap();
        assert!((rep.gap_log_slope.unwrap() - 0.5f64.ln()).abs() < 1e-9);
        assert_eq!(rep.regret_increment_tail_max, 0.0);
        assert!(rep.reliable);
    }

    #[test]
    fn floored_gaps_count_as_converged() {
        let series = RegretSeries {
            closed_loop: vec![0.0; 10],
            gap: vec![1e-16; 10],
            matched_steps: vec![],
            phi_entry: Some(2),
        };
        let rep = convergence_report(&series, 5).unwrap();
        assert!(rep.gap_below_floor);
        assert!(rep.gap_log_slope.is_none());
    }

    #[test]
    fn short_window_marked_unreliable() {
        let series = RegretSeries {
            closed_loop: vec![0.0; 4],
            gap: vec![1.0, 0.5, 0.25, 0.125],
            matched_steps: vec![],
            phi_entry: Some(1),
        };
        let rep = convergence_report(&series, 10).unwrap();
        assert!(!rep.reliable);
    }

    #[test]
    fn missing_phi_entry_is_an_error() {
        let series = RegretSeries {
            closed_loop: vec![0.0; 4],
            gap: vec![1.0; 4],
            matched_steps: vec![],
            phi_entry: None,
        };
        assert!(convergence_report(&series, 10).is_err());
    }
}
