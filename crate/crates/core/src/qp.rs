//! Dense QP assembly and an active-set solver built on the closed-form
//! solution of the equality-constrained subproblem.
//!
//! The surrogate optimal control problem reduces to
//! `min 1/2 ||u||^2_H + h'u + r  s.t.  M u <= b` with `H` positive definite.
//! For a known active set the optimizer is
//! `u = (V M~ H^-1 - H^-1) h + V b~` with
//! `V = H^-1 M~' (M~ H^-1 M~')^-1`; the solver constructs that active set
//! iteratively, walking from a feasible point toward each working-set
//! optimum, adding the first blocking row and dropping rows with negative
//! multipliers until the KKT conditions hold.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::lp::{solve_lp, LpOutcome};
use crate::model::PredictionMatrices;
use crate::polytope::Polytope;
use crate::tightening::{constraint_norms, TighteningSpec};

/// Which physical constraint a row of `M` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Input,
    State,
}

/// A dense strictly convex QP `min 1/2 u'Hu + h'u + r  s.t.  M u <= b`.
#[derive(Debug, Clone)]
pub struct QPData {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub constraints: DMatrix<f64>,
    pub offsets: DVector<f64>,
    pub row_kind: Vec<RowKind>,
}

impl QPData {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
        constraints: DMatrix<f64>,
        offsets: DVector<f64>,
        row_kind: Vec<RowKind>,
    ) -> Result<Self> {
        let dim = hessian.nrows();
        if hessian.ncols() != dim || linear.len() != dim {
            return Err(Error::Config("hessian and linear term sizes disagree".into()));
        }
        if constraints.nrows() != offsets.len() || constraints.nrows() != row_kind.len() {
            return Err(Error::Config("constraint row counts disagree".into()));
        }
        if constraints.nrows() > 0 && constraints.ncols() != dim {
            return Err(Error::Config("constraint columns must match the decision dimension".into()));
        }
        if crate::linalg::asymmetry(&hessian) > 1e-9 {
            return Err(Error::Validation("hessian must be symmetric".into()));
        }
        let min_eig = hessian.clone().symmetric_eigenvalues().min();
        if min_eig <= 1e-12 {
            return Err(Error::Validation(format!(
                "hessian must be PD; smallest eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self {
            hessian,
            linear,
            constant,
            constraints,
            offsets,
            row_kind,
        })
    }

    pub fn rows(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }
}

/// Maximum norms of the four KKT residuals.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// `||H u + h + M' mu||_inf`
    pub stationarity: f64,
    /// `max(0, max_i (M_i u - b_i))`
    pub primal: f64,
    /// `max(0, -min_i mu_i)`
    pub dual: f64,
    /// `max_i |mu_i (M_i u - b_i)|`
    pub complementarity: f64,
}

impl KktReport {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.primal <= tol
            && self.dual <= tol
            && self.complementarity <= tol
    }

    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Optimizer, multipliers, active set and certified residuals of a solve.
#[derive(Debug, Clone)]
pub struct QPSolution {
    pub u: DVector<f64>,
    /// Full-length multiplier vector, zero on inactive rows.
    pub mu: DVector<f64>,
    /// Ascending row indices active at the optimizer.
    pub active_set: Vec<usize>,
    /// `1/2 ||u||^2_H + h'u + r`.
    pub value: f64,
    pub iterations: usize,
    pub kkt: KktReport,
}

/// Cost pieces of the surrogate problem: `H = 2(B'QB + R)`,
/// `h = 2 B'QA x0` and the input-independent constant
/// `r = Tr(Q G Sigma G') + ||x0||^2_{A'QA}`.
pub fn assemble_cost(
    pred: &PredictionMatrices,
    x0: &DVector<f64>,
    sigma_w: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    if x0.len() != pred.state_dim {
        return Err(Error::Config("x0 length must equal the state dimension".into()));
    }
    if sigma_w.shape() != (pred.state_dim, pred.state_dim) {
        return Err(Error::Config("sigma_w must be n x n".into()));
    }
    let qb = &pred.state_weights * &pred.input_map;
    let hessian = 2.0 * (pred.input_map.transpose() * &qb + &pred.input_weights);
    let hessian = 0.5 * (&hessian + hessian.transpose());
    let linear = 2.0 * pred.input_map.transpose() * &pred.state_weights * (&pred.state_transition * x0);
    let stacked = pred.stacked_noise_cov(sigma_w);
    let trace_term = (&pred.state_weights
        * (&pred.noise_map * stacked * pred.noise_map.transpose()))
        .trace();
    let aqa = pred.state_transition.transpose() * &pred.state_weights * &pred.state_transition;
    let constant = trace_term + quad_form(&aqa, x0);
    Ok((hessian, linear, constant))
}

/// Constraint rows of the surrogate problem with pruning bookkeeping.
#[derive(Debug, Clone)]
pub struct AssembledConstraints {
    pub normals: DMatrix<f64>,
    pub offsets: DVector<f64>,
    pub row_kind: Vec<RowKind>,
    /// Indices (into the caller's state rows) that survived pruning.
    pub kept_state_rows: Vec<usize>,
}

/// Maps the tightened state constraints into input space:
/// `(f_i' S) u <= g_i - f_i' T x0 - psi_i ||Sigma_x^{1/2} f_i||` stacked under
/// the input rows.
///
/// State rows whose input-space normal vanishes are constant constraints: a
/// nonnegative offset is vacuous and pruned, a negative one makes the problem
/// infeasible at assembly. Both controllers of a paired run share the same
/// normals, so pruning (which only inspects normals) keeps row indices
/// aligned between them.
pub fn assemble_constraints(
    pred: &PredictionMatrices,
    input_poly: &Polytope,
    state_f: &DMatrix<f64>,
    state_g: &DVector<f64>,
    tightening: &TighteningSpec,
    x0: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
) -> Result<AssembledConstraints> {
    let nm = pred.input_len();
    if input_poly.dim() != nm {
        return Err(Error::Config(format!(
            "input polytope lives in dimension {}, expected {nm}",
            input_poly.dim()
        )));
    }
    if state_f.ncols() != pred.stacked_rows() || state_f.nrows() != state_g.len() {
        return Err(Error::Config("state rows must span the stacked horizon".into()));
    }
    if tightening.psis.len() != state_f.nrows() {
        return Err(Error::Config(format!(
            "{} tightening constants for {} state rows",
            tightening.psis.len(),
            state_f.nrows()
        )));
    }

    let input_space_normals = state_f * &pred.input_map; // f_i' S as rows
    let norms = constraint_norms(state_f, sigma_x)?;
    let free_response = state_f * (&pred.state_transition * x0);

    let g_scale = 1.0 + state_g.amax();
    let mut kept_state_rows = Vec::new();
    for i in 0..state_f.nrows() {
        let offset = state_g[i] - free_response[i] - tightening.psis[i] * norms[i];
        if input_space_normals.row(i).amax() <= 1e-12 {
            if offset < -1e-9 * g_scale {
                return Err(Error::Infeasible {
                    rows: vec![i],
                    violation: -offset,
                });
            }
            continue; // constant row, vacuously satisfied
        }
        kept_state_rows.push(i);
    }

    let n_input = input_poly.rows();
    let total = n_input + kept_state_rows.len();
    let mut normals = DMatrix::zeros(total, nm);
    let mut offsets = DVector::zeros(total);
    let mut row_kind = Vec::with_capacity(total);
    normals
        .view_mut((0, 0), (n_input, nm))
        .copy_from(input_poly.normals());
    offsets.rows_mut(0, n_input).copy_from(input_poly.offsets());
    row_kind.extend(std::iter::repeat_n(RowKind::Input, n_input));
    for (k, &i) in kept_state_rows.iter().enumerate() {
        normals
            .view_mut((n_input + k, 0), (1, nm))
            .copy_from(&input_space_normals.row(i));
        offsets[n_input + k] = state_g[i] - free_response[i] - tightening.psis[i] * norms[i];
        row_kind.push(RowKind::State);
    }

    Ok(AssembledConstraints {
        normals,
        offsets,
        row_kind,
        kept_state_rows,
    })
}

/// Solves the equality-constrained subproblem for a fixed active set.
///
/// Returns the optimizer and the active multipliers. The active rows must be
/// linearly independent; that is enforced by a pivoted rank check with
/// threshold `1e-10 ||M_act||` before any factorization.
pub fn solve_equality_kkt(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    m_act: &DMatrix<f64>,
    b_act: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = cholesky_of(hessian)?;
    solve_equality_kkt_factored(&chol, linear, m_act, b_act)
}

fn cholesky_of(hessian: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(hessian.clone())
        .ok_or_else(|| Error::Validation("hessian is not positive definite".into()))
}

fn solve_equality_kkt_factored(
    hessian_chol: &Cholesky<f64, Dyn>,
    linear: &DVector<f64>,
    m_act: &DMatrix<f64>,
    b_act: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let a = m_act.nrows();
    if a == 0 {
        return Ok((-hessian_chol.solve(linear), DVector::zeros(0)));
    }
    check_licq(m_act)?;

    let hinv_mt = hessian_chol.solve(&m_act.transpose()); // H^-1 M'
    let schur = m_act * &hinv_mt;
    let schur = 0.5 * (&schur + schur.transpose());
    let schur_chol = Cholesky::new(schur).ok_or_else(|| Error::LicqViolation {
        detail: "Schur complement of the active rows is singular".into(),
    })?;
    let hinv_h = hessian_chol.solve(linear);
    let mu = -schur_chol.solve(&(m_act * &hinv_h + b_act));
    let u = -hinv_h - &hinv_mt * &mu;
    Ok((u, mu))
}

/// Pivoted rank check on the active rows: LICQ requires full row rank.
fn check_licq(m_act: &DMatrix<f64>) -> Result<()> {
    let rows = m_act.nrows();
    if rows > m_act.ncols() {
        return Err(Error::LicqViolation {
            detail: format!("{rows} active rows in dimension {}", m_act.ncols()),
        });
    }
    let qr = m_act.transpose().col_piv_qr();
    let r = qr.r();
    let tol = 1e-10 * m_act.norm();
    for i in 0..rows {
        if r[(i, i)].abs() <= tol {
            return Err(Error::LicqViolation {
                detail: format!("pivot {i} below threshold {tol:.3e}"),
            });
        }
    }
    Ok(())
}

/// KKT residual report for a candidate primal/dual pair.
pub fn kkt_residuals(qp: &QPData, u: &DVector<f64>, mu: &DVector<f64>) -> KktReport {
    let stationarity = (&qp.hessian * u + &qp.linear + qp.constraints.transpose() * mu).amax();
    let mut primal = 0.0f64;
    let mut dual = 0.0f64;
    let mut complementarity = 0.0f64;
    if qp.rows() > 0 {
        let slack = &qp.constraints * u - &qp.offsets;
        for i in 0..qp.rows() {
            primal = primal.max(slack[i]);
            dual = dual.max(-mu[i]);
            complementarity = complementarity.max((mu[i] * slack[i]).abs());
        }
        primal = primal.max(0.0);
        dual = dual.max(0.0);
    }
    KktReport {
        stationarity,
        primal,
        dual,
        complementarity,
    }
}

/// Objective value `1/2 ||u||^2_H + h'u + r`.
pub fn evaluate_value(qp: &QPData, u: &DVector<f64>) -> f64 {
    0.5 * quad_form(&qp.hessian, u) + qp.linear.dot(u) + qp.constant
}

/// Phase-1 feasibility: minimizes the worst violation `s` of `M u - b <= s`
/// (clamped below at -1; only the sign matters). Returns a feasible point or
/// the infeasibility certificate.
fn phase_one(qp: &QPData, tol_p: f64) -> Result<DVector<f64>> {
    let rows = qp.rows();
    let dim = qp.dim();
    let mut a = DMatrix::zeros(rows + 1, dim + 1);
    let mut b = DVector::zeros(rows + 1);
    a.view_mut((0, 0), (rows, dim)).copy_from(&qp.constraints);
    for i in 0..rows {
        a[(i, dim)] = -1.0;
        b[i] = qp.offsets[i];
    }
    a[(rows, dim)] = -1.0;
    b[rows] = 1.0;
    let mut c = DVector::zeros(dim + 1);
    c[dim] = -1.0;
    match solve_lp(&c, &a, &b)? {
        LpOutcome::Optimal { x, .. } => {
            let s = x[dim];
            let u = DVector::from_fn(dim, |j, _| x[j]);
            if s > tol_p {
                let slack = &qp.constraints * &u - &qp.offsets;
                let witness: Vec<usize> = (0..rows)
                    .filter(|&i| slack[i] >= s - tol_p)
                    .collect();
                return Err(Error::Infeasible {
                    rows: witness,
                    violation: s,
                });
            }
            Ok(u)
        }
        _ => Err(Error::Validation(
            "phase-1 feasibility LP terminated abnormally".into(),
        )),
    }
}

/// Solves the QP with an active-set method.
///
/// The iteration starts from the warm-start working set when its
/// equality-constrained solution is primal feasible, otherwise from a
/// phase-1 feasible point with an empty working set. Each step walks toward
/// the current working-set optimum, stopping at the first blocking row
/// (ties broken by lowest row index); at a working-set optimum the most
/// negative multiplier row is dropped (same tie rule). Iterations are capped
/// at `50 * rows`.
pub fn solve_active_set(qp: &QPData, warm_start: Option<&[usize]>) -> Result<QPSolution> {
    let rows = qp.rows();
    let dim = qp.dim();
    let chol = cholesky_of(&qp.hessian)?;
    let tol_p = 1e-9 * (1.0 + if rows > 0 { qp.offsets.amax() } else { 0.0 });
    let tol_d = 1e-9;

    let finish = |u: DVector<f64>, mu_act: &DVector<f64>, wset: &[usize], iterations: usize| {
        let mut mu = DVector::zeros(rows);
        for (k, &i) in wset.iter().enumerate() {
            mu[i] = mu_act[k];
        }
        let value = evaluate_value(qp, &u);
        let kkt = kkt_residuals(qp, &u, &mu);
        QPSolution {
            u,
            mu,
            active_set: wset.to_vec(),
            value,
            iterations,
            kkt,
        }
    };

    if rows == 0 {
        let (u, mu) = solve_equality_kkt_factored(&chol, &qp.linear, &DMatrix::zeros(0, dim), &DVector::zeros(0))?;
        return Ok(finish(u, &mu, &[], 1));
    }

    // starting point and working set
    let mut wset: Vec<usize> = Vec::new();
    let mut x: Option<DVector<f64>> = None;
    if let Some(warm) = warm_start {
        let mut candidate: Vec<usize> = warm.iter().copied().filter(|&i| i < rows).collect();
        candidate.sort_unstable();
        candidate.dedup();
        if candidate.len() <= dim {
            let m_act = gather_rows(&qp.constraints, &candidate);
            let b_act = gather(&qp.offsets, &candidate);
            if let Ok((u, _)) = solve_equality_kkt_factored(&chol, &qp.linear, &m_act, &b_act) {
                if (&qp.constraints * &u - &qp.offsets).max() <= tol_p {
                    x = Some(u);
                    wset = candidate;
                }
            }
        }
    }
    let mut x = match x {
        Some(x) => x,
        None => {
            wset.clear();
            phase_one(qp, tol_p)?
        }
    };

    let cap = 50 * rows.max(1);
    for iteration in 1..=cap {
        let m_act = gather_rows(&qp.constraints, &wset);
        let b_act = gather(&qp.offsets, &wset);
        let (u_eqp, mu_act) = solve_equality_kkt_factored(&chol, &qp.linear, &m_act, &b_act)?;
        let step = &u_eqp - &x;

        if step.amax() <= 1e-11 * (1.0 + x.amax()) {
            // at the working-set optimum: check dual feasibility
            let (mut worst, mut drop_pos) = (-tol_d, None);
            for (k, &mu_k) in mu_act.iter().enumerate() {
                if mu_k < worst {
                    worst = mu_k;
                    drop_pos = Some(k);
                }
            }
            match drop_pos {
                None => return Ok(finish(u_eqp, &mu_act, &wset, iteration)),
                Some(k) => {
                    wset.remove(k);
                    x = u_eqp;
                    continue;
                }
            }
        }

        // longest feasible step toward the working-set optimum
        let mut alpha = 1.0f64;
        let mut blocker: Option<usize> = None;
        for i in 0..rows {
            if wset.contains(&i) {
                continue;
            }
            let along = qp.constraints.row(i).transpose().dot(&step);
            if along > 1e-12 {
                let slack = qp.offsets[i] - qp.constraints.row(i).transpose().dot(&x);
                let ratio = (slack / along).max(0.0);
                if ratio < alpha - 1e-15 || (ratio < alpha + 1e-15 && blocker.is_some_and(|b| i < b))
                {
                    alpha = ratio.min(alpha);
                    blocker = Some(i);
                }
            }
        }
        match blocker {
            Some(i) if alpha < 1.0 => {
                x += alpha * &step;
                let pos = wset.binary_search(&i).unwrap_err();
                wset.insert(pos, i);
            }
            _ => {
                // unblocked full step; dual check happens next iteration
                x = u_eqp;
            }
        }
    }
    Err(Error::IterationLimit { limit: cap })
}

fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(idx.len(), m.ncols());
    for (k, &i) in idx.iter().enumerate() {
        out.view_mut((k, 0), (1, m.ncols())).copy_from(&m.row(i));
    }
    out
}

fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |k, _| v[idx[k]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_prediction_matrices, double_integrator, SystemModel};
    use crate::noise::{open_unit, stream};
    use crate::tightening::TighteningMode;

    fn si_model() -> SystemModel {
        let (a, b) = double_integrator(0.05);
        SystemModel::new(
            a,
            b,
            1e-4 * DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
            DMatrix::from_element(1, 1, 0.1),
            0.05,
        )
        .unwrap()
    }

    fn input_box(n: usize, lower: f64, upper: f64) -> Polytope {
        Polytope::from_box(&vec![lower; n], &vec![upper; n]).unwrap()
    }

    /// Stage-wise box rows over the stacked horizon, stages `from..=to`.
    fn stacked_state_rows(
        n: usize,
        horizon: usize,
        from: usize,
        stage_f: &DMatrix<f64>,
        stage_g: &DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let per = stage_f.nrows();
        let stages = horizon + 1 - from;
        let mut f = DMatrix::zeros(per * stages, (horizon + 1) * n);
        let mut g = DVector::zeros(per * stages);
        for (si, s) in (from..=horizon).enumerate() {
            f.view_mut((si * per, s * n), (per, n)).copy_from(stage_f);
            g.rows_mut(si * per, per).copy_from(stage_g);
        }
        (f, g)
    }

    #[test]
    fn cost_assembly_degenerate_cases() {
        let m = si_model();
        let pred = build_prediction_matrices(&m, 3).unwrap();
        let (_, h, r) = assemble_cost(&pred, &DVector::zeros(2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(h.amax(), 0.0);
        assert_eq!(r, 0.0);

        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let (_, _, r) = assemble_cost(&pred, &x0, &DMatrix::zeros(2, 2)).unwrap();
        let aqa = pred.state_transition.transpose() * &pred.state_weights * &pred.state_transition;
        assert!((r - quad_form(&aqa, &x0)).abs() < 1e-12);
    }

    #[test]
    fn cost_matches_moment_propagation_oracle() {
        // evaluating the assembled quadratic at random inputs must equal the
        // expected cost computed from the stacked mean and covariance
        let m = si_model();
        let pred = build_prediction_matrices(&m, 5).unwrap();
        let x0 = DVector::from_vec(vec![10.0, 0.0]);
        let (hess, h, r) = assemble_cost(&pred, &x0, &m.sigma_w).unwrap();
        let cov = crate::model::propagate_covariance(&pred, &m.sigma_w).unwrap();
        let trace_term = (&pred.state_weights * &cov).trace();
        let mut rng = stream(31);
        for _ in 0..20 {
            let u = DVector::from_fn(5, |_, _| 8.0 * (open_unit(&mut rng) - 0.5));
            let mean = crate::model::propagate_mean(&pred, &x0, &u);
            let expected = quad_form(&pred.state_weights, &mean)
                + quad_form(&pred.input_weights, &u)
                + trace_term;
            let got = 0.5 * quad_form(&hess, &u) + h.dot(&u) + r;
            assert!(
                (got - expected).abs() <= 1e-8 * expected.abs().max(1.0),
                "{got} vs {expected}"
            );
        }
    }

    #[test]
    fn constraint_assembly_zero_tightening() {
        let m = si_model();
        let horizon = 3;
        let pred = build_prediction_matrices(&m, horizon).unwrap();
        let stage_f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        let stage_g = DVector::from_vec(vec![1.5, 4.0]);
        let (f, g) = stacked_state_rows(2, horizon, 1, &stage_f, &stage_g);
        let spec = TighteningSpec {
            mode: TighteningMode::Dr,
            psis: vec![0.0; f.nrows()],
            quantile_samples: 0,
        };
        let sigma_x = DMatrix::zeros(8, 8);
        let asm = assemble_constraints(
            &pred,
            &input_box(3, -20.0, 2.0),
            &f,
            &g,
            &spec,
            &DVector::zeros(2),
            &sigma_x,
        )
        .unwrap();
        // velocity rows at stages 1..3 are all controllable; offsets equal g
        assert_eq!(asm.kept_state_rows.len(), 6);
        for (k, &i) in asm.kept_state_rows.iter().enumerate() {
            assert_eq!(asm.offsets[6 + k], g[i]);
        }
    }

    #[test]
    fn constraint_normals_follow_reachability() {
        // a position row at the final stage is unaffected by the last input
        let m = si_model();
        let horizon = 5;
        let pred = build_prediction_matrices(&m, horizon).unwrap();
        let mut f = DMatrix::zeros(1, 12);
        f[(0, 10)] = 1.0; // position at stage 5
        let g = DVector::from_vec(vec![11.0]);
        let spec = TighteningSpec {
            mode: TighteningMode::Dr,
            psis: vec![0.0],
            quantile_samples: 0,
        };
        let asm = assemble_constraints(
            &pred,
            &input_box(5, -20.0, 2.0),
            &f,
            &g,
            &spec,
            &DVector::zeros(2),
            &DMatrix::zeros(12, 12),
        )
        .unwrap();
        let row = asm.normals.row(asm.normals.nrows() - 1);
        for j in 0..4 {
            assert!(row[j] != 0.0, "input {j} reaches the stage-5 position");
        }
        assert_eq!(row[4], 0.0, "the last input cannot move the stage-5 position");
    }

    #[test]
    fn stage_zero_rows_pruned_or_infeasible() {
        let m = si_model();
        let horizon = 5;
        let pred = build_prediction_matrices(&m, horizon).unwrap();
        let stage_f = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let stage_g = DVector::from_vec(vec![11.0, 4.0, 1.5, 4.0]);
        // all stages 0..=5: 24 rows before pruning
        let (f, g) = stacked_state_rows(2, horizon, 0, &stage_f, &stage_g);
        assert_eq!(f.nrows(), 24);
        let sigma_x = crate::model::propagate_covariance(&pred, &m.sigma_w).unwrap();
        let spec = TighteningSpec {
            mode: TighteningMode::Dr,
            psis: vec![1.0; 24],
            quantile_samples: 0,
        };
        let asm = assemble_constraints(
            &pred,
            &input_box(5, -20.0, 2.0),
            &f,
            &g,
            &spec,
            &DVector::from_vec(vec![10.0, 0.0]),
            &sigma_x,
        )
        .unwrap();
        // stage-0 rows (4) and the uncontrollable stage-1 position rows (2) go
        assert_eq!(asm.kept_state_rows.len(), 18);

        // an initial state outside the box makes a constant row infeasible
        let err = assemble_constraints(
            &pred,
            &input_box(5, -20.0, 2.0),
            &f,
            &g,
            &spec,
            &DVector::from_vec(vec![12.0, 0.0]),
            &sigma_x,
        );
        assert!(matches!(err, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn equality_kkt_examples() {
        // empty active set: unconstrained optimum
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let lin = DVector::from_vec(vec![2.0, -4.0]);
        let (u, mu) = solve_equality_kkt(&h, &lin, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        assert!((u - DVector::from_vec(vec![-1.0, 2.0])).amax() < 1e-12);
        assert_eq!(mu.len(), 0);

        // pinned scalar: u = 1 with mu = -1
        let h1 = DMatrix::from_element(1, 1, 1.0);
        let (u, mu) = solve_equality_kkt(
            &h1,
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12);
        assert!((mu[0] + 1.0).abs() < 1e-12);
        // stationarity: H u + h + M' mu = 0
        assert!((h1[(0, 0)] * u[0] + mu[0]).abs() < 1e-12);
    }

    #[test]
    fn equality_kkt_matches_bordered_solve() {
        let mut rng = stream(17);
        let unit = |r: &mut rand_chacha::ChaCha8Rng| 2.0 * (open_unit(r) - 0.5);
        for _ in 0..50 {
            let dim = 4;
            let l = DMatrix::from_fn(dim, dim, |i, j| if j <= i { unit(&mut rng) } else { 0.0 });
            let h = &l * l.transpose() + 0.5 * DMatrix::identity(dim, dim);
            let lin = DVector::from_fn(dim, |_, _| 3.0 * unit(&mut rng));
            let m_act = DMatrix::from_fn(2, dim, |_, _| unit(&mut rng));
            let b_act = DVector::from_fn(2, |_, _| unit(&mut rng));
            let (u, mu) = solve_equality_kkt(&h, &lin, &m_act, &b_act).unwrap();

            // dense bordered KKT system oracle
            let mut kkt = DMatrix::zeros(dim + 2, dim + 2);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&h);
            kkt.view_mut((0, dim), (dim, 2)).copy_from(&m_act.transpose());
            kkt.view_mut((dim, 0), (2, dim)).copy_from(&m_act);
            let mut rhs = DVector::zeros(dim + 2);
            rhs.rows_mut(0, dim).copy_from(&(-&lin));
            rhs.rows_mut(dim, 2).copy_from(&b_act);
            let sol = kkt.lu().solve(&rhs).unwrap();
            assert!((u.rows(0, dim) - sol.rows(0, dim)).amax() < 1e-9);
            assert!((mu.rows(0, 2) - sol.rows(dim, 2)).amax() < 1e-9);
            // contract checks from the closed form
            assert!((&m_act * &u - &b_act).amax() <= 1e-9);
            assert!((&h * &u + &lin + m_act.transpose() * &mu).amax() <= 1e-9);
        }
    }

    #[test]
    fn licq_violation_detected() {
        let h = DMatrix::identity(2, 2);
        let m_act = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let err = solve_equality_kkt(&h, &DVector::zeros(2), &m_act, &DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(err, Err(Error::LicqViolation { .. })));
    }

    fn simple_qp(
        h: Vec<f64>,
        lin: Vec<f64>,
        m: Vec<f64>,
        b: Vec<f64>,
        dim: usize,
    ) -> QPData {
        let rows = b.len();
        QPData::new(
            DMatrix::from_row_slice(dim, dim, &h),
            DVector::from_vec(lin),
            0.0,
            DMatrix::from_row_slice(rows, dim, &m),
            DVector::from_vec(b),
            vec![RowKind::Input; rows],
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_solve() {
        let qp = simple_qp(vec![2.0], vec![4.0], vec![], vec![], 1);
        let sol = solve_active_set(&qp, None).unwrap();
        assert!((sol.u[0] + 2.0).abs() < 1e-12);
        assert!(sol.active_set.is_empty());
        assert!(sol.kkt.within(1e-9));
    }

    #[test]
    fn one_dimensional_bound() {
        // min 1/2 u^2 s.t. u <= -1
        let qp = simple_qp(vec![1.0], vec![0.0], vec![1.0], vec![-1.0], 1);
        let sol = solve_active_set(&qp, None).unwrap();
        assert!((sol.u[0] + 1.0).abs() < 1e-10);
        assert!((sol.mu[0] - 1.0).abs() < 1e-10);
        assert_eq!(sol.active_set, vec![0]);
        assert!(sol.kkt.within(1e-9));
    }

    #[test]
    fn infeasible_reports_witness_rows() {
        let qp = simple_qp(vec![1.0], vec![0.0], vec![1.0, -1.0], vec![0.0, -1.0], 1);
        match solve_active_set(&qp, None) {
            Err(Error::Infeasible { rows, violation }) => {
                assert!(!rows.is_empty());
                assert!(violation > 0.0);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let mut rng = stream(23);
        let unit = |r: &mut rand_chacha::ChaCha8Rng| 2.0 * (open_unit(r) - 0.5);
        for _ in 0..100 {
            let dim = 3;
            let l = DMatrix::from_fn(dim, dim, |i, j| if j <= i { unit(&mut rng) } else { 0.0 });
            let h = &l * l.transpose() + 0.3 * DMatrix::identity(dim, dim);
            let lin = DVector::from_fn(dim, |_, _| 3.0 * unit(&mut rng));
            let m = DMatrix::from_fn(5, dim, |_, _| unit(&mut rng));
            let interior = DVector::from_fn(dim, |_, _| unit(&mut rng));
            let b = &m * &interior + DVector::from_fn(5, |_, _| 0.5 + open_unit(&mut rng));
            let qp = QPData::new(h, lin, 0.0, m, b, vec![RowKind::Input; 5]).unwrap();
            let cold = solve_active_set(&qp, None).unwrap();
            let warm = solve_active_set(&qp, Some(&[1, 3])).unwrap();
            assert!((cold.value - warm.value).abs() <= 1e-9 * (1.0 + cold.value.abs()));
        }
    }

    #[test]
    fn removing_inactive_row_keeps_optimizer() {
        let qp = simple_qp(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![2.0, 2.0],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.5, 10.0, 5.0],
            2,
        );
        let sol = solve_active_set(&qp, None).unwrap();
        // rows 1 and 2 are inactive; drop row 2 and resolve
        let reduced = simple_qp(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![2.0, 2.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.5, 10.0],
            2,
        );
        let sol2 = solve_active_set(&reduced, None).unwrap();
        assert!((&sol.u - &sol2.u).amax() <= 1e-10);
    }

    #[test]
    fn kkt_report_perturbation() {
        let qp = simple_qp(vec![2.0], vec![2.0], vec![1.0], vec![5.0], 1);
        let sol = solve_active_set(&qp, None).unwrap();
        assert!(sol.kkt.within(1e-9));
        // perturb the optimizer: stationarity grows like ||H|| * eps
        let mut u = sol.u.clone();
        u[0] += 1e-3;
        let report = kkt_residuals(&qp, &u, &sol.mu);
        assert!((report.stationarity - 2.0 * 1e-3).abs() < 1e-9);
        // zeroing a multiplier on an active row keeps complementarity at zero
        let pinned = simple_qp(vec![1.0], vec![0.0], vec![1.0], vec![-1.0], 1);
        let psol = solve_active_set(&pinned, None).unwrap();
        let report = kkt_residuals(&pinned, &psol.u, &DVector::zeros(1));
        assert_eq!(report.complementarity, 0.0);
        assert!(report.stationarity > 0.5);
    }

    #[test]
    fn value_evaluation() {
        let qp = simple_qp(vec![2.0], vec![-4.0], vec![], vec![], 1);
        assert_eq!(evaluate_value(&qp, &DVector::zeros(1)), 0.0);
        // unconstrained minimum: r - 1/2 h' H^-1 h
        let sol = solve_active_set(&qp, None).unwrap();
        assert!((sol.value - (0.0 - 0.5 * 4.0 * 4.0 / 2.0)).abs() < 1e-12);
    }
}
