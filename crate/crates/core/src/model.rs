//! Stochastic LTI system description and horizon-stacked prediction operators.
//!
//! The plant is `x_{k+1} = A x_k + B u_k + w_k` with zero-mean i.i.d. noise of
//! known second moment. Stacking the predicted states over an `N`-step horizon
//! gives `x = T x_0 + S u + G w` with block-structured operators built here by
//! explicit power recursion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, check_symmetric_pd, check_symmetric_psd};

const PSD_TOL: f64 = 1e-10;
const PD_FLOOR: f64 = 1e-12;

/// Plant matrices, noise second moment and cost weights.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Disturbance covariance.
    pub sigma_w: DMatrix<f64>,
    /// Stage state weight.
    pub q: DMatrix<f64>,
    /// Stage input weight.
    pub r: DMatrix<f64>,
    /// Terminal state weight.
    pub qf: DMatrix<f64>,
    /// Sampling period in seconds, used only for reporting time axes.
    pub dt: f64,
}

impl SystemModel {
    /// Builds a model with the terminal weight set to the solution of the
    /// discrete algebraic Riccati equation for `(A, B, Q, R)`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let qf = dare(&a, &b, &q, &r)?;
        Self::with_terminal_weight(a, b, sigma_w, q, r, qf, dt)
    }

    /// Builds a model with an explicit terminal weight.
    pub fn with_terminal_weight(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qf: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Config("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::Config(format!(
                "B has {} rows, expected {n}",
                b.nrows()
            )));
        }
        let m = b.ncols();
        if m == 0 || n == 0 {
            return Err(Error::Config("state and input dimensions must be positive".into()));
        }
        if sigma_w.shape() != (n, n) || q.shape() != (n, n) || qf.shape() != (n, n) {
            return Err(Error::Config("sigma_w, Q, Qf must be n x n".into()));
        }
        if r.shape() != (m, m) {
            return Err(Error::Config("R must be m x m".into()));
        }
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        check_symmetric_psd(&sigma_w, PSD_TOL, "sigma_w")?;
        check_symmetric_psd(&q, PSD_TOL, "Q")?;
        check_symmetric_psd(&qf, PSD_TOL, "Qf")?;
        check_symmetric_pd(&r, PD_FLOOR, "R")?;
        Ok(Self {
            a,
            b,
            sigma_w,
            q,
            r,
            qf,
            dt,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// One plant step `A x + B u + w`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.state_dim());
        assert_eq!(u.len(), self.input_dim());
        assert_eq!(w.len(), self.state_dim());
        &self.a * x + &self.b * u + w
    }
}

/// Terminal weight from the discrete algebraic Riccati equation, found by
/// fixed-point iteration of `P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA` to
/// tolerance 1e-10 (at most 1e5 iterations).
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let gain_den = r + &btp * b;
        let inv = gain_den.clone().try_inverse().ok_or_else(|| {
            Error::Validation("Riccati recursion: R + B'PB is singular".into())
        })?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * inv * &btp * a;
        let diff = (&next - &p).abs().max();
        p = next;
        if diff < 1e-10 {
            // symmetrize round-off before returning
            return Ok(0.5 * (&p + p.transpose()));
        }
    }
    Err(Error::Validation(
        "Riccati recursion did not converge within 1e5 iterations".into(),
    ))
}

/// Horizon-stacked prediction operators and block-diagonal weights.
///
/// Block row `i` of `state_transition` is `A^i`; block `(i, j)` of
/// `input_map` is `A^{i-1-j} B` for `j < i` and zero otherwise; `noise_map`
/// has the same lower-triangular structure with identity in place of `B`.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    /// `(N+1)n x n` free-response operator.
    pub state_transition: DMatrix<f64>,
    /// `(N+1)n x Nm` forced-response operator.
    pub input_map: DMatrix<f64>,
    /// `(N+1)n x Nn` noise-response operator.
    pub noise_map: DMatrix<f64>,
    /// `(N+1)n x (N+1)n` block diagonal: `N` copies of `Q` then `Qf`.
    pub state_weights: DMatrix<f64>,
    /// `Nm x Nm` block diagonal: `N` copies of `R`.
    pub input_weights: DMatrix<f64>,
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl PredictionMatrices {
    pub fn stacked_rows(&self) -> usize {
        (self.horizon + 1) * self.state_dim
    }

    pub fn input_len(&self) -> usize {
        self.horizon * self.input_dim
    }

    /// Block diagonal of `N` copies of `sigma_w` (the stacked noise second
    /// moment).
    pub fn stacked_noise_cov(&self, sigma_w: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.state_dim;
        let mut out = DMatrix::zeros(self.horizon * n, self.horizon * n);
        for k in 0..self.horizon {
            out.view_mut((k * n, k * n), (n, n)).copy_from(sigma_w);
        }
        out
    }
}

/// Builds the stacked prediction operators for an `N`-step horizon using the
/// power recursion `A^i = A * A^{i-1}`.
pub fn build_prediction_matrices(model: &SystemModel, horizon: usize) -> Result<PredictionMatrices> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let n = model.state_dim();
    let m = model.input_dim();
    let rows = (horizon + 1) * n;

    // powers[i] = A^i
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::identity(n, n));
    for i in 1..=horizon {
        let next = &model.a * &powers[i - 1];
        powers.push(next);
    }

    let mut state_transition = DMatrix::zeros(rows, n);
    for (i, p) in powers.iter().enumerate() {
        state_transition.view_mut((i * n, 0), (n, n)).copy_from(p);
    }

    let mut input_map = DMatrix::zeros(rows, horizon * m);
    let mut noise_map = DMatrix::zeros(rows, horizon * n);
    for i in 1..=horizon {
        for j in 0..i {
            let block = &powers[i - 1 - j] * &model.b;
            input_map
                .view_mut((i * n, j * m), (n, m))
                .copy_from(&block);
            noise_map
                .view_mut((i * n, j * n), (n, n))
                .copy_from(&powers[i - 1 - j]);
        }
    }

    let mut state_weights = DMatrix::zeros(rows, rows);
    for i in 0..horizon {
        state_weights
            .view_mut((i * n, i * n), (n, n))
            .copy_from(&model.q);
    }
    state_weights
        .view_mut((horizon * n, horizon * n), (n, n))
        .copy_from(&model.qf);

    let mut input_weights = DMatrix::zeros(horizon * m, horizon * m);
    for i in 0..horizon {
        input_weights
            .view_mut((i * m, i * m), (m, m))
            .copy_from(&model.r);
    }

    Ok(PredictionMatrices {
        state_transition,
        input_map,
        noise_map,
        state_weights,
        input_weights,
        horizon,
        state_dim: n,
        input_dim: m,
    })
}

/// Stacked mean trajectory `T x0 + S u`.
pub fn propagate_mean(
    pred: &PredictionMatrices,
    x0: &DVector<f64>,
    useq: &DVector<f64>,
) -> DVector<f64> {
    assert_eq!(x0.len(), pred.state_dim);
    assert_eq!(useq.len(), pred.input_len());
    &pred.state_transition * x0 + &pred.input_map * useq
}

/// Stacked state covariance `G Sigma_w_stacked G^T`; independent of the mean
/// and the input sequence.
pub fn propagate_covariance(
    pred: &PredictionMatrices,
    sigma_w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_symmetric_psd(sigma_w, 1e-9, "sigma_w")?;
    let stacked = pred.stacked_noise_cov(sigma_w);
    let cov = &pred.noise_map * stacked * pred.noise_map.transpose();
    Ok(0.5 * (&cov + cov.transpose()))
}

/// Mean and covariance of the stacked predicted state.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MomentState {
    pub fn predict(
        pred: &PredictionMatrices,
        x0: &DVector<f64>,
        useq: &DVector<f64>,
        sigma_w: &DMatrix<f64>,
    ) -> Result<Self> {
        let state = Self {
            mean: propagate_mean(pred, x0, useq),
            covariance: propagate_covariance(pred, sigma_w)?,
        };
        debug_assert!(asymmetry(&state.covariance) <= 1e-9);
        Ok(state)
    }
}

/// The double integrator used throughout the test suite and the default
/// experiment configuration.
pub fn double_integrator(dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, dt]);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::stream;
    use rand_chacha::rand_core::RngCore;

    fn model(dt: f64) -> SystemModel {
        let (a, b) = double_integrator(dt);
        SystemModel::new(
            a,
            b,
            1e-4 * DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
            DMatrix::from_element(1, 1, 0.1),
            dt,
        )
        .unwrap()
    }

    #[test]
    fn one_step_stacking() {
        let m = model(0.05);
        let pred = build_prediction_matrices(&m, 1).unwrap();
        // first block row: identity / zeros
        assert_eq!(pred.state_transition.view((0, 0), (2, 2)), DMatrix::identity(2, 2));
        assert_eq!(pred.input_map.view((0, 0), (2, 1)), DMatrix::zeros(2, 1));
        assert_eq!(pred.noise_map.view((0, 0), (2, 2)), DMatrix::zeros(2, 2));
        // second block row: A, B, I
        assert_eq!(pred.state_transition.view((2, 0), (2, 2)), m.a.view((0, 0), (2, 2)));
        assert_eq!(pred.input_map.view((2, 0), (2, 1)), m.b.view((0, 0), (2, 1)));
        assert_eq!(pred.noise_map.view((2, 0), (2, 2)), DMatrix::identity(2, 2));
    }

    #[test]
    fn two_step_block_matches_symbolic_expansion() {
        // x_2 = A^2 x0 + A B u0 + B u1 + A w0 + w1
        let m = model(0.05);
        let pred = build_prediction_matrices(&m, 2).unwrap();
        let ab = &m.a * &m.b;
        assert_eq!(pred.input_map.view((4, 0), (2, 1)), ab.view((0, 0), (2, 1)));
        assert_eq!(pred.input_map.view((4, 1), (2, 1)), m.b.view((0, 0), (2, 1)));
        assert!((pred.input_map[(4, 0)] - 0.0025).abs() < 1e-15);
        assert!((pred.input_map[(5, 0)] - 0.05).abs() < 1e-15);
        assert_eq!(pred.noise_map.view((4, 0), (2, 2)), m.a.view((0, 0), (2, 2)));
    }

    #[test]
    fn nonzero_block_count_at_horizon_five() {
        let m = model(0.05);
        let pred = build_prediction_matrices(&m, 5).unwrap();
        let mut nonzero_blocks = 0;
        for i in 0..6 {
            for j in 0..5 {
                let block = pred.input_map.view((i * 2, j), (2, 1));
                if block.iter().any(|&x| x != 0.0) {
                    nonzero_blocks += 1;
                    assert!(j < i, "block ({i},{j}) must be strictly lower triangular");
                }
            }
        }
        assert_eq!(nonzero_blocks, 15);
    }

    #[test]
    fn mean_propagation_examples() {
        let m = model(0.05);
        let pred = build_prediction_matrices(&m, 1).unwrap();
        let zero = propagate_mean(&pred, &DVector::zeros(2), &DVector::zeros(1));
        assert!(zero.amax() == 0.0);
        let x = propagate_mean(&pred, &DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(1));
        assert_eq!(x.as_slice(), &[1.0, 0.0, 1.0, 0.0]);

        let pred2 = build_prediction_matrices(&m, 2).unwrap();
        let x = propagate_mean(&pred2, &DVector::from_vec(vec![0.0, 1.0]), &DVector::zeros(2));
        // hand iteration with w = 0: positions 0, 0.05, 0.1; velocity 1 throughout
        for (i, expected_pos) in [0.0, 0.05, 0.1].iter().enumerate() {
            assert!((x[2 * i] - expected_pos).abs() < 1e-15);
            assert!((x[2 * i + 1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn covariance_propagation_examples() {
        let m = model(0.05);
        let pred = build_prediction_matrices(&m, 1).unwrap();
        let zero = propagate_covariance(&pred, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.abs().max(), 0.0);

        let s2 = 0.01f64.powi(2);
        let cov = propagate_covariance(&pred, &(s2 * DMatrix::identity(2, 2))).unwrap();
        assert!((cov.view((2, 2), (2, 2)) - s2 * DMatrix::identity(2, 2)).abs().max() < 1e-18);
        assert_eq!(cov.view((0, 0), (2, 4)).abs().max(), 0.0);

        // covariance recursion oracle: S_{k+1} = A S_k A' + S_w
        let pred2 = build_prediction_matrices(&m, 2).unwrap();
        let cov2 = propagate_covariance(&pred2, &(s2 * DMatrix::identity(2, 2))).unwrap();
        let sw = s2 * DMatrix::identity(2, 2);
        let s1 = sw.clone();
        let s2_block = &m.a * &s1 * m.a.transpose() + &sw;
        assert!((cov2.view((4, 4), (2, 2)) - &s2_block).abs().max() < 1e-18);
        assert!(asymmetry(&cov2) <= 1e-12);
    }

    #[test]
    fn step_examples() {
        let m = model(0.05);
        let zero = m.step(&DVector::zeros(2), &DVector::zeros(1), &DVector::zeros(2));
        assert_eq!(zero.amax(), 0.0);
        let x = m.step(
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::zeros(1),
            &DVector::zeros(2),
        );
        assert!((x[0] - 1.05).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        let w = DVector::from_vec(vec![0.1, -0.1]);
        let xw = m.step(&DVector::from_vec(vec![1.0, 1.0]), &DVector::zeros(1), &w);
        assert_eq!(xw, &x + &w);
    }

    #[test]
    fn repeated_steps_reproduce_stacked_mean() {
        let m = model(0.05);
        let n_horizon = 7;
        let pred = build_prediction_matrices(&m, n_horizon).unwrap();
        let mut rng = stream(42);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        for _ in 0..100 {
            let x0 = DVector::from_fn(2, |_, _| 10.0 * unit());
            let useq = DVector::from_fn(n_horizon, |_, _| 5.0 * unit());
            let mean = propagate_mean(&pred, &x0, &useq);
            let mut x = x0.clone();
            for i in 0..n_horizon {
                assert!((mean.rows(i * 2, 2) - &x).abs().max() <= 1e-12);
                x = m.step(&x, &DVector::from_element(1, useq[i]), &DVector::zeros(2));
            }
            assert!((mean.rows(n_horizon * 2, 2) - &x).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn moment_state_combines_mean_and_covariance() {
        let m = model(0.05);
        let pred = build_prediction_matrices(&m, 3).unwrap();
        let x0 = DVector::from_vec(vec![2.0, -1.0]);
        let useq = DVector::from_vec(vec![0.5, 0.0, -0.5]);
        let ms = MomentState::predict(&pred, &x0, &useq, &m.sigma_w).unwrap();
        assert_eq!(ms.mean, propagate_mean(&pred, &x0, &useq));
        assert_eq!(ms.covariance, propagate_covariance(&pred, &m.sigma_w).unwrap());
        // covariance independent of mean and input
        let other = MomentState::predict(&pred, &DVector::zeros(2), &DVector::zeros(3), &m.sigma_w)
            .unwrap();
        assert_eq!(ms.covariance, other.covariance);
    }

    #[test]
    fn dare_fixed_point_residual() {
        let m = model(0.05);
        let p = &m.qf;
        let btp = m.b.transpose() * p;
        let inv = (&m.r + &btp * &m.b).try_inverse().unwrap();
        let back = &m.q + m.a.transpose() * p * &m.a
            - m.a.transpose() * p * &m.b * inv * &btp * &m.a;
        assert!((&back - p).abs().max() < 1e-9);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let (a, b) = double_integrator(0.05);
        let bad = SystemModel::new(
            a.clone(),
            b.clone(),
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            0.05,
        );
        assert!(matches!(bad, Err(Error::Config(_))));
        let not_pd = SystemModel::new(
            a,
            b,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(1, 1),
            0.05,
        );
        assert!(matches!(not_pd, Err(Error::Validation(_))));
    }
}
