//! Experiment configuration, paired closed-loop simulation under one shared
//! disturbance realization, Monte-Carlo violation studies and artifact
//! export.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conservatism::{conservatism, ExactTightening};
use crate::error::{Error, Result};
use crate::exec::{map_shards, map_shards_seq};
use crate::model::{build_prediction_matrices, propagate_covariance, PredictionMatrices, SystemModel};
use crate::noise::{sample_noise, NoiseKind};
use crate::polytope::Polytope;
use crate::qp::{assemble_constraints, assemble_cost, solve_active_set, KktReport, QPData};
use crate::regret::{
    convergence_report, ControllerHistory, ControllerKind, ConvergenceReport, RegretSeries,
};
use crate::tightening::{RiskAllocation, TighteningMode, TighteningSpec};
use crate::volume::VolumeEstimate;

/// Salt mixed into the base seed for the quantile-sampling streams so they
/// never replay the disturbance streams.
const PSI_SEED_SALT: u64 = 0x7073_695f_7361_6c74;

/// Matrix given as rows, for the config file.
pub type MatrixRows = Vec<Vec<f64>>;

fn to_matrix(rows: &MatrixRows, what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Config(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// Plant and cost description in the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub a: MatrixRows,
    pub b: MatrixRows,
    pub sigma_w: MatrixRows,
    pub q: MatrixRows,
    pub r: MatrixRows,
    /// Terminal weight; omitted means the Riccati fixed point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qf: Option<MatrixRows>,
    pub dt: f64,
}

impl ModelConfig {
    pub fn build(&self) -> Result<SystemModel> {
        let a = to_matrix(&self.a, "A")?;
        let b = to_matrix(&self.b, "B")?;
        let sigma_w = to_matrix(&self.sigma_w, "sigma_w")?;
        let q = to_matrix(&self.q, "Q")?;
        let r = to_matrix(&self.r, "R")?;
        match &self.qf {
            Some(qf) => SystemModel::with_terminal_weight(
                a,
                b,
                sigma_w,
                q,
                r,
                to_matrix(qf, "Qf")?,
                self.dt,
            ),
            None => SystemModel::new(a, b, sigma_w, q, r, self.dt),
        }
    }
}

/// Per-stage constraint rows `{y | normals y <= offsets}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRows {
    pub normals: MatrixRows,
    pub offsets: Vec<f64>,
}

/// Tightening mode of the reference ("star") controller. `Gaussian` and
/// `Empirical` are the fully informed variants; `Dr` runs two identical DR
/// controllers, useful as a zero-regret diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StarMode {
    Gaussian,
    #[default]
    Empirical,
    Dr,
}

/// Full description of one experiment; identical configs yield bit-identical
/// outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub horizon: usize,
    pub total_steps: usize,
    pub risk_budget: f64,
    #[serde(default)]
    pub star_mode: StarMode,
    pub noise: NoiseKind,
    /// Input constraint rows applied at every stage of the horizon.
    pub input_rows: StageRows,
    /// State constraint rows applied at stages `1..=N` of the horizon.
    pub state_rows: StageRows,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub monte_carlo_runs: usize,
    #[serde(default = "default_quantile_samples")]
    pub quantile_samples: usize,
}

fn default_runs() -> usize {
    500
}

fn default_quantile_samples() -> usize {
    1_000_000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The built-in double-integrator benchmark: 0.05 s sampling, horizon 5,
    /// 200 steps, Laplacian noise with covariance `1e-4 I`, risk budget 0.1,
    /// input in `[-20, 2]` and state box `[-4, 11] x [-4, 1.5]`.
    pub fn double_integrator_benchmark() -> Self {
        Self {
            model: ModelConfig {
                a: vec![vec![1.0, 0.05], vec![0.0, 1.0]],
                b: vec![vec![0.0], vec![0.05]],
                sigma_w: vec![vec![1e-4, 0.0], vec![0.0, 1e-4]],
                q: vec![vec![1.0, 0.0], vec![0.0, 0.1]],
                r: vec![vec![0.1]],
                qf: None,
                dt: 0.05,
            },
            horizon: 5,
            total_steps: 200,
            risk_budget: 0.1,
            star_mode: StarMode::Empirical,
            noise: NoiseKind::Laplacian,
            input_rows: StageRows {
                normals: vec![vec![1.0], vec![-1.0]],
                offsets: vec![2.0, 20.0],
            },
            state_rows: StageRows {
                normals: vec![
                    vec![1.0, 0.0],
                    vec![-1.0, 0.0],
                    vec![0.0, 1.0],
                    vec![0.0, -1.0],
                ],
                offsets: vec![11.0, 4.0, 1.5, 4.0],
            },
            x0: vec![10.0, 0.0],
            seed: 0,
            monte_carlo_runs: 500,
            quantile_samples: 1_000_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.risk_budget > 0.0 && self.risk_budget <= 0.5) {
            return Err(Error::Config("risk_budget must lie in (0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Stage rows stacked block-diagonally over stages `from..=to` of the
/// horizon, in the stacked state space of dimension `(N+1) n`.
pub fn stack_stage_rows(
    stage_normals: &DMatrix<f64>,
    stage_offsets: &DVector<f64>,
    dim: usize,
    horizon: usize,
    from_stage: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let per = stage_normals.nrows();
    let stages = horizon + 1 - from_stage;
    let mut f = DMatrix::zeros(per * stages, (horizon + 1) * dim);
    let mut g = DVector::zeros(per * stages);
    for (si, s) in (from_stage..=horizon).enumerate() {
        f.view_mut((si * per, s * dim), (per, dim))
            .copy_from(stage_normals);
        g.rows_mut(si * per, per).copy_from(stage_offsets);
    }
    (f, g)
}

/// Everything precomputed for a run: the tightened constants are
/// time-invariant, so they are resolved once here.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub pred: PredictionMatrices,
    pub sigma_x: DMatrix<f64>,
    pub input_poly: Polytope,
    pub state_f: DMatrix<f64>,
    pub state_g: DVector<f64>,
    pub allocation: RiskAllocation,
    pub star_spec: TighteningSpec,
    pub dagger_spec: TighteningSpec,
    /// Gaussian constants, recorded alongside whichever mode the fully
    /// informed controller actually uses.
    pub gaussian_psis: Vec<f64>,
}

/// Resolves the config into matrices, stacked constraint rows and tightening
/// constants.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    config.validate()?;
    let model = config.model.build()?;
    let n = model.state_dim();
    let m = model.input_dim();
    if config.x0.len() != n {
        return Err(Error::Config(format!(
            "x0 has {} entries, expected {n}",
            config.x0.len()
        )));
    }
    let pred = build_prediction_matrices(&model, config.horizon)?;
    let sigma_x = propagate_covariance(&pred, &model.sigma_w)?;

    let stage_in = to_matrix(&config.input_rows.normals, "input rows")?;
    if stage_in.ncols() != m {
        return Err(Error::Config("input rows must act on the input dimension".into()));
    }
    let mut input_f = DMatrix::zeros(stage_in.nrows() * config.horizon, m * config.horizon);
    let mut input_g = DVector::zeros(stage_in.nrows() * config.horizon);
    for s in 0..config.horizon {
        input_f
            .view_mut((s * stage_in.nrows(), s * m), (stage_in.nrows(), m))
            .copy_from(&stage_in);
        for (j, &d) in config.input_rows.offsets.iter().enumerate() {
            input_g[s * stage_in.nrows() + j] = d;
        }
    }
    let input_poly = Polytope::new(input_f, input_g)?;

    let stage_f = to_matrix(&config.state_rows.normals, "state rows")?;
    if stage_f.ncols() != n {
        return Err(Error::Config("state rows must act on the state dimension".into()));
    }
    if stage_f.nrows() != config.state_rows.offsets.len() {
        return Err(Error::Config("state row offsets must match the normals".into()));
    }
    let stage_g = DVector::from_vec(config.state_rows.offsets.clone());
    // state constraints imposed at stages 1..=N; stage 0 is deterministic
    let (state_f, state_g) = stack_stage_rows(&stage_f, &stage_g, n, config.horizon, 1);

    let n_rows = state_f.nrows();
    let allocation = RiskAllocation::uniform(config.risk_budget, n_rows)?;
    let dagger_spec = TighteningSpec::dr(&allocation)?;
    let gaussian_spec = TighteningSpec::gaussian(&allocation)?;
    let star_spec = match config.star_mode {
        StarMode::Dr => dagger_spec.clone(),
        StarMode::Gaussian => gaussian_spec.clone(),
        StarMode::Empirical => {
            let exact = ExactTightening::Empirical {
                kind: config.noise,
                sigma_w: &model.sigma_w,
                noise_map: &pred.noise_map,
                samples: config.quantile_samples,
                seed: config.seed ^ PSI_SEED_SALT,
            };
            let psis =
                crate::conservatism::exact_psis(&state_f, allocation.deltas(), &exact)?;
            TighteningSpec::empirical(psis, config.quantile_samples)?
        }
    };

    Ok(PreparedExperiment {
        config: config.clone(),
        model,
        pred,
        sigma_x,
        input_poly,
        state_f,
        state_g,
        allocation,
        star_spec,
        dagger_spec,
        gaussian_psis: gaussian_spec.psis,
    })
}

/// Paired closed-loop record: both controllers consumed exactly the same
/// disturbance rows.
#[derive(Debug, Clone)]
pub struct PairedTrajectories {
    pub star: ControllerHistory,
    pub dagger: ControllerHistory,
    /// Realized disturbances, one row per step.
    pub disturbances: DMatrix<f64>,
    /// Set when a controller's QP became infeasible; both histories are
    /// truncated to the failing step.
    pub infeasible_at: Option<(ControllerKind, usize)>,
    /// Componentwise worst KKT residuals over every solve of the run.
    pub kkt_worst: KktReport,
}

impl PairedTrajectories {
    pub fn series(&self, model: &SystemModel) -> Result<RegretSeries> {
        RegretSeries::from_histories(&self.star, &self.dagger, &model.q, &model.r)
    }
}

struct ControllerState {
    kind: ControllerKind,
    spec: TighteningSpec,
    state: DVector<f64>,
    warm: Option<Vec<usize>>,
    history: ControllerHistory,
}

impl ControllerState {
    fn new(kind: ControllerKind, spec: TighteningSpec, x0: DVector<f64>) -> Self {
        Self {
            kind,
            spec,
            state: x0,
            warm: None,
            history: ControllerHistory {
                kind,
                states: Vec::new(),
                inputs: Vec::new(),
                values: Vec::new(),
                active_sets: Vec::new(),
            },
        }
    }
}

/// Runs the paired closed loop: at every step both controllers solve their
/// QP at their own realized state (warm-started from the previous active
/// set), apply the first input block and advance with the same disturbance.
/// Solves happen at `k = 0..=T`, so each history has `T + 1` entries; the
/// final input is computed but never applied.
pub fn run_paired(config: &ExperimentConfig) -> Result<PairedTrajectories> {
    let prep = prepare(config)?;
    run_paired_prepared(&prep, config.seed)
}

/// [`run_paired`] on a prepared experiment, with an explicit disturbance
/// seed (the tightening constants stay those of the preparation).
pub fn run_paired_prepared(prep: &PreparedExperiment, seed: u64) -> Result<PairedTrajectories> {
    let t_steps = prep.config.total_steps;
    let m = prep.model.input_dim();
    let x0 = DVector::from_vec(prep.config.x0.clone());
    let disturbances = sample_noise(prep.config.noise, &prep.model.sigma_w, t_steps, seed)?;

    let mut star = ControllerState::new(
        ControllerKind::FullyInformed,
        prep.star_spec.clone(),
        x0.clone(),
    );
    let mut dagger = ControllerState::new(ControllerKind::Dr, prep.dagger_spec.clone(), x0);

    let mut infeasible_at = None;
    let mut kkt_worst = KktReport {
        stationarity: 0.0,
        primal: 0.0,
        dual: 0.0,
        complementarity: 0.0,
    };

    'outer: for k in 0..=t_steps {
        for ctrl in [&mut star, &mut dagger] {
            let (hessian, linear, constant) =
                assemble_cost(&prep.pred, &ctrl.state, &prep.model.sigma_w)?;
            let assembled = match assemble_constraints(
                &prep.pred,
                &prep.input_poly,
                &prep.state_f,
                &prep.state_g,
                &ctrl.spec,
                &ctrl.state,
                &prep.sigma_x,
            ) {
                Ok(a) => a,
                Err(Error::Infeasible { .. }) => {
                    infeasible_at = Some((ctrl.kind, k));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let qp = QPData::new(
                hessian,
                linear,
                constant,
                assembled.normals,
                assembled.offsets,
                assembled.row_kind,
            )?;
            let sol = match solve_active_set(&qp, ctrl.warm.as_deref()) {
                Ok(s) => s,
                Err(Error::Infeasible { .. }) => {
                    infeasible_at = Some((ctrl.kind, k));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            kkt_worst.stationarity = kkt_worst.stationarity.max(sol.kkt.stationarity);
            kkt_worst.primal = kkt_worst.primal.max(sol.kkt.primal);
            kkt_worst.dual = kkt_worst.dual.max(sol.kkt.dual);
            kkt_worst.complementarity = kkt_worst.complementarity.max(sol.kkt.complementarity);

            ctrl.history.states.push(ctrl.state.clone());
            ctrl.history.inputs.push(sol.u.rows(0, m).into_owned());
            ctrl.history.values.push(sol.value);
            ctrl.history.active_sets.push(sol.active_set.clone());
            ctrl.warm = Some(sol.active_set);
        }
        if k < t_steps {
            let w = disturbances.row(k).transpose();
            for ctrl in [&mut star, &mut dagger] {
                let u = ctrl.history.inputs.last().expect("input recorded above");
                ctrl.state = prep.model.step(&ctrl.state, u, &w);
            }
        }
    }

    // keep the paired histories aligned when one side stopped early
    let keep = star.history.len().min(dagger.history.len());
    for h in [&mut star.history, &mut dagger.history] {
        h.states.truncate(keep);
        h.inputs.truncate(keep);
        h.values.truncate(keep);
        h.active_sets.truncate(keep);
    }

    Ok(PairedTrajectories {
        star: star.history,
        dagger: dagger.history,
        disturbances,
        infeasible_at,
        kkt_worst,
    })
}

/// Violation statistics of a Monte-Carlo study.
#[derive(Debug, Clone, Serialize)]
pub struct ViolationStats {
    pub runs: usize,
    /// Runs in which some realized state left the original constraint set.
    pub star_violations: usize,
    pub dagger_violations: usize,
    pub infeasible_runs: usize,
    pub star_rate: f64,
    pub dagger_rate: f64,
    /// Wilson 95% interval for the DR controller's violation rate.
    pub dagger_ci95: (f64, f64),
}

/// Runs `n_runs` independent paired simulations (run `i` uses seed
/// `seed XOR i`) and reports the fraction of runs in which any realized
/// state violates the original, untightened state constraints.
pub fn run_monte_carlo(config: &ExperimentConfig, n_runs: usize) -> Result<ViolationStats> {
    monte_carlo_impl(config, n_runs, false)
}

/// Sequential twin of [`run_monte_carlo`]; identical output, benchmark
/// baseline.
pub fn run_monte_carlo_seq(config: &ExperimentConfig, n_runs: usize) -> Result<ViolationStats> {
    monte_carlo_impl(config, n_runs, true)
}

fn monte_carlo_impl(config: &ExperimentConfig, n_runs: usize, sequential: bool) -> Result<ViolationStats> {
    if n_runs < 100 {
        return Err(Error::Config("monte carlo studies need at least 100 runs".into()));
    }
    let prep = prepare(config)?;
    let stage_f = to_matrix(&config.state_rows.normals, "state rows")?;
    let stage_g = DVector::from_vec(config.state_rows.offsets.clone());

    let violates = |states: &[DVector<f64>]| {
        states.iter().skip(1).any(|x| {
            let slack = &stage_f * x - &stage_g;
            slack.iter().any(|&s| s > 0.0)
        })
    };

    let one_run = |i: usize| -> Result<(bool, bool, bool)> {
        let run = run_paired_prepared(&prep, config.seed ^ i as u64)?;
        Ok((
            violates(&run.star.states),
            violates(&run.dagger.states),
            run.infeasible_at.is_some(),
        ))
    };
    let results: Vec<Result<(bool, bool, bool)>> = if sequential {
        map_shards_seq(n_runs, one_run)
    } else {
        map_shards(n_runs, one_run)
    };

    let mut star_violations = 0;
    let mut dagger_violations = 0;
    let mut infeasible_runs = 0;
    for r in results {
        let (s, d, inf) = r?;
        star_violations += s as usize;
        dagger_violations += d as usize;
        infeasible_runs += inf as usize;
    }
    let star_rate = star_violations as f64 / n_runs as f64;
    let dagger_rate = dagger_violations as f64 / n_runs as f64;
    Ok(ViolationStats {
        runs: n_runs,
        star_violations,
        dagger_violations,
        infeasible_runs,
        star_rate,
        dagger_rate,
        dagger_ci95: wilson_interval(dagger_violations, n_runs, 1.959963984540054),
    })
}

fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Qualitative features of one paired run, mirroring the benchmark's
/// expected sign pattern.
#[derive(Debug, Clone, Serialize)]
pub struct QualitativeChecks {
    /// The accumulated regret is negative somewhere before it is positive.
    pub regret_sign_flip: bool,
    /// The gap rises from its initial value before halfway through the run
    /// and is negative at some later step.
    pub gap_rise_then_negative: bool,
    pub phi_entry: Option<usize>,
    pub gap_log_slope: Option<f64>,
    pub regret_increment_tail_max: f64,
}

impl QualitativeChecks {
    pub fn evaluate(series: &RegretSeries, tail_window: usize) -> Self {
        let r = &series.closed_loop;
        let first_neg = r.iter().position(|&x| x < 0.0);
        let regret_sign_flip = match first_neg {
            Some(i) => r[i..].iter().any(|&x| x > 0.0),
            None => false,
        };

        let g = &series.gap;
        let peak = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let gap_rise_then_negative = peak < g.len() / 2
            && g.get(peak).copied().unwrap_or(0.0) > g.first().copied().unwrap_or(0.0)
            && g[peak..].iter().any(|&x| x < 0.0);

        let (slope, tail) = match convergence_report(series, tail_window) {
            Ok(rep) => (rep.gap_log_slope, rep.regret_increment_tail_max),
            Err(_) => (None, f64::INFINITY),
        };
        Self {
            regret_sign_flip,
            gap_rise_then_negative,
            phi_entry: series.phi_entry,
            gap_log_slope: slope,
            regret_increment_tail_max: tail,
        }
    }

    pub fn sign_pattern_holds(&self) -> bool {
        self.regret_sign_flip && self.gap_rise_then_negative
    }

    pub fn all_hold(&self, tail_bound: f64) -> bool {
        self.sign_pattern_holds()
            && self.phi_entry.is_some()
            && self.gap_log_slope.is_some_and(|s| s < 0.0)
            && self.regret_increment_tail_max < tail_bound
    }
}

/// Outcome of a seed scan for the qualitative pattern.
#[derive(Debug, Clone, Serialize)]
pub struct SeedScan {
    pub passing_seed: Option<u64>,
    pub seeds_tried: Vec<u64>,
    pub checks: Vec<QualitativeChecks>,
}

/// Tries the config seed and then successive seeds (at most `max_seeds` in
/// total) until one satisfies `all_hold`; records every attempt.
pub fn scan_seeds(
    config: &ExperimentConfig,
    max_seeds: usize,
    tail_window: usize,
    tail_bound: f64,
) -> Result<SeedScan> {
    let prep = prepare(config)?;
    let mut scan = SeedScan {
        passing_seed: None,
        seeds_tried: Vec::new(),
        checks: Vec::new(),
    };
    for i in 0..max_seeds as u64 {
        let seed = config.seed.wrapping_add(i);
        let run = run_paired_prepared(&prep, seed)?;
        let series = run.series(&prep.model)?;
        let checks = QualitativeChecks::evaluate(&series, tail_window);
        let ok = checks.all_hold(tail_bound);
        scan.seeds_tried.push(seed);
        scan.checks.push(checks);
        if ok {
            scan.passing_seed = Some(seed);
            break;
        }
    }
    Ok(scan)
}

/// Tightening constants of a run, exported for inspection.
#[derive(Debug, Clone, Serialize)]
pub struct TighteningSummary {
    pub star_mode: TighteningMode,
    pub psi_star: Vec<f64>,
    pub psi_dr: Vec<f64>,
    pub psi_gaussian: Vec<f64>,
}

/// The JSON summary written next to the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub x0: Vec<f64>,
    pub final_regret: Option<f64>,
    pub phi_entry_k: Option<usize>,
    pub gap_decay_slope: Option<f64>,
    pub regret_increment_tail_max: Option<f64>,
    pub violations: Option<ViolationStats>,
    pub infeasible_runs: Option<usize>,
    pub conservatism: Option<VolumeEstimate>,
    pub tightening: Option<TighteningSummary>,
}

impl RunSummary {
    pub fn empty(seed: u64, x0: Vec<f64>) -> Self {
        Self {
            seed,
            x0,
            final_regret: None,
            phi_entry_k: None,
            gap_decay_slope: None,
            regret_increment_tail_max: None,
            violations: None,
            infeasible_runs: None,
            conservatism: None,
            tightening: None,
        }
    }
}

/// Conservatism of the prepared experiment's stacked constraint set: the
/// exactly tightened set (per the configured noise model) eroded by the DR
/// tightened one.
///
/// The stacked rows only touch stages `1..=N`; coordinates no row acts on
/// (the deterministic stage 0) are unconstrained cylinder directions and are
/// dropped before measuring, which is recorded in the estimate's flags.
pub fn conservatism_report(
    prep: &PreparedExperiment,
    mc_samples: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    let (reduced_f, kept) = drop_untouched_columns(&prep.state_f);
    let reduced_sigma = DMatrix::from_fn(kept.len(), kept.len(), |i, j| {
        prep.sigma_x[(kept[i], kept[j])]
    });
    let reduced_noise_map = DMatrix::from_fn(kept.len(), prep.pred.noise_map.ncols(), |i, j| {
        prep.pred.noise_map[(kept[i], j)]
    });
    let exact = match prep.config.noise {
        NoiseKind::Gaussian => ExactTightening::Gaussian,
        NoiseKind::Laplacian => ExactTightening::Empirical {
            kind: prep.config.noise,
            sigma_w: &prep.model.sigma_w,
            noise_map: &reduced_noise_map,
            samples: prep.config.quantile_samples,
            seed: prep.config.seed ^ PSI_SEED_SALT,
        },
    };
    let mut estimate = conservatism(
        &reduced_f,
        &prep.state_g,
        &reduced_sigma,
        prep.allocation.deltas(),
        &exact,
        mc_samples,
        seed,
    )?;
    if kept.len() != prep.state_f.ncols() {
        estimate.flags.push(format!(
            "volume over the {} constrained coordinates; {} unconstrained coordinates dropped",
            kept.len(),
            prep.state_f.ncols() - kept.len()
        ));
    }
    Ok(estimate)
}

/// Drops columns no row touches; returns the reduced matrix and the kept
/// column indices.
fn drop_untouched_columns(f: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let kept: Vec<usize> = (0..f.ncols())
        .filter(|&j| f.column(j).amax() > 0.0)
        .collect();
    let reduced = DMatrix::from_fn(f.nrows(), kept.len(), |i, j| f[(i, kept[j])]);
    (reduced, kept)
}

fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x}")
    }
}

/// Writes `run.csv` (one row per recorded step) and `summary.json` under
/// `dir`. Output is bit-identical across repeated invocations with the same
/// inputs.
pub fn export(
    traj: &PairedTrajectories,
    series: &RegretSeries,
    report: Option<&ConvergenceReport>,
    prep: &PreparedExperiment,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let n = prep.model.state_dim();
    let m = prep.model.input_dim();
    let dt = prep.model.dt;

    let mut csv = String::new();
    csv.push_str("k,t");
    for j in 1..=n {
        csv.push_str(&format!(",x_star_{j}"));
    }
    for j in 1..=n {
        csv.push_str(&format!(",x_dagger_{j}"));
    }
    for j in 1..=m {
        csv.push_str(&format!(",u_star_{j}"));
    }
    for j in 1..=m {
        csv.push_str(&format!(",u_dagger_{j}"));
    }
    csv.push_str(",J_star,J_dagger,regret_cl,gap,active_star,active_dagger,matched\n");

    let len = traj.star.len();
    for k in 0..len {
        csv.push_str(&format!("{k},{}", fmt_f64(k as f64 * dt)));
        for j in 0..n {
            csv.push_str(&format!(",{}", fmt_f64(traj.star.states[k][j])));
        }
        for j in 0..n {
            csv.push_str(&format!(",{}", fmt_f64(traj.dagger.states[k][j])));
        }
        for j in 0..m {
            csv.push_str(&format!(",{}", fmt_f64(traj.star.inputs[k][j])));
        }
        for j in 0..m {
            csv.push_str(&format!(",{}", fmt_f64(traj.dagger.inputs[k][j])));
        }
        let joined = |set: &[usize]| {
            set.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let matched = {
            let mut a = traj.star.active_sets[k].clone();
            let mut b = traj.dagger.active_sets[k].clone();
            a.sort_unstable();
            b.sort_unstable();
            (a == b) as u8
        };
        csv.push_str(&format!(
            ",{},{},{},{},{},{},{}\n",
            fmt_f64(traj.star.values[k]),
            fmt_f64(traj.dagger.values[k]),
            fmt_f64(series.closed_loop[k]),
            fmt_f64(series.gap[k]),
            joined(&traj.star.active_sets[k]),
            joined(&traj.dagger.active_sets[k]),
            matched
        ));
    }

    let mut summary = RunSummary::empty(prep.config.seed, prep.config.x0.clone());
    summary.final_regret = series.closed_loop.last().copied();
    summary.phi_entry_k = series.phi_entry;
    if let Some(rep) = report {
        summary.gap_decay_slope = rep.gap_log_slope;
        summary.regret_increment_tail_max = Some(rep.regret_increment_tail_max);
    }
    summary.infeasible_runs = Some(traj.infeasible_at.is_some() as usize);
    summary.tightening = Some(TighteningSummary {
        star_mode: prep.star_spec.mode,
        psi_star: prep.star_spec.psis.clone(),
        psi_dr: prep.dagger_spec.psis.clone(),
        psi_gaussian: prep.gaussian_psis.clone(),
    });

    let csv_path = dir.join("run.csv");
    let json_path = dir.join("summary.json");
    fs::write(&csv_path, csv)?;
    fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    Ok((csv_path, json_path))
}
