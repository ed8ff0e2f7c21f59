//! Variance bookkeeping: the per-step α factor, expected variance decrease,
//! Monte Carlo error estimation over trials, and `c/n` fits.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{
    bayes_direct_cc, bayes_marginal_checkpoints, bayes_single_checkpoints, phom, BayesConfig, DirectBayesConfig,
    EstimateResult, PhomConfig, PhomVariant, RamseyConfig, ramsey_scan,
};
use crate::models::{ModelKind, ModelSpec};
use crate::phase::{circ_diff, wrap_angle, PosteriorGrid1D};
use crate::sim::{spawn_rng, HiddenTruth, Lab, SamplingMode};

/// Upper end of the σ² range where the Gaussian closed forms are trusted.
pub const GAUSSIAN_REGIME_MAX: f64 = 0.5;

/// Default budgets of a variance curve.
pub const DEFAULT_BUDGETS: [u64; 5] = [250, 500, 1000, 2000, 4000];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaParams {
    /// Number of cosines in the likelihood; the informative one has weight `1/K`.
    pub k: u32,
    pub sigma2: f64,
    /// `φ̄ - θ̃`.
    pub delta: f64,
}

fn check_k(k: u32) -> Result<()> {
    if matches!(k, 1 | 2 | 4) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("K must be 1, 2 or 4, got {k}")))
    }
}

/// `e^{-σ²} sin²δ / (K² - e^{-σ²} cos²δ)`.
pub fn alpha_factor(p: &AlphaParams) -> Result<f64> {
    check_k(p.k)?;
    if p.sigma2.is_nan() || p.sigma2 < 0.0 {
        return Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {}", p.sigma2)));
    }
    let e = (-p.sigma2).exp();
    let (s, c) = p.delta.sin_cos();
    let k2 = (p.k * p.k) as f64;
    let den = k2 - e * c * c;
    if den <= 0.0 {
        // K = 1, no spread, δ = 0: the measurement is deterministic
        return Ok(0.0);
    }
    Ok(e * s * s / den)
}

/// Average of the zero-spread α factor over δ uniform on the circle.
pub fn mean_alpha(k: u32) -> Result<f64> {
    check_k(k)?;
    // midpoint rule is spectrally accurate for smooth periodic integrands
    let n = 4096;
    let h = TAU / n as f64;
    let sum: f64 = (0..n)
        .map(|i| {
            let delta = -PI + (i as f64 + 0.5) * h;
            alpha_factor(&AlphaParams { k, sigma2: 0.0, delta }).expect("K checked")
        })
        .sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceStep {
    /// Expected change of the posterior variance after one measurement.
    pub delta_variance: f64,
    /// σ² lies outside the range where the Gaussian form holds.
    pub out_of_regime: bool,
}

/// `-α σ⁴` for a Gaussian posterior of variance `sigma2` centred at `mean`,
/// measured at `ttilde`.
pub fn variance_step_analytic(k: u32, sigma2: f64, mean: f64, ttilde: f64) -> Result<VarianceStep> {
    let alpha = alpha_factor(&AlphaParams {
        k,
        sigma2,
        delta: mean - ttilde,
    })?;
    Ok(VarianceStep {
        delta_variance: -alpha * sigma2 * sigma2,
        out_of_regime: sigma2 > GAUSSIAN_REGIME_MAX,
    })
}

/// Expected one-step variance change by exact quadrature on `grid`, for the
/// likelihood `(1 ± amplitude · cos(φ - θ̃)) / 2`.
pub fn variance_step_numeric(grid: &PosteriorGrid1D, amplitude: f64, ttilde: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&amplitude.abs()) {
        return Err(Error::InvalidArgument(format!("amplitude {amplitude} outside [-1, 1]")));
    }
    let prior = grid.moments().variance;
    let dx = grid.spacing();
    let p_plus: f64 = grid
        .points()
        .iter()
        .zip(grid.density())
        .map(|(&x, &d)| d * 0.5 * (1.0 + amplitude * (x - ttilde).cos()))
        .sum::<f64>()
        * dx;
    let mut expected = 0.0;
    for (sign, p) in [(1.0, p_plus), (-1.0, 1.0 - p_plus)] {
        if p <= 0.0 {
            continue;
        }
        let mut post = grid.clone();
        post.update_cosine(0.5, 0.5 * sign * amplitude, ttilde)?;
        expected += p * post.moments().variance;
    }
    Ok(expected - prior)
}

/// Wrapped Gaussian-shaped grid with the given centre and variance parameter.
pub fn gaussian_grid(bins: usize, mean: f64, sigma2: f64) -> Result<PosteriorGrid1D> {
    PosteriorGrid1D::from_fn(bins, |x| {
        let e = wrap_angle(x - mean);
        (-e * e / (2.0 * sigma2)).exp()
    })
}

/// Analytic and quadrature variance steps at one `(K, σ², δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCheck {
    pub k: u32,
    pub sigma2: f64,
    pub delta: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

pub const STEP_CHECK_K: [u32; 2] = [2, 4];
pub const STEP_CHECK_SIGMA2: [f64; 2] = [1e-3, 0.1];
pub const STEP_CHECK_DELTA: [f64; 3] = [PI / 6.0, PI / 3.0, PI / 2.0];

/// Compares [`variance_step_analytic`] with [`variance_step_numeric`] on
/// Gaussian grids over every combination of the `STEP_CHECK_*` values.
pub fn variance_step_checks(bins: usize) -> Result<Vec<StepCheck>> {
    let mut out = Vec::with_capacity(12);
    for k in STEP_CHECK_K {
        for sigma2 in STEP_CHECK_SIGMA2 {
            let grid = gaussian_grid(bins, 0.0, sigma2)?;
            // the grid's own variance, which differs slightly from the shape parameter
            let v = grid.moments().variance;
            for delta in STEP_CHECK_DELTA {
                let analytic = variance_step_analytic(k, v, 0.0, -delta)?.delta_variance;
                let numeric = variance_step_numeric(&grid, 1.0 / k as f64, -delta)?;
                out.push(StepCheck {
                    k,
                    sigma2,
                    delta,
                    analytic,
                    numeric,
                    relative_error: ((analytic - numeric) / numeric).abs(),
                });
            }
        }
    }
    Ok(out)
}

/// Which estimator a Monte Carlo run drives. Budgets are supplied separately.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    Ramsey { scan_points: usize },
    BayesSingle(BayesConfig),
    Phom {
        variant: PhomVariant,
        iterations: usize,
        scan_points: usize,
    },
    BayesDirect(DirectBayesConfig),
    BayesMarginal(BayesConfig),
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::Ramsey { .. } => "ramsey",
            EstimatorSpec::BayesSingle(_) => "bayes1q",
            EstimatorSpec::Phom {
                variant: PhomVariant::Plain,
                ..
            } => "phom",
            EstimatorSpec::Phom {
                variant: PhomVariant::ConstantCosine,
                ..
            } => "ccphom",
            EstimatorSpec::BayesDirect(_) => "bayes-direct",
            EstimatorSpec::BayesMarginal(_) => "bayes-marginal",
        }
    }

    /// Runs one trial at every budget. Bayesian runs go once to the largest
    /// budget and report at each checkpoint; scan runs restart per budget from
    /// the same stream, so a trial sees the same truth at every budget.
    pub fn run_trial(&self, trial: &Trial) -> Result<Vec<EstimateResult>> {
        let budgets = trial.budgets;
        let last = *budgets.last().expect("validated non-empty");
        match self {
            EstimatorSpec::BayesSingle(cfg) => {
                let cfg = BayesConfig { budget: last, ..*cfg };
                bayes_single_checkpoints(&mut trial.lab(), &cfg, budgets, |_, _| {})
            }
            EstimatorSpec::BayesMarginal(cfg) => {
                let cfg = BayesConfig { budget: last, ..*cfg };
                bayes_marginal_checkpoints(&mut trial.lab(), &cfg, budgets)
            }
            EstimatorSpec::Ramsey { scan_points } => budgets
                .iter()
                .map(|&n| ramsey_scan(&mut trial.lab(), &RamseyConfig::for_budget(*scan_points, n)))
                .collect(),
            EstimatorSpec::Phom {
                variant,
                iterations,
                scan_points,
            } => budgets
                .iter()
                .map(|&n| {
                    let cfg = PhomConfig::for_budget(trial.model, *variant, *iterations, *scan_points, n);
                    phom(&mut trial.lab(), &cfg)
                })
                .collect(),
            EstimatorSpec::BayesDirect(cfg) => budgets
                .iter()
                .map(|&n| bayes_direct_cc(&mut trial.lab(), &cfg.clone().with_budget(trial.model, n)))
                .collect(),
        }
    }
}

/// Everything one trial needs to build fresh labs on its own stream.
#[derive(Debug, Clone, Copy)]
pub struct Trial<'a> {
    pub model: &'a ModelSpec,
    pub master_seed: u64,
    pub index: u64,
    pub sampling: SamplingMode,
    pub budgets: &'a [u64],
}

impl<'a> Trial<'a> {
    /// Truth is the first draw on the trial's stream.
    pub fn truth(&self) -> HiddenTruth {
        HiddenTruth::draw_uniform(self.model, &mut spawn_rng(self.master_seed, self.index))
    }

    /// A lab positioned right after the truth draw.
    pub fn lab(&self) -> Lab<'a> {
        let mut rng = spawn_rng(self.master_seed, self.index);
        let truth = HiddenTruth::draw_uniform(self.model, &mut rng);
        Lab::new(self.model, truth, rng).with_sampling(self.sampling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonteCarloConfig {
    pub trials: u64,
    pub master_seed: u64,
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
    pub sampling: SamplingMode,
}

/// Mean squared circular error at one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct VariancePoint {
    /// Nominal budget requested.
    pub budget: u64,
    /// Mean preparations actually spent per trial.
    pub n: f64,
    /// Mean preparations informing each phase.
    pub n_per_phase: f64,
    /// Average over trials and phases.
    pub sigma2: f64,
    /// Standard error of `sigma2` across trials.
    pub stderr: f64,
    pub trials: u64,
    /// Trials where any phase estimate was flagged diffuse; their errors are
    /// kept in the average.
    pub diffuse_count: u64,
    pub per_phase_sigma2: Vec<f64>,
    pub per_phase_stderr: Vec<f64>,
    /// Mean of the variances the estimator reported for itself (posterior
    /// variance for Bayesian methods), over trials and phases; NaN when the
    /// estimator reports none.
    pub reported_sigma2: f64,
}

#[derive(Debug, Clone)]
struct TrialScore {
    sq_errors: Vec<f64>,
    reported: f64,
    n: u64,
    n_per_phase: f64,
    diffuse: bool,
}

/// Runs `trials` independent trials of `spec` at every budget.
pub fn monte_carlo_variance(
    spec: &EstimatorSpec,
    model: &ModelSpec,
    budgets: &[u64],
    cfg: &MonteCarloConfig,
) -> Result<Vec<VariancePoint>> {
    if matches!(spec, EstimatorSpec::Ramsey { .. } | EstimatorSpec::BayesSingle(_)) != (model.kind == ModelKind::SingleQubit) {
        return Err(Error::InvalidArgument(format!(
            "estimator {} does not apply to {}",
            spec.name(),
            model.kind
        )));
    }
    monte_carlo_with(model, budgets, cfg, |t| spec.run_trial(t))
}

/// Monte Carlo driver for any per-trial runner returning one result per
/// budget.
///
/// Trials run on a private pool; per-trial scores are collected in trial
/// order and reduced sequentially, so the output does not depend on the
/// number of workers.
pub fn monte_carlo_with<F>(model: &ModelSpec, budgets: &[u64], cfg: &MonteCarloConfig, run: F) -> Result<Vec<VariancePoint>>
where
    F: Fn(&Trial) -> Result<Vec<EstimateResult>> + Sync,
{
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) || budgets[0] == 0 {
        return Err(Error::InvalidArgument("budgets must be positive and strictly increasing".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let scores: Vec<Vec<TrialScore>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|index| {
                let trial = Trial {
                    model,
                    master_seed: cfg.master_seed,
                    index,
                    sampling: cfg.sampling,
                    budgets,
                };
                let truth = trial.truth();
                let results = run(&trial)?;
                if results.len() != budgets.len() {
                    return Err(Error::DimensionMismatch {
                        what: "results per trial",
                        expected: budgets.len(),
                        got: results.len(),
                    });
                }
                Ok(results.iter().map(|r| score(&truth, r)).collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(budgets
        .iter()
        .enumerate()
        .map(|(b, &budget)| reduce(budget, scores.iter().map(|s| &s[b]), model.num_phases))
        .collect())
}

fn score(truth: &HiddenTruth, r: &EstimateResult) -> TrialScore {
    let per_phase = &r.per_phase_preparations;
    TrialScore {
        sq_errors: truth
            .phases()
            .iter()
            .zip(&r.phases_est)
            .map(|(&t, &e)| circ_diff(e, t).powi(2))
            .collect(),
        reported: r.variances.iter().sum::<f64>() / r.variances.len() as f64,
        n: r.preparations_used,
        n_per_phase: per_phase.iter().sum::<u64>() as f64 / per_phase.len().max(1) as f64,
        diffuse: r.any_diffuse(),
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn reduce<'a, I>(budget: u64, scores: I, phases: usize) -> VariancePoint
where
    I: Iterator<Item = &'a TrialScore>,
{
    let scores: Vec<_> = scores.collect();
    let trials = scores.len() as u64;
    let per_trial: Vec<f64> = scores
        .iter()
        .map(|s| s.sq_errors.iter().sum::<f64>() / phases as f64)
        .collect();
    let (sigma2, stderr) = mean_and_stderr(&per_trial);
    let (per_phase_sigma2, per_phase_stderr) = (0..phases)
        .map(|p| mean_and_stderr(&scores.iter().map(|s| s.sq_errors[p]).collect::<Vec<_>>()))
        .unzip();
    VariancePoint {
        budget,
        n: scores.iter().map(|s| s.n as f64).sum::<f64>() / trials as f64,
        n_per_phase: scores.iter().map(|s| s.n_per_phase).sum::<f64>() / trials as f64,
        sigma2,
        stderr,
        trials,
        diffuse_count: scores.iter().filter(|s| s.diffuse).count() as u64,
        per_phase_sigma2,
        per_phase_stderr,
        reported_sigma2: scores.iter().map(|s| s.reported).sum::<f64>() / trials as f64,
    }
}

/// Plain-PHOM variance at one iteration count with a fixed number of
/// measurements per scan point.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauPoint {
    pub iterations: usize,
    pub point: VariancePoint,
}

/// Trial variance of plain PHOM for each iteration count at fixed `mpp`.
/// The budget grows as `combos · M · I · mpp`.
pub fn phom_plateau(
    model: &ModelSpec,
    iterations: &[usize],
    scan_points: usize,
    mpp: u64,
    cfg: &MonteCarloConfig,
) -> Result<Vec<PlateauPoint>> {
    if iterations.is_empty() || iterations.contains(&0) {
        return Err(Error::InvalidArgument("iterations must be a non-empty list of positive counts".into()));
    }
    iterations
        .iter()
        .map(|&i| {
            let budget = (model.num_combos() * scan_points * i) as u64 * mpp;
            let phom_cfg = PhomConfig {
                iterations: i,
                scan_points,
                shots_per_point: mpp,
                initial_angles: None,
                variant: PhomVariant::Plain,
            };
            let mut points = monte_carlo_with(model, &[budget], cfg, |t| Ok(vec![phom(&mut t.lab(), &phom_cfg)?]))?;
            Ok(PlateauPoint {
                iterations: i,
                point: points.remove(0),
            })
        })
        .collect()
}

/// Least-squares `σ² = c/n` fit through the origin in `1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceCurve {
    pub samples: Vec<(f64, f64)>,
    pub fitted_c: f64,
    /// Root-mean-square of `σ² - c/n` over the samples.
    pub fit_residual: f64,
}

pub fn fit_inverse_n(samples: &[(f64, f64)]) -> Result<VarianceCurve> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "c/n fit needs at least 4 samples, got {}",
            samples.len()
        )));
    }
    if let Some(&(n, s)) = samples.iter().find(|&&(n, s)| n.is_nan() || s.is_nan() || n <= 0.0 || s <= 0.0) {
        return Err(Error::InvalidArgument(format!("non-positive sample (n={n}, sigma2={s})")));
    }
    if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::InvalidArgument("sample n must be strictly increasing".into()));
    }
    let sxy: f64 = samples.iter().map(|(n, s)| s / n).sum();
    let sxx: f64 = samples.iter().map(|(n, _)| 1.0 / (n * n)).sum();
    let c = sxy / sxx;
    let rss: f64 = samples.iter().map(|(n, s)| (s - c / n).powi(2)).sum();
    Ok(VarianceCurve {
        samples: samples.to_vec(),
        fitted_c: c,
        fit_residual: (rss / samples.len() as f64).sqrt(),
    })
}

/// Which resource count the fit uses as `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accounting {
    /// All preparations of the run.
    Total,
    /// Preparations informing each phase.
    PerPhase,
}

/// Which per-point variance the fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Mean squared circular error against the truth.
    SquaredError,
    /// Mean of the variances the estimator reported.
    Reported,
}

/// `c/n` fit of a Monte Carlo curve.
pub fn fit_points(points: &[VariancePoint], accounting: Accounting, metric: Metric) -> Result<VarianceCurve> {
    let samples: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let n = match accounting {
                Accounting::Total => p.n,
                Accounting::PerPhase => p.n_per_phase,
            };
            let v = match metric {
                Metric::SquaredError => p.sigma2,
                Metric::Reported => p.reported_sigma2,
            };
            (n, v)
        })
        .collect();
    fit_inverse_n(&samples)
}
