//! Phase estimators driven by a simulated [`Lab`].
//!
//! Scan-based methods spend a fixed budget on a grid of settings and fit a
//! cosine; Bayesian methods keep a grid posterior and choose settings
//! adaptively or at random.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::error::{check_len, Error, Result};
use crate::models::{ModelKind, ModelSpec, Outcome};
use crate::phase::{mean_from_trig, BayesGrid, wrap_angle, CircularMoments, PosteriorGrid1D, PosteriorGrid2D, WrappedPhase};
use crate::sim::{Lab, MeasurementRecord};

/// Amplitude below which a fitted cosine counts as flat.
pub const FLAT_AMPLITUDE: f64 = 1e-9;

/// How Bayesian estimators pick the next measurement setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// `θ̃ = φ̄ ± π/2`, sign drawn fresh each step.
    #[default]
    Adaptive,
    /// `θ̃` uniform on `[-π, π)`.
    Random,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Adaptive => "adaptive",
            Selection::Random => "random",
        }
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Selection::Adaptive),
            "random" => Ok(Selection::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown selection `{other}` (expected adaptive or random)"
            ))),
        }
    }
}

/// Phase estimates with their uncertainty and resource use.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub phases_est: Vec<WrappedPhase>,
    /// Posterior circular variance for Bayesian methods; delta-method variance
    /// of the last fitted scan phase for scan methods.
    pub variances: Vec<f64>,
    pub preparations_used: u64,
    /// Preparations whose outcomes informed each phase.
    pub per_phase_preparations: Vec<u64>,
    /// Per phase: the posterior was flat or the fit had no amplitude.
    pub diffuse: Vec<bool>,
    /// Combos whose scan came back flat at least once.
    pub flagged_combos: Vec<usize>,
    pub history: Option<Vec<MeasurementRecord>>,
}

impl EstimateResult {
    pub fn any_diffuse(&self) -> bool {
        self.diffuse.iter().any(|&d| d)
    }

    fn from_moments(moments: &[CircularMoments], preparations: u64, per_phase: u64) -> Self {
        EstimateResult {
            phases_est: moments.iter().map(|m| m.mean).collect(),
            variances: moments.iter().map(|m| m.variance).collect(),
            preparations_used: preparations,
            per_phase_preparations: vec![per_phase; moments.len()],
            diffuse: moments.iter().map(|m| m.diffuse).collect(),
            flagged_combos: Vec::new(),
            history: None,
        }
    }
}

/// Least-squares fit of `y ≈ c + a cos x + b sin x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineFit {
    pub offset: f64,
    pub cos_coeff: f64,
    pub sin_coeff: f64,
    pub amplitude: f64,
    /// `atan2(b, a)`, the argument that maximizes the fitted curve.
    pub phase: f64,
    /// Delta-method variance of `phase` from the residual scatter; NaN when
    /// there are no residual degrees of freedom.
    pub phase_variance: f64,
}

impl CosineFit {
    pub fn is_flat(&self) -> bool {
        self.amplitude < FLAT_AMPLITUDE
    }
}

/// Fits `c + a cos x + b sin x` (or `a cos x + b sin x` without offset).
pub fn fit_cosine(args: &[f64], ys: &[f64], with_offset: bool) -> Result<CosineFit> {
    check_len("scan values", args.len(), ys.len())?;
    let p = if with_offset { 3 } else { 2 };
    if args.len() < p {
        return Err(Error::InvalidArgument(format!(
            "cosine fit needs at least {p} points, got {}",
            args.len()
        )));
    }
    let row = |x: f64| {
        if with_offset {
            Vector3::new(x.cos(), x.sin(), 1.0)
        } else {
            Vector3::new(x.cos(), x.sin(), 0.0)
        }
    };
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    for (&x, &y) in args.iter().zip(ys) {
        let r = row(x);
        xtx += r * r.transpose();
        xty += r * y;
    }
    if !with_offset {
        xtx[(2, 2)] = 1.0;
    }
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("scan points do not determine a cosine".into()))?;
    let beta = inv * xty;
    let (a, b) = (beta[0], beta[1]);
    let rss: f64 = args
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - row(x).dot(&beta)).powi(2))
        .sum();
    let dof = args.len() - p;
    let amplitude = a.hypot(b);
    let phase_variance = if dof == 0 || amplitude == 0.0 {
        f64::NAN
    } else {
        let s2 = rss / dof as f64;
        let r4 = amplitude.powi(4);
        s2 * (b * b * inv[(0, 0)] - 2.0 * a * b * inv[(0, 1)] + a * a * inv[(1, 1)]) / r4
    };
    Ok(CosineFit {
        offset: if with_offset { beta[2] } else { 0.0 },
        cos_coeff: a,
        sin_coeff: b,
        amplitude,
        phase: b.atan2(a),
        phase_variance,
    })
}

/// `M` equidistant points `-π + 2πm/M` on the circle.
pub fn circle_points(m: usize) -> Vec<f64> {
    (0..m).map(|i| -PI + TAU * i as f64 / m as f64).collect()
}

/// `M` equidistant points `-π/2 + πm/M`, one period of a frequency-2 cosine.
pub fn half_circle_points(m: usize) -> Vec<f64> {
    (0..m).map(|i| -PI / 2.0 + PI * i as f64 / m as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RamseyConfig {
    pub scan_points: usize,
    pub shots_per_point: u64,
}

impl RamseyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scan_points < 4 || self.shots_per_point < 1 {
            return Err(Error::InvalidArgument(format!(
                "ramsey needs scan_points >= 4 and shots_per_point >= 1, got {} and {}",
                self.scan_points, self.shots_per_point
            )));
        }
        Ok(())
    }

    /// Splits budget `n` evenly over the scan points.
    pub fn for_budget(scan_points: usize, n: u64) -> Self {
        RamseyConfig {
            scan_points,
            shots_per_point: shots_for(n, scan_points as u64),
        }
    }
}

fn shots_for(budget: u64, settings: u64) -> u64 {
    ((budget as f64 / settings as f64).round() as u64).max(1)
}

fn require(lab: &Lab, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} is not defined for {}", lab.model().kind)))
    }
}

/// Scan `θ` over the circle and fit `⟨O_θ⟩ = r cos(A - θ)`.
pub fn ramsey_scan(lab: &mut Lab, cfg: &RamseyConfig) -> Result<EstimateResult> {
    cfg.validate()?;
    require(lab, lab.model().kind == ModelKind::SingleQubit, "ramsey_scan")?;
    let (scan, ys) = ramsey_data(lab, cfg)?;
    let fit = fit_cosine(&scan, &ys, false)?;
    Ok(EstimateResult {
        phases_est: vec![WrappedPhase::from_finite(if fit.is_flat() { 0.0 } else { wrap_angle(fit.phase) })],
        variances: vec![fit.phase_variance],
        preparations_used: lab.preparations(),
        per_phase_preparations: vec![lab.preparations()],
        diffuse: vec![fit.is_flat()],
        flagged_combos: if fit.is_flat() { vec![0] } else { Vec::new() },
        history: lab.take_history(),
    })
}

/// Raw Ramsey scan: the angles and the measured means at each of them.
pub fn ramsey_data(lab: &mut Lab, cfg: &RamseyConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let scan = circle_points(cfg.scan_points);
    let ys = scan
        .iter()
        .map(|&t| lab.estimate_expectation(&[t], 0, cfg.shots_per_point))
        .collect::<Result<Vec<_>>>()?;
    Ok((scan, ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BayesConfig {
    pub grid_bins: usize,
    pub budget: u64,
    pub selection: Selection,
    /// Leading preparations with random settings.
    pub warmup: u64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        BayesConfig {
            grid_bins: 2048,
            budget: 1000,
            selection: Selection::Adaptive,
            warmup: 20,
        }
    }
}

impl BayesConfig {
    /// Defaults with the warmup suited to `kind`. The three-plaquette
    /// marginals carry amplitude 1/8; with `θ̃ = φ̄ ± π/2` alone the posterior
    /// cannot tell `φ̄ + x` from `φ̄ + π − x`, so a few hundred random settings
    /// come first.
    pub fn for_model(kind: ModelKind) -> Self {
        BayesConfig {
            warmup: default_warmup(kind),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.budget {
            return Err(Error::InvalidArgument(format!(
                "warmup {} exceeds budget {}",
                self.warmup, self.budget
            )));
        }
        Ok(())
    }
}

pub fn default_warmup(kind: ModelKind) -> u64 {
    match kind {
        ModelKind::SingleQubit => 0,
        ModelKind::TwoPlaquette => 20,
        ModelKind::ThreePlaquette => 300,
    }
}

fn checkpoint_list(budget: u64, checkpoints: &[u64]) -> Result<Vec<u64>> {
    let mut cps = checkpoints.to_vec();
    if cps.is_empty() {
        cps.push(budget);
    }
    if cps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
    }
    Ok(cps)
}

/// Adaptive (or random-angle) Bayesian estimation of the single-qubit phase.
///
/// The first setting is `θ = 0`; afterwards `θ = φ̄ ± π/2` unless warmup or
/// random selection is in force.
pub fn bayes_single_adaptive(lab: &mut Lab, cfg: &BayesConfig) -> Result<EstimateResult> {
    let mut out = bayes_single_checkpoints(lab, cfg, &[cfg.budget], |_, _| {})?;
    let mut r = out.pop().expect("one checkpoint");
    r.history = lab.take_history();
    Ok(r)
}

/// Runs to the last checkpoint and reports the estimate at every checkpoint.
/// `observe(step, grid)` sees the posterior after each step (1-based).
pub fn bayes_single_checkpoints<F>(
    lab: &mut Lab,
    cfg: &BayesConfig,
    checkpoints: &[u64],
    mut observe: F,
) -> Result<Vec<EstimateResult>>
where
    F: FnMut(u64, &PosteriorGrid1D),
{
    cfg.validate()?;
    require(lab, lab.model().kind == ModelKind::SingleQubit, "bayes_single_adaptive")?;
    let cps = checkpoint_list(cfg.budget, checkpoints)?;
    let mut grid = PosteriorGrid1D::uniform(cfg.grid_bins)?;
    let mut theta = 0.0;
    let mut results = Vec::with_capacity(cps.len());
    let mut next = cps.iter().peekable();
    let last = *cps.last().expect("non-empty");
    for step in 1..=last {
        let outcome = lab.measure_single(theta);
        let (c, s) = grid.update_cosine(0.5, 0.5 * outcome.sign(), theta)?;
        observe(step, &grid);
        theta = if step < cfg.warmup || cfg.selection == Selection::Random {
            lab.rng().uniform_angle()
        } else {
            wrap_angle(mean_from_trig(c, s).0.value() + lab.rng().quarter_turn())
        };
        if next.peek() == Some(&&step) {
            next.next();
            results.push(EstimateResult::from_moments(&[grid.moments()], step, step));
        }
    }
    Ok(results)
}

/// State of the marginal-likelihood estimator between preparations.
#[derive(Debug, Clone)]
pub struct MarginalBayes<'m> {
    model: &'m ModelSpec,
    cfg: BayesConfig,
    grids: Vec<PosteriorGrid1D>,
    means: Vec<f64>,
    targets: Vec<f64>,
    angles: Vec<f64>,
    outcomes: Vec<Outcome>,
    steps: u64,
}

impl<'m> MarginalBayes<'m> {
    pub fn new(model: &'m ModelSpec, cfg: &BayesConfig) -> Result<Self> {
        cfg.validate()?;
        if !model.kind.is_plaquette() {
            return Err(Error::InvalidArgument(format!("bayes_marginal is not defined for {}", model.kind)));
        }
        let first = PosteriorGrid1D::uniform(cfg.grid_bins)?;
        Ok(MarginalBayes {
            model,
            cfg: *cfg,
            grids: vec![first; model.num_phases],
            means: vec![0.0; model.num_phases],
            targets: vec![0.0; model.num_combos()],
            angles: vec![0.0; model.num_angles()],
            outcomes: vec![Outcome::Plus; model.num_combos()],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Current posterior means, one per phase.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn grids(&self) -> &[PosteriorGrid1D] {
        &self.grids
    }

    /// θ̃ targets of the most recent step, in combo order.
    pub fn last_targets(&self) -> &[f64] {
        &self.targets
    }

    /// One preparation: choose θ̃, solve for angles, read all combos, update.
    pub fn step(&mut self, lab: &mut Lab) -> Result<()> {
        let random = self.steps < self.cfg.warmup || self.cfg.selection == Selection::Random;
        for (t, c) in self.targets.iter_mut().zip(&self.model.combos) {
            *t = if random {
                lab.rng().uniform_angle()
            } else {
                wrap_angle(self.means[c.target_phase] + lab.rng().quarter_turn())
            };
        }
        self.model.solve_angles_into(&self.targets, &mut self.angles);
        lab.measure_all(&self.angles, &mut self.outcomes)?;
        for (c, o) in self.model.combos.iter().zip(&self.outcomes) {
            let realized: f64 = c.ttilde_row.iter().zip(&self.angles).map(|(r, a)| r * a).sum();
            let amplitude = o.sign() / (2.0 * c.k() as f64);
            let p = c.target_phase;
            let (cm, sm) = self.grids[p].update_cosine(0.5, amplitude, realized)?;
            self.means[p] = mean_from_trig(cm, sm).0.value();
        }
        self.steps += 1;
        Ok(())
    }

    pub fn result(&self, preparations: u64) -> EstimateResult {
        let moments: Vec<_> = self.grids.iter().map(|g| g.moments()).collect();
        EstimateResult::from_moments(&moments, preparations, self.steps)
    }
}

/// Marginal-likelihood Bayes over all phases at once.
pub fn bayes_marginal(lab: &mut Lab, cfg: &BayesConfig) -> Result<EstimateResult> {
    let mut out = bayes_marginal_checkpoints(lab, cfg, &[cfg.budget])?;
    let mut r = out.pop().expect("one checkpoint");
    r.history = lab.take_history();
    Ok(r)
}

/// Runs to the last checkpoint and reports the estimate at every checkpoint.
pub fn bayes_marginal_checkpoints(lab: &mut Lab, cfg: &BayesConfig, checkpoints: &[u64]) -> Result<Vec<EstimateResult>> {
    let cps = checkpoint_list(cfg.budget, checkpoints)?;
    let mut state = MarginalBayes::new(lab.model(), cfg)?;
    let start = lab.preparations();
    let mut results = Vec::with_capacity(cps.len());
    for &cp in &cps {
        while state.steps() < cp {
            state.step(lab)?;
        }
        results.push(state.result(lab.preparations() - start));
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhomVariant {
    /// Scan one designated angle per combo, iterate.
    #[default]
    Plain,
    /// Sweep θ̃ by a common shift of the combo's support angles, one pass.
    ConstantCosine,
}

impl PhomVariant {
    pub fn name(self) -> &'static str {
        match self {
            PhomVariant::Plain => "plain",
            PhomVariant::ConstantCosine => "constant_cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhomConfig {
    pub iterations: usize,
    pub scan_points: usize,
    pub shots_per_point: u64,
    /// Starting angle vector; zeros when `None`.
    pub initial_angles: Option<Vec<f64>>,
    pub variant: PhomVariant,
}

impl PhomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.scan_points < 4 || self.shots_per_point < 1 {
            return Err(Error::InvalidArgument(format!(
                "phom needs iterations >= 1, scan_points >= 4, shots_per_point >= 1; got {}, {}, {}",
                self.iterations, self.scan_points, self.shots_per_point
            )));
        }
        if self.variant == PhomVariant::ConstantCosine && self.iterations != 1 {
            return Err(Error::InvalidArgument("constant-cosine phom runs exactly one iteration".into()));
        }
        Ok(())
    }

    /// Shots per point that spend roughly `n` preparations in total.
    pub fn for_budget(model: &ModelSpec, variant: PhomVariant, iterations: usize, scan_points: usize, n: u64) -> Self {
        let settings = (model.num_combos() * scan_points * iterations) as u64;
        PhomConfig {
            iterations,
            scan_points,
            shots_per_point: shots_for(n, settings),
            initial_angles: None,
            variant,
        }
    }

    fn start(&self, model: &ModelSpec) -> Result<Vec<f64>> {
        match &self.initial_angles {
            Some(a) => {
                check_len("initial angles", model.num_angles(), a.len())?;
                Ok(a.clone())
            }
            None => Ok(vec![0.0; model.num_angles()]),
        }
    }
}

fn require_plaquette(lab: &Lab, what: &str) -> Result<()> {
    require(lab, lab.model().kind.is_plaquette(), what)
}

/// Iterative scan-and-maximize over one designated angle per combo.
pub fn phom(lab: &mut Lab, cfg: &PhomConfig) -> Result<EstimateResult> {
    if cfg.variant == PhomVariant::ConstantCosine {
        return phom_constant_cosine(lab, cfg);
    }
    cfg.validate()?;
    require_plaquette(lab, "phom")?;
    let model = lab.model();
    let mut angles = cfg.start(model)?;
    let scan = half_circle_points(cfg.scan_points);
    let args: Vec<f64> = scan.iter().map(|t| 2.0 * t).collect();
    let mut flagged = vec![false; model.num_combos()];
    let mut fit_var = vec![f64::NAN; model.num_combos()];
    let start = lab.preparations();
    for _ in 0..cfg.iterations {
        for (c, combo) in model.combos.iter().enumerate() {
            let q = combo.scan_angle;
            let keep = angles[q];
            let mut ys = Vec::with_capacity(scan.len());
            for &t in &scan {
                angles[q] = t;
                ys.push(lab.estimate_expectation(&angles, c, cfg.shots_per_point)?);
            }
            let fit = fit_cosine(&args, &ys, true)?;
            if fit.is_flat() {
                angles[q] = keep;
                flagged[c] = true;
            } else {
                angles[q] = fit.phase / 2.0;
                fit_var[c] = fit.phase_variance;
            }
        }
    }
    let used = lab.preparations() - start;
    let mut result = phase_result(model, used, &flagged, &fit_var, |c| model.theta_tilde(c, &angles))?;
    result.history = lab.take_history();
    Ok(result)
}

fn phase_result<F>(model: &ModelSpec, used: u64, flagged: &[bool], fit_var: &[f64], mut estimate: F) -> Result<EstimateResult>
where
    F: FnMut(usize) -> Result<WrappedPhase>,
{
    let mut phases_est = vec![WrappedPhase::ZERO; model.num_phases];
    let mut variances = vec![f64::NAN; model.num_phases];
    let mut diffuse = vec![false; model.num_phases];
    for (c, combo) in model.combos.iter().enumerate() {
        let p = combo.target_phase;
        phases_est[p] = estimate(c)?;
        variances[p] = fit_var[c];
        diffuse[p] = flagged[c];
    }
    Ok(EstimateResult {
        phases_est,
        variances,
        preparations_used: used,
        per_phase_preparations: vec![used / model.num_combos() as u64; model.num_phases],
        diffuse,
        flagged_combos: (0..flagged.len()).filter(|&c| flagged[c]).collect(),
        history: None,
    })
}

/// Angle vector with the combo's rotated support shifted by a common `δ` so
/// that its θ̃ equals `target`. Cross-term arguments are left unchanged.
pub fn support_shift(model: &ModelSpec, combo: usize, base: &[f64], target: f64) -> Result<Vec<f64>> {
    let mut out = base.to_vec();
    support_shift_into(model, combo, base, target, &mut out)?;
    Ok(out)
}

fn support_shift_into(model: &ModelSpec, combo: usize, base: &[f64], target: f64, out: &mut [f64]) -> Result<()> {
    check_len("angle vector", model.num_angles(), base.len())?;
    let row = &model.combo(combo)?.ttilde_row;
    let current: f64 = row.iter().zip(base).map(|(r, a)| r * a).sum();
    let slope: f64 = row.iter().sum();
    let delta = (target - current) / slope;
    for ((o, &b), &r) in out.iter_mut().zip(base).zip(row) {
        *o = if r != 0.0 { b + delta } else { b };
    }
    Ok(())
}

/// Sweeps each combo's θ̃ over the circle by a support shift and reads the
/// phase off a `{1, cos θ̃, sin θ̃}` fit.
pub fn phom_constant_cosine(lab: &mut Lab, cfg: &PhomConfig) -> Result<EstimateResult> {
    let cfg = PhomConfig {
        variant: PhomVariant::ConstantCosine,
        ..cfg.clone()
    };
    cfg.validate()?;
    require_plaquette(lab, "phom_constant_cosine")?;
    let model = lab.model();
    let base = cfg.start(model)?;
    let scan = circle_points(cfg.scan_points);
    let mut angles = base.clone();
    let mut flagged = vec![false; model.num_combos()];
    let mut fit_var = vec![f64::NAN; model.num_combos()];
    let mut phase = vec![0.0; model.num_combos()];
    let start = lab.preparations();
    for c in 0..model.num_combos() {
        let mut ys = Vec::with_capacity(scan.len());
        for &t in &scan {
            support_shift_into(model, c, &base, t, &mut angles)?;
            ys.push(lab.estimate_expectation(&angles, c, cfg.shots_per_point)?);
        }
        let fit = fit_cosine(&scan, &ys, true)?;
        if fit.is_flat() {
            flagged[c] = true;
        } else {
            phase[c] = fit.phase;
            fit_var[c] = fit.phase_variance;
        }
    }
    let used = lab.preparations() - start;
    let mut result = phase_result(model, used, &flagged, &fit_var, |c| Ok(WrappedPhase::from_finite(wrap_angle(phase[c]))))?;
    result.history = lab.take_history();
    Ok(result)
}

/// How the direct two-variable Bayes method picks θ̃.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DirectSchedule {
    /// θ̃ swept over `scan_points` equidistant values, `shots_per_point` each.
    #[default]
    Scan,
    /// `θ̃ = φ̄ ± π/2` from the phase marginal after `warmup` random settings.
    Adaptive,
}

impl DirectSchedule {
    pub fn name(self) -> &'static str {
        match self {
            DirectSchedule::Scan => "scan",
            DirectSchedule::Adaptive => "adaptive",
        }
    }
}

impl FromStr for DirectSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(DirectSchedule::Scan),
            "adaptive" => Ok(DirectSchedule::Adaptive),
            other => Err(Error::InvalidArgument(format!(
                "unknown direct schedule `{other}` (expected scan or adaptive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectBayesConfig {
    pub phase_bins: usize,
    pub offset_bins: usize,
    pub schedule: DirectSchedule,
    pub scan_points: usize,
    /// Preparations per θ̃ value (scan) or per combo divided by `scan_points`
    /// (adaptive); either way each combo gets `scan_points * shots_per_point`.
    pub shots_per_point: u64,
    pub warmup: u64,
    pub base_angles: Option<Vec<f64>>,
}

impl Default for DirectBayesConfig {
    fn default() -> Self {
        DirectBayesConfig {
            phase_bins: 512,
            offset_bins: 256,
            schedule: DirectSchedule::Scan,
            scan_points: 16,
            shots_per_point: 1,
            warmup: 20,
            base_angles: None,
        }
    }
}

impl DirectBayesConfig {
    pub fn with_budget(mut self, model: &ModelSpec, n: u64) -> Self {
        self.shots_per_point = shots_for(n, (model.num_combos() * self.scan_points) as u64);
        self
    }

    fn per_combo(&self) -> u64 {
        self.scan_points as u64 * self.shots_per_point
    }
}

/// Joint posteriors over `(φ, h)` for every combo of the two-plaquette model,
/// in combo order.
pub fn bayes_direct_cc_posteriors(lab: &mut Lab, cfg: &DirectBayesConfig) -> Result<Vec<PosteriorGrid2D>> {
    require(lab, lab.model().kind == ModelKind::TwoPlaquette, "bayes_direct_cc")?;
    if cfg.scan_points < 1 || cfg.shots_per_point < 1 {
        return Err(Error::InvalidArgument("direct bayes needs scan_points and shots_per_point >= 1".into()));
    }
    let model = lab.model();
    let base = match &cfg.base_angles {
        Some(a) => {
            check_len("base angles", model.num_angles(), a.len())?;
            a.clone()
        }
        None => vec![0.0; model.num_angles()],
    };
    (0..model.num_combos())
        .map(|c| match cfg.schedule {
            DirectSchedule::Scan => direct_scan(lab, cfg, c, &base),
            DirectSchedule::Adaptive => direct_adaptive(lab, cfg, c, &base),
        })
        .collect()
}

fn direct_scan(lab: &mut Lab, cfg: &DirectBayesConfig, combo: usize, base: &[f64]) -> Result<PosteriorGrid2D> {
    let model = lab.model();
    let scan = circle_points(cfg.scan_points);
    let mut angles = base.to_vec();
    let mut counts = Vec::with_capacity(scan.len());
    for &t in &scan {
        support_shift_into(model, combo, base, t, &mut angles)?;
        let plus = lab.measure_repeated(&angles, combo, cfg.shots_per_point)?;
        counts.push((plus as f64, (cfg.shots_per_point - plus) as f64));
    }
    let probe = PosteriorGrid2D::uniform(cfg.phase_bins, cfg.offset_bins)?;
    let hs = probe.offset_points();
    let mut log_w = vec![0.0; cfg.phase_bins * cfg.offset_bins];
    for (row, &phi) in log_w.chunks_exact_mut(hs.len()).zip(probe.phase_points()) {
        for (&t, &(np, nm)) in scan.iter().zip(&counts) {
            let c = (phi - t).cos();
            for (w, &h) in row.iter_mut().zip(hs) {
                let u = h + c;
                if np > 0.0 {
                    *w += np * (2.0 + u).ln();
                }
                if nm > 0.0 {
                    *w += nm * (2.0 - u).ln();
                }
            }
        }
    }
    PosteriorGrid2D::from_log_density(cfg.phase_bins, cfg.offset_bins, &log_w)
}

fn direct_adaptive(lab: &mut Lab, cfg: &DirectBayesConfig, combo: usize, base: &[f64]) -> Result<PosteriorGrid2D> {
    let model = lab.model();
    let mut grid = PosteriorGrid2D::uniform(cfg.phase_bins, cfg.offset_bins)?;
    let mut angles = base.to_vec();
    let mut mean = 0.0;
    for step in 0..cfg.per_combo() {
        let t = if step < cfg.warmup {
            lab.rng().uniform_angle()
        } else {
            wrap_angle(mean + lab.rng().quarter_turn())
        };
        support_shift_into(model, combo, base, t, &mut angles)?;
        let sign = if lab.measure_repeated(&angles, combo, 1)? == 1 { 1.0 } else { -1.0 };
        grid.update_with(|(phi, h)| ((2.0 + sign * (h + (phi - t).cos())) / 4.0).clamp(0.0, 1.0))?;
        let (c, s) = grid.phase_marginal().trig_moment();
        mean = mean_from_trig(c, s).0.value();
    }
    Ok(grid)
}


/// Direct Bayes on `(φ_i, h_i)` for each two-plaquette combo; reports the
/// phase-marginal moments.
pub fn bayes_direct_cc(lab: &mut Lab, cfg: &DirectBayesConfig) -> Result<EstimateResult> {
    let start = lab.preparations();
    let grids = bayes_direct_cc_posteriors(lab, cfg)?;
    let model = lab.model();
    let mut moments = vec![None; model.num_phases];
    for (g, c) in grids.iter().zip(&model.combos) {
        moments[c.target_phase] = Some(g.phase_marginal().moments());
    }
    let moments: Vec<_> = moments.into_iter().map(|m| m.expect("each phase has a combo")).collect();
    let used = lab.preparations() - start;
    let mut r = EstimateResult::from_moments(&moments, used, cfg.per_combo());
    r.history = lab.take_history();
    Ok(r)
}
