//! Python bindings: models, posterior grids, the estimators on a fixed truth,
//! and Monte Carlo variance curves.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stabphase_core::analysis::{self, EstimatorSpec, MonteCarloConfig, VariancePoint};
use stabphase_core::estimators::{
    self as est, BayesConfig, DirectBayesConfig, DirectSchedule, EstimateResult, PhomConfig, PhomVariant,
    RamseyConfig, Selection,
};
use stabphase_core::{phase, spawn_rng, HiddenTruth, Lab, ModelKind, ModelSpec, Outcome, SamplingMode};

fn err(e: stabphase_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T>(s: &str) -> PyResult<T>
where
    T: std::str::FromStr<Err = stabphase_core::Error>,
{
    s.parse().map_err(err)
}

fn outcome(sign: i32) -> PyResult<Outcome> {
    match sign {
        1 => Ok(Outcome::Plus),
        -1 => Ok(Outcome::Minus),
        other => Err(PyValueError::new_err(format!("outcome must be +1 or -1, got {other}"))),
    }
}

/// Likelihood tables of one configuration.
#[pyclass(name = "Model", module = "stabphase", frozen)]
struct PyModel {
    inner: ModelSpec,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(kind: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: stabphase_core::build_model(parse(kind)?).map_err(err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn num_phases(&self) -> usize {
        self.inner.num_phases
    }

    #[getter]
    fn num_angles(&self) -> usize {
        self.inner.num_angles()
    }

    #[getter]
    fn combo_names(&self) -> Vec<&'static str> {
        self.inner.combos.iter().map(|c| c.name).collect()
    }

    fn full_likelihood(&self, combo: usize, outcome_sign: i32, phases: Vec<f64>, angles: Vec<f64>) -> PyResult<f64> {
        self.inner
            .full_likelihood(combo, outcome(outcome_sign)?, &phases, &angles)
            .map_err(err)
    }

    fn marginal_likelihood(&self, combo: usize, outcome_sign: i32, target: f64, theta_tilde: f64) -> PyResult<f64> {
        let t = phase::wrap(target).map_err(err)?;
        let tt = phase::wrap(theta_tilde).map_err(err)?;
        self.inner
            .marginal_likelihood(combo, outcome(outcome_sign)?, t, tt)
            .map_err(err)
    }

    fn expectation(&self, combo: usize, phases: Vec<f64>, angles: Vec<f64>) -> PyResult<f64> {
        self.inner.expectation(combo, &phases, &angles).map_err(err)
    }

    fn theta_tilde(&self, combo: usize, angles: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.theta_tilde(combo, &angles).map_err(err)?.value())
    }

    fn solve_angles(&self, targets: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.solve_angles(&targets).map_err(err)
    }

    /// Per-combo expectations from the exact 7-qubit statevector.
    fn statevector_expectations(&self, phases: Vec<f64>, angles: Vec<f64>) -> PyResult<Vec<f64>> {
        let sv = stabphase_core::StatevectorOracle::prepare(&self.inner, &phases, &angles).map_err(err)?;
        Ok(sv.expectations(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!("Model('{}')", self.inner.kind)
    }
}

/// Discretized posterior over one phase.
#[pyclass(name = "PosteriorGrid", module = "stabphase")]
struct PyPosteriorGrid {
    inner: stabphase_core::PosteriorGrid1D,
}

#[pymethods]
impl PyPosteriorGrid {
    #[new]
    #[pyo3(signature = (bins = 2048))]
    fn new(bins: usize) -> PyResult<Self> {
        Ok(PyPosteriorGrid {
            inner: stabphase_core::PosteriorGrid1D::uniform(bins).map_err(err)?,
        })
    }

    /// Multiplies by `base + amplitude · cos(φ − theta)` and renormalizes.
    fn update_cosine(&mut self, base: f64, amplitude: f64, theta: f64) -> PyResult<()> {
        self.inner.update_cosine(base, amplitude, theta).map_err(err)?;
        Ok(())
    }

    /// `(mean, variance, resultant)` of the circular moments.
    fn moments(&self) -> (f64, f64, f64) {
        let m = self.inner.moments();
        (m.mean.value(), m.variance, m.resultant)
    }

    #[getter]
    fn points(&self) -> Vec<f64> {
        self.inner.points().to_vec()
    }

    #[getter]
    fn density(&self) -> Vec<f64> {
        self.inner.density().to_vec()
    }

    fn mass(&self) -> f64 {
        self.inner.mass()
    }
}

/// Output of one estimator run.
#[pyclass(name = "Estimate", module = "stabphase", frozen, get_all)]
struct PyEstimate {
    phases: Vec<f64>,
    variances: Vec<f64>,
    preparations_used: u64,
    diffuse: Vec<bool>,
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!(
            "Estimate(phases={:?}, variances={:?}, preparations_used={})",
            self.phases, self.variances, self.preparations_used
        )
    }
}

impl From<EstimateResult> for PyEstimate {
    fn from(r: EstimateResult) -> Self {
        PyEstimate {
            phases: r.phases_est.iter().map(|p| p.value()).collect(),
            variances: r.variances,
            preparations_used: r.preparations_used,
            diffuse: r.diffuse,
        }
    }
}

fn lab<'m>(model: &'m ModelSpec, phases: &[f64], seed: u64, sampling: &str) -> PyResult<Lab<'m>> {
    let truth = HiddenTruth::new(model, phases).map_err(err)?;
    Ok(Lab::new(model, truth, spawn_rng(seed, 0)).with_sampling(parse::<SamplingMode>(sampling)?))
}

fn bayes_config(kind: ModelKind, budget: u64, grid_bins: usize, warmup: Option<u64>, selection: &str) -> PyResult<BayesConfig> {
    Ok(BayesConfig {
        grid_bins,
        budget,
        selection: parse::<Selection>(selection)?,
        warmup: warmup.unwrap_or_else(|| est::default_warmup(kind)),
    })
}

fn default_scan_points(kind: ModelKind) -> usize {
    if kind == ModelKind::ThreePlaquette {
        10
    } else {
        16
    }
}

fn phom_variant(variant: &str) -> PyResult<PhomVariant> {
    match variant {
        "plain" => Ok(PhomVariant::Plain),
        "constant_cosine" => Ok(PhomVariant::ConstantCosine),
        other => Err(PyValueError::new_err(format!(
            "unknown PHOM variant `{other}` (expected plain or constant_cosine)"
        ))),
    }
}

/// Single-qubit Ramsey scan at `budget` preparations.
#[pyfunction]
#[pyo3(signature = (phi, budget, seed = 1, scan_points = 16))]
fn ramsey(phi: f64, budget: u64, seed: u64, scan_points: usize) -> PyResult<PyEstimate> {
    let model = stabphase_core::build_model(ModelKind::SingleQubit).map_err(err)?;
    let mut lab = lab(&model, &[phi], seed, "joint")?;
    let r = est::ramsey_scan(&mut lab, &RamseyConfig::for_budget(scan_points, budget)).map_err(err)?;
    Ok(r.into())
}

/// Single-qubit adaptive (or random-angle) Bayes.
#[pyfunction]
#[pyo3(signature = (phi, budget, seed = 1, grid_bins = 2048, warmup = None, selection = "adaptive"))]
fn bayes_single(phi: f64, budget: u64, seed: u64, grid_bins: usize, warmup: Option<u64>, selection: &str) -> PyResult<PyEstimate> {
    let model = stabphase_core::build_model(ModelKind::SingleQubit).map_err(err)?;
    let mut lab = lab(&model, &[phi], seed, "joint")?;
    let cfg = bayes_config(ModelKind::SingleQubit, budget, grid_bins, warmup, selection)?;
    Ok(est::bayes_single_adaptive(&mut lab, &cfg).map_err(err)?.into())
}

/// Marginal-likelihood Bayes on a plaquette model.
#[pyfunction]
#[pyo3(signature = (model, phases, budget, seed = 1, grid_bins = 2048, warmup = None, selection = "adaptive", sampling = "joint"))]
#[allow(clippy::too_many_arguments)]
fn bayes_marginal(
    model: &PyModel,
    phases: Vec<f64>,
    budget: u64,
    seed: u64,
    grid_bins: usize,
    warmup: Option<u64>,
    selection: &str,
    sampling: &str,
) -> PyResult<PyEstimate> {
    let m = &model.inner;
    let mut lab = lab(m, &phases, seed, sampling)?;
    let cfg = bayes_config(m.kind, budget, grid_bins, warmup, selection)?;
    Ok(est::bayes_marginal(&mut lab, &cfg).map_err(err)?.into())
}

/// PHOM (`variant="plain"`) or constant-cosine PHOM.
#[pyfunction]
#[pyo3(signature = (model, phases, budget, seed = 1, variant = "constant_cosine", iterations = None, scan_points = None))]
fn phom(
    model: &PyModel,
    phases: Vec<f64>,
    budget: u64,
    seed: u64,
    variant: &str,
    iterations: Option<usize>,
    scan_points: Option<usize>,
) -> PyResult<PyEstimate> {
    let m = &model.inner;
    let variant = phom_variant(variant)?;
    let iterations = iterations.unwrap_or(if variant == PhomVariant::Plain { 4 } else { 1 });
    let cfg = PhomConfig::for_budget(m, variant, iterations, scan_points.unwrap_or(default_scan_points(m.kind)), budget);
    let mut lab = lab(m, &phases, seed, "joint")?;
    Ok(est::phom(&mut lab, &cfg).map_err(err)?.into())
}

/// Two-plaquette Bayes over the joint `(φ, h)` posterior.
#[pyfunction]
#[pyo3(signature = (phases, budget, seed = 1, phase_bins = 512, offset_bins = 256, schedule = "scan"))]
fn bayes_direct(
    phases: Vec<f64>,
    budget: u64,
    seed: u64,
    phase_bins: usize,
    offset_bins: usize,
    schedule: &str,
) -> PyResult<PyEstimate> {
    let model = stabphase_core::build_model(ModelKind::TwoPlaquette).map_err(err)?;
    let cfg = DirectBayesConfig {
        phase_bins,
        offset_bins,
        schedule: parse::<DirectSchedule>(schedule)?,
        ..DirectBayesConfig::default()
    }
    .with_budget(&model, budget);
    let mut lab = lab(&model, &phases, seed, "joint")?;
    Ok(est::bayes_direct_cc(&mut lab, &cfg).map_err(err)?.into())
}

fn spec_for(method: &str, kind: ModelKind, grid_bins: usize, warmup: Option<u64>, selection: &str, scan_points: Option<usize>, iterations: usize) -> PyResult<EstimatorSpec> {
    let bayes = bayes_config(kind, 1, grid_bins, warmup, selection)?;
    Ok(match method {
        "ramsey" => EstimatorSpec::Ramsey {
            scan_points: scan_points.unwrap_or(16),
        },
        "bayes1q" => EstimatorSpec::BayesSingle(bayes),
        "bayes-marginal" => EstimatorSpec::BayesMarginal(bayes),
        "phom" | "ccphom" => EstimatorSpec::Phom {
            variant: if method == "phom" {
                PhomVariant::Plain
            } else {
                PhomVariant::ConstantCosine
            },
            iterations: if method == "phom" { iterations } else { 1 },
            scan_points: scan_points.unwrap_or(default_scan_points(kind)),
        },
        "bayes-direct" => EstimatorSpec::BayesDirect(DirectBayesConfig {
            scan_points: scan_points.unwrap_or(16),
            ..DirectBayesConfig::default()
        }),
        other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
    })
}

fn point_dict<'py>(py: Python<'py>, p: &VariancePoint) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("budget", p.budget)?;
    d.set_item("n", p.n)?;
    d.set_item("n_per_phase", p.n_per_phase)?;
    d.set_item("sigma2", p.sigma2)?;
    d.set_item("stderr", p.stderr)?;
    d.set_item("trials", p.trials)?;
    d.set_item("diffuse_count", p.diffuse_count)?;
    d.set_item("reported_sigma2", p.reported_sigma2)?;
    d.set_item("per_phase_sigma2", p.per_phase_sigma2.clone())?;
    Ok(d)
}

/// Monte Carlo variance of `method` at each budget; one dict per budget.
#[pyfunction]
#[pyo3(signature = (method, model, budgets, trials = 1000, seed = 1, workers = 0, sampling = "joint", grid_bins = 2048, warmup = None, selection = "adaptive", scan_points = None, iterations = 4))]
#[allow(clippy::too_many_arguments)]
fn monte_carlo_variance<'py>(
    py: Python<'py>,
    method: &str,
    model: &PyModel,
    budgets: Vec<u64>,
    trials: u64,
    seed: u64,
    workers: usize,
    sampling: &str,
    grid_bins: usize,
    warmup: Option<u64>,
    selection: &str,
    scan_points: Option<usize>,
    iterations: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let m = &model.inner;
    let spec = spec_for(method, m.kind, grid_bins, warmup, selection, scan_points, iterations)?;
    let cfg = MonteCarloConfig {
        trials,
        master_seed: seed,
        workers,
        sampling: parse::<SamplingMode>(sampling)?,
    };
    let points = py
        .detach(|| analysis::monte_carlo_variance(&spec, m, &budgets, &cfg))
        .map_err(err)?;
    points.iter().map(|p| point_dict(py, p)).collect()
}

/// `(c, rms_residual)` of the least-squares fit `σ² = c/n`.
#[pyfunction]
fn fit_inverse_n(n: Vec<f64>, sigma2: Vec<f64>) -> PyResult<(f64, f64)> {
    if n.len() != sigma2.len() {
        return Err(PyValueError::new_err("n and sigma2 differ in length"));
    }
    let samples: Vec<(f64, f64)> = n.into_iter().zip(sigma2).collect();
    let f = analysis::fit_inverse_n(&samples).map_err(err)?;
    Ok((f.fitted_c, f.fit_residual))
}

/// `c` fitted to the dicts returned by `monte_carlo_variance`.
#[pyfunction]
#[pyo3(signature = (points, per_phase = false, reported = false))]
fn fit_curve(points: Vec<Bound<'_, PyDict>>, per_phase: bool, reported: bool) -> PyResult<f64> {
    let key_n = if per_phase { "n_per_phase" } else { "n" };
    let key_v = if reported { "reported_sigma2" } else { "sigma2" };
    let mut samples = Vec::with_capacity(points.len());
    for d in &points {
        let get = |k: &str| -> PyResult<f64> {
            d.get_item(k)?
                .ok_or_else(|| PyValueError::new_err(format!("point lacks `{k}`")))?
                .extract()
        };
        samples.push((get(key_n)?, get(key_v)?));
    }
    Ok(analysis::fit_inverse_n(&samples).map_err(err)?.fitted_c)
}

/// Expected one-step variance decrease factor α for a `K`-cosine marginal.
#[pyfunction]
fn alpha_factor(k: u32, sigma2: f64, delta: f64) -> PyResult<f64> {
    analysis::alpha_factor(&analysis::AlphaParams { k, sigma2, delta }).map_err(err)
}

#[pyfunction]
fn mean_alpha(k: u32) -> PyResult<f64> {
    analysis::mean_alpha(k).map_err(err)
}

/// Largest statevector-vs-table gap over `samples` random draws.
#[pyfunction]
#[pyo3(signature = (model, samples = 100, seed = 1))]
fn oracle_deviation(model: &PyModel, samples: usize, seed: u64) -> PyResult<f64> {
    stabphase_core::models::oracle_deviation(&model.inner, samples, &mut spawn_rng(seed, 0)).map_err(err)
}

#[pyfunction]
fn wrap(angle: f64) -> PyResult<f64> {
    Ok(phase::wrap(angle).map_err(err)?.value())
}

#[pyfunction]
fn circ_diff(a: f64, b: f64) -> PyResult<f64> {
    Ok(phase::circ_diff(phase::wrap(a).map_err(err)?, phase::wrap(b).map_err(err)?))
}

#[pymodule]
#[pyo3(name = "stabphase")]
fn stabphase_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPosteriorGrid>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(ramsey, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_single, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(phom, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_direct, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_variance, m)?)?;
    m.add_function(wrap_pyfunction!(fit_inverse_n, m)?)?;
    m.add_function(wrap_pyfunction!(fit_curve, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_factor, m)?)?;
    m.add_function(wrap_pyfunction!(mean_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(wrap, m)?)?;
    m.add_function(wrap_pyfunction!(circ_diff, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
        Python::attach(|py| {
            let globals = PyDict::new(py);
            globals.set_item("sp", pyo3::wrap_pymodule!(stabphase_module)(py)).unwrap();
            f(py, &globals);
        });
    }

    #[test]
    fn model_round_trip_from_python() {
        with_module(|py, g| {
            py.run(
                c"m = sp.Model('three_plaquette')
assert m.num_phases == 7 and len(m.combo_names) == 7
targets = [0.1 * k - 0.3 for k in range(7)]
angles = m.solve_angles(targets)
for c, t in enumerate(targets):
    assert abs(sp.circ_diff(m.theta_tilde(c, angles), t)) < 1e-10
p = m.full_likelihood(0, 1, [0.2] * 7, angles)
q = m.full_likelihood(0, -1, [0.2] * 7, angles)
assert p + q == 1.0
assert sp.oracle_deviation(m, 20, 3) < 1e-10
",
                Some(g),
                None,
            )
            .unwrap();
        });
    }

    #[test]
    fn estimators_from_python() {
        with_module(|py, g| {
            py.run(
                c"r = sp.bayes_single(1.0, 300, seed=4)
assert r.preparations_used == 300
assert abs(sp.circ_diff(r.phases[0], 1.0)) < 5 * r.variances[0] ** 0.5
two = sp.Model('two_plaquette')
r = sp.bayes_marginal(two, [0.3, -1.0, 2.0], 400, seed=2, grid_bins=512)
assert len(r.phases) == 3 and r.preparations_used == 400
r = sp.phom(two, [0.3, -1.0, 2.0], 960)
assert r.preparations_used == 960
pts = sp.monte_carlo_variance('ccphom', two, [100, 200, 400, 800], trials=10, seed=1)
assert [p['budget'] for p in pts] == [100, 200, 400, 800]
assert sp.fit_curve(pts) > 0
",
                Some(g),
                None,
            )
            .unwrap();
        });
    }

    #[test]
    fn bad_arguments_raise_value_error() {
        with_module(|py, g| {
            py.run(
                c"for call in (lambda: sp.Model('four_plaquette'),
             lambda: sp.bayes_marginal(sp.Model('two_plaquette'), [0.1], 10),
             lambda: sp.monte_carlo_variance('nope', sp.Model('two_plaquette'), [1, 2, 3, 4])):
    try:
        call()
    except ValueError:
        pass
    else:
        raise AssertionError('expected ValueError')
",
                Some(g),
                None,
            )
            .unwrap();
        });
    }
}
