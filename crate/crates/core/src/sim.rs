//! Seeded measurement simulation.
//!
//! A [`Lab`] owns the hidden true phases and one random stream, and hands out
//! ±1 outcomes while counting state preparations. Estimators only ever see
//! outcomes, never the truth.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Result};
use crate::models::{parity_outcome, probability_from_expectation, ModelKind, ModelSpec, Outcome, StatevectorOracle};
use crate::phase::WrappedPhase;

/// Name of the generator behind [`RngStream`], echoed into run metadata.
pub const PRNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9) seed_from_u64(master_seed) + set_stream(stream_index)";

/// Reproducible random stream identified by `(master_seed, stream_index)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    master_seed: u64,
    stream_index: u64,
}

/// Independent stream for one trial. ChaCha supports 2^64 streams per key.
pub fn spawn_rng(master_seed: u64, trial_index: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial_index);
    RngStream {
        rng,
        master_seed,
        stream_index: trial_index,
    }
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Uniform angle in `[-π, π)`.
    pub fn uniform_angle(&mut self) -> f64 {
        self.rng.random_range(-PI..PI)
    }

    /// `+π/2` or `-π/2` with equal probability.
    pub fn quarter_turn(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            PI / 2.0
        } else {
            -PI / 2.0
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Ground-truth phases of one simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    phases: Vec<WrappedPhase>,
}

impl HiddenTruth {
    pub fn new(model: &ModelSpec, phases: &[f64]) -> Result<Self> {
        check_len("true phases", model.num_phases, phases.len())?;
        let phases = phases.iter().map(|&p| WrappedPhase::new(p)).collect::<Result<_>>()?;
        Ok(HiddenTruth { phases })
    }

    pub fn draw_uniform<R: Rng + ?Sized>(model: &ModelSpec, rng: &mut R) -> Self {
        let phases = (0..model.num_phases)
            .map(|_| WrappedPhase::from_finite(rng.random_range(-PI..PI)))
            .collect();
        HiddenTruth { phases }
    }

    pub fn phases(&self) -> &[WrappedPhase] {
        &self.phases
    }

    pub fn values(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.value()).collect()
    }
}

/// How simultaneous readouts of several combos are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// One X-basis outcome on all qubits per preparation, sampled from the
    /// exact statevector; combo values are parities of that outcome.
    #[default]
    Joint,
    /// Each combo drawn as an independent Bernoulli from its likelihood.
    Independent,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Joint => "joint",
            SamplingMode::Independent => "independent",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(SamplingMode::Joint),
            "independent" => Ok(SamplingMode::Independent),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown sampling mode `{other}` (expected joint or independent)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub combo: usize,
    pub angles: Vec<f64>,
    pub outcome: Outcome,
    pub preparation_index: u64,
}

/// One ±1 readout of `cos θ X + sin θ Y` on the single-qubit state.
pub fn sample_single_qubit<R: Rng + ?Sized>(phi_true: WrappedPhase, theta: WrappedPhase, rng: &mut R) -> Outcome {
    let p = probability_from_expectation(Outcome::Plus, (phi_true.value() - theta.value()).cos());
    Outcome::from_plus(rng.random::<f64>() < p)
}

/// Simulated experiment: hidden truth, a random stream and a preparation
/// counter.
#[derive(Debug, Clone)]
pub struct Lab<'m> {
    model: &'m ModelSpec,
    truth: HiddenTruth,
    truth_values: Vec<f64>,
    rng: RngStream,
    mode: SamplingMode,
    noiseless: bool,
    preparations: u64,
    history: Option<Vec<MeasurementRecord>>,
}

impl<'m> Lab<'m> {
    pub fn new(model: &'m ModelSpec, truth: HiddenTruth, rng: RngStream) -> Self {
        let truth_values = truth.values();
        Lab {
            model,
            truth,
            truth_values,
            rng,
            mode: SamplingMode::Joint,
            noiseless: false,
            preparations: 0,
            history: None,
        }
    }

    pub fn with_sampling(mut self, mode: SamplingMode) -> Self {
        self.mode = mode;
        self
    }

    /// Scan readouts return exact expectations instead of shot averages.
    /// Preparations are still counted.
    pub fn noiseless(mut self) -> Self {
        self.noiseless = true;
        self
    }

    pub fn with_history(mut self) -> Self {
        self.history = Some(Vec::new());
        self
    }

    pub fn model(&self) -> &'m ModelSpec {
        self.model
    }

    pub fn sampling(&self) -> SamplingMode {
        self.mode
    }

    pub fn preparations(&self) -> u64 {
        self.preparations
    }

    /// Randomness available to adaptive estimators for their own choices.
    pub fn rng(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn take_history(&mut self) -> Option<Vec<MeasurementRecord>> {
        self.history.as_mut().map(std::mem::take)
    }

    /// Ground truth, for scoring and tests only.
    #[doc(hidden)]
    pub fn reveal_truth(&self) -> &HiddenTruth {
        &self.truth
    }

    fn record(&mut self, combo: usize, angles: &[f64], outcome: Outcome) {
        if let Some(h) = self.history.as_mut() {
            h.push(MeasurementRecord {
                combo,
                angles: angles.to_vec(),
                outcome,
                preparation_index: self.preparations,
            });
        }
    }

    fn exact_expectation(&self, combo: usize, angles: &[f64]) -> Result<f64> {
        if self.mode == SamplingMode::Joint && self.model.kind.is_plaquette() {
            let psi = StatevectorOracle::prepare(self.model, &self.truth_values, angles)?;
            Ok(psi.x_expectation(&self.model.combo(combo)?.support))
        } else {
            self.model.expectation(combo, &self.truth_values, angles)
        }
    }

    /// One single-qubit preparation measured along angle `theta`.
    pub fn measure_single(&mut self, theta: f64) -> Outcome {
        debug_assert_eq!(self.model.kind, ModelKind::SingleQubit);
        let outcome = sample_single_qubit(self.truth.phases()[0], WrappedPhase::from_finite(theta), &mut self.rng);
        self.record(0, &[theta], outcome);
        self.preparations += 1;
        outcome
    }

    /// One preparation with rotation angles `angles`, reading every combo in
    /// `combos` from the same shot.
    pub fn prepare_and_measure(&mut self, angles: &[f64], combos: &[usize]) -> Result<Vec<MeasurementRecord>> {
        check_len("angle vector", self.model.num_angles(), angles.len())?;
        for &c in combos {
            self.model.combo(c)?;
        }
        let mut outcomes = vec![Outcome::Plus; self.model.num_combos()];
        self.draw_all(angles, &mut outcomes)?;
        let records = combos
            .iter()
            .map(|&c| MeasurementRecord {
                combo: c,
                angles: angles.to_vec(),
                outcome: outcomes[c],
                preparation_index: self.preparations,
            })
            .collect::<Vec<_>>();
        if let Some(h) = self.history.as_mut() {
            h.extend(records.iter().cloned());
        }
        self.preparations += 1;
        Ok(records)
    }

    /// One preparation reading all combos; `out[c]` receives combo `c`.
    pub fn measure_all(&mut self, angles: &[f64], out: &mut [Outcome]) -> Result<()> {
        check_len("angle vector", self.model.num_angles(), angles.len())?;
        check_len("outcome buffer", self.model.num_combos(), out.len())?;
        self.draw_all(angles, out)?;
        if self.history.is_some() {
            for (c, &o) in out.iter().enumerate() {
                self.record(c, angles, o);
            }
        }
        self.preparations += 1;
        Ok(())
    }

    fn draw_all(&mut self, angles: &[f64], out: &mut [Outcome]) -> Result<()> {
        if self.mode == SamplingMode::Joint && self.model.kind.is_plaquette() {
            let psi = StatevectorOracle::prepare(self.model, &self.truth_values, angles)?;
            let x = psi.sample_x_basis(&mut self.rng);
            for (o, c) in out.iter_mut().zip(&self.model.combos) {
                *o = parity_outcome(x, &c.support);
            }
        } else {
            for (c, o) in out.iter_mut().enumerate() {
                let p = self.model.full_likelihood(c, Outcome::Plus, &self.truth_values, angles)?;
                *o = Outcome::from_plus(self.rng.random::<f64>() < p);
            }
        }
        Ok(())
    }

    /// `shots` preparations at fixed angles, each read on `combo` only.
    /// Returns the number of `+` outcomes.
    pub fn measure_repeated(&mut self, angles: &[f64], combo: usize, shots: u64) -> Result<u64> {
        check_len("angle vector", self.model.num_angles(), angles.len())?;
        // the marginal of a joint draw on one combo is its exact expectation
        let p = probability_from_expectation(Outcome::Plus, self.exact_expectation(combo, angles)?);
        let mut plus = 0;
        for _ in 0..shots {
            let o = Outcome::from_plus(self.rng.random::<f64>() < p);
            self.record(combo, angles, o);
            self.preparations += 1;
            plus += (o == Outcome::Plus) as u64;
        }
        Ok(plus)
    }

    /// Shot-averaged `⟨S_combo⟩` from `shots` preparations, or the exact value
    /// for a noiseless lab.
    pub fn estimate_expectation(&mut self, angles: &[f64], combo: usize, shots: u64) -> Result<f64> {
        if self.noiseless {
            check_len("angle vector", self.model.num_angles(), angles.len())?;
            self.preparations += shots;
            return self.exact_expectation(combo, angles);
        }
        if shots == 0 {
            return Err(crate::Error::InvalidArgument("shots per point must be positive".into()));
        }
        let plus = self.measure_repeated(angles, combo, shots)?;
        Ok((2.0 * plus as f64 - shots as f64) / shots as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    #[test]
    fn single_qubit_deterministic_edges() {
        let mut rng = spawn_rng(1, 0);
        let th = WrappedPhase::new(0.4).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_single_qubit(th, th, &mut rng), Outcome::Plus);
        }
        let opposite = WrappedPhase::new(0.4 + PI).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_single_qubit(opposite, th, &mut rng), Outcome::Minus);
        }
    }

    #[test]
    fn single_qubit_quarter_turn_is_balanced() {
        let mut rng = spawn_rng(2, 0);
        let th = WrappedPhase::new(0.3).unwrap();
        let phi = WrappedPhase::new(0.3 + PI / 2.0).unwrap();
        let n = 100_000;
        let plus = (0..n)
            .filter(|_| sample_single_qubit(phi, th, &mut rng) == Outcome::Plus)
            .count();
        let freq = plus as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.005, "{freq}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = spawn_rng(42, 0);
            (0..64).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = spawn_rng(42, 0);
            (0..64).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = spawn_rng(42, 1);
            (0..64).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a[0], c[0]);
        assert!(a.iter().zip(&c).all(|(x, y)| x != y));
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 10_000;
        let mut r0 = spawn_rng(42, 0);
        let mut r1 = spawn_rng(42, 1);
        let s0: Vec<f64> = (0..n).map(|_| if r0.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let s1: Vec<f64> = (0..n).map(|_| if r1.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m0, m1) = (mean(&s0), mean(&s1));
        let cov: f64 = s0.iter().zip(&s1).map(|(a, b)| (a - m0) * (b - m1)).sum::<f64>() / n as f64;
        let v0: f64 = s0.iter().map(|a| (a - m0).powi(2)).sum::<f64>() / n as f64;
        let v1: f64 = s1.iter().map(|b| (b - m1).powi(2)).sum::<f64>() / n as f64;
        let rho = cov / (v0 * v1).sqrt();
        assert!(rho.abs() < 0.05, "{rho}");
    }

    #[test]
    fn clean_code_state_always_reads_plus() {
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let truth = HiddenTruth::new(&m, &[0.0; 7]).unwrap();
        let mut lab = Lab::new(&m, truth, spawn_rng(3, 0));
        let all: Vec<usize> = (0..7).collect();
        for _ in 0..200 {
            let recs = lab.prepare_and_measure(&[0.0; 7], &all).unwrap();
            assert!(recs.iter().all(|r| r.outcome == Outcome::Plus));
        }
        assert_eq!(lab.preparations(), 200);
    }

    #[test]
    fn same_seed_same_records() {
        let m = build_model(ModelKind::TwoPlaquette).unwrap();
        let run = || {
            let mut rng = spawn_rng(9, 4);
            let truth = HiddenTruth::draw_uniform(&m, &mut rng);
            let mut lab = Lab::new(&m, truth, rng);
            (0..50)
                .flat_map(|i| {
                    let a = [0.1 * i as f64, 0.2, -0.3];
                    lab.prepare_and_measure(&a, &[0, 1, 2]).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resource_accounting() {
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let mut rng = spawn_rng(5, 0);
        let truth = HiddenTruth::draw_uniform(&m, &mut rng);
        let mut lab = Lab::new(&m, truth, rng);
        lab.prepare_and_measure(&[0.0; 7], &[0]).unwrap();
        assert_eq!(lab.preparations(), 1);
        lab.prepare_and_measure(&[0.0; 7], &[0, 1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(lab.preparations(), 2);
        let mut buf = [Outcome::Plus; 7];
        lab.measure_all(&[0.0; 7], &mut buf).unwrap();
        assert_eq!(lab.preparations(), 3);
        lab.measure_repeated(&[0.0; 7], 2, 10).unwrap();
        assert_eq!(lab.preparations(), 13);

        let one = build_model(ModelKind::SingleQubit).unwrap();
        let mut lab = Lab::new(&one, HiddenTruth::new(&one, &[0.2]).unwrap(), spawn_rng(1, 1));
        lab.measure_single(0.0);
        lab.measure_single(1.0);
        assert_eq!(lab.preparations(), 2);
    }

    fn joint_marginals_match(mode: SamplingMode) {
        for kind in [ModelKind::TwoPlaquette, ModelKind::ThreePlaquette] {
            let m = build_model(kind).unwrap();
            let mut rng = spawn_rng(77, kind as u64);
            let truth = HiddenTruth::draw_uniform(&m, &mut rng);
            let angles: Vec<f64> = (0..m.num_angles()).map(|_| rng.uniform_angle()).collect();
            let mut lab = Lab::new(&m, truth.clone(), rng).with_sampling(mode);
            let n = 100_000;
            let mut plus = vec![0u64; m.num_combos()];
            let mut buf = vec![Outcome::Plus; m.num_combos()];
            for _ in 0..n {
                lab.measure_all(&angles, &mut buf).unwrap();
                for (p, o) in plus.iter_mut().zip(&buf) {
                    *p += (*o == Outcome::Plus) as u64;
                }
            }
            for (c, &k) in plus.iter().enumerate() {
                let p = m.full_likelihood(c, Outcome::Plus, &truth.values(), &angles).unwrap();
                let freq = k as f64 / n as f64;
                let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-6);
                assert!((freq - p).abs() <= 3.0 * sigma + 1e-9, "{kind} combo {c}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn joint_sampler_marginals_match_likelihoods() {
        joint_marginals_match(SamplingMode::Joint);
    }

    #[test]
    fn independent_sampler_marginals_match_likelihoods() {
        joint_marginals_match(SamplingMode::Independent);
    }

    #[test]
    fn history_is_recorded_per_combo() {
        let m = build_model(ModelKind::TwoPlaquette).unwrap();
        let truth = HiddenTruth::new(&m, &[0.1, 0.2, 0.3]).unwrap();
        let mut lab = Lab::new(&m, truth, spawn_rng(0, 0)).with_history();
        lab.prepare_and_measure(&[0.0; 3], &[0, 2]).unwrap();
        lab.measure_repeated(&[0.0; 3], 1, 3).unwrap();
        let h = lab.take_history().unwrap();
        assert_eq!(h.len(), 5);
        assert_eq!(h[0].preparation_index, 0);
        assert_eq!(h[1].combo, 2);
        assert_eq!(h[4].preparation_index, 3);
    }
}
