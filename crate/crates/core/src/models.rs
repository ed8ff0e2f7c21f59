//! Likelihood tables for the single-qubit, two-plaquette and three-plaquette
//! (Steane code) configurations, plus an exact 7-qubit statevector used as an
//! independent check on the tables and as the joint measurement sampler.
//!
//! Every likelihood is a normalized sum of `K` unit cosines,
//!
//! ```text
//! P(± | φ, θ) = (K ± Σ_j cos(a_j·φ + b_j·θ)) / 2K
//! ```
//!
//! with integer coefficient vectors `a_j` over the unknown phases and `b_j`
//! over the rotation angles. The first term of each combination is the one
//! carrying its target phase; the other `K - 1` terms are cross terms.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::phase::{wrap_angle, WrappedPhase};

/// Outcome of a ±1 measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Plus => 1.0,
            Outcome::Minus => -1.0,
        }
    }

    #[inline]
    pub fn from_plus(is_plus: bool) -> Self {
        if is_plus {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    SingleQubit,
    TwoPlaquette,
    ThreePlaquette,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SingleQubit => "single_qubit",
            ModelKind::TwoPlaquette => "two_plaquette",
            ModelKind::ThreePlaquette => "three_plaquette",
        }
    }

    pub fn is_plaquette(self) -> bool {
        !matches!(self, ModelKind::SingleQubit)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_qubit" => Ok(ModelKind::SingleQubit),
            "two_plaquette" => Ok(ModelKind::TwoPlaquette),
            "three_plaquette" => Ok(ModelKind::ThreePlaquette),
            other => Err(Error::InvalidArgument(format!(
                "unknown model `{other}` (expected single_qubit, two_plaquette or three_plaquette)"
            ))),
        }
    }
}

/// One `cos(a·φ + b·θ)` term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CosineTerm {
    pub phase_coeffs: Vec<i8>,
    pub angle_coeffs: Vec<i8>,
}

impl CosineTerm {
    #[inline]
    pub fn argument(&self, phases: &[f64], angles: &[f64]) -> f64 {
        let a: f64 = self
            .phase_coeffs
            .iter()
            .zip(phases)
            .map(|(&c, &p)| c as f64 * p)
            .sum();
        let b: f64 = self
            .angle_coeffs
            .iter()
            .zip(angles)
            .map(|(&c, &t)| c as f64 * t)
            .sum();
        a + b
    }
}

/// Normalized sum of `K` unit cosines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CosineSumLikelihood {
    pub terms: Vec<CosineTerm>,
}

impl CosineSumLikelihood {
    pub fn k(&self) -> usize {
        self.terms.len()
    }

    /// `Σ_j cos(a_j·φ + b_j·θ) / K`, the expectation of the measured operator.
    pub fn expectation(&self, phases: &[f64], angles: &[f64]) -> f64 {
        let sum: f64 = self
            .terms
            .iter()
            .map(|t| t.argument(phases, angles).cos())
            .sum();
        sum / self.k() as f64
    }

    pub fn probability(&self, outcome: Outcome, phases: &[f64], angles: &[f64]) -> f64 {
        probability_from_expectation(outcome, self.expectation(phases, angles))
    }
}

/// `P(±) = (1 ± ⟨O⟩)/2`, with `P(-)` computed as `1 - P(+)` so the pair sums
/// to one exactly.
#[inline]
pub fn probability_from_expectation(outcome: Outcome, expectation: f64) -> f64 {
    let plus = ((1.0 + expectation) / 2.0).clamp(0.0, 1.0);
    match outcome {
        Outcome::Plus => plus,
        Outcome::Minus => 1.0 - plus,
    }
}

/// One measurable stabilizer combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Combo {
    pub name: &'static str,
    /// 1-based qubit labels of the X-type operator.
    pub support: Vec<usize>,
    pub likelihood: CosineSumLikelihood,
    /// 0-based index of the phase carried by the first cosine term.
    pub target_phase: usize,
    /// Row mapping the angle vector to this combination's θ̃.
    pub ttilde_row: Vec<f64>,
    /// Angle index scanned by the iterative scan-and-maximize method.
    pub scan_angle: usize,
    /// 1-based label of the qubit whose angle is scanned.
    pub scan_qubit: usize,
}

impl Combo {
    pub fn k(&self) -> usize {
        self.likelihood.k()
    }
}

/// Fully populated description of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_phases: usize,
    /// 1-based labels of the qubits whose rotation angles form the angle
    /// vector, in angle-vector order. Empty for the single-qubit model, whose
    /// single "angle" is the measurement axis.
    pub rotated_qubits: Vec<usize>,
    pub combos: Vec<Combo>,
    ttilde_matrix: DMatrix<f64>,
    ttilde_inverse: DMatrix<f64>,
}

impl ModelSpec {
    pub fn num_angles(&self) -> usize {
        self.ttilde_matrix.ncols()
    }

    pub fn num_combos(&self) -> usize {
        self.combos.len()
    }

    pub fn ttilde_matrix(&self) -> &DMatrix<f64> {
        &self.ttilde_matrix
    }

    pub fn combo(&self, id: usize) -> Result<&Combo> {
        self.combos.get(id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "combo index {id} out of range for {} ({} combos)",
                self.kind,
                self.combos.len()
            ))
        })
    }

    pub fn combo_by_name(&self, name: &str) -> Result<usize> {
        self.combos
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown combo `{name}` for {}", self.kind)))
    }

    /// Combination whose first cosine carries `phase`.
    pub fn combo_for_phase(&self, phase: usize) -> Option<usize> {
        self.combos.iter().position(|c| c.target_phase == phase)
    }

    fn check_vectors(&self, phases: &[f64], angles: &[f64]) -> Result<()> {
        check_len("phase vector", self.num_phases, phases.len())?;
        check_len("angle vector", self.num_angles(), angles.len())
    }

    /// `P(sign | φ, θ)` from the full cosine-sum table.
    pub fn full_likelihood(&self, combo: usize, outcome: Outcome, phases: &[f64], angles: &[f64]) -> Result<f64> {
        self.check_vectors(phases, angles)?;
        Ok(self.combo(combo)?.likelihood.probability(outcome, phases, angles))
    }

    /// `⟨S_combo⟩ = P(+) - P(-)`.
    pub fn expectation(&self, combo: usize, phases: &[f64], angles: &[f64]) -> Result<f64> {
        self.check_vectors(phases, angles)?;
        Ok(self.combo(combo)?.likelihood.expectation(phases, angles))
    }

    /// `(K ± cos(φ_target - θ̃)) / 2K`, the likelihood with all cross terms
    /// averaged out.
    pub fn marginal_likelihood(&self, combo: usize, outcome: Outcome, target: WrappedPhase, ttilde: WrappedPhase) -> Result<f64> {
        let k = self.combo(combo)?.k() as f64;
        let e = (target.value() - ttilde.value()).cos() / k;
        Ok(probability_from_expectation(outcome, e))
    }

    /// The wrapped θ̃ of `combo` at angle vector `angles`.
    pub fn theta_tilde(&self, combo: usize, angles: &[f64]) -> Result<WrappedPhase> {
        check_len("angle vector", self.num_angles(), angles.len())?;
        let row = &self.combo(combo)?.ttilde_row;
        let v: f64 = row.iter().zip(angles).map(|(r, t)| r * t).sum();
        WrappedPhase::new(v)
    }

    /// Angle vector whose θ̃ values equal `targets` (one per combo, in combo
    /// order) modulo 2π.
    pub fn solve_angles(&self, targets: &[f64]) -> Result<Vec<f64>> {
        check_len("θ̃ targets", self.num_combos(), targets.len())?;
        let mut out = vec![0.0; self.num_angles()];
        self.solve_angles_into(targets, &mut out);
        Ok(out)
    }

    /// Allocation-free form of [`solve_angles`](Self::solve_angles) for hot loops.
    pub(crate) fn solve_angles_into(&self, targets: &[f64], out: &mut [f64]) {
        let inv = &self.ttilde_inverse;
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..inv.ncols()).map(|c| inv[(r, c)] * targets[c]).sum();
        }
    }
}

fn term(phase_coeffs: &[i8], angle_coeffs: &[i8]) -> CosineTerm {
    CosineTerm {
        phase_coeffs: phase_coeffs.to_vec(),
        angle_coeffs: angle_coeffs.to_vec(),
    }
}

fn combo(name: &'static str, support: &[usize], scan_qubit: usize, rotated: &[usize], terms: Vec<CosineTerm>) -> Result<Combo> {
    let target_phase = terms[0]
        .phase_coeffs
        .iter()
        .position(|&c| c != 0)
        .ok_or_else(|| Error::Model(format!("{name}: first term has no phase")))?;
    let ttilde_row = terms[0].angle_coeffs.iter().map(|&b| -(b as f64)).collect();
    let scan_angle = if rotated.is_empty() {
        0
    } else {
        rotated
            .iter()
            .position(|&q| q == scan_qubit)
            .ok_or_else(|| Error::Model(format!("{name}: scan qubit {scan_qubit} is not rotated")))?
    };
    Ok(Combo {
        name,
        support: support.to_vec(),
        likelihood: CosineSumLikelihood { terms },
        target_phase,
        ttilde_row,
        scan_angle,
        scan_qubit,
    })
}

/// Builds the coefficient tables for one configuration.
pub fn build_model(kind: ModelKind) -> Result<ModelSpec> {
    let (num_phases, rotated, combos) = match kind {
        ModelKind::SingleQubit => {
            let c = combo("O", &[1], 0, &[], vec![term(&[1], &[-1])])?;
            (1, vec![], vec![c])
        }
        ModelKind::TwoPlaquette => {
            // angle vector (θ1, θ2, θ5), phase vector (φ1, φ2, φ3)
            let r = [1, 2, 5];
            let combos = vec![
                combo("S1", &[1, 2, 3, 4], 2, &r, vec![
                    term(&[0, 1, 0], &[2, 2, 0]),
                    term(&[1, 0, -1], &[-2, 2, 0]),
                ])?,
                combo("S2", &[2, 3, 5, 6], 5, &r, vec![
                    term(&[1, 0, 0], &[0, 2, 2]),
                    term(&[0, 1, -1], &[0, 2, -2]),
                ])?,
                combo("S1S2", &[1, 4, 5, 6], 1, &r, vec![
                    term(&[0, 0, 1], &[2, 0, 2]),
                    term(&[1, -1, 0], &[-2, 0, 2]),
                ])?,
            ];
            (3, r.to_vec(), combos)
        }
        ModelKind::ThreePlaquette => {
            let r = [1, 2, 3, 4, 5, 6, 7];
            let combos = vec![
                combo("S1", &[1, 2, 3, 4], 2, &r, vec![
                    term(&[0, 1, 0, 0, 0, 0, 0], &[2, 2, 2, 2, 0, 0, 0]),
                    term(&[1, 0, -1, 0, 0, 0, 0], &[-2, 2, 2, -2, 0, 0, 0]),
                    term(&[0, 0, 0, 1, 0, -1, 0], &[-2, -2, 2, 2, 0, 0, 0]),
                    term(&[0, 0, 0, 0, 1, 0, -1], &[-2, 2, -2, 2, 0, 0, 0]),
                ])?,
                combo("S2", &[2, 3, 5, 6], 6, &r, vec![
                    term(&[1, 0, 0, 0, 0, 0, 0], &[0, 2, 2, 0, 2, 2, 0]),
                    term(&[0, 1, -1, 0, 0, 0, 0], &[0, 2, 2, 0, -2, -2, 0]),
                    term(&[0, 0, 0, 1, -1, 0, 0], &[0, -2, 2, 0, -2, 2, 0]),
                    term(&[0, 0, 0, 0, 0, 1, -1], &[0, 2, -2, 0, -2, 2, 0]),
                ])?,
                combo("S3", &[3, 4, 6, 7], 7, &r, vec![
                    term(&[0, 0, 0, 1, 0, 0, 0], &[0, 0, 2, 2, 0, 2, 2]),
                    term(&[1, 0, 0, 0, -1, 0, 0], &[0, 0, 2, -2, 0, 2, -2]),
                    term(&[0, 1, 0, 0, 0, -1, 0], &[0, 0, 2, 2, 0, -2, -2]),
                    term(&[0, 0, 1, 0, 0, 0, -1], &[0, 0, -2, 2, 0, 2, -2]),
                ])?,
                combo("S1S2", &[1, 4, 5, 6], 5, &r, vec![
                    term(&[0, 0, 1, 0, 0, 0, 0], &[2, 0, 0, 2, 2, 2, 0]),
                    term(&[1, -1, 0, 0, 0, 0, 0], &[-2, 0, 0, -2, 2, 2, 0]),
                    term(&[0, 0, 0, 1, 0, 0, -1], &[-2, 0, 0, 2, -2, 2, 0]),
                    term(&[0, 0, 0, 0, 1, -1, 0], &[-2, 0, 0, 2, 2, -2, 0]),
                ])?,
                combo("S1S3", &[1, 2, 6, 7], 1, &r, vec![
                    term(&[0, 0, 0, 0, 0, 1, 0], &[2, 2, 0, 0, 0, 2, 2]),
                    term(&[1, 0, 0, 0, 0, 0, -1], &[-2, 2, 0, 0, 0, 2, -2]),
                    term(&[0, 1, 0, -1, 0, 0, 0], &[2, 2, 0, 0, 0, -2, -2]),
                    term(&[0, 0, 1, 0, -1, 0, 0], &[2, -2, 0, 0, 0, 2, -2]),
                ])?,
                combo("S2S3", &[2, 4, 5, 7], 4, &r, vec![
                    term(&[0, 0, 0, 0, 1, 0, 0], &[0, 2, 0, 2, 2, 0, 2]),
                    term(&[1, 0, 0, -1, 0, 0, 0], &[0, 2, 0, -2, 2, 0, -2]),
                    term(&[0, 1, 0, 0, 0, 0, -1], &[0, 2, 0, 2, -2, 0, -2]),
                    term(&[0, 0, 1, 0, 0, -1, 0], &[0, -2, 0, 2, 2, 0, -2]),
                ])?,
                combo("S1S2S3", &[1, 3, 5, 7], 3, &r, vec![
                    term(&[0, 0, 0, 0, 0, 0, 1], &[2, 0, 2, 0, 2, 0, 2]),
                    term(&[1, 0, 0, 0, 0, -1, 0], &[-2, 0, 2, 0, 2, 0, -2]),
                    term(&[0, 1, 0, 0, -1, 0, 0], &[2, 0, 2, 0, -2, 0, -2]),
                    term(&[0, 0, 1, -1, 0, 0, 0], &[2, 0, -2, 0, 2, 0, -2]),
                ])?,
            ];
            (7, r.to_vec(), combos)
        }
    };

    let num_angles = combos[0].ttilde_row.len();
    let mut seen = vec![false; num_phases];
    for c in &combos {
        if c.ttilde_row.len() != num_angles {
            return Err(Error::Model(format!("{}: ragged θ̃ row", c.name)));
        }
        if std::mem::replace(&mut seen[c.target_phase], true) {
            return Err(Error::Model(format!("phase {} targeted twice", c.target_phase)));
        }
    }
    let rows: Vec<f64> = combos.iter().flat_map(|c| c.ttilde_row.iter().copied()).collect();
    let ttilde_matrix = DMatrix::from_row_slice(combos.len(), num_angles, &rows);
    let ttilde_inverse = ttilde_matrix
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Model(format!("{kind}: θ̃ matrix is singular")))?;

    Ok(ModelSpec {
        kind,
        num_phases,
        rotated_qubits: rotated,
        combos,
        ttilde_matrix,
        ttilde_inverse,
    })
}

pub const NUM_QUBITS: usize = 7;
pub const DIM: usize = 1 << NUM_QUBITS;

/// Computational-basis components of the logical zero, written qubit 1 first.
/// Component `k > 0` carries phase `φ_k`.
const CODE_COMPONENTS: [&str; 8] = [
    "0000000", "0110110", "1111000", "1001110", "0011011", "0101101", "1100011", "1010101",
];

#[inline]
fn qubit_mask(qubit: usize) -> usize {
    1 << (NUM_QUBITS - qubit)
}

fn support_mask(support: &[usize]) -> usize {
    support.iter().fold(0, |m, &q| m | qubit_mask(q))
}

fn parse_ket(bits: &str) -> usize {
    bits.bytes().fold(0, |acc, b| (acc << 1) | (b == b'1') as usize)
}

/// Exact 7-qubit statevector.
#[derive(Debug, Clone, PartialEq)]
pub struct StatevectorOracle {
    amplitudes: Vec<Complex64>,
}

impl StatevectorOracle {
    /// The erroneous code state with phases `φ`, followed by single-qubit Z
    /// rotations `exp(-iθZ)` on the model's rotated qubits.
    ///
    /// For the two-plaquette model only the first four components are
    /// populated and qubit 7 stays idle.
    pub fn prepare(model: &ModelSpec, phases: &[f64], angles: &[f64]) -> Result<Self> {
        let components = match model.kind {
            ModelKind::SingleQubit => {
                return Err(Error::InvalidArgument(
                    "the statevector oracle covers plaquette models only".into(),
                ))
            }
            ModelKind::TwoPlaquette => 4,
            ModelKind::ThreePlaquette => 8,
        };
        model.check_vectors(phases, angles)?;
        let norm = 1.0 / (components as f64).sqrt();
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); DIM];
        for (k, ket) in CODE_COMPONENTS.iter().take(components).enumerate() {
            let phase = if k == 0 { 0.0 } else { phases[k - 1] };
            amplitudes[parse_ket(ket)] = Complex64::from_polar(norm, phase);
        }
        let mut state = StatevectorOracle { amplitudes };
        for (&q, &t) in model.rotated_qubits.iter().zip(angles) {
            state.rotate_z(q, t);
        }
        Ok(state)
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Applies `exp(-iθZ)` to a 1-based qubit.
    pub fn rotate_z(&mut self, qubit: usize, theta: f64) {
        let mask = qubit_mask(qubit);
        let zero = Complex64::from_polar(1.0, -theta);
        let one = Complex64::from_polar(1.0, theta);
        for (x, a) in self.amplitudes.iter_mut().enumerate() {
            *a *= if x & mask == 0 { zero } else { one };
        }
    }

    /// Multiplies every amplitude by a common phase.
    pub fn apply_global_phase(&mut self, phase: f64) {
        let g = Complex64::from_polar(1.0, phase);
        self.amplitudes.iter_mut().for_each(|a| *a *= g);
    }

    /// `⟨ψ| X_support |ψ⟩`, by flipping the support bits.
    pub fn x_expectation(&self, support: &[usize]) -> f64 {
        let mask = support_mask(support);
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(x, a)| (a.conj() * self.amplitudes[x ^ mask]).re)
            .sum()
    }

    /// Expectation of every combo of `model`, in combo order.
    pub fn expectations(&self, model: &ModelSpec) -> Vec<f64> {
        model.combos.iter().map(|c| self.x_expectation(&c.support)).collect()
    }

    /// Outcome probabilities after a Hadamard on every qubit; bit value 0 of
    /// qubit `q` in the returned index is the +1 eigenvalue of `X_q`.
    pub fn x_basis_probabilities(&self) -> [f64; DIM] {
        let mut a = [Complex64::new(0.0, 0.0); DIM];
        a.copy_from_slice(&self.amplitudes);
        let mut half = 1;
        while half < DIM {
            for block in (0..DIM).step_by(2 * half) {
                for i in block..block + half {
                    let (u, v) = (a[i], a[i + half]);
                    a[i] = (u + v) * FRAC_1_SQRT_2;
                    a[i + half] = (u - v) * FRAC_1_SQRT_2;
                }
            }
            half <<= 1;
        }
        let mut p = [0.0; DIM];
        for (pi, ai) in p.iter_mut().zip(&a) {
            *pi = ai.norm_sqr();
        }
        p
    }

    /// Draws one joint X-basis outcome on all seven qubits.
    pub fn sample_x_basis<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let p = self.x_basis_probabilities();
        let total: f64 = p.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (x, &px) in p.iter().enumerate() {
            if u < px {
                return x;
            }
            u -= px;
        }
        // rounding left u marginally above the last nonzero bin
        p.iter().rposition(|&px| px > 0.0).unwrap_or(0)
    }
}

/// ±1 value of `X_support` read off a joint X-basis outcome.
#[inline]
pub fn parity_outcome(x_outcome: usize, support: &[usize]) -> Outcome {
    Outcome::from_plus((x_outcome & support_mask(support)).count_ones().is_multiple_of(2))
}

/// Largest gap between the statevector expectation and `P(+) - P(-)` from
/// the likelihood tables, over `samples` uniformly drawn `(φ, θ)` and every
/// combo.
pub fn oracle_deviation<R: Rng + ?Sized>(model: &ModelSpec, samples: usize, rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-PI..PI)).collect() };
    for _ in 0..samples {
        let phases = draw(model.num_phases);
        let angles = draw(model.num_angles());
        let oracle = StatevectorOracle::prepare(model, &phases, &angles)?;
        for (c, sv) in oracle.expectations(model).into_iter().enumerate() {
            let plus = model.full_likelihood(c, Outcome::Plus, &phases, &angles)?;
            let minus = model.full_likelihood(c, Outcome::Minus, &phases, &angles)?;
            worst = worst.max((sv - (plus - minus)).abs());
        }
    }
    Ok(worst)
}

/// Wrapped θ̃ values of every combo, in combo order.
pub fn theta_tildes(model: &ModelSpec, angles: &[f64]) -> Vec<f64> {
    model
        .combos
        .iter()
        .map(|c| wrap_angle(c.ttilde_row.iter().zip(angles).map(|(r, t)| r * t).sum()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-PI..PI)).collect()
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("four_plaquette".parse::<ModelKind>().is_err());
        assert_eq!("two_plaquette".parse::<ModelKind>().unwrap(), ModelKind::TwoPlaquette);
    }

    #[test]
    fn table_examples() {
        let three = build_model(ModelKind::ThreePlaquette).unwrap();
        let s1 = &three.combos[0];
        assert_eq!(s1.name, "S1");
        assert_eq!(s1.k(), 4);
        assert_eq!(s1.likelihood.terms[0].phase_coeffs, vec![0, 1, 0, 0, 0, 0, 0]);
        assert_eq!(s1.likelihood.terms[0].angle_coeffs, vec![2, 2, 2, 2, 0, 0, 0]);
        let targets: Vec<usize> = three.combos.iter().map(|c| c.target_phase + 1).collect();
        assert_eq!(targets, vec![2, 1, 4, 3, 6, 5, 7]);

        let two = build_model(ModelKind::TwoPlaquette).unwrap();
        let s1 = &two.combos[0];
        assert_eq!(s1.k(), 2);
        assert_eq!(s1.likelihood.terms[0], term(&[0, 1, 0], &[2, 2, 0]));
        assert_eq!(s1.likelihood.terms[1], term(&[1, 0, -1], &[-2, 2, 0]));
        let scan: Vec<usize> = two.combos.iter().map(|c| two.rotated_qubits[c.scan_angle]).collect();
        assert_eq!(scan, vec![2, 5, 1]);

        let one = build_model(ModelKind::SingleQubit).unwrap();
        assert_eq!(one.combos[0].likelihood.terms, vec![term(&[1], &[-1])]);
    }

    #[test]
    fn three_plaquette_scan_angles_are_distinct() {
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let mut scan: Vec<usize> = m.combos.iter().map(|c| c.scan_angle).collect();
        for c in &m.combos {
            assert!(c.support.contains(&m.rotated_qubits[c.scan_angle]));
        }
        scan.sort_unstable();
        scan.dedup();
        assert_eq!(scan.len(), 7);
    }

    #[test]
    fn supports_follow_symmetric_differences() {
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let mask = |name: &str| support_mask(&m.combos[m.combo_by_name(name).unwrap()].support);
        assert_eq!(mask("S1S2"), mask("S1") ^ mask("S2"));
        assert_eq!(mask("S1S3"), mask("S1") ^ mask("S3"));
        assert_eq!(mask("S2S3"), mask("S2") ^ mask("S3"));
        assert_eq!(mask("S1S2S3"), mask("S1") ^ mask("S2") ^ mask("S3"));
    }

    #[test]
    fn full_likelihood_examples() {
        let two = build_model(ModelKind::TwoPlaquette).unwrap();
        let p = two.full_likelihood(0, Outcome::Plus, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-15);
        let p = two.full_likelihood(0, Outcome::Plus, &[0.0, PI, 0.0], &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-15);
        assert!(two.full_likelihood(0, Outcome::Plus, &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn marginal_likelihood_examples() {
        let z = WrappedPhase::ZERO;
        let two = build_model(ModelKind::TwoPlaquette).unwrap();
        assert_abs_diff_eq!(two.marginal_likelihood(0, Outcome::Plus, z, z).unwrap(), 0.75);
        let three = build_model(ModelKind::ThreePlaquette).unwrap();
        assert_abs_diff_eq!(three.marginal_likelihood(0, Outcome::Plus, z, z).unwrap(), 0.625);
    }

    #[test]
    fn theta_tilde_examples() {
        let three = build_model(ModelKind::ThreePlaquette).unwrap();
        let t = three.theta_tilde(0, &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(t.value(), -2.0, epsilon = 1e-12);
        for c in 0..7 {
            assert_eq!(three.theta_tilde(c, &[0.0; 7]).unwrap().value(), 0.0);
        }
        let two = build_model(ModelKind::TwoPlaquette).unwrap();
        let s12 = two.combo_by_name("S1S2").unwrap();
        let t = two.theta_tilde(s12, &[0.3, 0.9, 0.4]).unwrap();
        assert_abs_diff_eq!(t.value(), wrap_angle(-2.0 * (0.3 + 0.4)), epsilon = 1e-12);
    }

    #[test]
    fn solve_angles_examples() {
        let two = build_model(ModelKind::TwoPlaquette).unwrap();
        assert_eq!(two.solve_angles(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        let th = two.solve_angles(&[-2.0; 3]).unwrap();
        for t in th {
            assert_abs_diff_eq!(t, 0.5, epsilon = 1e-12);
        }
        assert!(two.solve_angles(&[0.0; 2]).is_err());
    }

    #[test]
    fn three_plaquette_gram_matrix_is_two_i_plus_two_j() {
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let g = m.ttilde_matrix() * m.ttilde_matrix().transpose() / 4.0;
        for i in 0..7 {
            for j in 0..7 {
                let expected = if i == j { 4.0 } else { 2.0 };
                assert_abs_diff_eq!(g[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn statevector_clean_states() {
        let three = build_model(ModelKind::ThreePlaquette).unwrap();
        let psi = StatevectorOracle::prepare(&three, &[0.0; 7], &[0.0; 7]).unwrap();
        let nonzero: Vec<_> = psi.amplitudes().iter().filter(|a| a.norm() > 0.0).collect();
        assert_eq!(nonzero.len(), 8);
        for a in nonzero {
            assert_abs_diff_eq!(a.re, 1.0 / (2.0 * 2f64.sqrt()), epsilon = 1e-15);
        }
        for e in psi.expectations(&three) {
            assert_abs_diff_eq!(e, 1.0, epsilon = 1e-12);
        }

        let two = build_model(ModelKind::TwoPlaquette).unwrap();
        let psi = StatevectorOracle::prepare(&two, &[0.0; 3], &[0.0; 3]).unwrap();
        let nonzero: Vec<_> = psi.amplitudes().iter().filter(|a| a.norm() > 0.0).collect();
        assert_eq!(nonzero.len(), 4);
        for a in nonzero {
            assert_abs_diff_eq!(a.re, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn statevector_phi2_pi() {
        let three = build_model(ModelKind::ThreePlaquette).unwrap();
        let mut phases = [0.0; 7];
        phases[1] = PI;
        let psi = StatevectorOracle::prepare(&three, &phases, &[0.0; 7]).unwrap();
        assert_abs_diff_eq!(psi.x_expectation(&three.combos[0].support), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn global_phase_leaves_expectations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let (p, t) = (random_vec(&mut rng, 7), random_vec(&mut rng, 7));
        let psi = StatevectorOracle::prepare(&m, &p, &t).unwrap();
        let mut rotated = psi.clone();
        rotated.apply_global_phase(1.234);
        for (a, b) in psi.expectations(&m).iter().zip(rotated.expectations(&m)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn tables_match_statevector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [ModelKind::TwoPlaquette, ModelKind::ThreePlaquette] {
            let m = build_model(kind).unwrap();
            for _ in 0..100 {
                let p = random_vec(&mut rng, m.num_phases);
                let t = random_vec(&mut rng, m.num_angles());
                let psi = StatevectorOracle::prepare(&m, &p, &t).unwrap();
                assert_abs_diff_eq!(psi.norm_sqr(), 1.0, epsilon = 1e-12);
                for (c, e) in psi.expectations(&m).into_iter().enumerate() {
                    let plus = m.full_likelihood(c, Outcome::Plus, &p, &t).unwrap();
                    let minus = m.full_likelihood(c, Outcome::Minus, &p, &t).unwrap();
                    assert!((e - (plus - minus)).abs() <= 1e-10, "{kind} {c}");
                }
            }
        }
    }

    #[test]
    fn x_basis_parities_reproduce_expectations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = build_model(ModelKind::ThreePlaquette).unwrap();
        let (p, t) = (random_vec(&mut rng, 7), random_vec(&mut rng, 7));
        let psi = StatevectorOracle::prepare(&m, &p, &t).unwrap();
        let probs = psi.x_basis_probabilities();
        assert_abs_diff_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for c in &m.combos {
            let e: f64 = probs
                .iter()
                .enumerate()
                .map(|(x, px)| px * parity_outcome(x, &c.support).sign())
                .sum();
            assert_abs_diff_eq!(e, psi.x_expectation(&c.support), epsilon = 1e-12);
        }
    }

    #[test]
    fn marginal_matches_average_over_other_phases() {
        // Monte-Carlo over non-target phases and angles with θ̃ held fixed
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [ModelKind::TwoPlaquette, ModelKind::ThreePlaquette] {
            let m = build_model(kind).unwrap();
            for ci in 0..m.num_combos() {
                let c = &m.combos[ci];
                let target = 0.7;
                let ttilde = -1.1;
                let samples = 400_000;
                let mut acc = 0.0;
                for _ in 0..samples {
                    let mut phases = random_vec(&mut rng, m.num_phases);
                    phases[c.target_phase] = target;
                    let mut tt = random_vec(&mut rng, m.num_combos());
                    tt[ci] = ttilde;
                    let angles = m.solve_angles(&tt).unwrap();
                    acc += m.full_likelihood(ci, Outcome::Plus, &phases, &angles).unwrap();
                }
                let avg = acc / samples as f64;
                let marg = m
                    .marginal_likelihood(
                        ci,
                        Outcome::Plus,
                        WrappedPhase::new(target).unwrap(),
                        WrappedPhase::new(ttilde).unwrap(),
                    )
                    .unwrap();
                assert!((avg - marg).abs() < 1e-3, "{kind} {}: {avg} vs {marg}", c.name);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn likelihoods_are_complementary(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in [ModelKind::SingleQubit, ModelKind::TwoPlaquette, ModelKind::ThreePlaquette] {
                let m = build_model(kind).unwrap();
                let p = random_vec(&mut rng, m.num_phases);
                let t: Vec<f64> = (0..m.num_angles()).map(|_| rng.random_range(-TAU..TAU)).collect();
                for c in 0..m.num_combos() {
                    let plus = m.full_likelihood(c, Outcome::Plus, &p, &t).unwrap();
                    let minus = m.full_likelihood(c, Outcome::Minus, &p, &t).unwrap();
                    proptest::prop_assert!((0.0..=1.0).contains(&plus));
                    proptest::prop_assert_eq!(plus + minus, 1.0);
                    let a = WrappedPhase::new(p[m.combos[c].target_phase]).unwrap();
                    let b = WrappedPhase::new(t[0]).unwrap();
                    let mp = m.marginal_likelihood(c, Outcome::Plus, a, b).unwrap();
                    let mm = m.marginal_likelihood(c, Outcome::Minus, a, b).unwrap();
                    proptest::prop_assert_eq!(mp + mm, 1.0);
                }
            }
        }

        #[test]
        fn theta_tilde_round_trip(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in [ModelKind::SingleQubit, ModelKind::TwoPlaquette, ModelKind::ThreePlaquette] {
                let m = build_model(kind).unwrap();
                let targets = random_vec(&mut rng, m.num_combos());
                let angles = m.solve_angles(&targets).unwrap();
                for (c, &t) in targets.iter().enumerate() {
                    let back = m.theta_tilde(c, &angles).unwrap().value();
                    proptest::prop_assert!(wrap_angle(back - t).abs() < 1e-10);
                }
            }
        }
    }
}
