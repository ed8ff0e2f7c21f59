//! Circular arithmetic and discretized posterior densities over phases.
//!
//! Every phase in the crate is carried as a [`WrappedPhase`] in `[-π, π)`.
//! Posteriors are stored on fixed uniform grids with midpoint nodes, so all
//! integrals reduce to plain sums weighted by the bin width.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Total posterior mass below which an update is declared degenerate.
pub const DEGENERATE_MASS: f64 = 1e-300;

/// Resultant length below which the circular mean is undefined.
pub const DIFFUSE_RESULTANT: f64 = 1e-12;

/// Densities below this are flushed to zero during fused cosine updates.
/// Reviving such a bin would take a likelihood ratio above 1e40.
pub const NEGLIGIBLE_DENSITY: f64 = 1e-40;

/// Fused updates between rebuilds of the live-bin ranges.
const RESCAN_INTERVAL: u32 = 16;

/// Shortest zero run worth skipping.
const MIN_DEAD_RUN: usize = 16;

/// Smallest 1-D grid accepted by [`PosteriorGrid1D::uniform`].
pub const MIN_PHASE_BINS: usize = 8;

/// An angle in radians reduced to the half-open interval `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct WrappedPhase(f64);

impl WrappedPhase {
    pub const ZERO: WrappedPhase = WrappedPhase(0.0);

    pub fn new(angle: f64) -> Result<Self> {
        if !angle.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "angle must be finite, got {angle}"
            )));
        }
        Ok(WrappedPhase(wrap_angle(angle)))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Wraps a value that is known to be finite.
    #[inline]
    pub(crate) fn from_finite(angle: f64) -> Self {
        debug_assert!(angle.is_finite());
        WrappedPhase(wrap_angle(angle))
    }
}

impl fmt::Display for WrappedPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<WrappedPhase> for f64 {
    fn from(p: WrappedPhase) -> f64 {
        p.0
    }
}

/// Reduces `angle` modulo 2π into `[-π, π)`.
pub fn wrap(angle: f64) -> Result<WrappedPhase> {
    WrappedPhase::new(angle)
}

#[inline]
pub(crate) fn wrap_angle(angle: f64) -> f64 {
    let r = (angle + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

/// Signed shortest angular distance `a - b`, in `[-π, π)`.
#[inline]
pub fn circ_diff(a: WrappedPhase, b: WrappedPhase) -> f64 {
    wrap_angle(a.0 - b.0)
}

/// Node positions and cached trigonometric tables for a periodic phase axis.
#[derive(Debug, PartialEq)]
pub struct PhaseAxis {
    bins: usize,
    spacing: f64,
    points: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PhaseAxis {
    pub fn new(bins: usize) -> Result<Arc<Self>> {
        if bins < MIN_PHASE_BINS {
            return Err(Error::InvalidArgument(format!(
                "phase grid needs at least {MIN_PHASE_BINS} bins, got {bins}"
            )));
        }
        let spacing = TAU / bins as f64;
        let points: Vec<f64> = (0..bins)
            .map(|i| -PI + (i as f64 + 0.5) * spacing)
            .collect();
        let cos = points.iter().map(|p| p.cos()).collect();
        let sin = points.iter().map(|p| p.sin()).collect();
        Ok(Arc::new(PhaseAxis {
            bins,
            spacing,
            points,
            cos,
            sin,
        }))
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn cos(&self) -> &[f64] {
        &self.cos
    }

    pub fn sin(&self) -> &[f64] {
        &self.sin
    }
}

/// Summary of a phase posterior: circular mean and the second moment about it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularMoments {
    pub mean: WrappedPhase,
    pub variance: f64,
    /// Length of the first trigonometric moment, in `[0, 1]`.
    pub resultant: f64,
    /// Set when the resultant vanished and the mean was tie-broken to zero.
    pub diffuse: bool,
}

/// A grid that can absorb one Bayesian likelihood factor.
pub trait BayesGrid: Clone {
    type Point: Copy;

    /// Multiplies the density by `likelihood` at every node and renormalizes.
    fn update_with<F: FnMut(Self::Point) -> f64>(&mut self, likelihood: F) -> Result<()>;
}

/// Returns `grid` after one Bayes step with the given pointwise likelihood.
pub fn bayes_update<G, F>(grid: &G, likelihood: F) -> Result<G>
where
    G: BayesGrid,
    F: FnMut(G::Point) -> f64,
{
    let mut next = grid.clone();
    next.update_with(likelihood)?;
    Ok(next)
}

fn check_probability(value: f64) -> Result<f64> {
    // allow rounding slack from sums of cosines
    if (-1e-12..=1.0 + 1e-12).contains(&value) {
        Ok(value.clamp(0.0, 1.0))
    } else {
        Err(Error::InvalidArgument(format!(
            "likelihood value {value} outside [0, 1]"
        )))
    }
}

/// Discretized density over a single phase on `[-π, π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid1D {
    axis: Arc<PhaseAxis>,
    density: Vec<f64>,
    /// Sorted bin ranges outside which the density is exactly zero. Bayes
    /// updates are multiplicative, so the set only shrinks.
    live: Vec<Range<usize>>,
    updates_since_rescan: u32,
}

impl PosteriorGrid1D {
    /// Flat prior `1/(2π)` on every bin.
    pub fn uniform(bins: usize) -> Result<Self> {
        let axis = PhaseAxis::new(bins)?;
        Ok(Self::uniform_on(axis))
    }

    pub fn uniform_on(axis: Arc<PhaseAxis>) -> Self {
        let density = vec![1.0 / TAU; axis.bins()];
        let live = std::iter::once(0..density.len()).collect();
        PosteriorGrid1D {
            axis,
            density,
            live,
            updates_since_rescan: 0,
        }
    }

    /// Builds a grid from unnormalized non-negative weights, one per bin.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let axis = PhaseAxis::new(weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "density weights must be finite and non-negative".into(),
            ));
        }
        let live = std::iter::once(0..weights.len()).collect();
        let mut grid = PosteriorGrid1D {
            axis,
            density: weights,
            live,
            updates_since_rescan: 0,
        };
        grid.normalize()?;
        Ok(grid)
    }

    /// Samples `f` at the bin centres and normalizes.
    pub fn from_fn<F: FnMut(f64) -> f64>(bins: usize, f: F) -> Result<Self> {
        let axis = PhaseAxis::new(bins)?;
        let weights = axis.points().iter().copied().map(f).collect();
        Self::from_weights(weights)
    }

    pub fn axis(&self) -> &Arc<PhaseAxis> {
        &self.axis
    }

    pub fn bins(&self) -> usize {
        self.axis.bins()
    }

    pub fn spacing(&self) -> f64 {
        self.axis.spacing()
    }

    pub fn points(&self) -> &[f64] {
        self.axis.points()
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// `Σ density · Δ`; one for every grid handed out by this type.
    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.spacing()
    }

    fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !mass.is_finite() || mass < DEGENERATE_MASS {
            return Err(Error::DegeneratePosterior { mass });
        }
        let scale = 1.0 / mass;
        self.density.iter_mut().for_each(|d| *d *= scale);
        Ok(())
    }

    /// Bayes step with likelihood `base + amplitude · cos(φ - θ)`.
    ///
    /// This is the only likelihood shape the marginal and single-qubit
    /// estimators need, so it runs on the cached trig tables in one fused
    /// pass. Returns the first trigonometric moment `(E cos φ, E sin φ)` of
    /// the updated grid.
    pub fn update_cosine(&mut self, base: f64, amplitude: f64, theta: f64) -> Result<(f64, f64)> {
        if base - amplitude.abs() < -1e-12 || base + amplitude.abs() > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "cosine likelihood {base} ± {amplitude} leaves [0, 1]"
            )));
        }
        let ac = amplitude * theta.cos();
        let as_ = amplitude * theta.sin();
        let axis = &*self.axis;
        let (mut total, mut sc, mut ss) = (0.0, 0.0, 0.0);
        for r in &self.live {
            let r = r.clone();
            let (t, c, s) = fused_cosine_pass(
                &mut self.density[r.clone()],
                &axis.cos[r.clone()],
                &axis.sin[r],
                base,
                ac,
                as_,
            );
            total += t;
            sc += c;
            ss += s;
        }
        let mass = total * axis.spacing;
        if !mass.is_finite() || mass < DEGENERATE_MASS {
            return Err(Error::DegeneratePosterior { mass });
        }
        let scale = 1.0 / mass;
        for r in &self.live {
            self.density[r.clone()].iter_mut().for_each(|d| *d *= scale);
        }
        self.updates_since_rescan += 1;
        if self.updates_since_rescan >= RESCAN_INTERVAL {
            self.rescan_live();
        }
        Ok((sc / total, ss / total))
    }

    /// Rebuilds the live ranges, dropping zero runs of at least
    /// `MIN_DEAD_RUN` bins.
    fn rescan_live(&mut self) {
        self.updates_since_rescan = 0;
        let mut live: Vec<Range<usize>> = Vec::with_capacity(self.live.len() + 1);
        for r in &self.live {
            let mut i = r.start;
            while i < r.end {
                if self.density[i] == 0.0 {
                    i += 1;
                    continue;
                }
                let start = i;
                let mut last_nonzero = i;
                while i < r.end && i - last_nonzero < MIN_DEAD_RUN {
                    if self.density[i] != 0.0 {
                        last_nonzero = i;
                    }
                    i += 1;
                }
                live.push(start..last_nonzero + 1);
                i = last_nonzero + 1;
            }
        }
        self.live = live;
    }

    /// First trigonometric moment `(E cos φ, E sin φ)`.
    pub fn trig_moment(&self) -> (f64, f64) {
        let axis = &*self.axis;
        let (mut c, mut s) = (0.0, 0.0);
        for ((d, cos), sin) in self.density.iter().zip(&axis.cos).zip(&axis.sin) {
            c += d * cos;
            s += d * sin;
        }
        (c * axis.spacing, s * axis.spacing)
    }

    pub fn moments(&self) -> CircularMoments {
        let (c, s) = self.trig_moment();
        let resultant = c.hypot(s);
        let (mean, diffuse) = mean_from_trig(c, s);
        let dx = self.spacing();
        let variance = self
            .points()
            .iter()
            .zip(&self.density)
            .map(|(&p, &d)| {
                let e = wrap_angle(p - mean.value());
                d * e * e
            })
            .sum::<f64>()
            * dx;
        CircularMoments {
            mean,
            variance,
            resultant,
            diffuse,
        }
    }
}

/// Circular mean from a first trigonometric moment, tie-broken to zero when
/// the resultant vanishes.
pub(crate) fn mean_from_trig(c: f64, s: f64) -> (WrappedPhase, bool) {
    if c.hypot(s) < DIFFUSE_RESULTANT {
        (WrappedPhase::ZERO, true)
    } else {
        (WrappedPhase::from_finite(s.atan2(c)), false)
    }
}

/// Multiplies `d` by `|base + ac·cos + as·sin|` and returns the sums of the
/// new values weighted by 1, cos and sin.
///
/// The abs folds rounding-level negatives at a zero of the likelihood back to
/// tiny positives and, unlike `max`, vectorizes. Negligible values are
/// flushed to zero so the live window can shrink.
fn fused_cosine_pass(d: &mut [f64], cos: &[f64], sin: &[f64], base: f64, ac: f64, as_: f64) -> (f64, f64, f64) {
    const LANES: usize = 8;
    let (mut t8, mut c8, mut s8) = ([0.0; LANES], [0.0; LANES], [0.0; LANES]);
    let split = d.len() - d.len() % LANES;
    let (head, tail) = d.split_at_mut(split);
    for ((d, c), s) in head
        .chunks_exact_mut(LANES)
        .zip(cos[..split].chunks_exact(LANES))
        .zip(sin[..split].chunks_exact(LANES))
    {
        for i in 0..LANES {
            let v = d[i] * (base + ac * c[i] + as_ * s[i]).abs();
            let v = if v < NEGLIGIBLE_DENSITY { 0.0 } else { v };
            d[i] = v;
            t8[i] += v;
            c8[i] += v * c[i];
            s8[i] += v * s[i];
        }
    }
    let (mut t, mut c, mut s) = (t8.iter().sum::<f64>(), c8.iter().sum::<f64>(), s8.iter().sum::<f64>());
    for ((d, &cv), &sv) in tail.iter_mut().zip(&cos[split..]).zip(&sin[split..]) {
        let v = *d * (base + ac * cv + as_ * sv).abs();
        let v = if v < NEGLIGIBLE_DENSITY { 0.0 } else { v };
        *d = v;
        t += v;
        c += v * cv;
        s += v * sv;
    }
    (t, c, s)
}

impl BayesGrid for PosteriorGrid1D {
    type Point = f64;

    fn update_with<F: FnMut(f64) -> f64>(&mut self, mut likelihood: F) -> Result<()> {
        for (d, &p) in self.density.iter_mut().zip(self.axis.points()) {
            *d *= check_probability(likelihood(p))?;
        }
        self.normalize()
    }
}

/// Joint density over a periodic phase and a bounded offset `h ∈ [-1, 1]`.
///
/// Storage is phase-major: cell `(i, j)` lives at `i * offset_bins + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid2D {
    axis: Arc<PhaseAxis>,
    offsets: Arc<Vec<f64>>,
    density: Vec<f64>,
}

impl PosteriorGrid2D {
    pub fn uniform(phase_bins: usize, offset_bins: usize) -> Result<Self> {
        let axis = PhaseAxis::new(phase_bins)?;
        let offsets = Arc::new(offset_axis(offset_bins)?);
        let cells = phase_bins * offset_bins;
        Ok(PosteriorGrid2D {
            axis,
            offsets,
            density: vec![1.0 / (TAU * 2.0); cells],
        })
    }

    /// Builds a normalized grid from log-weights laid out phase-major.
    ///
    /// Entries equal to `-inf` are allowed and become zero density.
    pub fn from_log_density(phase_bins: usize, offset_bins: usize, log_weights: &[f64]) -> Result<Self> {
        let mut grid = Self::uniform(phase_bins, offset_bins)?;
        crate::error::check_len("log density", grid.density.len(), log_weights.len())?;
        let max = log_weights
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegeneratePosterior { mass: 0.0 });
        }
        for (d, &lw) in grid.density.iter_mut().zip(log_weights) {
            *d = if lw.is_nan() { 0.0 } else { (lw - max).exp() };
        }
        grid.normalize()?;
        Ok(grid)
    }

    pub fn phase_bins(&self) -> usize {
        self.axis.bins()
    }

    pub fn offset_bins(&self) -> usize {
        self.offsets.len()
    }

    pub fn phase_points(&self) -> &[f64] {
        self.axis.points()
    }

    pub fn offset_points(&self) -> &[f64] {
        &self.offsets
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn cell_area(&self) -> f64 {
        self.axis.spacing() * 2.0 / self.offsets.len() as f64
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !mass.is_finite() || mass < DEGENERATE_MASS {
            return Err(Error::DegeneratePosterior { mass });
        }
        let scale = 1.0 / mass;
        self.density.iter_mut().for_each(|d| *d *= scale);
        Ok(())
    }

    /// Marginal density over the phase (offset integrated out).
    pub fn phase_marginal(&self) -> PosteriorGrid1D {
        let dh = 2.0 / self.offsets.len() as f64;
        let density = self
            .density
            .chunks_exact(self.offsets.len())
            .map(|row| row.iter().sum::<f64>() * dh)
            .collect();
        PosteriorGrid1D {
            axis: Arc::clone(&self.axis),
            density,
            live: std::iter::once(0..self.axis.bins()).collect(),
            updates_since_rescan: 0,
        }
    }

    /// Marginal density over the offset, one value per offset bin.
    pub fn offset_marginal(&self) -> Vec<f64> {
        let nh = self.offsets.len();
        let mut out = vec![0.0; nh];
        for row in self.density.chunks_exact(nh) {
            for (o, d) in out.iter_mut().zip(row) {
                *o += d;
            }
        }
        let dphi = self.axis.spacing();
        out.iter_mut().for_each(|o| *o *= dphi);
        out
    }

    /// Mean and variance of the offset marginal.
    pub fn offset_moments(&self) -> (f64, f64) {
        let marginal = self.offset_marginal();
        let dh = 2.0 / self.offsets.len() as f64;
        let mean: f64 = marginal
            .iter()
            .zip(self.offsets.iter())
            .map(|(m, h)| m * h)
            .sum::<f64>()
            * dh;
        let var: f64 = marginal
            .iter()
            .zip(self.offsets.iter())
            .map(|(m, h)| m * (h - mean) * (h - mean))
            .sum::<f64>()
            * dh;
        (mean, var)
    }
}

fn offset_axis(bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "offset grid needs at least 2 bins, got {bins}"
        )));
    }
    let dh = 2.0 / bins as f64;
    Ok((0..bins).map(|j| -1.0 + (j as f64 + 0.5) * dh).collect())
}

impl BayesGrid for PosteriorGrid2D {
    type Point = (f64, f64);

    fn update_with<F: FnMut((f64, f64)) -> f64>(&mut self, mut likelihood: F) -> Result<()> {
        let nh = self.offsets.len();
        for (row, &phi) in self.density.chunks_exact_mut(nh).zip(self.axis.points()) {
            for (d, &h) in row.iter_mut().zip(self.offsets.iter()) {
                *d *= check_probability(likelihood((phi, h)))?;
            }
        }
        self.normalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn wp(x: f64) -> WrappedPhase {
        WrappedPhase::new(x).unwrap()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(0.0).unwrap().value(), 0.0);
        assert_abs_diff_eq!(wrap(3.0 * PI).unwrap().value(), -PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap(-1.5 * PI).unwrap().value(), 0.5 * PI, epsilon = 1e-12);
        assert_eq!(wrap(PI).unwrap().value(), -PI);
        assert!(wrap(f64::NAN).is_err());
        assert!(wrap(f64::INFINITY).is_err());
    }

    #[test]
    fn circ_diff_examples() {
        assert_abs_diff_eq!(circ_diff(wp(0.3), wp(0.1)), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(circ_diff(wp(PI - 0.1), wp(-PI + 0.1)), -0.2, epsilon = 1e-12);
        assert_eq!(circ_diff(wp(1.7), wp(1.7)), 0.0);
    }

    #[test]
    fn uniform_prior_examples() {
        let g = PosteriorGrid1D::uniform(8).unwrap();
        assert_eq!(g.bins(), 8);
        assert!(g.density().iter().all(|&d| (d - 1.0 / TAU).abs() < 1e-15));
        let g = PosteriorGrid1D::uniform(2048).unwrap();
        assert_abs_diff_eq!(g.mass(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            PosteriorGrid1D::uniform(7),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_plus_outcome_peaks_at_zero() {
        let g = PosteriorGrid1D::uniform(2048).unwrap();
        let g = bayes_update(&g, |phi| (1.0 + phi.cos()) / 2.0).unwrap();
        let (imax, _) = g
            .density()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        assert!(g.points()[imax].abs() <= g.spacing());
        assert_abs_diff_eq!(g.mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_likelihood_is_identity() {
        let g = PosteriorGrid1D::from_fn(256, |p| 1.0 + 0.5 * (2.0 * p).sin()).unwrap();
        let h = bayes_update(&g, |_| 1.0).unwrap();
        for (a, b) in g.density().iter().zip(h.density()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_updates_match_explicit_product() {
        let lik = |p: f64| (1.0 + p.cos()) / 2.0;
        let g = PosteriorGrid1D::uniform(512).unwrap();
        let g = bayes_update(&bayes_update(&g, lik).unwrap(), lik).unwrap();
        // independent route: square the likelihood and normalize by hand
        let raw: Vec<f64> = g.points().iter().map(|&p| lik(p).powi(2)).collect();
        let z: f64 = raw.iter().sum::<f64>() * g.spacing();
        for (d, r) in g.density().iter().zip(&raw) {
            assert_abs_diff_eq!(*d, r / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn likelihood_outside_unit_interval_rejected() {
        let g = PosteriorGrid1D::uniform(16).unwrap();
        assert!(bayes_update(&g, |_| 1.5).is_err());
    }

    #[test]
    fn zero_likelihood_is_degenerate() {
        let g = PosteriorGrid1D::uniform(16).unwrap();
        assert!(matches!(
            bayes_update(&g, |_| 0.0),
            Err(Error::DegeneratePosterior { .. })
        ));
    }

    #[test]
    fn moments_of_one_plus_cos() {
        let g = PosteriorGrid1D::from_fn(2048, |p| 1.0 + p.cos()).unwrap();
        let m = g.moments();
        assert_abs_diff_eq!(m.mean.value(), 0.0, epsilon = 1e-12);
        // (1/2π)∫ φ²(1 + cos φ) dφ = π²/3 - 2
        assert_abs_diff_eq!(m.variance, PI * PI / 3.0 - 2.0, epsilon = 1e-5);
        assert!(!m.diffuse);
    }

    #[test]
    fn moments_of_uniform_are_diffuse() {
        let m = PosteriorGrid1D::uniform(2048).unwrap().moments();
        assert!(m.diffuse);
        assert_eq!(m.mean.value(), 0.0);
        assert_abs_diff_eq!(m.variance, PI * PI / 3.0, epsilon = 1e-5);
    }

    #[test]
    fn moments_of_narrow_wrapped_gaussian() {
        let (mu, sigma) = (3.0_f64, 0.1_f64);
        let g = PosteriorGrid1D::from_fn(2048, |p| {
            (-3..=3)
                .map(|k| {
                    let x = p - mu + TAU * k as f64;
                    (-x * x / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        })
        .unwrap();
        let m = g.moments();
        assert_abs_diff_eq!(m.mean.value(), 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m.variance, 0.01, epsilon = 1e-5);
    }

    #[test]
    fn fused_cosine_update_matches_generic() {
        let g = PosteriorGrid1D::from_fn(512, |p| 1.0 + 0.3 * p.sin()).unwrap();
        let theta = 0.77;
        let generic = bayes_update(&g, |p| (4.0 - (p - theta).cos()) / 8.0).unwrap();
        let mut fused = g.clone();
        let (c, s) = fused.update_cosine(0.5, -0.125, theta).unwrap();
        for (a, b) in generic.density().iter().zip(fused.density()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let (c2, s2) = fused.trig_moment();
        assert_abs_diff_eq!(c, c2, epsilon = 1e-12);
        assert_abs_diff_eq!(s, s2, epsilon = 1e-12);
    }

    #[test]
    fn long_fused_run_matches_generic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut generic = PosteriorGrid1D::uniform(1024).unwrap();
        let mut fused = generic.clone();
        for _ in 0..600 {
            let theta: f64 = rng.random_range(-PI..PI);
            let a = if rng.random::<bool>() { 0.5 } else { -0.5 };
            generic.update_with(|p| 0.5 + a * (p - theta).cos()).unwrap();
            fused.update_cosine(0.5, a, theta).unwrap();
        }
        // the posterior is concentrated, so most bins have been dropped
        let live: usize = fused.live.iter().map(|r| r.len()).sum();
        assert!(live < 512, "{live}");
        for (x, y) in generic.density().iter().zip(fused.density()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9 * x.max(1.0));
        }
        let (m1, m2) = (generic.moments(), fused.moments());
        assert_abs_diff_eq!(m1.mean.value(), m2.mean.value(), epsilon = 1e-12);
        assert_abs_diff_eq!(m1.variance, m2.variance, epsilon = 1e-12);
    }

    #[test]
    fn grid_2d_uniform_and_update() {
        let g = PosteriorGrid2D::uniform(64, 16).unwrap();
        assert_abs_diff_eq!(g.mass(), 1.0, epsilon = 1e-12);
        let g = bayes_update(&g, |(phi, h)| (2.0 + h + phi.cos()) / 4.0).unwrap();
        assert_abs_diff_eq!(g.mass(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.phase_marginal().mass(), 1.0, epsilon = 1e-12);
        let (hm, _) = g.offset_moments();
        assert!(hm > 0.0);
    }

    #[test]
    fn grid_2d_log_density_matches_product() {
        let lik = |phi: f64, h: f64| (2.0 + h + (phi - 0.4).cos()) / 4.0;
        let mut direct = PosteriorGrid2D::uniform(32, 8).unwrap();
        for _ in 0..5 {
            direct.update_with(|(p, h)| lik(p, h)).unwrap();
        }
        let mut logs = Vec::new();
        for &p in direct.phase_points() {
            for &h in direct.offset_points() {
                logs.push(5.0 * lik(p, h).ln());
            }
        }
        let via_log = PosteriorGrid2D::from_log_density(32, 8, &logs).unwrap();
        for (a, b) in direct.density().iter().zip(via_log.density()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_in_range(x in -1e4f64..1e4) {
            let w = wrap(x).unwrap().value();
            prop_assert!((-PI..PI).contains(&w));
            prop_assert_eq!(wrap(w).unwrap().value(), w);
            let k = ((x - w) / TAU).round();
            prop_assert!((x - w - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn circ_diff_in_range(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let d = circ_diff(wp(a), wp(b));
            prop_assert!((-PI..PI).contains(&d));
            prop_assert!((wrap_angle(d - (a - b))).abs() < 1e-9);
        }

        #[test]
        fn updates_keep_unit_mass_and_commute(
            t1 in -PI..PI, t2 in -PI..PI,
            a1 in 0.0f64..1.0, a2 in 0.0f64..1.0,
            s1 in prop::bool::ANY, s2 in prop::bool::ANY,
        ) {
            let sgn = |s: bool| if s { 1.0 } else { -1.0 };
            let l1 = move |p: f64| (1.0 + sgn(s1) * a1 * (p - t1).cos()) / 2.0;
            let l2 = move |p: f64| (1.0 + sgn(s2) * a2 * (p - t2).cos()) / 2.0;
            let g = PosteriorGrid1D::uniform(256).unwrap();
            let ab = bayes_update(&bayes_update(&g, l1).unwrap(), l2).unwrap();
            let ba = bayes_update(&bayes_update(&g, l2).unwrap(), l1).unwrap();
            prop_assert!((ab.mass() - 1.0).abs() < 1e-12);
            prop_assert!(ab.density().iter().all(|&d| d >= 0.0));
            for (x, y) in ab.density().iter().zip(ba.density()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn circular_shift_moves_mean_only(shift in 0usize..512, mu in -3.0f64..3.0) {
            let g = PosteriorGrid1D::from_fn(512, |p| (2.0 * (p - mu).cos()).exp()).unwrap();
            let mut rolled = g.density().to_vec();
            rolled.rotate_right(shift);
            let h = PosteriorGrid1D::from_weights(rolled).unwrap();
            let (m0, m1) = (g.moments(), h.moments());
            let delta = shift as f64 * g.spacing();
            prop_assert!(wrap_angle(m1.mean.value() - m0.mean.value() - delta).abs() < 1e-9);
            prop_assert!((m1.variance - m0.variance).abs() < 1e-9);
        }
    }
}
