//! Common-random-number calibration sample and the expectations built from it.
//!
//! One sample of capacity sets is drawn per parameter point and reused for
//! every candidate threshold, so each fixed-point residual is a deterministic
//! step function of the threshold.

use std::ops::{Add, Mul};

use rand::Rng;

use crate::channel::{gains_at_quantiles, mode_capacities, CapacitySet, DiscreteGains, FadingModel, NodePowers};
use crate::error::{invalid, Result};
use crate::policy::metrics;
use crate::queues::Mode;

/// Smallest Monte Carlo calibration sample accepted.
pub const MIN_CALIBRATION_SAMPLES: usize = 10_000;

/// Relative tolerance under which two selection metrics count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[inline]
pub(crate) fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Weighted capacity sets standing in for the channel distribution.
#[derive(Debug, Clone)]
pub struct CalibrationSample {
    caps: Vec<CapacitySet>,
    /// `None` means equal weights.
    weights: Option<Vec<f64>>,
}

impl CalibrationSample {
    /// Draws `samples` slots from `model`.
    pub fn draw<R: Rng + ?Sized>(
        model: &FadingModel,
        powers: &NodePowers,
        samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if samples < MIN_CALIBRATION_SAMPLES {
            return Err(invalid(format!(
                "calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {samples}"
            )));
        }
        let caps = (0..samples).map(|_| mode_capacities(&model.sample(rng), powers)).collect();
        Ok(Self { caps, weights: None })
    }

    /// Jittered-grid sample of Rayleigh gains.
    ///
    /// The unit square of the two gain quantiles is cut into `k x k` equal
    /// cells, `k = floor(sqrt(samples))`, with one uniform point per cell; the
    /// remaining `samples - k^2` points are drawn without stratification. The
    /// estimates stay unbiased with much smaller spread than plain draws.
    /// Other fading models fall back to [`CalibrationSample::draw`].
    pub fn stratified<R: Rng + ?Sized>(
        model: &FadingModel,
        powers: &NodePowers,
        samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let FadingModel::Rayleigh(stats) = model else {
            return Self::draw(model, powers, samples, rng);
        };
        if samples < MIN_CALIBRATION_SAMPLES {
            return Err(invalid(format!(
                "calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {samples}"
            )));
        }
        let k = (samples as f64).sqrt() as usize;
        let k = if (k + 1) * (k + 1) <= samples { k + 1 } else { k };
        let kf = k as f64;
        let mut caps = Vec::with_capacity(samples);
        for i in 0..k {
            for j in 0..k {
                let u1 = ((i as f64 + rng.gen::<f64>()) / kf).min(1.0 - f64::EPSILON);
                let u2 = ((j as f64 + rng.gen::<f64>()) / kf).min(1.0 - f64::EPSILON);
                caps.push(mode_capacities(&gains_at_quantiles(stats, u1, u2), powers));
            }
        }
        while caps.len() < samples {
            caps.push(mode_capacities(&model.sample(rng), powers));
        }
        Ok(Self { caps, weights: None })
    }

    /// Exact distribution of a finite gain alphabet.
    pub fn exact(gains: &DiscreteGains, powers: &NodePowers) -> Self {
        let (caps, weights) = gains
            .outcomes()
            .into_iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(d, p)| (mode_capacities(&d, powers), p))
            .unzip();
        Self { caps, weights: Some(weights) }
    }

    pub fn len(&self) -> usize {
        self.caps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caps.is_empty()
    }

    pub(super) fn weighted(&self) -> impl Iterator<Item = (&CapacitySet, f64)> + '_ {
        let uniform = 1.0 / self.caps.len() as f64;
        self.caps.iter().enumerate().map(move |(i, c)| (c, self.weights.as_ref().map_or(uniform, |w| w[i])))
    }

    /// Unconditional means, with the multiple-access split at `t`.
    pub fn means(&self, t: f64) -> Moments {
        self.weighted().fold(Moments::default(), |acc, (c, w)| acc + Moments::of(c, t) * w)
    }

    /// Splits the sample by the indicator `q` of `rule`.
    pub fn expectations(&self, rule: &QRule) -> ExpectationBundle {
        let mut bundle = ExpectationBundle::default();
        for (c, w) in self.weighted() {
            bundle.accumulate(rule, c, w);
        }
        bundle
    }

    /// Long-run untruncated rates of the argmax policy restricted to `eligible`
    /// modes, ties going to the lowest index.
    pub fn flows(&self, mu1: f64, mu2: f64, t: f64, eligible: [bool; 6]) -> Flows {
        let mut flows = Flows::default();
        for (c, w) in self.weighted() {
            let lambda = metrics(c, mu1, mu2, t);
            let mut best: Option<(usize, f64)> = None;
            for k in 0..6 {
                if eligible[k] && best.is_none_or(|(_, b)| lambda[k] > b && !tied(lambda[k], b)) {
                    best = Some((k, lambda[k]));
                }
            }
            let Some((k, _)) = best else { continue };
            match Mode::ALL[k] {
                Mode::M1 => flows.r1r += w * c.c1r,
                Mode::M2 => flows.r2r += w * c.c2r,
                Mode::M3 => {
                    flows.r1r += w * c.c12r(t);
                    flows.r2r += w * c.c21r(t);
                }
                Mode::M4 => flows.rr1 += w * c.cr1,
                Mode::M5 => flows.rr2 += w * c.cr2,
                Mode::M6 => {
                    flows.rr1 += w * c.cr1;
                    flows.rr2 += w * c.cr2;
                }
            }
        }
        flows
    }
}

/// Weighted means of the per-slot capacities over some subset of slots.
///
/// `mass` is the probability of the subset; the other fields are
/// `E{1_subset * X}`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub mass: f64,
    pub c1r: f64,
    pub c2r: f64,
    pub cr: f64,
    pub cr1: f64,
    pub cr2: f64,
    pub c12r: f64,
    pub c21r: f64,
}

impl Moments {
    fn of(c: &CapacitySet, t: f64) -> Self {
        Self { mass: 1.0, c1r: c.c1r, c2r: c.c2r, cr: c.cr, cr1: c.cr1, cr2: c.cr2, c12r: c.c12r(t), c21r: c.c21r(t) }
    }
}

impl Add for Moments {
    type Output = Moments;
    fn add(self, o: Moments) -> Moments {
        Moments {
            mass: self.mass + o.mass,
            c1r: self.c1r + o.c1r,
            c2r: self.c2r + o.c2r,
            cr: self.cr + o.cr,
            cr1: self.cr1 + o.cr1,
            cr2: self.cr2 + o.cr2,
            c12r: self.c12r + o.c12r,
            c21r: self.c21r + o.c21r,
        }
    }
}

impl Mul<f64> for Moments {
    type Output = Moments;
    fn mul(self, w: f64) -> Moments {
        Moments {
            mass: self.mass * w,
            c1r: self.c1r * w,
            c2r: self.c2r * w,
            cr: self.cr * w,
            cr1: self.cr1 * w,
            cr2: self.cr2 * w,
            c12r: self.c12r * w,
            c21r: self.c21r * w,
        }
    }
}

/// Which side of the multiple-access/broadcast comparison sets `q(i) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QSide {
    /// `q = 1` when `Lambda3 >= Lambda6`.
    MultipleAccess,
    /// `q = 1` when `Lambda3 <= Lambda6`.
    Broadcast,
}

impl QSide {
    pub fn mode(self) -> Mode {
        match self {
            QSide::MultipleAccess => Mode::M3,
            QSide::Broadcast => Mode::M6,
        }
    }
}

/// Binary split `q(i)` of slots by comparing the multiple-access and
/// broadcast metrics at fixed thresholds and time-share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QRule {
    pub mu1: f64,
    pub mu2: f64,
    pub t: f64,
    pub side: QSide,
}

enum QClass {
    Selected,
    Tied,
    Rest,
}

impl QRule {
    fn classify(&self, c: &CapacitySet) -> QClass {
        let ma = (1.0 - self.mu1) * c.c12r(self.t) + (1.0 - self.mu2) * c.c21r(self.t);
        let bc = self.mu1 * c.cr2 + self.mu2 * c.cr1;
        if tied(ma, bc) {
            return QClass::Tied;
        }
        match (self.side, ma > bc) {
            (QSide::MultipleAccess, true) | (QSide::Broadcast, false) => QClass::Selected,
            _ => QClass::Rest,
        }
    }
}

/// Moments of the slots with `q = 1`, with metrics tied, and with `q = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExpectationBundle {
    pub selected: Moments,
    pub tied: Moments,
    pub rest: Moments,
}

impl ExpectationBundle {
    fn accumulate(&mut self, rule: &QRule, c: &CapacitySet, w: f64) {
        let m = Moments::of(c, rule.t) * w;
        match rule.classify(c) {
            QClass::Selected => self.selected = self.selected + m,
            QClass::Tied => self.tied = self.tied + m,
            QClass::Rest => self.rest = self.rest + m,
        }
    }

    /// `(E{q X}, E{(1 - q) X})` when a fraction `tie_share` of tied slots
    /// is assigned `q = 1`.
    pub fn split(&self, tie_share: f64) -> (Moments, Moments) {
        (self.selected + self.tied * tie_share, self.rest + self.tied * (1.0 - tie_share))
    }

    pub fn total(&self) -> Moments {
        self.selected + self.tied + self.rest
    }
}

/// Expected untruncated rates into and out of the relay.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Flows {
    pub r1r: f64,
    pub r2r: f64,
    /// relay -> user 1 capacity actually scheduled
    pub rr1: f64,
    /// relay -> user 2 capacity actually scheduled
    pub rr2: f64,
}

impl Flows {
    /// Total in minus total out.
    pub fn balance(&self) -> f64 {
        self.r1r + self.r2r - self.rr1 - self.rr2
    }

    /// Direction 1 -> 2: into B1 minus out of B1.
    pub fn residual_c1(&self) -> f64 {
        self.r1r - self.rr2
    }

    /// Direction 2 -> 1: into B2 minus out of B2.
    pub fn residual_c2(&self) -> f64 {
        self.r2r - self.rr1
    }
}

/// Monte Carlo estimate of every expectation conditioned on the split `rule`.
///
/// Streams the draws instead of storing them; use [`CalibrationSample`] when
/// several rules must share one sample.
pub fn estimate_stat_expectations<R: Rng + ?Sized>(
    model: &FadingModel,
    powers: &NodePowers,
    rule: &QRule,
    samples: usize,
    rng: &mut R,
) -> Result<ExpectationBundle> {
    if samples < MIN_CALIBRATION_SAMPLES {
        return Err(invalid(format!("calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {samples}")));
    }
    let w = 1.0 / samples as f64;
    let mut bundle = ExpectationBundle::default();
    for _ in 0..samples {
        bundle.accumulate(rule, &mode_capacities(&model.sample(rng), powers), w);
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelStats;
    use crate::rng::{stream, Stream};

    fn model(o1: f64, o2: f64) -> FadingModel {
        FadingModel::Rayleigh(ChannelStats::new(o1, o2).unwrap())
    }

    #[test]
    fn rejects_small_samples() {
        let p = NodePowers::new(1.0, 1.0, 1.0).unwrap();
        assert!(CalibrationSample::draw(&model(1.0, 1.0), &p, 9_999, &mut stream(1, Stream::Calibration)).is_err());
    }

    #[test]
    fn symmetric_means_agree() {
        let p = NodePowers::new(10.0, 10.0, 10.0).unwrap();
        let n = 100_000;
        let s = CalibrationSample::draw(&model(1.0, 1.0), &p, n, &mut stream(2, Stream::Calibration)).unwrap();
        let m = s.means(0.5);
        // standard error of the difference of two independent means
        let sd = {
            let var = s.caps.iter().map(|c| (c.c1r - m.c1r).powi(2)).sum::<f64>() / n as f64;
            (2.0 * var / n as f64).sqrt()
        };
        assert!((m.c1r - m.c2r).abs() < 3.0 * sd, "{} vs {}", m.c1r, m.c2r);
        assert!((m.mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bundle_partitions_the_sample() {
        let p = NodePowers::new(10.0, 10.0, 10.0).unwrap();
        let s = CalibrationSample::draw(&model(2.0, 0.5), &p, 20_000, &mut stream(3, Stream::Calibration)).unwrap();
        let rule = QRule { mu1: 0.4, mu2: 0.6, t: 0.3, side: QSide::MultipleAccess };
        let b = s.expectations(&rule);
        let all = s.means(0.3);
        let tot = b.total();
        assert!((tot.mass - 1.0).abs() < 1e-12);
        assert!((tot.cr - all.cr).abs() < 1e-12);
        let (q, nq) = b.split(0.5);
        assert!((q.mass + nq.mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_alphabet_matches_finite_sum() {
        let gains = DiscreteGains::new(vec![(0.2, 0.3), (1.5, 0.7)], vec![(0.5, 0.6), (3.0, 0.4)]).unwrap();
        let powers = NodePowers::new(4.0, 2.0, 3.0).unwrap();
        let rule = QRule { mu1: 0.5, mu2: 0.5, t: 0.0, side: QSide::MultipleAccess };
        let mc = estimate_stat_expectations(
            &FadingModel::Discrete(gains.clone()),
            &powers,
            &rule,
            10_000_000,
            &mut stream(4, Stream::Calibration),
        )
        .unwrap();
        // finite sum written out independently of the sample machinery
        let c = |x: f64| (1.0 + x).log2();
        let mut exact_q_cr = 0.0;
        let mut exact_cr2 = 0.0;
        for &(g1, p1) in &[(0.2, 0.3), (1.5, 0.7)] {
            for &(g2, p2) in &[(0.5, 0.6), (3.0, 0.4)] {
                let cr = c(4.0 * g1 + 2.0 * g2);
                let (cr1, cr2) = (c(3.0 * g1), c(3.0 * g2));
                exact_cr2 += p1 * p2 * cr2;
                if 0.5 * cr >= 0.5 * (cr1 + cr2) {
                    exact_q_cr += p1 * p2 * cr;
                }
            }
        }
        let (q, _) = mc.split(1.0);
        assert!((q.cr - exact_q_cr).abs() < 1e-3, "{} vs {exact_q_cr}", q.cr);
        assert!((mc.total().cr2 - exact_cr2).abs() < 1e-3);

        let exact = CalibrationSample::exact(&gains, &powers).expectations(&rule);
        assert!((exact.split(1.0).0.cr - exact_q_cr).abs() < 1e-12);
        assert!((exact.total().cr2 - exact_cr2).abs() < 1e-12);
    }
}
