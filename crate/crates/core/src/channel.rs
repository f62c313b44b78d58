//! Reciprocal block-fading links and the capacity of every transmission mode.
//!
//! Powers and gains are linear throughout; noise variance is one, so
//! `P * S` is the receive SNR of a link. Decibels appear only in the
//! constructors named `*_db`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `log2(1 + x)` in bits/symbol.
pub fn capacity(x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(invalid(format!("capacity of SNR {x}")));
    }
    Ok(cap(x))
}

#[inline]
pub(crate) fn cap(x: f64) -> f64 {
    x.ln_1p() / std::f64::consts::LN_2
}

pub fn db_to_linear(x_db: f64) -> Result<f64> {
    if !x_db.is_finite() {
        return Err(invalid(format!("non-finite decibel value {x_db}")));
    }
    Ok(10f64.powf(x_db / 10.0))
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Transmit powers of user 1, user 2 and the relay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePowers {
    p1: f64,
    p2: f64,
    pr: f64,
}

impl NodePowers {
    pub fn new(p1: f64, p2: f64, pr: f64) -> Result<Self> {
        Ok(Self { p1: positive("p1", p1)?, p2: positive("p2", p2)?, pr: positive("pr", pr)? })
    }

    pub fn from_db(p1_db: f64, p2_db: f64, pr_db: f64) -> Result<Self> {
        Self::new(db_to_linear(p1_db)?, db_to_linear(p2_db)?, db_to_linear(pr_db)?)
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }
    pub fn p2(&self) -> f64 {
        self.p2
    }
    pub fn pr(&self) -> f64 {
        self.pr
    }
}

/// Mean squared gains of the user 1 and user 2 links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    omega1: f64,
    omega2: f64,
}

impl ChannelStats {
    pub fn new(omega1: f64, omega2: f64) -> Result<Self> {
        Ok(Self { omega1: positive("omega1", omega1)?, omega2: positive("omega2", omega2)? })
    }

    pub fn from_db(omega1_db: f64, omega2_db: f64) -> Result<Self> {
        Self::new(db_to_linear(omega1_db)?, db_to_linear(omega2_db)?)
    }

    pub fn omega1(&self) -> f64 {
        self.omega1
    }
    pub fn omega2(&self) -> f64 {
        self.omega2
    }
}

/// Squared channel gains of one slot. Reciprocity means the same pair serves
/// uplink and downlink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraw {
    s1: f64,
    s2: f64,
}

impl ChannelDraw {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !(s1.is_finite() && s2.is_finite() && s1 >= 0.0 && s2 >= 0.0) {
            return Err(invalid(format!("gains must be finite and non-negative, got ({s1}, {s2})")));
        }
        Ok(Self { s1, s2 })
    }

    pub fn s1(&self) -> f64 {
        self.s1
    }
    pub fn s2(&self) -> f64 {
        self.s2
    }
}

/// Rayleigh block fading: exponential gains, one uniform per gain.
pub fn sample_gains<R: Rng + ?Sized>(rng: &mut R, stats: &ChannelStats) -> ChannelDraw {
    ChannelDraw { s1: exponential(rng, stats.omega1), s2: exponential(rng, stats.omega2) }
}

#[inline]
fn exponential<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    exponential_quantile(rng.gen::<f64>(), mean)
}

// For u in [0, 1), 1 - u is in (0, 1] and its logarithm is finite.
#[inline]
fn exponential_quantile(u: f64, mean: f64) -> f64 {
    -mean * (1.0 - u).ln()
}

/// Rayleigh gains at quantiles `(u1, u2)`, each in `[0, 1)`.
pub fn gains_at_quantiles(stats: &ChannelStats, u1: f64, u2: f64) -> ChannelDraw {
    ChannelDraw { s1: exponential_quantile(u1, stats.omega1), s2: exponential_quantile(u2, stats.omega2) }
}

/// A finite gain alphabet with probabilities, for each link independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGains {
    s1: Vec<(f64, f64)>,
    s2: Vec<(f64, f64)>,
}

impl DiscreteGains {
    /// Each entry is `(gain, probability)`; probabilities of a link must sum to one.
    pub fn new(s1: Vec<(f64, f64)>, s2: Vec<(f64, f64)>) -> Result<Self> {
        for (name, alphabet) in [("s1", &s1), ("s2", &s2)] {
            if alphabet.is_empty() {
                return Err(invalid(format!("{name} alphabet is empty")));
            }
            let mut total = 0.0;
            for &(g, p) in alphabet {
                ChannelDraw::new(g, 0.0)?;
                if !(p.is_finite() && p >= 0.0) {
                    return Err(invalid(format!("{name} probability {p} is not valid")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("{name} probabilities sum to {total}")));
            }
        }
        Ok(Self { s1, s2 })
    }

    /// Every joint outcome with its probability.
    pub fn outcomes(&self) -> Vec<(ChannelDraw, f64)> {
        let mut out = Vec::with_capacity(self.s1.len() * self.s2.len());
        for &(g1, p1) in &self.s1 {
            for &(g2, p2) in &self.s2 {
                out.push((ChannelDraw { s1: g1, s2: g2 }, p1 * p2));
            }
        }
        out
    }

    fn pick<R: Rng + ?Sized>(rng: &mut R, alphabet: &[(f64, f64)]) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(g, p) in alphabet {
            acc += p;
            if u < acc {
                return g;
            }
        }
        alphabet[alphabet.len() - 1].0
    }
}

/// Distribution of the per-slot gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FadingModel {
    Rayleigh(ChannelStats),
    Discrete(DiscreteGains),
}

impl FadingModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelDraw {
        match self {
            FadingModel::Rayleigh(stats) => sample_gains(rng, stats),
            FadingModel::Discrete(d) => {
                ChannelDraw { s1: DiscreteGains::pick(rng, &d.s1), s2: DiscreteGains::pick(rng, &d.s2) }
            }
        }
    }
}

impl From<ChannelStats> for FadingModel {
    fn from(stats: ChannelStats) -> Self {
        FadingModel::Rayleigh(stats)
    }
}

/// Instantaneous capacities of all links and composite modes in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CapacitySet {
    /// user 1 -> relay
    pub c1r: f64,
    /// user 2 -> relay
    pub c2r: f64,
    /// multiple-access sum rate
    pub cr: f64,
    /// relay -> user 1
    pub cr1: f64,
    /// relay -> user 2
    pub cr2: f64,
    /// user 1 decoded first, user 2 treated as noise
    pub c1r_first: f64,
    /// user 2 decoded first, user 1 treated as noise
    pub c2r_first: f64,
}

impl CapacitySet {
    /// Rate of user 1 in the multiple-access mode with time-share `t`.
    ///
    /// During the `t` fraction the relay decodes user 2 first, so user 1 sees
    /// an interference-free channel; during the rest user 1 is decoded first.
    #[inline]
    pub fn c12r(&self, t: f64) -> f64 {
        t * self.c1r + (1.0 - t) * self.c1r_first
    }

    /// Rate of user 2 in the multiple-access mode with time-share `t`.
    #[inline]
    pub fn c21r(&self, t: f64) -> f64 {
        (1.0 - t) * self.c2r + t * self.c2r_first
    }
}

/// Capacities of every mode for one channel draw.
pub fn mode_capacities(draw: &ChannelDraw, powers: &NodePowers) -> CapacitySet {
    let snr1 = powers.p1 * draw.s1;
    let snr2 = powers.p2 * draw.s2;
    CapacitySet {
        c1r: cap(snr1),
        c2r: cap(snr2),
        cr: cap(snr1 + snr2),
        cr1: cap(powers.pr * draw.s1),
        cr2: cap(powers.pr * draw.s2),
        c1r_first: cap(snr1 / (1.0 + snr2)),
        c2r_first: cap(snr2 / (1.0 + snr1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn capacity_examples() {
        assert_eq!(capacity(0.0).unwrap(), 0.0);
        assert!((capacity(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((capacity(3.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(capacity(-1e-9).is_err());
        assert!(capacity(f64::NAN).is_err());
        assert!(capacity(f64::INFINITY).is_err());
    }

    #[test]
    fn db_examples() {
        assert_eq!(db_to_linear(0.0).unwrap(), 1.0);
        assert!((db_to_linear(10.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((db_to_linear(-10.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(db_to_linear(f64::NAN).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ChannelStats::new(0.0, 1.0).is_err());
        assert!(ChannelStats::new(1.0, -1.0).is_err());
        assert!(NodePowers::new(1.0, 0.0, 1.0).is_err());
        assert!(ChannelDraw::new(-0.1, 1.0).is_err());
        assert!(DiscreteGains::new(vec![(1.0, 0.5)], vec![(1.0, 1.0)]).is_err());
    }

    #[test]
    fn zero_gains_give_zero_capacities() {
        let caps = mode_capacities(&ChannelDraw::new(0.0, 0.0).unwrap(), &NodePowers::new(3.0, 4.0, 5.0).unwrap());
        for v in [caps.c1r, caps.c2r, caps.cr, caps.cr1, caps.cr2, caps.c12r(0.3), caps.c21r(0.3)] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn unit_gains_hand_values() {
        let caps = mode_capacities(&ChannelDraw::new(1.0, 1.0).unwrap(), &NodePowers::new(1.0, 1.0, 1.0).unwrap());
        // log2(3) by hand
        assert!((caps.cr - 1.584_962_500_721_156).abs() < 1e-12);
        // user 1 first: log2(1 + 1/2), user 2 clean: 1
        assert!((caps.c12r(0.5) - 0.5 * (1.0 + 0.584_962_500_721_156)).abs() < 1e-12);
        assert!((caps.c12r(0.5) + caps.c21r(0.5) - caps.cr).abs() < 1e-12);
    }

    #[test]
    fn time_share_endpoints() {
        let powers = NodePowers::new(2.0, 3.0, 1.5).unwrap();
        let draw = ChannelDraw::new(0.7, 1.9).unwrap();
        let caps = mode_capacities(&draw, &powers);
        assert_eq!(caps.c12r(1.0), caps.c1r);
        assert_eq!(caps.c21r(0.0), caps.c2r);
        let expected = (1.0_f64 + 3.0 * 1.9 / (1.0 + 2.0 * 0.7)).log2();
        assert!((caps.c21r(1.0) - expected).abs() < 1e-12);
        assert!(caps.cr <= caps.c1r + caps.c2r);
    }

    #[test]
    fn reciprocity_uses_one_draw() {
        let powers = NodePowers::new(2.0, 2.0, 2.0).unwrap();
        let caps = mode_capacities(&ChannelDraw::new(0.8, 0.1).unwrap(), &powers);
        assert_eq!(caps.c1r, caps.cr1);
        assert_eq!(caps.c2r, caps.cr2);
    }

    #[test]
    fn exponential_sample_mean() {
        let stats = ChannelStats::new(1.0, 1.0).unwrap();
        let mut rng = stream(11, Stream::Channel);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_gains(&mut rng, &stats).s1()).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn fixed_seed_repeats() {
        let model = FadingModel::Rayleigh(ChannelStats::new(0.5, 2.0).unwrap());
        let a: Vec<_> = {
            let mut rng = stream(3, Stream::Channel);
            (0..100).map(|_| model.sample(&mut rng)).collect()
        };
        let mut rng = stream(3, Stream::Channel);
        let b: Vec<_> = (0..100).map(|_| model.sample(&mut rng)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn discrete_model_frequencies() {
        let d = DiscreteGains::new(vec![(0.5, 0.25), (2.0, 0.75)], vec![(1.0, 1.0)]).unwrap();
        let model = FadingModel::Discrete(d);
        let mut rng = stream(5, Stream::Channel);
        let n = 200_000;
        let hits = (0..n).filter(|_| model.sample(&mut rng).s1() == 0.5).count();
        assert!((hits as f64 / n as f64 - 0.25).abs() < 0.005);
    }

    proptest! {
        #[test]
        fn mac_split_sums_to_sum_rate(
            s1 in 0.0f64..50.0, s2 in 0.0f64..50.0,
            p1 in 0.01f64..100.0, p2 in 0.01f64..100.0,
        ) {
            let caps = mode_capacities(&ChannelDraw::new(s1, s2).unwrap(), &NodePowers::new(p1, p2, 1.0).unwrap());
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let sum = caps.c12r(t) + caps.c21r(t);
                prop_assert!((sum - caps.cr).abs() <= 1e-12 * caps.cr.max(1e-300));
            }
        }

        #[test]
        fn capacity_is_monotone(x in 0.0f64..1e6, y in 0.0f64..1e6) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(capacity(lo).unwrap() <= capacity(hi).unwrap());
        }
    }
}
