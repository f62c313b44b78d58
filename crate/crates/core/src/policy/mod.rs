//! Sum-rate-optimal mode selection.
//!
//! Each slot, the policy scores every mode with a threshold-weighted capacity
//! (the selection metric) and picks the best mode among those its indicator
//! rule allows. The thresholds, time-share, SNR region and coin probabilities
//! depend only on channel statistics and are calibrated offline by
//! [`classify_and_calibrate`].

mod calibrate;
mod sample;
mod threshold;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::CapacitySet;
use crate::error::{invalid, Result};
use crate::queues::Mode;

pub use calibrate::{
    calibrate_on, calibrate_three_mode, classify_and_calibrate, policy_flows, solve_region0, solve_threshold_1d,
    Calibration, CalibrationReport, PowerRelation, Region0, RegionTest, ThreeModeParams, ThresholdCase,
    ThresholdSolution,
};
pub use sample::{
    estimate_stat_expectations, CalibrationSample, ExpectationBundle, Flows, Moments, QRule, QSide,
    MIN_CALIBRATION_SAMPLES, TIE_TOLERANCE,
};
pub use threshold::{bisect_decreasing, solve_nested, Bisection, NestedSolution, BISECTION_MAX_ITER, RESIDUAL_TOL};

use sample::tied;

/// Statistical operating regime of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SnrRegion {
    /// Comparable links: only multiple access and broadcast are used.
    R0,
    /// User 1 link much stronger: point-to-point modes of user 2 also used.
    R1,
    /// User 2 link much stronger: point-to-point modes of user 1 also used.
    R2,
}

impl fmt::Display for SnrRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SnrRegion::R0 => "R0",
            SnrRegion::R1 => "R1",
            SnrRegion::R2 => "R2",
        };
        f.write_str(s)
    }
}

/// How the per-slot indicators are formed from coin outcomes.
///
/// The `*UplinkSplit` rules apply when the user's power exceeds the relay
/// power, `*DownlinkSplit` when it is below, `*EqualPower` when they match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorRule {
    /// Only M3 and M6 are candidates.
    MultipleAccessBroadcast,
    /// `I3 = 1 - I2 = X1`, `I6 = 1`.
    R1UplinkSplit,
    /// `I3 = 1`, `I6 = 1 - I5 = X2`.
    R1DownlinkSplit,
    /// `I2 = X3(1-X4)`, `I3 = X3 X4`, `I5 = (1-X3)(1-X5)`, `I6 = (1-X3) X5`.
    R1EqualPower,
    /// `I3 = 1 - I1 = X1`, `I6 = 1`.
    R2UplinkSplit,
    /// `I3 = 1`, `I6 = 1 - I4 = X2`.
    R2DownlinkSplit,
    /// `I1 = X3(1-X4)`, `I3 = X3 X4`, `I4 = (1-X3)(1-X5)`, `I6 = (1-X3) X5`.
    R2EqualPower,
}

impl IndicatorRule {
    pub fn region(self) -> SnrRegion {
        match self {
            IndicatorRule::MultipleAccessBroadcast => SnrRegion::R0,
            IndicatorRule::R1UplinkSplit | IndicatorRule::R1DownlinkSplit | IndicatorRule::R1EqualPower => {
                SnrRegion::R1
            }
            IndicatorRule::R2UplinkSplit | IndicatorRule::R2DownlinkSplit | IndicatorRule::R2EqualPower => {
                SnrRegion::R2
            }
        }
    }

    /// Coins `X1..X5` this rule reads.
    pub fn active_coins(self) -> [bool; 5] {
        match self {
            IndicatorRule::MultipleAccessBroadcast => [false; 5],
            IndicatorRule::R1UplinkSplit | IndicatorRule::R2UplinkSplit => [true, false, false, false, false],
            IndicatorRule::R1DownlinkSplit | IndicatorRule::R2DownlinkSplit => [false, true, false, false, false],
            IndicatorRule::R1EqualPower | IndicatorRule::R2EqualPower => [false, false, true, true, true],
        }
    }

    /// Mode favoured by the tie coin: the `q = 1` side of the threshold split.
    pub fn tie_mode(self) -> Option<Mode> {
        match self {
            IndicatorRule::MultipleAccessBroadcast
            | IndicatorRule::R1DownlinkSplit
            | IndicatorRule::R2DownlinkSplit => Some(Mode::M3),
            IndicatorRule::R1UplinkSplit | IndicatorRule::R2UplinkSplit => Some(Mode::M6),
            IndicatorRule::R1EqualPower | IndicatorRule::R2EqualPower => None,
        }
    }

    /// Candidate set `I_k` for one slot.
    pub fn indicators(self, coins: &CoinOutcomes) -> [bool; 6] {
        let [x1, x2, x3, x4, x5] = coins.x;
        match self {
            IndicatorRule::MultipleAccessBroadcast => [false, false, true, false, false, true],
            IndicatorRule::R1UplinkSplit => [false, !x1, x1, false, false, true],
            IndicatorRule::R1DownlinkSplit => [false, false, true, false, !x2, x2],
            IndicatorRule::R1EqualPower => [false, x3 && !x4, x3 && x4, false, !x3 && !x5, !x3 && x5],
            IndicatorRule::R2UplinkSplit => [!x1, false, x1, false, false, true],
            IndicatorRule::R2DownlinkSplit => [false, false, true, !x2, false, x2],
            IndicatorRule::R2EqualPower => [x3 && !x4, false, x3 && x4, !x3 && !x5, false, !x3 && x5],
        }
    }
}

/// Calibrated policy. Serializes to the JSON cache format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub region: SnrRegion,
    pub rule: IndicatorRule,
    pub mu1: f64,
    pub mu2: f64,
    pub t_share: f64,
    /// Coin probabilities; `None` marks an inactive coin.
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    pub p4: Option<f64>,
    pub p5: Option<f64>,
    /// Probability that a slot whose multiple-access and broadcast metrics
    /// tie goes to [`IndicatorRule::tie_mode`]. Only set when calibration
    /// found tied slots with positive probability (finite gain alphabets).
    #[serde(default)]
    pub tie_prob: Option<f64>,
}

impl PolicyParams {
    pub fn coin_probs(&self) -> [Option<f64>; 5] {
        [self.p1, self.p2, self.p3, self.p4, self.p5]
    }

    /// Checks ranges and that active coins match the rule.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("mu1", self.mu1)?;
        unit("mu2", self.mu2)?;
        unit("t_share", self.t_share)?;
        if self.rule.region() != self.region {
            return Err(invalid(format!("rule {:?} does not belong to region {}", self.rule, self.region)));
        }
        for (i, (p, active)) in self.coin_probs().iter().zip(self.rule.active_coins()).enumerate() {
            match (p, active) {
                (Some(v), true) => unit(&format!("p{}", i + 1), *v)?,
                (None, false) => {}
                (Some(_), false) => return Err(invalid(format!("p{} set but inactive for {:?}", i + 1, self.rule))),
                (None, true) => return Err(invalid(format!("p{} missing for {:?}", i + 1, self.rule))),
            }
        }
        if let Some(v) = self.tie_prob {
            unit("tie_prob", v)?;
            if self.rule.tie_mode().is_none() {
                return Err(invalid(format!("tie_prob set for {:?}", self.rule)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: PolicyParams = serde_json::from_str(s).map_err(|e| invalid(format!("policy JSON: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// Coin outcomes of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CoinOutcomes {
    pub x: [bool; 5],
    /// Tie coin, read only when the multiple-access and broadcast metrics tie.
    pub tie: bool,
}

/// Result of one per-slot selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeDecision {
    pub mode: Mode,
    pub metrics: [f64; 6],
    pub indicators: [bool; 6],
}

/// Selection metrics without range checks.
#[inline]
pub(crate) fn metrics(c: &CapacitySet, mu1: f64, mu2: f64, t: f64) -> [f64; 6] {
    let l4 = mu2 * c.cr1;
    let l5 = mu1 * c.cr2;
    [(1.0 - mu1) * c.c1r, (1.0 - mu2) * c.c2r, (1.0 - mu1) * c.c12r(t) + (1.0 - mu2) * c.c21r(t), l4, l5, l5 + l4]
}

/// Threshold-weighted capacity of each mode, `[Lambda1, ..., Lambda6]`.
pub fn selection_metrics(caps: &CapacitySet, mu1: f64, mu2: f64, t: f64) -> Result<[f64; 6]> {
    for (name, v) in [("mu1", mu1), ("mu2", mu2), ("t", t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(metrics(caps, mu1, mu2, t))
}

/// Picks the indicated mode with the largest metric.
///
/// Metrics within [`TIE_TOLERANCE`] of the best count as tied. A tie that
/// involves the rule's tie mode is settled by the tie coin when the policy
/// has one; otherwise the lowest mode index wins.
pub fn select_mode(caps: &CapacitySet, params: &PolicyParams, coins: &CoinOutcomes) -> ModeDecision {
    let metrics = metrics(caps, params.mu1, params.mu2, params.t_share);
    let indicators = params.rule.indicators(coins);
    let tie_mode = params.tie_prob.and(params.rule.tie_mode()).map(|m| (m, coins.tie));
    let mode = argmax(&metrics, &indicators, tie_mode);
    ModeDecision { mode, metrics, indicators }
}

/// Argmax over eligible modes with the tie rule of [`select_mode`].
pub(crate) fn argmax(metrics: &[f64; 6], eligible: &[bool; 6], tie_mode: Option<(Mode, bool)>) -> Mode {
    let best = (0..6).filter(|&k| eligible[k]).map(|k| metrics[k]).fold(f64::NEG_INFINITY, f64::max);
    let mut first = None;
    let mut favoured_tied = false;
    for k in 0..6 {
        if !eligible[k] || !tied(metrics[k], best) {
            continue;
        }
        match tie_mode {
            Some((m, take)) if m.index() == k => {
                if take {
                    return m;
                }
                favoured_tied = true;
            }
            _ => {
                if first.is_none() {
                    first = Some(k);
                }
            }
        }
    }
    match (first, favoured_tied) {
        (Some(k), _) => Mode::ALL[k],
        (None, true) => tie_mode.map(|(m, _)| m).unwrap_or(Mode::M1),
        // no eligible mode at all cannot happen for a valid rule
        (None, false) => Mode::ALL[eligible.iter().position(|&e| e).unwrap_or(0)],
    }
}

/// Independent Bernoulli draws for the active coins. Inactive coins are 0.
pub fn draw_coins<R: Rng + ?Sized>(params: &PolicyParams, rng: &mut R) -> CoinOutcomes {
    let mut out = CoinOutcomes::default();
    for (x, p) in out.x.iter_mut().zip(params.coin_probs()) {
        if let Some(p) = p {
            *x = rng.gen::<f64>() < p;
        }
    }
    if let Some(p) = params.tie_prob {
        out.tie = rng.gen::<f64>() < p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn caps() -> CapacitySet {
        // c1r=2, c2r=1, cr=2.5, cr1=1.5, cr2=2; at t=0: c12r = cr - c2r = 1.5, c21r = 1
        CapacitySet { c1r: 2.0, c2r: 1.0, cr: 2.5, cr1: 1.5, cr2: 2.0, c1r_first: 1.5, c2r_first: 0.5 }
    }

    fn r0(mu: f64) -> PolicyParams {
        PolicyParams {
            region: SnrRegion::R0,
            rule: IndicatorRule::MultipleAccessBroadcast,
            mu1: mu,
            mu2: mu,
            t_share: 0.0,
            p1: None,
            p2: None,
            p3: None,
            p4: None,
            p5: None,
            tie_prob: None,
        }
    }

    #[test]
    fn metric_example_half_thresholds() {
        let l = selection_metrics(&caps(), 0.5, 0.5, 0.0).unwrap();
        let expected = [1.0, 0.5, 1.25, 0.75, 1.0, 1.75];
        for (a, b) in l.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{l:?}");
        }
        let all = [true; 6];
        assert_eq!(argmax(&l, &all, None), Mode::M6);
    }

    #[test]
    fn metric_extremes() {
        let l = selection_metrics(&caps(), 0.0, 0.0, 0.3).unwrap();
        assert_eq!((l[3], l[4], l[5]), (0.0, 0.0, 0.0));
        assert!((l[2] - 2.5).abs() < 1e-12);
        let l = selection_metrics(&caps(), 1.0, 1.0, 0.3).unwrap();
        assert_eq!((l[0], l[1], l[2]), (0.0, 0.0, 0.0));
        assert_eq!(l[5], 3.5);
        assert!(selection_metrics(&caps(), 1.1, 0.0, 0.0).is_err());
        assert!(selection_metrics(&caps(), 0.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn region0_picks_between_mac_and_broadcast() {
        let d = select_mode(&caps(), &r0(0.5), &CoinOutcomes::default());
        assert_eq!(d.mode, Mode::M6);
        let d = select_mode(&caps(), &r0(0.2), &CoinOutcomes::default());
        assert_eq!(d.mode, Mode::M3);
        assert_eq!(d.indicators, [false, false, true, false, false, true]);
    }

    #[test]
    fn r1_uplink_coin_chooses_mac_over_user2() {
        let mut p = r0(0.0);
        p.region = SnrRegion::R1;
        p.rule = IndicatorRule::R1UplinkSplit;
        p.mu1 = 1.0;
        p.mu2 = 0.3;
        p.p1 = Some(0.5);
        let heads = CoinOutcomes { x: [true, false, false, false, false], tie: false };
        let ind = p.rule.indicators(&heads);
        assert!(ind[2] && !ind[1] && ind[5]);
        let tails = CoinOutcomes::default();
        let ind = p.rule.indicators(&tails);
        assert!(!ind[2] && ind[1]);
    }

    #[test]
    fn equal_power_rules_pick_exactly_one() {
        for rule in [IndicatorRule::R1EqualPower, IndicatorRule::R2EqualPower] {
            for bits in 0..8u8 {
                let coins = CoinOutcomes { x: [false, false, bits & 1 != 0, bits & 2 != 0, bits & 4 != 0], tie: false };
                assert_eq!(rule.indicators(&coins).iter().filter(|&&b| b).count(), 1);
            }
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let l = [1.0, 1.0, 1.0, 0.0, 0.0, 1.0 + 1e-15];
        assert_eq!(argmax(&l, &[true; 6], None), Mode::M1);
        assert_eq!(argmax(&l, &[false, false, true, false, false, true], None), Mode::M3);
        assert_eq!(argmax(&l, &[false, false, true, false, false, true], Some((Mode::M3, false))), Mode::M6);
        assert_eq!(argmax(&l, &[false, false, true, false, false, true], Some((Mode::M6, true))), Mode::M6);
        assert_eq!(argmax(&l, &[false, false, true, false, false, true], Some((Mode::M6, false))), Mode::M3);
    }

    #[test]
    fn scaling_metrics_keeps_argmax() {
        let l = selection_metrics(&caps(), 0.37, 0.61, 0.4).unwrap();
        let scaled = l.map(|v| v * 7.3);
        assert_eq!(argmax(&l, &[true; 6], None), argmax(&scaled, &[true; 6], None));
    }

    #[test]
    fn coins() {
        let mut p = r0(0.5);
        let mut rng = stream(9, Stream::Coins);
        for _ in 0..100 {
            assert_eq!(draw_coins(&p, &mut rng), CoinOutcomes::default());
        }
        p.region = SnrRegion::R1;
        p.rule = IndicatorRule::R1UplinkSplit;
        p.p1 = Some(1.0);
        for _ in 0..100 {
            assert!(draw_coins(&p, &mut rng).x[0]);
        }
        p.p1 = Some(0.3);
        let n = 1_000_000;
        let heads = (0..n).filter(|_| draw_coins(&p, &mut rng).x[0]).count();
        assert!((heads as f64 / n as f64 - 0.3).abs() < 0.005);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut p = r0(0.42);
        p.t_share = 0.25;
        let s = p.to_json();
        assert!(s.contains("\"region\": \"R0\"") && s.contains("\"p1\": null"));
        assert_eq!(PolicyParams::from_json(&s).unwrap(), p);
        p.p1 = Some(0.2);
        assert!(p.validate().is_err());
        let mut q = r0(1.2);
        assert!(q.validate().is_err());
        q.mu1 = 0.5;
        q.mu2 = 0.5;
        q.region = SnrRegion::R1;
        assert!(q.validate().is_err());
    }
}
