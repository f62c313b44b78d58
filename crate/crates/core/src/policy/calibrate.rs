//! Offline calibration: region tests, thresholds, time-share and coin biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{FadingModel, NodePowers};
use crate::error::{Error, Result, TraceEntry};
use crate::queues::Mode;

use super::sample::{CalibrationSample, Flows, Moments, QRule, QSide};
use super::threshold::{bisect_decreasing, solve_nested, Bisection, NestedSolution, RESIDUAL_TOL};
use super::{argmax, metrics, IndicatorRule, PolicyParams, SnrRegion};

/// Residual bound for the two-dimensional threshold search.
const NESTED_TOL: f64 = 1e-3;

/// How a user's transmit power compares with the relay's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PowerRelation {
    Above,
    Below,
    Equal,
}

impl PowerRelation {
    /// Equality up to `1e-12` relative (absolute below 1).
    pub fn of(user: f64, relay: f64) -> Self {
        if (user - relay).abs() <= 1e-12 * user.max(relay).max(1.0) {
            PowerRelation::Equal
        } else if user > relay {
            PowerRelation::Above
        } else {
            PowerRelation::Below
        }
    }
}

/// One-dimensional threshold conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ThresholdCase {
    /// R1 with `P2 > Pr`: solve `mu2` with `mu1 = 1`, `t = 0`.
    R1Uplink,
    /// R1 with `P2 < Pr`: solve `mu1` with `mu2 = 0`, `t = 0`.
    R1Downlink,
    /// R2 with `P1 > Pr`: solve `mu1` with `mu2 = 1`, `t = 1`.
    R2Uplink,
    /// R2 with `P1 < Pr`: solve `mu2` with `mu1 = 0`, `t = 1`.
    R2Downlink,
    /// R0: common threshold `mu1 = mu2`.
    R0,
}

impl ThresholdCase {
    /// `(mu1, mu2, t)` for threshold value `mu`.
    fn point(self, mu: f64) -> (f64, f64, f64) {
        match self {
            ThresholdCase::R1Uplink => (1.0, mu, 0.0),
            ThresholdCase::R1Downlink => (mu, 0.0, 0.0),
            ThresholdCase::R2Uplink => (mu, 1.0, 1.0),
            ThresholdCase::R2Downlink => (0.0, mu, 1.0),
            ThresholdCase::R0 => (mu, mu, 0.0),
        }
    }

    fn side(self) -> QSide {
        match self {
            ThresholdCase::R1Uplink | ThresholdCase::R2Uplink => QSide::Broadcast,
            _ => QSide::MultipleAccess,
        }
    }

    pub fn rule(self, mu: f64) -> QRule {
        let (mu1, mu2, t) = self.point(mu);
        QRule { mu1, mu2, t, side: self.side() }
    }

    /// Fixed-point residual, decreasing in the threshold.
    fn residual(self, q: &Moments, nq: &Moments) -> f64 {
        match self {
            ThresholdCase::R1Uplink => nq.c2r - q.cr1,
            ThresholdCase::R1Downlink => q.c12r - nq.cr2,
            ThresholdCase::R2Uplink => nq.c1r - q.cr2,
            ThresholdCase::R2Downlink => q.c21r - nq.cr1,
            ThresholdCase::R0 => q.cr - nq.cr1 - nq.cr2,
        }
    }

    /// Region-test ratio; `None` for R0.
    fn omega(self, q: &Moments, nq: &Moments) -> Option<f64> {
        let (num, den) = match self {
            ThresholdCase::R1Uplink => (q.cr2, nq.c12r),
            ThresholdCase::R1Downlink => (q.c2r, nq.cr1),
            ThresholdCase::R2Uplink => (q.cr1, nq.c21r),
            ThresholdCase::R2Downlink => (q.c1r, nq.cr2),
            ThresholdCase::R0 => return None,
        };
        Some(ratio(num, den))
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Solution of a one-dimensional threshold condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSolution {
    pub case: ThresholdCase,
    pub mu: f64,
    /// Share of metric-tied slots placed on the `q = 1` side; `None` when no
    /// slot of the sample is tied at `mu`.
    pub tie_prob: Option<f64>,
    pub residual: f64,
    pub bisection: Bisection,
    /// Moments of the `q = 1` slots.
    pub q: Moments,
    /// Moments of the `q = 0` slots.
    pub not_q: Moments,
}

impl ThresholdSolution {
    pub fn omega(&self) -> Option<f64> {
        self.case.omega(&self.q, &self.not_q)
    }
}

/// Solves the fixed-point condition of `case` on `sample` by bisection.
///
/// On a finite alphabet the residual jumps where slots change side. If the
/// search ends on such a jump, the tied slots are split with the share that
/// zeroes the residual.
pub fn solve_threshold_1d(case: ThresholdCase, sample: &CalibrationSample) -> Result<ThresholdSolution> {
    let f = |mu: f64| {
        let (q, nq) = sample.expectations(&case.rule(mu)).split(0.5);
        case.residual(&q, &nq)
    };
    let b = bisect_decreasing(f, RESIDUAL_TOL)?;
    // The tie window is far narrower than the final bracket on one side only,
    // so try both bracket ends.
    let mut best: Option<(f64, Option<f64>, f64, Moments, Moments)> = None;
    for mu in [b.x, b.lo, b.hi] {
        let bundle = sample.expectations(&case.rule(mu));
        let at = |share: f64| {
            let (q, nq) = bundle.split(share);
            case.residual(&q, &nq)
        };
        let tie_prob = (bundle.tied.mass > 0.0).then(|| {
            let (r0, r1) = (at(0.0), at(1.0));
            if r1 != r0 {
                (r0 / (r0 - r1)).clamp(0.0, 1.0)
            } else {
                0.5
            }
        });
        let (q, nq) = bundle.split(tie_prob.unwrap_or(0.0));
        let r = case.residual(&q, &nq);
        if best.as_ref().is_none_or(|c| r.abs() < c.2.abs()) {
            best = Some((mu, tie_prob, r, q, nq));
        }
    }
    let (mu, tie_prob, residual, q, not_q) = best.expect("three candidates");
    if residual.abs() > RESIDUAL_TOL {
        let (m1l, m2l, _) = case.point(b.lo);
        let (m1h, m2h, _) = case.point(b.hi);
        return Err(Error::NumericalFailure {
            reason: format!("{case:?} threshold residual {residual:.3e} after {} iterations", b.iterations),
            trace: vec![
                TraceEntry { mu1: m1l, mu2: m2l, residual: b.residual_lo },
                TraceEntry { mu1: m1h, mu2: m2h, residual: b.residual_hi },
            ],
        });
    }
    Ok(ThresholdSolution { case, mu, tie_prob, residual, bisection: b, q, not_q })
}

/// Outcome of one region test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionTest {
    pub region: SnrRegion,
    pub relation: PowerRelation,
    /// `omega1` / `omega2`, or `[omega3_l, omega3_u]` for equal powers.
    pub omega: Vec<f64>,
    pub mu: Option<f64>,
    pub passed: bool,
    /// Why the threshold could not be calibrated, if it could not.
    pub error: Option<String>,
}

/// Diagnostics of a calibration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub tests: Vec<RegionTest>,
    /// Time-share formula before clipping (R0 only).
    pub t_unclipped: Option<f64>,
    /// Whether R0 needed the two-dimensional search.
    pub nested: bool,
    /// Outer-loop trace of the two-dimensional search.
    pub trace: Vec<TraceEntry>,
    /// Expected untruncated rates of the calibrated policy on the sample.
    pub expected_r1r: f64,
    pub expected_r2r: f64,
    pub expected_rr1: f64,
    pub expected_rr2: f64,
}

impl CalibrationReport {
    pub fn residual_c1(&self) -> f64 {
        self.expected_r1r - self.expected_rr2
    }
    pub fn residual_c2(&self) -> f64 {
        self.expected_r2r - self.expected_rr1
    }
}

/// Calibrated policy with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: PolicyParams,
    pub report: CalibrationReport,
}

fn params(rule: IndicatorRule, mu1: f64, mu2: f64, t_share: f64) -> PolicyParams {
    PolicyParams {
        region: rule.region(),
        rule,
        mu1,
        mu2,
        t_share,
        p1: None,
        p2: None,
        p3: None,
        p4: None,
        p5: None,
        tie_prob: None,
    }
}

/// Threshold-split test of R1 (`mirror = false`) or R2 (`mirror = true`).
fn split_test(
    sample: &CalibrationSample,
    region: SnrRegion,
    relation: PowerRelation,
) -> (RegionTest, Option<PolicyParams>) {
    use ThresholdCase::*;
    let mut test = RegionTest { region, relation, omega: Vec::new(), mu: None, passed: false, error: None };
    let r1 = region == SnrRegion::R1;
    let case = match (relation, r1) {
        (PowerRelation::Above, true) => R1Uplink,
        (PowerRelation::Below, true) => R1Downlink,
        (PowerRelation::Above, false) => R2Uplink,
        (PowerRelation::Below, false) => R2Downlink,
        (PowerRelation::Equal, _) => return equal_power_test(sample, region, test),
    };
    let sol = match solve_threshold_1d(case, sample) {
        Ok(sol) => sol,
        Err(e) => {
            test.error = Some(e.to_string());
            return (test, None);
        }
    };
    let omega = sol.omega().unwrap_or(f64::INFINITY);
    test.omega = vec![omega];
    test.mu = Some(sol.mu);
    test.passed = omega < 1.0;
    if !test.passed {
        return (test, None);
    }
    let (mu1, mu2, t) = case.point(sol.mu);
    let mut p = match case {
        R1Uplink => params(IndicatorRule::R1UplinkSplit, mu1, mu2, t),
        R1Downlink => params(IndicatorRule::R1DownlinkSplit, mu1, mu2, t),
        R2Uplink => params(IndicatorRule::R2UplinkSplit, mu1, mu2, t),
        R2Downlink => params(IndicatorRule::R2DownlinkSplit, mu1, mu2, t),
        R0 => unreachable!("R0 has no split test"),
    };
    match case {
        R1Uplink | R2Uplink => p.p1 = Some(omega),
        _ => p.p2 = Some(omega),
    }
    p.tie_prob = sol.tie_prob;
    (test, Some(p))
}

fn equal_power_test(
    sample: &CalibrationSample,
    region: SnrRegion,
    mut test: RegionTest,
) -> (RegionTest, Option<PolicyParams>) {
    let m = sample.means(0.0);
    let (lower, upper, p) = if region == SnrRegion::R1 {
        (ratio(m.cr2, m.cr), ratio(m.cr1, m.cr1 + m.c2r), params(IndicatorRule::R1EqualPower, 1.0, 0.0, 0.0))
    } else {
        (ratio(m.cr1, m.cr), ratio(m.cr2, m.cr2 + m.c1r), params(IndicatorRule::R2EqualPower, 0.0, 1.0, 1.0))
    };
    test.omega = vec![lower, upper];
    test.passed = lower < upper;
    if !test.passed {
        return (test, None);
    }
    let p3 = 0.5 * (lower + upper);
    let p4 = ((1.0 - p3) * lower / (p3 * (1.0 - lower))).clamp(0.0, 1.0);
    let p5 = (p3 * (1.0 - upper) / ((1.0 - p3) * upper)).clamp(0.0, 1.0);
    (test, Some(PolicyParams { p3: Some(p3), p4: Some(p4), p5: Some(p5), ..p }))
}

/// Result of the R0 calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Region0 {
    pub params: PolicyParams,
    pub t_unclipped: Option<f64>,
    pub nested: Option<NestedSolution>,
}

/// Calibrates the region where only multiple access and broadcast are used.
///
/// The common threshold is solved first and gives the time-share. If the
/// time-share falls outside `(0, 1)` it is clipped and the two thresholds
/// are searched separately.
pub fn solve_region0(sample: &CalibrationSample) -> Result<Region0> {
    let sol = solve_threshold_1d(ThresholdCase::R0, sample)?;
    let (q, nq) = (sol.q, sol.not_q);
    let num = (q.cr - q.c2r) - nq.cr2;
    let den = q.cr - q.c1r - q.c2r;
    let t_unclipped = (den != 0.0).then(|| num / den);
    let rule = IndicatorRule::MultipleAccessBroadcast;
    if let Some(t) = t_unclipped.filter(|t| *t > 0.0 && *t < 1.0) {
        let mut p = params(rule, sol.mu, sol.mu, t);
        p.tie_prob = sol.tie_prob;
        return Ok(Region0 { params: p, t_unclipped, nested: None });
    }
    let t = match t_unclipped {
        Some(t) if t >= 1.0 => 1.0,
        Some(_) => 0.0,
        // direction-1 inflow does not depend on t
        None if num >= 0.0 => 0.0,
        None => 1.0,
    };
    let nested = solve_nested(sample, t, [false, false, true, false, false, true], NESTED_TOL)?;
    Ok(Region0 { params: params(rule, nested.mu1, nested.mu2, t), t_unclipped, nested: Some(nested) })
}

/// Runs the region tests in the order R1, R2, R0 and calibrates the first
/// region that applies.
pub fn calibrate_on(sample: &CalibrationSample, powers: &NodePowers) -> Result<Calibration> {
    let mut tests = Vec::with_capacity(2);
    let mut found = None;
    for (region, user) in [(SnrRegion::R1, powers.p2()), (SnrRegion::R2, powers.p1())] {
        let (test, p) = split_test(sample, region, PowerRelation::of(user, powers.pr()));
        tests.push(test);
        if p.is_some() {
            found = p;
            break;
        }
    }
    let (params, t_unclipped, trace) = match found {
        Some(p) => (p, None, None),
        None => {
            let r0 = solve_region0(sample)?;
            let trace = r0.nested.as_ref().map(|n| n.trace.clone());
            (r0.params, r0.t_unclipped, trace)
        }
    };
    params.validate()?;
    let flows = policy_flows(sample, &params);
    let report = CalibrationReport {
        tests,
        t_unclipped,
        nested: trace.is_some(),
        trace: trace.unwrap_or_default(),
        expected_r1r: flows.r1r,
        expected_r2r: flows.r2r,
        expected_rr1: flows.rr1,
        expected_rr2: flows.rr2,
    };
    Ok(Calibration { params, report })
}

/// Draws a calibration sample of `samples` slots and calibrates on it.
pub fn classify_and_calibrate<R: Rng + ?Sized>(
    model: &FadingModel,
    powers: &NodePowers,
    samples: usize,
    rng: &mut R,
) -> Result<PolicyParams> {
    let sample = CalibrationSample::draw(model, powers, samples, rng)?;
    Ok(calibrate_on(&sample, powers)?.params)
}

/// Expected untruncated rates of a calibrated policy, averaging over coin flips.
pub fn policy_flows(sample: &CalibrationSample, params: &PolicyParams) -> Flows {
    let probs = params.coin_probs();
    let active: Vec<usize> = (0..5).filter(|&i| probs[i].is_some()).collect();
    let tie = params.rule.tie_mode().zip(params.tie_prob);
    let mut combos = Vec::new();
    for bits in 0..(1u32 << active.len()) {
        let mut coins = super::CoinOutcomes::default();
        let mut w = 1.0;
        for (j, &i) in active.iter().enumerate() {
            let p = probs[i].unwrap_or(0.0);
            coins.x[i] = bits & (1 << j) != 0;
            w *= if coins.x[i] { p } else { 1.0 - p };
        }
        match tie {
            Some((_, p)) => {
                combos.push((coins, w * (1.0 - p)));
                combos.push((super::CoinOutcomes { tie: true, ..coins }, w * p));
            }
            None => combos.push((coins, w)),
        }
    }
    let mut flows = Flows::default();
    for (c, w) in sample.weighted() {
        let lambda = metrics(c, params.mu1, params.mu2, params.t_share);
        for (coins, cw) in &combos {
            if *cw == 0.0 {
                continue;
            }
            let eligible = params.rule.indicators(coins);
            let w = w * cw;
            match argmax(&lambda, &eligible, tie.map(|(m, _)| (m, coins.tie))) {
                Mode::M1 => flows.r1r += w * c.c1r,
                Mode::M2 => flows.r2r += w * c.c2r,
                Mode::M3 => {
                    flows.r1r += w * c.c12r(params.t_share);
                    flows.r2r += w * c.c21r(params.t_share);
                }
                Mode::M4 => flows.rr1 += w * c.cr1,
                Mode::M5 => flows.rr2 += w * c.cr2,
                Mode::M6 => {
                    flows.rr1 += w * c.cr1;
                    flows.rr2 += w * c.cr2;
                }
            }
        }
    }
    flows
}

/// Thresholds of the three-mode policy (user 1 uplink, user 2 uplink, broadcast).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeModeParams {
    pub mu1: f64,
    pub mu2: f64,
}

impl ThreeModeParams {
    pub const ELIGIBLE: [bool; 6] = [true, true, false, false, false, true];
}

/// Calibrates the three-mode policy so that both buffers balance.
pub fn calibrate_three_mode(sample: &CalibrationSample) -> Result<ThreeModeParams> {
    let sol = solve_nested(sample, 0.0, ThreeModeParams::ELIGIBLE, NESTED_TOL)?;
    Ok(ThreeModeParams { mu1: sol.mu1, mu2: sol.mu2 })
}
