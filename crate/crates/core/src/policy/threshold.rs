//! Bisection searches for thresholds on a fixed calibration sample.

use crate::error::{Error, Result, TraceEntry};

use super::sample::{CalibrationSample, Flows};

/// Iteration cap of every bisection.
pub const BISECTION_MAX_ITER: usize = 60;

/// Residual (bits/symbol) at which a bisection stops early.
pub const RESIDUAL_TOL: f64 = 1e-4;

/// Outcome of a bisection of a decreasing function on `[0, 1]`.
///
/// `lo` and `hi` are the last bracket, with `residual_lo >= 0 >= residual_hi`
/// unless the search stopped at an endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bisection {
    pub x: f64,
    pub residual: f64,
    pub lo: f64,
    pub hi: f64,
    pub residual_lo: f64,
    pub residual_hi: f64,
    pub iterations: usize,
    /// `|residual| <= tol` was reached.
    pub converged: bool,
}

/// Finds a root of a non-increasing `f` on `[0, 1]`.
///
/// Stops when `|f(x)| <= tol` or after [`BISECTION_MAX_ITER`] halvings, in
/// which case the bracket end with the smaller residual is returned and
/// `converged` is false (a jump of a step function straddles zero).
pub fn bisect_decreasing(mut f: impl FnMut(f64) -> f64, tol: f64) -> Result<Bisection> {
    let r0 = f(0.0);
    let r1 = f(1.0);
    if !(r0.is_finite() && r1.is_finite()) {
        return Err(Error::NumericalFailure {
            reason: "non-finite residual at an endpoint".into(),
            trace: vec![
                TraceEntry { mu1: 0.0, mu2: 0.0, residual: r0 },
                TraceEntry { mu1: 1.0, mu2: 0.0, residual: r1 },
            ],
        });
    }
    let done = |x: f64, r: f64, lo, hi, rl, rh, it| Bisection {
        x,
        residual: r,
        lo,
        hi,
        residual_lo: rl,
        residual_hi: rh,
        iterations: it,
        converged: r.abs() <= tol,
    };
    if r0.abs() <= tol {
        return Ok(done(0.0, r0, 0.0, 1.0, r0, r1, 0));
    }
    if r1.abs() <= tol {
        return Ok(done(1.0, r1, 0.0, 1.0, r0, r1, 0));
    }
    if (r0 > 0.0) == (r1 > 0.0) {
        return Err(Error::CaseInfeasible { at_zero: r0, at_one: r1 });
    }
    if r0 < 0.0 {
        return Err(Error::NumericalFailure {
            reason: "residual increases over [0, 1]".into(),
            trace: vec![
                TraceEntry { mu1: 0.0, mu2: 0.0, residual: r0 },
                TraceEntry { mu1: 1.0, mu2: 0.0, residual: r1 },
            ],
        });
    }
    let (mut lo, mut hi, mut rl, mut rh) = (0.0, 1.0, r0, r1);
    for it in 1..=BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let r = f(mid);
        if r.abs() <= tol {
            return Ok(done(mid, r, lo, hi, rl, rh, it));
        }
        if r > 0.0 {
            lo = mid;
            rl = r;
        } else {
            hi = mid;
            rh = r;
        }
    }
    let (x, r) = if rl.abs() <= rh.abs() { (lo, rl) } else { (hi, rh) };
    Ok(done(x, r, lo, hi, rl, rh, BISECTION_MAX_ITER))
}

/// Thresholds balancing both relay buffers at a fixed time-share.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedSolution {
    pub mu1: f64,
    pub mu2: f64,
    pub flows: Flows,
    /// Outer iterations: `mu1`, the matching `mu2`, and the direction-1 residual.
    pub trace: Vec<TraceEntry>,
}

/// Finds `(mu1, mu2)` such that both buffers balance under the argmax policy
/// restricted to `eligible`.
///
/// The inner search solves total inflow = total outflow for `mu2` at fixed
/// `mu1`, clamping `mu2` to an endpoint when that curve leaves the unit
/// square. The outer search drives the direction-1 balance to zero along
/// that curve. A threshold may rest at zero with its buffer draining faster
/// than it fills (the multiplier of a slack constraint); any other residual
/// above `final_tol` is a failure.
pub fn solve_nested(sample: &CalibrationSample, t: f64, eligible: [bool; 6], final_tol: f64) -> Result<NestedSolution> {
    let inner = |mu1: f64| -> Result<(f64, Flows)> {
        let total = |mu2: f64| sample.flows(mu1, mu2, t, eligible).balance();
        let b = match bisect_decreasing(total, RESIDUAL_TOL) {
            Ok(b) => b.x,
            Err(Error::CaseInfeasible { at_zero, .. }) => {
                if at_zero < 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            Err(e) => return Err(e),
        };
        Ok((b, sample.flows(mu1, b, t, eligible)))
    };

    let mut trace = Vec::new();
    let mut inner_err = None;
    let mut outer = |mu1: f64| match inner(mu1) {
        Ok((mu2, flows)) => {
            let r = flows.residual_c1();
            trace.push(TraceEntry { mu1, mu2, residual: r });
            r
        }
        Err(e) => {
            inner_err.get_or_insert(e);
            f64::NAN
        }
    };
    let outcome = bisect_decreasing(&mut outer, RESIDUAL_TOL);
    if let Some(e) = inner_err {
        return Err(e);
    }
    let fail = |reason: String, trace: Vec<TraceEntry>| Error::NumericalFailure { reason, trace };
    let mu1 = match outcome {
        Ok(b) => b.x,
        // direction 1 drains even without weighting its buffer
        Err(Error::CaseInfeasible { at_zero, .. }) if at_zero < 0.0 => 0.0,
        Err(Error::CaseInfeasible { at_zero, at_one }) => {
            return Err(fail(
                format!("direction-1 inflow exceeds outflow for every mu1: {at_zero:.3e} at 0, {at_one:.3e} at 1"),
                trace,
            ))
        }
        Err(Error::NumericalFailure { reason, .. }) => return Err(fail(reason, trace)),
        Err(e) => return Err(e),
    };
    let (mut mu2, mut flows) = inner(mu1)?;
    if mu1 == 0.0 && flows.residual_c1() < -final_tol {
        // direction 1 is slack, so balance direction 2 on its own
        let c2 = |m: f64| sample.flows(0.0, m, t, eligible).residual_c2();
        mu2 = match bisect_decreasing(c2, RESIDUAL_TOL) {
            Ok(b) => b.x,
            Err(Error::CaseInfeasible { at_zero, .. }) if at_zero < 0.0 => 0.0,
            Err(Error::CaseInfeasible { at_zero, at_one }) => {
                return Err(fail(
                    format!("direction-2 inflow exceeds outflow for every mu2: {at_zero:.3e} at 0, {at_one:.3e} at 1"),
                    trace,
                ))
            }
            Err(Error::NumericalFailure { reason, .. }) => return Err(fail(reason, trace)),
            Err(e) => return Err(e),
        };
        flows = sample.flows(0.0, mu2, t, eligible);
        trace.push(TraceEntry { mu1, mu2, residual: flows.residual_c2() });
    }
    let ok = |r: f64, mu: f64| r.abs() <= final_tol || (mu == 0.0 && r < 0.0);
    if !ok(flows.residual_c1(), mu1) || !ok(flows.residual_c2(), mu2) {
        return Err(fail(
            format!(
                "residuals {:.3e} and {:.3e} exceed {final_tol:e} at t={t}, mu=({mu1}, {mu2})",
                flows.residual_c1(),
                flows.residual_c2()
            ),
            trace,
        ));
    }
    Ok(NestedSolution { mu1, mu2, flows, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelStats, FadingModel, NodePowers};
    use crate::rng::{stream, Stream};

    #[test]
    fn finds_linear_root() {
        let b = bisect_decreasing(|x| 0.3 - x, 1e-9).unwrap();
        assert!(b.converged && (b.x - 0.3).abs() < 1e-9);
    }

    #[test]
    fn endpoint_roots() {
        assert_eq!(bisect_decreasing(|x| -x, 1e-4).unwrap().x, 0.0);
        assert_eq!(bisect_decreasing(|x| 1.0 - x, 1e-4).unwrap().x, 1.0);
    }

    #[test]
    fn same_sign_is_infeasible() {
        match bisect_decreasing(|x| 1.0 + x, 1e-4) {
            Err(Error::CaseInfeasible { at_zero, at_one }) => assert_eq!((at_zero, at_one), (1.0, 2.0)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(bisect_decreasing(|x| x - 0.5, 1e-4), Err(Error::NumericalFailure { .. })));
    }

    #[test]
    fn step_function_reports_bracket() {
        let b = bisect_decreasing(|x| if x < 0.4 { 1.0 } else { -1.0 }, 1e-4).unwrap();
        assert!(!b.converged);
        assert_eq!(b.iterations, BISECTION_MAX_ITER);
        assert!(b.lo < 0.4 && b.hi >= 0.4 && b.hi - b.lo < 1e-15);
        assert_eq!((b.residual_lo, b.residual_hi), (1.0, -1.0));
    }

    #[test]
    fn nested_three_mode_balances() {
        let powers = NodePowers::from_db(10.0, 10.0, 10.0).unwrap();
        let model = FadingModel::from(ChannelStats::from_db(3.0, 0.0).unwrap());
        let s = CalibrationSample::draw(&model, &powers, 20_000, &mut stream(5, Stream::Calibration)).unwrap();
        let sol = solve_nested(&s, 0.0, [true, true, false, false, false, true], 1e-3).unwrap();
        assert!(sol.flows.residual_c1().abs() <= 1e-3 && sol.flows.residual_c2().abs() <= 1e-3);
        assert!((0.0..=1.0).contains(&sol.mu1) && (0.0..=1.0).contains(&sol.mu2));
    }

    #[test]
    fn nested_rests_at_zero_when_direction_drains() {
        // weak user 1, strong relay: broadcast always over-serves direction 1
        let powers = NodePowers::from_db(10.0, 10.0, 15.0).unwrap();
        let model = FadingModel::from(ChannelStats::from_db(-10.0, 0.0).unwrap());
        let s = CalibrationSample::draw(&model, &powers, 20_000, &mut stream(6, Stream::Calibration)).unwrap();
        let sol = solve_nested(&s, 0.0, [true, true, false, false, false, true], 1e-3).unwrap();
        assert_eq!(sol.mu1, 0.0);
        assert!(sol.flows.residual_c1() < 0.0);
        assert!(sol.flows.residual_c2().abs() <= 1e-3);
    }
}
