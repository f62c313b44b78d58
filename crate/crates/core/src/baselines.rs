//! Reference protocols: fixed schedules without buffering, and the
//! buffer-aided three-mode selection policy.
//!
//! Fixed schedules are evaluated per cycle. The rate delivered in a direction
//! is the smaller of its uplink and downlink capacities within the cycle, so
//! nothing is buffered across cycles and admitted equals delivered.

use serde::{Deserialize, Serialize};

use crate::channel::CapacitySet;
use crate::engine::{run_adaptive, Accumulator, Protocol, SumRateReport};
use crate::error::Result;
use crate::policy::{argmax, metrics, ThreeModeParams};
use crate::queues::{BufferState, Mode};

/// Time-share of the fixed multiple-access/broadcast protocol.
pub const MABC_T: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineId {
    TwoWay,
    Tdbc,
    Mabc,
    MabcOpt,
    ThreeMode,
}

impl From<BaselineId> for Protocol {
    fn from(b: BaselineId) -> Protocol {
        match b {
            BaselineId::TwoWay => Protocol::TwoWay,
            BaselineId::Tdbc => Protocol::Tdbc,
            BaselineId::Mabc => Protocol::Mabc,
            BaselineId::MabcOpt => Protocol::MabcOpt,
            BaselineId::ThreeMode => Protocol::ThreeMode,
        }
    }
}

/// Per-slot `(r1r, r2r, rr1, rr2)`.
type SlotRates = (f64, f64, f64, f64);

fn run_cycles<const L: usize>(
    protocol: Protocol,
    slots: impl ExactSizeIterator<Item = CapacitySet>,
    modes: [Mode; L],
    cycle: impl Fn(&[CapacitySet; L]) -> [SlotRates; L],
) -> Result<SumRateReport> {
    let cycles = slots.len() / L;
    let mut acc = Accumulator::new((cycles * L) as u64);
    let mut buf = [CapacitySet::default(); L];
    let mut slots = slots;
    for k in 0..cycles {
        for b in buf.iter_mut() {
            *b = slots.next().expect("length checked");
        }
        for (j, (r1r, r2r, rr1, rr2)) in cycle(&buf).into_iter().enumerate() {
            acc.record((k * L + j) as u64, modes[j], r1r, r2r, rr1, rr2)?;
        }
    }
    acc.finish(protocol, BufferState::empty())
}

/// Four point-to-point phases: 1 to relay, relay to 2, 2 to relay, relay to 1.
pub fn run_two_way(slots: impl ExactSizeIterator<Item = CapacitySet>) -> Result<SumRateReport> {
    run_cycles(Protocol::TwoWay, slots, [Mode::M1, Mode::M5, Mode::M2, Mode::M4], |[a, b, c, d]| {
        let d1 = a.c1r.min(b.cr2);
        let d2 = c.c2r.min(d.cr1);
        [(d1, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0, d1), (0.0, d2, 0.0, 0.0), (0.0, 0.0, d2, 0.0)]
    })
}

/// Two uplink phases followed by one broadcast phase.
pub fn run_tdbc(slots: impl ExactSizeIterator<Item = CapacitySet>) -> Result<SumRateReport> {
    run_cycles(Protocol::Tdbc, slots, [Mode::M1, Mode::M2, Mode::M6], |[a, b, c]| {
        let d1 = a.c1r.min(c.cr2);
        let d2 = b.c2r.min(c.cr1);
        [(d1, 0.0, 0.0, 0.0), (0.0, d2, 0.0, 0.0), (0.0, 0.0, d2, d1)]
    })
}

fn mabc_cycle(mac: &CapacitySet, bc: &CapacitySet, t: f64) -> [SlotRates; 2] {
    let d1 = mac.c12r(t).min(bc.cr2);
    let d2 = mac.c21r(t).min(bc.cr1);
    [(d1, d2, 0.0, 0.0), (0.0, 0.0, d2, d1)]
}

/// Multiple access with time-share [`MABC_T`], then broadcast.
pub fn run_mabc(slots: impl ExactSizeIterator<Item = CapacitySet>) -> Result<SumRateReport> {
    run_cycles(Protocol::Mabc, slots, [Mode::M3, Mode::M6], |[a, b]| mabc_cycle(a, b, MABC_T))
}

/// Time-share maximizing the delivered sum of one cycle.
///
/// The objective is concave and piecewise linear in `t`, so its maximum is
/// at an endpoint or where one of the two `min` terms switches.
pub fn best_mabc_share(mac: &CapacitySet, bc: &CapacitySet) -> f64 {
    let g = |t: f64| mac.c12r(t).min(bc.cr2) + mac.c21r(t).min(bc.cr1);
    let mut candidates = vec![0.0, 1.0];
    let slope1 = mac.c1r - mac.c1r_first;
    if slope1 > 0.0 {
        candidates.push(((bc.cr2 - mac.c1r_first) / slope1).clamp(0.0, 1.0));
    }
    let slope2 = mac.c2r - mac.c2r_first;
    if slope2 > 0.0 {
        candidates.push(((mac.c2r - bc.cr1) / slope2).clamp(0.0, 1.0));
    }
    let mut best = (0.0, g(0.0));
    for t in candidates {
        let v = g(t);
        if v > best.1 || (v == best.1 && t < best.0) {
            best = (t, v);
        }
    }
    best.0
}

/// Multiple access then broadcast, time-share chosen per cycle with both
/// slots' channels known.
pub fn run_mabc_opt(slots: impl ExactSizeIterator<Item = CapacitySet>) -> Result<SumRateReport> {
    run_cycles(Protocol::MabcOpt, slots, [Mode::M3, Mode::M6], |[a, b]| mabc_cycle(a, b, best_mabc_share(a, b)))
}

/// Buffer-aided selection among user 1 uplink, user 2 uplink and broadcast.
pub fn run_three_mode(
    slots: impl ExactSizeIterator<Item = CapacitySet>,
    warmup: u64,
    params: &ThreeModeParams,
) -> Result<SumRateReport> {
    let n = slots.len() as u64;
    let (mu1, mu2) = (params.mu1, params.mu2);
    run_adaptive(Protocol::ThreeMode, slots, n, warmup, 0.0, |c| {
        argmax(&metrics(c, mu1, mu2, 0.0), &ThreeModeParams::ELIGIBLE, None)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{mode_capacities, ChannelDraw, ChannelStats, FadingModel, NodePowers};
    use crate::engine::SlotStream;

    fn flat(c: f64) -> CapacitySet {
        CapacitySet { c1r: c, c2r: c, cr: 1.5 * c, cr1: c, cr2: c, c1r_first: 0.5 * c, c2r_first: 0.5 * c }
    }

    fn static_slots(c: CapacitySet, n: usize) -> impl ExactSizeIterator<Item = CapacitySet> {
        std::iter::repeat_n(c, n)
    }

    #[test]
    fn two_way_static() {
        let r = run_two_way(static_slots(flat(2.0), 4002)).unwrap();
        assert_eq!(r.n_slots, 4000);
        assert!((r.sum_rate - 1.0).abs() < 1e-12);
        assert_eq!(r.mode_histogram, [0.25, 0.25, 0.0, 0.25, 0.25, 0.0]);
        assert_eq!((r.residual_c1, r.residual_c2), (0.0, 0.0));
        let mut c = flat(2.0);
        c.cr2 = 0.0;
        let r = run_two_way(static_slots(c, 4000)).unwrap();
        assert_eq!(r.rr2_bar, 0.0);
        assert!((r.sum_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tdbc_static() {
        let r = run_tdbc(static_slots(flat(1.5), 3000)).unwrap();
        assert!((r.sum_rate - 1.0).abs() < 1e-12);
        let mut c = flat(1.5);
        c.c2r = 0.0;
        let r = run_tdbc(static_slots(c, 3000)).unwrap();
        assert_eq!(r.rr1_bar, 0.0);
        assert!((r.sum_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mabc_symmetric_static_matches_grid() {
        let powers = NodePowers::new(3.0, 3.0, 3.0).unwrap();
        let c = mode_capacities(&ChannelDraw::new(1.0, 1.0).unwrap(), &powers);
        let r = run_mabc(static_slots(c, 2000)).unwrap();
        assert!((r.sum_rate - c.cr.min(c.cr1 + c.cr2) / 2.0).abs() < 1e-12);
        let grid = (0..=100)
            .map(|i| {
                let t = i as f64 / 100.0;
                (c.c12r(t).min(c.cr2) + c.c21r(t).min(c.cr1)) / 2.0
            })
            .fold(0.0, f64::max);
        assert!((r.sum_rate - grid).abs() < 1e-12);
        let opt = run_mabc_opt(static_slots(c, 2000)).unwrap();
        assert!(opt.sum_rate >= r.sum_rate - 1e-12);
    }

    #[test]
    fn mabc_one_user_silent() {
        // user 2 sends nothing: multiple access carries user 1 alone
        let c = CapacitySet { c1r: 2.0, c2r: 0.0, cr: 2.0, cr1: 1.5, cr2: 1.5, c1r_first: 2.0, c2r_first: 0.0 };
        let r = run_mabc(static_slots(c, 2000)).unwrap();
        assert_eq!(r.r2r_bar, 0.0);
        assert_eq!(r.rr1_bar, 0.0);
        assert!((r.sum_rate - 0.75).abs() < 1e-12);
    }

    #[test]
    fn best_share_beats_grid() {
        let powers = NodePowers::new(10.0, 4.0, 6.0).unwrap();
        for (s1, s2, s3, s4) in [(1.0, 0.3, 0.4, 2.0), (0.1, 2.0, 1.5, 0.05), (3.0, 3.0, 0.2, 0.2)] {
            let a = mode_capacities(&ChannelDraw::new(s1, s2).unwrap(), &powers);
            let b = mode_capacities(&ChannelDraw::new(s3, s4).unwrap(), &powers);
            let g = |t: f64| a.c12r(t).min(b.cr2) + a.c21r(t).min(b.cr1);
            let grid = (0..=100).map(|i| g(i as f64 / 100.0)).fold(0.0, f64::max);
            assert!(g(best_mabc_share(&a, &b)) >= grid - 1e-12);
        }
    }

    #[test]
    fn three_mode_without_downlink_delivers_nothing() {
        let mut c = flat(1.0);
        c.cr1 = 0.0;
        c.cr2 = 0.0;
        let r = run_three_mode(static_slots(c, 1000), 0, &ThreeModeParams { mu1: 0.5, mu2: 0.5 }).unwrap();
        assert_eq!(r.sum_rate, 0.0);
    }

    // E{min(X, Y)} for independent capacities of exponential gains:
    // integral over x of P(X > x) P(Y > x).
    fn expected_min(snr_a: f64, snr_b: f64) -> f64 {
        let tail = |snr: f64, x: f64| (-(2f64.powf(x) - 1.0) / snr).exp();
        let (n, top) = (200_000, 40.0);
        let h = top / n as f64;
        (0..=n)
            .map(|i| {
                let x = i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * tail(snr_a, x) * tail(snr_b, x)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn rayleigh_two_way_and_tdbc_match_integration() {
        let stats = ChannelStats::from_db(3.0, -2.0).unwrap();
        let powers = NodePowers::from_db(10.0, 8.0, 12.0).unwrap();
        let model = FadingModel::from(stats);
        let (p1, p2, pr) = (powers.p1(), powers.p2(), powers.pr());
        let (o1, o2) = (stats.omega1(), stats.omega2());
        let d1 = expected_min(p1 * o1, pr * o2);
        let d2 = expected_min(p2 * o2, pr * o1);
        let r = run_two_way(SlotStream::new(&model, &powers, 21, 1_000_000)).unwrap();
        let oracle = (d1 + d2) / 4.0;
        assert!((r.sum_rate - oracle).abs() < 3.0 * r.std_error, "{} vs {oracle} (se {})", r.sum_rate, r.std_error);
        // within a TDBC cycle both directions share the broadcast slot but
        // each min still involves independent draws
        let r = run_tdbc(SlotStream::new(&model, &powers, 22, 999_999)).unwrap();
        let oracle = (d1 + d2) / 3.0;
        assert!((r.sum_rate - oracle).abs() < 3.0 * r.std_error, "{} vs {oracle} (se {})", r.sum_rate, r.std_error);
    }
}
