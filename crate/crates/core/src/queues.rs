//! Relay buffers and the per-slot queue dynamics of the six transmission modes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::CapacitySet;
use crate::error::{invalid, Result};

/// The six half-duplex transmission modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// user 1 -> relay
    M1,
    /// user 2 -> relay
    M2,
    /// both users -> relay (multiple access)
    M3,
    /// relay -> user 1
    M4,
    /// relay -> user 2
    M5,
    /// relay -> both users (broadcast)
    M6,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::M1, Mode::M2, Mode::M3, Mode::M4, Mode::M5, Mode::M6];

    /// Zero-based position, `M1 -> 0`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Mode> {
        Mode::ALL.get(i).copied().ok_or_else(|| invalid(format!("mode index {i} out of range")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.index() + 1)
    }
}

/// Contents of the relay buffers in bits/symbol.
///
/// `q1` holds data received from user 1 (destined to user 2), `q2` the
/// reverse direction. Both buffers are unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BufferState {
    q1: f64,
    q2: f64,
}

impl BufferState {
    pub fn new(q1: f64, q2: f64) -> Result<Self> {
        if !(q1.is_finite() && q2.is_finite() && q1 >= 0.0 && q2 >= 0.0) {
            return Err(invalid(format!("buffer contents must be finite and non-negative, got ({q1}, {q2})")));
        }
        Ok(Self { q1, q2 })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn q1(&self) -> f64 {
        self.q1
    }
    pub fn q2(&self) -> f64 {
        self.q2
    }
}

/// Realized rates of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub mode: Mode,
    pub r1r: f64,
    pub r2r: f64,
    pub rr1: f64,
    pub rr2: f64,
    /// Time-share applied in the multiple-access mode.
    pub t_used: Option<f64>,
}

/// Applies `mode` to the buffers for one slot.
///
/// Downlink rates are capped by what the opposite buffer held at the start
/// of the slot; in the broadcast mode both caps use the pre-slot state.
pub fn apply_mode(state: BufferState, mode: Mode, caps: &CapacitySet, t: f64) -> Result<(BufferState, SlotOutcome)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("time-share {t} outside [0, 1]")));
    }
    Ok(step(state, mode, caps, t))
}

#[inline]
pub(crate) fn step(state: BufferState, mode: Mode, caps: &CapacitySet, t: f64) -> (BufferState, SlotOutcome) {
    let BufferState { mut q1, mut q2 } = state;
    let mut out = SlotOutcome { mode, r1r: 0.0, r2r: 0.0, rr1: 0.0, rr2: 0.0, t_used: None };
    match mode {
        Mode::M1 => {
            out.r1r = caps.c1r;
            q1 += out.r1r;
        }
        Mode::M2 => {
            out.r2r = caps.c2r;
            q2 += out.r2r;
        }
        Mode::M3 => {
            out.r1r = caps.c12r(t);
            out.r2r = caps.c21r(t);
            out.t_used = Some(t);
            q1 += out.r1r;
            q2 += out.r2r;
        }
        Mode::M4 => {
            out.rr1 = caps.cr1.min(q2);
            q2 -= out.rr1;
        }
        Mode::M5 => {
            out.rr2 = caps.cr2.min(q1);
            q1 -= out.rr2;
        }
        Mode::M6 => {
            out.rr1 = caps.cr1.min(q2);
            out.rr2 = caps.cr2.min(q1);
            q1 -= out.rr2;
            q2 -= out.rr1;
        }
    }
    // min() above makes these exact, but guard against -0.0 noise.
    (BufferState { q1: q1.max(0.0), q2: q2.max(0.0) }, out)
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn caps(c1r: f64, c2r: f64, cr1: f64, cr2: f64) -> CapacitySet {
        CapacitySet { c1r, c2r, cr: c1r + c2r, cr1, cr2, c1r_first: c1r, c2r_first: c2r }
    }

    #[test]
    fn empty_buffer_supplies_nothing() {
        let (s, o) = apply_mode(BufferState::empty(), Mode::M4, &caps(1.0, 1.0, 2.0, 2.0), 0.0).unwrap();
        assert_eq!(o.rr1, 0.0);
        assert_eq!(s, BufferState::empty());
    }

    #[test]
    fn broadcast_uses_pre_slot_state() {
        let state = BufferState::new(5.0, 3.0).unwrap();
        let (s, o) = apply_mode(state, Mode::M6, &caps(0.0, 0.0, 2.0, 10.0), 0.0).unwrap();
        assert_eq!((o.rr1, o.rr2), (2.0, 5.0));
        assert_eq!((s.q1(), s.q2()), (0.0, 1.0));
    }

    #[test]
    fn multiple_access_adds_split_rates() {
        let c = CapacitySet { c1r: 0.9, c2r: 1.1, cr: 1.5, cr1: 0.0, cr2: 0.0, c1r_first: 0.4, c2r_first: 0.6 };
        assert!((c.c12r(0.0) - 0.4).abs() < 1e-15 && (c.c21r(0.0) - 1.1).abs() < 1e-15);
        let (s, o) = apply_mode(BufferState::new(1.0, 1.0).unwrap(), Mode::M3, &c, 0.0).unwrap();
        assert!((s.q1() - 1.4).abs() < 1e-12);
        assert!((s.q2() - 2.1).abs() < 1e-12);
        assert_eq!(o.t_used, Some(0.0));
        assert_eq!((o.rr1, o.rr2), (0.0, 0.0));
    }

    #[test]
    fn point_to_point_modes() {
        let c = caps(1.5, 2.5, 1.0, 1.0);
        let (s, o) = apply_mode(BufferState::empty(), Mode::M1, &c, 0.5).unwrap();
        assert_eq!((s.q1(), s.q2(), o.r1r, o.r2r), (1.5, 0.0, 1.5, 0.0));
        let (s, _) = apply_mode(s, Mode::M2, &c, 0.5).unwrap();
        assert_eq!((s.q1(), s.q2()), (1.5, 2.5));
        let (s, o) = apply_mode(s, Mode::M5, &c, 0.5).unwrap();
        assert_eq!((s.q1(), o.rr2, o.rr1), (0.5, 1.0, 0.0));
    }

    #[test]
    fn rejects_bad_time_share() {
        assert!(apply_mode(BufferState::empty(), Mode::M3, &caps(1.0, 1.0, 1.0, 1.0), 1.5).is_err());
        assert!(apply_mode(BufferState::empty(), Mode::M3, &caps(1.0, 1.0, 1.0, 1.0), f64::NAN).is_err());
        assert!(Mode::from_index(6).is_err());
        assert!(BufferState::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::default();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 1000.0);
    }

    proptest! {
        #[test]
        fn queues_stay_non_negative_and_conserve(
            steps in proptest::collection::vec((0usize..6, 0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0, 0.0f64..=1.0), 1..400)
        ) {
            let mut state = BufferState::empty();
            let (mut in1, mut out1, mut in2, mut out2) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
            for (m, a, b, c, d, t) in steps {
                let cs = CapacitySet { c1r: a, c2r: b, cr: a + b * 0.5, cr1: c, cr2: d, c1r_first: a * 0.5, c2r_first: b * 0.5 };
                let before = state;
                let (next, o) = apply_mode(state, Mode::from_index(m).unwrap(), &cs, t).unwrap();
                prop_assert!(next.q1() >= 0.0 && next.q2() >= 0.0);
                prop_assert!(o.rr2 <= before.q1() && o.rr1 <= before.q2());
                prop_assert!(o.rr1 <= cs.cr1 && o.rr2 <= cs.cr2);
                in1.add(o.r1r); out1.add(o.rr2); in2.add(o.r2r); out2.add(o.rr1);
                state = next;
            }
            let scale = in1.value().max(in2.value()).max(1.0);
            prop_assert!((in1.value() - out1.value() - state.q1()).abs() <= 1e-9 * scale);
            prop_assert!((in2.value() - out2.value() - state.q2()).abs() <= 1e-9 * scale);
        }
    }
}
