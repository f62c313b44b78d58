//! Slot-by-slot Monte Carlo runs and parameter sweeps.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineId};
use crate::channel::{db_to_linear, mode_capacities, CapacitySet, ChannelStats, FadingModel, NodePowers};
use crate::error::{invalid, Error, Result};
use crate::policy::{
    calibrate_on, calibrate_three_mode, draw_coins, select_mode, CalibrationSample, PolicyParams, SnrRegion,
    ThreeModeParams,
};
use crate::queues::{step, BufferState, CompensatedSum, Mode};
use crate::rng::{derive_seed, stream, Stream};

/// Smallest run length accepted by [`SimConfig::validate`].
pub const MIN_SLOTS: u64 = 1_000;

/// Number of batches behind [`SumRateReport::std_error`].
pub const BATCHES: usize = 100;

/// Simulated protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Proposed,
    TwoWay,
    Tdbc,
    /// multiple access + broadcast with a fixed equal time-share
    Mabc,
    /// multiple access + broadcast with the time-share chosen per cycle
    MabcOpt,
    ThreeMode,
}

impl Protocol {
    pub const ALL: [Protocol; 6] =
        [Protocol::Proposed, Protocol::TwoWay, Protocol::Tdbc, Protocol::Mabc, Protocol::MabcOpt, Protocol::ThreeMode];

    /// Stable label used in tables and seed derivation.
    pub fn label(self) -> &'static str {
        match self {
            Protocol::Proposed => "proposed",
            Protocol::TwoWay => "twoway",
            Protocol::Tdbc => "tdbc",
            Protocol::Mabc => "mabc",
            Protocol::MabcOpt => "mabc_opt",
            Protocol::ThreeMode => "threemode",
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }

    pub fn baseline(self) -> Option<BaselineId> {
        match self {
            Protocol::Proposed => None,
            Protocol::TwoWay => Some(BaselineId::TwoWay),
            Protocol::Tdbc => Some(BaselineId::Tdbc),
            Protocol::Mabc => Some(BaselineId::Mabc),
            Protocol::MabcOpt => Some(BaselineId::MabcOpt),
            Protocol::ThreeMode => Some(BaselineId::ThreeMode),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_slots: u64,
    pub seed: u64,
    /// Leading slots excluded from the averages.
    pub warmup_discard: u64,
    pub powers: NodePowers,
    pub model: FadingModel,
    pub protocol: Protocol,
    /// Calibration sample size.
    pub calibration_samples: usize,
    /// Pre-calibrated policy for [`Protocol::Proposed`], e.g. from a cache.
    pub policy: Option<PolicyParams>,
}

impl SimConfig {
    pub fn new(stats: ChannelStats, powers: NodePowers, protocol: Protocol) -> Self {
        Self {
            n_slots: 1_000_000,
            seed: 0,
            warmup_discard: 0,
            powers,
            model: stats.into(),
            protocol,
            calibration_samples: 100_000,
            policy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots < MIN_SLOTS {
            return Err(invalid(format!("n_slots must be at least {MIN_SLOTS}, got {}", self.n_slots)));
        }
        if self.warmup_discard >= self.n_slots {
            return Err(invalid(format!(
                "warmup_discard {} must be below n_slots {}",
                self.warmup_discard, self.n_slots
            )));
        }
        if let Some(p) = &self.policy {
            p.validate()?;
        }
        Ok(())
    }

    /// Sample the thresholds are calibrated on: stratified for Rayleigh
    /// fading, the exact outcome distribution for a discrete channel.
    pub fn calibration_sample(&self) -> Result<CalibrationSample> {
        if let FadingModel::Discrete(d) = &self.model {
            return Ok(CalibrationSample::exact(d, &self.powers));
        }
        CalibrationSample::stratified(
            &self.model,
            &self.powers,
            self.calibration_samples,
            &mut stream(self.seed, Stream::Calibration),
        )
    }
}

/// Long-run averages of one run, in bits/symbol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SumRateReport {
    pub protocol: Protocol,
    /// Slots entering the averages.
    pub n_slots: u64,
    pub r1r_bar: f64,
    pub r2r_bar: f64,
    pub rr1_bar: f64,
    pub rr2_bar: f64,
    pub sum_rate: f64,
    /// Fraction of slots per mode, `M1` first.
    pub mode_histogram: [f64; 6],
    /// `|r1r_bar - rr2_bar|`
    pub residual_c1: f64,
    /// `|r2r_bar - rr1_bar|`
    pub residual_c2: f64,
    pub final_queues: (f64, f64),
    /// Batch-means standard error of `sum_rate`.
    pub std_error: f64,
    pub region: Option<SnrRegion>,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub t_share: Option<f64>,
    pub policy: Option<PolicyParams>,
}

/// Channel draws of one run turned into capacity sets.
pub struct SlotStream {
    model: FadingModel,
    powers: NodePowers,
    rng: ChaCha8Rng,
    remaining: u64,
}

impl SlotStream {
    pub fn new(model: &FadingModel, powers: &NodePowers, seed: u64, n_slots: u64) -> Self {
        Self { model: model.clone(), powers: *powers, rng: stream(seed, Stream::Channel), remaining: n_slots }
    }
}

impl Iterator for SlotStream {
    type Item = CapacitySet;

    fn next(&mut self) -> Option<CapacitySet> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(mode_capacities(&self.model.sample(&mut self.rng), &self.powers))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}

impl ExactSizeIterator for SlotStream {}

/// Running sums behind a [`SumRateReport`].
#[derive(Debug, Clone)]
pub(crate) struct Accumulator {
    total: u64,
    seen: u64,
    r1r: CompensatedSum,
    r2r: CompensatedSum,
    rr1: CompensatedSum,
    rr2: CompensatedSum,
    hist: [u64; 6],
    batch_sums: Vec<CompensatedSum>,
    batch_sizes: Vec<u64>,
}

impl Accumulator {
    /// Expects exactly `total` calls to [`Accumulator::record`].
    pub(crate) fn new(total: u64) -> Self {
        Self {
            total,
            seen: 0,
            r1r: CompensatedSum::default(),
            r2r: CompensatedSum::default(),
            rr1: CompensatedSum::default(),
            rr2: CompensatedSum::default(),
            hist: [0; 6],
            batch_sums: vec![CompensatedSum::default(); BATCHES],
            batch_sizes: vec![0; BATCHES],
        }
    }

    /// `slot` is the absolute slot index, for error reports.
    pub(crate) fn record(&mut self, slot: u64, mode: Mode, r1r: f64, r2r: f64, rr1: f64, rr2: f64) -> Result<()> {
        let delivered = rr1 + rr2;
        if !(r1r + r2r + delivered).is_finite() {
            return Err(Error::Internal { slot, reason: "non-finite rate".into() });
        }
        self.r1r.add(r1r);
        self.r2r.add(r2r);
        self.rr1.add(rr1);
        self.rr2.add(rr2);
        self.hist[mode.index()] += 1;
        let b = ((self.seen as u128 * BATCHES as u128) / self.total.max(1) as u128) as usize;
        let b = b.min(BATCHES - 1);
        self.batch_sums[b].add(delivered);
        self.batch_sizes[b] += 1;
        self.seen += 1;
        Ok(())
    }

    pub(crate) fn finish(&self, protocol: Protocol, queues: BufferState) -> Result<SumRateReport> {
        let n = self.seen;
        if n == 0 {
            return Err(invalid("no slot entered the averages"));
        }
        let nf = n as f64;
        let (r1r, r2r, rr1, rr2) =
            (self.r1r.value() / nf, self.r2r.value() / nf, self.rr1.value() / nf, self.rr2.value() / nf);
        let sum = self.rr1.value() + self.rr2.value();
        let means: Vec<f64> = self
            .batch_sums
            .iter()
            .zip(&self.batch_sizes)
            .filter(|(_, &k)| k > 0)
            .map(|(s, &k)| s.value() / k as f64)
            .collect();
        let std_error = if means.len() > 1 {
            let m = means.iter().sum::<f64>() / means.len() as f64;
            let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
            (var / means.len() as f64).sqrt()
        } else {
            0.0
        };
        let report = SumRateReport {
            protocol,
            n_slots: n,
            r1r_bar: r1r,
            r2r_bar: r2r,
            rr1_bar: rr1,
            rr2_bar: rr2,
            sum_rate: sum / nf,
            mode_histogram: self.hist.map(|h| h as f64 / nf),
            residual_c1: (r1r - rr2).abs(),
            residual_c2: (r2r - rr1).abs(),
            final_queues: (queues.q1(), queues.q2()),
            std_error,
            region: None,
            mu1: None,
            mu2: None,
            t_share: None,
            policy: None,
        };
        if !report.sum_rate.is_finite() || !std_error.is_finite() {
            return Err(Error::Internal { slot: n, reason: "non-finite average".into() });
        }
        Ok(report)
    }
}

/// Runs the buffer-aided policy `choose` slot by slot with queue truncation.
pub(crate) fn run_adaptive(
    protocol: Protocol,
    slots: impl Iterator<Item = CapacitySet>,
    n_slots: u64,
    warmup: u64,
    t: f64,
    mut choose: impl FnMut(&CapacitySet) -> Mode,
) -> Result<SumRateReport> {
    let mut acc = Accumulator::new(n_slots - warmup);
    let mut state = BufferState::empty();
    for (i, caps) in slots.take(n_slots as usize).enumerate() {
        let mode = choose(&caps);
        let (next, out) = step(state, mode, &caps, t);
        state = next;
        if i as u64 >= warmup {
            acc.record(i as u64, mode, out.r1r, out.r2r, out.rr1, out.rr2)?;
        }
    }
    acc.finish(protocol, state)
}

/// Simulates `config`, calibrating first when the protocol needs thresholds.
///
/// Channel draws and the calibration sample depend only on the seed, so all
/// protocols run with the same seed see the same channel realization.
pub fn run(config: &SimConfig) -> Result<SumRateReport> {
    config.validate()?;
    let slots = SlotStream::new(&config.model, &config.powers, config.seed, config.n_slots);
    let (n, warmup) = (config.n_slots, config.warmup_discard);
    let mut report = match config.protocol {
        Protocol::Proposed => {
            let params = match config.policy {
                Some(p) => p,
                None => calibrate_on(&config.calibration_sample()?, &config.powers)?.params,
            };
            let mut coins = stream(derive_seed(config.seed, &[config.protocol.id()]), Stream::Coins);
            let mut r = run_adaptive(config.protocol, slots, n, warmup, params.t_share, |caps| {
                select_mode(caps, &params, &draw_coins(&params, &mut coins)).mode
            })?;
            r.region = Some(params.region);
            r.mu1 = Some(params.mu1);
            r.mu2 = Some(params.mu2);
            r.t_share = Some(params.t_share);
            r.policy = Some(params);
            r
        }
        Protocol::ThreeMode => {
            let tm: ThreeModeParams = calibrate_three_mode(&config.calibration_sample()?)?;
            let mut r = baselines::run_three_mode(slots, warmup, &tm)?;
            r.mu1 = Some(tm.mu1);
            r.mu2 = Some(tm.mu2);
            r
        }
        Protocol::TwoWay => baselines::run_two_way(slots.skip(warmup as usize))?,
        Protocol::Tdbc => baselines::run_tdbc(slots.skip(warmup as usize))?,
        Protocol::Mabc => baselines::run_mabc(slots.skip(warmup as usize))?,
        Protocol::MabcOpt => baselines::run_mabc_opt(slots.skip(warmup as usize))?,
    };
    if matches!(config.protocol, Protocol::Mabc) {
        report.t_share = Some(baselines::MABC_T);
    }
    Ok(report)
}

/// Seed of sweep point `(omega1_idx, pr_idx)`.
pub fn scenario_seed(base: u64, omega1_idx: usize, pr_idx: usize) -> u64 {
    derive_seed(base, &[omega1_idx as u64, pr_idx as u64])
}

/// A grid of scenarios over `omega1` and the relay power.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub omega1_db: Vec<f64>,
    pub omega2_db: f64,
    pub p1_db: f64,
    pub p2_db: f64,
    pub pr_db: Vec<f64>,
    pub protocols: Vec<Protocol>,
    pub n_slots: u64,
    pub warmup_discard: u64,
    pub seed: u64,
    pub calibration_samples: usize,
    /// Worker threads; 0 lets the pool decide.
    pub parallelism: usize,
    /// Policies known in advance, keyed by `(omega1_idx, pr_idx)`.
    pub cached: BTreeMap<(usize, usize), PolicyParams>,
}

/// One row of a sweep; failures are kept, not propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega1_db: f64,
    pub pr_db: f64,
    pub omega1_idx: usize,
    pub pr_idx: usize,
    pub protocol: Protocol,
    pub seed: u64,
    pub result: Result<SumRateReport>,
}

impl SweepPlan {
    pub fn config(&self, omega1_idx: usize, pr_idx: usize, protocol: Protocol) -> Result<SimConfig> {
        let stats = ChannelStats::new(db_to_linear(self.omega1_db[omega1_idx])?, db_to_linear(self.omega2_db)?)?;
        let powers = NodePowers::from_db(self.p1_db, self.p2_db, self.pr_db[pr_idx])?;
        Ok(SimConfig {
            n_slots: self.n_slots,
            seed: scenario_seed(self.seed, omega1_idx, pr_idx),
            warmup_discard: self.warmup_discard,
            powers,
            model: stats.into(),
            protocol,
            calibration_samples: self.calibration_samples,
            policy: if protocol == Protocol::Proposed { self.cached.get(&(omega1_idx, pr_idx)).copied() } else { None },
        })
    }
}

/// Runs every `(pr, omega1, protocol)` tuple of `plan`, in that row order.
pub fn sweep(plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    if plan.omega1_db.is_empty() || plan.pr_db.is_empty() || plan.protocols.is_empty() {
        return Err(invalid("sweep needs at least one omega1, relay power and protocol"));
    }
    let mut tuples = Vec::new();
    for j in 0..plan.pr_db.len() {
        for i in 0..plan.omega1_db.len() {
            for &p in &plan.protocols {
                tuples.push((i, j, p));
            }
        }
    }
    let work = |&(i, j, protocol): &(usize, usize, Protocol)| SweepRow {
        omega1_db: plan.omega1_db[i],
        pr_db: plan.pr_db[j],
        omega1_idx: i,
        pr_idx: j,
        protocol,
        seed: scenario_seed(plan.seed, i, j),
        result: plan.config(i, j, protocol).and_then(|c| run(&c)),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| tuples.par_iter().map(work).collect()))
}
