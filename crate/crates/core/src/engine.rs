//! The slotted simulation loop.
//!
//! Each slot: read the backlog, pick a packet and run the channel trial,
//! deliver or drop, append this slot's samples, then step the detector.
//! Slot `k <= ν` uses `p0` and samples taken in slots `t <= ν` come from
//! `f0`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, DetectorKind};
use crate::error::{QcdError, Result};
use crate::likelihood::{LlrModel, SlotObservation, SlotOutcome};
use crate::model::{Discipline, InitialQueue, ScenarioConfig};
use crate::par::{map_indexed, Parallelism};
use crate::queueing::{stationary_queue_draw, Departure, Packet, QueueBank};

/// Named random streams of one replication.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lane {
    Arrivals = 0,
    Channel = 1,
    Values = 2,
    Scheduler = 3,
    Init = 4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Each discipline draws its own arrivals, losses and values.
    Independent,
    /// Every discipline sees the same arrivals, channel uniforms and values.
    #[default]
    CoupledAcrossDisciplines,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngPolicy {
    pub master_seed: u64,
    pub coupling: Coupling,
}

impl RngPolicy {
    pub fn coupled(master_seed: u64) -> Self {
        RngPolicy { master_seed, coupling: Coupling::CoupledAcrossDisciplines }
    }

    pub fn independent(master_seed: u64) -> Self {
        RngPolicy { master_seed, coupling: Coupling::Independent }
    }

    /// The stream for `lane` of replication `index`.
    pub fn lane(&self, index: u64, discipline: &Discipline, lane: Lane) -> ChaCha8Rng {
        let salt = match self.coupling {
            Coupling::CoupledAcrossDisciplines => 0,
            Coupling::Independent => discipline_salt(discipline),
        };
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&index.to_le_bytes());
        key[16..24].copy_from_slice(&salt.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(lane as u64);
        rng
    }
}

fn discipline_salt(d: &Discipline) -> u64 {
    // FNV-1a over the variant name and parameters.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    };
    eat(d.name().as_bytes());
    eat(&d.alpha().unwrap_or(0.0).to_bits().to_le_bytes());
    eat(&(d.window().unwrap_or(0) as u64).to_le_bytes());
    h | 1
}

struct Lanes {
    arrivals: ChaCha8Rng,
    channel: ChaCha8Rng,
    values: ChaCha8Rng,
    scheduler: ChaCha8Rng,
}

/// Everything that happened in one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub slot: u64,
    /// Total backlog at the start of the slot.
    pub queue_len: usize,
    pub outcome: SlotOutcome,
    pub sensor: Option<usize>,
    pub sample_index: Option<u64>,
    pub value: Option<f64>,
    /// Packet dropped after its last allowed attempt.
    pub dropped: bool,
    pub arrivals: u32,
    /// Increment fed to the detector (before any reordering).
    pub llr: f64,
    pub statistic: f64,
    pub alarm: bool,
}

impl SlotRecord {
    /// One trace line: `k, Q_k, y, U_k, J_k, Z_k, L_k, C_k`. Missing fields
    /// print as `*`; sensors are numbered from 1.
    pub fn trace_line(&self) -> String {
        let star = |o: Option<String>| o.unwrap_or_else(|| "*".to_string());
        format!(
            "{}, {}, {}, {}, {}, {}, {}, {}",
            self.slot,
            self.queue_len,
            self.outcome.symbol(),
            star(self.sensor.map(|s| (s + 1).to_string())),
            star(self.sample_index.map(|j| j.to_string())),
            star(self.value.map(|z| format!("{z:.6}"))),
            format_args!("{:.6}", self.llr),
            format_args!("{:.6}", self.statistic),
        )
    }
}

pub const TRACE_HEADER: &str = "k, Q_k, y, U_k, J_k, Z_k, L_k, C_k";

/// Writes a header line and one line per slot.
pub fn write_trace<W: Write>(mut out: W, records: &[SlotRecord]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.trace_line())?;
    }
    Ok(())
}

/// One replication in progress.
pub struct Simulation {
    config: ScenarioConfig,
    model: LlrModel,
    info: Vec<f64>,
    bank: QueueBank,
    detector: Option<Detector>,
    lanes: Lanes,
    next_slot: u64,
    next_index: Vec<u64>,
    prechange_arrivals: u64,
    post_from_start: bool,
}

impl Simulation {
    pub fn new(
        config: &ScenarioConfig,
        kind: DetectorKind,
        threshold: f64,
        policy: RngPolicy,
        index: u64,
    ) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(kind, threshold)?;
        Self::build(config, Some(detector), policy, index, false)
    }

    /// Queue and channel dynamics only, entirely under the post-change law.
    pub fn post_change_dynamics(config: &ScenarioConfig, policy: RngPolicy, index: u64) -> Result<Self> {
        config.validate()?;
        Self::build(config, None, policy, index, true)
    }

    fn build(
        config: &ScenarioConfig,
        detector: Option<Detector>,
        policy: RngPolicy,
        index: u64,
        post_from_start: bool,
    ) -> Result<Self> {
        let lane = |l| policy.lane(index, &config.discipline, l);
        let mut init = lane(Lane::Init);
        let n = config.sensors.len();
        let mut bank = QueueBank::new(n);
        let mut next_index = vec![0u64; n];
        for (s, sensor) in config.sensors.iter().enumerate() {
            let backlog = match config.initial_queue {
                InitialQueue::Known(q) => q as u64,
                InitialQueue::Stationary => {
                    stationary_queue_draw(sensor.sampling.rate(), config.channel.p0, &mut init)?
                }
            };
            // Oldest first, sampled in slots 1 - backlog ..= 0.
            for j in 0..backlog {
                next_index[s] += 1;
                bank.queue_mut(s).push(Packet {
                    sample_index: next_index[s],
                    sample_slot: j as i64 + 1 - backlog as i64,
                    sensor: s,
                    value: sensor.density.sample(false, &mut init),
                    attempts: 0,
                    prestart: true,
                });
            }
        }
        Ok(Simulation {
            model: LlrModel::from_config(config),
            info: config.sensor_information(),
            config: config.clone(),
            bank,
            detector,
            lanes: Lanes {
                arrivals: lane(Lane::Arrivals),
                channel: lane(Lane::Channel),
                values: lane(Lane::Values),
                scheduler: lane(Lane::Scheduler),
            },
            next_slot: 1,
            next_index,
            prechange_arrivals: 0,
            post_from_start,
        })
    }

    fn is_post(&self, slot: u64) -> bool {
        self.post_from_start || self.config.change_slot.is_some_and(|nu| slot > nu)
    }

    pub fn next_slot(&self) -> u64 {
        self.next_slot
    }

    pub fn queues(&self) -> &QueueBank {
        &self.bank
    }

    pub fn detector(&self) -> Option<&Detector> {
        self.detector.as_ref()
    }

    /// Samples taken in slots `1..=ν` so far.
    pub fn prechange_arrivals(&self) -> u64 {
        self.prechange_arrivals
    }

    /// Advances one slot.
    pub fn step(&mut self) -> Result<SlotRecord> {
        let k = self.next_slot;
        let post = self.is_post(k);
        let queue_len = self.bank.total_len();

        let choice = self.bank.choose(
            k as i64,
            &self.config.discipline,
            self.config.access,
            &self.info,
            &mut self.lanes.scheduler,
        );
        // One channel uniform per slot, used or not.
        let u: f64 = self.lanes.channel.random();
        let success = choice.is_some() && self.config.channel.trial(post, u);
        let departure = self.bank.resolve(choice, success, self.config.retransmit_cap);

        let mut arrivals = 0;
        for s in 0..self.config.sensors.len() {
            let sensor = &self.config.sensors[s];
            if sensor.sampling.arrives(k, &mut self.lanes.arrivals) {
                arrivals += 1;
                self.next_index[s] += 1;
                let value = sensor.density.sample(post, &mut self.lanes.values);
                self.bank.queue_mut(s).push(Packet {
                    sample_index: self.next_index[s],
                    sample_slot: k as i64,
                    sensor: s,
                    value,
                    attempts: 0,
                    prestart: false,
                });
                if !post {
                    self.prechange_arrivals += 1;
                }
            }
        }

        let (obs, dropped) = match departure {
            Departure::Idle => (SlotObservation::idle(k), false),
            Departure::Retained => (SlotObservation::failure(k), false),
            Departure::Dropped(_) => (SlotObservation::failure(k), true),
            Departure::Delivered(p) => (
                SlotObservation {
                    slot: k,
                    outcome: SlotOutcome::Success,
                    sensor: Some(p.sensor),
                    sample_index: Some(p.sample_index),
                    sample_slot: Some(p.sample_slot),
                    value: Some(p.value),
                    queue_nonempty: true,
                    prestart_delivery: p.prestart,
                },
                false,
            ),
        };

        let (llr, statistic, alarm) = match &mut self.detector {
            Some(d) => {
                let llr = d.update(&obs, &self.model)?;
                (llr, d.statistic(), d.alarmed_at().is_some())
            }
            None => (0.0, 0.0, false),
        };
        self.next_slot += 1;
        Ok(SlotRecord {
            slot: k,
            queue_len,
            outcome: obs.outcome,
            sensor: obs.sensor,
            sample_index: obs.sample_index,
            value: obs.value,
            dropped,
            arrivals,
            llr,
            statistic,
            alarm,
        })
    }
}

/// Outcome of one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub index: u64,
    pub seed: u64,
    pub change_slot: Option<u64>,
    /// First alarm slot; `None` when the horizon ran out first.
    pub stopping_slot: Option<u64>,
    pub horizon: u64,
    /// True count of samples taken in slots `1..=ν` (diagnostic only).
    pub prechange_arrivals: u64,
}

impl ReplicationResult {
    pub fn truncated(&self) -> bool {
        self.stopping_slot.is_none()
    }

    /// `(T - ν)^+` when both are finite.
    pub fn delay(&self) -> Option<u64> {
        Some(self.stopping_slot?.saturating_sub(self.change_slot?))
    }

    /// Whether the alarm came at or before the change slot.
    pub fn false_alarm(&self) -> bool {
        match (self.stopping_slot, self.change_slot) {
            (Some(t), Some(nu)) => t <= nu,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Runs until the first alarm or the horizon.
pub fn run_replication(
    config: &ScenarioConfig,
    kind: DetectorKind,
    threshold: f64,
    policy: RngPolicy,
    index: u64,
) -> Result<ReplicationResult> {
    let mut sim = Simulation::new(config, kind, threshold, policy, index)?;
    let mut stopping_slot = None;
    while sim.next_slot() <= config.horizon {
        if sim.step()?.alarm {
            stopping_slot = Some(sim.next_slot() - 1);
            break;
        }
    }
    Ok(ReplicationResult {
        index,
        seed: policy.master_seed,
        change_slot: config.change_slot,
        stopping_slot,
        horizon: config.horizon,
        prechange_arrivals: sim.prechange_arrivals(),
    })
}

/// Every slot record of one replication, stopping after the first alarm.
pub fn run_trace(
    config: &ScenarioConfig,
    kind: DetectorKind,
    threshold: f64,
    policy: RngPolicy,
    index: u64,
) -> Result<Vec<SlotRecord>> {
    let mut sim = Simulation::new(config, kind, threshold, policy, index)?;
    let mut out = Vec::new();
    while sim.next_slot() <= config.horizon {
        let rec = sim.step()?;
        let alarm = rec.alarm;
        out.push(rec);
        if alarm {
            break;
        }
    }
    Ok(out)
}

/// Replications `0..reps`, in index order regardless of parallelism.
pub fn run_batch(
    config: &ScenarioConfig,
    kind: DetectorKind,
    threshold: f64,
    reps: u64,
    policy: RngPolicy,
    parallelism: Parallelism,
) -> Result<Vec<ReplicationResult>> {
    if reps == 0 {
        return Err(QcdError::config("at least one replication is required"));
    }
    config.validate()?;
    map_indexed(reps, parallelism, |i| run_replication(config, kind, threshold, policy, i))
}

/// Strict running maxima of a detector statistic along one path, from which
/// the stopping time for any threshold below the cap can be read off.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordPath {
    /// `(value, slot)` with strictly increasing values.
    pub records: Vec<(f64, u64)>,
    /// Last slot simulated.
    pub end_slot: u64,
    pub change_slot: Option<u64>,
    /// The path stopped once the running maximum exceeded this.
    pub cap: f64,
}

impl RecordPath {
    /// `T(h) = min{n : C_n > h}`, or `None` if the path never exceeds `h`.
    ///
    /// # Panics
    /// When `h` is at or above the cap and the path stopped because of it.
    pub fn stopping_slot(&self, h: f64) -> Option<u64> {
        let pos = self.records.partition_point(|(v, _)| *v <= h);
        match self.records.get(pos) {
            Some(&(_, slot)) => Some(slot),
            None => {
                assert!(
                    !(h >= self.cap && self.records.last().is_some_and(|(v, _)| *v > self.cap)),
                    "threshold {h} is beyond the recorded cap {}",
                    self.cap
                );
                None
            }
        }
    }

    pub fn covers(&self, h: f64) -> bool {
        h < self.cap || !self.records.last().is_some_and(|(v, _)| *v > self.cap)
    }
}

/// Simulates with no threshold, recording running maxima until one exceeds
/// `cap` or the horizon ends.
pub fn run_record_path(
    config: &ScenarioConfig,
    kind: DetectorKind,
    cap: f64,
    policy: RngPolicy,
    index: u64,
) -> Result<RecordPath> {
    let mut sim = Simulation::new(config, kind, f64::INFINITY, policy, index)?;
    let mut records = Vec::new();
    let mut best = 0.0f64;
    let mut end_slot = 0;
    while sim.next_slot() <= config.horizon {
        let rec = sim.step()?;
        end_slot = rec.slot;
        if rec.statistic > best {
            best = rec.statistic;
            records.push((best, rec.slot));
            if best > cap {
                break;
            }
        }
    }
    Ok(RecordPath { records, end_slot, change_slot: config.change_slot, cap })
}

pub fn run_batch_records(
    config: &ScenarioConfig,
    kind: DetectorKind,
    cap: f64,
    reps: u64,
    policy: RngPolicy,
    parallelism: Parallelism,
) -> Result<Vec<RecordPath>> {
    config.validate()?;
    map_indexed(reps, parallelism, |i| run_record_path(config, kind, cap, policy, i))
}

/// Fraction of `slots` post-change slots with a non-empty queue, starting
/// from the configured initial backlog.
pub fn estimate_occupancy(config: &ScenarioConfig, slots: u64, seed: u64) -> Result<f64> {
    if slots == 0 {
        return Err(QcdError::config("need at least one slot"));
    }
    let mut sim = Simulation::post_change_dynamics(config, RngPolicy::coupled(seed), 0)?;
    let mut busy = 0u64;
    for _ in 0..slots {
        if sim.step()?.queue_len > 0 {
            busy += 1;
        }
    }
    Ok(busy as f64 / slots as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelModel, DensityModel, SamplingProcess};

    fn config(r: f64) -> ScenarioConfig {
        let mut c = ScenarioConfig::single_sensor(
            SamplingProcess::Bernoulli { rate: r },
            DensityModel::gaussian(0.0, 1.0, 1.0),
            ChannelModel::new(0.7, 0.6).unwrap(),
        );
        c.horizon = 2_000;
        c
    }

    #[test]
    fn same_seed_same_trace() {
        let c = config(0.3);
        let a = run_trace(&c, DetectorKind::Recursive, 1e9, RngPolicy::coupled(5), 3).unwrap();
        let b = run_trace(&c, DetectorKind::Recursive, 1e9, RngPolicy::coupled(5), 3).unwrap();
        assert_eq!(a, b);
        let other = run_trace(&c, DetectorKind::Recursive, 1e9, RngPolicy::coupled(5), 4).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn queue_recursion_and_idle_iff_empty() {
        let c = config(0.4);
        let trace = run_trace(&c, DetectorKind::Recursive, 1e9, RngPolicy::coupled(1), 0).unwrap();
        for w in trace.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            assert_eq!(a.outcome == SlotOutcome::Idle, a.queue_len == 0);
            let served = (a.outcome == SlotOutcome::Success) as usize;
            assert_eq!(b.queue_len, a.queue_len - served + a.arrivals as usize);
        }
    }

    #[test]
    fn zero_information_model_never_alarms() {
        let mut c = ScenarioConfig::single_sensor(
            SamplingProcess::Bernoulli { rate: 0.3 },
            DensityModel::gaussian(0.0, 0.0, 1.0),
            ChannelModel::new(0.6, 0.6).unwrap(),
        );
        c.horizon = 500;
        let r = run_replication(&c, DetectorKind::Recursive, 1e-12, RngPolicy::coupled(0), 0).unwrap();
        assert!(r.truncated());
        assert_eq!(r.delay(), None);
    }

    #[test]
    fn tiny_threshold_stops_at_first_positive_increment() {
        let c = config(0.3);
        for i in 0..20 {
            let trace = run_trace(&c, DetectorKind::Recursive, 1e-12, RngPolicy::coupled(2), i).unwrap();
            let first = trace.iter().position(|r| r.llr > 1e-12).unwrap();
            assert_eq!(trace.len(), first + 1);
        }
    }

    #[test]
    fn record_path_reproduces_direct_stopping_times() {
        let mut c = config(0.3);
        c.change_slot = None;
        for i in 0..10 {
            let path = run_record_path(&c, DetectorKind::Generalized, 6.0, RngPolicy::coupled(9), i).unwrap();
            for h in [0.5, 2.0, 4.0, 5.9] {
                let direct = run_replication(&c, DetectorKind::Generalized, h, RngPolicy::coupled(9), i).unwrap();
                assert_eq!(path.stopping_slot(h), direct.stopping_slot);
            }
        }
    }

    #[test]
    fn coupled_disciplines_share_arrivals_and_channel() {
        let mut f = config(0.45);
        f.change_slot = None;
        let mut l = f.clone();
        l.discipline = Discipline::Lcfs;
        let a = run_trace(&f, DetectorKind::Generalized, 1e9, RngPolicy::coupled(4), 0).unwrap();
        let b = run_trace(&l, DetectorKind::Generalized, 1e9, RngPolicy::coupled(4), 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.arrivals, y.arrivals);
            assert_eq!(x.queue_len, y.queue_len);
            assert_eq!(x.outcome, y.outcome);
        }
        // Independent streams differ.
        let c = run_trace(&l, DetectorKind::Generalized, 1e9, RngPolicy::independent(4), 0).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.arrivals != y.arrivals));
    }

    #[test]
    fn backlog_is_flagged_and_indexed_first() {
        let mut c = config(0.2);
        c.initial_queue = InitialQueue::Known(3);
        let trace = run_trace(&c, DetectorKind::Recursive, 1e9, RngPolicy::coupled(0), 0).unwrap();
        assert_eq!(trace[0].queue_len, 3);
        let first = trace.iter().find(|r| r.outcome == SlotOutcome::Success).unwrap();
        assert_eq!(first.sample_index, Some(1));
        let line = first.trace_line();
        assert_eq!(line.split(", ").count(), 8);
    }

    #[test]
    fn batch_is_parallelism_invariant() {
        let c = config(0.3);
        let seq = run_batch(&c, DetectorKind::Recursive, 5.0, 64, RngPolicy::coupled(1), Parallelism::Sequential).unwrap();
        let par = run_batch(&c, DetectorKind::Recursive, 5.0, 64, RngPolicy::coupled(1), Parallelism::Threads(8)).unwrap();
        assert_eq!(seq, par);
        let one = run_replication(&c, DetectorKind::Recursive, 5.0, RngPolicy::coupled(1), 0).unwrap();
        assert_eq!(seq[0], one);
    }
}
