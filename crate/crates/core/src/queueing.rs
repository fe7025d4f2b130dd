//! Transmit queues: packet records, service disciplines, the per-slot
//! update, and channel access when several sensors share the link.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{QcdError, Result};
use crate::model::{Discipline, SensorAccess};

#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    /// Per-sensor sequence number, starting at 1 with the oldest backlog
    /// packet.
    pub sample_index: u64,
    /// Slot the sample was taken in; backlog packets have `sample_slot <= 0`.
    pub sample_slot: i64,
    /// Zero-based sensor id.
    pub sensor: usize,
    pub value: f64,
    pub attempts: u32,
    /// Sampled before the procedure started; discarded on delivery.
    pub prestart: bool,
}

impl Packet {
    /// Age in slots at the start of `slot`.
    pub fn age(&self, slot: i64) -> i64 {
        slot - self.sample_slot
    }

    /// Recency rank: larger is more recent. Within one slot the smaller
    /// sensor id counts as more recent.
    fn recency(&self) -> (i64, std::cmp::Reverse<usize>, u64) {
        (self.sample_slot, std::cmp::Reverse(self.sensor), self.sample_index)
    }
}

/// What happened to the packet that was on the air this slot.
#[derive(Clone, Debug, PartialEq)]
pub enum Departure {
    /// Nothing was transmitted.
    Idle,
    Delivered(Packet),
    /// Failed and stays queued for another attempt.
    Retained,
    /// Failed for the `K`-th time and was removed.
    Dropped(Packet),
}

/// Per-sensor buffer kept sorted by sampling order (oldest first).
#[derive(Clone, Debug, Default)]
pub struct TransmitQueue {
    buffer: VecDeque<Packet>,
}

impl TransmitQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<&Packet> {
        self.buffer.get(pos)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Packet> + ExactSizeIterator {
        self.buffer.iter()
    }

    /// Inserts keeping sampling order. New arrivals are always the newest,
    /// so this is O(1) in the simulator.
    pub fn push(&mut self, packet: Packet) {
        let key = packet.recency();
        let pos = self
            .buffer
            .iter()
            .rposition(|p| p.recency() <= key)
            .map_or(0, |i| i + 1);
        self.buffer.insert(pos, packet);
    }

    /// Position of the packet `discipline` transmits in `slot`, or `None`
    /// when empty. `info` holds `I*` per sensor id.
    pub fn select_packet<R: Rng>(
        &self,
        slot: i64,
        discipline: &Discipline,
        info: &[f64],
        rng: &mut R,
    ) -> Option<usize> {
        if self.buffer.is_empty() {
            return None;
        }
        let n = self.buffer.len();
        let pos = match *discipline {
            Discipline::Fcfs => 0,
            Discipline::Lcfs => n - 1,
            Discipline::Random => rng.random_range(0..n),
            Discipline::DiscountedInfo { alpha } => {
                let ln_alpha = alpha.ln();
                (0..n)
                    .max_by(|&a, &b| {
                        discounted_cmp(&self.buffer[a], &self.buffer[b], slot, ln_alpha, info)
                    })
                    .expect("non-empty")
            }
            Discipline::LookBack { window } => {
                let start = n.saturating_sub(window);
                (start..n)
                    .max_by(|&a, &b| lookback_cmp(&self.buffer[a], &self.buffer[b], info))
                    .expect("non-empty")
            }
        };
        Some(pos)
    }

    /// Resolves this slot's transmission and appends the arrival.
    ///
    /// On success the selected packet leaves; on failure its attempt count
    /// grows and it is dropped once it reaches `cap`.
    pub fn slot_update(
        &mut self,
        selected: Option<usize>,
        success: bool,
        arrival: Option<Packet>,
        cap: Option<u32>,
    ) -> Departure {
        let departure = self.resolve(selected, success, cap);
        if let Some(p) = arrival {
            self.push(p);
        }
        departure
    }

    fn resolve(&mut self, selected: Option<usize>, success: bool, cap: Option<u32>) -> Departure {
        let Some(pos) = selected else {
            assert!(!success, "success reported with nothing transmitted");
            return Departure::Idle;
        };
        assert!(pos < self.buffer.len(), "selected packet {pos} is not queued");
        if success {
            let mut p = self.buffer.remove(pos).expect("checked above");
            p.attempts += 1;
            return Departure::Delivered(p);
        }
        let p = &mut self.buffer[pos];
        p.attempts += 1;
        if cap.is_some_and(|k| p.attempts >= k) {
            Departure::Dropped(self.buffer.remove(pos).expect("checked above"))
        } else {
            Departure::Retained
        }
    }
}

fn sensor_info(info: &[f64], sensor: usize) -> f64 {
    info.get(sensor).copied().unwrap_or(0.0)
}

/// Orders by `ln I* + age ln(alpha)`, then larger `t_j`, then smaller sensor.
fn discounted_cmp(a: &Packet, b: &Packet, slot: i64, ln_alpha: f64, info: &[f64]) -> Ordering {
    let pa = sensor_info(info, a.sensor).ln() + a.age(slot) as f64 * ln_alpha;
    let pb = sensor_info(info, b.sensor).ln() + b.age(slot) as f64 * ln_alpha;
    pa.partial_cmp(&pb)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.sample_slot.cmp(&b.sample_slot))
        .then_with(|| b.sensor.cmp(&a.sensor))
        .then_with(|| a.sample_index.cmp(&b.sample_index))
}

/// Orders by `I*`, ties to the more recent packet.
fn lookback_cmp(a: &Packet, b: &Packet, info: &[f64]) -> Ordering {
    sensor_info(info, a.sensor)
        .partial_cmp(&sensor_info(info, b.sensor))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.recency().cmp(&b.recency()))
}

/// Uniform choice among non-empty queues.
pub fn select_sensor<R: Rng>(queues: &[TransmitQueue], rng: &mut R) -> Option<usize> {
    let busy = queues.iter().filter(|q| !q.is_empty()).count();
    if busy == 0 {
        return None;
    }
    let pick = if busy == 1 { 0 } else { rng.random_range(0..busy) };
    queues
        .iter()
        .enumerate()
        .filter(|(_, q)| !q.is_empty())
        .nth(pick)
        .map(|(i, _)| i)
}

/// The queued packet chosen for transmission: `(sensor, position)`.
pub type Choice = (usize, usize);

/// All sensors' queues.
#[derive(Clone, Debug)]
pub struct QueueBank {
    queues: Vec<TransmitQueue>,
}

impl QueueBank {
    pub fn new(sensors: usize) -> Self {
        QueueBank { queues: vec![TransmitQueue::new(); sensors] }
    }

    pub fn queues(&self) -> &[TransmitQueue] {
        &self.queues
    }

    pub fn queue_mut(&mut self, sensor: usize) -> &mut TransmitQueue {
        &mut self.queues[sensor]
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(TransmitQueue::len).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.queues.iter().map(TransmitQueue::len).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(TransmitQueue::is_empty)
    }

    pub fn packet(&self, choice: Choice) -> &Packet {
        &self.queues[choice.0].buffer[choice.1]
    }

    /// Picks this slot's packet. With one sensor both access modes reduce to
    /// the queue's own discipline. The scheduler `rng` is consulted only for
    /// random access with several busy queues and for `Random` service.
    pub fn choose<R: Rng>(
        &self,
        slot: i64,
        discipline: &Discipline,
        access: SensorAccess,
        info: &[f64],
        rng: &mut R,
    ) -> Option<Choice> {
        if self.queues.len() == 1 {
            return self.queues[0]
                .select_packet(slot, discipline, info, rng)
                .map(|pos| (0, pos));
        }
        match access {
            SensorAccess::RandomAccess => {
                let sensor = select_sensor(&self.queues, rng)?;
                let pos = self.queues[sensor].select_packet(slot, discipline, info, rng)?;
                Some((sensor, pos))
            }
            SensorAccess::Centralized => self.choose_centralized(slot, discipline, info, rng),
        }
    }

    /// Treats the union of all queues as one pool. Each queue is sorted by
    /// sampling order, so only queue heads or tails need inspecting.
    fn choose_centralized<R: Rng>(
        &self,
        slot: i64,
        discipline: &Discipline,
        info: &[f64],
        rng: &mut R,
    ) -> Option<Choice> {
        let total = self.total_len();
        if total == 0 {
            return None;
        }
        let busy = || self.queues.iter().enumerate().filter(|(_, q)| !q.is_empty());
        match *discipline {
            Discipline::Fcfs => busy()
                .map(|(s, _)| (s, 0))
                .min_by(|&a, &b| self.packet(a).recency().cmp(&self.packet(b).recency())),
            Discipline::Lcfs => busy()
                .map(|(s, q)| (s, q.len() - 1))
                .max_by(|&a, &b| self.packet(a).recency().cmp(&self.packet(b).recency())),
            Discipline::Random => {
                let mut k = rng.random_range(0..total);
                for (s, q) in self.queues.iter().enumerate() {
                    if k < q.len() {
                        return Some((s, k));
                    }
                    k -= q.len();
                }
                unreachable!("index within total length")
            }
            Discipline::DiscountedInfo { alpha } => {
                // Within one sensor the newest packet has the highest priority.
                let ln_alpha = alpha.ln();
                busy().map(|(s, q)| (s, q.len() - 1)).max_by(|&a, &b| {
                    discounted_cmp(self.packet(a), self.packet(b), slot, ln_alpha, info)
                })
            }
            Discipline::LookBack { window } => {
                let mut candidates: Vec<Choice> = busy()
                    .flat_map(|(s, q)| (q.len().saturating_sub(window)..q.len()).map(move |p| (s, p)))
                    .collect();
                candidates.sort_by_key(|&c| std::cmp::Reverse(self.packet(c).recency()));
                candidates.truncate(window);
                candidates
                    .into_iter()
                    .max_by(|&a, &b| lookback_cmp(self.packet(a), self.packet(b), info))
            }
        }
    }

    pub fn resolve(&mut self, choice: Option<Choice>, success: bool, cap: Option<u32>) -> Departure {
        match choice {
            None => self.queues[0].resolve(None, success, cap),
            Some((s, pos)) => self.queues[s].resolve(Some(pos), success, cap),
        }
    }
}

/// Stationary queue length of the discrete-time Geom/Geom/1 queue with
/// arrival probability `r` and service probability `p`, for the recursion
/// `Q' = (Q - Y)^+ + A` with departures before arrivals.
///
/// `P(Q = 0) = 1 - r/p`; given `Q > 0`, `Q - 1` is geometric with ratio
/// `r(1-p) / (p(1-r))`.
pub fn stationary_queue_draw<R: Rng>(r: f64, p: f64, rng: &mut R) -> Result<u64> {
    if !(r > 0.0 && r < 1.0 && p > 0.0 && p < 1.0) {
        return Err(QcdError::config(format!("rates must be in (0, 1): r = {r}, p = {p}")));
    }
    if r >= p {
        return Err(QcdError::config(format!("unstable queue: r = {r} >= p = {p}")));
    }
    if rng.random::<f64>() >= r / p {
        return Ok(0);
    }
    let ratio = r * (1.0 - p) / (p * (1.0 - r));
    let geo = Geometric::new(1.0 - ratio).map_err(|e| QcdError::config(e.to_string()))?;
    Ok(1 + geo.sample(rng))
}

/// Mean of the law sampled by [`stationary_queue_draw`]: `r(1-r)/(p-r)`.
pub fn stationary_mean_queue(r: f64, p: f64) -> f64 {
    r * (1.0 - r) / (p - r)
}
