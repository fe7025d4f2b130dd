//! Per-slot log-likelihood increments and cumulative log-likelihood ratios
//! of the decision maker's observations.
//!
//! Backlog packets present at slot 1 contribute no measurement term, and
//! samples taken after the start are always scored as candidate post-change
//! data (the count of post-start pre-change samples is taken to be zero).

use crate::error::{QcdError, Result};
use crate::model::{ChannelModel, DensityModel};

/// Channel outcome seen by the decision maker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotOutcome {
    Success,
    Failure,
    /// Nothing was transmitted because every queue was empty.
    Idle,
}

impl SlotOutcome {
    pub fn symbol(&self) -> &'static str {
        match self {
            SlotOutcome::Success => "1",
            SlotOutcome::Failure => "0",
            SlotOutcome::Idle => "-",
        }
    }
}

/// What the decision maker learns at the end of one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotObservation {
    pub slot: u64,
    pub outcome: SlotOutcome,
    /// Zero-based id of the delivering sensor.
    pub sensor: Option<usize>,
    pub sample_index: Option<u64>,
    pub sample_slot: Option<i64>,
    pub value: Option<f64>,
    pub queue_nonempty: bool,
    pub prestart_delivery: bool,
}

impl SlotObservation {
    pub fn idle(slot: u64) -> Self {
        SlotObservation {
            slot,
            outcome: SlotOutcome::Idle,
            sensor: None,
            sample_index: None,
            sample_slot: None,
            value: None,
            queue_nonempty: false,
            prestart_delivery: false,
        }
    }

    pub fn failure(slot: u64) -> Self {
        SlotObservation { outcome: SlotOutcome::Failure, queue_nonempty: true, ..Self::idle(slot) }
    }

    /// A single-sensor delivery of sample `index`, taken in `sample_slot`.
    pub fn success(slot: u64, index: u64, sample_slot: i64, value: f64) -> Self {
        SlotObservation {
            outcome: SlotOutcome::Success,
            sensor: Some(0),
            sample_index: Some(index),
            sample_slot: Some(sample_slot),
            value: Some(value),
            queue_nonempty: true,
            ..Self::idle(slot)
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(QcdError::MalformedObservation { slot: self.slot, reason: reason.to_string() })
        };
        if (self.outcome == SlotOutcome::Idle) == self.queue_nonempty {
            return bad("outcome is idle exactly when the queue is empty");
        }
        if (self.outcome == SlotOutcome::Success) != self.value.is_some() {
            return bad("a value is present exactly on success");
        }
        if self.outcome == SlotOutcome::Success && self.sample_slot.is_none() {
            return bad("a delivery must carry its sampling slot");
        }
        Ok(())
    }

    /// Reordering key: sampling slot, then sensor (descending), then per-sensor index.
    fn sample_key(&self) -> SampleKey {
        SampleKey {
            sample_slot: self.sample_slot.unwrap_or(i64::MIN),
            sensor: std::cmp::Reverse(self.sensor.unwrap_or(0)),
            index: self.sample_index.unwrap_or(0),
        }
    }
}

/// Channel term: `log P0(y)/P∞(y)` on attempt slots, zero when idle.
pub fn channel_llr(outcome: SlotOutcome, channel: &ChannelModel) -> f64 {
    match outcome {
        SlotOutcome::Success => (channel.p1 / channel.p0).ln(),
        SlotOutcome::Failure => ((1.0 - channel.p1) / (1.0 - channel.p0)).ln(),
        SlotOutcome::Idle => 0.0,
    }
}

/// Measurement term of a delivery: the value's LLR, or zero for backlog
/// packets and slots without a delivery.
pub fn measurement_llr(obs: &SlotObservation, density: &DensityModel) -> Result<f64> {
    obs.check()?;
    match (obs.outcome, obs.value) {
        (SlotOutcome::Success, Some(_)) if obs.prestart_delivery => Ok(0.0),
        (SlotOutcome::Success, Some(z)) => density.log_likelihood_ratio(z),
        _ => Ok(0.0),
    }
}

/// Single-sensor per-slot increment `L_k`: channel term plus measurement
/// term.
pub fn slot_llr(obs: &SlotObservation, channel: &ChannelModel, density: &DensityModel) -> Result<f64> {
    Ok(channel_llr(obs.outcome, channel) + measurement_llr(obs, density)?)
}

/// Channel plus per-sensor densities; scores observations from any sensor.
#[derive(Clone, Debug)]
pub struct LlrModel {
    pub channel: ChannelModel,
    pub densities: Vec<DensityModel>,
}

impl LlrModel {
    pub fn new(channel: ChannelModel, densities: Vec<DensityModel>) -> Self {
        LlrModel { channel, densities }
    }

    pub fn from_config(config: &crate::model::ScenarioConfig) -> Self {
        LlrModel {
            channel: config.channel,
            densities: config.sensors.iter().map(|s| s.density.clone()).collect(),
        }
    }

    fn density(&self, obs: &SlotObservation) -> Result<&DensityModel> {
        let s = obs.sensor.unwrap_or(0);
        self.densities.get(s).ok_or_else(|| QcdError::MalformedObservation {
            slot: obs.slot,
            reason: format!("unknown sensor {s}"),
        })
    }

    pub fn channel_term(&self, obs: &SlotObservation) -> f64 {
        channel_llr(obs.outcome, &self.channel)
    }

    pub fn measurement_term(&self, obs: &SlotObservation) -> Result<f64> {
        if obs.outcome != SlotOutcome::Success {
            obs.check()?;
            return Ok(0.0);
        }
        measurement_llr(obs, self.density(obs)?)
    }

    /// Per-slot increment using the delivering sensor's density.
    pub fn slot_llr(&self, obs: &SlotObservation) -> Result<f64> {
        Ok(self.channel_term(obs) + self.measurement_term(obs)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct SampleKey {
    sample_slot: i64,
    /// Same-slot ties: the lower sensor id ranks as more recent.
    sensor: std::cmp::Reverse<usize>,
    index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Reception {
    slot: u64,
    key: SampleKey,
    term: f64,
}

/// Raw per-slot terms of a run of consecutive slots `first_slot..`,
/// remembering the order in which samples were received.
#[derive(Clone, Debug)]
pub struct LlrTermLedger {
    first_slot: u64,
    channel: Vec<f64>,
    receptions: Vec<Reception>,
}

impl Default for LlrTermLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl LlrTermLedger {
    /// An empty ledger whose first recorded slot will be slot 1.
    pub fn new() -> Self {
        Self::starting_at(1)
    }

    pub fn starting_at(first_slot: u64) -> Self {
        LlrTermLedger { first_slot, channel: Vec::new(), receptions: Vec::new() }
    }

    pub fn first_slot(&self) -> u64 {
        self.first_slot
    }

    /// Last slot recorded, or `first_slot - 1` when empty.
    pub fn last_slot(&self) -> u64 {
        self.first_slot + self.channel.len() as u64 - 1
    }

    pub fn len(&self) -> usize {
        self.channel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel.is_empty()
    }

    /// Records the next slot's observation.
    pub fn push(&mut self, obs: &SlotObservation, model: &LlrModel) -> Result<()> {
        let expected = self.first_slot + self.channel.len() as u64;
        if obs.slot != expected {
            return Err(QcdError::MalformedObservation {
                slot: obs.slot,
                reason: format!("ledger expected slot {expected}"),
            });
        }
        let measurement = model.measurement_term(obs)?;
        self.channel.push(model.channel_term(obs));
        if obs.outcome == SlotOutcome::Success {
            self.receptions.push(Reception { slot: obs.slot, key: obs.sample_key(), term: measurement });
        }
        Ok(())
    }

    /// `(slot, sample_index)` pairs in reception order.
    pub fn reception_order(&self) -> Vec<(u64, u64)> {
        self.receptions.iter().map(|r| (r.slot, r.key.index)).collect()
    }

    /// Measurement terms re-attached to reception slots so that the `j`-th
    /// smallest received sample sits on the `j`-th reception slot. Returns
    /// one entry per recorded slot (zero where nothing was received).
    pub fn reassign_measurements(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channel.len()];
        let mut sorted: Vec<&Reception> = self.receptions.iter().collect();
        sorted.sort_by_key(|r| r.key);
        // Receptions are pushed in slot order already.
        for (slot_of, by_sample) in self.receptions.iter().zip(sorted) {
            out[(slot_of.slot - self.first_slot) as usize] = by_sample.term;
        }
        out
    }

    /// Channel plus reassigned measurement term for every recorded slot.
    pub fn slot_terms(&self) -> Vec<f64> {
        let mut terms = self.reassign_measurements();
        for (t, c) in terms.iter_mut().zip(&self.channel) {
            *t += c;
        }
        terms
    }

    /// `Σ_{i=from}^{to}` of the reassigned per-slot terms; zero for an empty
    /// range. Slots outside the ledger contribute nothing.
    pub fn cumulative_llr(&self, from_slot: u64, to_slot: u64) -> f64 {
        if to_slot < from_slot || self.is_empty() {
            return 0.0;
        }
        let lo = from_slot.max(self.first_slot);
        let hi = to_slot.min(self.last_slot());
        if hi < lo {
            return 0.0;
        }
        let terms = self.slot_terms();
        terms[(lo - self.first_slot) as usize..=(hi - self.first_slot) as usize].iter().sum()
    }

    /// Running maximum suffix sum over the reassigned terms, starting from
    /// `carry` (the statistic just before `first_slot`), clamped at zero.
    pub fn max_suffix_statistic(&self, carry: f64) -> f64 {
        self.slot_terms().iter().fold(carry.max(0.0), |c, t| (c + t).max(0.0))
    }

    pub fn clear_from(&mut self, next_slot: u64) {
        self.first_slot = next_slot;
        self.channel.clear();
        self.receptions.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> LlrModel {
        LlrModel::new(ChannelModel::new(0.61, 0.60).unwrap(), vec![DensityModel::gaussian(0.0, 10.0, 0.5)])
    }

    #[test]
    fn slot_llr_examples() {
        let m = model();
        let d = &m.densities[0];
        assert_eq!(slot_llr(&SlotObservation::idle(1), &m.channel, d).unwrap(), 0.0);
        let f = slot_llr(&SlotObservation::failure(1), &m.channel, d).unwrap();
        assert_relative_eq!(f, (0.40f64 / 0.39).ln(), max_relative = 1e-14);
        assert!((f - 0.025318).abs() < 1e-6);
        let s = slot_llr(&SlotObservation::success(1, 1, 1, 5.0), &m.channel, d).unwrap();
        assert_relative_eq!(s, (0.6f64 / 0.61).ln(), max_relative = 1e-14);
        assert!((s + 0.016530).abs() < 1e-6);
    }

    #[test]
    fn malformed_observations_rejected() {
        let m = model();
        let mut obs = SlotObservation::success(3, 1, 1, 1.0);
        obs.value = None;
        assert!(matches!(m.slot_llr(&obs), Err(QcdError::MalformedObservation { slot: 3, .. })));
        let mut obs = SlotObservation::idle(2);
        obs.queue_nonempty = true;
        assert!(m.slot_llr(&obs).is_err());
        let mut obs = SlotObservation::failure(2);
        obs.value = Some(1.0);
        assert!(m.slot_llr(&obs).is_err());
    }

    #[test]
    fn prestart_delivery_has_no_measurement_term() {
        let m = model();
        let mut obs = SlotObservation::success(1, 1, 0, 10.0);
        obs.prestart_delivery = true;
        assert_relative_eq!(m.slot_llr(&obs).unwrap(), (0.6f64 / 0.61).ln(), max_relative = 1e-14);
        obs.prestart_delivery = false;
        assert_relative_eq!(m.slot_llr(&obs).unwrap(), (0.6f64 / 0.61).ln() + 100.0, max_relative = 1e-14);
    }

    fn ledger_from(obs: &[SlotObservation]) -> LlrTermLedger {
        let m = model();
        let mut l = LlrTermLedger::new();
        for o in obs {
            l.push(o, &m).unwrap();
        }
        l
    }

    #[test]
    fn all_idle_window_is_zero() {
        let l = ledger_from(&(1..=5).map(SlotObservation::idle).collect::<Vec<_>>());
        assert_eq!(l.cumulative_llr(1, 5), 0.0);
        assert_eq!(l.max_suffix_statistic(0.0), 0.0);
    }

    #[test]
    fn reassignment_sorts_by_sample_index() {
        // Samples (3, 1, 2) received at slots 2, 4, 5.
        let obs = vec![
            SlotObservation::failure(1),
            SlotObservation::success(2, 3, 3, 7.0),
            SlotObservation::failure(3),
            SlotObservation::success(4, 1, 1, 5.0),
            SlotObservation::success(5, 2, 2, 6.0),
        ];
        let l = ledger_from(&obs);
        let llr = |z: f64| (10.0 * z - 50.0) / 0.5;
        let r = l.reassign_measurements();
        assert_eq!(r, vec![0.0, llr(5.0), 0.0, llr(6.0), llr(7.0)]);
        assert_eq!(l.reception_order(), vec![(2, 3), (4, 1), (5, 2)]);
    }

    #[test]
    fn fcfs_reassignment_is_identity() {
        let obs = vec![
            SlotObservation::success(1, 1, 0, 4.0),
            SlotObservation::failure(2),
            SlotObservation::success(3, 2, 1, 6.5),
            SlotObservation::idle(4),
            SlotObservation::success(5, 3, 4, 3.0),
        ];
        let l = ledger_from(&obs);
        let m = model();
        let direct: Vec<f64> = obs.iter().map(|o| m.measurement_term(o).unwrap()).collect();
        assert_eq!(l.reassign_measurements(), direct);
        // Cumulative sums equal brute-force sums of slot_llr.
        let per_slot: Vec<f64> = obs.iter().map(|o| m.slot_llr(o).unwrap()).collect();
        for j in 1..=5u64 {
            for n in j..=5u64 {
                let brute: f64 = per_slot[(j - 1) as usize..n as usize].iter().sum();
                assert_relative_eq!(l.cumulative_llr(j, n), brute, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_delivery_attaches_to_own_slot() {
        let l = ledger_from(&[SlotObservation::failure(1), SlotObservation::success(2, 9, 1, 6.0)]);
        assert_eq!(l.reassign_measurements(), vec![0.0, (60.0 - 50.0) / 0.5]);
    }

    #[test]
    fn ledger_rejects_gaps() {
        let m = model();
        let mut l = LlrTermLedger::new();
        l.push(&SlotObservation::idle(1), &m).unwrap();
        assert!(l.push(&SlotObservation::idle(3), &m).is_err());
    }
}
