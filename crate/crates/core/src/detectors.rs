//! CUSUM stopping rules: the recursive form for in-order delivery, the
//! generalized form that re-sorts measurements by sampling time, and a
//! network-oblivious baseline that ignores channel outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};
use crate::likelihood::{LlrModel, LlrTermLedger, SlotObservation, SlotOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Recursive,
    Generalized,
    #[serde(alias = "network_oblivious")]
    Oblivious,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Recursive => "recursive",
            DetectorKind::Generalized => "generalized",
            DetectorKind::Oblivious => "oblivious",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = QcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(DetectorKind::Recursive),
            "generalized" => Ok(DetectorKind::Generalized),
            "oblivious" | "network_oblivious" => Ok(DetectorKind::Oblivious),
            other => Err(QcdError::config(format!("unknown detector kind {other:?}"))),
        }
    }
}

/// `max_j ℓ_{j,n}` over a ledger whose terms follow a statistic value of
/// `carry`, clamped at zero.
pub fn generalized_statistic(ledger: &LlrTermLedger, carry: f64) -> f64 {
    ledger.max_suffix_statistic(carry)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    sample_slot: i64,
    /// Same-slot ties: the lower sensor id ranks as more recent, as in the queues.
    sensor: std::cmp::Reverse<usize>,
    index: u64,
}

/// Incremental max-suffix statistic over the current busy period.
///
/// Reception slots split the period into gaps; a suffix starting inside gap
/// `i` picks up the measurement terms of the `M - i` largest sample keys,
/// so only the minimum channel prefix sum of each gap matters. Gap values
/// are stored relative to a shared offset: a new term raises every gap at
/// or below its rank by the same amount, so only gaps above it are
/// recomputed.
#[derive(Clone, Debug, Default)]
struct ReorderState {
    /// Channel prefix sum since the period started.
    cum: f64,
    /// Prefix value for a suffix starting at the next slot.
    pending: f64,
    open_min: f64,
    /// Minimum prefix value per closed gap, in reception order.
    gap_min: Vec<f64>,
    /// Received measurement terms sorted by key.
    sorted: Vec<(Key, f64)>,
    offset: f64,
    /// Gap value minus `offset`.
    raw: Vec<f64>,
    /// Running maximum of `raw`.
    prefix_max: Vec<f64>,
}

impl ReorderState {
    fn start(carry: f64) -> Self {
        ReorderState { pending: -carry, open_min: f64::INFINITY, ..Default::default() }
    }

    fn closed_max(&self) -> f64 {
        self.prefix_max.last().map_or(f64::NEG_INFINITY, |m| m + self.offset)
    }

    fn push(&mut self, channel: f64, reception: Option<(Key, f64)>) -> f64 {
        self.open_min = self.open_min.min(self.pending);
        self.cum += channel;
        self.pending = self.cum;
        if let Some((key, term)) = reception {
            self.gap_min.push(self.open_min);
            self.open_min = f64::INFINITY;
            let pos = self.sorted.partition_point(|(k, _)| *k < key);
            self.sorted.insert(pos, (key, term));
            self.offset += term;
            let m = self.sorted.len();
            self.raw.resize(m, 0.0);
            self.prefix_max.resize(m, 0.0);
            // Gaps above the new rank now pair with a different tail, and
            // the newest gap has no value yet.
            let start = (pos + 1).min(m - 1);
            let mut tail = 0.0;
            for i in (start..m).rev() {
                tail += self.sorted[i].1;
                self.raw[i] = tail - self.gap_min[i] - self.offset;
            }
            let mut best = if start == 0 { f64::NEG_INFINITY } else { self.prefix_max[start - 1] };
            for i in start..m {
                best = best.max(self.raw[i]);
                self.prefix_max[i] = best;
            }
        }
        (self.cum + self.closed_max()).max(self.cum - self.open_min).max(0.0)
    }
}

/// One detector instance; owns all state for a single replication.
#[derive(Clone, Debug)]
pub struct Detector {
    kind: DetectorKind,
    threshold: f64,
    statistic: f64,
    alarmed_at: Option<u64>,
    reorder: ReorderState,
}

impl Detector {
    pub fn new(kind: DetectorKind, threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(QcdError::config(format!("threshold must be non-negative, got {threshold}")));
        }
        Ok(Detector {
            kind,
            threshold,
            statistic: 0.0,
            alarmed_at: None,
            reorder: ReorderState::start(0.0),
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn alarmed_at(&self) -> Option<u64> {
        self.alarmed_at
    }

    /// Feeds one slot; returns the increment actually applied to the
    /// recursive forms (for the generalized form, the channel term plus the
    /// measurement received this slot, before reordering).
    pub fn update(&mut self, obs: &SlotObservation, model: &LlrModel) -> Result<f64> {
        if self.alarmed_at.is_some() {
            return Err(QcdError::Domain("detector stepped after alarm".into()));
        }
        let channel = model.channel_term(obs);
        let measurement = model.measurement_term(obs)?;
        let increment = match self.kind {
            DetectorKind::Oblivious => measurement,
            _ => channel + measurement,
        };
        if !increment.is_finite() {
            return Err(QcdError::Numeric { slot: obs.slot, value: increment });
        }
        match self.kind {
            DetectorKind::Recursive | DetectorKind::Oblivious => {
                self.statistic = (self.statistic + increment).max(0.0);
            }
            DetectorKind::Generalized => {
                let reception = (obs.outcome == SlotOutcome::Success).then(|| {
                    let key = Key {
                        sample_slot: obs.sample_slot.unwrap_or(i64::MIN),
                        sensor: std::cmp::Reverse(obs.sensor.unwrap_or(0)),
                        index: obs.sample_index.unwrap_or(0),
                    };
                    (key, measurement)
                });
                self.statistic = self.reorder.push(channel, reception);
                if obs.outcome == SlotOutcome::Idle {
                    // No later delivery can precede anything seen so far.
                    self.reorder = ReorderState::start(self.statistic);
                }
            }
        }
        if self.statistic > self.threshold {
            self.alarmed_at = Some(obs.slot);
        }
        Ok(increment)
    }

    /// Feeds one slot and reports whether the detector alarmed.
    pub fn step(&mut self, obs: &SlotObservation, model: &LlrModel) -> Result<bool> {
        self.update(obs, model)?;
        Ok(self.alarmed_at.is_some())
    }
}
