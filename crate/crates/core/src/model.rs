//! Probability primitives: measurement densities, the two-state channel,
//! sampling processes and the closed-form information rates.
//!
//! All information quantities are in nats.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QcdError, Result};

/// A user-supplied pre/post-change density pair.
///
/// Implementors provide log-densities directly. The KL divergences are
/// optional; without them the closed-form information rates are unavailable
/// but simulation works.
pub trait CustomDensity: Send + Sync + fmt::Debug {
    fn log_f0(&self, z: f64) -> f64;
    fn log_f1(&self, z: f64) -> f64;
    fn sample(&self, post_change: bool, rng: &mut dyn RngCore) -> f64;
    /// D(f1 || f0).
    fn kl_post_pre(&self) -> Option<f64> {
        None
    }
    /// D(f0 || f1).
    fn kl_pre_post(&self) -> Option<f64> {
        None
    }
}

/// Pre-change (`f0`) and post-change (`f1`) measurement laws.
///
/// `Gaussian` takes the *variance*, not the standard deviation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityModel {
    Gaussian { mean0: f64, mean1: f64, variance: f64 },
    /// Measurements in {0, 1} with `P(Z = 1) = q0` before and `q1` after.
    Bernoulli { q0: f64, q1: f64 },
    #[serde(skip)]
    Custom(Arc<dyn CustomDensity>),
}

fn open_unit(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(QcdError::domain(format!("{name} = {p} is not in (0, 1)")))
    }
}

impl DensityModel {
    pub fn gaussian(mean0: f64, mean1: f64, variance: f64) -> Self {
        DensityModel::Gaussian { mean0, mean1, variance }
    }

    pub fn bernoulli(q0: f64, q1: f64) -> Self {
        DensityModel::Bernoulli { q0, q1 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DensityModel::Gaussian { mean0, mean1, variance } => {
                if !(mean0.is_finite() && mean1.is_finite()) {
                    return Err(QcdError::domain("gaussian means must be finite"));
                }
                if !(variance > 0.0 && variance.is_finite()) {
                    return Err(QcdError::domain(format!(
                        "gaussian variance {variance} must be positive and finite"
                    )));
                }
                Ok(())
            }
            DensityModel::Bernoulli { q0, q1 } => {
                open_unit("q0", q0)?;
                open_unit("q1", q1)
            }
            DensityModel::Custom(_) => Ok(()),
        }
    }

    /// `log f0(z)`, `-inf` outside the support.
    pub fn log_f0(&self, z: f64) -> f64 {
        match self {
            DensityModel::Gaussian { mean0, variance, .. } => gaussian_log_pdf(z, *mean0, *variance),
            DensityModel::Bernoulli { q0, .. } => bernoulli_log_pmf(z, *q0),
            DensityModel::Custom(c) => c.log_f0(z),
        }
    }

    /// `log f1(z)`, `-inf` outside the support.
    pub fn log_f1(&self, z: f64) -> f64 {
        match self {
            DensityModel::Gaussian { mean1, variance, .. } => gaussian_log_pdf(z, *mean1, *variance),
            DensityModel::Bernoulli { q1, .. } => bernoulli_log_pmf(z, *q1),
            DensityModel::Custom(c) => c.log_f1(z),
        }
    }

    /// `log f1(z) - log f0(z)`.
    pub fn log_likelihood_ratio(&self, z: f64) -> Result<f64> {
        let llr = match *self {
            DensityModel::Gaussian { mean0, mean1, variance } => {
                ((mean1 - mean0) * z - (mean1 * mean1 - mean0 * mean0) / 2.0) / variance
            }
            DensityModel::Bernoulli { q0, q1 } => {
                if z == 1.0 {
                    (q1 / q0).ln()
                } else if z == 0.0 {
                    ((1.0 - q1) / (1.0 - q0)).ln()
                } else {
                    f64::NAN
                }
            }
            DensityModel::Custom(ref c) => c.log_f1(z) - c.log_f0(z),
        };
        if llr.is_finite() {
            Ok(llr)
        } else {
            Err(QcdError::domain(format!("z = {z} is outside the common support")))
        }
    }

    /// Draws a measurement from `f1` if `post_change`, else from `f0`.
    ///
    /// Gaussian draws are an affine map of one standard normal and Bernoulli
    /// draws threshold one uniform, so the same random stream yields coupled
    /// pre- and post-change values.
    pub fn sample<R: Rng>(&self, post_change: bool, rng: &mut R) -> f64 {
        match *self {
            DensityModel::Gaussian { mean0, mean1, variance } => {
                let n: f64 = rng.sample(StandardNormal);
                let mean = if post_change { mean1 } else { mean0 };
                mean + variance.sqrt() * n
            }
            DensityModel::Bernoulli { q0, q1 } => {
                let q = if post_change { q1 } else { q0 };
                if rng.random::<f64>() < q {
                    1.0
                } else {
                    0.0
                }
            }
            DensityModel::Custom(ref c) => c.sample(post_change, rng),
        }
    }

    /// D(f1 || f0) in nats, when known in closed form.
    pub fn kl(&self) -> Option<f64> {
        match *self {
            DensityModel::Gaussian { mean0, mean1, variance } => {
                Some((mean1 - mean0).powi(2) / (2.0 * variance))
            }
            DensityModel::Bernoulli { q0, q1 } => kl_bernoulli(q1, q0).ok(),
            DensityModel::Custom(ref c) => c.kl_post_pre(),
        }
    }

    /// D(f0 || f1) in nats, when known in closed form.
    pub fn kl_reverse(&self) -> Option<f64> {
        match *self {
            DensityModel::Gaussian { .. } => self.kl(),
            DensityModel::Bernoulli { q0, q1 } => kl_bernoulli(q0, q1).ok(),
            DensityModel::Custom(ref c) => c.kl_pre_post(),
        }
    }
}

fn gaussian_log_pdf(z: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * PI * variance).ln() - (z - mean).powi(2) / (2.0 * variance)
}

fn bernoulli_log_pmf(z: f64, q: f64) -> f64 {
    if z == 1.0 {
        q.ln()
    } else if z == 0.0 {
        (1.0 - q).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// KL divergence D(Bern(p1) || Bern(p0)) in nats.
pub fn kl_bernoulli(p1: f64, p0: f64) -> Result<f64> {
    open_unit("p1", p1)?;
    open_unit("p0", p0)?;
    let d = p1 * (p1 / p0).ln() + (1.0 - p1) * ((1.0 - p1) / (1.0 - p0)).ln();
    // Rounding can leave a tiny negative value for p1 ~ p0.
    Ok(d.max(0.0))
}

/// Per-slot success probabilities before (`p0`) and after (`p1`) the change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub p0: f64,
    pub p1: f64,
}

impl ChannelModel {
    pub fn new(p0: f64, p1: f64) -> Result<Self> {
        let c = ChannelModel { p0, p1 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        open_unit("p0", self.p0)?;
        open_unit("p1", self.p1)
    }

    pub fn success_prob(&self, post_change: bool) -> f64 {
        if post_change {
            self.p1
        } else {
            self.p0
        }
    }

    /// One slot's channel trial given a uniform draw.
    pub fn trial(&self, post_change: bool, uniform: f64) -> bool {
        uniform < self.success_prob(post_change)
    }

    /// D(p1 || p0), the information carried by one attempt outcome.
    pub fn kl(&self) -> f64 {
        kl_bernoulli(self.p1, self.p0).unwrap_or(f64::NAN)
    }

    pub fn min_success(&self) -> f64 {
        self.p0.min(self.p1)
    }
}

/// How a sensor decides to take a sample in a slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingProcess {
    /// One sample per slot with probability `rate`.
    Bernoulli { rate: f64 },
    /// One sample every `interval` slots; the first arrives in slot `phase`,
    /// `1 <= phase <= interval`.
    Periodic { interval: u64, phase: u64 },
}

impl SamplingProcess {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingProcess::Bernoulli { rate } => open_unit("sampling rate", rate),
            SamplingProcess::Periodic { interval, phase } => {
                if interval == 0 {
                    return Err(QcdError::config("periodic interval must be positive"));
                }
                if phase == 0 || phase > interval {
                    return Err(QcdError::config(format!(
                        "periodic phase {phase} must be in [1, {interval}]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Long-run samples per slot.
    pub fn rate(&self) -> f64 {
        match *self {
            SamplingProcess::Bernoulli { rate } => rate,
            SamplingProcess::Periodic { interval, .. } => 1.0 / interval as f64,
        }
    }

    /// Whether a sample is taken in `slot` (1-based). Bernoulli sampling
    /// consumes exactly one uniform from `rng` per call.
    pub fn arrives<R: Rng>(&self, slot: u64, rng: &mut R) -> bool {
        match *self {
            SamplingProcess::Bernoulli { rate } => rng.random::<f64>() < rate,
            SamplingProcess::Periodic { .. } => self.slots_to_next_arrival(slot) == Some(1),
        }
    }

    /// Slots until the next arrival counting `slot` itself, so `1` means an
    /// arrival in `slot`. `None` for Bernoulli sampling.
    pub fn slots_to_next_arrival(&self, slot: u64) -> Option<u64> {
        match *self {
            SamplingProcess::Bernoulli { .. } => None,
            SamplingProcess::Periodic { interval, phase } => {
                let s = interval as i128;
                Some(((phase as i128 - slot as i128).rem_euclid(s) + 1) as u64)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub sampling: SamplingProcess,
    pub density: DensityModel,
}

/// Transmit-queue service discipline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Discipline {
    Fcfs,
    Lcfs,
    /// Uniformly random queued packet.
    Random,
    /// Highest `I* * alpha^age`.
    DiscountedInfo { alpha: f64 },
    /// Most informative of the `window` most recent queued arrivals.
    LookBack { window: usize },
}

impl Discipline {
    pub fn name(&self) -> &'static str {
        match self {
            Discipline::Fcfs => "fcfs",
            Discipline::Lcfs => "lcfs",
            Discipline::Random => "random",
            Discipline::DiscountedInfo { .. } => "discounted_info",
            Discipline::LookBack { .. } => "look_back",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            Discipline::DiscountedInfo { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn window(&self) -> Option<usize> {
        match *self {
            Discipline::LookBack { window } => Some(window),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Discipline::DiscountedInfo { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(
                QcdError::config(format!("discount factor {alpha} must be in (0, 1)")),
            ),
            Discipline::LookBack { window: 0 } => {
                Err(QcdError::config("look-back window must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// How the shared channel is granted when several sensors have packets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorAccess {
    /// A non-empty sensor queue is picked uniformly at random and its own
    /// discipline chooses the packet.
    #[default]
    RandomAccess,
    /// The discipline ranks every queued packet of every sensor.
    Centralized,
}

/// Backlog present at the start of slot 1 (per sensor).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialQueue {
    Known(u32),
    /// Drawn from the stationary Geom/Geom/1 law with the sensor's rate and
    /// the pre-change service probability `p0`.
    Stationary,
}

impl Default for InitialQueue {
    fn default() -> Self {
        InitialQueue::Known(0)
    }
}

fn default_access() -> SensorAccess {
    SensorAccess::RandomAccess
}

/// Everything a single replication needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Last pre-change slot; `None` means no change.
    #[serde(default)]
    pub change_slot: Option<u64>,
    pub sensors: Vec<SensorConfig>,
    pub channel: ChannelModel,
    /// Maximum transmission attempts per packet; `None` retries until success.
    #[serde(default)]
    pub retransmit_cap: Option<u32>,
    pub discipline: Discipline,
    #[serde(default = "default_access")]
    pub access: SensorAccess,
    #[serde(default)]
    pub initial_queue: InitialQueue,
    pub horizon: u64,
    #[serde(default)]
    pub seed: u64,
    /// Accept an aggregate sampling rate at or above the channel success
    /// probability (the queues then grow without bound).
    #[serde(default)]
    pub allow_unstable: bool,
}

impl ScenarioConfig {
    /// One sensor, FCFS, unlimited retransmissions, empty initial queue.
    pub fn single_sensor(
        sampling: SamplingProcess,
        density: DensityModel,
        channel: ChannelModel,
    ) -> Self {
        ScenarioConfig {
            change_slot: Some(1),
            sensors: vec![SensorConfig { sampling, density }],
            channel,
            retransmit_cap: None,
            discipline: Discipline::Fcfs,
            access: SensorAccess::RandomAccess,
            initial_queue: InitialQueue::Known(0),
            horizon: 10_000,
            seed: 0,
            allow_unstable: false,
        }
    }

    pub fn is_multi_sensor(&self) -> bool {
        self.sensors.len() > 1
    }

    pub fn aggregate_rate(&self) -> f64 {
        self.sensors.iter().map(|s| s.sampling.rate()).sum()
    }

    /// Sets every sensor's sampling to Bernoulli with `rate`.
    pub fn with_rate(mut self, rate: f64) -> Self {
        for s in &mut self.sensors {
            s.sampling = SamplingProcess::Bernoulli { rate };
        }
        self
    }

    /// Per-sensor measurement information `D(f1,i || f0,i)`; zero when unknown.
    pub fn sensor_information(&self) -> Vec<f64> {
        self.sensors.iter().map(|s| s.density.kl().unwrap_or(0.0)).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.aggregate_rate() < self.channel.min_success()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(QcdError::config("at least one sensor is required"));
        }
        for (i, s) in self.sensors.iter().enumerate() {
            s.sampling
                .validate()
                .map_err(|e| QcdError::config(format!("sensor {}: {e}", i + 1)))?;
            s.density
                .validate()
                .map_err(|e| QcdError::config(format!("sensor {}: {e}", i + 1)))?;
        }
        self.channel.validate().map_err(|e| QcdError::config(e.to_string()))?;
        if self.change_slot == Some(0) {
            return Err(QcdError::config("change slot must be at least 1"));
        }
        if self.retransmit_cap == Some(0) {
            return Err(QcdError::config("retransmission cap must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(QcdError::config("horizon must be at least 1"));
        }
        self.discipline.validate()?;
        if !self.allow_unstable && !self.is_stable() {
            return Err(QcdError::config(format!(
                "aggregate sampling rate {} must be below min(p0, p1) = {}",
                self.aggregate_rate(),
                self.channel.min_success()
            )));
        }
        if self.initial_queue == InitialQueue::Stationary {
            for (i, s) in self.sensors.iter().enumerate() {
                if !matches!(s.sampling, SamplingProcess::Bernoulli { .. }) {
                    return Err(QcdError::config(format!(
                        "sensor {}: stationary initial queue needs Bernoulli sampling",
                        i + 1
                    )));
                }
                if s.sampling.rate() >= self.channel.p0 {
                    return Err(QcdError::config(format!(
                        "sensor {}: stationary initial queue needs rate < p0",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fraction of packets that are eventually delivered with at most `cap`
/// attempts at success probability `p`.
pub fn delivery_probability(p: f64, cap: Option<u32>) -> f64 {
    match cap {
        None => 1.0,
        Some(k) => 1.0 - (1.0 - p).powi(k as i32),
    }
}

/// Long-run fraction of slots with a non-empty queue after the change.
///
/// Every busy slot carries exactly one attempt, and a packet makes
/// `(1 - (1 - p1)^K) / p1` attempts on average, so the occupancy is the
/// aggregate rate times that mean. This is `r / p1` for unlimited
/// retransmissions and `r` for `K = 1`.
pub fn post_change_occupancy(config: &ScenarioConfig) -> f64 {
    let p1 = config.channel.p1;
    config.aggregate_rate() * delivery_probability(p1, config.retransmit_cap) / p1
}

fn check_information_preconditions(config: &ScenarioConfig) -> Result<()> {
    config.validate()?;
    // With p0 = p1 and no cap the occupancy drops out.
    let channel_free = config.channel.p0 == config.channel.p1 && config.retransmit_cap.is_none();
    if !config.is_stable() && !channel_free {
        return Err(QcdError::config(format!(
            "information rate needs aggregate rate {} < min(p0, p1) = {}",
            config.aggregate_rate(),
            config.channel.min_success()
        )));
    }
    Ok(())
}

fn information_rate(config: &ScenarioConfig) -> Result<f64> {
    let p1 = config.channel.p1;
    let delivered = delivery_probability(p1, config.retransmit_cap);
    let mut measurement = 0.0;
    for (i, s) in config.sensors.iter().enumerate() {
        let d = s.density.kl().ok_or_else(|| {
            QcdError::config(format!("sensor {}: density has no closed-form KL divergence", i + 1))
        })?;
        measurement += s.sampling.rate() * delivered * d;
    }
    Ok(post_change_occupancy(config) * config.channel.kl() + measurement)
}

/// Information number `I` of a single-sensor scenario, nats per slot.
///
/// `I = r ((1/p1) D(p1||p0) + D(f1||f0))` for unlimited retransmissions;
/// with a cap `K` the occupancy and delivered fraction shrink accordingly
/// (`K = 1` gives `r (D(p1||p0) + p1 D(f1||f0))`).
pub fn information_number(config: &ScenarioConfig) -> Result<f64> {
    if config.is_multi_sensor() {
        return Err(QcdError::config(
            "information_number takes a single-sensor scenario; use information_number_multisensor",
        ));
    }
    check_information_preconditions(config)?;
    information_rate(config)
}

/// Aggregate information rate `Ī` of a multi-sensor scenario.
///
/// `P(busy) D(p1||p0) + Σ r_i P(delivered) D(f1,i||f0,i)`; for `p0 = p1` and
/// unlimited retransmissions this is `Σ r_i D(f1,i||f0,i)`, which is returned
/// even for an overloaded channel.
pub fn information_number_multisensor(config: &ScenarioConfig) -> Result<f64> {
    check_information_preconditions(config)?;
    information_rate(config)
}
