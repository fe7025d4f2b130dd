//! Fast self-checks of exact simulator invariants on a scenario.

use crate::detectors::DetectorKind;
use crate::engine::{estimate_occupancy, run_trace, RngPolicy, SlotRecord};
use crate::error::Result;
use crate::likelihood::SlotOutcome;
use crate::model::{post_change_occupancy, Discipline, ScenarioConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name, passed, detail: detail.into() }
    }
}

const SLOTS: u64 = 10_000;
const OCCUPANCY_SLOTS: u64 = 400_000;

fn trace(config: &ScenarioConfig, kind: DetectorKind, index: u64) -> Result<Vec<SlotRecord>> {
    let mut c = config.clone();
    c.horizon = c.horizon.min(SLOTS);
    run_trace(&c, kind, f64::INFINITY, RngPolicy::coupled(config.seed), index)
}

fn queue_recursion(records: &[SlotRecord]) -> Option<String> {
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.outcome == SlotOutcome::Idle) != (a.queue_len == 0) {
            return Some(format!("slot {}: idle flag disagrees with backlog {}", a.slot, a.queue_len));
        }
        let left = (a.outcome == SlotOutcome::Success || a.dropped) as usize;
        if b.queue_len != a.queue_len - left + a.arrivals as usize {
            return Some(format!("slot {}: backlog {} -> {}", a.slot, a.queue_len, b.queue_len));
        }
    }
    None
}

/// Runs every check; a failing check does not stop the others.
pub fn run_checks(config: &ScenarioConfig) -> Result<Vec<Check>> {
    config.validate()?;
    let mut checks = Vec::new();

    let records = trace(config, DetectorKind::Generalized, 0)?;
    let broken = queue_recursion(&records);
    checks.push(Check::new(
        "queue recursion and idle iff empty",
        broken.is_none(),
        broken.unwrap_or_else(|| format!("{} slots", records.len())),
    ));

    let again = trace(config, DetectorKind::Generalized, 0)?;
    checks.push(Check::new("same seed, same trace", again == records, ""));

    let mut fcfs = config.clone();
    fcfs.discipline = Discipline::Fcfs;
    let mut worst = 0.0f64;
    let mut order_ok = true;
    for i in 0..5 {
        let rec = trace(&fcfs, DetectorKind::Recursive, i)?;
        let gen = trace(&fcfs, DetectorKind::Generalized, i)?;
        for (a, b) in rec.iter().zip(&gen) {
            worst = worst.max((a.statistic - b.statistic).abs() / a.statistic.abs().max(1.0));
        }
        let mut last = vec![0u64; fcfs.sensors.len()];
        for r in &rec {
            if let (Some(s), Some(j)) = (r.sensor, r.sample_index) {
                order_ok &= j > last[s];
                last[s] = j;
            }
        }
    }
    checks.push(Check::new(
        "generalized equals recursive under in-order delivery",
        worst <= 1e-12,
        format!("max relative gap {worst:.2e}"),
    ));
    checks.push(Check::new("in-order delivery indices increase", order_ok, ""));

    if config.is_stable() {
        let sim = estimate_occupancy(config, OCCUPANCY_SLOTS, config.seed)?;
        let exact = post_change_occupancy(config);
        let ok = (sim - exact).abs() <= 0.03 * exact.max(0.01);
        checks.push(Check::new(
            "busy fraction matches closed form",
            ok,
            format!("simulated {sim:.4}, closed form {exact:.4}"),
        ));
    }
    Ok(checks)
}

/// Scenario used when none is supplied.
pub fn default_scenario() -> ScenarioConfig {
    use crate::model::{ChannelModel, DensityModel, SamplingProcess};
    let mut c = ScenarioConfig::single_sensor(
        SamplingProcess::Bernoulli { rate: 0.3 },
        DensityModel::gaussian(0.0, 1.0, 0.5),
        ChannelModel { p0: 0.7, p1: 0.6 },
    );
    c.seed = 1;
    c
}
