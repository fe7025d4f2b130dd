//! Detection-delay and false-alarm estimation, threshold calibration and
//! parameter sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detectors::DetectorKind;
use crate::engine::{run_batch, run_batch_records, RecordPath, RngPolicy};
use crate::error::{QcdError, Result};
use crate::model::{information_number_multisensor, Discipline, ScenarioConfig};
use crate::par::Parallelism;
use crate::stats::mean_stderr;

/// Mean detection delay `(T - ν)` over runs that alarmed after the change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AddEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Runs contributing to the mean.
    pub used: u64,
    /// Runs that alarmed at or before the change slot.
    pub false_alarms: u64,
    /// Runs that reached the horizon without an alarm.
    pub truncated: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArlEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Some run hit the horizon; `mean` is then only a lower bound.
    pub lower_bound: bool,
    pub truncated: u64,
    pub reps: u64,
}

fn add_from_slots<I>(stops: I, change_slot: u64) -> Result<AddEstimate>
where
    I: IntoIterator<Item = Option<u64>>,
{
    let mut delays = Vec::new();
    let (mut false_alarms, mut truncated) = (0, 0);
    for t in stops {
        match t {
            None => truncated += 1,
            Some(t) if t <= change_slot => false_alarms += 1,
            Some(t) => delays.push((t - change_slot) as f64),
        }
    }
    let Some((mean, stderr)) = mean_stderr(&delays) else {
        return Err(QcdError::Estimation(format!(
            "no run detected the change ({false_alarms} false alarms, {truncated} truncated)"
        )));
    };
    Ok(AddEstimate { mean, stderr, used: delays.len() as u64, false_alarms, truncated })
}

fn arl_from_slots<I>(stops: I, horizon: u64) -> ArlEstimate
where
    I: IntoIterator<Item = Option<u64>>,
{
    let mut truncated = 0;
    let runs: Vec<f64> = stops
        .into_iter()
        .map(|t| {
            t.unwrap_or_else(|| {
                truncated += 1;
                horizon
            }) as f64
        })
        .collect();
    let (mean, stderr) = mean_stderr(&runs).unwrap_or((f64::NAN, f64::NAN));
    ArlEstimate { mean, stderr, lower_bound: truncated > 0, truncated, reps: runs.len() as u64 }
}

fn require_change_slot(config: &ScenarioConfig) -> Result<u64> {
    config
        .change_slot
        .ok_or_else(|| QcdError::config("detection delay needs a finite change slot"))
}

/// Mean and standard error of the detection delay at threshold `h`.
pub fn estimate_add(
    config: &ScenarioConfig,
    kind: DetectorKind,
    h: f64,
    reps: u64,
    policy: RngPolicy,
    parallelism: Parallelism,
) -> Result<AddEstimate> {
    let nu = require_change_slot(config)?;
    let runs = run_batch(config, kind, h, reps, policy, parallelism)?;
    add_from_slots(runs.iter().map(|r| r.stopping_slot), nu)
}

/// ADD at threshold `h` read off recorded paths.
pub fn add_from_records(paths: &[RecordPath], h: f64) -> Result<AddEstimate> {
    let nu = paths
        .first()
        .and_then(|p| p.change_slot)
        .ok_or_else(|| QcdError::config("detection delay needs a finite change slot"))?;
    add_from_slots(paths.iter().map(|p| p.stopping_slot(h)), nu)
}

/// Mean run length to false alarm with no change; truncated runs count as
/// the horizon and flag the estimate as a lower bound.
pub fn estimate_arl2fa(
    config: &ScenarioConfig,
    kind: DetectorKind,
    h: f64,
    reps: u64,
    policy: RngPolicy,
    parallelism: Parallelism,
) -> Result<ArlEstimate> {
    if config.change_slot.is_some() {
        return Err(QcdError::config("false-alarm run length needs change_slot = null"));
    }
    let runs = run_batch(config, kind, h, reps, policy, parallelism)?;
    Ok(arl_from_slots(runs.iter().map(|r| r.stopping_slot), config.horizon))
}

pub fn arl_from_records(paths: &[RecordPath], h: f64, horizon: u64) -> ArlEstimate {
    arl_from_slots(paths.iter().map(|p| p.stopping_slot(h)), horizon)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    /// Relative tolerance on the target run length.
    pub tolerance: f64,
    pub reps: u64,
    pub horizon: u64,
    pub max_iter: u32,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec { tolerance: 0.05, reps: 2_000, horizon: 100_000, max_iter: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub threshold: f64,
    pub arl: ArlEstimate,
    pub iterations: u32,
}

/// Smallest threshold tried; stands in for `h = 0⁺`.
pub const MIN_THRESHOLD: f64 = 1e-9;

/// Finds `h` whose estimated false-alarm run length lies within
/// `γ (1 ± tol)`.
///
/// Every replication is simulated once with no threshold, keeping its
/// running maxima; `T(h)` is then the first record above `h`, so the search
/// is a bisection over a fixed, monotone set of paths. The recording cap
/// grows until the bracket closes.
pub fn calibrate_threshold(
    config: &ScenarioConfig,
    kind: DetectorKind,
    gamma: f64,
    spec: &CalibrationSpec,
    policy: RngPolicy,
    parallelism: Parallelism,
) -> Result<Calibration> {
    calibrate_thresholds(config, kind, &[gamma], spec, policy, parallelism)?
        .pop()
        .expect("one target in, one result out")
}

/// [`calibrate_threshold`] for several targets sharing one set of paths.
/// Each target succeeds or fails on its own.
pub fn calibrate_thresholds(
    config: &ScenarioConfig,
    kind: DetectorKind,
    gammas: &[f64],
    spec: &CalibrationSpec,
    policy: RngPolicy,
    parallelism: Parallelism,
) -> Result<Vec<Result<Calibration>>> {
    if !(spec.tolerance > 0.0 && spec.tolerance < 1.0) {
        return Err(QcdError::Calibration(format!("tolerance {} is not in (0, 1)", spec.tolerance)));
    }
    if let Some(g) = gammas.iter().find(|g| g.is_nan() || **g <= 1.0) {
        return Err(QcdError::Calibration(format!("target run length must exceed 1, got {g}")));
    }
    let mut cfg = config.clone();
    cfg.change_slot = None;
    cfg.horizon = spec.horizon;
    let reachable = |g: f64| g * (1.0 - spec.tolerance) <= spec.horizon as f64;
    let top = gammas.iter().cloned().filter(|g| reachable(*g)).fold(1.0, f64::max);

    let mut cap = top.ln().max(1.0) + 1.0;
    let mut grown = 0;
    let mut paths = run_batch_records(&cfg, kind, cap, spec.reps, policy, parallelism)?;
    loop {
        let arl = arl_from_records(&paths, cap * (1.0 - 1e-12), spec.horizon);
        if arl.mean >= top * (1.0 - spec.tolerance) || paths.iter().all(|p| p.covers(f64::MAX)) {
            break;
        }
        grown += 1;
        if grown > spec.max_iter {
            return Err(QcdError::Calibration("recording cap did not reach the target".into()));
        }
        cap = cap * 1.25 + 1.0;
        paths = run_batch_records(&cfg, kind, cap, spec.reps, policy, parallelism)?;
    }

    Ok(gammas
        .iter()
        .map(|&g| {
            if !reachable(g) {
                return Err(QcdError::Calibration(format!("target {g} is beyond the horizon {}", spec.horizon)));
            }
            search_threshold(&paths, g, cap * (1.0 - 1e-12), spec).map(|mut c| {
                c.iterations += grown;
                c
            })
        })
        .collect())
}

/// Bisection on recorded paths; aims for a quarter of the tolerance and
/// settles for the closest point inside the full band.
fn search_threshold(paths: &[RecordPath], gamma: f64, upper: f64, spec: &CalibrationSpec) -> Result<Calibration> {
    let arl = |h: f64| arl_from_records(paths, h, spec.horizon);
    let within = |est: &ArlEstimate, tol: f64| (est.mean / gamma - 1.0).abs() <= tol;

    let at_zero = arl(MIN_THRESHOLD);
    if at_zero.mean >= gamma * (1.0 - spec.tolerance) {
        return Ok(Calibration { threshold: MIN_THRESHOLD, arl: at_zero, iterations: 0 });
    }
    let (mut lo, mut hi) = (MIN_THRESHOLD, upper);
    let mut h = gamma.ln().clamp(lo, hi);
    let mut best: Option<Calibration> = None;
    for iterations in 1..=spec.max_iter {
        let est = arl(h);
        if within(&est, spec.tolerance)
            && best.is_none_or(|b| (est.mean - gamma).abs() < (b.arl.mean - gamma).abs())
        {
            best = Some(Calibration { threshold: h, arl: est, iterations });
        }
        if within(&est, spec.tolerance / 4.0) || hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        if est.mean < gamma {
            lo = h;
        } else {
            hi = h;
        }
        h = 0.5 * (lo + hi);
    }
    best.ok_or_else(|| {
        QcdError::Calibration(format!(
            "no threshold below {upper:.3} gives a run length within {} of {gamma}",
            spec.tolerance
        ))
    })
}

/// Axes of a sweep; empty lists fall back to the base scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    /// Per-sensor Bernoulli sampling rate.
    pub r: Vec<f64>,
    pub h: Vec<f64>,
    pub gamma: Vec<f64>,
    pub discipline: Vec<Discipline>,
    pub detector: Vec<DetectorKind>,
    pub change_slot: Vec<u64>,
}

fn default_reps() -> u64 {
    10_000
}

fn default_detector() -> DetectorKind {
    DetectorKind::Recursive
}

/// A sweep or single-point experiment, read from JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: ScenarioConfig,
    #[serde(default = "default_detector")]
    pub detector: DetectorKind,
    #[serde(default = "default_reps")]
    pub reps: u64,
    /// Used when the grid has neither thresholds nor targets.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    /// Also estimate the false-alarm run length at fixed-threshold points.
    #[serde(default)]
    pub estimate_arl: bool,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Threshold(f64),
    Gamma(f64),
}

/// One fully specified grid point.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub id: String,
    pub scenario: ScenarioConfig,
    pub detector: DetectorKind,
    pub targets: Vec<Target>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            serde_json::from_str(text).map_err(|e| QcdError::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(QcdError::config("reps must be at least 1"));
        }
        if self.calibration.reps == 0 || self.calibration.horizon == 0 {
            return Err(QcdError::config("calibration reps and horizon must be positive"));
        }
        if self.targets().is_empty() {
            return Err(QcdError::config("give a threshold, a target run length, or a grid of either"));
        }
        for t in self.targets() {
            match t {
                Target::Threshold(h) if !(h >= 0.0 && h.is_finite()) => {
                    return Err(QcdError::config(format!("threshold {h} must be finite and >= 0")));
                }
                Target::Gamma(g) if g.is_nan() || g <= 1.0 => {
                    return Err(QcdError::config(format!("target run length {g} must exceed 1")));
                }
                _ => {}
            }
        }
        for p in self.points() {
            p.scenario.validate().map_err(|e| QcdError::config(format!("{}: {e}", p.id)))?;
        }
        Ok(())
    }

    fn targets(&self) -> Vec<Target> {
        let mut t: Vec<Target> = self.grid.h.iter().map(|&h| Target::Threshold(h)).collect();
        t.extend(self.grid.gamma.iter().map(|&g| Target::Gamma(g)));
        if t.is_empty() {
            t.extend(self.threshold.map(Target::Threshold));
            t.extend(self.gamma.map(Target::Gamma));
        }
        t
    }

    /// Cartesian product of the non-target axes, in a fixed order.
    pub fn points(&self) -> Vec<GridPoint> {
        fn or_base<T: Clone>(list: &[T], base: T) -> Vec<T> {
            if list.is_empty() {
                vec![base]
            } else {
                list.to_vec()
            }
        }
        let rates: Vec<Option<f64>> =
            if self.grid.r.is_empty() { vec![None] } else { self.grid.r.iter().map(|&r| Some(r)).collect() };
        let disciplines = or_base(&self.grid.discipline, self.scenario.discipline);
        let detectors = or_base(&self.grid.detector, self.detector);
        let nus: Vec<Option<u64>> = if self.grid.change_slot.is_empty() {
            vec![self.scenario.change_slot]
        } else {
            self.grid.change_slot.iter().map(|&n| Some(n)).collect()
        };
        let mut out = Vec::new();
        for r in &rates {
            for d in &disciplines {
                for k in &detectors {
                    for nu in &nus {
                        let mut s = self.scenario.clone();
                        if let Some(r) = r {
                            s = s.with_rate(*r);
                        }
                        s.discipline = *d;
                        s.change_slot = *nu;
                        out.push(GridPoint {
                            id: format!("{}-{}", self.name, out.len()),
                            scenario: s,
                            detector: *k,
                            targets: self.targets(),
                        });
                    }
                }
            }
        }
        out
    }

    /// Number of CSV rows a sweep produces.
    pub fn row_count(&self) -> usize {
        self.points().len() * self.targets().len()
    }
}

/// One CSV row. Empty cells mean "not applicable" (for `K`: unlimited).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub detector: String,
    pub discipline: String,
    pub r: f64,
    pub s: f64,
    pub p0: f64,
    pub p1: f64,
    #[serde(rename = "K")]
    pub k: Option<u32>,
    pub alpha: Option<f64>,
    pub w: Option<usize>,
    pub h: Option<f64>,
    pub gamma_target: Option<f64>,
    pub arl2fa: Option<f64>,
    pub arl2fa_lb_flag: Option<bool>,
    pub add_mean: Option<f64>,
    pub add_stderr: Option<f64>,
    pub add_over_h: Option<f64>,
    #[serde(rename = "inv_I")]
    pub inv_i: Option<f64>,
    pub reps: u64,
    pub nu: Option<u64>,
    pub status: String,
}

impl MetricRow {
    fn blank(point: &GridPoint, reps: u64) -> Self {
        let sc = &point.scenario;
        let r = sc.aggregate_rate();
        MetricRow {
            scenario_id: point.id.clone(),
            detector: point.detector.name().to_string(),
            discipline: sc.discipline.name().to_string(),
            r,
            s: 1.0 / r,
            p0: sc.channel.p0,
            p1: sc.channel.p1,
            k: sc.retransmit_cap,
            alpha: sc.discipline.alpha(),
            w: sc.discipline.window(),
            h: None,
            gamma_target: None,
            arl2fa: None,
            arl2fa_lb_flag: None,
            add_mean: None,
            add_stderr: None,
            add_over_h: None,
            inv_i: information_number_multisensor(sc).ok().filter(|i| *i > 0.0).map(|i| 1.0 / i),
            reps,
            nu: sc.change_slot,
            status: "ok".to_string(),
        }
    }

    pub fn failed(&self) -> bool {
        self.status != "ok"
    }

    fn set_add(&mut self, add: &AddEstimate, h: f64) {
        self.add_mean = Some(add.mean);
        self.add_stderr = Some(add.stderr);
        self.add_over_h = (h > 0.0).then(|| add.mean / h);
    }

    fn set_arl(&mut self, arl: &ArlEstimate) {
        self.arl2fa = Some(arl.mean);
        self.arl2fa_lb_flag = Some(arl.lower_bound);
    }
}

/// Seed offset separating calibration paths from delay paths.
const CALIBRATION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stream used for calibration paths, disjoint from the delay paths.
pub fn calibration_policy(seed: u64) -> RngPolicy {
    RngPolicy::coupled(seed ^ CALIBRATION_STREAM)
}

/// Rows for one grid point. Failures are confined to the affected rows.
pub fn evaluate_point(spec: &ExperimentSpec, point: &GridPoint, parallelism: Parallelism) -> Vec<MetricRow> {
    let sc = &point.scenario;
    let policy = RngPolicy::coupled(sc.seed);
    let mut rows = Vec::new();

    let fixed: Vec<f64> = point
        .targets
        .iter()
        .filter_map(|t| if let Target::Threshold(h) = t { Some(*h) } else { None })
        .collect();
    // Fixed thresholds share one set of recorded paths.
    let delay_paths = match fixed.iter().cloned().fold(None, |m: Option<f64>, h| Some(m.map_or(h, |m| m.max(h)))) {
        Some(top) if sc.change_slot.is_some() => {
            Some(run_batch_records(sc, point.detector, top, spec.reps, policy, parallelism))
        }
        _ => None,
    };
    let false_alarm_paths = match fixed.iter().cloned().reduce(f64::max) {
        Some(top) if spec.estimate_arl => {
            let mut cfg = sc.clone();
            cfg.change_slot = None;
            cfg.horizon = spec.calibration.horizon;
            let cal = calibration_policy(sc.seed);
            Some(run_batch_records(&cfg, point.detector, top, spec.calibration.reps, cal, parallelism))
        }
        _ => None,
    };

    let gammas: Vec<f64> = point
        .targets
        .iter()
        .filter_map(|t| if let Target::Gamma(g) = t { Some(*g) } else { None })
        .collect();
    let calibrations: Result<Vec<(f64, Result<Calibration>)>> = if gammas.is_empty() {
        Ok(Vec::new())
    } else {
        calibrate_thresholds(sc, point.detector, &gammas, &spec.calibration, calibration_policy(sc.seed), parallelism)
            .map(|cals| gammas.iter().cloned().zip(cals).collect())
    };

    for target in &point.targets {
        let mut row = MetricRow::blank(point, spec.reps);
        let outcome: Result<()> = (|| {
            match *target {
                Target::Threshold(h) => {
                    row.h = Some(h);
                    if let Some(paths) = &delay_paths {
                        let paths = paths.as_ref().map_err(Clone::clone)?;
                        row.set_add(&add_from_records(paths, h)?, h);
                    }
                    if let Some(paths) = &false_alarm_paths {
                        let paths = paths.as_ref().map_err(Clone::clone)?;
                        row.set_arl(&arl_from_records(paths, h, spec.calibration.horizon));
                    }
                }
                Target::Gamma(g) => {
                    row.gamma_target = Some(g);
                    let cal = calibrations
                        .as_ref()
                        .map_err(Clone::clone)?
                        .iter()
                        .find(|(target, _)| *target == g)
                        .map(|(_, c)| c.clone())
                        .expect("every target was calibrated")?;
                    row.h = Some(cal.threshold);
                    row.set_arl(&cal.arl);
                    if sc.change_slot.is_some() {
                        let add = estimate_add(sc, point.detector, cal.threshold, spec.reps, policy, parallelism)?;
                        row.set_add(&add, cal.threshold);
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            row.status = e.to_string();
        }
        rows.push(row);
    }
    rows
}

/// Evaluates every grid point in order.
pub fn sweep(spec: &ExperimentSpec, parallelism: Parallelism) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    Ok(spec.points().iter().flat_map(|p| evaluate_point(spec, p, parallelism)).collect())
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
