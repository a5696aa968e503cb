//! Drive cycles, measurement logs, simulation traces and summary metrics.
//!
//! All files are comma-separated with a header row. Floats are written with
//! Rust's shortest round-trip formatting, so reading a written file gives
//! back the same bits.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CycleError;
use crate::pack::PackLimits;

/// Uniformly sampled current profile with optional pack power demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycle {
    pub ts: f64,
    pub time: Vec<f64>,
    /// Reference current per step (A, discharge positive).
    pub current: Vec<f64>,
    /// Pack power demand per step (W).
    pub power: Option<Vec<f64>>,
}

impl DriveCycle {
    /// Cycle on `0, ts, 2 ts, ...`.
    pub fn from_currents(ts: f64, current: Vec<f64>) -> Self {
        let time = (0..current.len()).map(|k| k as f64 * ts).collect();
        Self {
            ts,
            time,
            current,
            power: None,
        }
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn with_power(mut self, power: Vec<f64>) -> Result<Self, CycleError> {
        if power.len() != self.len() {
            return Err(CycleError::LengthMismatch(format!(
                "{} power samples for {} steps",
                power.len(),
                self.len()
            )));
        }
        self.power = Some(power);
        Ok(self)
    }

    /// First `n` steps.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            ts: self.ts,
            time: self.time[..n].to_vec(),
            current: self.current[..n].to_vec(),
            power: self.power.as_ref().map(|p| p[..n].to_vec()),
        }
    }

    /// Net charge drawn over the cycle (A·s).
    pub fn net_charge(&self) -> f64 {
        self.current.iter().sum::<f64>() * self.ts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(match self.power {
            Some(_) => "time_s,current_a,power_w\n",
            None => "time_s,current_a\n",
        });
        for k in 0..self.len() {
            let _ = write!(out, "{},{}", self.time[k], self.current[k]);
            if let Some(p) = &self.power {
                let _ = write!(out, ",{}", p[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a cycle file and resamples it to `ts`.
pub fn ingest_cycle(path: &Path, ts: f64) -> Result<DriveCycle, CycleError> {
    let text = read_file(path)?;
    parse_cycle(&text, ts)
}

/// Parses cycle CSV text (`time_s,current_a[,power_w]`) and resamples it to
/// `ts` by zero-order hold.
pub fn parse_cycle(text: &str, ts: f64) -> Result<DriveCycle, CycleError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(CycleError::InvalidSampling(ts));
    }
    let table = Table::parse(text, &["time_s", "current_a"], &["power_w"])?;
    let time = table.column("time_s");
    let current = table.column("current_a");
    let power = table.optional_column("power_w");
    if time.len() < 2 {
        return Err(CycleError::TooFewRows {
            needed: 2,
            got: time.len(),
        });
    }
    check_monotonic(&time, &table.lines)?;
    let net: f64 = time
        .windows(2)
        .zip(&current)
        .map(|(t, i)| (t[1] - t[0]) * i)
        .sum();
    if net < 0.0 {
        return Err(CycleError::NetCharging(net));
    }
    let (time, mut series) = resample(&time, vec![current, power.unwrap_or_default()], ts);
    let power = series.pop().filter(|p| !p.is_empty());
    let current = series.pop().unwrap_or_default();
    Ok(DriveCycle {
        ts,
        time,
        current,
        power,
    })
}

pub fn write_cycle(path: &Path, cycle: &DriveCycle) -> Result<(), CycleError> {
    write_file(path, &cycle.to_csv())
}

/// Current/voltage record of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementLog {
    pub ts: f64,
    pub time: Vec<f64>,
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
}

impl MeasurementLog {
    pub fn new(ts: f64, current: Vec<f64>, voltage: Vec<f64>) -> Result<Self, CycleError> {
        if current.len() != voltage.len() {
            return Err(CycleError::LengthMismatch(format!(
                "{} currents, {} voltages",
                current.len(),
                voltage.len()
            )));
        }
        let time = (0..current.len()).map(|k| k as f64 * ts).collect();
        Ok(Self {
            ts,
            time,
            current,
            voltage,
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,current_a,voltage_v\n");
        for k in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{}",
                self.time[k], self.current[k], self.voltage[k]
            );
        }
        out
    }
}

/// Parses a `time_s,current_a,voltage_v` log, resampled to `ts`.
pub fn parse_log(text: &str, ts: f64) -> Result<MeasurementLog, CycleError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(CycleError::InvalidSampling(ts));
    }
    let table = Table::parse(text, &["time_s", "current_a", "voltage_v"], &[])?;
    let time = table.column("time_s");
    if time.len() < 2 {
        return Err(CycleError::TooFewRows {
            needed: 2,
            got: time.len(),
        });
    }
    check_monotonic(&time, &table.lines)?;
    let (time, mut series) = resample(
        &time,
        vec![table.column("current_a"), table.column("voltage_v")],
        ts,
    );
    let voltage = series.pop().unwrap_or_default();
    let current = series.pop().unwrap_or_default();
    Ok(MeasurementLog {
        ts,
        time,
        current,
        voltage,
    })
}

pub fn read_log(path: &Path, ts: f64) -> Result<MeasurementLog, CycleError> {
    parse_log(&read_file(path)?, ts)
}

pub fn write_log(path: &Path, log: &MeasurementLog) -> Result<(), CycleError> {
    write_file(path, &log.to_csv())
}

struct Table {
    columns: Vec<(String, Vec<f64>)>,
    lines: Vec<usize>,
}

impl Table {
    fn parse(text: &str, required: &[&'static str], optional: &[&str]) -> Result<Self, CycleError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| CycleError::MalformedRow {
                line: 1,
                reason: e.to_string(),
            })?
            .clone();
        let mut wanted: Vec<(String, usize)> = Vec::new();
        for &name in required {
            let idx = header
                .iter()
                .position(|h| h == name)
                .ok_or(CycleError::MissingColumn(name))?;
            wanted.push((name.to_string(), idx));
        }
        for &name in optional {
            if let Some(idx) = header.iter().position(|h| h == name) {
                wanted.push((name.to_string(), idx));
            }
        }
        let mut columns: Vec<(String, Vec<f64>)> =
            wanted.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
        let mut lines = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| CycleError::MalformedRow {
                line: e.position().map_or(0, |p| p.line() as usize),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            for (k, (name, idx)) in wanted.iter().enumerate() {
                let field = record.get(*idx).unwrap_or("");
                let value: f64 = field.parse().map_err(|_| CycleError::MalformedRow {
                    line,
                    reason: format!("`{field}` in column {name} is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(CycleError::MalformedRow {
                        line,
                        reason: format!("non-finite value in column {name}"),
                    });
                }
                columns[k].1.push(value);
            }
            lines.push(line);
        }
        Ok(Self { columns, lines })
    }

    fn column(&self, name: &str) -> Vec<f64> {
        self.optional_column(name).unwrap_or_default()
    }

    fn optional_column(&self, name: &str) -> Option<Vec<f64>> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    }
}

fn check_monotonic(time: &[f64], lines: &[usize]) -> Result<(), CycleError> {
    for k in 1..time.len() {
        if time[k] <= time[k - 1] {
            return Err(CycleError::NonMonotonicTime {
                line: lines[k],
                prev: time[k - 1],
                next: time[k],
            });
        }
    }
    Ok(())
}

/// Zero-order-hold resampling onto `t0 + k ts`. Already-uniform input is
/// passed through untouched.
fn resample(time: &[f64], series: Vec<Vec<f64>>, ts: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let tol = 1e-9 * ts;
    let uniform = time.windows(2).all(|w| ((w[1] - w[0]) - ts).abs() <= tol);
    if uniform {
        return (time.to_vec(), series);
    }
    let t0 = time[0];
    let last = time[time.len() - 1];
    let steps = ((last - t0) / ts + 1e-9).floor() as usize + 1;
    let mut out_t = Vec::with_capacity(steps);
    let mut idx = Vec::with_capacity(steps);
    let mut j = 0;
    for k in 0..steps {
        let t = t0 + k as f64 * ts;
        while j + 1 < time.len() && time[j + 1] <= t + tol {
            j += 1;
        }
        out_t.push(t);
        idx.push(j);
    }
    let series = series
        .into_iter()
        .map(|s| {
            if s.is_empty() {
                s
            } else {
                idx.iter().map(|&j| s[j]).collect()
            }
        })
        .collect();
    (out_t, series)
}

fn read_file(path: &Path) -> Result<String, CycleError> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| CycleError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(text)
}

fn write_file(path: &Path, text: &str) -> Result<(), CycleError> {
    fs::write(path, text).map_err(|source| CycleError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Seeded urban stop-and-go current profile.
///
/// One period of `period` seconds of micro-trips (idle, accelerate, cruise,
/// brake) is drawn and tiled to `seconds`. Currents are scaled to
/// `mean_current`, braking regenerates mildly and the result is clipped to
/// `[min_current, max_current]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleGenerator {
    /// Default length of a generated cycle (s).
    pub duration: usize,
    pub period: usize,
    pub mean_current: f64,
    pub min_current: f64,
    pub max_current: f64,
    pub regen: f64,
}

impl Default for CycleGenerator {
    fn default() -> Self {
        Self {
            duration: 14000,
            period: 1369,
            mean_current: 1.0,
            min_current: -1.0,
            max_current: 5.0,
            regen: 0.15,
        }
    }
}

impl CycleGenerator {
    pub fn generate(&self, seconds: usize, seed: u64) -> DriveCycle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let period = self.period.max(2);
        let mut speed: Vec<f64> = Vec::with_capacity(period + 200);
        while speed.len() < period {
            let idle = rng.random_range(5..30);
            speed.extend(std::iter::repeat_n(0.0, idle));
            let peak: f64 = rng.random_range(6.0..25.0);
            let rise = rng.random_range(10..40);
            let cruise = rng.random_range(10..120);
            let fall = rng.random_range(10..35);
            speed.extend((1..=rise).map(|k| peak * k as f64 / rise as f64));
            for _ in 0..cruise {
                let jitter: f64 = rng.random_range(-0.05..0.05);
                speed.push(peak * (1.0 + jitter));
            }
            speed.extend((0..fall).map(|k| peak * (1.0 - (k + 1) as f64 / fall as f64)));
        }
        speed.truncate(period);

        let mut raw = Vec::with_capacity(period);
        for k in 0..period {
            let v = speed[k];
            let a = if k == 0 { 0.0 } else { v - speed[k - 1] };
            let traction = 0.08 * v + 0.004 * v * v + 0.6 * a.max(0.0) * v.sqrt();
            let braking = self.regen * a.min(0.0) * v.sqrt();
            let idle_load = 0.05;
            raw.push(if a < 0.0 { braking } else { traction + idle_load });
        }
        let mean = raw.iter().sum::<f64>() / period as f64;
        let scale = if mean > 0.0 { self.mean_current / mean } else { 1.0 };
        let one: Vec<f64> = raw
            .iter()
            .map(|i| (i * scale).clamp(self.min_current, self.max_current))
            .collect();
        let current = (0..seconds).map(|k| one[k % period]).collect();
        DriveCycle::from_currents(1.0, current)
    }
}

/// Controller outcome recorded for a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepStatus {
    /// Shared reference current, no optimization.
    Common,
    Optimal,
    MaxIter,
    /// QP infeasible; the shared reference current was applied.
    Fallback,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Common => "common",
            StepStatus::Optimal => "optimal",
            StepStatus::MaxIter => "max_iter",
            StepStatus::Fallback => "infeasible_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Current through each cell (A).
    pub currents: Vec<f64>,
    /// Converter balance currents, differential runs only.
    pub balance: Option<Vec<f64>>,
    pub voltages: Vec<f64>,
    pub soc_true: Vec<f64>,
    pub soc_est: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    /// Delivered pack power `sum v_i i_i` (W).
    pub power: f64,
    pub demand: Option<f64>,
    /// Power a shared reference current would have delivered from the same state.
    pub naive_power: Option<f64>,
    pub status: StepStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceCutoff {
    pub step: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub label: String,
    pub n_cells: usize,
    pub records: Vec<StepRecord>,
    pub cutoff: Option<TraceCutoff>,
}

impl SimTrace {
    pub fn new(label: impl Into<String>, n_cells: usize) -> Self {
        Self {
            label: label.into(),
            n_cells,
            records: Vec::new(),
            cutoff: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Steps sustained before cut-off, or the trace length without one.
    pub fn operational_steps(&self) -> usize {
        self.cutoff.map_or(self.records.len(), |c| c.step)
    }

    /// Records before the cut-off step.
    pub fn sustained(&self) -> &[StepRecord] {
        &self.records[..self.operational_steps().min(self.records.len())]
    }

    /// Fallback steps other than the one that ended the run. A QP that turns
    /// infeasible exactly at cut-off is the normal end of a discharge.
    pub fn interior_fallbacks(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.status == StepStatus::Fallback)
            .filter(|r| self.cutoff.is_none_or(|c| c.step != r.step))
            .count()
    }

    pub fn end_soc(&self) -> Vec<f64> {
        self.records
            .last()
            .map(|r| r.soc_true.clone())
            .unwrap_or_default()
    }

    pub fn fallback_steps(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.status == StepStatus::Fallback)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,cell,current_a,voltage_v,soc_true,soc_est,epsilon_v,power_w,qp_status\n",
        );
        for r in &self.records {
            for c in 0..self.n_cells {
                let est = r
                    .soc_est
                    .as_ref()
                    .map(|e| e[c].to_string())
                    .unwrap_or_default();
                let eps = r.epsilon.map(|e| e.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.step,
                    c + 1,
                    r.currents[c],
                    r.voltages[c],
                    r.soc_true[c],
                    est,
                    eps,
                    r.power,
                    r.status.as_str()
                );
            }
        }
        out
    }
}

pub fn write_trace(path: &Path, trace: &SimTrace) -> Result<(), CycleError> {
    write_file(path, &trace.to_csv())
}

/// Pack power under the shared current of a common-current run,
/// `P_k = sum_i v_ik u_k`.
pub fn derive_power_demand(baseline: &SimTrace) -> Vec<f64> {
    baseline
        .records
        .iter()
        .map(|r| {
            let u = r.currents.first().copied().unwrap_or(0.0);
            r.voltages.iter().sum::<f64>() * u
        })
        .collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / n as f64).sqrt()
}

pub fn soc_spread(socs: &[f64]) -> f64 {
    if socs.is_empty() {
        return 0.0;
    }
    let max = socs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = socs.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// Comparison of a balanced run against its common-current baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub label: String,
    pub baseline_steps: usize,
    pub balanced_steps: usize,
    pub extension_steps: i64,
    pub extension_pct: f64,
    pub baseline_end_soc: Vec<f64>,
    pub balanced_end_soc: Vec<f64>,
    pub baseline_soc_spread: f64,
    pub balanced_soc_spread: f64,
    pub baseline_power_rmse_w: f64,
    pub balanced_power_rmse_w: f64,
    pub naive_power_rmse_w: f64,
    pub power_rmse_delta_w: f64,
    pub mean_abs_demand_w: f64,
    pub max_voltage_violation_v: f64,
    pub fallback_steps: usize,
    /// 1-based cell that ended the balanced run, if any.
    pub limiting_cell: Option<usize>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).unwrap_or_default();
        s.push('\n');
        s
    }
}

/// Power-tracking RMSE of a trace against its recorded demand, over the
/// sustained steps (those before cut-off) that carry one.
pub fn power_rmse(trace: &SimTrace) -> f64 {
    let (delivered, demand): (Vec<f64>, Vec<f64>) = trace
        .sustained()
        .iter()
        .filter_map(|r| r.demand.map(|d| (r.power, d)))
        .unzip();
    rmse(&delivered, &demand)
}

/// RMSE of the shared-current allocation over the same steps.
pub fn naive_power_rmse(trace: &SimTrace) -> f64 {
    let (naive, demand): (Vec<f64>, Vec<f64>) = trace
        .sustained()
        .iter()
        .filter_map(|r| match (r.naive_power, r.demand) {
            (Some(n), Some(d)) => Some((n, d)),
            _ => None,
        })
        .unzip();
    rmse(&naive, &demand)
}

/// Largest excursion of a cell voltage outside `[y_min, y_max]` over the
/// sustained steps.
pub fn max_voltage_violation(trace: &SimTrace, limits: &PackLimits) -> f64 {
    trace
        .sustained()
        .iter()
        .flat_map(|r| r.voltages.iter())
        .map(|&v| (limits.y_min - v).max(v - limits.y_max).max(0.0))
        .fold(0.0, f64::max)
}

pub fn summarize(balanced: &SimTrace, baseline: &SimTrace, limits: &PackLimits) -> Metrics {
    let t_bal = balanced.operational_steps();
    let t_base = baseline.operational_steps();
    let extension_steps = t_bal as i64 - t_base as i64;
    let extension_pct = if t_base > 0 {
        100.0 * extension_steps as f64 / t_base as f64
    } else {
        0.0
    };
    let demand: Vec<f64> = balanced.sustained().iter().filter_map(|r| r.demand).collect();
    let mean_abs_demand_w = if demand.is_empty() {
        0.0
    } else {
        demand.iter().map(|d| d.abs()).sum::<f64>() / demand.len() as f64
    };
    let baseline_end_soc = baseline.end_soc();
    let balanced_end_soc = balanced.end_soc();
    let baseline_power_rmse_w = power_rmse(baseline);
    let balanced_power_rmse_w = power_rmse(balanced);
    Metrics {
        label: balanced.label.clone(),
        baseline_steps: t_base,
        balanced_steps: t_bal,
        extension_steps,
        extension_pct,
        baseline_soc_spread: soc_spread(&baseline_end_soc),
        balanced_soc_spread: soc_spread(&balanced_end_soc),
        baseline_end_soc,
        balanced_end_soc,
        baseline_power_rmse_w,
        balanced_power_rmse_w,
        naive_power_rmse_w: naive_power_rmse(balanced),
        power_rmse_delta_w: balanced_power_rmse_w - baseline_power_rmse_w,
        mean_abs_demand_w,
        max_voltage_violation_v: max_voltage_violation(balanced, limits),
        fallback_steps: balanced.fallback_steps(),
        limiting_cell: balanced.cutoff.map(|c| c.cell + 1),
    }
}

pub fn write_metrics(path: &Path, metrics: &Metrics) -> Result<(), CycleError> {
    write_file(path, &metrics.to_json())
}
