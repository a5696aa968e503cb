//! One-step predictive current allocation for the two balancing topologies
//! and the closed-loop simulation that drives it.
//!
//! Decision vectors:
//! * independent: `xi = [u_1..u_N, eps]`, the branch currents;
//! * differential: `xi = [ub_1..ub_N, eps]`, balance currents on top of the
//!   shared reference current `ur`, with `sum ub = 0`.
//!
//! Both minimize `(y_r' u - P)^2 - eps` where `y_r` is the predicted
//! terminal voltage under the reference current and `eps <= y_i` for all
//! cells.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::cycle::{DriveCycle, SimTrace, StepRecord, StepStatus, TraceCutoff};
use crate::error::{CycleError, Error, ModelError};
use crate::estimator::{ekf_predict, ekf_update, EkfConfig, EkfState};
use crate::fom::{CellHistory, CellState};
use crate::pack::{
    detect_cutoff, pack_power, NoiseConfig, NoiseSource, PackLimits, PackModel, PackState,
};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpSolution, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    Independent,
    Differential,
}

impl Topology {
    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Independent => "independent",
            Topology::Differential => "differential",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independent" => Ok(Topology::Independent),
            "differential" => Ok(Topology::Differential),
            other => Err(format!("unknown topology `{other}`")),
        }
    }
}

/// One-step-ahead prediction for every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub states: Vec<CellState>,
    /// `h(z) + C x`, the current-free part of the voltage.
    pub open_circuit: Vec<f64>,
    /// `h(z) + C x + D ur`.
    pub y_ref: Vec<f64>,
    pub ref_current: f64,
}

impl Prediction {
    /// Moves the reference operating point to `ur + ub`, the current the
    /// differential topology carried on the previous step.
    pub fn with_balance(mut self, pm: &PackModel, balance: &[f64]) -> Self {
        for ((y, c), ub) in self.y_ref.iter_mut().zip(pm.cells()).zip(balance) {
            *y += c.matrices.d * ub;
        }
        self
    }

    /// Predicted voltages when the cells carry `currents`.
    pub fn voltages(&self, pm: &PackModel, currents: &[f64]) -> Vec<f64> {
        self.open_circuit
            .iter()
            .zip(pm.cells())
            .zip(currents)
            .map(|((g, c), &i)| g + c.matrices.d * i)
            .collect()
    }
}

/// Prediction from already-propagated states.
pub fn prediction_at(pm: &PackModel, states: &[CellState], ref_current: f64) -> Prediction {
    let open_circuit: Vec<f64> = pm
        .cells()
        .iter()
        .zip(states)
        .map(|(c, s)| c.params.ocv.voltage(s.z) - s.u1 - s.u2)
        .collect();
    let y_ref = open_circuit
        .iter()
        .zip(pm.cells())
        .map(|(g, c)| g + c.matrices.d * ref_current)
        .collect();
    Prediction {
        states: states.to_vec(),
        open_circuit,
        y_ref,
        ref_current,
    }
}

/// Propagates each history one step under the currents applied at `k` and
/// evaluates the output at the reference current for `k + 1`.
pub fn predict_open_loop(
    pm: &PackModel,
    histories: &[CellHistory],
    applied: &[f64],
    ref_current: f64,
) -> Result<Prediction, ModelError> {
    if histories.len() != pm.len() || applied.len() != pm.len() {
        return Err(ModelError::DimensionMismatch {
            expected: pm.len(),
            got: histories.len().min(applied.len()),
        });
    }
    let states: Vec<CellState> = pm
        .cells()
        .iter()
        .zip(histories)
        .zip(applied)
        .map(|((c, h), &i)| {
            let mut s = c.matrices.propagate(h, i);
            s.z = s.z.clamp(0.0, 1.0);
            s
        })
        .collect();
    Ok(prediction_at(pm, &states, ref_current))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceProblem {
    pub topology: Topology,
    /// Pack power demand at `k + 1` (W).
    pub power_demand: f64,
    pub ref_current: f64,
    pub limits: PackLimits,
}

impl BalanceProblem {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.power_demand.is_finite() {
            return Err(ModelError::NonFinite("power demand"));
        }
        if !self.ref_current.is_finite() {
            return Err(ModelError::NonFinite("reference current"));
        }
        if !self.limits.current_within(self.ref_current) {
            return Err(ModelError::CurrentOutOfBounds {
                cell: 0,
                current: self.ref_current,
                min: self.limits.u_min,
                max: self.limits.u_max,
            });
        }
        self.limits.validate()
    }
}

/// Shared cost: `W = 2 diag(y y', 0)`; `lin` is the gradient of the power
/// error term with respect to the currents.
fn cost(y: &[f64], lin: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = y.len();
    let mut w = DMatrix::zeros(n + 1, n + 1);
    let mut v = DVector::zeros(n + 1);
    for r in 0..n {
        for c in 0..n {
            w[(r, c)] = 2.0 * y[r] * y[c];
        }
        v[r] = 2.0 * lin * y[r];
    }
    v[n] = -1.0;
    (w, v)
}

/// Inequality rows shared by both topologies in the variable `x` (branch
/// current or balance current), with `offset` the current already flowing
/// (0 or `ur`).
fn constraint_rows(
    pm: &PackModel,
    pred: &Prediction,
    limits: &PackLimits,
    offset: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = pm.len();
    let m = 7 * n + 1;
    let mut a = DMatrix::zeros(m, n + 1);
    let mut b = DVector::zeros(m);
    for (i, cell) in pm.cells().iter().enumerate() {
        let hb = cell.matrices.b[2];
        let d = cell.matrices.d;
        let z = pred.states[i].z + hb * offset;
        let y = pred.open_circuit[i] + d * offset;

        a[(i, i)] = 1.0;
        b[i] = limits.u_max - offset;
        a[(n + i, i)] = -1.0;
        b[n + i] = -limits.u_min + offset;

        a[(2 * n + i, i)] = hb;
        b[2 * n + i] = limits.z_max - z;
        a[(3 * n + i, i)] = -hb;
        b[3 * n + i] = -limits.z_min + z;

        a[(4 * n + i, i)] = d;
        b[4 * n + i] = limits.y_max - y;
        a[(5 * n + i, i)] = -d;
        b[5 * n + i] = -limits.y_min + y;
        a[(6 * n + i, i)] = -d;
        a[(6 * n + i, n)] = 1.0;
        b[6 * n + i] = y;
    }
    a[(7 * n, n)] = -1.0;
    (a, b)
}

/// QP over `[u; eps]` for the independent topology.
pub fn assemble_independent(pm: &PackModel, bp: &BalanceProblem, pred: &Prediction) -> QpProblem {
    let (w, v) = cost(&pred.y_ref, -bp.power_demand);
    let (a, b) = constraint_rows(pm, pred, &bp.limits, 0.0);
    QpProblem::new(w, v).with_inequalities(a, b)
}

/// QP over `[ub; eps]` for the differential topology.
pub fn assemble_differential(
    pm: &PackModel,
    bp: &BalanceProblem,
    pred: &Prediction,
) -> QpProblem {
    let n = pm.len();
    let p_ref: f64 = pred.y_ref.iter().sum::<f64>() * bp.ref_current;
    let (w, v) = cost(&pred.y_ref, p_ref - bp.power_demand);
    let (a, b) = constraint_rows(pm, pred, &bp.limits, bp.ref_current);
    let mut aeq = DMatrix::zeros(1, n + 1);
    for c in 0..n {
        aeq[(0, c)] = 1.0;
    }
    QpProblem::new(w, v)
        .with_inequalities(a, b)
        .with_equalities(aeq, DVector::zeros(1))
}

pub fn assemble(pm: &PackModel, bp: &BalanceProblem, pred: &Prediction) -> QpProblem {
    match bp.topology {
        Topology::Independent => assemble_independent(pm, bp, pred),
        Topology::Differential => assemble_differential(pm, bp, pred),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceDecision {
    /// Decision currents: branch currents (independent) or balance
    /// currents (differential).
    pub currents: Vec<f64>,
    /// Current through each cell.
    pub applied: Vec<f64>,
    pub epsilon: f64,
    pub qp: QpSolution,
    pub status: StepStatus,
}

/// Assembles and solves one step. An infeasible QP falls back to the shared
/// reference current.
pub fn decide(
    pm: &PackModel,
    bp: &BalanceProblem,
    pred: &Prediction,
    opts: &QpOptions,
) -> Result<BalanceDecision, Error> {
    bp.validate()?;
    let n = pm.len();
    let q = assemble(pm, bp, pred);
    let qp = solve_qp(&q, opts)?;
    let lim = &bp.limits;
    let (currents, applied, status) = match qp.status {
        QpStatus::Infeasible => {
            let common = vec![bp.ref_current; n];
            let currents = match bp.topology {
                Topology::Independent => common.clone(),
                Topology::Differential => vec![0.0; n],
            };
            (currents, common, StepStatus::Fallback)
        }
        s => {
            let x: Vec<f64> = qp.xi.iter().take(n).copied().collect();
            let applied = match bp.topology {
                Topology::Independent => x.iter().map(|i| i.clamp(lim.u_min, lim.u_max)).collect(),
                Topology::Differential => x
                    .iter()
                    .map(|ub| (bp.ref_current + ub).clamp(lim.u_min, lim.u_max))
                    .collect(),
            };
            let status = if s == QpStatus::Optimal {
                StepStatus::Optimal
            } else {
                StepStatus::MaxIter
            };
            (x, applied, status)
        }
    };
    let epsilon = if status == StepStatus::Fallback {
        pred.voltages(pm, &applied)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    } else {
        qp.xi[n]
    };
    Ok(BalanceDecision {
        currents,
        applied,
        epsilon,
        qp,
        status,
    })
}

/// Settings shared by the simulation loops.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub qp: QpOptions,
    pub noise: NoiseConfig,
    pub seed: u64,
    /// Stop at the first cut-off. Demand derivation runs the whole cycle.
    pub stop_at_cutoff: bool,
    /// Margin above `y_min` at which a predicted voltage counts as cut-off.
    pub floor_margin: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            qp: QpOptions::default(),
            noise: NoiseConfig::default(),
            seed: 0,
            stop_at_cutoff: true,
            floor_margin: 1e-6,
        }
    }
}

fn step_plant(
    pm: &PackModel,
    ps: &mut PackState,
    currents: &[f64],
    noise: &mut Option<NoiseSource>,
) -> Result<Vec<f64>, ModelError> {
    let out = match noise.as_mut() {
        Some(n) => pm.step_with_noise(ps, currents, n)?,
        None => pm.step(ps, currents)?,
    };
    for (cell, sat) in &out.saturations {
        debug!("step {}: cell {} SOC saturated: {:?}", ps.step, cell + 1, sat);
    }
    Ok(out.voltages)
}

fn noise_source(opts: &RunOptions) -> Option<NoiseSource> {
    (!opts.noise.is_zero()).then(|| NoiseSource::new(opts.noise, opts.seed))
}

/// Common-current discharge: every cell carries the cycle current.
pub fn run_baseline(
    pm: &PackModel,
    cycle: &DriveCycle,
    initial_soc: &[f64],
    opts: &RunOptions,
) -> Result<SimTrace, Error> {
    let mut ps = pm.state_at_rest(initial_soc)?;
    let mut noise = noise_source(opts);
    let n = pm.len();
    let mut trace = SimTrace::new("baseline", n);
    for k in 0..cycle.len() {
        let u = cycle.current[k];
        let currents = vec![u; n];
        let soc_true = ps.socs();
        let voltages = step_plant(pm, &mut ps, &currents, &mut noise)?;
        let power = pack_power(&voltages, &currents);
        let cut = detect_cutoff(&voltages, &pm.limits);
        trace.records.push(StepRecord {
            step: k,
            currents,
            balance: None,
            voltages,
            soc_true,
            soc_est: None,
            epsilon: None,
            power,
            demand: cycle.power.as_ref().map(|p| p[k]),
            naive_power: Some(power),
            status: StepStatus::Common,
        });
        if cut.triggered && trace.cutoff.is_none() {
            trace.cutoff = Some(TraceCutoff {
                step: k,
                cell: cut.cell,
            });
            if opts.stop_at_cutoff {
                break;
            }
        }
    }
    Ok(trace)
}

/// Per-cell filters started at rest at the given SOC estimates.
pub fn initial_filters(
    pm: &PackModel,
    soc_estimate: &[f64],
    cfg: &EkfConfig,
) -> Result<Vec<EkfState>, ModelError> {
    if soc_estimate.len() != pm.len() {
        return Err(ModelError::DimensionMismatch {
            expected: pm.len(),
            got: soc_estimate.len(),
        });
    }
    soc_estimate
        .iter()
        .map(|&z| {
            if !(0.0..=1.0).contains(&z) {
                return Err(ModelError::SocOutOfRange(z));
            }
            EkfState::new(pm.memory(), CellState::rest(z), cfg)
        })
        .collect()
}

/// Closed-loop balancing run.
///
/// Step 0 applies the shared reference current. Each later step predicts
/// the estimates forward under the previously applied currents, solves the
/// allocation QP, applies the result to the plant, measures and corrects
/// the estimates. The run ends at the first measured cut-off, when the
/// allocation has to pin a predicted voltage to `y_min`, or at the end of
/// the cycle.
pub fn run_algorithm(
    pm: &PackModel,
    topology: Topology,
    cycle: &DriveCycle,
    mut plant: PackState,
    mut ekfs: Vec<EkfState>,
    opts: &RunOptions,
) -> Result<SimTrace, Error> {
    let n = pm.len();
    let power = cycle
        .power
        .as_ref()
        .ok_or(CycleError::MissingColumn("power_w"))?;
    if ekfs.len() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            got: ekfs.len(),
        }
        .into());
    }
    let mut noise = noise_source(opts);
    let mut trace = SimTrace::new(topology.as_str(), n);
    if cycle.is_empty() {
        return Ok(trace);
    }

    let mut applied = vec![cycle.current[0]; n];
    let mut balance = vec![0.0; n];
    let soc_true = plant.socs();
    let voltages = step_plant(pm, &mut plant, &applied, &mut noise)?;
    correct(pm, &mut ekfs, &voltages, &applied, 0)?;
    let delivered = pack_power(&voltages, &applied);
    let cut = detect_cutoff(&voltages, &pm.limits);
    trace.records.push(StepRecord {
        step: 0,
        currents: applied.clone(),
        balance: (topology == Topology::Differential).then(|| vec![0.0; n]),
        voltages,
        soc_true,
        soc_est: Some(ekfs.iter().map(|e| e.estimate().z).collect()),
        epsilon: None,
        power: delivered,
        demand: Some(power[0]),
        naive_power: Some(delivered),
        status: StepStatus::Common,
    });
    if cut.triggered {
        trace.cutoff = Some(TraceCutoff {
            step: 0,
            cell: cut.cell,
        });
        if opts.stop_at_cutoff {
            return Ok(trace);
        }
    }

    for k in 1..cycle.len() {
        let ur = cycle.current[k];
        for ((e, cell), &i) in ekfs.iter_mut().zip(pm.cells()).zip(&applied) {
            ekf_predict(e, &cell.matrices, i);
        }
        let states: Vec<CellState> = ekfs.iter().map(|e| e.estimate()).collect();
        let mut pred = prediction_at(pm, &states, ur);
        if topology == Topology::Differential {
            pred = pred.with_balance(pm, &balance);
        }
        let bp = BalanceProblem {
            topology,
            power_demand: power[k],
            ref_current: ur,
            limits: pm.limits,
        };
        let decision = decide(pm, &bp, &pred, &opts.qp)?;
        if decision.status == StepStatus::Fallback {
            warn!("step {k}: allocation infeasible, applying reference current {ur} A");
        } else if decision.status == StepStatus::MaxIter {
            warn!("step {k}: QP hit its iteration cap");
        }

        let naive = pack_power(&pm.voltages(&plant, &vec![ur; n]), &vec![ur; n]);
        let soc_true = plant.socs();
        let voltages = step_plant(pm, &mut plant, &decision.applied, &mut noise)?;
        correct(pm, &mut ekfs, &voltages, &decision.applied, k)?;
        let delivered = pack_power(&voltages, &decision.applied);
        let measured_cut = detect_cutoff(&voltages, &pm.limits);
        let predicted = pred.voltages(pm, &decision.applied);
        let floor_cut = detect_cutoff(
            &predicted,
            &PackLimits {
                y_min: pm.limits.y_min + opts.floor_margin,
                ..pm.limits
            },
        );
        trace.records.push(StepRecord {
            step: k,
            currents: decision.applied.clone(),
            balance: (topology == Topology::Differential).then(|| decision.currents.clone()),
            voltages,
            soc_true,
            soc_est: Some(ekfs.iter().map(|e| e.estimate().z).collect()),
            epsilon: Some(decision.epsilon),
            power: delivered,
            demand: Some(power[k]),
            naive_power: Some(naive),
            status: decision.status,
        });
        applied = decision.applied;
        if topology == Topology::Differential {
            balance = decision.currents;
        }

        let cut = if measured_cut.triggered {
            Some(measured_cut.cell)
        } else if decision.status != StepStatus::Fallback && floor_cut.triggered {
            Some(floor_cut.cell)
        } else {
            None
        };
        if let Some(cell) = cut {
            if trace.cutoff.is_none() {
                trace.cutoff = Some(TraceCutoff { step: k, cell });
            }
            if opts.stop_at_cutoff {
                break;
            }
        }
    }
    Ok(trace)
}

fn correct(
    pm: &PackModel,
    ekfs: &mut [EkfState],
    voltages: &[f64],
    currents: &[f64],
    step: usize,
) -> Result<(), Error> {
    for (((e, cell), &v), &i) in ekfs.iter_mut().zip(pm.cells()).zip(voltages).zip(currents) {
        ekf_update(e, v, i, &cell.params)?;
        let x = e.estimate();
        if !(x.u1.is_finite() && x.u2.is_finite() && x.z.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: "state estimate",
            });
        }
        if e.p.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: "error covariance",
            });
        }
    }
    Ok(())
}

/// Balanced run from rest with filters initialised at `soc_estimate`.
pub fn run_balanced(
    pm: &PackModel,
    topology: Topology,
    cycle: &DriveCycle,
    initial_soc: &[f64],
    soc_estimate: &[f64],
    ekf: &EkfConfig,
    opts: &RunOptions,
) -> Result<SimTrace, Error> {
    let plant = pm.state_at_rest(initial_soc)?;
    let ekfs = initial_filters(pm, soc_estimate, ekf)?;
    run_algorithm(pm, topology, cycle, plant, ekfs, opts)
}
