//! Single-cell fractional-order model.
//!
//! Two constant-phase-element (CPE) polarization branches in series with an
//! ohmic resistance and an OCV source. The CPE dynamics are discretized with
//! the Grünwald-Letnikov operator truncated to a fixed memory length `L`:
//!
//! ```text
//! x[k+1] = A x[k] + B i[k] - sum_{j=2}^{L+1} (-1)^j Phi_j x[k-j+1]
//! y[k]   = Uoc(z[k]) + C x[k] + D i[k]
//! ```
//!
//! with `x = [u1, u2, z]`. Current is positive on discharge.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Seconds per hour, for capacity conversions.
pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// OCV-SOC polynomial coefficients a0..a6 of the NCR18650B cell (V).
pub const NCR18650B_OCV: [f64; 7] = [
    3.2009, 3.9360, -16.8149, 35.8125, -30.7914, 5.5057, 3.3186,
];

/// Signed Grünwald-Letnikov weight `(-1)^j <mu, j>`.
///
/// Evaluated with the recurrence `w0 = 1`, `wj = w(j-1) * (1 - (mu + 1) / j)`,
/// which stays finite where the Gamma-ratio form hits poles (integer `mu`).
pub fn gl_coefficient(mu: f64, j: usize) -> f64 {
    let mut w = 1.0;
    for i in 1..=j {
        w *= 1.0 - (mu + 1.0) / i as f64;
    }
    w
}

/// Signed weights `w_0..w_{len-1}` for one order, sharing the recurrence.
pub fn gl_weights(mu: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut w = 1.0;
    for j in 0..len {
        if j > 0 {
            w *= 1.0 - (mu + 1.0) / j as f64;
        }
        out.push(w);
    }
    out
}

/// Sixth-order OCV polynomial `Uoc(z) = sum a_i z^i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OcvPolynomial {
    coeffs: [f64; 7],
}

impl Default for OcvPolynomial {
    fn default() -> Self {
        Self::new(NCR18650B_OCV)
    }
}

impl OcvPolynomial {
    pub fn new(coeffs: [f64; 7]) -> Self {
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64; 7] {
        &self.coeffs
    }

    /// Evaluates the polynomial, rejecting SOC outside `[0, 1]`.
    pub fn try_voltage(&self, z: f64) -> Result<f64, ModelError> {
        if !(0.0..=1.0).contains(&z) {
            return Err(ModelError::SocOutOfRange(z));
        }
        Ok(self.horner(z))
    }

    /// Evaluates the polynomial at `z` clamped to `[0, 1]`.
    pub fn voltage(&self, z: f64) -> f64 {
        self.horner(z.clamp(0.0, 1.0))
    }

    /// `dUoc/dz` at `z` clamped to `[0, 1]`.
    pub fn slope(&self, z: f64) -> f64 {
        let z = z.clamp(0.0, 1.0);
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, &a)| acc * z + i as f64 * a)
    }

    /// Inverts the curve by bisection; the curve is monotone on `[0, 1]`.
    /// Voltages outside the curve's range map to the nearest end.
    pub fn soc_for_voltage(&self, v: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        if v <= self.horner(lo) {
            return lo;
        }
        if v >= self.horner(hi) {
            return hi;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.horner(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn horner(&self, z: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &a| acc * z + a)
    }
}

/// Parameter set of one cell.
///
/// `capacity` is in ampere-seconds; `memory` is the truncation length `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FomParams {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub capacity: f64,
    pub eta: f64,
    pub ts: f64,
    pub memory: usize,
    pub ocv: OcvPolynomial,
}

impl FomParams {
    /// Default sampling interval (s).
    pub const DEFAULT_TS: f64 = 1.0;
    /// Default GL memory length (samples).
    pub const DEFAULT_MEMORY: usize = 50;
    /// Nominal NCR18650B capacity (A·s).
    pub const NOMINAL_CAPACITY: f64 = 3.2 * SECONDS_PER_HOUR;

    /// Identified parameters of cell 1 of the reference two-cell pack.
    pub fn reference_cell1() -> Self {
        Self {
            r0: 0.0545,
            r1: 0.4567,
            r2: 0.4959,
            c1: 4950.0,
            c2: 270.6,
            alpha: 0.3110,
            beta: 0.0548,
            capacity: Self::NOMINAL_CAPACITY,
            eta: 1.0,
            ts: Self::DEFAULT_TS,
            memory: Self::DEFAULT_MEMORY,
            ocv: OcvPolynomial::default(),
        }
    }

    /// Identified parameters of cell 2 of the reference two-cell pack.
    pub fn reference_cell2() -> Self {
        Self {
            r0: 0.0567,
            r1: 0.4314,
            r2: 0.0137,
            c1: 4999.7,
            c2: 802.1,
            alpha: 0.9103,
            beta: 0.061,
            ..Self::reference_cell1()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("r0", self.r0),
            ("r1", self.r1),
            ("r2", self.r2),
            ("c1", self.c1),
            ("c2", self.c2),
            ("capacity", self.capacity),
            ("ts", self.ts),
        ];
        for (name, value) in positive {
            if !value.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
            if value <= 0.0 {
                return Err(ModelError::InvalidParameter {
                    name,
                    value,
                    reason: "must be positive",
                });
            }
        }
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("eta", self.eta)] {
            if !value.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
            if value <= 0.0 || value > 1.0 {
                return Err(ModelError::InvalidParameter {
                    name,
                    value,
                    reason: "must lie in (0, 1]",
                });
            }
        }
        if self.memory < 1 {
            return Err(ModelError::InvalidParameter {
                name: "memory",
                value: self.memory as f64,
                reason: "must be at least 1",
            });
        }
        if self.ocv.coeffs().iter().any(|a| !a.is_finite()) {
            return Err(ModelError::NonFinite("ocv coefficient"));
        }
        Ok(())
    }
}

/// Cell state `[u1, u2, z]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub u1: f64,
    pub u2: f64,
    pub z: f64,
}

impl CellState {
    pub fn new(u1: f64, u2: f64, z: f64) -> Self {
        Self { u1, u2, z }
    }

    /// Fully relaxed cell at SOC `z`.
    pub fn rest(z: f64) -> Self {
        Self { u1: 0.0, u2: 0.0, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.u1, self.u2, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    fn as_array(self) -> [f64; 3] {
        [self.u1, self.u2, self.z]
    }
}

/// The most recent `L + 1` states, newest first.
///
/// Lags beyond what has been recorded read as the zero state.
#[derive(Debug, Clone, PartialEq)]
pub struct CellHistory {
    states: VecDeque<CellState>,
    capacity: usize,
}

impl CellHistory {
    pub fn new(memory: usize, initial: CellState) -> Self {
        let capacity = memory + 1;
        let mut states = VecDeque::with_capacity(capacity);
        states.push_front(initial);
        Self { states, capacity }
    }

    pub fn current(&self) -> CellState {
        self.states[0]
    }

    /// State `lag` samples back; `lag = 0` is the current state.
    pub fn lagged(&self, lag: usize) -> CellState {
        self.states.get(lag).copied().unwrap_or_default()
    }

    pub fn push(&mut self, state: CellState) {
        if self.states.len() == self.capacity {
            self.states.pop_back();
        }
        self.states.push_front(state);
    }

    /// Overwrites the current state (used by the estimator's correction).
    pub fn replace_current(&mut self, state: CellState) {
        self.states[0] = state;
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &CellState> {
        self.states.iter()
    }
}

/// Discrete state-space matrices of one cell.
///
/// `A`, `Phi_j` are diagonal and stored as their diagonals. `memory[j - 2]`
/// holds the signed weights `(-1)^j diag(Phi_j)` for `j = 2..=L+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMatrices {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub c: [f64; 3],
    pub d: f64,
    memory: Vec<[f64; 3]>,
}

impl CellMatrices {
    /// `diag(<alpha, j>, <beta, j>, <1, j>)` for `j` in `2..=L+1`.
    pub fn phi(&self, j: usize) -> [f64; 3] {
        let w = self.memory[j - 2];
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        [sign * w[0], sign * w[1], sign * w[2]]
    }

    /// Signed memory weights `(-1)^j diag(Phi_j)`, indexed from `j = 2`.
    pub fn memory_weights(&self) -> &[[f64; 3]] {
        &self.memory
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn a_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.a))
    }

    /// Unclamped one-step propagation from the history's current state.
    pub fn propagate(&self, history: &CellHistory, current: f64) -> CellState {
        let x = history.current().as_array();
        let mut next = [0.0; 3];
        for r in 0..3 {
            next[r] = self.a[r] * x[r] + self.b[r] * current;
        }
        // x[k-j+1] sits at lag j-1 in the history.
        for (offset, w) in self.memory.iter().enumerate() {
            let lagged = history.lagged(offset + 1).as_array();
            for r in 0..3 {
                next[r] -= w[r] * lagged[r];
            }
        }
        CellState::new(next[0], next[1], next[2])
    }
}

/// Builds `A`, `B`, `C`, `D` and the memory matrices for `p`.
pub fn build_matrices(p: &FomParams) -> Result<CellMatrices, ModelError> {
    p.validate()?;
    let ts_a = p.ts.powf(p.alpha);
    let ts_b = p.ts.powf(p.beta);
    let a = [
        p.alpha - ts_a / (p.r1 * p.c1),
        p.beta - ts_b / (p.r2 * p.c2),
        1.0,
    ];
    let b = [ts_a / p.c1, ts_b / p.c2, -p.eta * p.ts / p.capacity];
    let len = p.memory + 2;
    let wa = gl_weights(p.alpha, len);
    let wb = gl_weights(p.beta, len);
    let wz = gl_weights(1.0, len);
    let memory = (2..len).map(|j| [wa[j], wb[j], wz[j]]).collect();
    let m = CellMatrices {
        a,
        b,
        c: [-1.0, -1.0, 0.0],
        d: -p.r0,
        memory,
    };
    if m.a.iter().chain(m.b.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("state matrix entry"));
    }
    Ok(m)
}

/// SOC left `[0, 1]` during a step and was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SocSaturation {
    Depleted { unclamped: f64 },
    Overcharged { unclamped: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: CellState,
    pub saturation: Option<SocSaturation>,
}

/// Advances the history by one sample under `current` and returns the new state.
pub fn step_cell(m: &CellMatrices, history: &mut CellHistory, current: f64) -> StepOutcome {
    let mut state = m.propagate(history, current);
    let saturation = if state.z < 0.0 {
        Some(SocSaturation::Depleted { unclamped: state.z })
    } else if state.z > 1.0 {
        Some(SocSaturation::Overcharged { unclamped: state.z })
    } else {
        None
    };
    state.z = state.z.clamp(0.0, 1.0);
    history.push(state);
    StepOutcome { state, saturation }
}

/// `Ut = Uoc(z) - u1 - u2 - R0 i`.
pub fn terminal_voltage(p: &FomParams, s: &CellState, current: f64) -> f64 {
    p.ocv.voltage(s.z) - s.u1 - s.u2 - p.r0 * current
}

/// Parameters bundled with their precomputed matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CellModel {
    pub params: FomParams,
    pub matrices: CellMatrices,
}

impl CellModel {
    pub fn new(params: FomParams) -> Result<Self, ModelError> {
        let matrices = build_matrices(&params)?;
        Ok(Self { params, matrices })
    }

    pub fn history_at_rest(&self, z: f64) -> CellHistory {
        CellHistory::new(self.params.memory, CellState::rest(z))
    }

    pub fn voltage(&self, s: &CellState, current: f64) -> f64 {
        terminal_voltage(&self.params, s, current)
    }

    /// Simulates a current sequence from `initial` and returns the terminal
    /// voltage at each sample, `y[k] = h(x[k], i[k])`.
    pub fn simulate(&self, initial: CellState, currents: &[f64]) -> Vec<f64> {
        let mut history = CellHistory::new(self.params.memory, initial);
        let mut out = Vec::with_capacity(currents.len());
        for &i in currents {
            out.push(self.voltage(&history.current(), i));
            step_cell(&self.matrices, &mut history, i);
        }
        out
    }
}
