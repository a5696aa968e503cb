//! Per-cell extended Kalman filter over `[u1, u2, z]`.
//!
//! The GL memory terms are carried as known inputs through the stored
//! estimate history; only the one-step matrix `A` propagates covariance.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::fom::{step_cell, CellHistory, CellMatrices, CellState, FomParams};

/// Initial covariance as published, row-major. It is not symmetric; the
/// filter uses its diagonal instead (see [`EkfConfig::default`]).
pub const PUBLISHED_P0: [[f64; 3]; 3] = [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.1, 0.1, 0.1]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// Diagonal of the initial error covariance.
    pub p0: [f64; 3],
    /// Diagonal of the process-noise covariance.
    pub q: [f64; 3],
    /// Measurement-noise variance (V^2).
    pub rm: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            p0: [0.1, 0.1, 0.1],
            q: [1e-2, 1e-2, 1e-9],
            rm: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub history: CellHistory,
    pub p: Matrix3<f64>,
    pub q: Matrix3<f64>,
    pub rm: f64,
}

/// Diagnostics of one measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Innovation {
    pub residual: f64,
    pub variance: f64,
    pub gain: Vector3<f64>,
}

impl EkfState {
    pub fn new(memory: usize, initial: CellState, cfg: &EkfConfig) -> Result<Self, ModelError> {
        if !(cfg.rm > 0.0 && cfg.rm.is_finite()) {
            return Err(ModelError::InvalidParameter {
                name: "rm",
                value: cfg.rm,
                reason: "must be positive",
            });
        }
        for &v in cfg.p0.iter().chain(cfg.q.iter()) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidParameter {
                    name: "covariance diagonal",
                    value: v,
                    reason: "must be non-negative",
                });
            }
        }
        Ok(Self {
            history: CellHistory::new(memory, initial),
            p: Matrix3::from_diagonal(&Vector3::from(cfg.p0)),
            q: Matrix3::from_diagonal(&Vector3::from(cfg.q)),
            rm: cfg.rm,
        })
    }

    pub fn estimate(&self) -> CellState {
        self.history.current()
    }
}

/// Time update: propagates the estimate through the model and inflates `P`.
pub fn ekf_predict(e: &mut EkfState, m: &CellMatrices, current: f64) {
    step_cell(m, &mut e.history, current);
    let a = m.a_matrix();
    e.p = symmetrize(&(a * e.p * a.transpose() + e.q));
}

/// Output Jacobian `[-1, -1, dUoc/dz]` at the current estimate.
pub fn output_jacobian(p: &FomParams, s: &CellState) -> RowVector3<f64> {
    RowVector3::new(-1.0, -1.0, p.ocv.slope(s.z))
}

/// `K = P H^T / (H P H^T + Rm)`.
pub fn kalman_gain(p: &Matrix3<f64>, h: &RowVector3<f64>, rm: f64) -> Vector3<f64> {
    let s = (h * p * h.transpose())[(0, 0)] + rm;
    p * h.transpose() / s
}

/// Measurement update with a Joseph-form covariance correction.
pub fn ekf_update(
    e: &mut EkfState,
    measured: f64,
    current: f64,
    p: &FomParams,
) -> Result<Innovation, ModelError> {
    if !measured.is_finite() {
        return Err(ModelError::NonFinite("voltage measurement"));
    }
    let x = e.estimate();
    let h = output_jacobian(p, &x);
    let predicted = p.ocv.voltage(x.z) - x.u1 - x.u2 - p.r0 * current;
    let residual = measured - predicted;
    let variance = (h * e.p * h.transpose())[(0, 0)] + e.rm;
    let gain = e.p * h.transpose() / variance;
    let mut corrected = CellState::from_vector(&(x.to_vector() + gain * residual));
    corrected.z = corrected.z.clamp(0.0, 1.0);
    e.history.replace_current(corrected);
    let i_kh = Matrix3::identity() - gain * h;
    e.p = symmetrize(&(i_kh * e.p * i_kh.transpose() + gain * gain.transpose() * e.rm));
    Ok(Innovation {
        residual,
        variance,
        gain,
    })
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::CellModel;

    #[test]
    fn published_p0_is_not_symmetric() {
        let m = Matrix3::from_fn(|r, c| PUBLISHED_P0[r][c]);
        assert_ne!(m, m.transpose());
        let cfg = EkfConfig::default();
        for k in 0..3 {
            assert_eq!(cfg.p0[k], PUBLISHED_P0[k][k]);
        }
    }

    #[test]
    fn predict_matches_hand_arithmetic() {
        let cell = CellModel::new(FomParams::reference_cell1()).unwrap();
        let mut e = EkfState::new(50, CellState::rest(1.0), &EkfConfig::default()).unwrap();
        ekf_predict(&mut e, &cell.matrices, 1.0);
        let a = cell.matrices.a;
        let expect = [
            a[0] * a[0] * 0.1 + 1e-2,
            a[1] * a[1] * 0.1 + 1e-2,
            0.1 + 1e-9,
        ];
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { expect[r] } else { 0.0 };
                assert!((e.p[(r, c)] - want).abs() < 1e-15, "P[{r},{c}]");
            }
        }
    }

    #[test]
    fn zero_innovation_leaves_state() {
        let cell = CellModel::new(FomParams::reference_cell1()).unwrap();
        let mut e = EkfState::new(50, CellState::rest(0.7), &EkfConfig::default()).unwrap();
        let before = e.estimate();
        let p_before = e.p;
        let v = cell.voltage(&before, 1.5);
        let inn = ekf_update(&mut e, v, 1.5, &cell.params).unwrap();
        assert_eq!(inn.residual, 0.0);
        assert_eq!(e.estimate(), before);
        assert!(e.p.trace() < p_before.trace());
    }

    #[test]
    fn rejects_nan_measurement() {
        let cell = CellModel::new(FomParams::reference_cell1()).unwrap();
        let mut e = EkfState::new(50, CellState::rest(0.7), &EkfConfig::default()).unwrap();
        assert!(ekf_update(&mut e, f64::NAN, 0.0, &cell.params).is_err());
    }

    #[test]
    fn covariance_inflates_without_measurements() {
        let cell = CellModel::new(FomParams::reference_cell2()).unwrap();
        // From a certain start the polarization variances climb toward
        // q / (1 - a^2); the SOC variance grows without bound.
        let cfg = EkfConfig {
            p0: [0.0; 3],
            ..EkfConfig::default()
        };
        let mut e = EkfState::new(50, CellState::rest(0.9), &cfg).unwrap();
        let mut prev = e.p.trace();
        for _ in 0..50 {
            ekf_predict(&mut e, &cell.matrices, 1.0);
            assert!(e.p.trace() > prev);
            prev = e.p.trace();
        }
        let mut e = EkfState::new(50, CellState::rest(0.9), &EkfConfig::default()).unwrap();
        let mut prev = e.p[(2, 2)];
        for _ in 0..50 {
            ekf_predict(&mut e, &cell.matrices, 1.0);
            assert!(e.p[(2, 2)] > prev);
            prev = e.p[(2, 2)];
        }
    }

    #[test]
    fn rejects_bad_noise_config() {
        let cfg = EkfConfig {
            rm: 0.0,
            ..EkfConfig::default()
        };
        assert!(EkfState::new(50, CellState::rest(0.5), &cfg).is_err());
    }
}
