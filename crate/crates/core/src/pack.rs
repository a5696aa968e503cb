//! Series pack of cells stepped in lockstep.
//!
//! The pack matrices are block-diagonal in the cell matrices, so a pack step
//! is exactly `N` independent cell steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::fom::{step_cell, CellHistory, CellModel, CellState, FomParams, SocSaturation};

/// Per-cell operating bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackLimits {
    pub u_min: f64,
    pub u_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for PackLimits {
    /// NCR18650B envelope: 3.0-4.2 V, 6.4 A discharge, 1C charge.
    fn default() -> Self {
        Self {
            u_min: -3.2,
            u_max: 6.4,
            y_min: 3.0,
            y_max: 4.2,
            z_min: 0.0,
            z_max: 1.0,
        }
    }
}

impl PackLimits {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.u_min, self.u_max, self.y_min, self.y_max, self.z_min, self.z_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("pack limit"));
        }
        if self.u_min >= self.u_max {
            return Err(ModelError::InvalidLimits("u_min must be below u_max"));
        }
        if self.y_min >= self.y_max {
            return Err(ModelError::InvalidLimits("y_min must be below y_max"));
        }
        if !(0.0 <= self.z_min && self.z_min < self.z_max && self.z_max <= 1.0) {
            return Err(ModelError::InvalidLimits("need 0 <= z_min < z_max <= 1"));
        }
        Ok(())
    }

    pub fn current_within(&self, i: f64) -> bool {
        i >= self.u_min && i <= self.u_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackModel {
    cells: Vec<CellModel>,
    pub limits: PackLimits,
    ts: f64,
}

impl PackModel {
    pub fn new(params: Vec<FomParams>, limits: PackLimits) -> Result<Self, ModelError> {
        if params.len() < 2 {
            return Err(ModelError::TooFewCells(params.len()));
        }
        limits.validate()?;
        let ts = params[0].ts;
        let memory = params[0].memory;
        if params.iter().any(|p| p.ts != ts) {
            return Err(ModelError::MismatchedCells("sampling interval"));
        }
        if params.iter().any(|p| p.memory != memory) {
            return Err(ModelError::MismatchedCells("memory length"));
        }
        let cells = params
            .into_iter()
            .map(CellModel::new)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { cells, limits, ts })
    }

    pub fn cells(&self) -> &[CellModel] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn memory(&self) -> usize {
        self.cells[0].params.memory
    }

    /// Relaxed pack at the given per-cell SOCs.
    pub fn state_at_rest(&self, socs: &[f64]) -> Result<PackState, ModelError> {
        if socs.len() != self.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.len(),
                got: socs.len(),
            });
        }
        for &z in socs {
            if !(0.0..=1.0).contains(&z) {
                return Err(ModelError::SocOutOfRange(z));
            }
        }
        Ok(PackState {
            histories: self
                .cells
                .iter()
                .zip(socs)
                .map(|(c, &z)| c.history_at_rest(z))
                .collect(),
            step: 0,
        })
    }

    /// Terminal voltages at the current state under `currents`.
    pub fn voltages(&self, ps: &PackState, currents: &[f64]) -> Vec<f64> {
        self.cells
            .iter()
            .zip(&ps.histories)
            .zip(currents)
            .map(|((c, h), &i)| c.voltage(&h.current(), i))
            .collect()
    }

    fn check_currents(&self, currents: &[f64]) -> Result<(), ModelError> {
        if currents.len() != self.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.len(),
                got: currents.len(),
            });
        }
        for (cell, &i) in currents.iter().enumerate() {
            if !i.is_finite() {
                return Err(ModelError::NonFinite("cell current"));
            }
            if !self.limits.current_within(i) {
                return Err(ModelError::CurrentOutOfBounds {
                    cell,
                    current: i,
                    min: self.limits.u_min,
                    max: self.limits.u_max,
                });
            }
        }
        Ok(())
    }

    /// Measures the voltages under `currents`, then advances every cell.
    pub fn step(&self, ps: &mut PackState, currents: &[f64]) -> Result<PackStep, ModelError> {
        self.step_inner(ps, currents, None)
    }

    /// As [`PackModel::step`], with Gaussian process and measurement noise.
    pub fn step_with_noise(
        &self,
        ps: &mut PackState,
        currents: &[f64],
        noise: &mut NoiseSource,
    ) -> Result<PackStep, ModelError> {
        self.step_inner(ps, currents, Some(noise))
    }

    fn step_inner(
        &self,
        ps: &mut PackState,
        currents: &[f64],
        mut noise: Option<&mut NoiseSource>,
    ) -> Result<PackStep, ModelError> {
        self.check_currents(currents)?;
        let mut voltages = self.voltages(ps, currents);
        if let Some(n) = noise.as_deref_mut() {
            for v in voltages.iter_mut() {
                *v += n.measurement();
            }
        }
        let mut saturations = Vec::new();
        for (cell, ((model, history), &i)) in self
            .cells
            .iter()
            .zip(ps.histories.iter_mut())
            .zip(currents)
            .enumerate()
        {
            let out = step_cell(&model.matrices, history, i);
            if let Some(n) = noise.as_deref_mut() {
                let w = n.process();
                let mut s = out.state;
                s.u1 += w[0];
                s.u2 += w[1];
                s.z = (s.z + w[2]).clamp(0.0, 1.0);
                history.replace_current(s);
            }
            if let Some(sat) = out.saturation {
                saturations.push((cell, sat));
            }
        }
        ps.step += 1;
        Ok(PackStep {
            voltages,
            saturations,
        })
    }
}

/// Per-cell histories plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PackState {
    pub histories: Vec<CellHistory>,
    pub step: usize,
}

impl PackState {
    pub fn current_states(&self) -> Vec<CellState> {
        self.histories.iter().map(|h| h.current()).collect()
    }

    pub fn socs(&self) -> Vec<f64> {
        self.histories.iter().map(|h| h.current().z).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackStep {
    pub voltages: Vec<f64>,
    pub saturations: Vec<(usize, SocSaturation)>,
}

/// Standard deviations of injected plant noise. Zero disables a channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default)]
    pub process_std: [f64; 3],
    #[serde(default)]
    pub voltage_std: f64,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.voltage_std == 0.0 && self.process_std.iter().all(|&s| s == 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSource {
    config: NoiseConfig,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(config: NoiseConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn draw(&mut self, std: f64) -> f64 {
        if std > 0.0 {
            Normal::new(0.0, std)
                .map(|d| d.sample(&mut self.rng))
                .unwrap_or(0.0)
        } else {
            0.0
        }
    }

    fn measurement(&mut self) -> f64 {
        self.draw(self.config.voltage_std)
    }

    fn process(&mut self) -> [f64; 3] {
        let s = self.config.process_std;
        [self.draw(s[0]), self.draw(s[1]), self.draw(s[2])]
    }
}

/// Result of a cut-off check: the weakest cell is always reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cutoff {
    pub triggered: bool,
    pub cell: usize,
}

/// Flags cut-off when the lowest cell voltage is at or below `y_min`.
/// Ties resolve to the lowest cell index.
pub fn detect_cutoff(voltages: &[f64], limits: &PackLimits) -> Cutoff {
    let mut cell = 0;
    for (i, &v) in voltages.iter().enumerate() {
        if v < voltages[cell] {
            cell = i;
        }
    }
    let triggered = voltages.get(cell).is_some_and(|&v| v <= limits.y_min);
    Cutoff { triggered, cell }
}

/// Power delivered by the cells, `sum v_i i_i` (W).
pub fn pack_power(voltages: &[f64], currents: &[f64]) -> f64 {
    voltages.iter().zip(currents).map(|(v, i)| v * i).sum()
}
