//! Hybrid PSO-GA fit of the seven cell parameters to a current/voltage log.
//!
//! Particles live in the unit cube; each coordinate maps linearly onto its
//! search bounds. A generation is a swarm move followed by a genetic pass
//! that replaces the worse half of the swarm with offspring of tournament
//! winners. The global best is never lost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cycle::MeasurementLog;
use crate::error::ConfigError;
use crate::fom::{CellModel, CellState, FomParams};

pub const THETA_NAMES: [&str; 7] = ["r0", "r1", "r2", "c1", "c2", "alpha", "beta"];

/// `[R0, R1, R2, C1, C2, alpha, beta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Theta {
    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            r0: v[0],
            r1: v[1],
            r2: v[2],
            c1: v[3],
            c2: v[4],
            alpha: v[5],
            beta: v[6],
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.r0, self.r1, self.r2, self.c1, self.c2, self.alpha, self.beta,
        ]
    }

    pub fn of(p: &FomParams) -> Self {
        Self {
            r0: p.r0,
            r1: p.r1,
            r2: p.r2,
            c1: p.c1,
            c2: p.c2,
            alpha: p.alpha,
            beta: p.beta,
        }
    }

    /// `base` with these seven parameters substituted.
    pub fn apply(&self, base: &FomParams) -> FomParams {
        FomParams {
            r0: self.r0,
            r1: self.r1,
            r2: self.r2,
            c1: self.c1,
            c2: self.c2,
            alpha: self.alpha,
            beta: self.beta,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lower: Theta,
    pub upper: Theta,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lower: Theta::from_array([0.005, 0.005, 0.001, 100.0, 10.0, 0.05, 0.01]),
            upper: Theta::from_array([0.2, 1.0, 1.0, 10000.0, 5000.0, 1.0, 1.0]),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        for k in 0..7 {
            if !(lo[k].is_finite() && hi[k].is_finite()) {
                return Err(ConfigError::SearchSpace(format!(
                    "non-finite bound on {}",
                    THETA_NAMES[k]
                )));
            }
            if lo[k] >= hi[k] {
                return Err(ConfigError::SearchSpace(format!(
                    "{}: lower {} is not below upper {}",
                    THETA_NAMES[k], lo[k], hi[k]
                )));
            }
            if lo[k] <= 0.0 {
                return Err(ConfigError::SearchSpace(format!(
                    "{}: bounds must be positive",
                    THETA_NAMES[k]
                )));
            }
        }
        for k in 5..7 {
            if hi[k] > 1.0 {
                return Err(ConfigError::SearchSpace(format!(
                    "{}: fractional order bounds must lie in (0, 1]",
                    THETA_NAMES[k]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, t: &Theta) -> bool {
        let v = t.to_array();
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        (0..7).all(|k| v[k] >= lo[k] && v[k] <= hi[k])
    }

    fn decode(&self, unit: &[f64; 7]) -> Theta {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        let mut v = [0.0; 7];
        for k in 0..7 {
            v[k] = (lo[k] + unit[k].clamp(0.0, 1.0) * (hi[k] - lo[k])).clamp(lo[k], hi[k]);
        }
        Theta::from_array(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmConfig {
    pub population: usize,
    pub generations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub crossover_prob: f64,
    /// Per-gene mutation probability.
    pub mutation_prob: f64,
    /// Mutation standard deviation as a fraction of each range.
    pub mutation_scale: f64,
    pub seed: u64,
    /// Stop once the best cost falls to this value.
    pub tolerance: f64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            population: 40,
            generations: 200,
            inertia: 0.729,
            cognitive: 1.494,
            social: 1.494,
            crossover_prob: 0.9,
            mutation_prob: 0.1,
            mutation_scale: 0.05,
            seed: 0,
            tolerance: 0.0,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.population == 0 {
            return Err(ConfigError::Swarm("population must be at least 1".into()));
        }
        for (name, p) in [
            ("crossover_prob", self.crossover_prob),
            ("mutation_prob", self.mutation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Swarm(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        for (name, w) in [
            ("inertia", self.inertia),
            ("cognitive", self.cognitive),
            ("social", self.social),
            ("mutation_scale", self.mutation_scale),
            ("tolerance", self.tolerance),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(ConfigError::Swarm(format!("{name} = {w} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Sum of squared voltage errors of `theta` on `log`, simulated from rest
/// at `z0`. Pathological parameters cost `+inf`.
pub fn fitness(theta: &Theta, log: &MeasurementLog, base: &FomParams, z0: f64) -> f64 {
    let Ok(model) = CellModel::new(theta.apply(base)) else {
        return f64::INFINITY;
    };
    let predicted = model.simulate(CellState::rest(z0), &log.current);
    let cost: f64 = predicted
        .iter()
        .zip(&log.voltage)
        .map(|(p, m)| (p - m) * (p - m))
        .sum();
    if cost.is_finite() {
        cost
    } else {
        f64::INFINITY
    }
}

/// Voltage RMSE of `theta` on `log`.
pub fn voltage_rmse(theta: &Theta, log: &MeasurementLog, base: &FomParams, z0: f64) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    (fitness(theta, log, base, z0) / log.len() as f64).sqrt()
}

/// SOC whose open-circuit voltage matches the first logged voltage; the
/// log is assumed to start from a relaxed cell.
pub fn initial_soc(log: &MeasurementLog, base: &FomParams) -> f64 {
    log.voltage
        .first()
        .map_or(1.0, |&v| base.ocv.soc_for_voltage(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub theta: Theta,
    pub cost: f64,
    pub rmse: f64,
    /// Best-so-far cost after each generation.
    pub history: Vec<f64>,
    pub evaluations: usize,
}

struct Particle {
    x: [f64; 7],
    v: [f64; 7],
    cost: f64,
    best_x: [f64; 7],
    best_cost: f64,
    rng: ChaCha8Rng,
}

fn evaluate<F>(particles: &mut [Particle], which: &[usize], space: &SearchSpace, cost: &F)
where
    F: Fn(&Theta) -> f64 + Sync,
{
    let costs: Vec<f64> = which
        .par_iter()
        .map(|&i| cost(&space.decode(&particles[i].x)))
        .map(|c| if c.is_nan() { f64::INFINITY } else { c })
        .collect();
    for (&i, c) in which.iter().zip(costs) {
        let p = &mut particles[i];
        p.cost = c;
        if c < p.best_cost {
            p.best_cost = c;
            p.best_x = p.x;
        }
    }
}

/// Fits `theta` to `log` by minimizing [`fitness`] over `space`.
pub fn identify(
    log: &MeasurementLog,
    space: &SearchSpace,
    cfg: &SwarmConfig,
    base: &FomParams,
    z0: f64,
) -> Result<Identification, ConfigError> {
    if log.is_empty() {
        return Err(ConfigError::Swarm("measurement log is empty".into()));
    }
    let mut fit = minimize(|t| fitness(t, log, base, z0), space, cfg)?;
    fit.cost = fitness(&fit.theta, log, base, z0);
    fit.rmse = (fit.cost / log.len() as f64).sqrt();
    Ok(fit)
}

/// Hybrid PSO-GA search for the minimum of `cost` over `space`. Non-finite
/// costs are treated as worst. `rmse` of the result is left at zero.
pub fn minimize<F>(cost: F, space: &SearchSpace, cfg: &SwarmConfig) -> Result<Identification, ConfigError>
where
    F: Fn(&Theta) -> f64 + Sync,
{
    space.validate()?;
    cfg.validate()?;
    let pop = cfg.population;
    let mut particles: Vec<Particle> = (0..pop)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut x = [0.0; 7];
            let mut v = [0.0; 7];
            for k in 0..7 {
                x[k] = rng.random::<f64>();
                v[k] = 0.1 * (rng.random::<f64>() - 0.5);
            }
            Particle {
                x,
                v,
                cost: f64::INFINITY,
                best_x: x,
                best_cost: f64::INFINITY,
                rng,
            }
        })
        .collect();
    let all: Vec<usize> = (0..pop).collect();
    evaluate(&mut particles, &all, space, &cost);
    let mut evaluations = pop;
    let (mut g_x, mut g_cost) = global_best(&particles, None);
    let mut history = Vec::with_capacity(cfg.generations);
    let mutation = Normal::new(0.0, cfg.mutation_scale.max(1e-12)).map_err(|e| ConfigError::Swarm(e.to_string()))?;

    for gen in 0..cfg.generations {
        if g_cost <= cfg.tolerance {
            break;
        }
        // Swarm move.
        for p in particles.iter_mut() {
            for k in 0..7 {
                let r1: f64 = p.rng.random();
                let r2: f64 = p.rng.random();
                p.v[k] = cfg.inertia * p.v[k]
                    + cfg.cognitive * r1 * (p.best_x[k] - p.x[k])
                    + cfg.social * r2 * (g_x[k] - p.x[k]);
                p.v[k] = p.v[k].clamp(-0.5, 0.5);
                p.x[k] += p.v[k];
                if p.x[k] < 0.0 || p.x[k] > 1.0 {
                    p.x[k] = p.x[k].clamp(0.0, 1.0);
                    p.v[k] = 0.0;
                }
            }
        }
        evaluate(&mut particles, &all, space, &cost);
        evaluations += pop;
        (g_x, g_cost) = global_best(&particles, Some((g_x, g_cost)));

        // Genetic pass over the worse half.
        let mut order: Vec<usize> = (0..pop).collect();
        order.sort_by(|&a, &b| particles[a].cost.total_cmp(&particles[b].cost).then(a.cmp(&b)));
        let replace = if pop == 1 { 1 } else { pop / 2 };
        let parents: Vec<([f64; 7], f64)> = particles.iter().map(|p| (p.best_x, p.best_cost)).collect();
        let losers: Vec<usize> = order[pop - replace..].to_vec();
        for &i in &losers {
            let p = &mut particles[i];
            let a = tournament(&parents, &mut p.rng);
            let b = tournament(&parents, &mut p.rng);
            let mut child = parents[a].0;
            if p.rng.random::<f64>() < cfg.crossover_prob {
                for k in 0..7 {
                    let (lo, hi) = (parents[a].0[k].min(parents[b].0[k]), parents[a].0[k].max(parents[b].0[k]));
                    let d = hi - lo;
                    let u: f64 = p.rng.random();
                    child[k] = lo - 0.5 * d + u * 2.0 * d;
                }
            }
            for c in child.iter_mut() {
                if p.rng.random::<f64>() < cfg.mutation_prob {
                    *c += mutation.sample(&mut p.rng);
                }
                *c = c.clamp(0.0, 1.0);
            }
            p.x = child;
        }
        evaluate(&mut particles, &losers, space, &cost);
        evaluations += losers.len();
        (g_x, g_cost) = global_best(&particles, Some((g_x, g_cost)));
        history.push(g_cost);
        log::debug!("generation {gen}: best cost {g_cost:e}");
    }

    let theta = space.decode(&g_x);
    Ok(Identification {
        theta,
        cost: cost(&theta),
        rmse: 0.0,
        history,
        evaluations,
    })
}

fn global_best(particles: &[Particle], current: Option<([f64; 7], f64)>) -> ([f64; 7], f64) {
    let mut best = current.unwrap_or(([0.5; 7], f64::INFINITY));
    for p in particles {
        if p.best_cost < best.1 {
            best = (p.best_x, p.best_cost);
        }
    }
    if !best.1.is_finite() && current.is_none() {
        best.0 = particles[0].x;
    }
    best
}

/// Size-2 tournament on personal-best cost; ties go to the lower index.
fn tournament(parents: &[([f64; 7], f64)], rng: &mut ChaCha8Rng) -> usize {
    let a = rng.random_range(0..parents.len());
    let b = rng.random_range(0..parents.len());
    let (a, b) = (a.min(b), a.max(b));
    if parents[b].1 < parents[a].1 {
        b
    } else {
        a
    }
}
