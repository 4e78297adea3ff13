//! Bounded particle swarm optimizer with linearly decaying inertia,
//! per-dimension velocity clamping and stagnation-based termination.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PsoError {
    #[error("invalid PSO configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension {dim}: bounds [{lower}, {upper}] must be finite with lower < upper")]
    InvalidBounds { dim: usize, lower: f64, upper: f64 },
    #[error("expected {expected} dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoConfig {
    pub n_particles: usize,
    pub c1: f64,
    pub c2: f64,
    pub w_max: f64,
    pub w_min: f64,
    pub iter_max: usize,
    /// Velocity limit per dimension as a fraction of that dimension's range.
    pub v_max_fraction: f64,
    pub stagnation_window: usize,
    /// Decimal places of the best value compared by the stagnation rule.
    pub stagnation_digits: u32,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            n_particles: 10,
            c1: 2.0,
            c2: 2.0,
            w_max: 0.9,
            w_min: 0.4,
            iter_max: 500,
            v_max_fraction: 0.15,
            stagnation_window: 50,
            stagnation_digits: 5,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<(), PsoError> {
        let bad = |m: &str| Err(PsoError::InvalidConfig(m.to_string()));
        if self.n_particles < 2 {
            return bad("n_particles must be at least 2");
        }
        if !(self.w_min > 0.0 && self.w_min <= self.w_max && self.w_max.is_finite()) {
            return bad("inertia bounds must satisfy 0 < w_min <= w_max");
        }
        if !(self.v_max_fraction > 0.0 && self.v_max_fraction <= 1.0) {
            return bad("v_max_fraction must lie in (0, 1]");
        }
        if !(self.c1.is_finite() && self.c2.is_finite() && self.c1 >= 0.0 && self.c2 >= 0.0) {
            return bad("acceleration factors must be finite and non-negative");
        }
        if self.iter_max == 0 {
            return bad("iter_max must be positive");
        }
        if self.stagnation_window == 0 {
            return bad("stagnation_window must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pbest_position: Vec<f64>,
    pub pbest_value: f64,
}

impl Particle {
    pub fn at(position: Vec<f64>) -> Self {
        let m = position.len();
        Particle {
            pbest_position: position.clone(),
            position,
            velocity: vec![0.0; m],
            pbest_value: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Stagnation,
    IterMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoResult {
    pub gbest_position: Vec<f64>,
    pub gbest_value: f64,
    pub iterations_run: usize,
    /// Best value after each iteration's evaluations.
    pub trace: Vec<f64>,
    pub terminated_by: Termination,
}

/// `w = w_max − (w_max − w_min)/iter_max · iter`.
pub fn inertia_weight(cfg: &PsoConfig, iter: usize) -> f64 {
    cfg.w_max - (cfg.w_max - cfg.w_min) / cfg.iter_max as f64 * iter as f64
}

/// New velocity with fresh uniform draws for the cognitive then social term
/// of every dimension, clamped to `±v_max[d]`.
pub fn update_velocity<R: Rng>(
    p: &Particle,
    gbest: &[f64],
    w: f64,
    cfg: &PsoConfig,
    v_max: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    (0..p.position.len())
        .map(|d| {
            let r1: f64 = rng.gen();
            let r2: f64 = rng.gen();
            let x = p.position[d];
            let v = w * p.velocity[d]
                + cfg.c1 * r1 * (p.pbest_position[d] - x)
                + cfg.c2 * r2 * (gbest[d] - x);
            v.clamp(-v_max[d], v_max[d])
        })
        .collect()
}

/// Moves the particle by `velocity`; a dimension that leaves its bounds is
/// clamped to the bound and its velocity zeroed.
pub fn update_position(p: &mut Particle, velocity: Vec<f64>, bounds: &[(f64, f64)]) {
    p.velocity = velocity;
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        let x = p.position[d] + p.velocity[d];
        if x < lo || x > hi {
            p.position[d] = x.clamp(lo, hi);
            p.velocity[d] = 0.0;
        } else {
            p.position[d] = x;
        }
    }
}

fn validate_bounds(bounds: &[(f64, f64)]) -> Result<(), PsoError> {
    for (dim, &(lower, upper)) in bounds.iter().enumerate() {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(PsoError::InvalidBounds { dim, lower, upper });
        }
    }
    Ok(())
}

fn rounded(value: f64, digits: u32) -> f64 {
    let scale = 10f64.powi(digits as i32);
    (value * scale).round() / scale
}

/// True when the last `window` entries of `trace` agree after rounding.
pub fn is_stagnant(trace: &[f64], window: usize, digits: u32) -> bool {
    if window == 0 || trace.len() < window {
        return false;
    }
    let tail = &trace[trace.len() - window..];
    let first = rounded(tail[0], digits);
    tail.iter().all(|&v| rounded(v, digits) == first)
}

/// Minimizes `objective` over the box `bounds`.
pub fn run<F>(objective: F, bounds: &[(f64, f64)], cfg: &PsoConfig) -> Result<PsoResult, PsoError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    run_seeded(objective, bounds, cfg, &[])
}

/// As [`run`], with the first particles started at `seeds` (clamped to the
/// bounds) instead of random positions. The random stream is consumed the
/// same way either way.
pub fn run_seeded<F>(
    objective: F,
    bounds: &[(f64, f64)],
    cfg: &PsoConfig,
    seeds: &[Vec<f64>],
) -> Result<PsoResult, PsoError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    validate_bounds(bounds)?;
    let m = bounds.len();
    if let Some(bad) = seeds.iter().find(|s| s.len() != m) {
        return Err(PsoError::DimensionMismatch {
            expected: m,
            got: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v_max: Vec<f64> = bounds
        .iter()
        .map(|(lo, hi)| cfg.v_max_fraction * (hi - lo))
        .collect();

    let mut swarm: Vec<Particle> = (0..cfg.n_particles)
        .map(|i| {
            let random: Vec<f64> = bounds
                .iter()
                .map(|&(lo, hi)| lo + rng.gen::<f64>() * (hi - lo))
                .collect();
            let position = match seeds.get(i) {
                Some(seed) => seed
                    .iter()
                    .zip(bounds)
                    .map(|(x, &(lo, hi))| x.clamp(lo, hi))
                    .collect(),
                None => random,
            };
            Particle::at(position)
        })
        .collect();

    let mut gbest_position = swarm[0].position.clone();
    let mut gbest_value = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iter = 0;
    let terminated_by = loop {
        let values: Vec<f64> = swarm
            .par_iter()
            .map(|p| {
                let v = objective(&p.position);
                if v.is_nan() || v == f64::NEG_INFINITY {
                    f64::INFINITY
                } else {
                    v
                }
            })
            .collect();
        for (p, &value) in swarm.iter_mut().zip(&values) {
            if value < p.pbest_value {
                p.pbest_value = value;
                p.pbest_position.clone_from(&p.position);
            }
            if value < gbest_value {
                gbest_value = value;
                gbest_position.clone_from(&p.position);
            }
        }
        trace.push(gbest_value);
        iter += 1;

        if is_stagnant(&trace, cfg.stagnation_window, cfg.stagnation_digits) {
            break Termination::Stagnation;
        }
        if iter >= cfg.iter_max {
            break Termination::IterMax;
        }

        let w = inertia_weight(cfg, iter - 1);
        for p in &mut swarm {
            let velocity = update_velocity(p, &gbest_position, w, cfg, &v_max, &mut rng);
            update_position(p, velocity, bounds);
            debug_assert!(p
                .position
                .iter()
                .zip(bounds)
                .all(|(x, (lo, hi))| lo <= x && x <= hi));
            debug_assert!(p.velocity.iter().zip(&v_max).all(|(v, vm)| v.abs() <= *vm));
        }
    };

    Ok(PsoResult {
        gbest_position,
        gbest_value,
        iterations_run: iter,
        trace,
        terminated_by,
    })
}

/// Writes `iteration,gbest_value` rows, one per iteration starting at 1,
/// with values to five decimal places.
pub fn write_trace_csv<W: Write>(trace: &[f64], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "gbest_value"])?;
    for (k, v) in trace.iter().enumerate() {
        w.write_record([(k + 1).to_string(), format!("{v:.5}")])?;
    }
    w.flush()?;
    Ok(())
}
