//! Few-shot regression episodes drawn from four function families.

use std::f64::consts::PI;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffnet::Batch;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sinusoids,
    Line,
    Quadratic,
    Cubic,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Sinusoids, Family::Line, Family::Quadratic, Family::Cubic];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sinusoids => "sinusoids",
            Family::Line => "line",
            Family::Quadratic => "quadratic",
            Family::Cubic => "cubic",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn arity(self) -> usize {
        self.param_ranges().len()
    }

    /// Closed sampling interval of each formula parameter.
    pub fn param_ranges(self) -> &'static [(f64, f64)] {
        match self {
            Family::Sinusoids => &[(0.1, 5.0), (0.8, 1.2), (0.0, 2.0 * PI)],
            Family::Line => &[(-3.0, 3.0), (-3.0, 3.0)],
            Family::Quadratic => &[(-0.2, 0.2), (-2.0, 2.0), (-3.0, 3.0)],
            Family::Cubic => &[(-0.1, 0.1), (-0.2, 0.2), (-2.0, 2.0), (-3.0, 3.0)],
        }
    }

    pub fn eval(self, p: &[f64], x: f64) -> Result<f64> {
        if p.len() != self.arity() {
            return Err(Error::invalid(format!(
                "{} takes {} parameters, got {}",
                self.name(),
                self.arity(),
                p.len()
            )));
        }
        Ok(self.eval_unchecked(p, x))
    }

    fn eval_unchecked(self, p: &[f64], x: f64) -> f64 {
        match self {
            Family::Sinusoids => p[0] * (p[1] * x + p[2]).sin(),
            Family::Line => p[0] * x + p[1],
            Family::Quadratic => p[0] * x * x + p[1] * x + p[2],
            Family::Cubic => p[0] * x * x * x + p[1] * x * x + p[2] * x + p[3],
        }
    }

    pub fn sample_params<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        self.param_ranges()
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..=hi))
            .collect()
    }
}

/// Evaluate a family formula.
pub fn eval_family(family: Family, p: &[f64], x: f64) -> Result<f64> {
    family.eval(p, x)
}

/// Everything needed to draw one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Relative weights of sinusoids, line, quadratic, cubic.
    pub mix: [f64; 4],
    pub k_shot: usize,
    pub q_query: usize,
    pub noise_sd: f64,
    pub x_range: (f64, f64),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            mix: [1.0; 4],
            k_shot: 10,
            q_query: 100,
            noise_sd: 0.0,
            x_range: (-5.0, 5.0),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("family mix must be nonnegative with a positive total"));
        }
        if self.k_shot == 0 || self.q_query == 0 {
            return Err(Error::config("k_shot and q_query must be positive"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::config("noise_sd must be a nonnegative number"));
        }
        let (lo, hi) = self.x_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("x_range must be a finite interval with lo < hi"));
        }
        Ok(())
    }

    pub fn with_shots(&self, k_shot: usize, q_query: usize) -> Self {
        TaskConfig {
            k_shot,
            q_query,
            ..self.clone()
        }
    }
}

/// One few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Batch,
    pub query: Batch,
    pub family: Family,
    /// Generating parameters; diagnostics only.
    pub true_params: Vec<f64>,
}

/// Draw one episode from `rng`.
pub fn sample_episode<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskConfig) -> Result<Episode> {
    cfg.validate()?;
    let family = Family::ALL[WeightedIndex::new(cfg.mix)
        .map_err(|e| Error::config(format!("family mix: {e}")))?
        .sample(rng)];
    let params = family.sample_params(rng);

    let n = cfg.k_shot + cfg.q_query;
    let (lo, hi) = cfg.x_range;
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    while xs.len() < n {
        let x = rng.random_range(lo..=hi);
        // Exact repeats have probability zero but are cheap to exclude.
        if !xs.contains(&x) {
            xs.push(x);
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::config(format!("noise: {e}")))?;
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let y = family.eval_unchecked(&params, x);
            if cfg.noise_sd > 0.0 {
                y + noise.sample(rng)
            } else {
                y
            }
        })
        .collect();

    let (sx, qx) = xs.split_at(cfg.k_shot);
    let (sy, qy) = ys.split_at(cfg.k_shot);
    Ok(Episode {
        support: Batch::from_scalars(sx, sy)?,
        query: Batch::from_scalars(qx, qy)?,
        family,
        true_params: params,
    })
}

/// `n_tasks` episodes, episode `i` drawn from substream `first_index + i`.
pub fn sample_batch(
    seed: u64,
    namespace: u64,
    first_index: u64,
    n_tasks: usize,
    cfg: &TaskConfig,
) -> Result<Vec<Episode>> {
    (0..n_tasks as u64)
        .map(|i| sample_episode(&mut substream(seed, namespace, first_index + i), cfg))
        .collect()
}

/// Anything that can hand out reproducible task batches.
pub trait TaskSource: Sync {
    /// The batch used at training step `step`.
    fn batch(&self, step: u64, n_tasks: usize) -> Result<Vec<Episode>>;
}

/// Seeded episode stream living in one RNG namespace.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    pub cfg: TaskConfig,
    pub seed: u64,
    pub namespace: u64,
}

impl TaskSampler {
    pub fn new(cfg: TaskConfig, seed: u64, namespace: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(TaskSampler { cfg, seed, namespace })
    }

    /// Episode number `index` of the stream.
    pub fn episode(&self, index: u64) -> Result<Episode> {
        sample_episode(&mut substream(self.seed, self.namespace, index), &self.cfg)
    }

    pub fn episodes(&self, first_index: u64, n_tasks: usize) -> Result<Vec<Episode>> {
        sample_batch(self.seed, self.namespace, first_index, n_tasks, &self.cfg)
    }
}

impl TaskSource for TaskSampler {
    fn batch(&self, step: u64, n_tasks: usize) -> Result<Vec<Episode>> {
        self.episodes(step * n_tasks as u64, n_tasks)
    }
}
