//! Gradient task embeddings and spherical (cosine) K-means.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{self, Order, ParamVector};
use crate::error::{Error, Result};
use crate::maml::InnerCfg;
use crate::rng::{namespace, substream};
use crate::tasks::Episode;

/// Tolerance for accepting a vector as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Meta-gradient of the query loss after adapting on the support set.
    QueryGrad,
    /// Plain support-loss gradient; needs no query labels.
    SupportGrad,
    /// Meta-gradient with the support set used for both adaptation and loss;
    /// needs no query labels.
    SupportMetaGrad,
}

/// Unit-norm gradient direction representing one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEmbedding {
    u: Vec<f64>,
    source: EmbeddingSource,
}

impl GradientEmbedding {
    /// Normalize a raw gradient.
    pub fn from_gradient(g: &[f64], source: EmbeddingSource) -> Result<Self> {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericOverflow {
                stage: "task embedding",
                step: 0,
            });
        }
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(GradientEmbedding {
            u: g.iter().map(|v| v / norm).collect(),
            source,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }
}

impl AsRef<[f64]> for GradientEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.u
    }
}

/// Embed a task by its gradient at `theta_clu`.
pub fn task_embedding(
    theta_clu: &ParamVector,
    episode: &Episode,
    inner: &InnerCfg,
    order: Order,
    source: EmbeddingSource,
) -> Result<GradientEmbedding> {
    let g = match source {
        EmbeddingSource::QueryGrad => {
            inner.validate()?;
            diffnet::meta_grad(theta_clu, &episode.support, &episode.query, inner.steps, inner.lr, order)?
        }
        EmbeddingSource::SupportGrad => diffnet::grad(theta_clu, &episode.support)?,
        EmbeddingSource::SupportMetaGrad => {
            inner.validate()?;
            diffnet::meta_grad(theta_clu, &episode.support, &episode.support, inner.steps, inner.lr, order)?
        }
    };
    GradientEmbedding::from_gradient(g.values(), source)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("{what} has norm {n}, expected a unit vector")));
    }
    Ok(())
}

/// `1 - a·b` for unit vectors; lies in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    check_unit(a, "first vector")?;
    check_unit(b, "second vector")?;
    Ok((1.0 - dot(a, b)).clamp(0.0, 2.0))
}

/// Fitted cluster centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    centers: Vec<Vec<f64>>,
    /// Sum of cosine distances of the fitted points to their centers.
    pub inertia: f64,
    pub seed: u64,
    pub iters_run: usize,
}

impl ClusterModel {
    pub fn new(centers: Vec<Vec<f64>>, inertia: f64, seed: u64, iters_run: usize) -> Result<Self> {
        let Some(first) = centers.first() else {
            return Err(Error::invalid("a cluster model needs at least one center"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid("centers must be nonempty vectors"));
        }
        for (i, c) in centers.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::invalid(format!("center {i} has dimension {}, expected {dim}", c.len())));
            }
            check_unit(c, &format!("center {i}"))?;
        }
        Ok(ClusterModel {
            centers,
            inertia,
            seed,
            iters_run,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Same model with centers reordered: new center `i` is old center `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.k())?;
        Ok(ClusterModel {
            centers: perm.iter().map(|&p| self.centers[p].clone()).collect(),
            ..self.clone()
        })
    }
}

pub(crate) fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if perm.len() != k || !perm.iter().all(|&p| p < k && !std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{k}")));
    }
    Ok(())
}

/// Cosine similarity of `u` to every center.
pub fn similarity(u: &GradientEmbedding, model: &ClusterModel) -> Result<Vec<f64>> {
    similarity_raw(u.as_slice(), model)
}

pub(crate) fn similarity_raw(u: &[f64], model: &ClusterModel) -> Result<Vec<f64>> {
    if u.len() != model.dim() {
        return Err(Error::invalid(format!(
            "embedding has dimension {}, centers have {}",
            u.len(),
            model.dim()
        )));
    }
    Ok(model.centers.iter().map(|c| dot(u, c)).collect())
}

/// Index of the most similar center; the lowest index wins ties.
pub fn assign(u: &GradientEmbedding, model: &ClusterModel) -> Result<usize> {
    Ok(argmax(&similarity(u, model)?))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Result of a K-means fit.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Objective after each iteration.
    pub objective_trace: Vec<f64>,
}

/// Lloyd iterations under cosine distance with k-means++ seeding.
///
/// Each center is the normalized mean of its members. An empty cluster takes
/// over the point farthest from its own center (among clusters with at least
/// two members).
pub fn kmeans_cosine<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!("K = {k} exceeds the number of points ({})", points.len())));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    let dim = points[0].as_ref().len();
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::invalid(format!("point {i} has dimension {}, expected {dim}", p.len())));
        }
        check_unit(p, &format!("point {i}"))?;
    }

    let pts: Vec<&[f64]> = points.iter().map(AsRef::as_ref).collect();
    let mut rng = substream(seed, namespace::KMEANS, 0);
    let mut centers = seed_centers(&pts, k, &mut rng);
    let mut assignments = vec![usize::MAX; pts.len()];
    let mut trace = Vec::new();

    for _ in 0..max_iter {
        let mut next: Vec<usize> = pts
            .iter()
            .map(|p| argmax(&centers.iter().map(|c| dot(p, c)).collect::<Vec<_>>()))
            .collect();
        repair_empty(&pts, &mut centers, &mut next);
        let stable = next == assignments;
        assignments = next;
        update_centers(&pts, &mut centers, &assignments);
        trace.push(objective(&pts, &centers, &assignments));
        if stable {
            break;
        }
    }

    let inertia = *trace.last().unwrap();
    Ok(KMeansFit {
        model: ClusterModel {
            centers,
            inertia,
            seed,
            iters_run: trace.len(),
        },
        assignments,
        objective_trace: trace,
    })
}

fn seed_centers<R: Rng>(pts: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..pts.len())];
    let mut nearest: Vec<f64> = pts.iter().map(|p| 1.0 - dot(p, pts[chosen[0]])).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = nearest.iter().map(|d| d.max(0.0).powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = 0;
            for (i, &w) in weights.iter().enumerate().filter(|(_, w)| **w > 0.0) {
                pick = i;
                if target < w {
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // Every point coincides with a chosen center.
            let free: Vec<usize> = (0..pts.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        for (d, p) in nearest.iter_mut().zip(pts) {
            *d = d.min(1.0 - dot(p, pts[pick]));
        }
    }
    chosen.iter().map(|&i| pts[i].to_vec()).collect()
}

fn repair_empty(pts: &[&[f64]], centers: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = 1.0 - dot(p, &centers[a]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { continue };
        counts[assignments[i]] -= 1;
        counts[empty] = 1;
        assignments[i] = empty;
        centers[empty] = pts[i].to_vec();
    }
}

fn update_centers(pts: &[&[f64]], centers: &mut [Vec<f64>], assignments: &[usize]) {
    let dim = centers[0].len();
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    for (p, &a) in pts.iter().zip(assignments) {
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (center, sum) in centers.iter_mut().zip(sums) {
        let norm = dot(&sum, &sum).sqrt();
        // An all-cancelling cluster keeps its previous center.
        if norm > 0.0 {
            *center = sum.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn objective(pts: &[&[f64]], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    pts.iter()
        .zip(assignments)
        .map(|(p, &a)| 1.0 - dot(p, &centers[a]))
        .sum()
}
