//! MAML: inner-loop adaptation, outer-loop meta-updates, and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::{self, Batch, MetaGrad, Order, ParamVector};
use crate::error::{Error, Result};
use crate::tasks::{Episode, TaskSource};

/// Per-task adaptation: `steps` gradient-descent steps of size `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerCfg {
    pub steps: usize,
    pub lr: f64,
}

impl Default for InnerCfg {
    fn default() -> Self {
        InnerCfg { steps: 5, lr: 0.001 }
    }
}

impl InnerCfg {
    pub const MAX_STEPS: usize = 100;

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > Self::MAX_STEPS {
            return Err(Error::config(format!(
                "inner steps must be in [1, {}], got {}",
                Self::MAX_STEPS,
                self.steps
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("inner lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterCfg {
    pub lr: f64,
    pub batch_size: usize,
    /// Number of outer steps, one sampled task batch each.
    pub epochs: usize,
    pub order: Order,
    /// Divide the summed task meta-gradients by the batch size.
    pub average: bool,
    /// Heavy-ball coefficient for the outer update; 0 is plain descent.
    pub momentum: f64,
}

impl Default for OuterCfg {
    fn default() -> Self {
        OuterCfg {
            lr: 0.001,
            batch_size: 32,
            epochs: 15_000,
            order: Order::Second,
            average: false,
            momentum: 0.0,
        }
    }
}

impl OuterCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("outer lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("outer batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub(crate) fn reduction_scale(&self, n_tasks: usize) -> f64 {
        if self.average {
            1.0 / n_tasks as f64
        } else {
            1.0
        }
    }
}

/// Gradient descent on the support loss. The query set is never touched.
pub fn inner_adapt(params: &ParamVector, support: &Batch, cfg: &InnerCfg) -> Result<ParamVector> {
    cfg.validate()?;
    let mut adapted = params.clone();
    for step in 0..cfg.steps {
        let g = diffnet::grad(&adapted, support)?;
        adapted.axpy(-cfg.lr, &g);
        if !adapted.is_finite() {
            return Err(Error::NumericOverflow {
                stage: "inner_adapt",
                step,
            });
        }
    }
    Ok(adapted)
}

/// Meta-gradients of every task, in task order.
pub fn task_meta_grads(
    params: &ParamVector,
    tasks: &[Episode],
    inner: &InnerCfg,
    order: Order,
) -> Result<Vec<MetaGrad>> {
    inner.validate()?;
    tasks
        .par_iter()
        .map(|t| diffnet::meta_loss_and_grad(params, &t.support, &t.query, inner.steps, inner.lr, order))
        .collect()
}

/// One outer update; also returns the mean post-adaptation query loss.
pub fn outer_step_with_loss(
    params: &ParamVector,
    tasks: &[Episode],
    inner: &InnerCfg,
    outer: &OuterCfg,
) -> Result<(ParamVector, f64)> {
    let (direction, loss) = outer_direction(params, tasks, inner, outer)?;
    let mut next = params.clone();
    next.axpy(-outer.lr, &direction);
    if !next.is_finite() {
        return Err(Error::NumericOverflow {
            stage: "outer_step",
            step: 0,
        });
    }
    Ok((next, loss))
}

/// `params - lr · Σ_i meta_grad_i`.
pub fn outer_step(params: &ParamVector, tasks: &[Episode], inner: &InnerCfg, outer: &OuterCfg) -> Result<ParamVector> {
    outer_step_with_loss(params, tasks, inner, outer).map(|(p, _)| p)
}

/// Summed (or averaged) meta-gradient of a batch, reduced in task order.
fn outer_direction(
    params: &ParamVector,
    tasks: &[Episode],
    inner: &InnerCfg,
    outer: &OuterCfg,
) -> Result<(ParamVector, f64)> {
    if tasks.is_empty() {
        return Err(Error::invalid("outer step needs at least one task"));
    }
    outer.validate()?;
    let grads = task_meta_grads(params, tasks, inner, outer.order)?;
    let mut total = ParamVector::zeros(params.spec());
    let mut loss = 0.0;
    for m in &grads {
        total.axpy(1.0, &m.grad);
        loss += m.query_loss;
    }
    let scale = outer.reduction_scale(tasks.len());
    if scale != 1.0 {
        total.values_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total, loss / tasks.len() as f64))
}

/// Parameters after meta-training plus the per-step mean query loss.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParamVector,
    pub loss_history: Vec<f64>,
}

/// Run `outer.epochs` outer steps from `init`, step `s` using `source.batch(s)`.
pub fn pretrain(init: ParamVector, source: &dyn TaskSource, inner: &InnerCfg, outer: &OuterCfg) -> Result<Pretrained> {
    pretrain_with(init, source, inner, outer, |_, _| {})
}

/// [`pretrain`] with a per-step callback receiving `(step, mean_query_loss)`.
pub fn pretrain_with(
    init: ParamVector,
    source: &dyn TaskSource,
    inner: &InnerCfg,
    outer: &OuterCfg,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Pretrained> {
    inner.validate()?;
    outer.validate()?;
    let mut params = init;
    let mut velocity = ParamVector::zeros(params.spec());
    let mut loss_history = Vec::with_capacity(outer.epochs);
    for step in 0..outer.epochs {
        let tasks = source.batch(step as u64, outer.batch_size)?;
        let (direction, loss) = outer_direction(&params, &tasks, inner, outer).map_err(|e| match e {
            Error::NumericOverflow { stage, .. } => Error::NumericOverflow { stage, step },
            other => other,
        })?;
        if outer.momentum > 0.0 {
            velocity.values_mut().iter_mut().for_each(|v| *v *= outer.momentum);
            velocity.axpy(1.0, &direction);
            params.axpy(-outer.lr, &velocity);
        } else {
            params.axpy(-outer.lr, &direction);
        }
        if !params.is_finite() {
            return Err(Error::NumericOverflow { stage: "pretrain", step });
        }
        loss_history.push(loss);
        on_step(step, loss);
    }
    Ok(Pretrained { params, loss_history })
}

/// Adapt on the support set and report the query MSE.
pub fn adapt_and_eval(params: &ParamVector, episode: &Episode, cfg: &InnerCfg) -> Result<f64> {
    let adapted = inner_adapt(params, &episode.support, cfg)?;
    diffnet::mse_loss(&adapted, &episode.query)
}
