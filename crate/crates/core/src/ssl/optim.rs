use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Params};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Linear warmup from 0 to `peak` over the first `warmup_fraction` of
/// `total_steps`, then linear decay to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps as f64;
        let step = (step as f64).min(total);
        let warm = self.warmup_fraction * total;
        if step < warm {
            self.peak * step / warm
        } else if total > warm {
            self.peak * (total - step) / (total - warm)
        } else {
            0.0
        }
    }
}

/// Adam hyper-parameters and step count shared by pretraining and
/// fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_peak_lr() -> f64 {
    5e-4
}

fn default_warmup() -> f64 {
    0.08
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.98]
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            peak_lr: default_peak_lr(),
            warmup_fraction: default_warmup(),
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| (0.0..1.0).contains(&b);
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr {} must be finite and >= 0", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if !ok_beta(self.betas[0]) || !ok_beta(self.betas[1]) {
            return Err(Error::config(format!("Adam betas {:?} must lie in [0, 1)", self.betas)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam without weight decay; moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    beta1: S,
    beta2: S,
    eps: S,
    t: i32,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: S::lit(cfg.betas[0]),
            beta2: S::lit(cfg.betas[1]),
            eps: S::lit(cfg.eps),
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut Params<S>, grads: &BTreeMap<String, Tensor<S>>, lr: S) -> Result<()> {
        self.t += 1;
        let bc1 = S::one() - self.beta1.powi(self.t);
        let bc2 = S::one() - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Runs `f` for every batch item on its own tape (in parallel), then sums
/// the per-item gradients of the trainable parameters in item order.
///
/// `f` returns the item's scalar loss node and a per-item record.
pub fn batch_gradients<S, I, R, F>(
    params: &Params<S>,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    items: &[I],
    f: F,
) -> Result<(Vec<(S, R)>, BTreeMap<String, Tensor<S>>)>
where
    S: Scalar,
    I: Sync,
    R: Send,
    F: Fn(&mut Tape<S>, &Bound, usize, &I) -> Result<(Var, R)> + Sync,
{
    let per_item: Vec<Result<(S, R, Vec<(String, Tensor<S>)>)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, trainable);
            let (loss, rec) = f(&mut tape, &bound, i, item)?;
            let value = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let named = bound
                .iter()
                .filter(|(name, _)| trainable(name))
                .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
                .collect();
            Ok((value, rec, named))
        })
        .collect();
    let mut records = Vec::with_capacity(items.len());
    let mut total: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for r in per_item {
        let (value, rec, named) = r?;
        records.push((value, rec));
        for (name, g) in named {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    Ok((records, total))
}
