use std::fmt;

use serde::{Deserialize, Serialize};

use super::loss::{supervised_losses, total_loss};
use super::mask::{sample_mask, MaskConfig};
use super::optim::{batch_gradients, Adam, OptimConfig};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, Params};
use crate::scalar::Scalar;

/// Pretraining hyper-parameters of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    #[serde(default)]
    pub mask: MaskConfig,
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.optim.validate()
    }
}

/// One waveform with its frame targets, `targets[i]` belonging to the
/// `i`-th supervised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainUtterance<S> {
    pub id: String,
    pub wave: Vec<S>,
    pub targets: Vec<Vec<u32>>,
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed from a base seed and a list of parts.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ p))
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Mask seed of utterance `id` at `step`.
pub fn mask_seed(seed: u64, step: usize, id: &str) -> u64 {
    derive_seed(seed, &[step as u64, id_hash(id)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub layer: usize,
    pub loss: f64,
    pub correct: usize,
    pub masked: usize,
}

impl LayerMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.masked == 0 {
            0.0
        } else {
            self.correct as f64 / self.masked as f64
        }
    }
}

/// Metrics record of one pretraining step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    /// Summed loss over the batch and all supervised layers.
    pub loss: f64,
    /// Masked frames in the batch (counted once, shared by all layers).
    pub masked: usize,
    pub layers: Vec<LayerMetrics>,
}

impl StepMetrics {
    /// Total loss per masked frame; comparable across steps with
    /// different mask sizes.
    pub fn loss_per_frame(&self) -> f64 {
        if self.masked == 0 {
            0.0
        } else {
            self.loss / self.masked as f64
        }
    }
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} loss={:.6} loss_per_frame={:.6} masked={}",
            self.step,
            self.lr,
            self.loss,
            self.loss_per_frame(),
            self.masked
        )?;
        for l in &self.layers {
            write!(f, " loss.{0}={1:.6} acc.{0}={2:.4}", l.layer, l.loss, l.accuracy())?;
        }
        Ok(())
    }
}

/// Forward, summed masked-prediction loss, backward and one Adam update
/// over `batch`. Every parameter is trainable.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<S: Scalar>(
    params: &mut Params<S>,
    adam: &mut Adam<S>,
    model: &ModelConfig,
    cfg: &SslConfig,
    batch: &[&TrainUtterance<S>],
    step: usize,
    batch_id: usize,
) -> Result<StepMetrics> {
    let k = model.supervised_layers.len();
    let (records, grads) = batch_gradients(params, &|_| true, batch, |tape, p, _, utt| {
        if utt.targets.len() != k {
            return Err(Error::invalid(format!(
                "utterance `{}` has {} target sets for {k} supervised layers",
                utt.id,
                utt.targets.len()
            )));
        }
        let t = model.num_frames(utt.wave.len());
        if t == 0 {
            return Err(Error::invalid(format!(
                "utterance `{}` is shorter than {} samples",
                utt.id,
                model.min_samples()
            )));
        }
        let mask = sample_mask(t, &cfg.mask, mask_seed(cfg.seed, step, &utt.id))?;
        let out = forward(tape, p, model, &utt.wave, &mask.indices)?;
        let targets: Vec<&[u32]> = utt.targets.iter().map(Vec::as_slice).collect();
        let losses = supervised_losses(tape, p, model, &out, &targets, &mask)?;
        let total = total_loss(tape, &losses)?;
        let per_layer: Vec<(f64, usize)> = losses
            .iter()
            .map(|l| (tape.value(l.loss).item().as_f64(), l.correct))
            .collect();
        Ok((total, (per_layer, mask.indices.len())))
    })?;

    let lr = cfg.optim.schedule().lr_at(step);
    let mut metrics = StepMetrics {
        step,
        lr,
        loss: 0.0,
        masked: 0,
        layers: model
            .supervised_layers
            .iter()
            .map(|&layer| LayerMetrics {
                layer,
                loss: 0.0,
                correct: 0,
                masked: 0,
            })
            .collect(),
    };
    for (total, (per_layer, masked)) in &records {
        metrics.loss += total.as_f64();
        metrics.masked += masked;
        for (m, &(loss, correct)) in metrics.layers.iter_mut().zip(per_layer) {
            m.loss += loss;
            m.correct += correct;
            m.masked += masked;
        }
    }
    if !metrics.loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "pretraining loss".into(),
            context: Some(format!("batch {batch_id}, step {step}")),
        });
    }
    adam.step(params, &grads, S::lit(lr))?;
    Ok(metrics)
}
