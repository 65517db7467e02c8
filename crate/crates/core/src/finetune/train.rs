use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctc::min_frames;
use crate::error::{Error, Result};
use crate::model::{conv_features, forward, forward_from_features, Bound, ModelConfig, Params};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::ssl::{batch_gradients, Adam, OptimConfig};

/// Which parameter groups stay fixed during fine-tuning. The CTC head is
/// always trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePolicy {
    pub freeze_waveform_encoder: bool,
    pub freeze_transformer: bool,
    pub train_head_only: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            freeze_waveform_encoder: true,
            freeze_transformer: false,
            train_head_only: false,
        }
    }
}

impl FreezePolicy {
    pub fn head_only() -> Self {
        Self {
            train_head_only: true,
            ..Self::default()
        }
    }

    pub fn trainable(&self, name: &str) -> bool {
        if name.starts_with("ctc.") {
            return true;
        }
        if self.train_head_only || name.starts_with("head.") || name == "mask_emb" {
            return false;
        }
        if name.starts_with("conv.") || name.starts_with("feat_ln.") {
            return !self.freeze_waveform_encoder;
        }
        !self.freeze_transformer
    }
}

/// Replaces the codebook heads by a fresh `D -> V+1` CTC output layer.
pub fn attach_ctc_head<S: Scalar>(params: &mut Params<S>, model_dim: usize, vocab_len: usize, seed: u64) {
    params.drop_codebook_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = vocab_len + 1;
    let bound = (6.0 / (model_dim + out) as f64).sqrt();
    let w = (0..model_dim * out).map(|_| S::lit(rng.gen_range(-bound..bound))).collect();
    params.insert("ctc.weight", Tensor::new([model_dim, out], w).expect("positive shape"));
    params.insert("ctc.bias", Tensor::zeros([out]));
}

/// A transcribed waveform; `labels` are vocabulary ids (1-based).
///
/// `conv_cache` holds the conv encoder output when the waveform encoder is
/// frozen, so fine-tuning steps start from it instead of the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance<S> {
    pub id: String,
    pub wave: Vec<S>,
    pub text: String,
    pub labels: Vec<usize>,
    pub conv_cache: Option<Tensor<S>>,
}

/// Conv encoder output `[T, C_last]` of `wave`.
pub fn conv_output<S: Scalar>(params: &Params<S>, model: &ModelConfig, wave: &[S]) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let w = tape.constant(Tensor::new([wave.len(), 1], wave.to_vec())?);
    let y = conv_features(&mut tape, &p, model, w)?;
    Ok(tape.value(y).clone())
}

/// Per-frame CTC logits `[T, V+1]` on the tape.
pub fn ctc_logits_on<S: Scalar>(tape: &mut Tape<S>, p: &Bound, model: &ModelConfig, wave: &[S]) -> Result<Var> {
    let out = forward(tape, p, model, wave, &[])?;
    ctc_output(tape, p, out.top())
}

fn ctc_output<S: Scalar>(tape: &mut Tape<S>, p: &Bound, top: Var) -> Result<Var> {
    let y = tape.matmul(top, p.var("ctc.weight")?)?;
    tape.add_row(y, p.var("ctc.bias")?)
}

fn utterance_logits<S: Scalar>(tape: &mut Tape<S>, p: &Bound, model: &ModelConfig, utt: &LabeledUtterance<S>) -> Result<Var> {
    match &utt.conv_cache {
        Some(feats) => {
            let f = tape.constant(feats.clone());
            let out = forward_from_features(tape, p, model, f, &[])?;
            ctc_output(tape, p, out.top())
        }
        None => ctc_logits_on(tape, p, model, &utt.wave),
    }
}

/// Per-frame CTC logits of an unmasked forward pass.
pub fn ctc_logits<S: Scalar>(params: &Params<S>, model: &ModelConfig, wave: &[S]) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let y = ctc_logits_on(&mut tape, &p, model, wave)?;
    Ok(tape.value(y).clone())
}

/// [`ctc_logits`] of a labeled utterance, using its conv cache when set.
pub fn utterance_ctc_logits<S: Scalar>(
    params: &Params<S>,
    model: &ModelConfig,
    utt: &LabeledUtterance<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let y = utterance_logits(&mut tape, &p, model, utt)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub frames: usize,
}

impl fmt::Display for FinetuneMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} ctc_loss={:.6} loss_per_frame={:.6}",
            self.step,
            self.lr,
            self.loss,
            self.loss / self.frames.max(1) as f64
        )
    }
}

/// CTC loss over `batch`, backward, and an Adam update of the parameters
/// `policy` leaves trainable. Frozen parameters are bound as constants and
/// never touched.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<S: Scalar>(
    params: &mut Params<S>,
    adam: &mut Adam<S>,
    model: &ModelConfig,
    optim: &OptimConfig,
    policy: &FreezePolicy,
    batch: &[&LabeledUtterance<S>],
    step: usize,
    batch_id: usize,
) -> Result<FinetuneMetrics> {
    let trainable = |n: &str| policy.trainable(n);
    let (records, grads) = batch_gradients(params, &trainable, batch, |tape, p, _, utt| {
        let t = model.num_frames(utt.wave.len());
        let need = min_frames(&utt.labels);
        if t < need.max(1) {
            return Err(Error::invalid(format!(
                "utterance `{}` yields {t} frames but its transcript needs at least T = {need}",
                utt.id
            )));
        }
        if utt.conv_cache.is_some() && !policy.freeze_waveform_encoder && !policy.train_head_only {
            return Err(Error::invalid("conv cache given while the waveform encoder is trainable"));
        }
        let logits = utterance_logits(tape, p, model, utt)?;
        let loss = tape.ctc_loss(logits, &utt.labels)?;
        Ok((loss, t))
    })?;
    let loss: f64 = records.iter().map(|(l, _)| l.as_f64()).sum();
    let frames = records.iter().map(|(_, t)| t).sum();
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "CTC loss".into(),
            context: Some(format!("batch {batch_id}, step {step}")),
        });
    }
    let lr = optim.schedule().lr_at(step);
    adam.step(params, &grads, S::lit(lr))?;
    Ok(FinetuneMetrics { step, lr, loss, frames })
}
