use std::sync::Arc;

use super::config::{ModelConfig, Window};
use super::params::Bound;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::scalar::Scalar;

/// Allowed key positions per layer for the two restricted heads.
///
/// Heads `H-2` (history) and `H-1` (future) of a layer carry a `T x T`
/// row-major mask; all other heads are global and carry none.
#[derive(Debug, Clone)]
pub struct AttentionMaskPlan {
    t: usize,
    num_heads: usize,
    layers: Vec<Option<[Arc<[bool]>; 2]>>,
}

impl AttentionMaskPlan {
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Mask of `head` in layer `layer` (1-based); `None` for a global head.
    pub fn head_mask(&self, layer: usize, head: usize) -> Option<&Arc<[bool]>> {
        let masks = self.layers.get(layer - 1)?.as_ref()?;
        match self.num_heads.checked_sub(head + 1)? {
            1 => Some(&masks[0]),
            0 => Some(&masks[1]),
            _ => None,
        }
    }

    pub fn allowed(&self, layer: usize, head: usize, row: usize, col: usize) -> bool {
        self.head_mask(layer, head).is_none_or(|m| m[row * self.t + col])
    }
}

/// `T x T` mask of a history (`[j-w, j]`) or future (`[j, j+w]`) window.
pub fn window_mask(t: usize, w: Window, history: bool) -> Arc<[bool]> {
    let mut m = vec![false; t * t];
    for j in 0..t {
        let (lo, hi) = match (w, history) {
            (Window::Unbounded, _) => (0, t - 1),
            (Window::Frames(w), true) => (j.saturating_sub(w), j),
            (Window::Frames(w), false) => (j, (j + w).min(t - 1)),
        };
        m[j * t + lo..=j * t + hi].fill(true);
    }
    m.into()
}

pub fn build_attention_masks(t: usize, cfg: &ModelConfig) -> Result<AttentionMaskPlan> {
    if t == 0 {
        return Err(Error::invalid("attention plan needs T >= 1"));
    }
    let layers = (1..=cfg.num_layers)
        .map(|l| cfg.window(l).map(|w| [window_mask(t, w, true), window_mask(t, w, false)]))
        .collect();
    Ok(AttentionMaskPlan {
        t,
        num_heads: cfg.num_heads,
        layers,
    })
}

/// Per-layer hidden states of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    /// Encoder input (corrupted frames plus positions).
    pub input: Var,
    /// `layers[l - 1]` is `O^l`.
    pub layers: Vec<Var>,
}

impl EncoderOutputs {
    pub fn layer(&self, l: usize) -> Result<Var> {
        if l == 0 {
            return Ok(self.input);
        }
        self.layers
            .get(l - 1)
            .copied()
            .ok_or_else(|| Error::invalid(format!("layer {l} out of range 1..={}", self.layers.len())))
    }

    pub fn top(&self) -> Var {
        self.layers.last().copied().unwrap_or(self.input)
    }
}

/// Stacked strided convolutions followed by a feature layer norm,
/// `[N, 1]` to `[T, C_last]`.
pub fn conv_features<S: Scalar>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, wave: Var) -> Result<Var> {
    let n = tape.shape(wave)[0];
    if cfg.num_frames(n) == 0 {
        return Err(Error::invalid(format!(
            "waveform of {n} samples is too short: the encoder needs at least {} samples",
            cfg.min_samples()
        )));
    }
    let mut x = wave;
    for i in 0..cfg.conv_spec.len() {
        let w = p.var(&format!("conv.{i}.weight"))?;
        let b = p.var(&format!("conv.{i}.bias"))?;
        let y = tape.conv1d(x, w, b, cfg.conv_spec[i].stride)?;
        x = tape.activation(y, cfg.activation)?;
    }
    tape.layer_norm(x, p.var("feat_ln.gamma")?, p.var("feat_ln.beta")?, S::lit(LAYER_NORM_EPS))
}

fn project<S: Scalar>(tape: &mut Tape<S>, p: &Bound, feats: Var) -> Result<Var> {
    let y = tape.matmul(feats, p.var("proj.weight")?)?;
    tape.add_row(y, p.var("proj.bias")?)
}

/// Conv features projected to `D`. `wave` is `[N, 1]`.
pub fn conv_encode<S: Scalar>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, wave: Var) -> Result<Var> {
    let feats = conv_features(tape, p, cfg, wave)?;
    project(tape, p, feats)
}

/// Replaces masked frames by the learned mask embedding.
pub fn apply_mask<S: Scalar>(tape: &mut Tape<S>, p: &Bound, frames: Var, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Ok(frames);
    }
    tape.replace_rows(frames, p.var("mask_emb")?, masked)
}

/// Fixed sinusoidal positional encoding, `[t, d]`.
pub fn sinusoidal_positions<S: Scalar>(t: usize, d: usize) -> Tensor<S> {
    let mut out = Tensor::zeros([t, d]);
    for pos in 0..t {
        let row = out.row_mut(pos);
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            row[i] = S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Output of every head of layer `l` on already-normalised input `h`,
/// each `[T, D/H]`, before concatenation and `W^o`.
pub fn attention_heads<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    l: usize,
    h: Var,
    plan: &AttentionMaskPlan,
) -> Result<Vec<Var>> {
    let t = tape.shape(h)[0];
    if t != plan.len() {
        return Err(Error::Shape {
            op: "multi_scale_attention",
            lhs: tape.shape(h).to_vec(),
            rhs: vec![plan.len(), plan.len()],
        });
    }
    let dh = cfg.head_dim();
    let q = tape.matmul(h, p.var(&format!("layers.{l}.attn.wq"))?)?;
    let k = tape.matmul(h, p.var(&format!("layers.{l}.attn.wk"))?)?;
    let v = tape.matmul(h, p.var(&format!("layers.{l}.attn.wv"))?)?;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let qi = tape.slice_cols(q, i * dh, dh)?;
        let ki = tape.slice_cols(k, i * dh, dh)?;
        let vi = tape.slice_cols(v, i * dh, dh)?;
        let kt = tape.transpose(ki)?;
        let raw = tape.matmul(qi, kt)?;
        let scores = tape.scale(raw, scale)?;
        let probs = match plan.head_mask(l, i) {
            Some(m) => tape.masked_softmax(scores, m.clone())?,
            None => tape.softmax(scores)?,
        };
        heads.push(tape.matmul(probs, vi)?);
    }
    Ok(heads)
}

/// Multi-head self-attention of layer `l` with window-restricted heads.
pub fn multi_scale_attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    l: usize,
    h: Var,
    plan: &AttentionMaskPlan,
) -> Result<Var> {
    let heads = attention_heads(tape, p, cfg, l, h, plan)?;
    let cat = tape.concat(&heads)?;
    tape.matmul(cat, p.var(&format!("layers.{l}.attn.wo"))?)
}

/// Pre-norm transformer block `l`.
pub fn encoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
    plan: &AttentionMaskPlan,
) -> Result<Var> {
    let name = |s: &str| format!("layers.{l}.{s}");
    let eps = S::lit(LAYER_NORM_EPS);
    let h = tape.layer_norm(x, p.var(&name("ln1.gamma"))?, p.var(&name("ln1.beta"))?, eps)?;
    let a = multi_scale_attention(tape, p, cfg, l, h, plan)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, p.var(&name("ln2.gamma"))?, p.var(&name("ln2.beta"))?, eps)?;
    let f = tape.matmul(h, p.var(&name("ffn.w1"))?)?;
    let f = tape.add_row(f, p.var(&name("ffn.b1"))?)?;
    let f = tape.activation(f, cfg.activation)?;
    let f = tape.matmul(f, p.var(&name("ffn.w2"))?)?;
    let f = tape.add_row(f, p.var(&name("ffn.b2"))?)?;
    tape.add(x, f)
}

/// Runs all `L` blocks over `x` (`[T, D]`), keeping every layer output.
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    plan: &AttentionMaskPlan,
) -> Result<EncoderOutputs> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::Shape {
            op: "encoder_forward",
            lhs: shape.to_vec(),
            rhs: vec![plan.len(), cfg.model_dim],
        });
    }
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut h = x;
    for l in 1..=cfg.num_layers {
        h = encoder_block(tape, p, cfg, l, h, plan)?;
        layers.push(h);
    }
    Ok(EncoderOutputs { input: x, layers })
}

/// Waveform to per-layer outputs: conv encoder, masking of `masked`
/// frames, positions, transformer.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    wave: &[S],
    masked: &[usize],
) -> Result<EncoderOutputs> {
    let w = tape.constant(Tensor::new([wave.len(), 1], wave.to_vec())?);
    let feats = conv_features(tape, p, cfg, w)?;
    forward_from_features(tape, p, cfg, feats, masked)
}

/// [`forward`] starting from the output of [`conv_features`].
pub fn forward_from_features<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    feats: Var,
    masked: &[usize],
) -> Result<EncoderOutputs> {
    let frames = project(tape, p, feats)?;
    let x = apply_mask(tape, p, frames, masked)?;
    let t = tape.shape(x)[0];
    let pos = tape.constant(sinusoidal_positions(t, cfg.model_dim));
    let x = tape.add(x, pos)?;
    let plan = build_attention_masks(t, cfg)?;
    encoder_forward(tape, p, cfg, x, &plan)
}
