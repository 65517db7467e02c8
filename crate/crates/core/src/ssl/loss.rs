use super::mask::MaskSpec;
use crate::error::{Error, Result};
use crate::model::{head_logits, Bound, EncoderOutputs, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Masked-prediction loss of one supervised layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerLoss {
    pub layer: usize,
    /// Scalar node `-sum_{t in M} log p(target_t)`.
    pub loss: Var,
    /// Masked frames whose most likely codeword is the target.
    pub correct: usize,
    pub masked: usize,
}

/// Negative log-likelihood of the targets of layer `l` over the masked
/// frames only. An empty mask gives a constant 0.
pub fn layer_loss<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    l: usize,
    o: Var,
    targets: &[u32],
    mask: &MaskSpec,
) -> Result<LayerLoss> {
    let t = tape.shape(o)[0];
    if targets.len() != t {
        return Err(Error::invalid(format!(
            "layer {l}: {} targets for {t} frames",
            targets.len()
        )));
    }
    let c = cfg
        .codebook_size(l)
        .ok_or_else(|| Error::invalid(format!("layer {l} is not a supervised layer")))?;
    if let Some((i, &bad)) = targets.iter().enumerate().find(|(_, &x)| x as usize >= c) {
        return Err(Error::invalid(format!(
            "layer {l}: target {bad} at frame {i} outside codebook of size {c}"
        )));
    }
    if mask.len != t {
        return Err(Error::invalid(format!("mask built for {} frames, sequence has {t}", mask.len)));
    }
    if mask.is_empty() {
        return Ok(LayerLoss {
            layer: l,
            loss: tape.constant(Tensor::scalar(S::zero())),
            correct: 0,
            masked: 0,
        });
    }
    let rows = tape.gather_rows(o, &mask.indices)?;
    let logits = head_logits(tape, p, cfg, l, rows)?;
    let correct = {
        let lv = tape.value(logits);
        mask.indices
            .iter()
            .enumerate()
            .filter(|&(i, &ti)| argmax(lv.row(i)) == targets[ti] as usize)
            .count()
    };
    let logp = tape.log_softmax(logits)?;
    let picks: Vec<(usize, usize)> = mask
        .indices
        .iter()
        .enumerate()
        .map(|(i, &ti)| (i, targets[ti] as usize))
        .collect();
    let chosen = tape.pick(logp, &picks)?;
    let s = tape.sum(chosen)?;
    let loss = tape.scale(s, -S::one())?;
    Ok(LayerLoss {
        layer: l,
        loss,
        correct,
        masked: mask.indices.len(),
    })
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Unweighted sum of per-layer losses.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, losses: &[LayerLoss]) -> Result<Var> {
    let (first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::invalid("total loss over an empty layer set"))?;
    rest.iter().try_fold(first.loss, |acc, l| tape.add(acc, l.loss))
}

/// Layer losses for every supervised layer of `cfg`, given that layer's
/// targets (`targets[i]` belongs to `cfg.supervised_layers[i]`).
pub fn supervised_losses<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    out: &EncoderOutputs,
    targets: &[&[u32]],
    mask: &MaskSpec,
) -> Result<Vec<LayerLoss>> {
    if targets.len() != cfg.supervised_layers.len() {
        return Err(Error::invalid(format!(
            "{} target sequences for {} supervised layers",
            targets.len(),
            cfg.supervised_layers.len()
        )));
    }
    cfg.supervised_layers
        .iter()
        .zip(targets)
        .map(|(&l, tg)| layer_loss(tape, p, cfg, l, out.layer(l)?, tg, mask))
        .collect()
}
