//! CTC loss by the log-space forward-backward recursion.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{log_add, log_sum_exp, Scalar};

pub const BLANK: usize = 0;

/// Fewest frames that can emit `labels`: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Row-wise log-softmax of `[T, V+1]` logits.
pub fn log_softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<Vec<S>> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let lse = log_sum_exp(row);
            row.iter().map(|&x| x - lse).collect()
        })
        .collect()
}

fn validate<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<()> {
    if logits.ndim() != 2 || logits.cols() < 2 {
        return Err(Error::invalid(format!(
            "ctc: logits must be [T, V+1] with V >= 1, got {:?}",
            logits.shape()
        )));
    }
    let v = logits.cols() - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l > v) {
        return Err(Error::invalid(format!("ctc: label {bad} outside [1, {v}]")));
    }
    let need = min_frames(labels);
    if logits.rows() < need {
        return Err(Error::invalid(format!(
            "ctc: label sequence needs at least T = {need} frames, got {}",
            logits.rows()
        )));
    }
    Ok(())
}

fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Log-space forward variables `alpha[t][s]` (emission at `t` included).
fn forward<S: Scalar>(logp: &[Vec<S>], ext: &[usize]) -> Vec<Vec<S>> {
    let t_len = logp.len();
    let s_len = ext.len();
    let ninf = S::neg_infinity();
    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = logp[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = logp[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + logp[t][ext[s]];
        }
    }
    alpha
}

/// Log-space backward variables `beta[t][s]` (emission at `t` excluded).
fn backward<S: Scalar>(logp: &[Vec<S>], ext: &[usize]) -> Vec<Vec<S>> {
    let t_len = logp.len();
    let s_len = ext.len();
    let ninf = S::neg_infinity();
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = S::zero();
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + logp[t + 1][ext[s]];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + logp[t + 1][ext[s + 1]]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, beta[t + 1][s + 2] + logp[t + 1][ext[s + 2]]);
            }
            beta[t][s] = b;
        }
    }
    beta
}

fn total_log_prob<S: Scalar>(alpha: &[Vec<S>]) -> S {
    let last = alpha.last().expect("T >= 1");
    let s_len = last.len();
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// CTC negative log-likelihood of `labels` (symbols in `[1, V]`) under `[T, V+1]` logits.
pub fn ctc_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    validate(logits, labels)?;
    let logp = log_softmax_rows(logits);
    let alpha = forward(&logp, &extended(labels));
    Ok(-total_log_prob(&alpha))
}

/// Loss together with its gradient with respect to the logits.
pub fn ctc_loss_and_grad<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    validate(logits, labels)?;
    let logp = log_softmax_rows(logits);
    let ext = extended(labels);
    let alpha = forward(&logp, &ext);
    let beta = backward(&logp, &ext);
    let log_total = total_log_prob(&alpha);
    if !log_total.is_finite() {
        return Err(Error::NonFinite {
            what: "ctc log-likelihood".into(),
            context: None,
        });
    }
    let width = logits.cols();
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for t in 0..logp.len() {
        let mut occupancy = vec![S::neg_infinity(); width];
        for (s, &sym) in ext.iter().enumerate() {
            occupancy[sym] = log_add(occupancy[sym], alpha[t][s] + beta[t][s]);
        }
        let row = grad.row_mut(t);
        for k in 0..width {
            row[k] = logp[t][k].exp() - (occupancy[k] - log_total).exp();
        }
    }
    Ok((-log_total, grad))
}
