use super::config::ModelConfig;
use super::params::{Bound, Params};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Projection `A^l`, codeword embeddings `e^l` and temperature of one
/// supervised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookHead<S> {
    pub proj: Tensor<S>,
    pub emb: Tensor<S>,
    pub temperature: S,
}

impl<S: Scalar> CodebookHead<S> {
    pub fn new(proj: Tensor<S>, emb: Tensor<S>, temperature: S) -> Result<Self> {
        if proj.ndim() != 2 || emb.ndim() != 2 || proj.cols() != emb.cols() {
            return Err(Error::Shape {
                op: "codebook head",
                lhs: proj.shape().to_vec(),
                rhs: emb.shape().to_vec(),
            });
        }
        if emb.rows() < 2 {
            return Err(Error::invalid("a codebook needs at least 2 codewords"));
        }
        if !(temperature > S::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { proj, emb, temperature })
    }

    /// The head of supervised layer `l` stored in `params`.
    pub fn from_params(params: &Params<S>, cfg: &ModelConfig, l: usize) -> Result<Self> {
        let get = |n: String| {
            params
                .get(&n)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no codebook head for layer {l}")))
        };
        Self::new(
            get(format!("head.{l}.proj"))?,
            get(format!("head.{l}.emb"))?,
            S::lit(cfg.temperature),
        )
    }

    pub fn size(&self) -> usize {
        self.emb.rows()
    }
}

/// Temperature-scaled cosine logits `sim(A o_t, e_c) / tau` for every row
/// of `o` (`[m, D]`), giving `[m, C]`.
pub fn head_logits<S: Scalar>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, l: usize, o: Var) -> Result<Var> {
    let a = tape.matmul(o, p.var(&format!("head.{l}.proj"))?)?;
    let sim = tape.cosine_rows(a, p.var(&format!("head.{l}.emb"))?)?;
    tape.scale(sim, S::one() / S::lit(cfg.temperature))
}

/// Distribution over the codewords of `head` for one hidden state.
pub fn codeword_distribution<S: Scalar>(o_t: &[S], head: &CodebookHead<S>) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let o = tape.constant(Tensor::new([1, o_t.len()], o_t.to_vec())?);
    let a = tape.constant(head.proj.clone());
    let e = tape.constant(head.emb.clone());
    let projected = tape.matmul(o, a)?;
    if tape.value(projected).data().iter().all(|&x| x == S::zero()) {
        return Err(Error::invalid("projected hidden state A o_t is the zero vector"));
    }
    let sim = tape.cosine_rows(projected, e)?;
    let scaled = tape.scale(sim, S::one() / head.temperature)?;
    let p = tape.softmax(scaled)?;
    Ok(tape.value(p).data().to_vec())
}
