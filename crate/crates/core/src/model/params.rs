use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Named parameter tensors of the network.
///
/// Naming: `conv.{i}.{weight,bias}`, `feat_ln.{gamma,beta}`,
/// `proj.{weight,bias}`, `mask_emb`, `layers.{l}.…` for transformer layer
/// `l` (1-based), `head.{l}.{proj,emb}` per supervised layer and
/// `ctc.{weight,bias}` once a CTC head is attached.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

/// Expected names and shapes of every encoder and codebook-head tensor.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let mut out = Vec::new();
    let mut cin = 1;
    for (i, c) in cfg.conv_spec.iter().enumerate() {
        out.push((format!("conv.{i}.weight"), vec![c.channels, cin, c.kernel]));
        out.push((format!("conv.{i}.bias"), vec![c.channels]));
        cin = c.channels;
    }
    out.push(("feat_ln.gamma".into(), vec![cin]));
    out.push(("feat_ln.beta".into(), vec![cin]));
    out.push(("proj.weight".into(), vec![cin, d]));
    out.push(("proj.bias".into(), vec![d]));
    out.push(("mask_emb".into(), vec![d]));
    let f = d * cfg.ffn_mult;
    for l in 1..=cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        for m in ["wq", "wk", "wv", "wo"] {
            out.push((p(&format!("attn.{m}")), vec![d, d]));
        }
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("ffn.w1"), vec![d, f]));
        out.push((p("ffn.b1"), vec![f]));
        out.push((p("ffn.w2"), vec![f, d]));
        out.push((p("ffn.b2"), vec![d]));
    }
    for (&l, &c) in cfg.supervised_layers.iter().zip(&cfg.codebook_sizes) {
        out.push((format!("head.{l}.proj"), vec![d, cfg.codebook_dim]));
        out.push((format!("head.{l}.emb"), vec![c, cfg.codebook_dim]));
    }
    out
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Initial value for a named tensor: LN gains 1, biases 0, matrices
/// uniform with a fan-in/fan-out bound.
fn init_tensor<S: Scalar>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    if name.ends_with("gamma") {
        return Tensor::full(shape.to_vec(), S::one());
    }
    if name.ends_with("beta") || name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        return Tensor::zeros(shape.to_vec());
    }
    let bound = match shape {
        [cout, cin, k] => (6.0 / ((cin * k + cout) as f64)).sqrt(),
        [_, cols] if name.ends_with(".emb") => (3.0 / *cols as f64).sqrt().min(1.0),
        [rows, cols] => (6.0 / (rows + cols) as f64).sqrt(),
        [d] => 1.0 / (*d as f64).sqrt(),
        _ => 0.1,
    };
    uniform(rng, shape, bound)
}

impl<S: Scalar> Params<S> {
    /// Fresh parameters for `cfg`, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = parameter_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<S>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Option<Tensor<S>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Drops every `head.*` tensor (pretraining heads).
    pub fn drop_codebook_heads(&mut self) {
        self.tensors.retain(|k, _| !k.starts_with("head."));
    }

    /// Adds fresh codebook heads for `cfg`'s supervised layers, replacing
    /// any existing ones.
    pub fn reset_codebook_heads(&mut self, cfg: &ModelConfig, seed: u64) {
        self.drop_codebook_heads();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape) in parameter_shapes(cfg) {
            if name.starts_with("head.") {
                let t = init_tensor(&name, &shape, &mut rng);
                self.tensors.insert(name, t);
            }
        }
    }

    /// Checks that every tensor `cfg` requires is present with the right
    /// shape.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        self.check_shapes(parameter_shapes(cfg))
    }

    /// [`Params::check_against`] without the codebook heads, for models
    /// whose heads were replaced by a CTC layer.
    pub fn check_encoder_against(&self, cfg: &ModelConfig) -> Result<()> {
        self.check_shapes(parameter_shapes(cfg).into_iter().filter(|(n, _)| !n.starts_with("head.")).collect())
    }

    fn check_shapes(&self, shapes: Vec<(String, Vec<usize>)>) -> Result<()> {
        for (name, shape) in shapes {
            match self.tensors.get(&name) {
                None => return Err(Error::config(format!("parameter `{name}` missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape {
                        op: "load parameters",
                        lhs: t.shape().to_vec(),
                        rhs: shape,
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every tensor on `tape`: as a leaf when `trainable(name)`,
    /// otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`Params`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
