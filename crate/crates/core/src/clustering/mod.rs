//! k-means pseudo-label generation.

mod kmeans;

pub use kmeans::{kmeans_fit, ClusterModel, DEFAULT_MAX_ITERS};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Frame labels for a corpus under one codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAssignment {
    pub labels: Vec<Vec<u32>>,
    pub codebook_size: usize,
    pub source: FeatureSource,
}

impl TargetAssignment {
    pub fn new(labels: Vec<Vec<u32>>, codebook_size: usize, source: FeatureSource) -> Result<Self> {
        if let Some((u, &bad)) = labels
            .iter()
            .enumerate()
            .find_map(|(u, l)| l.iter().find(|&&x| x as usize >= codebook_size).map(|x| (u, x)))
        {
            return Err(Error::invalid(format!(
                "utterance {u}: label {bad} outside codebook of size {codebook_size}"
            )));
        }
        Ok(Self {
            labels,
            codebook_size,
            source,
        })
    }

    /// Label-file text: a `k=<size> layer=<source>` header, then one
    /// utterance per line as space-separated integers.
    pub fn to_text(&self) -> String {
        let mut s = format!("k={} layer={}\n", self.codebook_size, self.source);
        for utt in &self.labels {
            let line: Vec<String> = utt.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |r: String| Error::format("label file", r);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut k = None;
        let mut source = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("k", v)) => k = Some(v.parse::<usize>().map_err(|_| bad(format!("bad k `{v}`")))?),
                Some(("layer", v)) => source = Some(v.parse::<FeatureSource>()?),
                _ => return Err(bad(format!("unexpected header field `{field}`"))),
            }
        }
        let k = k.ok_or_else(|| bad("header lacks k=".into()))?;
        let source = source.ok_or_else(|| bad("header lacks layer=".into()))?;
        let labels = lines
            .map(|l| {
                l.split_whitespace()
                    .map(|x| x.parse::<u32>().map_err(|_| bad(format!("bad label `{x}`"))))
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, k, source)
    }
}

/// Stacks all frames of a corpus into one matrix.
fn stack<S: Scalar>(corpus: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = corpus.first().ok_or_else(|| Error::invalid("corpus is empty"))?;
    let d = first.cols();
    let mut data = Vec::new();
    for (i, m) in corpus.iter().enumerate() {
        if m.ndim() != 2 || m.cols() != d {
            return Err(Error::invalid(format!(
                "utterance {i} has shape {:?}, expected D = {d}",
                m.shape()
            )));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new([data.len() / d, d], data)
}

/// Uniform sample without replacement of `round(fraction * total)` frames.
pub fn subsample_frames<S: Scalar>(corpus: &[Tensor<S>], fraction: f64, seed: u64) -> Result<Tensor<S>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let all = stack(corpus)?;
    let total = all.rows();
    let m = (fraction * total as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid(format!(
            "sampling {fraction} of {total} frames leaves no frames"
        )));
    }
    if m == total {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, m).into_vec();
    idx.sort_unstable();
    let mut data = Vec::with_capacity(m * all.cols());
    for i in idx {
        data.extend_from_slice(all.row(i));
    }
    Tensor::new([m, all.cols()], data)
}

/// Codebook and corpus labels for one target-set size.
#[derive(Debug, Clone)]
pub struct TargetSet<S> {
    pub model: ClusterModel<S>,
    pub targets: TargetAssignment,
}

/// Seed used for the fit of codebook size `k` under a run seed.
pub fn codebook_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One independent k-means per size on a shared subsample, each then
/// assigning every frame of the full corpus.
pub fn multi_resolution_targets<S: Scalar>(
    corpus: &[Tensor<S>],
    source: FeatureSource,
    sizes: &[usize],
    fraction: f64,
    max_iters: usize,
    seed: u64,
) -> Result<BTreeMap<usize, TargetSet<S>>> {
    if sizes.is_empty() {
        return Err(Error::invalid("no codebook sizes requested"));
    }
    let sample = subsample_frames(corpus, fraction, seed)?;
    let mut out = BTreeMap::new();
    for &k in sizes {
        if k == 0 || k > sample.rows() {
            return Err(Error::invalid(format!(
                "codebook size {k} must lie in [1, {}] (sampled frames)",
                sample.rows()
            )));
        }
        let model = kmeans_fit(&sample, k, max_iters, codebook_seed(seed, k))?;
        let labels = corpus.iter().map(|u| model.assign(u)).collect::<Result<Vec<_>>>()?;
        let targets = TargetAssignment::new(labels, k, source)?;
        out.insert(k, TargetSet { model, targets });
    }
    Ok(out)
}
