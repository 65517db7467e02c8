use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Span-masking parameters: start fraction `p` and span length `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub p: f64,
    pub l: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { p: 0.08, l: 10 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("mask p = {} outside [0, 1]", self.p)));
        }
        if self.l == 0 {
            return Err(Error::config("mask span l must be >= 1"));
        }
        Ok(())
    }
}

/// Masked timesteps of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Sorted, distinct masked indices.
    pub indices: Vec<usize>,
    /// Sorted span starts.
    pub starts: Vec<usize>,
    pub len: usize,
    pub span: usize,
}

impl MaskSpec {
    /// Union of `[s, min(s + span, len))` over `starts`.
    pub fn from_starts(len: usize, mut starts: Vec<usize>, span: usize) -> Result<Self> {
        if let Some(&bad) = starts.iter().find(|&&s| s >= len) {
            return Err(Error::invalid(format!("mask start {bad} outside sequence of length {len}")));
        }
        starts.sort_unstable();
        starts.dedup();
        let mut hit = vec![false; len];
        for &s in &starts {
            hit[s..(s + span).min(len)].fill(true);
        }
        let indices = (0..len).filter(|&i| hit[i]).collect();
        Ok(Self {
            indices,
            starts,
            len,
            span,
        })
    }

    pub fn empty(len: usize) -> Self {
        Self {
            indices: Vec::new(),
            starts: Vec::new(),
            len,
            span: 0,
        }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `round(p * len)` starts drawn without replacement, spans unioned and
/// clipped at `len`.
pub fn sample_mask(len: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskSpec> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    let n = ((cfg.p * len as f64).round() as usize).min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = rand::seq::index::sample(&mut rng, len, n).into_vec();
    MaskSpec::from_starts(len, starts, cfg.l)
}
