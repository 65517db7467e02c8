//! Greedy and LM-fused prefix beam search decoding of CTC outputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ctc::{log_softmax_rows, BLANK};
use super::lm::{NgramLm, EOS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{log_add, Scalar};

/// Character vocabulary; symbol id `i + 1` is `symbols[i]`, id 0 is blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

/// LM token used for the space character.
pub const SPACE_TOKEN: &str = "|";

impl Vocabulary {
    pub fn new(mut symbols: Vec<char>) -> Result<Self> {
        symbols.sort_unstable();
        symbols.dedup();
        if symbols.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        Ok(Self { symbols })
    }

    /// Collects every character used by `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::new(texts.into_iter().flat_map(str::chars).collect())
    }

    /// Number of non-blank symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .binary_search(&c)
                    .map(|i| i + 1)
                    .map_err(|_| Error::invalid(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| i.checked_sub(1).and_then(|i| self.symbols.get(i)))
            .collect()
    }

    /// LM token for a symbol id.
    pub fn token(&self, id: usize) -> String {
        match self.symbols[id - 1] {
            ' ' => SPACE_TOKEN.to_string(),
            c => c.to_string(),
        }
    }

    /// LM tokenisation of a transcript.
    pub fn lm_tokens(&self, text: &str) -> Vec<String> {
        text.chars()
            .map(|c| if c == ' ' { SPACE_TOKEN.to_string() } else { c.to_string() })
            .collect()
    }
}

/// Language model bound to decoder symbol ids.
#[derive(Debug, Clone)]
pub struct BoundLm<'a> {
    lm: &'a NgramLm,
    /// LM word id per decoder symbol id (index 0 unused).
    map: Vec<Option<u32>>,
    eos: Option<u32>,
}

impl<'a> BoundLm<'a> {
    pub fn new(lm: &'a NgramLm, vocab: &Vocabulary) -> Self {
        let mut map = vec![None];
        map.extend((1..=vocab.len()).map(|id| lm.word_id(&vocab.token(id))));
        Self {
            lm,
            map,
            eos: lm.word_id(EOS),
        }
    }

    fn history(&self, prefix: &[usize]) -> Vec<Option<u32>> {
        prefix.iter().map(|&s| self.map[s]).collect()
    }

    pub fn log_prob(&self, prefix: &[usize], next: usize) -> f64 {
        self.lm.log_prob_ids(&self.history(prefix), self.map[next])
    }

    pub fn log_prob_end(&self, prefix: &[usize]) -> f64 {
        self.lm.log_prob_ids(&self.history(prefix), self.eos)
    }
}

/// Shallow-fusion decoding parameters:
/// `log p_ctc(y|x) + lm_weight * log p_lm(y) + insertion_bonus * |y|`.
#[derive(Debug, Clone)]
pub struct DecodeConfig<'a> {
    pub beam: usize,
    pub lm_weight: f64,
    pub insertion_bonus: f64,
    pub lm: Option<BoundLm<'a>>,
}

impl Default for DecodeConfig<'_> {
    fn default() -> Self {
        Self {
            beam: 8,
            lm_weight: 0.0,
            insertion_bonus: 0.0,
            lm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub symbols: Vec<usize>,
    /// Fused objective of the returned prefix.
    pub score: f64,
    /// `log p_ctc(y|x)` alone.
    pub ctc_log_prob: f64,
}

/// Per-frame argmax (ties to the lowest index), collapse repeats, drop blanks.
pub fn greedy_decode<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != BLANK && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Mass {
    blank: f64,
    non_blank: f64,
}

impl Mass {
    const EMPTY: Mass = Mass {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search with optional n-gram shallow fusion.
pub fn beam_decode<S: Scalar>(logits: &Tensor<S>, cfg: &DecodeConfig<'_>) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    if !cfg.lm_weight.is_finite() || !cfg.insertion_bonus.is_finite() {
        return Err(Error::invalid("LM weight and insertion bonus must be finite"));
    }
    let logp: Vec<Vec<f64>> = log_softmax_rows(logits)
        .into_iter()
        .map(|r| r.into_iter().map(Scalar::as_f64).collect())
        .collect();
    let width = logits.cols();

    // fusion(prefix) = w1 * log p_lm(prefix) + w2 * |prefix|, memoised.
    let mut fusion: HashMap<Vec<usize>, f64> = HashMap::new();
    fusion.insert(Vec::new(), 0.0);
    let fusion_of = |prefix: &Vec<usize>, fusion: &mut HashMap<Vec<usize>, f64>| -> f64 {
        if let Some(&v) = fusion.get(prefix) {
            return v;
        }
        let parent = fusion[&prefix[..prefix.len() - 1].to_vec()];
        let last = *prefix.last().unwrap();
        let lm = match (&cfg.lm, cfg.lm_weight) {
            (Some(lm), w) if w != 0.0 => w * lm.log_prob(&prefix[..prefix.len() - 1], last),
            _ => 0.0,
        };
        let v = parent + lm + cfg.insertion_bonus;
        fusion.insert(prefix.clone(), v);
        v
    };

    let mut beams: Vec<(Vec<usize>, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for row in &logp {
        let mut next: BTreeMap<Vec<usize>, Mass> = BTreeMap::new();
        for (prefix, mass) in &beams {
            for (c, &p) in row.iter().enumerate().take(width) {
                if c == BLANK {
                    let e = next.entry(prefix.clone()).or_insert(Mass::EMPTY);
                    e.blank = log_add(e.blank, mass.total() + p);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    let e = next.entry(extended).or_insert(Mass::EMPTY);
                    e.non_blank = log_add(e.non_blank, mass.blank + p);
                    let s = next.entry(prefix.clone()).or_insert(Mass::EMPTY);
                    s.non_blank = log_add(s.non_blank, mass.non_blank + p);
                } else {
                    let e = next.entry(extended).or_insert(Mass::EMPTY);
                    e.non_blank = log_add(e.non_blank, mass.total() + p);
                }
            }
        }
        let mut scored: Vec<(f64, Vec<usize>, Mass)> = next
            .into_iter()
            .map(|(prefix, mass)| {
                let f = fusion_of(&prefix, &mut fusion);
                (mass.total() + f, prefix, mass)
            })
            .collect();
        scored.sort_by(rank);
        scored.truncate(cfg.beam);
        beams = scored.into_iter().map(|(_, p, m)| (p, m)).collect();
    }

    let mut finals: Vec<(f64, Vec<usize>, Mass)> = beams
        .into_iter()
        .map(|(prefix, mass)| {
            let mut f = fusion_of(&prefix, &mut fusion);
            if let (Some(lm), w) = (&cfg.lm, cfg.lm_weight) {
                if w != 0.0 {
                    f += w * lm.log_prob_end(&prefix);
                }
            }
            (mass.total() + f, prefix, mass)
        })
        .collect();
    finals.sort_by(rank);
    let (score, symbols, mass) = finals.into_iter().next().expect("beam is never empty");
    Ok(Hypothesis {
        symbols,
        score,
        ctc_log_prob: mass.total(),
    })
}

/// Descending score, then lexicographically smaller prefix first.
fn rank(a: &(f64, Vec<usize>, Mass), b: &(f64, Vec<usize>, Mass)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}
