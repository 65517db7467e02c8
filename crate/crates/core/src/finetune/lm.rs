//! Back-off n-gram language model with ARPA text I/O.
//!
//! Training uses interpolated absolute discounting written in back-off
//! form, so every conditional distribution sums to one over the model
//! vocabulary (plus `</s>`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const LN_10: f64 = std::f64::consts::LN_10;
/// ARPA convention for "never predicted" (used for `<s>`).
const ARPA_NEVER: f64 = -99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    /// Natural-log conditional probability.
    log_prob: f64,
    /// Natural-log back-off weight when this n-gram is used as a context.
    backoff: f64,
}

/// Word-id based back-off n-gram model.
#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    words: Vec<String>,
    ids: HashMap<String, u32>,
    /// `tables[k]` holds the (k+1)-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.ids.get(w).copied()
    }

    fn bos(&self) -> Option<u32> {
        self.word_id(BOS)
    }

    /// Words that can be predicted (everything except `<s>`).
    pub fn predictable(&self) -> impl Iterator<Item = u32> + '_ {
        let bos = self.bos();
        (0..self.words.len() as u32).filter(move |&i| Some(i) != bos)
    }

    /// Floor used for words outside the vocabulary.
    pub fn oov_log_prob(&self) -> f64 {
        if let Some(unk) = self.word_id(UNK) {
            if let Some(e) = self.tables[0].get(&vec![unk]) {
                return e.log_prob;
            }
        }
        -((self.predictable().count().max(1)) as f64).ln()
    }

    /// Trains an `order`-gram model on tokenised sentences.
    pub fn train(sentences: &[Vec<String>], order: usize, discount: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be >= 1"));
        }
        if !(0.0..1.0).contains(&discount) || discount == 0.0 {
            return Err(Error::invalid("discount must lie in (0, 1)"));
        }
        let mut vocab: BTreeSet<String> = sentences.iter().flatten().cloned().collect();
        for special in [BOS, EOS, UNK] {
            vocab.insert(special.to_string());
        }
        let words: Vec<String> = vocab.into_iter().collect();
        let ids: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let bos = ids[BOS];
        let eos = ids[EOS];

        // counts[k]: (k+1)-gram counts
        let mut counts: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); order];
        for s in sentences {
            let mut seq = vec![bos];
            seq.extend(s.iter().map(|w| ids[w]));
            seq.push(eos);
            for k in 0..order {
                for i in 1..seq.len() {
                    if i < k {
                        continue;
                    }
                    let gram = seq[i - k..=i].to_vec();
                    *counts[k].entry(gram).or_default() += 1;
                }
            }
        }

        let mut tables: Vec<HashMap<Vec<u32>, Entry>> = vec![HashMap::new(); order];
        // unigrams: add-one over predictable words
        let predictable: Vec<u32> = (0..words.len() as u32).filter(|&i| i != bos).collect();
        let total: u64 = counts[0].values().sum();
        let denom = (total + predictable.len() as u64) as f64;
        for &w in &predictable {
            let c = counts[0].get(&vec![w]).copied().unwrap_or(0);
            tables[0].insert(
                vec![w],
                Entry {
                    log_prob: ((c + 1) as f64 / denom).ln(),
                    backoff: 0.0,
                },
            );
        }
        tables[0].insert(
            vec![bos],
            Entry {
                log_prob: ARPA_NEVER * LN_10,
                backoff: 0.0,
            },
        );

        for k in 1..order {
            // context statistics
            let mut ctx_total: HashMap<Vec<u32>, (u64, u64)> = HashMap::new();
            for (gram, &c) in &counts[k] {
                let e = ctx_total.entry(gram[..k].to_vec()).or_default();
                e.0 += c;
                e.1 += 1;
            }
            let mut new_entries = Vec::new();
            for (gram, &c) in &counts[k] {
                let ctx = &gram[..k];
                let (ct, distinct) = ctx_total[ctx];
                let gamma = discount * distinct as f64 / ct as f64;
                let lower = lookup(&tables, &gram[1..k], gram[k], k - 1);
                let p = (c as f64 - discount) / ct as f64 + gamma * lower.exp();
                new_entries.push((gram.clone(), p.ln()));
            }
            for (gram, lp) in new_entries {
                tables[k].insert(
                    gram,
                    Entry {
                        log_prob: lp,
                        backoff: 0.0,
                    },
                );
            }
            for (ctx, (ct, distinct)) in ctx_total {
                let gamma = discount * distinct as f64 / ct as f64;
                if let Some(e) = tables[k - 1].get_mut(&ctx) {
                    e.backoff = gamma.ln();
                }
            }
        }
        Ok(Self {
            order,
            words,
            ids,
            tables,
        })
    }

    /// Natural-log `p(word | history)`; `history` is in chronological order
    /// and excludes the implicit leading `<s>`. `None` ids are OOV words.
    pub fn log_prob_ids(&self, history: &[Option<u32>], word: Option<u32>) -> f64 {
        let Some(word) = word else {
            return self.oov_log_prob();
        };
        let mut ctx: Vec<u32> = Vec::with_capacity(self.order);
        // Walk back until the order is exhausted or an OOV breaks the context;
        // only a context that reaches the sentence start gets `<s>`.
        let mut reached_start = true;
        for h in history.iter().rev() {
            if ctx.len() + 1 >= self.order {
                reached_start = false;
                break;
            }
            match h {
                Some(id) => ctx.push(*id),
                None => {
                    reached_start = false;
                    break;
                }
            }
        }
        if reached_start && ctx.len() + 1 < self.order {
            if let Some(bos) = self.bos() {
                ctx.push(bos);
            }
        }
        ctx.reverse();
        lookup(&self.tables, &ctx, word, ctx.len())
    }

    pub fn log_prob(&self, history: &[&str], word: &str) -> f64 {
        let h: Vec<Option<u32>> = history.iter().map(|w| self.word_id(w)).collect();
        self.log_prob_ids(&h, self.word_id(word))
    }

    /// Natural-log probability of a whole sentence including `</s>`.
    pub fn sentence_log_prob(&self, words: &[&str]) -> f64 {
        let mut total = 0.0;
        for i in 0..words.len() {
            total += self.log_prob(&words[..i], words[i]);
        }
        total + self.log_prob(words, EOS)
    }

    /// Serialises to ARPA text (log10 values).
    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\n\\data\\\n");
        for (k, table) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, table.len());
        }
        for (k, table) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "\n\\{}-grams:", k + 1);
            let mut rows: Vec<(String, &Entry)> = table
                .iter()
                .map(|(g, e)| {
                    let words: Vec<&str> = g.iter().map(|&i| self.words[i as usize].as_str()).collect();
                    (words.join(" "), e)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (words, e) in rows {
                let _ = write!(out, "{:.12}\t{}", e.log_prob / LN_10, words);
                if k + 1 < self.order {
                    let _ = write!(out, "\t{:.12}", e.backoff / LN_10);
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    /// Parses ARPA text.
    pub fn from_arpa(text: &str) -> Result<Self> {
        let bad = |r: String| Error::format("ARPA", r);
        let mut declared: Vec<usize> = Vec::new();
        let mut section: Option<usize> = None;
        let mut raw: Vec<Vec<(Vec<String>, f64, f64)>> = Vec::new();
        let mut seen_data = false;
        let mut seen_end = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                seen_data = true;
                continue;
            }
            if line == "\\end\\" {
                seen_end = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, n) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: bad ngram count", lineno + 1)))?;
                let k: usize = k.trim().parse().map_err(|_| bad(format!("line {}: bad order", lineno + 1)))?;
                let n: usize = n.trim().parse().map_err(|_| bad(format!("line {}: bad count", lineno + 1)))?;
                if k != declared.len() + 1 {
                    return Err(bad(format!("line {}: ngram orders out of sequence", lineno + 1)));
                }
                declared.push(n);
                continue;
            }
            if line.starts_with('\\') && line.ends_with("-grams:") {
                let k: usize = line[1..line.len() - "-grams:".len()]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad section header", lineno + 1)))?;
                if k == 0 || k > declared.len() {
                    return Err(bad(format!("line {}: undeclared order {k}", lineno + 1)));
                }
                section = Some(k);
                while raw.len() < k {
                    raw.push(Vec::new());
                }
                continue;
            }
            let k = section.ok_or_else(|| bad(format!("line {}: entry outside a section", lineno + 1)))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < k + 1 || fields.len() > k + 2 {
                return Err(bad(format!("line {}: expected {k} words", lineno + 1)));
            }
            let lp: f64 = fields[0].parse().map_err(|_| bad(format!("line {}: bad log-prob", lineno + 1)))?;
            let bo: f64 = if fields.len() == k + 2 {
                fields[k + 1]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad back-off", lineno + 1)))?
            } else {
                0.0
            };
            let words = fields[1..=k].iter().map(|s| s.to_string()).collect();
            raw[k - 1].push((words, lp * LN_10, bo * LN_10));
        }
        if !seen_data || !seen_end || declared.is_empty() {
            return Err(bad("missing \\data\\ or \\end\\ marker".into()));
        }
        for (k, &n) in declared.iter().enumerate() {
            let got = raw.get(k).map_or(0, Vec::len);
            if got != n {
                return Err(bad(format!("{}-grams: declared {n}, found {got}", k + 1)));
            }
        }
        let mut words: Vec<String> = raw[0].iter().map(|(w, _, _)| w[0].clone()).collect();
        words.sort();
        words.dedup();
        let ids: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut tables = vec![HashMap::new(); declared.len()];
        for (k, entries) in raw.into_iter().enumerate() {
            for (ws, lp, bo) in entries {
                let gram = ws
                    .iter()
                    .map(|w| ids.get(w).copied().ok_or_else(|| bad(format!("word `{w}` missing from unigrams"))))
                    .collect::<Result<Vec<u32>>>()?;
                tables[k].insert(
                    gram,
                    Entry {
                        log_prob: lp,
                        backoff: bo,
                    },
                );
            }
        }
        Ok(Self {
            order: declared.len(),
            words,
            ids,
            tables,
        })
    }
}

/// Back-off lookup of `word` after context `ctx` (length `k`).
fn lookup(tables: &[HashMap<Vec<u32>, Entry>], ctx: &[u32], word: u32, k: usize) -> f64 {
    debug_assert_eq!(ctx.len(), k);
    if k == 0 {
        return tables[0].get(&vec![word]).map_or(f64::NEG_INFINITY, |e| e.log_prob);
    }
    let mut gram = ctx.to_vec();
    gram.push(word);
    if let Some(e) = tables.get(k).and_then(|t| t.get(&gram)) {
        return e.log_prob;
    }
    let bow = tables[k - 1].get(ctx).map_or(0.0, |e| e.backoff);
    bow + lookup(tables, &ctx[1..], word, k - 1)
}
