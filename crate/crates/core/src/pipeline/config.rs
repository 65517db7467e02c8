use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::MfccConfig;
use crate::finetune::FreezePolicy;
use crate::model::ModelConfig;
use crate::ssl::SslConfig;

/// Audio directories and the transcript file of the labeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory of `.wav` / `.pmsw` files used for pretraining.
    pub unlabeled: PathBuf,
    /// Directory of transcribed audio used for fine-tuning.
    pub labeled: PathBuf,
    /// `utt_id<TAB>text` lines for the labeled split.
    pub transcripts: PathBuf,
    /// Evaluation split; defaults to the labeled split (training error).
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default)]
    pub eval_transcripts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iteration1Config {
    /// k of the MFCC codebook.
    pub clusters: usize,
    #[serde(default = "one")]
    pub subsample_fraction: f64,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_max_iters: usize,
    pub ssl: SslConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iteration2Config {
    /// Transformer layer whose outputs are re-clustered.
    pub extract_layer: usize,
    /// Codebook sizes fitted on the extracted features.
    pub cluster_sizes: Vec<usize>,
    pub subsample_fraction: f64,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_max_iters: usize,
    /// Start from the iteration-1 weights instead of a fresh init.
    #[serde(default)]
    pub warm_start: bool,
    pub ssl: SslConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default)]
    pub policy: FreezePolicy,
    pub optim: crate::ssl::OptimConfig,
    /// Greedy training CER is measured every this many steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop once the training CER reaches 0.
    #[serde(default = "yes")]
    pub stop_at_zero_cer: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    #[serde(default = "default_beam")]
    pub beam: usize,
    /// `w1`: weight of the LM log-probability.
    #[serde(default)]
    pub lm_weight: f64,
    /// `w2`: per-symbol insertion bonus.
    #[serde(default)]
    pub insertion_bonus: f64,
    /// Character n-gram order; 0 disables the LM.
    #[serde(default = "default_lm_order")]
    pub lm_order: usize,
    #[serde(default = "default_discount")]
    pub lm_discount: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: default_beam(),
            lm_weight: 0.0,
            insertion_bonus: 0.0,
            lm_order: default_lm_order(),
            lm_discount: default_discount(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_kmeans_iters() -> usize {
    crate::clustering::DEFAULT_MAX_ITERS
}

fn default_eval_every() -> usize {
    25
}

fn default_beam() -> usize {
    8
}

fn default_lm_order() -> usize {
    3
}

fn default_discount() -> f64 {
    0.5
}

fn default_batch_seconds() -> f64 {
    10.0
}

/// Complete description of one two-iteration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Cap on the summed audio duration of one batch, in seconds.
    #[serde(default = "default_batch_seconds")]
    pub max_batch_seconds: f64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub mfcc: MfccConfig,
    /// Iteration-2 architecture; iteration 1 uses the same network with
    /// only the top layer supervised.
    pub model: ModelConfig,
    pub iteration1: Iteration1Config,
    pub iteration2: Iteration2Config,
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub decode: DecodeSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.unlabeled);
        fix(&mut self.corpus.labeled);
        fix(&mut self.corpus.transcripts);
        if let Some(p) = &mut self.corpus.eval {
            fix(p);
        }
        if let Some(p) = &mut self.corpus.eval_transcripts {
            fix(p);
        }
    }

    /// Iteration-1 network: same layers, top layer only, one MFCC codebook.
    pub fn iteration1_model(&self) -> ModelConfig {
        self.model.with_single_head(self.iteration1.clusters)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        self.model.validate()?;
        self.iteration1_model().validate()?;
        self.iteration1.ssl.validate()?;
        self.iteration2.ssl.validate()?;
        self.finetune.optim.validate()?;
        if !(self.max_batch_seconds > 0.0) {
            return bad(format!("max_batch_seconds must be positive, got {}", self.max_batch_seconds));
        }
        let l = self.iteration2.extract_layer;
        if l == 0 || l > self.model.num_layers {
            return bad(format!(
                "extract_layer {l} outside 1..={}",
                self.model.num_layers
            ));
        }
        for (&layer, &size) in self.model.supervised_layers.iter().zip(&self.model.codebook_sizes) {
            if !self.iteration2.cluster_sizes.contains(&size) {
                return bad(format!(
                    "supervised layer {layer} wants a {size}-cluster target set, but iteration 2 only fits {:?}",
                    self.iteration2.cluster_sizes
                ));
            }
        }
        for (what, f) in [
            ("iteration1.subsample_fraction", self.iteration1.subsample_fraction),
            ("iteration2.subsample_fraction", self.iteration2.subsample_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{what} = {f} outside (0, 1]"));
            }
        }
        if self.decode.beam == 0 {
            return bad("decode.beam must be >= 1".into());
        }
        if !self.decode.lm_weight.is_finite() || !self.decode.insertion_bonus.is_finite() {
            return bad("decode weights must be finite".into());
        }
        if self.decode.lm_order > 4 {
            return bad(format!("lm_order {} above 4", self.decode.lm_order));
        }
        if self.finetune.eval_every == 0 {
            return bad("finetune.eval_every must be >= 1".into());
        }
        if self.corpus.eval.is_some() != self.corpus.eval_transcripts.is_some() {
            return bad("corpus.eval and corpus.eval_transcripts must be given together".into());
        }
        Ok(())
    }

    /// Validation plus existence of every referenced input path.
    pub fn validate_paths(&self) -> Result<()> {
        let mut paths = vec![&self.corpus.unlabeled, &self.corpus.labeled, &self.corpus.transcripts];
        paths.extend(self.corpus.eval.iter());
        paths.extend(self.corpus.eval_transcripts.iter());
        for p in paths {
            if !p.exists() {
                return Err(Error::config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let text = serde_json::to_string(&value).expect("value serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
