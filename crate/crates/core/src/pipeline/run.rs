use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::corpus::{align_labels, check_transcribed, duration_batches, load_audio_dir, read_transcripts, Utterance};
use super::manifest::{RunManifest, StageRecord, StageStatus};
use crate::clustering::{multi_resolution_targets, TargetAssignment};
use crate::error::{Error, Result};
use crate::features::{load_pmsf, mfcc39, save_pmsf, utterance_normalize, FeatureSource};
use crate::finetune::{
    attach_ctc_head, beam_decode, char_error_rate, conv_output, finetune_step, greedy_decode, utterance_ctc_logits,
    word_error_rate, BoundLm, DecodeConfig, EditCounts, LabeledUtterance, NgramLm, Vocabulary,
};
use crate::model::{forward, Checkpoint, ModelConfig, Params};
use crate::numerics::{Tape, Tensor};
use crate::scalar::Scalar;
use crate::ssl::{derive_seed, pretrain_step, Adam, SslConfig, TrainUtterance};

/// Artifact name to path relative to the epoch directory.
pub type Artifacts = BTreeMap<String, PathBuf>;

pub const STAGES: &[&str] = &[
    "features",
    "iteration1.cluster",
    "iteration1.pretrain",
    "iteration2.extract",
    "iteration2.cluster",
    "iteration2.pretrain",
    "finetune",
    "decode",
    "eval",
];

/// Error rates of one decoder over the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderScores {
    pub wer: Option<f64>,
    pub cer: Option<f64>,
    pub word_counts: EditCounts,
    pub char_counts: EditCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub greedy: DecoderScores,
    pub beam: DecoderScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub epoch_dir: PathBuf,
    pub report: EvalReport,
}

fn artifacts<const N: usize>(items: [(&str, PathBuf); N]) -> Artifacts {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Appends one line to a metrics file.
fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Drops what a failed earlier attempt of a stage left behind.
fn remove_stale(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// Parses `key=value` metric lines.
pub fn read_metrics(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    Ok(read_file(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .collect())
}

/// Writes one PMSF file per utterance plus an `index.txt` of ids.
fn save_feature_dir(dir: &Path, ids: &[String], feats: &[Tensor<f64>], source: FeatureSource) -> Result<()> {
    create_dir(dir)?;
    ids.par_iter()
        .zip(feats)
        .map(|(id, f)| save_pmsf(&dir.join(format!("{id}.pmsf")), f, source))
        .collect::<Result<()>>()?;
    write_file(&dir.join("index.txt"), ids.join("\n") + "\n")
}

fn load_feature_dir(dir: &Path) -> Result<(Vec<String>, Vec<Tensor<f64>>)> {
    let ids: Vec<String> = read_file(&dir.join("index.txt"))?.lines().map(str::to_string).collect();
    let feats = ids
        .par_iter()
        .map(|id| Ok(load_pmsf(&dir.join(format!("{id}.pmsf")))?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((ids, feats))
}

fn check_ids(what: &str, expected: &[String], got: &[String]) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!("{what} do not match the corpus utterance ids")));
    }
    Ok(())
}

/// Shuffled duration-capped batches, refilled every pass over the data.
struct BatchStream {
    durations: Vec<f64>,
    cap: f64,
    seed: u64,
    pass: u64,
    pending: Vec<Vec<usize>>,
    next_id: usize,
}

impl BatchStream {
    fn new(durations: Vec<f64>, cap: f64, seed: u64) -> Self {
        Self {
            durations,
            cap,
            seed,
            pass: 0,
            pending: Vec::new(),
            next_id: 0,
        }
    }

    fn next_batch(&mut self) -> (usize, Vec<usize>) {
        if self.pending.is_empty() {
            let mut order: Vec<usize> = (0..self.durations.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.pass])));
            self.pass += 1;
            let d: Vec<f64> = order.iter().map(|&i| self.durations[i]).collect();
            self.pending = duration_batches(&d, self.cap)
                .into_iter()
                .rev()
                .map(|b| b.into_iter().map(|j| order[j]).collect())
                .collect();
        }
        let id = self.next_id;
        self.next_id += 1;
        (id, self.pending.pop().expect("non-empty corpus"))
    }
}

/// Runs `ssl.optim.steps` masked-prediction updates, logging every step to
/// `metrics`.
fn pretrain(
    model: &ModelConfig,
    ssl: &SslConfig,
    data: &[TrainUtterance<f64>],
    mut params: Params<f64>,
    cap: f64,
    metrics: &Path,
    tag: &str,
) -> Result<Params<f64>> {
    let durations = data.iter().map(|u| u.wave.len() as f64 / model.sample_rate as f64).collect();
    let mut stream = BatchStream::new(durations, cap, derive_seed(ssl.seed, &[0xba7c]));
    let mut adam = Adam::new(&ssl.optim);
    remove_stale(metrics)?;
    for step in 1..=ssl.optim.steps {
        let (batch_id, idx) = stream.next_batch();
        let batch: Vec<&TrainUtterance<f64>> = idx.iter().map(|&i| &data[i]).collect();
        let m = pretrain_step(&mut params, &mut adam, model, ssl, &batch, step, batch_id)?;
        if step % 10 == 0 || step == ssl.optim.steps {
            info!("{tag} {m}");
        }
        append_line(metrics, &format!("{m} batch={batch_id}"))?;
    }
    Ok(params)
}

/// Frame labels resampled onto the encoder grid of each utterance.
fn encoder_targets(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    utts: &[Utterance],
    labels: &[Vec<u32>],
) -> Result<Vec<Vec<u32>>> {
    let sr = model.sample_rate;
    let hop = cfg.mfcc.hop_samples(sr);
    let win = cfg.mfcc.window_samples(sr);
    utts.iter()
        .zip(labels)
        .map(|(u, l)| align_labels(l, hop, win, model.stride_product(), model.num_frames(u.wave.len())))
        .collect()
}

fn check_sample_rate(model: &ModelConfig, utts: &[Utterance]) -> Result<()> {
    for u in utts {
        if u.wave.sample_rate() != model.sample_rate {
            return Err(Error::invalid(format!(
                "utterance `{}` is sampled at {} Hz, the model expects {} Hz",
                u.id,
                u.wave.sample_rate(),
                model.sample_rate
            )));
        }
        if model.num_frames(u.wave.len()) == 0 {
            return Err(Error::invalid(format!(
                "utterance `{}` has {} samples, the encoder needs at least {}",
                u.id,
                u.wave.len(),
                model.min_samples()
            )));
        }
    }
    Ok(())
}

fn save_targets(dir: &Path, name: &str, t: &TargetAssignment) -> Result<PathBuf> {
    let rel = PathBuf::from(name);
    write_file(&dir.join(&rel), t.to_text())?;
    Ok(rel)
}

/// Layer-`layer` outputs of an unmasked forward pass.
pub fn extract_layer(params: &Params<f64>, model: &ModelConfig, wave: &[f64], layer: usize) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let out = forward(&mut tape, &p, model, wave, &[])?;
    Ok(tape.value(out.layer(layer)?).clone())
}

fn labeled_split(audio: &Path, transcripts: &Path) -> Result<(Vec<Utterance>, Vec<String>)> {
    let utts = load_audio_dir(audio)?;
    let mut texts = read_transcripts(transcripts)?;
    let mut out = Vec::with_capacity(utts.len());
    for u in &utts {
        let t = texts
            .remove(&u.id)
            .ok_or_else(|| Error::invalid(format!("no transcript for utterance `{}`", u.id)))?;
        out.push(t);
    }
    if let Some(id) = texts.keys().next() {
        return Err(Error::invalid(format!("transcript `{id}` has no audio file")));
    }
    Ok((utts, out))
}

/// Two-iteration pretraining, fine-tuning and evaluation of one config,
/// with each stage recorded in the output directory's manifest.
pub struct Pipeline {
    cfg: ExperimentConfig,
    hash: String,
    manifest: RunManifest,
    epoch: usize,
}

impl Pipeline {
    /// Validates `cfg` and opens (or resumes) its epoch in the manifest.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_paths()?;
        check_transcribed(&cfg.corpus.labeled, &cfg.corpus.transcripts)?;
        if let (Some(a), Some(t)) = (&cfg.corpus.eval, &cfg.corpus.eval_transcripts) {
            check_transcribed(a, t)?;
        }
        let root = cfg.output_dir.clone();
        create_dir(&root)?;
        let hash = cfg.hash();
        let mut manifest = RunManifest::load_or_default(&root)?;
        let epoch = manifest.epoch_for(&hash, cfg.seed);
        manifest.save(&root)?;
        let p = Self {
            cfg,
            hash,
            manifest,
            epoch,
        };
        create_dir(&p.epoch_dir())?;
        info!("config {} -> {}", &p.hash[..12], p.epoch_dir().display());
        Ok(p)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn epoch_dir(&self) -> PathBuf {
        self.cfg.output_dir.join(&self.manifest.epochs[self.epoch].dir)
    }

    /// Absolute path of artifact `key` of `stage`, if the stage completed.
    pub fn artifact(&self, stage: &str, key: &str) -> Option<PathBuf> {
        let a = self.manifest.epochs[self.epoch].completed(stage, &self.cfg.output_dir)?;
        a.get(key).map(|p| self.epoch_dir().join(p))
    }

    fn require(&self, stage: &str, key: &str) -> Result<PathBuf> {
        self.artifact(stage, key)
            .ok_or_else(|| Error::invalid(format!("stage `{stage}` has not completed (missing `{key}`)")))
    }

    /// Runs `f` unless `name` already completed under this config hash.
    fn stage(&mut self, name: &str, f: impl FnOnce(&Self, &Path) -> Result<Artifacts>) -> Result<Artifacts> {
        let root = self.cfg.output_dir.clone();
        if let Some(a) = self.manifest.epochs[self.epoch].completed(name, &root) {
            info!("stage {name}: up to date");
            return Ok(a.clone());
        }
        info!("stage {name}: running");
        let dir = self.epoch_dir();
        let result = f(self, &dir);
        let record = match &result {
            Ok(a) => StageRecord {
                status: StageStatus::Completed,
                config_hash: self.hash.clone(),
                artifacts: a.clone(),
                cause: None,
            },
            Err(e) => StageRecord {
                status: StageStatus::Failed,
                config_hash: self.hash.clone(),
                artifacts: Artifacts::new(),
                cause: Some(e.to_string()),
            },
        };
        self.manifest.epochs[self.epoch].stages.insert(name.to_string(), record);
        self.manifest.save(&root)?;
        result.map_err(|e| Error::Stage {
            stage: name.to_string(),
            cause: Box::new(e),
        })
    }

    /// Normalised MFCCs of the unlabeled split.
    pub fn compute_features(&mut self) -> Result<Artifacts> {
        self.stage("features", |pl, dir| {
            let utts = load_audio_dir(&pl.cfg.corpus.unlabeled)?;
            let feats = utts
                .par_iter()
                .map(|u| Ok(utterance_normalize(&mfcc39(&u.wave, &pl.cfg.mfcc)?)?.into_frames()))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<String> = utts.into_iter().map(|u| u.id).collect();
            save_feature_dir(&dir.join("mfcc"), &ids, &feats, FeatureSource::Mfcc)?;
            Ok(artifacts([("dir", "mfcc".into())]))
        })
    }

    /// k-means on the MFCCs.
    pub fn cluster_iteration1(&mut self) -> Result<Artifacts> {
        self.compute_features()?;
        self.stage("iteration1.cluster", |pl, dir| {
            let it = &pl.cfg.iteration1;
            let (_, feats) = load_feature_dir(&pl.require("features", "dir")?)?;
            let sets = multi_resolution_targets(
                &feats,
                FeatureSource::Mfcc,
                &[it.clusters],
                it.subsample_fraction,
                it.kmeans_max_iters,
                derive_seed(pl.cfg.seed, &[1]),
            )?;
            let set = &sets[&it.clusters];
            info!("iteration 1: k={} inertia={:.4}", it.clusters, set.model.inertia().as_f64());
            create_dir(&dir.join("iter1"))?;
            let codebook = PathBuf::from(format!("iter1/codebook-k{}.pmsf", it.clusters));
            save_pmsf(&dir.join(&codebook), set.model.centroids(), FeatureSource::Mfcc)?;
            let labels = save_targets(dir, &format!("iter1/targets-k{}.txt", it.clusters), &set.targets)?;
            Ok(artifacts([("codebook", codebook), ("targets", labels)]))
        })
    }

    /// Pretraining of the top layer on the MFCC cluster labels.
    pub fn run_iteration1(&mut self) -> Result<PathBuf> {
        self.cluster_iteration1()?;
        let a = self.stage("iteration1.pretrain", |pl, dir| {
            let model = pl.cfg.iteration1_model();
            let utts = load_audio_dir(&pl.cfg.corpus.unlabeled)?;
            check_sample_rate(&model, &utts)?;
            let (ids, _) = load_feature_dir(&pl.require("features", "dir")?)?;
            check_ids("MFCC features", &utts.iter().map(|u| u.id.clone()).collect::<Vec<_>>(), &ids)?;
            let targets = TargetAssignment::from_text(&read_file(&pl.require("iteration1.cluster", "targets")?)?)?;
            if targets.labels.len() != utts.len() {
                return Err(Error::invalid("iteration-1 targets do not cover the corpus"));
            }
            let aligned = encoder_targets(&pl.cfg, &model, &utts, &targets.labels)?;
            let data: Vec<TrainUtterance<f64>> = utts
                .into_iter()
                .zip(aligned)
                .map(|(u, t)| TrainUtterance {
                    id: u.id,
                    wave: u.wave.samples().to_vec(),
                    targets: vec![t],
                })
                .collect();
            let params = Params::init(&model, derive_seed(pl.cfg.seed, &[1, 1]))?;
            let metrics = PathBuf::from("iter1/metrics.txt");
            let ssl = &pl.cfg.iteration1.ssl;
            let params = pretrain(&model, ssl, &data, params, pl.cfg.max_batch_seconds, &dir.join(&metrics), "iteration1")?;
            let ckpt = PathBuf::from("iter1/model.pmsc");
            Checkpoint::new(model, params)?.save(&dir.join(&ckpt))?;
            Ok(artifacts([("checkpoint", ckpt), ("metrics", metrics)]))
        })?;
        Ok(self.epoch_dir().join(&a["checkpoint"]))
    }

    /// Unmasked layer outputs of the iteration-1 model, one PMSF per
    /// utterance.
    pub fn extract_layer_features(&mut self) -> Result<PathBuf> {
        self.run_iteration1()?;
        let a = self.stage("iteration2.extract", |pl, dir| {
            let layer = pl.cfg.iteration2.extract_layer;
            let ckpt = Checkpoint::<f64>::load(&pl.require("iteration1.pretrain", "checkpoint")?)?;
            let utts = load_audio_dir(&pl.cfg.corpus.unlabeled)?;
            let feats = utts
                .par_iter()
                .map(|u| extract_layer(&ckpt.params, &ckpt.config, u.wave.samples(), layer))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<String> = utts.into_iter().map(|u| u.id).collect();
            let rel = PathBuf::from(format!("layer{layer}"));
            let tag = u8::try_from(layer).map_err(|_| Error::invalid(format!("layer {layer} does not fit a feature tag")))?;
            save_feature_dir(&dir.join(&rel), &ids, &feats, FeatureSource::EncoderLayer(tag))?;
            Ok(artifacts([("dir", rel)]))
        })?;
        Ok(self.epoch_dir().join(&a["dir"]))
    }

    /// Multi-resolution clustering of the extracted features.
    pub fn cluster_iteration2(&mut self) -> Result<Artifacts> {
        self.extract_layer_features()?;
        self.stage("iteration2.cluster", |pl, dir| {
            let it = &pl.cfg.iteration2;
            let (_, feats) = load_feature_dir(&pl.require("iteration2.extract", "dir")?)?;
            let tag = FeatureSource::EncoderLayer(it.extract_layer as u8);
            let sets = multi_resolution_targets(
                &feats,
                tag,
                &it.cluster_sizes,
                it.subsample_fraction,
                it.kmeans_max_iters,
                derive_seed(pl.cfg.seed, &[2]),
            )?;
            create_dir(&dir.join("iter2"))?;
            let mut out = Artifacts::new();
            for (k, set) in &sets {
                info!("iteration 2: k={k} inertia={:.4}", set.model.inertia().as_f64());
                let codebook = PathBuf::from(format!("iter2/codebook-k{k}.pmsf"));
                save_pmsf(&dir.join(&codebook), set.model.centroids(), tag)?;
                out.insert(format!("codebook.{k}"), codebook);
                out.insert(format!("targets.{k}"), save_targets(dir, &format!("iter2/targets-k{k}.txt"), &set.targets)?);
            }
            Ok(out)
        })
    }

    /// Pretraining with every supervised layer on its own target set.
    pub fn run_iteration2(&mut self) -> Result<PathBuf> {
        self.cluster_iteration2()?;
        let a = self.stage("iteration2.pretrain", |pl, dir| {
            let model = &pl.cfg.model;
            let utts = load_audio_dir(&pl.cfg.corpus.unlabeled)?;
            check_sample_rate(model, &utts)?;
            let mut per_layer = Vec::new();
            for &l in &model.supervised_layers {
                let k = model
                    .codebook_size(l)
                    .ok_or_else(|| Error::config(format!("layer {l} has no codebook")))?;
                let t = TargetAssignment::from_text(&read_file(&pl.require("iteration2.cluster", &format!("targets.{k}"))?)?)?;
                for (u, labels) in utts.iter().zip(&t.labels) {
                    if labels.len() != model.num_frames(u.wave.len()) {
                        return Err(Error::invalid(format!(
                            "targets of `{}` have {} frames, the encoder yields {}",
                            u.id,
                            labels.len(),
                            model.num_frames(u.wave.len())
                        )));
                    }
                }
                if t.labels.len() != utts.len() {
                    return Err(Error::invalid(format!("{k}-cluster targets do not cover the corpus")));
                }
                per_layer.push(t.labels);
            }
            let data: Vec<TrainUtterance<f64>> = utts
                .into_iter()
                .enumerate()
                .map(|(i, u)| TrainUtterance {
                    id: u.id,
                    wave: u.wave.samples().to_vec(),
                    targets: per_layer.iter().map(|t| t[i].clone()).collect(),
                })
                .collect();
            let params = if pl.cfg.iteration2.warm_start {
                let mut p = Checkpoint::<f64>::load(&pl.require("iteration1.pretrain", "checkpoint")?)?.params;
                p.reset_codebook_heads(model, derive_seed(pl.cfg.seed, &[2, 1]));
                p
            } else {
                Params::init(model, derive_seed(pl.cfg.seed, &[2, 1]))?
            };
            let metrics = PathBuf::from("iter2/metrics.txt");
            let ssl = &pl.cfg.iteration2.ssl;
            let params = pretrain(model, ssl, &data, params, pl.cfg.max_batch_seconds, &dir.join(&metrics), "iteration2")?;
            let ckpt = PathBuf::from("iter2/model.pmsc");
            Checkpoint::new(model.clone(), params)?.save(&dir.join(&ckpt))?;
            Ok(artifacts([("checkpoint", ckpt), ("metrics", metrics)]))
        })?;
        Ok(self.epoch_dir().join(&a["checkpoint"]))
    }

    /// CTC fine-tuning of the iteration-2 model plus the character LM.
    pub fn run_finetune(&mut self) -> Result<PathBuf> {
        self.run_iteration2()?;
        let a = self.stage("finetune", |pl, dir| pl.finetune(dir))?;
        Ok(self.epoch_dir().join(&a["checkpoint"]))
    }

    /// Greedy and beam hypotheses for the evaluation split.
    pub fn run_decode(&mut self) -> Result<Artifacts> {
        self.run_finetune()?;
        self.stage("decode", |pl, dir| pl.decode(dir))
    }

    /// Fine-tuning, decoding of the evaluation split and scoring.
    pub fn run_finetune_and_eval(&mut self) -> Result<EvalReport> {
        self.run_decode()?;
        let a = self.stage("eval", |pl, dir| pl.evaluate(dir))?;
        let text = read_file(&self.epoch_dir().join(&a["report"]))?;
        serde_json::from_str(&text).map_err(|e| Error::format("eval report", e.to_string()))
    }

    pub fn run_all(&mut self) -> Result<RunSummary> {
        let report = self.run_finetune_and_eval()?;
        Ok(RunSummary {
            epoch_dir: self.epoch_dir(),
            report,
        })
    }

    fn finetune(&self, dir: &Path) -> Result<Artifacts> {
        let ft = &self.cfg.finetune;
        let ckpt = Checkpoint::<f64>::load(&self.require("iteration2.pretrain", "checkpoint")?)?;
        let model = ckpt.config;
        let (utts, texts) = labeled_split(&self.cfg.corpus.labeled, &self.cfg.corpus.transcripts)?;
        check_sample_rate(&model, &utts)?;
        let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str))?;
        let mut params = ckpt.params;
        attach_ctc_head(&mut params, model.model_dim, vocab.len(), derive_seed(ft.seed, &[3]));
        let cache = ft.policy.freeze_waveform_encoder || ft.policy.train_head_only;
        let data = utts
            .par_iter()
            .zip(&texts)
            .map(|(u, text)| {
                let wave = u.wave.samples().to_vec();
                let conv_cache = if cache { Some(conv_output(&params, &model, &wave)?) } else { None };
                Ok(LabeledUtterance {
                    id: u.id.clone(),
                    labels: vocab.encode(text)?,
                    text: text.clone(),
                    wave,
                    conv_cache,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        create_dir(&dir.join("finetune"))?;
        let metrics = PathBuf::from("finetune/metrics.txt");
        let durations = data.iter().map(|u| u.wave.len() as f64 / model.sample_rate as f64).collect();
        let mut stream = BatchStream::new(durations, self.cfg.max_batch_seconds, derive_seed(ft.seed, &[0xba7c]));
        let mut adam = Adam::new(&ft.optim);
        remove_stale(&dir.join(&metrics))?;
        for step in 1..=ft.optim.steps {
            let (batch_id, idx) = stream.next_batch();
            let batch: Vec<&LabeledUtterance<f64>> = idx.iter().map(|&i| &data[i]).collect();
            let m = finetune_step(&mut params, &mut adam, &model, &ft.optim, &ft.policy, &batch, step, batch_id)?;
            let mut line = format!("{m} batch={batch_id}");
            if step % ft.eval_every == 0 || step == ft.optim.steps {
                let mut counts = EditCounts::default();
                for u in &data {
                    let hyp = vocab.decode(&greedy_decode(&utterance_ctc_logits(&params, &model, u)?));
                    counts.merge(&char_error_rate(&hyp, &u.text));
                }
                let cer = counts.rate().unwrap_or(f64::INFINITY);
                info!("finetune {m} train_cer={cer:.4}");
                let _ = write!(line, " train_cer={cer:.6}");
                if cer == 0.0 && ft.stop_at_zero_cer {
                    append_line(&dir.join(&metrics), &(line + " stop=zero_cer"))?;
                    break;
                }
            }
            append_line(&dir.join(&metrics), &line)?;
        }

        let ckpt_rel = PathBuf::from("finetune/model.pmsc");
        let out = Checkpoint::with_vocab(model, params, vocab.symbols().to_vec())?;
        out.save(&dir.join(&ckpt_rel))?;
        let mut a = artifacts([("checkpoint", ckpt_rel), ("metrics", metrics)]);
        if self.cfg.decode.lm_order > 0 {
            let sentences: Vec<Vec<String>> = texts.iter().map(|t| vocab.lm_tokens(t)).collect();
            let lm = NgramLm::train(&sentences, self.cfg.decode.lm_order, self.cfg.decode.lm_discount)?;
            let rel = PathBuf::from("finetune/lm.arpa");
            write_file(&dir.join(&rel), lm.to_arpa())?;
            a.insert("lm".into(), rel);
        }
        Ok(a)
    }

    fn eval_split(&self) -> (&Path, &Path) {
        match (&self.cfg.corpus.eval, &self.cfg.corpus.eval_transcripts) {
            (Some(a), Some(t)) => (a, t),
            _ => (&self.cfg.corpus.labeled, &self.cfg.corpus.transcripts),
        }
    }

    fn decode(&self, dir: &Path) -> Result<Artifacts> {
        let ckpt = Checkpoint::<f64>::load(&self.require("finetune", "checkpoint")?)?;
        let vocab = Vocabulary::new(
            ckpt.vocab
                .clone()
                .ok_or_else(|| Error::invalid("fine-tuned checkpoint has no vocabulary"))?,
        )?;
        let lm = match self.artifact("finetune", "lm") {
            Some(p) => Some(NgramLm::from_arpa(&read_file(&p)?)?),
            None => None,
        };
        let s = &self.cfg.decode;
        let dcfg = DecodeConfig {
            beam: s.beam,
            lm_weight: s.lm_weight,
            insertion_bonus: s.insertion_bonus,
            lm: lm.as_ref().map(|lm| BoundLm::new(lm, &vocab)),
        };
        let (audio, _) = self.eval_split();
        let utts = load_audio_dir(audio)?;
        check_sample_rate(&ckpt.config, &utts)?;
        let hyps = utts
            .par_iter()
            .map(|u| {
                let logits = crate::finetune::ctc_logits(&ckpt.params, &ckpt.config, u.wave.samples())?;
                let greedy = vocab.decode(&greedy_decode(&logits));
                let beam = vocab.decode(&beam_decode(&logits, &dcfg)?.symbols);
                Ok((greedy, beam))
            })
            .collect::<Result<Vec<_>>>()?;
        create_dir(&dir.join("decode"))?;
        let (mut g, mut b) = (String::new(), String::new());
        for (u, (gh, bh)) in utts.iter().zip(&hyps) {
            let _ = writeln!(g, "{}\t{gh}", u.id);
            let _ = writeln!(b, "{}\t{bh}", u.id);
        }
        let greedy = PathBuf::from("decode/greedy.tsv");
        let beam = PathBuf::from("decode/beam.tsv");
        write_file(&dir.join(&greedy), g)?;
        write_file(&dir.join(&beam), b)?;
        Ok(artifacts([("greedy", greedy), ("beam", beam)]))
    }

    fn evaluate(&self, dir: &Path) -> Result<Artifacts> {
        let (_, transcripts) = self.eval_split();
        let refs = read_transcripts(transcripts)?;
        let score = |key: &str| -> Result<DecoderScores> {
            let hyps = read_transcripts(&self.require("decode", key)?)?;
            let mut words = EditCounts::default();
            let mut chars = EditCounts::default();
            for (id, hyp) in &hyps {
                let r = refs
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("no reference for utterance `{id}`")))?;
                words.merge(&word_error_rate(hyp, r));
                chars.merge(&char_error_rate(hyp, r));
            }
            Ok(DecoderScores {
                wer: words.rate(),
                cer: chars.rate(),
                word_counts: words,
                char_counts: chars,
            })
        };
        let hyps = read_transcripts(&self.require("decode", "greedy")?)?;
        let report = EvalReport {
            utterances: hyps.len(),
            greedy: score("greedy")?,
            beam: score("beam")?,
        };
        info!(
            "eval: greedy WER {} CER {}; beam WER {} CER {}",
            report.greedy.word_counts, report.greedy.char_counts, report.beam.word_counts, report.beam.char_counts
        );
        create_dir(&dir.join("eval"))?;
        let rel = PathBuf::from("eval/report.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format("eval report", e.to_string()))?;
        write_file(&dir.join(&rel), text + "\n")?;
        Ok(artifacts([("report", rel)]))
    }
}
