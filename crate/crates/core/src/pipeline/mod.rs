//! The two-iteration recipe end to end: MFCC clustering, iteration-1
//! pretraining, layer extraction and multi-resolution re-clustering,
//! iteration-2 pretraining, CTC fine-tuning, decoding and scoring.

mod config;
mod corpus;
mod manifest;
mod run;
mod toy;

pub use config::{CorpusConfig, DecodeSettings, ExperimentConfig, FinetuneConfig, Iteration1Config, Iteration2Config};
pub use corpus::{
    align_labels, check_transcribed, duration_batches, list_audio_dir, load_audio_dir, parse_transcripts, read_transcripts, Utterance};
pub use manifest::{Epoch, RunManifest, StageRecord, StageStatus, MANIFEST_FILE};
pub use run::{extract_layer, read_metrics, Artifacts, DecoderScores, EvalReport, Pipeline, RunSummary, STAGES};
pub use toy::{generate_toy_corpus, render, toy_text, ToyCorpus, ToyCorpusConfig, TOY_SYMBOLS};
