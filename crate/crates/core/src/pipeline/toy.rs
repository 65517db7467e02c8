//! Synthetic two-tone "phoneme" corpus with known transcripts.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{write_wav16, Waveform};

pub const TOY_SYMBOLS: &[char] = &['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub unlabeled: usize,
    pub labeled: usize,
    pub sample_rate: u32,
    /// Seconds per letter.
    pub symbol_secs: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            unlabeled: 50,
            labeled: 10,
            sample_rate: 16_000,
            symbol_secs: 0.1,
            seed: 0,
        }
    }
}

/// Paths written by [`generate_toy_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub unlabeled: PathBuf,
    pub labeled: PathBuf,
    pub transcripts: PathBuf,
}

fn tone_pair(symbol: char) -> (f64, f64) {
    let i = TOY_SYMBOLS.iter().position(|&c| c == symbol).expect("toy symbol") as f64;
    (300.0 + 170.0 * i, 1500.0 + 310.0 * i)
}

/// Random text of 2-3 words, each 1-3 letters.
pub fn toy_text(rng: &mut ChaCha8Rng) -> String {
    let words = rng.gen_range(2..=3);
    (0..words)
        .map(|_| {
            let n = rng.gen_range(1..=3);
            (0..n).map(|_| TOY_SYMBOLS[rng.gen_range(0..TOY_SYMBOLS.len())]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders `text`: each letter a Hann-windowed two-tone burst, each space
/// a short near-silent gap, with light noise throughout.
pub fn render(text: &str, cfg: &ToyCorpusConfig, rng: &mut ChaCha8Rng) -> Result<Waveform<f64>> {
    let sr = cfg.sample_rate as f64;
    let seg = (cfg.symbol_secs * sr).round() as usize;
    let gap = seg / 2;
    let mut out = vec![0.0; gap];
    for c in text.chars() {
        if c == ' ' {
            out.extend(std::iter::repeat_n(0.0, gap));
            continue;
        }
        if !TOY_SYMBOLS.contains(&c) {
            return Err(Error::invalid(format!("toy corpus has no sound for {c:?}")));
        }
        let (f1, f2) = tone_pair(c);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for n in 0..seg {
            let t = n as f64 / sr;
            let env = 0.5 - 0.5 * (2.0 * PI * n as f64 / (seg - 1) as f64).cos();
            out.push(env * (0.35 * (2.0 * PI * f1 * t + phase).sin() + 0.25 * (2.0 * PI * f2 * t).sin()));
        }
    }
    out.extend(std::iter::repeat_n(0.0, gap));
    for x in out.iter_mut() {
        *x += rng.gen_range(-0.01..0.01);
    }
    Waveform::new(out, cfg.sample_rate)
}

fn write_split(dir: &Path, prefix: &str, n: usize, cfg: &ToyCorpusConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tsv = String::new();
    for i in 0..n {
        let id = format!("{prefix}{i:04}");
        let text = toy_text(rng);
        let wave = render(&text, cfg, rng)?;
        write_wav16(&dir.join(format!("{id}.wav")), &wave)?;
        let _ = writeln!(tsv, "{id}\t{text}");
    }
    Ok(tsv)
}

/// Writes `unlabeled/*.wav`, `labeled/*.wav` and
/// `labeled/transcripts.tsv` under `root`.
pub fn generate_toy_corpus(root: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    if cfg.unlabeled == 0 || cfg.labeled == 0 {
        return Err(Error::invalid("toy corpus needs at least one utterance per split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unlabeled = root.join("unlabeled");
    let labeled = root.join("labeled");
    write_split(&unlabeled, "u", cfg.unlabeled, cfg, &mut rng)?;
    let tsv = write_split(&labeled, "l", cfg.labeled, cfg, &mut rng)?;
    let transcripts = labeled.join("transcripts.tsv");
    std::fs::write(&transcripts, tsv).map_err(|e| Error::io(&transcripts, e))?;
    Ok(ToyCorpus {
        unlabeled,
        labeled,
        transcripts,
    })
}
