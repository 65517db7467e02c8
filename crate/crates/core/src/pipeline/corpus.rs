use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{read_audio, Waveform};

/// An audio file of a corpus directory, keyed by file stem.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform<f64>,
}

/// `(id, path)` of every `.wav` / `.pmsw` file of `dir`, sorted by id.
pub fn list_audio_dir(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let audio = matches!(path.extension().and_then(|e| e.to_str()), Some("wav" | "pmsw"));
        if audio {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid(format!("{}: file name is not UTF-8", path.display())))?
                .to_string();
            files.push((id, path));
        }
    }
    if files.is_empty() {
        return Err(Error::invalid(format!("{}: no .wav or .pmsw files", dir.display())));
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!("duplicate utterance id `{}` in {}", w[0].0, dir.display())));
    }
    Ok(files)
}

/// Loads every `.wav` / `.pmsw` file of `dir`, sorted by id.
pub fn load_audio_dir(dir: &Path) -> Result<Vec<Utterance>> {
    list_audio_dir(dir)?
        .into_par_iter()
        .map(|(id, path)| Ok(Utterance { id, wave: read_audio(&path)? }))
        .collect()
}

/// Parses `utt_id<TAB>text` lines.
pub fn parse_transcripts(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("transcripts", format!("line {}: missing TAB", n + 1)))?;
        if out.insert(id.to_string(), t.to_string()).is_some() {
            return Err(Error::format("transcripts", format!("line {}: duplicate id `{id}`", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_transcripts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts(&text)
}

/// Checks that the audio files of `dir` and the transcript ids agree one
/// to one.
pub fn check_transcribed(dir: &Path, transcripts: &Path) -> Result<()> {
    let texts = read_transcripts(transcripts)?;
    let files = list_audio_dir(dir)?;
    for (id, _) in &files {
        if !texts.contains_key(id) {
            return Err(Error::invalid(format!("no transcript for utterance `{id}` in {}", transcripts.display())));
        }
    }
    if let Some(id) = texts.keys().find(|id| files.binary_search_by(|(f, _)| f.cmp(id)).is_err()) {
        return Err(Error::invalid(format!("transcript `{id}` has no audio file in {}", dir.display())));
    }
    Ok(())
}

/// Groups consecutive items so that each group's summed duration stays
/// within `cap` seconds; an item longer than `cap` forms its own group.
pub fn duration_batches(durations: &[f64], cap: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut total = 0.0;
    for (i, &d) in durations.iter().enumerate() {
        if !current.is_empty() && total + d > cap {
            out.push(std::mem::take(&mut current));
            total = 0.0;
        }
        current.push(i);
        total += d;
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Maps frame labels between frame grids by nearest frame centre.
///
/// Source frame `i` covers samples `[i * src_hop, i * src_hop + src_win)`,
/// target frame `t` covers `[t * dst_hop, (t + 1) * dst_hop)`.
pub fn align_labels(labels: &[u32], src_hop: usize, src_win: usize, dst_hop: usize, dst_len: usize) -> Result<Vec<u32>> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot align an empty label sequence"));
    }
    let last = labels.len() - 1;
    Ok((0..dst_len)
        .map(|t| {
            let centre = (t as f64 + 0.5) * dst_hop as f64;
            let i = ((centre - src_win as f64 / 2.0) / src_hop as f64).round();
            labels[(i.max(0.0) as usize).min(last)]
        })
        .collect())
}
