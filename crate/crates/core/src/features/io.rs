//! Audio readers/writers and the PMSF binary matrix format.
//!
//! PMSW raw audio: `"PMSW"`, u32 sample rate, u32 sample count (all
//! little-endian), then `f32` samples.
//!
//! PMSF matrix: `"PMSF"`, u32 rows, u32 cols, u8 source tag, then
//! row-major little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureSource, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const PMSW_MAGIC: &[u8; 4] = b"PMSW";
pub const PMSF_MAGIC: &[u8; 4] = b"PMSF";

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(what, format!("truncated input: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_pmsf<S: Scalar, W: Write>(w: &mut W, m: &Tensor<S>, source: FeatureSource) -> std::io::Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    w.write_all(PMSF_MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    w.write_all(&[source.tag()])?;
    for &v in m.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pmsf<S: Scalar, R: Read>(r: &mut R) -> Result<(Tensor<S>, FeatureSource)> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "PMSF")?;
    if &magic != PMSF_MAGIC {
        return Err(Error::format("PMSF", format!("bad magic {magic:?}")));
    }
    let rows = read_u32(r, "PMSF")? as usize;
    let cols = read_u32(r, "PMSF")? as usize;
    let mut tag = [0u8; 1];
    read_exact_or(r, &mut tag, "PMSF")?;
    if rows == 0 || cols == 0 {
        return Err(Error::format("PMSF", format!("empty matrix {rows}x{cols}")));
    }
    let mut bytes = vec![0u8; rows * cols * 8];
    read_exact_or(r, &mut bytes, "PMSF")?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((Tensor::new([rows, cols], data)?, FeatureSource::from_tag(tag[0])))
}

pub fn write_pmsw<S: Scalar, W: Write>(w: &mut W, wave: &Waveform<S>) -> std::io::Result<()> {
    w.write_all(PMSW_MAGIC)?;
    w.write_all(&wave.sample_rate().to_le_bytes())?;
    w.write_all(&(wave.len() as u32).to_le_bytes())?;
    for &s in wave.samples() {
        w.write_all(&(s.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pmsw<S: Scalar, R: Read>(r: &mut R) -> Result<Waveform<S>> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "PMSW")?;
    if &magic != PMSW_MAGIC {
        return Err(Error::format("PMSW", format!("bad magic {magic:?}")));
    }
    let sr = read_u32(r, "PMSW")?;
    let n = read_u32(r, "PMSW")? as usize;
    let mut bytes = vec![0u8; n * 4];
    read_exact_or(r, &mut bytes, "PMSW")?;
    let samples = bytes
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Waveform::new(samples, sr)
}

/// 16-bit PCM mono WAV.
pub fn write_wav16<S: Scalar>(path: &Path, wave: &Waveform<S>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| Error::format("WAV", format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in wave.samples() {
        let v = (s.as_f64() * i16::MAX as f64).round().clamp(i16::MIN as f64, i16::MAX as f64);
        w.write_sample(v as i16).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

fn read_wav<S: Scalar>(path: &Path) -> Result<Waveform<S>> {
    let to_err = |e: hound::Error| Error::format("WAV", format!("{}: {e}", path.display()));
    let reader = hound::WavReader::open(path).map_err(to_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            "WAV",
            format!("{}: expected mono audio, got {} channels", path.display(), spec.channels),
        ));
    }
    let samples: Vec<S> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| S::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(to_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| S::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()
            .map_err(to_err)?,
        (fmt, bits) => {
            return Err(Error::format(
                "WAV",
                format!("{}: unsupported sample format {fmt:?}/{bits}-bit", path.display()),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Reads `.wav` (16-bit PCM or 32-bit float, mono) or `.pmsw` audio.
pub fn read_audio<S: Scalar>(path: &Path) -> Result<Waveform<S>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => read_wav(path),
        Some("pmsw") => {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            read_pmsw(&mut BufReader::new(f))
        }
        _ => Err(Error::invalid(format!(
            "{}: unsupported audio extension (expected .wav or .pmsw)",
            path.display()
        ))),
    }
}

pub fn save_pmsf<S: Scalar>(path: &Path, m: &Tensor<S>, source: FeatureSource) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_pmsf(&mut w, m, source).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pmsf<S: Scalar>(path: &Path) -> Result<(Tensor<S>, FeatureSource)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pmsf(&mut BufReader::new(f))
}
