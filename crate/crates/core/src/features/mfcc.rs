use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, FeatureSource, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const NUM_CEPSTRA: usize = 13;
pub const MFCC_DIM: usize = 3 * NUM_CEPSTRA;

/// MFCC front-end recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub pre_emphasis: f64,
    pub num_mel_filters: usize,
    /// Half-width of the delta regression window.
    pub delta_window: usize,
    pub low_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            pre_emphasis: 0.97,
            num_mel_filters: 26,
            delta_window: 2,
            low_hz: 0.0,
            high_hz: None,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_rate(&self) -> f64 {
        1000.0 / self.hop_ms
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the `fft_size / 2 + 1` power-spectrum bins.
fn mel_filterbank(n_filters: usize, fft_size: usize, sample_rate: f64, low: f64, high: f64) -> Vec<Vec<f64>> {
    let n_bins = fft_size / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(low), hz_to_mel(high));
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / fft_size as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `n_out` coefficients.
fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// Appends first- and second-order regression deltas (edge frames replicated).
pub fn append_deltas<S: Scalar>(cepstra: &Tensor<S>, half_width: usize) -> Result<Tensor<S>> {
    if cepstra.ndim() != 2 {
        return Err(Error::invalid("deltas need a T x C matrix"));
    }
    if half_width == 0 {
        return Err(Error::invalid("delta window half-width must be >= 1"));
    }
    let deltas = |m: &Tensor<S>| -> Tensor<S> {
        let (t_len, c) = (m.rows(), m.cols());
        let denom = S::lit(2.0 * (1..=half_width).map(|n| (n * n) as f64).sum::<f64>());
        let mut out = Tensor::zeros([t_len, c]);
        for t in 0..t_len {
            for n in 1..=half_width {
                let fwd = m.row((t + n).min(t_len - 1));
                let back = m.row(t.saturating_sub(n));
                let w = S::from_usize_lossy(n);
                for (o, (&a, &b)) in out.row_mut(t).iter_mut().zip(fwd.iter().zip(back)) {
                    *o = *o + w * (a - b);
                }
            }
            for o in out.row_mut(t) {
                *o = *o / denom;
            }
        }
        out
    };
    let d1 = deltas(cepstra);
    let d2 = deltas(&d1);
    let c = cepstra.cols();
    let mut out = Vec::with_capacity(cepstra.len() * 3);
    for t in 0..cepstra.rows() {
        out.extend_from_slice(cepstra.row(t));
        out.extend_from_slice(d1.row(t));
        out.extend_from_slice(d2.row(t));
    }
    Tensor::new([cepstra.rows(), 3 * c], out)
}

/// 13 cepstra (C0 as energy) plus deltas and delta-deltas per frame.
pub fn mfcc39<S: Scalar>(w: &Waveform<S>, cfg: &MfccConfig) -> Result<FeatureSequence<S>> {
    if cfg.window_ms < cfg.hop_ms || cfg.hop_ms <= 0.0 {
        return Err(Error::invalid(format!(
            "MFCC window ({} ms) must be >= hop ({} ms) > 0",
            cfg.window_ms, cfg.hop_ms
        )));
    }
    let sr = w.sample_rate();
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    if hop == 0 || win == 0 {
        return Err(Error::invalid("MFCC window and hop must span at least one sample"));
    }
    let n = w.len();
    if n < win {
        return Err(Error::invalid(format!(
            "waveform of {n} samples is shorter than one {win}-sample window"
        )));
    }
    let t_len = 1 + (n - win) / hop;

    let x: Vec<f64> = w.samples().iter().map(|s| s.as_f64()).collect();
    let mut emph = Vec::with_capacity(n);
    emph.push(x[0]);
    for i in 1..n {
        emph.push(x[i] - cfg.pre_emphasis * x[i - 1]);
    }

    let fft_size = win.next_power_of_two();
    let high = cfg.high_hz.unwrap_or(sr as f64 / 2.0);
    let bank = mel_filterbank(cfg.num_mel_filters, fft_size, sr as f64, cfg.low_hz, high);
    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win as f64 - 1.0).max(1.0)).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);

    let mut ceps = Vec::with_capacity(t_len * NUM_CEPSTRA);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..t_len {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(emph[start + i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / fft_size as f64)
            .collect();
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(f64::EPSILON).ln()
            })
            .collect();
        ceps.extend(dct2(&log_mel, NUM_CEPSTRA).into_iter().map(S::lit));
    }
    let cepstra = Tensor::new([t_len, NUM_CEPSTRA], ceps)?;
    let frames = append_deltas(&cepstra, cfg.delta_window)?;
    FeatureSequence::new(frames, cfg.frame_rate(), FeatureSource::Mfcc)
}

/// Per-dimension zero mean / unit variance (population variance, floor 1e-8).
pub fn utterance_normalize<S: Scalar>(f: &FeatureSequence<S>) -> Result<FeatureSequence<S>> {
    let m = f.frames();
    let (t_len, d) = (m.rows(), m.cols());
    if t_len < 2 {
        return Err(Error::invalid("utterance normalisation needs at least two frames"));
    }
    let n = S::from_usize_lossy(t_len);
    let mut out = m.clone();
    for j in 0..d {
        let mean = (0..t_len).map(|t| m.at(t, j)).sum::<S>() / n;
        let var = (0..t_len).map(|t| (m.at(t, j) - mean).powi(2)).sum::<S>() / n;
        let std = var.max(S::lit(1e-8)).sqrt();
        for t in 0..t_len {
            out.row_mut(t)[j] = (m.at(t, j) - mean) / std;
        }
    }
    FeatureSequence::new(out, f.frame_rate(), f.source())
}
