use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Attention window of the two restricted heads of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Window {
    /// `w` frames on either side of the query (inclusive of the query).
    Frames(usize),
    Unbounded,
}

impl Window {
    /// True when the window covers every position of a length-`t` sequence.
    pub fn covers(self, t: usize) -> bool {
        match self {
            Window::Unbounded => true,
            Window::Frames(w) => w + 1 >= t,
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Frames(w) => write!(f, "{w}"),
            Window::Unbounded => f.write_str("unbounded"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Frames(u64),
    Word(String),
}

impl Serialize for Window {
    fn serialize<Z: Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        match self {
            Window::Frames(w) => WindowRepr::Frames(*w as u64),
            Window::Unbounded => WindowRepr::Word("unbounded".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match WindowRepr::deserialize(d)? {
            WindowRepr::Frames(w) => Ok(Window::Frames(w as usize)),
            WindowRepr::Word(s) if s == "unbounded" => Ok(Window::Unbounded),
            WindowRepr::Word(s) => Err(serde::de::Error::custom(format!(
                "window must be a frame count or \"unbounded\", got `{s}`"
            ))),
        }
    }
}

/// One strided convolution of the waveform encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Network architecture plus the codebook-head layout.
///
/// Layers are numbered from 1 (bottom) to `num_layers` (top).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub conv_spec: Vec<ConvLayer>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Per-layer window of heads H-2 (history) and H-1 (future). `None`
    /// means no head is restricted in any layer.
    #[serde(default)]
    pub window_schedule: Option<Vec<Window>>,
    pub supervised_layers: Vec<usize>,
    pub codebook_sizes: Vec<usize>,
    pub codebook_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_sample_rate() -> u32 {
    16_000
}

fn default_temperature() -> f64 {
    0.1
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, 4 heads, D = 64, 20 ms frames.
    pub fn desk() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            ffn_mult: 4,
            conv_spec: default_conv_spec(),
            activation: Activation::Gelu,
            sample_rate: 16_000,
            window_schedule: Some(vec![Window::Frames(4), Window::Frames(4), Window::Frames(8), Window::Frames(8)]),
            supervised_layers: vec![2, 4],
            codebook_sizes: vec![50, 100],
            codebook_dim: 32,
            temperature: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn stride_product(&self) -> usize {
        self.conv_spec.iter().map(|c| c.stride).product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stride_product() as f64
    }

    /// Encoder frames produced from `samples` waveform samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        self.conv_spec.iter().fold(samples, |n, c| n / c.stride)
    }

    /// Shortest waveform that yields one frame.
    pub fn min_samples(&self) -> usize {
        self.stride_product()
    }

    pub fn window(&self, layer: usize) -> Option<Window> {
        self.window_schedule.as_ref().map(|w| w[layer - 1])
    }

    /// Codebook size of supervised layer `layer`, if it is supervised.
    pub fn codebook_size(&self, layer: usize) -> Option<usize> {
        self.supervised_layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.codebook_sizes[i])
    }

    /// Same architecture, supervising only the top layer with one codebook.
    pub fn with_single_head(&self, size: usize) -> Self {
        Self {
            supervised_layers: vec![self.num_layers],
            codebook_sizes: vec![size],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.num_heads == 0 || self.model_dim == 0 {
            return bad("num_heads and model_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.conv_spec.is_empty() {
            return bad("conv_spec is empty".into());
        }
        for (i, c) in self.conv_spec.iter().enumerate() {
            if c.channels == 0 || c.stride == 0 || c.kernel < c.stride {
                return bad(format!(
                    "conv layer {i}: need channels > 0 and kernel {} >= stride {} > 0",
                    c.kernel, c.stride
                ));
            }
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if let Some(ws) = &self.window_schedule {
            if ws.len() != self.num_layers {
                return bad(format!(
                    "window_schedule has {} entries for {} layers",
                    ws.len(),
                    self.num_layers
                ));
            }
            if ws.windows(2).any(|p| p[0] > p[1]) {
                return bad(format!(
                    "window_schedule must be non-decreasing from bottom to top, got [{}]",
                    join(ws)
                ));
            }
            if self.num_heads < 2 && self.num_layers > 0 {
                return bad("restricted attention needs at least 2 heads".into());
            }
        }
        if self.num_layers == 0 {
            if !self.supervised_layers.is_empty() {
                return bad("a 0-layer model has no layer to supervise".into());
            }
        } else if self.supervised_layers.last() != Some(&self.num_layers) {
            return bad(format!(
                "supervised_layers [{}] must end with the top layer {}",
                join(&self.supervised_layers),
                self.num_layers
            ));
        }
        if self.supervised_layers.windows(2).any(|p| p[0] >= p[1]) || self.supervised_layers.first() == Some(&0) {
            return bad(format!(
                "supervised_layers [{}] must be strictly increasing layer numbers in 1..={}",
                join(&self.supervised_layers),
                self.num_layers
            ));
        }
        if self.codebook_sizes.len() != self.supervised_layers.len() {
            return bad(format!(
                "{} codebook sizes for {} supervised layers",
                self.codebook_sizes.len(),
                self.supervised_layers.len()
            ));
        }
        if self.codebook_sizes.iter().any(|&c| c < 2) {
            return bad("every codebook needs at least 2 codewords".into());
        }
        if self.codebook_sizes.windows(2).any(|p| p[0] > p[1]) {
            return bad(format!(
                "codebook sizes [{}] must be non-decreasing from lower to higher supervised layers",
                join(&self.codebook_sizes)
            ));
        }
        if self.codebook_dim == 0 {
            return bad("codebook_dim must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Seven layers with stride product 320: 50 frames/s at 16 kHz.
pub fn default_conv_spec() -> Vec<ConvLayer> {
    [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)]
        .into_iter()
        .map(|(kernel, stride)| ConvLayer {
            channels: 64,
            kernel,
            stride,
        })
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}
