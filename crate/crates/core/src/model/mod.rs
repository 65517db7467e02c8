//! Convolutional waveform encoder, transformer encoder with
//! window-restricted heads, and cosine-similarity codebook heads.

mod checkpoint;
mod codebook;
mod config;
mod encoder;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use codebook::{codeword_distribution, head_logits, CodebookHead};
pub use config::{default_conv_spec, ConvLayer, ModelConfig, Window};
pub use encoder::{
    apply_mask, attention_heads, build_attention_masks, conv_encode, conv_features, encoder_block, encoder_forward,
    forward, forward_from_features,
    multi_scale_attention, sinusoidal_positions, window_mask, AttentionMaskPlan, EncoderOutputs,
};
pub use params::{parameter_shapes, Bound, Params};

#[cfg(test)]
mod tests;
