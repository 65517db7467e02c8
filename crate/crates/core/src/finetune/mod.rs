//! CTC fine-tuning, decoding and error-rate evaluation.

pub mod ctc;
mod decode;
mod lm;
mod train;
mod wer;

pub use ctc::{ctc_loss, ctc_loss_and_grad, min_frames, BLANK};
pub use decode::{beam_decode, greedy_decode, BoundLm, DecodeConfig, Hypothesis, Vocabulary, SPACE_TOKEN};
pub use lm::{NgramLm, BOS, EOS, UNK};
pub use train::{
    attach_ctc_head, conv_output, ctc_logits, ctc_logits_on, finetune_step, utterance_ctc_logits, FinetuneMetrics,
    FreezePolicy, LabeledUtterance,
};
pub use wer::{align, char_error_rate, word_error_rate, EditCounts};
