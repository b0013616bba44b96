//! Per-utterance acoustic feature matrix with its metadata.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// `l×h_audio` feature rows plus transcript/duration metadata. When the
/// features come from the synthetic generator, `token_spans` records which
/// frame range each transcript token occupies.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub features: Tensor,
    pub duration_s: f64,
    pub transcript: String,
    pub token_spans: Option<Vec<(usize, usize)>>,
}

impl FrameSequence {
    pub fn frame_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}
