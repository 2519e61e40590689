//! The network: text encoder, speaker/style conditioning, prosody bottleneck
//! with an SE block, prosody aggregation, and an autoregressive mel decoder
//! with a stop token.

mod forward;
mod params;

pub use forward::{
    forward_train, layers, DecodeOut, Forward, ForwardTargets, ProsodyPrediction,
};
pub use params::{
    AttnP, ConvP, DecBlockP, EncBlockP, LayerNormP, LinearP, ModelParams, ParamGroup, SeP,
};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub type SpeakerId = usize;
pub type StyleId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProsodyFeed {
    /// Feed the bottleneck prediction to the aggregation CNN (joint training).
    Predicted,
    /// Feed ground-truth prosody; the prediction then only drives the
    /// prosody loss.
    GroundTruth,
}

impl ProsodyFeed {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "predicted" => Some(ProsodyFeed::Predicted),
            "ground_truth" => Some(ProsodyFeed::GroundTruth),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProsodyFeed::Predicted => "predicted",
            ProsodyFeed::GroundTruth => "ground_truth",
        }
    }
}

/// Network hyperparameters. Desk-scale defaults; paper-scale values are
/// reachable purely through configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_phones: usize,
    pub n_speakers: usize,
    pub n_styles: usize,
    pub d_model: usize,
    pub d_spk_sty_embed: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub n_heads: usize,
    /// Always 4: [lf0_z, vuv, dur_z, energy_z].
    pub d_prosody: usize,
    pub bottleneck_cnn_channels: usize,
    pub se_reduction: usize,
    pub agg_cnn_channels: usize,
    pub n_mels: usize,
    pub max_decoder_frames: usize,
    pub prosody_feed: ProsodyFeed,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_phones: 16,
            n_speakers: 4,
            n_styles: 4,
            d_model: 64,
            d_spk_sty_embed: 16,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            n_heads: 2,
            d_prosody: 4,
            bottleneck_cnn_channels: 32,
            se_reduction: 4,
            agg_cnn_channels: 64,
            n_mels: 20,
            max_decoder_frames: 200,
            prosody_feed: ProsodyFeed::Predicted,
        }
    }
}

impl ModelConfig {
    /// Smallest usable configuration, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            n_phones: 16,
            n_speakers: 2,
            n_styles: 2,
            d_model: 16,
            d_spk_sty_embed: 4,
            n_enc_blocks: 1,
            n_dec_blocks: 1,
            n_heads: 2,
            d_prosody: 4,
            bottleneck_cnn_channels: 8,
            se_reduction: 4,
            agg_cnn_channels: 8,
            n_mels: 8,
            max_decoder_frames: 40,
            prosody_feed: ProsodyFeed::Predicted,
        }
    }

    /// Feed-forward width inside attention blocks.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_prosody != 4 {
            return Err(Error::Config(format!(
                "d_prosody is fixed at 4 (the lf0/vuv/dur/energy bottleneck), got {}",
                self.d_prosody
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.bottleneck_cnn_channels % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "bottleneck channels {} not divisible by SE reduction {}",
                self.bottleneck_cnn_channels, self.se_reduction
            )));
        }
        let dims = [
            self.n_phones,
            self.n_speakers,
            self.n_styles,
            self.d_model,
            self.d_spk_sty_embed,
            self.n_enc_blocks,
            self.n_dec_blocks,
            self.n_heads,
            self.bottleneck_cnn_channels,
            self.se_reduction,
            self.agg_cnn_channels,
            self.n_mels,
            self.max_decoder_frames,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Processing stage of the per-phone encoder matrix. Transitions only move
/// forward through this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TextOnly,
    SpeakerStyleCombined,
    FullyAggregated,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::TextOnly => "text_only",
            Stage::SpeakerStyleCombined => "speaker_style_combined",
            Stage::FullyAggregated => "fully_aggregated",
        }
    }
}

/// Per-phone hidden matrix [P, d_model] at a known conditioning stage.
#[derive(Debug, Clone, Copy)]
pub struct EncoderState {
    pub stage: Stage,
    pub hidden: Var,
    pub phones: usize,
}

impl EncoderState {
    pub fn expect_stage(&self, want: Stage, op: &str) -> Result<()> {
        if self.stage != want {
            return Err(Error::Contract(format!(
                "{op} requires encoder state at stage {}, got {}",
                want.name(),
                self.stage.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopKind {
    /// Training targets: 0 everywhere except the final frame.
    Labels,
    /// Inference: per-frame stop probabilities.
    Probs,
}

/// Frame-by-channel acoustic target or output with its stop track.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub frames: Tensor<f32>,
    pub stop: Vec<f32>,
    pub stop_kind: StopKind,
    /// Autoregressive decoding hit the frame cap before the stop token fired.
    pub truncated: bool,
}

impl MelSpectrogram {
    /// Training-side constructor: stop labels are 0 except the final frame.
    pub fn training_target(frames: Tensor<f32>) -> Self {
        let t = frames.rows();
        let mut stop = vec![0.0; t];
        stop[t - 1] = 1.0;
        MelSpectrogram {
            frames,
            stop,
            stop_kind: StopKind::Labels,
            truncated: false,
        }
    }

    pub fn t_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}
