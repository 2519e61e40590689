//! Deterministic synthetic corpus with closed-form prosody and timbre
//! oracles, corpus directory I/O, checkpoint serialization, and config
//! parsing.

pub mod checkpoint;
pub mod config;
mod gen;
mod melfile;
mod render;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::Config;
pub use gen::{gen_corpus_dir, gen_dataset, load_dataset};
pub use melfile::{read_mel, read_pcm, write_mel, write_pcm};
pub use render::RENDER_FLOOR;
pub use synth::{splitmix64, CellLayout, SpeakerTimbre, StyleTemplate, SynthWorld, SyntheticSpec};

use crate::prosody::{AlignmentSegment, NormStats, PhoneId, PhoneInventory};
use crate::tensor::Tensor;

/// One corpus utterance: inputs, targets, and its alignment.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub spk: usize,
    pub sty: usize,
    pub phones: Vec<PhoneId>,
    /// Log-mel frames [T, n_mels].
    pub mel: Tensor<f32>,
    /// Normalized prosody targets [P, 4].
    pub prosody: Tensor<f32>,
    pub align: Vec<AlignmentSegment>,
}

impl Utterance {
    pub fn t_frames(&self) -> usize {
        self.mel.rows()
    }
}

/// An in-memory corpus: utterances plus the stats and world they were
/// generated with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub utts: Vec<Utterance>,
    pub stats: NormStats,
    pub inventory: PhoneInventory,
    pub spec: SyntheticSpec,
}

impl Dataset {
    pub fn world(&self) -> crate::error::Result<SynthWorld> {
        SynthWorld::new(&self.spec)
    }
}
