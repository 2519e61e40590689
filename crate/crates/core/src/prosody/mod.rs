//! Turning (signal, phone alignment) into per-frame features and phone-level
//! prosody vectors with corpus-global normalization.
//!
//! Two front ends produce the same `FrameFeatures`: the waveform path
//! (autocorrelation f0 + RMS energy) and the mel-domain path used on rendered
//! and decoded spectrograms.

mod aggregate;
mod extract;
mod files;
mod mel;
mod melfeat;

pub use aggregate::{aggregate_to_phone, normalize_global, validate_alignment};
pub use extract::{estimate_f0, frame_energy, frame_features, ExtractConfig};
pub use files::{
    read_alignment, read_norm_stats, read_prosody, write_alignment, write_norm_stats,
    write_prosody,
};
pub use mel::{mel_filter_centers, mel_spectrogram, MelConfig};
pub use melfeat::{mel_frame_features, PitchBand};

use crate::error::{Error, Result};

pub type PhoneId = u16;

/// Fixed feature order used everywhere: [lf0_z, vuv, dur_z, energy_z].
pub const PROSODY_DIM: usize = 4;

/// One aligned phone segment; frames are [start_frame, end_frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentSegment {
    pub phone: PhoneId,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Per-frame acoustic features. `f0_hz > 0` iff `voiced`.
#[derive(Debug, Clone, Default)]
pub struct FrameFeatures {
    pub f0_hz: Vec<f32>,
    pub voiced: Vec<bool>,
    pub energy_rms: Vec<f32>,
}

impl FrameFeatures {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }
}

/// Normalized per-phone prosody: z-scored log-f0 (0 when unvoiced), voicing
/// in [0,1], z-scored log-duration, z-scored energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsodyVector {
    pub lf0_z: f32,
    pub vuv: f32,
    pub dur_z: f32,
    pub energy_z: f32,
}

impl ProsodyVector {
    pub fn as_array(&self) -> [f32; PROSODY_DIM] {
        [self.lf0_z, self.vuv, self.dur_z, self.energy_z]
    }

    pub fn from_array(a: [f32; PROSODY_DIM]) -> Self {
        ProsodyVector {
            lf0_z: a[0],
            vuv: a[1],
            dur_z: a[2],
            energy_z: a[3],
        }
    }
}

/// Raw (pre-normalization) per-phone features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPhoneProsody {
    pub phone: PhoneId,
    /// Mean of ln(f0) over voiced frames; 0 when the phone has none.
    pub lf0_mean: f32,
    /// Hard voicing target: 1 when the voiced fraction reaches 0.5.
    pub vuv: f32,
    pub duration_frames: usize,
    pub energy_mean: f32,
}

/// Corpus-global feature statistics (population standard deviations).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub lf0_mean: f32,
    pub lf0_std: f32,
    pub dur_mean: f32,
    pub dur_std: f32,
    pub energy_mean: f32,
    pub energy_std: f32,
}

impl NormStats {
    pub fn normalize(&self, raw: &RawPhoneProsody) -> ProsodyVector {
        let lf0_z = if raw.vuv >= 0.5 {
            (raw.lf0_mean - self.lf0_mean) / self.lf0_std
        } else {
            0.0
        };
        ProsodyVector {
            lf0_z,
            vuv: raw.vuv,
            dur_z: ((raw.duration_frames as f32).ln() - self.dur_mean) / self.dur_std,
            energy_z: (raw.energy_mean - self.energy_mean) / self.energy_std,
        }
    }

    pub fn denorm_lf0(&self, lf0_z: f32) -> f32 {
        lf0_z * self.lf0_std + self.lf0_mean
    }

    /// Duration in (fractional) frames.
    pub fn denorm_dur(&self, dur_z: f32) -> f32 {
        (dur_z * self.dur_std + self.dur_mean).exp()
    }

    pub fn denorm_energy(&self, energy_z: f32) -> f32 {
        energy_z * self.energy_std + self.energy_mean
    }
}

/// Symbol table mapping phone symbols to ids, with a per-phone voicing class
/// used by the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    symbols: Vec<String>,
    voiced: Vec<bool>,
}

impl PhoneInventory {
    pub fn new(symbols: Vec<String>, voiced: Vec<bool>) -> Result<Self> {
        if symbols.len() != voiced.len() || symbols.is_empty() {
            return Err(Error::Config("phone inventory symbols/voicing length mismatch".into()));
        }
        Ok(PhoneInventory { symbols, voiced })
    }

    /// The default inventory: `p<N>` symbols, every id below `n_voiced` voiced.
    pub fn numbered(n_phones: usize, n_voiced: usize) -> Self {
        PhoneInventory {
            symbols: (0..n_phones).map(|i| format!("p{i}")).collect(),
            voiced: (0..n_phones).map(|i| i < n_voiced).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: PhoneId) -> &str {
        &self.symbols[id as usize]
    }

    pub fn id(&self, symbol: &str) -> Option<PhoneId> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i as PhoneId)
    }

    pub fn is_voiced(&self, id: PhoneId) -> bool {
        self.voiced[id as usize]
    }

    pub fn voiced_flags(&self) -> &[bool] {
        &self.voiced
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}
