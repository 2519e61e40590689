//! Mel-domain front end.
//!
//! The synthetic renderer encodes the fundamental as a Gaussian bump over a
//! reserved low-channel band, placed log-linearly in frequency. This module
//! owns that mapping and its inverse, so rendered and decoded spectrograms
//! can be read back into per-frame features without a waveform.

use super::FrameFeatures;
use crate::tensor::Tensor;

/// Reserved pitch band: channels [0, channels) of the mel, with the bump
/// center mapped log-linearly from [f_lo, f_hi] into coordinates
/// [1, channels-2] (one channel of margin keeps the bump inside the band).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchBand {
    pub channels: usize,
    pub f_lo: f32,
    pub f_hi: f32,
    /// Gaussian bump width in channel units.
    pub sigma: f32,
    /// Minimum in-band power share for a voiced decision.
    pub voiced_ratio: f32,
}

impl Default for PitchBand {
    fn default() -> Self {
        PitchBand {
            channels: 6,
            f_lo: 90.0,
            f_hi: 460.0,
            sigma: 0.8,
            voiced_ratio: 0.25,
        }
    }
}

impl PitchBand {
    /// Channel coordinate of a fundamental frequency.
    pub fn coord(&self, f0_hz: f32) -> f32 {
        let span = (self.f_hi / self.f_lo).ln();
        1.0 + (f0_hz / self.f_lo).ln() / span * (self.channels as f32 - 3.0)
    }

    /// Inverse of `coord`, clamped to the band.
    pub fn invert(&self, c: f32) -> f32 {
        let span = (self.f_hi / self.f_lo).ln();
        let lnf = self.f_lo.ln() + (c - 1.0) / (self.channels as f32 - 3.0) * span;
        lnf.exp().clamp(self.f_lo, self.f_hi)
    }

    /// Gaussian bump over the band channels for a given f0, zero elsewhere;
    /// length n_mels, normalized to unit RMS over the full vector.
    pub fn bump(&self, n_mels: usize, f0_hz: f32) -> Vec<f32> {
        let c = self.coord(f0_hz);
        let mut v = vec![0.0f32; n_mels];
        for (ch, slot) in v.iter_mut().enumerate().take(self.channels) {
            let d = (ch as f32 - c) / self.sigma;
            *slot = (-0.5 * d * d).exp();
        }
        let rms = (v.iter().map(|&x| x * x).sum::<f32>() / n_mels as f32).sqrt();
        if rms > 0.0 {
            for x in &mut v {
                *x /= rms;
            }
        }
        v
    }
}

/// Read per-frame features back out of a log-mel spectrogram [T, n_mels].
///
/// Per frame: exponentiate, subtract the channel minimum (removes the log
/// floor), take RMS as energy, decide voicing from the in-band power share,
/// and recover f0 from the in-band centroid.
pub fn mel_frame_features(mel: &Tensor<f32>, band: &PitchBand) -> FrameFeatures {
    let (t_frames, n_mels) = (mel.rows(), mel.cols());
    let b = band.channels.min(n_mels);
    let mut out = FrameFeatures {
        f0_hz: vec![0.0; t_frames],
        voiced: vec![false; t_frames],
        energy_rms: vec![0.0; t_frames],
    };
    let mut lin = vec![0.0f32; n_mels];
    for t in 0..t_frames {
        let row = mel.row_slice(t);
        let mut floor = f32::INFINITY;
        for (l, &v) in lin.iter_mut().zip(row) {
            *l = v.exp();
            floor = floor.min(*l);
        }
        let mut total_pow = 0.0f64;
        let mut band_pow = 0.0f64;
        for (ch, l) in lin.iter_mut().enumerate() {
            *l = (*l - floor).max(0.0);
            let p = (*l as f64) * (*l as f64);
            total_pow += p;
            if ch < b {
                band_pow += p;
            }
        }
        out.energy_rms[t] = (total_pow / n_mels as f64).sqrt() as f32;
        if total_pow < 1e-12 {
            continue;
        }
        let share = band_pow / total_pow;
        if share < band.voiced_ratio as f64 {
            continue;
        }
        let mut wsum = 0.0f64;
        let mut csum = 0.0f64;
        for (ch, &l) in lin.iter().enumerate().take(b) {
            wsum += l as f64;
            csum += l as f64 * ch as f64;
        }
        if wsum < 1e-12 {
            continue;
        }
        out.voiced[t] = true;
        out.f0_hz[t] = band.invert((csum / wsum) as f32);
    }
    out
}
