//! Deterministic mel rendering. Each frame is a unit-RMS spectral pattern
//! scaled by the oracle energy: a pitch-band bump encoding f0 plus a
//! phone-specific formant envelope shifted and tilted by the speaker timbre.
//! `prosody::mel_frame_features` is its (approximate) inverse.

use super::synth::SynthWorld;
use crate::prosody::{AlignmentSegment, PhoneId, RawPhoneProsody};
use crate::tensor::Tensor;

/// Linear floor applied before the log; keeps the target dynamic range
/// compact. The STFT path keeps its own (lower) floor.
pub const RENDER_FLOOR: f32 = 1e-2;

const BUMP_WEIGHT: f32 = 0.9;
const ENV_WEIGHT: f32 = 1.0;

impl SynthWorld {
    /// Formant-style envelope over the channels above the pitch band, unit
    /// RMS over the full vector. Two humps, placed per phone, shifted by the
    /// speaker's formant offset and shaped by the tilt.
    pub fn phone_envelope(&self, phone: PhoneId, spk_global: usize) -> Vec<f32> {
        let timbre = self.timbre(spk_global);
        let band = self.band.channels;
        let width = self.n_mels - band;
        let h1 = band
            + 1
            + ((self.envelope_hash(phone, 1) as usize) % (width - 5))
            + timbre.formant_offset;
        let h2 = band
            + 3
            + ((self.envelope_hash(phone, 2) as usize) % (width - 4))
            + timbre.formant_offset;
        let h2 = h2.min(self.n_mels - 1);
        let mid = band as f32 + width as f32 / 2.0;
        let mut v = vec![0.0f32; self.n_mels];
        for (c, slot) in v.iter_mut().enumerate().skip(band) {
            let d1 = (c as f32 - h1 as f32) / 1.2;
            let d2 = (c as f32 - h2 as f32) / 1.6;
            let raw = (-0.5 * d1 * d1).exp() + 0.8 * (-0.5 * d2 * d2).exp();
            let tilt = (timbre.tilt * (c as f32 - mid) / width as f32).exp();
            *slot = raw * tilt;
        }
        let rms = (v.iter().map(|&x| x * x).sum::<f32>() / self.n_mels as f32).sqrt();
        for x in &mut v {
            *x /= rms;
        }
        v
    }

    /// Render one utterance's oracle prosody to log-mel frames and the
    /// matching phone alignment.
    pub fn render_mel(
        &self,
        spk_global: usize,
        oracle: &[RawPhoneProsody],
    ) -> (Tensor<f32>, Vec<AlignmentSegment>) {
        let t_total: usize = oracle.iter().map(|p| p.duration_frames).sum();
        let mut data = Vec::with_capacity(t_total * self.n_mels);
        let mut align = Vec::with_capacity(oracle.len());
        let mut cursor = 0usize;
        for p in oracle {
            let env = self.phone_envelope(p.phone, spk_global);
            let mut pattern = vec![0.0f32; self.n_mels];
            if p.vuv >= 0.5 {
                let bump = self.band.bump(self.n_mels, p.lf0_mean.exp());
                for ((slot, &b), &e) in pattern.iter_mut().zip(&bump).zip(&env) {
                    *slot = BUMP_WEIGHT * b + ENV_WEIGHT * e;
                }
            } else {
                pattern.copy_from_slice(&env);
            }
            let rms =
                (pattern.iter().map(|&x| x * x).sum::<f32>() / self.n_mels as f32).sqrt();
            for x in &mut pattern {
                *x = *x / rms * p.energy_mean;
            }
            let frame: Vec<f32> = pattern.iter().map(|&x| x.max(RENDER_FLOOR).ln()).collect();
            for _ in 0..p.duration_frames {
                data.extend_from_slice(&frame);
            }
            align.push(AlignmentSegment {
                phone: p.phone,
                start_frame: cursor,
                end_frame: cursor + p.duration_frames,
            });
            cursor += p.duration_frames;
        }
        let mel = Tensor::new(vec![t_total, self.n_mels], data).expect("render shape");
        (mel, align)
    }

    /// Harmonic waveform for the audio-emitting mode: a phase-continuous
    /// sine at the oracle f0 for voiced phones, seeded noise for unvoiced,
    /// `frames_per_phone * hop` samples per frame.
    pub fn render_waveform(
        &self,
        oracle: &[RawPhoneProsody],
        sample_rate: f32,
        hop: usize,
        noise_seed: u64,
    ) -> Vec<f32> {
        use super::synth::splitmix64;
        let total_frames: usize = oracle.iter().map(|p| p.duration_frames).sum();
        let mut out = Vec::with_capacity(total_frames * hop);
        let mut phase = 0.0f64;
        let mut noise_state = splitmix64(noise_seed);
        for p in oracle {
            let n = p.duration_frames * hop;
            if p.vuv >= 0.5 {
                let f0 = p.lf0_mean.exp() as f64;
                let step = std::f64::consts::TAU * f0 / sample_rate as f64;
                let amp = (p.energy_mean * std::f32::consts::SQRT_2).min(0.99) as f64;
                for _ in 0..n {
                    out.push((amp * phase.sin()) as f32);
                    phase += step;
                    if phase > std::f64::consts::TAU {
                        phase -= std::f64::consts::TAU;
                    }
                }
            } else {
                let amp = (p.energy_mean * 0.5).min(0.5);
                for _ in 0..n {
                    noise_state = splitmix64(noise_state);
                    let u = (noise_state >> 11) as f32 / (1u64 << 53) as f32;
                    out.push(amp * (2.0 * u - 1.0));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SyntheticSpec;
    use crate::prosody::{aggregate_to_phone, mel_frame_features};

    #[test]
    fn render_and_extract_roundtrip_per_phone() {
        let spec = SyntheticSpec::default();
        let w = SynthWorld::new(&spec).unwrap();
        let phones: Vec<PhoneId> = vec![0, 3, 12, 7, 9, 14, 2];
        let oracle = w.oracle_raw(0, 3, &phones).unwrap();
        let (mel, align) = w.render_mel(0, &oracle);
        assert_eq!(
            mel.rows(),
            oracle.iter().map(|p| p.duration_frames).sum::<usize>()
        );

        let feats = mel_frame_features(&mel, &w.band);
        let raw = aggregate_to_phone(&feats, &align, "rt").unwrap();
        for (got, want) in raw.iter().zip(&oracle) {
            assert_eq!(got.vuv, want.vuv, "phone {}", want.phone);
            assert_eq!(got.duration_frames, want.duration_frames);
            if want.vuv >= 0.5 {
                assert!(
                    (got.lf0_mean - want.lf0_mean).abs() < 0.05,
                    "lf0 {} vs {}",
                    got.lf0_mean,
                    want.lf0_mean
                );
            }
            let rel = (got.energy_mean - want.energy_mean).abs() / want.energy_mean;
            assert!(rel < 0.1, "energy {} vs {}", got.energy_mean, want.energy_mean);
        }
    }

    #[test]
    fn same_text_two_speakers_differ_per_frame() {
        let spec = SyntheticSpec::default();
        let w = SynthWorld::new(&spec).unwrap();
        let phones: Vec<PhoneId> = vec![1, 4, 8, 2];
        // Same style, same text: identical durations, different envelopes.
        let oa = w.oracle_raw(0, 0, &phones).unwrap();
        let ob = w.oracle_raw(1, 0, &phones).unwrap();
        let (ma, _) = w.render_mel(0, &oa);
        let (mb, _) = w.render_mel(1, &ob);
        assert_eq!(ma.rows(), mb.rows());
        for t in 0..ma.rows() {
            let d: f32 = ma
                .row_slice(t)
                .iter()
                .zip(mb.row_slice(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(d > 0.0, "frame {t} identical across speakers");
        }
    }

    #[test]
    fn waveform_f0_matches_oracle() {
        use crate::prosody::{estimate_f0, ExtractConfig};
        let spec = SyntheticSpec::default();
        let w = SynthWorld::new(&spec).unwrap();
        // One long voiced phone so interior frames are stable.
        let oracle = vec![RawPhoneProsody {
            phone: 0,
            lf0_mean: 210.0f32.ln(),
            vuv: 1.0,
            duration_frames: 40,
            energy_mean: 0.5,
        }];
        let wave = w.render_waveform(&oracle, 16000.0, 256, 1);
        assert_eq!(wave.len(), 40 * 256);
        let cfg = ExtractConfig::default();
        let (f0, voiced) = estimate_f0(&wave, 16000.0, &cfg).unwrap();
        let interior = (wave.len() - cfg.frame_len) / cfg.hop;
        for t in 0..=interior {
            assert!(voiced[t]);
            assert!((f0[t] - 210.0).abs() < 2.0, "frame {t}: {}", f0[t]);
        }
    }
}
