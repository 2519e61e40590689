//! Waveform front end: autocorrelation pitch with a voiced/unvoiced decision
//! and frame RMS energy.

use super::FrameFeatures;
use crate::error::{Error, Result};

/// Frame and threshold parameters for the waveform path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fmin: f32,
    pub fmax: f32,
    /// Minimum normalized autocorrelation peak for a voiced decision.
    pub voicing_threshold: f32,
    /// Minimum frame RMS for a voiced decision.
    pub silence_rms: f32,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            frame_len: 1024,
            hop: 256,
            fmin: 60.0,
            fmax: 500.0,
            voicing_threshold: 0.45,
            silence_rms: 1e-3,
        }
    }
}

fn n_frames(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Autocorrelation pitch per frame with parabolic peak interpolation.
/// Returns (f0_hz, voiced) per frame; f0 is 0 on unvoiced frames.
pub fn estimate_f0(
    samples: &[f32],
    sample_rate: f32,
    cfg: &ExtractConfig,
) -> Result<(Vec<f32>, Vec<bool>)> {
    if !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax && cfg.fmax < sample_rate / 2.0) {
        return Err(Error::Config(format!(
            "invalid f0 band [{}, {}] for sample rate {}",
            cfg.fmin, cfg.fmax, sample_rate
        )));
    }
    if samples.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }

    let n = cfg.frame_len;
    let lag_min = ((sample_rate / cfg.fmax).floor() as usize).max(2);
    let lag_max = ((sample_rate / cfg.fmin).ceil() as usize).min(n - 2);
    if lag_min + 2 > lag_max {
        return Err(Error::Config(format!(
            "frame_len {} too short for f0 band [{}, {}]",
            n, cfg.fmin, cfg.fmax
        )));
    }

    let frames = n_frames(samples.len(), cfg.hop);
    let mut f0 = vec![0.0f32; frames];
    let mut voiced = vec![false; frames];
    let mut buf = vec![0.0f64; n];

    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|v| *v = 0.0);
        let avail = samples.len().saturating_sub(start).min(n);
        for i in 0..avail {
            buf[i] = samples[start + i] as f64;
        }

        let rms = (buf.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms < cfg.silence_rms as f64 {
            continue;
        }

        // Remove DC before correlating.
        let mean = buf.iter().sum::<f64>() / n as f64;
        for v in buf.iter_mut() {
            *v -= mean;
        }

        // Normalized cross-correlation over the lag band (plus one lag of
        // margin each side for the parabolic fit).
        let lo = lag_min - 1;
        let hi = (lag_max + 1).min(n - 1);
        let mut ncc = vec![0.0f64; hi - lo + 1];
        for (slot, k) in (lo..=hi).enumerate() {
            let m = n - k;
            let mut num = 0.0f64;
            let mut e0 = 0.0f64;
            let mut e1 = 0.0f64;
            for i in 0..m {
                num += buf[i] * buf[i + k];
                e0 += buf[i] * buf[i];
                e1 += buf[i + k] * buf[i + k];
            }
            let den = (e0 * e1).sqrt();
            ncc[slot] = if den > 1e-12 { num / den } else { 0.0 };
        }

        let at = |k: usize| ncc[k - lo];
        let peak = (lag_min..=lag_max)
            .map(at)
            .fold(f64::NEG_INFINITY, f64::max);
        if peak < cfg.voicing_threshold as f64 {
            continue;
        }

        // Octave guard: take the smallest local maximum close to the global
        // peak rather than the global peak itself.
        let mut best = None;
        for k in lag_min..=lag_max {
            let v = at(k);
            if v >= 0.95 * peak && v >= at(k - 1) && (k + 1 > lag_max || v >= at(k + 1)) {
                best = Some(k);
                break;
            }
        }
        let k = match best {
            Some(k) => k,
            None => continue,
        };

        // Parabolic interpolation around the integer peak.
        let (ym, y0, yp) = (at(k - 1), at(k), if k + 1 <= hi { at(k + 1) } else { at(k) });
        let denom = ym - 2.0 * y0 + yp;
        let delta = if denom.abs() > 1e-12 {
            (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let lag = k as f64 + delta;
        let hz = (sample_rate as f64 / lag).clamp(cfg.fmin as f64, cfg.fmax as f64);
        f0[t] = hz as f32;
        voiced[t] = true;
    }
    Ok((f0, voiced))
}

/// Root-mean-square of each frame window; the final frames are zero-padded.
pub fn frame_energy(samples: &[f32], frame_len: usize, hop: usize) -> Vec<f32> {
    assert!(frame_len >= 1 && hop >= 1);
    if samples.is_empty() {
        return Vec::new();
    }
    let frames = n_frames(samples.len(), hop);
    let mut out = vec![0.0f32; frames];
    for (t, slot) in out.iter_mut().enumerate() {
        let start = t * hop;
        let end = (start + frame_len).min(samples.len());
        let sum: f64 = samples[start..end].iter().map(|&v| (v as f64) * (v as f64)).sum();
        *slot = (sum / frame_len as f64).sqrt() as f32;
    }
    out
}

/// Combined waveform front end: f0/voicing plus energy on a shared framing.
pub fn frame_features(
    samples: &[f32],
    sample_rate: f32,
    cfg: &ExtractConfig,
) -> Result<FrameFeatures> {
    let (f0_hz, voiced) = estimate_f0(samples, sample_rate, cfg)?;
    let energy_rms = frame_energy(samples, cfg.frame_len, cfg.hop);
    debug_assert_eq!(f0_hz.len(), energy_rms.len());
    Ok(FrameFeatures {
        f0_hz,
        voiced,
        energy_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::TAU;

    fn sine(freq: f32, sr: f32, len: usize, amp: f32) -> Vec<f32> {
        (0..len).map(|i| amp * (TAU * freq * i as f32 / sr).sin()).collect()
    }

    #[test]
    fn sine_220_recovered_within_2hz_on_interior_frames() {
        let sr = 16000.0;
        let samples = sine(220.0, sr, 16000, 0.6);
        let cfg = ExtractConfig::default();
        let (f0, voiced) = estimate_f0(&samples, sr, &cfg).unwrap();
        // Interior frames: window fully inside the signal.
        let interior = (samples.len() - cfg.frame_len) / cfg.hop;
        assert!(interior > 20);
        for t in 0..=interior {
            assert!(voiced[t], "frame {t} should be voiced");
            assert!((f0[t] - 220.0).abs() < 2.0, "frame {t}: f0 {}", f0[t]);
        }
    }

    #[test]
    fn silence_is_unvoiced_and_empty_is_empty() {
        let cfg = ExtractConfig::default();
        let (f0, voiced) = estimate_f0(&vec![0.0; 8000], 16000.0, &cfg).unwrap();
        assert!(voiced.iter().all(|&v| !v));
        assert!(f0.iter().all(|&v| v == 0.0));

        let (f0, voiced) = estimate_f0(&[], 16000.0, &cfg).unwrap();
        assert!(f0.is_empty() && voiced.is_empty());
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let samples: Vec<f32> = (0..16000).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let (_, voiced) = estimate_f0(&samples, 16000.0, &ExtractConfig::default()).unwrap();
        let unvoiced = voiced.iter().filter(|&&v| !v).count();
        assert!(
            unvoiced as f32 >= 0.9 * voiced.len() as f32,
            "{unvoiced}/{} unvoiced",
            voiced.len()
        );
    }

    #[test]
    fn invalid_band_rejected() {
        let cfg = ExtractConfig {
            fmin: 500.0,
            fmax: 100.0,
            ..Default::default()
        };
        assert!(matches!(
            estimate_f0(&[0.0; 100], 16000.0, &cfg),
            Err(Error::Config(_))
        ));
        let cfg2 = ExtractConfig {
            fmax: 9000.0,
            ..Default::default()
        };
        assert!(matches!(
            estimate_f0(&[0.0; 100], 16000.0, &cfg2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frame_energy_cases() {
        assert!(frame_energy(&vec![0.0; 1000], 256, 128).iter().all(|&v| v == 0.0));

        // Constant signal: every full frame has rms == |c|.
        let c = -0.35f32;
        let e = frame_energy(&vec![c; 2048], 256, 256);
        for (t, &v) in e.iter().enumerate().take(2048 / 256 - 1) {
            assert!((v - c.abs()).abs() < 1e-6, "frame {t}: {v}");
        }

        // Sine of amplitude A over >= 5 periods: rms within 2% of A/sqrt(2).
        let a = 0.8f32;
        let s = sine(220.0, 16000.0, 8192, a);
        let e = frame_energy(&s, 1024, 1024);
        let want = a / 2.0f32.sqrt();
        for &v in &e[..(8192 / 1024) - 1] {
            assert!((v - want).abs() / want < 0.02, "{v} vs {want}");
        }
    }

    #[test]
    fn voicing_monotone_in_periodicity() {
        // Pure sine voiced everywhere interior, silence unvoiced everywhere.
        let sr = 16000.0;
        let cfg = ExtractConfig::default();
        let (_, v_sine) = estimate_f0(&sine(180.0, sr, 12000, 0.5), sr, &cfg).unwrap();
        let interior = (12000 - cfg.frame_len) / cfg.hop;
        assert!(v_sine[..=interior].iter().all(|&v| v));
        let (_, v_zero) = estimate_f0(&vec![0.0; 12000], sr, &cfg).unwrap();
        assert!(v_zero.iter().all(|&v| !v));
    }
}
