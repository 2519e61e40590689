//! Magnitude STFT followed by an HTK-style triangular mel filterbank and
//! natural-log compression.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f32,
    pub fmax: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: 1024,
            hop: 256,
            n_mels: 20,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

pub const LOG_FLOOR: f32 = 1e-5;

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

fn validate(cfg: &MelConfig, sample_rate: f32) -> Result<()> {
    if !cfg.n_fft.is_power_of_two() {
        return Err(Error::Config(format!("n_fft must be a power of two, got {}", cfg.n_fft)));
    }
    if cfg.n_mels < 4 {
        return Err(Error::Config(format!("n_mels must be >= 4, got {}", cfg.n_mels)));
    }
    if !(cfg.fmin >= 0.0 && cfg.fmin < cfg.fmax && cfg.fmax <= sample_rate / 2.0) {
        return Err(Error::Config(format!(
            "invalid mel band [{}, {}] for sample rate {}",
            cfg.fmin, cfg.fmax, sample_rate
        )));
    }
    if cfg.hop == 0 {
        return Err(Error::Config("hop must be >= 1".into()));
    }
    Ok(())
}

/// Center frequencies of the triangular filters, for tests and reports.
pub fn mel_filter_centers(cfg: &MelConfig, sample_rate: f32) -> Result<Vec<f32>> {
    validate(cfg, sample_rate)?;
    let mlo = hz_to_mel(cfg.fmin);
    let mhi = hz_to_mel(cfg.fmax);
    Ok((1..=cfg.n_mels)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f32 / (cfg.n_mels + 1) as f32))
        .collect())
}

/// [n_mels][n_bins] triangular weights on the FFT bin grid.
fn filterbank(cfg: &MelConfig, sample_rate: f32) -> Vec<Vec<f32>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mlo = hz_to_mel(cfg.fmin);
    let mhi = hz_to_mel(cfg.fmax);
    let points: Vec<f32> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f32 / (cfg.n_mels + 1) as f32))
        .collect();
    let bin_hz = sample_rate / cfg.n_fft as f32;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f32 * bin_hz;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram [T, n_mels] with T = 1 + floor((len - n_fft)/hop);
/// frames are Hann-windowed, no padding. Signals shorter than one window are
/// rejected.
pub fn mel_spectrogram(samples: &[f32], sample_rate: f32, cfg: &MelConfig) -> Result<Tensor<f32>> {
    validate(cfg, sample_rate)?;
    if samples.len() < cfg.n_fft {
        return Err(Error::Input(format!(
            "signal of {} samples is shorter than one analysis window ({})",
            samples.len(),
            cfg.n_fft
        )));
    }
    let t_frames = 1 + (samples.len() - cfg.n_fft) / cfg.hop;
    let n_bins = cfg.n_fft / 2 + 1;
    let bank = filterbank(cfg, sample_rate);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let window: Vec<f32> = (0..cfg.n_fft)
        .map(|i| 0.5 * (1.0 - (std::f32::consts::TAU * i as f32 / cfg.n_fft as f32).cos()))
        .collect();

    let mut out = vec![0.0f32; t_frames * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
    let mut mags = vec![0.0f32; n_bins];
    for t in 0..t_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, m) in mags.iter_mut().enumerate() {
            *m = buf[b].norm();
        }
        for (m, filt) in bank.iter().enumerate() {
            let acc: f32 = filt.iter().zip(&mags).map(|(&w, &v)| w * v).sum();
            out[t * cfg.n_mels + m] = acc.max(LOG_FLOOR).ln();
        }
    }
    Tensor::new(vec![t_frames, cfg.n_mels], out)
}
