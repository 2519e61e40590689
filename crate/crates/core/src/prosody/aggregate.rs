//! Phone-level aggregation of frame features and corpus-global z-scoring.

use super::{AlignmentSegment, FrameFeatures, NormStats, ProsodyVector, RawPhoneProsody};
use crate::error::{Error, Result};

/// Segments must be non-empty, each start < end, contiguous (each segment
/// starts where the previous ended), and end within the frame count.
pub fn validate_alignment(segs: &[AlignmentSegment], t_frames: usize, utt: &str) -> Result<()> {
    if segs.is_empty() {
        return Err(Error::Alignment {
            utt: utt.to_string(),
            detail: "no segments".into(),
        });
    }
    let mut cursor = segs[0].start_frame;
    for (i, s) in segs.iter().enumerate() {
        if s.start_frame >= s.end_frame {
            return Err(Error::Alignment {
                utt: utt.to_string(),
                detail: format!("segment {i} has start {} >= end {}", s.start_frame, s.end_frame),
            });
        }
        if s.start_frame != cursor {
            return Err(Error::Alignment {
                utt: utt.to_string(),
                detail: format!("segment {i} starts at {} but previous ended at {cursor}", s.start_frame),
            });
        }
        cursor = s.end_frame;
    }
    if cursor > t_frames {
        return Err(Error::Alignment {
            utt: utt.to_string(),
            detail: format!("alignment ends at frame {cursor} but utterance has {t_frames}"),
        });
    }
    Ok(())
}

/// Per-phone raw features: mean log-f0 over voiced frames (0 when none),
/// hard voicing at fraction >= 0.5, frame-count duration, mean RMS energy.
pub fn aggregate_to_phone(
    frames: &FrameFeatures,
    alignment: &[AlignmentSegment],
    utt: &str,
) -> Result<Vec<RawPhoneProsody>> {
    validate_alignment(alignment, frames.len(), utt)?;
    let mut out = Vec::with_capacity(alignment.len());
    for seg in alignment {
        let range = seg.start_frame..seg.end_frame;
        let dur = seg.end_frame - seg.start_frame;
        let mut lf0_sum = 0.0f64;
        let mut n_voiced = 0usize;
        let mut energy_sum = 0.0f64;
        for t in range {
            if frames.voiced[t] {
                lf0_sum += (frames.f0_hz[t] as f64).ln();
                n_voiced += 1;
            }
            energy_sum += frames.energy_rms[t] as f64;
        }
        let voiced_fraction = n_voiced as f64 / dur as f64;
        out.push(RawPhoneProsody {
            phone: seg.phone,
            lf0_mean: if n_voiced > 0 {
                (lf0_sum / n_voiced as f64) as f32
            } else {
                0.0
            },
            vuv: if voiced_fraction >= 0.5 { 1.0 } else { 0.0 },
            duration_frames: dur,
            energy_mean: (energy_sum / dur as f64) as f32,
        });
    }
    Ok(out)
}

/// Corpus-global z-scoring. lf0 statistics come from voiced phones only;
/// unvoiced phones are pinned to lf0_z = 0. Duration is z-scored in the log
/// domain. Standard deviations are population (divide by N).
pub fn normalize_global(
    corpus: &[Vec<RawPhoneProsody>],
) -> Result<(NormStats, Vec<Vec<ProsodyVector>>)> {
    let mut lf0 = Vec::new();
    let mut dur = Vec::new();
    let mut energy = Vec::new();
    for utt in corpus {
        for p in utt {
            if p.vuv >= 0.5 {
                lf0.push(p.lf0_mean as f64);
            }
            dur.push((p.duration_frames as f64).ln());
            energy.push(p.energy_mean as f64);
        }
    }
    if lf0.len() < 2 {
        return Err(Error::DegenerateCorpus(format!(
            "need at least 2 voiced phones to normalize, found {}",
            lf0.len()
        )));
    }

    let stat = |xs: &[f64], name: &str| -> Result<(f64, f64)> {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-9 {
            return Err(Error::DegenerateCorpus(format!("zero variance in {name}")));
        }
        Ok((mean, std))
    };
    let (lf0_mean, lf0_std) = stat(&lf0, "lf0")?;
    let (dur_mean, dur_std) = stat(&dur, "duration")?;
    let (energy_mean, energy_std) = stat(&energy, "energy")?;
    let stats = NormStats {
        lf0_mean: lf0_mean as f32,
        lf0_std: lf0_std as f32,
        dur_mean: dur_mean as f32,
        dur_std: dur_std as f32,
        energy_mean: energy_mean as f32,
        energy_std: energy_std as f32,
    };

    let normalized = corpus
        .iter()
        .map(|utt| utt.iter().map(|p| stats.normalize(p)).collect())
        .collect();
    Ok((stats, normalized))
}
