//! Text file formats for alignments, prosody vectors, and normalization
//! stats. Every file starts with a typed header line.

use std::fs;
use std::path::Path;

use super::{AlignmentSegment, NormStats, PhoneInventory, ProsodyVector};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

// ── Alignment files ─────────────────────────────────────────────────
// #utt <id> frames=<T>
// <phone_symbol> <start_frame> <end_frame>

pub fn write_alignment(
    path: &Path,
    utt_id: &str,
    t_frames: usize,
    segs: &[AlignmentSegment],
    inventory: &PhoneInventory,
) -> Result<()> {
    let mut out = format!("#utt {utt_id} frames={t_frames}\n");
    for s in segs {
        out.push_str(&format!(
            "{} {} {}\n",
            inventory.symbol(s.phone),
            s.start_frame,
            s.end_frame
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_alignment(
    path: &Path,
    inventory: &PhoneInventory,
) -> Result<(String, usize, Vec<AlignmentSegment>)> {
    let lines = read_lines(path)?;
    let header = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#utt") {
        return Err(parse_err(path, 1, "expected '#utt' header"));
    }
    let utt_id = parts
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing utterance id"))?
        .to_string();
    let frames_kv = parts
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing frames=<T>"))?;
    let t_frames: usize = frames_kv
        .strip_prefix("frames=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(path, 1, format!("bad frames field '{frames_kv}'")))?;

    let mut segs = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split_whitespace();
        let sym = f.next().ok_or_else(|| parse_err(path, i + 1, "missing phone symbol"))?;
        let phone = inventory
            .id(sym)
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown phone symbol '{sym}'")))?;
        let start: usize = f
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(path, i + 1, "bad start frame"))?;
        let end: usize = f
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(path, i + 1, "bad end frame"))?;
        segs.push(AlignmentSegment {
            phone,
            start_frame: start,
            end_frame: end,
        });
    }
    Ok((utt_id, t_frames, segs))
}

// ── Prosody files ───────────────────────────────────────────────────
// #utt <id> norm=<global|raw>
// <phone_symbol> <lf0> <vuv> <dur> <energy>

/// `exact` switches from the 6-decimal corpus format to shortest-roundtrip
/// floats so a dumped prediction can be fed back bit-exactly.
pub fn write_prosody(
    path: &Path,
    utt_id: &str,
    normalized: bool,
    phones: &[super::PhoneId],
    vectors: &[ProsodyVector],
    inventory: &PhoneInventory,
    exact: bool,
) -> Result<()> {
    if phones.len() != vectors.len() {
        return Err(Error::Input(format!(
            "prosody write: {} phones vs {} vectors",
            phones.len(),
            vectors.len()
        )));
    }
    let norm = if normalized { "global" } else { "raw" };
    let mut out = format!("#utt {utt_id} norm={norm}\n");
    for (p, v) in phones.iter().zip(vectors) {
        let sym = inventory.symbol(*p);
        let a = v.as_array();
        if exact {
            out.push_str(&format!("{} {} {} {} {}\n", sym, a[0], a[1], a[2], a[3]));
        } else {
            out.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                sym, a[0], a[1], a[2], a[3]
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_prosody(
    path: &Path,
    inventory: &PhoneInventory,
) -> Result<(String, bool, Vec<(super::PhoneId, ProsodyVector)>)> {
    let lines = read_lines(path)?;
    let header = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#utt") {
        return Err(parse_err(path, 1, "expected '#utt' header"));
    }
    let utt_id = parts
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing utterance id"))?
        .to_string();
    let norm_kv = parts
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing norm=<global|raw>"))?;
    let normalized = match norm_kv.strip_prefix("norm=") {
        Some("global") => true,
        Some("raw") => false,
        _ => return Err(parse_err(path, 1, format!("bad norm field '{norm_kv}'"))),
    };

    let mut rows = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split_whitespace();
        let sym = f.next().ok_or_else(|| parse_err(path, i + 1, "missing phone symbol"))?;
        let phone = inventory
            .id(sym)
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown phone symbol '{sym}'")))?;
        let mut vals = [0.0f32; 4];
        for slot in &mut vals {
            *slot = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(path, i + 1, "expected 4 feature values"))?;
        }
        rows.push((phone, ProsodyVector::from_array(vals)));
    }
    Ok((utt_id, normalized, rows))
}

// ── Normalization stats ─────────────────────────────────────────────
// #normstats lf0_mean lf0_std dur_mean dur_std energy_mean energy_std
// <6 values on one line>

pub fn write_norm_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let out = format!(
        "#normstats lf0_mean lf0_std dur_mean dur_std energy_mean energy_std\n{} {} {} {} {} {}\n",
        stats.lf0_mean, stats.lf0_std, stats.dur_mean, stats.dur_std, stats.energy_mean,
        stats.energy_std
    );
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_norm_stats(path: &Path) -> Result<NormStats> {
    let lines = read_lines(path)?;
    if lines.first().map(|l| l.starts_with("#normstats")) != Some(true) {
        return Err(parse_err(path, 1, "expected '#normstats' header"));
    }
    let values = lines
        .get(1)
        .ok_or_else(|| parse_err(path, 2, "missing values line"))?;
    let vals: Vec<f32> = values
        .split_whitespace()
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, 2, format!("bad float: {e}")))?;
    if vals.len() != 6 {
        return Err(parse_err(path, 2, format!("expected 6 values, got {}", vals.len())));
    }
    Ok(NormStats {
        lf0_mean: vals[0],
        lf0_std: vals[1],
        dur_mean: vals[2],
        dur_std: vals[3],
        energy_mean: vals[4],
        energy_std: vals[5],
    })
}
