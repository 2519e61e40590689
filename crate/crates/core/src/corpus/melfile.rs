//! Binary mel and PCM container formats, little-endian with explicit
//! lengths.
//!
//! .mel: magic "MEL0", u32 T, u32 n_mels, then T*n_mels f32 values.
//! .pcm: magic "PCM0", u32 sample_rate, u32 n, then n f32 samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn integrity(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(integrity(
                self.path,
                self.pos as u64,
                format!("truncated: wanted {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn write_mel(path: &Path, mel: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + mel.len() * 4);
    out.extend_from_slice(b"MEL0");
    out.extend_from_slice(&(mel.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.cols() as u32).to_le_bytes());
    for &v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_mel(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic = r.take(4)?;
    if magic != b"MEL0" {
        return Err(integrity(path, 0, format!("bad magic {magic:02x?}")));
    }
    let t = r.u32()? as usize;
    let n_mels = r.u32()? as usize;
    let data = r.f32s(t * n_mels)?;
    if r.pos != buf.len() {
        return Err(integrity(path, r.pos as u64, "trailing bytes"));
    }
    Tensor::new(vec![t, n_mels], data)
        .map_err(|_| integrity(path, 4, format!("inconsistent dims {t}x{n_mels}")))
}

pub fn write_pcm(path: &Path, sample_rate: u32, samples: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + samples.len() * 4);
    out.extend_from_slice(b"PCM0");
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for &v in samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pcm(path: &Path) -> Result<(u32, Vec<f32>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic = r.take(4)?;
    if magic != b"PCM0" {
        return Err(integrity(path, 0, format!("bad magic {magic:02x?}")));
    }
    let sr = r.u32()?;
    let n = r.u32()? as usize;
    let samples = r.f32s(n)?;
    Ok((sr, samples))
}
