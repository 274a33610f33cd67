//! Fixed-length labeled windows and their binary cache.
//!
//! Cache layout (little-endian): magic `EWIN`, version u32, count u64, then
//! per window: label u8, record-id length u32 and UTF-8 bytes, start time
//! f64, and `19 × 2000` f32 samples in channel-major order.

use std::path::Path;

use super::annotations::EventLabel;
use super::{AnnotationEvent, IngestError, RawRecording, Result, CHANNELS, WINDOW_SAMPLES};

pub const CACHE_MAGIC: &[u8; 4] = b"EWIN";
pub const CACHE_VERSION: u32 = 1;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `19 × 2000` samples, channel-major, z-scored per channel.
    pub data: Vec<f32>,
    pub label: u8,
    pub record_id: String,
    /// Offset of the first sample in the record, seconds.
    pub start: f64,
}

impl Window {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * WINDOW_SAMPLES..(c + 1) * WINDOW_SAMPLES]
    }
}

/// Whether a seizure event overlaps `[lo, hi)` with positive measure.
pub fn overlaps(events: &[AnnotationEvent], lo: f64, hi: f64) -> bool {
    events
        .iter()
        .any(|e| e.label == EventLabel::Seizure && e.start < hi && e.stop > lo)
}

/// `(x − mean) / (std + ε)` with the population standard deviation.
pub fn zscore(x: &[f64]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + NORM_EPS;
    x.iter().map(|v| ((v - mean) / denom) as f32).collect()
}

/// Cuts a 200 Hz recording into non-overlapping 10 s windows. The trailing
/// partial window is dropped; window `k` spans `[10k, 10(k+1))` seconds and
/// is labeled 1 when any seizure event overlaps that span.
pub fn make_windows(rec: &RawRecording, events: &[AnnotationEvent]) -> Vec<Window> {
    let n = rec.len() / WINDOW_SAMPLES;
    let secs = WINDOW_SAMPLES as f64 / rec.fs;
    (0..n)
        .map(|k| {
            let lo = k as f64 * secs;
            let mut data = Vec::with_capacity(rec.signals.len() * WINDOW_SAMPLES);
            for ch in &rec.signals {
                data.extend(zscore(&ch[k * WINDOW_SAMPLES..(k + 1) * WINDOW_SAMPLES]));
            }
            Window {
                data,
                label: u8::from(overlaps(events, lo, lo + secs)),
                record_id: rec.record_id.clone(),
                start: lo,
            }
        })
        .collect()
}

pub fn cache_bytes(windows: &[Window]) -> Vec<u8> {
    let per = CHANNELS.len() * WINDOW_SAMPLES;
    let mut out = Vec::with_capacity(16 + windows.len() * (per * 4 + 32));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(windows.len() as u64).to_le_bytes());
    for w in windows {
        assert_eq!(w.data.len(), per, "window {} has {} samples", w.record_id, w.data.len());
        out.push(w.label);
        out.extend_from_slice(&(w.record_id.len() as u32).to_le_bytes());
        out.extend_from_slice(w.record_id.as_bytes());
        out.extend_from_slice(&w.start.to_le_bytes());
        for v in &w.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes the cache atomically.
pub fn write_cache(path: &Path, windows: &[Window]) -> Result<()> {
    super::write_atomic(path, &cache_bytes(windows)).map_err(|e| IngestError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(IngestError::CacheTruncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}

pub fn parse_cache(bytes: &[u8], path: &Path) -> Result<Vec<Window>> {
    let mut r = Reader { bytes, pos: 0, path };
    if bytes.len() >= 4 && &bytes[..4] != CACHE_MAGIC {
        return Err(IngestError::CacheMagic { path: path.to_path_buf() });
    }
    r.take(4, "magic")?;
    let version = u32::from_le_bytes(r.array("version")?);
    if version != CACHE_VERSION {
        return Err(IngestError::CacheVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let count = u64::from_le_bytes(r.array("count")?);
    let per = CHANNELS.len() * WINDOW_SAMPLES;
    let mut out = Vec::new();
    for i in 0..count {
        let what = format!("window {i}");
        let label = r.take(1, &what)?[0];
        let id_len = u32::from_le_bytes(r.array(&what)?) as usize;
        let id = r.take(id_len, &what)?;
        let record_id = String::from_utf8(id.to_vec()).map_err(|_| IngestError::CacheInvalid {
            path: path.to_path_buf(),
            msg: format!("{what}: record id is not UTF-8"),
        })?;
        let start = f64::from_le_bytes(r.array(&what)?);
        let raw = r.take(per * 4, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if label > 1 {
            return Err(IngestError::CacheInvalid {
                path: path.to_path_buf(),
                msg: format!("{what}: label {label} is not 0 or 1"),
            });
        }
        out.push(Window {
            data,
            label,
            record_id,
            start,
        });
    }
    if r.pos != bytes.len() {
        return Err(IngestError::CacheInvalid {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn load_cache(path: &Path) -> Result<Vec<Window>> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    parse_cache(&bytes, path)
}
