//! Recording ingestion and preprocessing.
//!
//! ```text
//! EDF ─ parse ─ select 19 channels ─ notch (native rate) ─ resample 200 Hz
//!     ─ 10 s windows ─ label by overlap ─ per-channel z-score ─ cache
//! ```
//!
//! Notch frequencies at or above the native Nyquist rate are skipped: the
//! resampler's anti-aliasing filter already removes them.

pub mod annotations;
pub mod dsp;
pub mod edf;
pub mod manifest;
pub mod synth;
pub mod windows;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use annotations::{parse_annotations_csv, AnnotationEvent};
pub use dsp::{notch_filter, resample};
pub use edf::{parse_edf, read_edf, write_edf, EdfFile, EdfSignal};
pub use manifest::{Manifest, RecordEntry, Split};
pub use windows::{load_cache, make_windows, write_cache, Window};

/// The 19 electrodes of the 10-20 montage, in canonical order.
pub const CHANNELS: [&str; 19] = [
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T3", "T4", "T5", "T6", "Fz", "Cz", "Pz",
];

pub const TARGET_FS: u32 = 200;
pub const WINDOW_SECONDS: u32 = 10;
pub const WINDOW_SAMPLES: usize = (TARGET_FS * WINDOW_SECONDS) as usize;
pub const NOTCH_FREQS: [f64; 2] = [60.0, 120.0];
pub const NOTCH_Q: f64 = 30.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: malformed EDF header: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },
    #[error("{path}: truncated data records: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: file declares no signals")]
    NoSignals { path: PathBuf },
    #[error("{path}: missing channels {missing:?}")]
    MissingChannels { path: PathBuf, missing: Vec<String> },
    #[error("{path}: selected channels have different sampling rates")]
    MixedRates { path: PathBuf },
    #[error("{path}:{line}: {msg}")]
    Annotation { path: PathBuf, line: usize, msg: String },
    #[error("{path}: not a window cache (bad magic)")]
    CacheMagic { path: PathBuf },
    #[error("{path}: unsupported window cache version {found}")]
    CacheVersion { path: PathBuf, found: u32 },
    #[error("{path}: window cache truncated in {what}")]
    CacheTruncated { path: PathBuf, what: String },
    #[error("{path}: invalid window cache: {msg}")]
    CacheInvalid { path: PathBuf, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("filter design: {0}")]
    Filter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    pub fn is_config(&self) -> bool {
        matches!(self, IngestError::Filter(_))
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// Selected channels of one recording in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub record_id: String,
    pub patient_id: String,
    pub fs: f64,
    pub channels: Vec<String>,
    /// One sample sequence per channel, all the same length.
    pub signals: Vec<Vec<f64>>,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.signals.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fs
    }
}

/// Canonical electrode name for an EDF label such as `EEG FP1-REF`, or
/// `None` when it is not one of [`CHANNELS`].
pub fn canonical_channel(label: &str) -> Option<&'static str> {
    let mut s = label.trim().to_ascii_uppercase();
    if let Some(rest) = s.strip_prefix("EEG ") {
        s = rest.trim().to_string();
    }
    for suffix in ["-REF", "-LE", "-AR", "-AVG"] {
        if let Some(rest) = s.strip_suffix(suffix) {
            s = rest.trim().to_string();
            break;
        }
    }
    // modern names of the temporal electrodes
    let s = match s.as_str() {
        "T7" => "T3".to_string(),
        "T8" => "T4".to_string(),
        "P7" => "T5".to_string(),
        "P8" => "T6".to_string(),
        _ => s,
    };
    CHANNELS.iter().copied().find(|c| c.to_ascii_uppercase() == s)
}

/// Picks the 19 montage channels (in canonical order) from a parsed file.
pub fn select_channels(edf: &EdfFile, path: &Path, record_id: &str, patient_id: &str) -> Result<RawRecording> {
    let mut found: Vec<Option<&EdfSignal>> = vec![None; CHANNELS.len()];
    for sig in &edf.signals {
        if let Some(c) = canonical_channel(&sig.label) {
            let i = CHANNELS.iter().position(|&x| x == c).unwrap();
            found[i].get_or_insert(sig);
        }
    }
    let missing: Vec<String> = found
        .iter()
        .zip(CHANNELS)
        .filter(|(f, _)| f.is_none())
        .map(|(_, c)| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingChannels {
            path: path.to_path_buf(),
            missing,
        });
    }
    let sigs: Vec<&EdfSignal> = found.into_iter().map(Option::unwrap).collect();
    let fs = sigs[0].sample_rate(edf.record_duration);
    let len = sigs[0].data.len();
    if sigs
        .iter()
        .any(|s| s.sample_rate(edf.record_duration) != fs || s.data.len() != len)
    {
        return Err(IngestError::MixedRates { path: path.to_path_buf() });
    }
    Ok(RawRecording {
        record_id: record_id.to_string(),
        patient_id: patient_id.to_string(),
        fs,
        channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
        signals: sigs.into_iter().map(|s| s.data.clone()).collect(),
    })
}

/// Notch at the native rate, then resample to [`TARGET_FS`].
pub fn condition(rec: &RawRecording) -> Result<RawRecording> {
    if rec.fs <= 0.0 || rec.fs.fract() != 0.0 {
        return Err(IngestError::Filter(format!("sampling rate {} Hz is not a positive integer", rec.fs)));
    }
    let fs_in = rec.fs as u32;
    let freqs: Vec<f64> = NOTCH_FREQS.iter().copied().filter(|&f| f < rec.fs / 2.0).collect();
    let signals = rec
        .signals
        .iter()
        .map(|x| {
            let filtered = notch_filter(x, rec.fs, &freqs, NOTCH_Q)?;
            resample(&filtered, fs_in, TARGET_FS)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawRecording {
        fs: TARGET_FS as f64,
        signals,
        ..rec.clone()
    })
}

/// Full chain for one manifest entry: parse, condition, window and label.
pub fn preprocess_record(entry: &RecordEntry) -> Result<Vec<Window>> {
    let edf = read_edf(&entry.raw_path)?;
    let raw = select_channels(&edf, &entry.raw_path, &entry.record_id, &entry.patient_id)?;
    let events = parse_annotations_csv(&entry.annotation_path)?;
    Ok(make_windows(&condition(&raw)?, &events))
}

/// Preprocesses every record into `<out_dir>/<record_id>.ewin` and returns
/// the manifest with cache paths filled in. Records run in parallel; each
/// cache is written atomically and depends only on its own inputs.
pub fn preprocess_manifest(manifest: &Manifest, out_dir: &Path) -> Result<Manifest> {
    manifest.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| IngestError::io(out_dir, e))?;
    let records = manifest
        .records
        .par_iter()
        .map(|entry| {
            let windows = preprocess_record(entry)?;
            let path = out_dir.join(format!("{}.ewin", entry.record_id));
            write_cache(&path, &windows)?;
            log::info!("{}: {} windows -> {}", entry.record_id, windows.len(), path.display());
            Ok(RecordEntry {
                cache_path: Some(path),
                ..entry.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest { records })
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_names() {
        assert_eq!(canonical_channel("EEG FP1-REF"), Some("Fp1"));
        assert_eq!(canonical_channel("eeg cz-le"), Some("Cz"));
        assert_eq!(canonical_channel("T8"), Some("T4"));
        assert_eq!(canonical_channel("EEG T3-REF"), Some("T3"));
        assert_eq!(canonical_channel("EKG1-REF"), None);
        assert_eq!(canonical_channel("EEG A1-REF"), None);
    }

    #[test]
    fn condition_resamples_and_keeps_length_formula() {
        let rec = RawRecording {
            record_id: "r".into(),
            patient_id: "p".into(),
            fs: 256.0,
            channels: vec!["Fp1".into()],
            signals: vec![(0..2560).map(|i| (i as f64 * 0.1).sin()).collect()],
        };
        let out = condition(&rec).unwrap();
        assert_eq!(out.fs, 200.0);
        assert_eq!(out.len(), 2000);
        let bad = RawRecording { fs: 250.5, ..rec };
        assert!(matches!(condition(&bad), Err(IngestError::Filter(_))));
    }
}
