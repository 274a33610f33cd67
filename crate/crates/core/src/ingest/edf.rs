//! European Data Format reader and writer.
//!
//! Layout: a 256-byte fixed ASCII header, 256 bytes of per-signal ASCII
//! fields, then data records of 16-bit little-endian samples, each record
//! holding `samples_per_record[s]` samples of every signal `s` in turn.

use std::path::Path;

use super::{select_channels, IngestError, RawRecording, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignal {
    pub label: String,
    pub physical_dim: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub samples_per_record: usize,
    /// Samples in physical units.
    pub data: Vec<f64>,
}

impl EdfSignal {
    pub fn sample_rate(&self, record_duration: f64) -> f64 {
        self.samples_per_record as f64 / record_duration
    }

    /// Physical value of one digital step.
    pub fn resolution(&self) -> f64 {
        (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min) as f64
    }

    fn to_physical(&self, d: i16) -> f64 {
        (d as f64 - self.digital_min as f64) * self.resolution() + self.physical_min
    }

    fn to_digital(&self, v: f64) -> i16 {
        let d = ((v - self.physical_min) / self.resolution()).round() + self.digital_min as f64;
        d.clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub n_records: usize,
    /// Seconds per data record.
    pub record_duration: f64,
    pub signals: Vec<EdfSignal>,
}

struct Fields<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Fields<'a> {
    fn text(&mut self, width: usize) -> Result<String> {
        let end = self.pos + width;
        let raw = self.bytes.get(self.pos..end).ok_or_else(|| malformed(self.path, "header shorter than declared"))?;
        self.pos = end;
        if !raw.is_ascii() {
            return Err(malformed(self.path, "non-ASCII header field"));
        }
        Ok(String::from_utf8_lossy(raw).trim().to_string())
    }

    fn number<N: std::str::FromStr>(&mut self, width: usize, what: &str) -> Result<N> {
        let s = self.text(width)?;
        s.parse()
            .map_err(|_| malformed(self.path, &format!("{what} is not a number: {s:?}")))
    }

    fn per_signal<N>(&mut self, ns: usize, mut f: impl FnMut(&mut Self) -> Result<N>) -> Result<Vec<N>> {
        (0..ns).map(|_| f(self)).collect()
    }
}

fn malformed(path: &Path, msg: &str) -> IngestError {
    IngestError::MalformedHeader {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Parses an EDF file held in memory; `path` is used for error messages.
pub fn parse_edf_bytes(bytes: &[u8], path: &Path) -> Result<EdfFile> {
    if bytes.len() < 256 {
        return Err(malformed(path, "file shorter than the 256-byte fixed header"));
    }
    let mut f = Fields { bytes, pos: 0, path };
    let version = f.text(8)?;
    if version != "0" {
        return Err(malformed(path, &format!("version field {version:?} is not \"0\"")));
    }
    let patient = f.text(80)?;
    let recording = f.text(80)?;
    let start_date = f.text(8)?;
    let start_time = f.text(8)?;
    let header_bytes: usize = f.number(8, "header byte count")?;
    f.text(44)?;
    let n_records: i64 = f.number(8, "number of data records")?;
    let record_duration: f64 = f.number(8, "record duration")?;
    let ns: usize = f.number(4, "number of signals")?;
    if ns == 0 {
        return Err(IngestError::NoSignals { path: path.to_path_buf() });
    }
    if header_bytes != 256 * (ns + 1) {
        return Err(malformed(path, &format!("header size {header_bytes} does not match {ns} signals")));
    }
    if bytes.len() < header_bytes {
        return Err(malformed(path, "signal headers are cut short"));
    }
    if !(record_duration > 0.0) {
        return Err(malformed(path, "record duration must be positive"));
    }
    let labels = f.per_signal(ns, |f| f.text(16))?;
    f.per_signal(ns, |f| f.text(80))?;
    let dims = f.per_signal(ns, |f| f.text(8))?;
    let pmin: Vec<f64> = f.per_signal(ns, |f| f.number(8, "physical minimum"))?;
    let pmax: Vec<f64> = f.per_signal(ns, |f| f.number(8, "physical maximum"))?;
    let dmin: Vec<i32> = f.per_signal(ns, |f| f.number(8, "digital minimum"))?;
    let dmax: Vec<i32> = f.per_signal(ns, |f| f.number(8, "digital maximum"))?;
    f.per_signal(ns, |f| f.text(80))?;
    let spr: Vec<usize> = f.per_signal(ns, |f| f.number(8, "samples per record"))?;
    for s in 0..ns {
        if dmax[s] <= dmin[s] || pmax[s] == pmin[s] {
            return Err(malformed(path, &format!("signal {:?} has a degenerate range", labels[s])));
        }
    }

    let record_bytes = 2 * spr.iter().sum::<usize>() as u64;
    let available = (bytes.len() - header_bytes) as u64;
    let n_records = if n_records < 0 {
        // unknown count: take every complete record present
        (available / record_bytes.max(1)) as usize
    } else {
        n_records as usize
    };
    let expected = n_records as u64 * record_bytes;
    if available < expected {
        return Err(IngestError::Truncated {
            path: path.to_path_buf(),
            expected: header_bytes as u64 + expected,
            found: bytes.len() as u64,
        });
    }

    let mut signals: Vec<EdfSignal> = (0..ns)
        .map(|s| EdfSignal {
            label: labels[s].clone(),
            physical_dim: dims[s].clone(),
            physical_min: pmin[s],
            physical_max: pmax[s],
            digital_min: dmin[s],
            digital_max: dmax[s],
            samples_per_record: spr[s],
            data: Vec::with_capacity(n_records * spr[s]),
        })
        .collect();
    let mut pos = header_bytes;
    for _ in 0..n_records {
        for sig in &mut signals {
            for _ in 0..sig.samples_per_record {
                let d = i16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
                pos += 2;
                let v = sig.to_physical(d);
                sig.data.push(v);
            }
        }
    }
    Ok(EdfFile {
        patient,
        recording,
        start_date,
        start_time,
        n_records,
        record_duration,
        signals,
    })
}

/// Reads every signal of an EDF file.
pub fn read_edf(path: &Path) -> Result<EdfFile> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    parse_edf_bytes(&bytes, path)
}

/// Reads an EDF file and selects the 19 montage channels. The record id is
/// the file stem and the patient id the first word of the patient field.
pub fn parse_edf(path: &Path) -> Result<RawRecording> {
    let edf = read_edf(path)?;
    let record_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let patient_id = edf.patient.split_whitespace().next().unwrap_or("X").to_string();
    select_channels(&edf, path, &record_id, &patient_id)
}

fn put(out: &mut Vec<u8>, s: &str, width: usize) {
    let mut b: Vec<u8> = s.bytes().filter(u8::is_ascii).take(width).collect();
    b.resize(width, b' ');
    out.extend_from_slice(&b);
}

/// Shortest decimal form of `v` that fits an 8-character field.
fn fit8(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 8 {
        return s;
    }
    for prec in (0..8).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

/// Serializes `edf`, quantizing each signal to its digital range. Every
/// signal must hold `n_records * samples_per_record` samples.
pub fn edf_bytes(edf: &EdfFile) -> Vec<u8> {
    let ns = edf.signals.len();
    let mut out = Vec::new();
    put(&mut out, "0", 8);
    put(&mut out, &edf.patient, 80);
    put(&mut out, &edf.recording, 80);
    put(&mut out, &edf.start_date, 8);
    put(&mut out, &edf.start_time, 8);
    put(&mut out, &(256 * (ns + 1)).to_string(), 8);
    put(&mut out, "", 44);
    put(&mut out, &edf.n_records.to_string(), 8);
    put(&mut out, &fit8(edf.record_duration), 8);
    put(&mut out, &ns.to_string(), 4);
    let sig = &edf.signals;
    sig.iter().for_each(|s| put(&mut out, &s.label, 16));
    sig.iter().for_each(|_| put(&mut out, "", 80));
    sig.iter().for_each(|s| put(&mut out, &s.physical_dim, 8));
    sig.iter().for_each(|s| put(&mut out, &fit8(s.physical_min), 8));
    sig.iter().for_each(|s| put(&mut out, &fit8(s.physical_max), 8));
    sig.iter().for_each(|s| put(&mut out, &s.digital_min.to_string(), 8));
    sig.iter().for_each(|s| put(&mut out, &s.digital_max.to_string(), 8));
    sig.iter().for_each(|_| put(&mut out, "", 80));
    sig.iter().for_each(|s| put(&mut out, &s.samples_per_record.to_string(), 8));
    sig.iter().for_each(|_| put(&mut out, "", 32));
    for r in 0..edf.n_records {
        for s in sig {
            let chunk = &s.data[r * s.samples_per_record..(r + 1) * s.samples_per_record];
            for &v in chunk {
                out.extend_from_slice(&s.to_digital(v).to_le_bytes());
            }
        }
    }
    out
}

/// Writes `edf` atomically.
pub fn write_edf(path: &Path, edf: &EdfFile) -> Result<()> {
    super::write_atomic(path, &edf_bytes(edf)).map_err(|e| IngestError::io(path, e))
}
