//! Synthetic recordings for desk-scale runs.
//!
//! Background activity is a sum of sines with amplitudes falling as
//! `1/√f` (roughly pink), shared across channels with per-channel weights
//! as volume conduction would, plus white noise and 60/120 Hz line
//! interference. Seizures add a 15–25 Hz burst several
//! times the background amplitude, strongest on a per-patient focus.
//! Events start and stop within a second of a 10 s boundary, so every
//! labeled window is dominated by seizure activity.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::to_csv_bi;
use super::edf::{EdfFile, EdfSignal};
use super::{write_edf, AnnotationEvent, IngestError, Manifest, RecordEntry, Result, Split, CHANNELS, WINDOW_SECONDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_patients: usize,
    pub test_patients: usize,
    pub records_per_patient: usize,
    /// Whole multiple of 10 s.
    pub record_seconds: u32,
    pub fs: u32,
    pub seizures_per_record: usize,
    /// Background sinusoids per channel.
    pub background_tones: usize,
    /// How many of them every channel shares, with per-channel weights.
    pub shared_tones: usize,
    /// Standard deviation of the white noise, microvolts.
    pub noise_uv: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_patients: 4,
            test_patients: 2,
            records_per_patient: 1,
            record_seconds: 120,
            fs: 256,
            seizures_per_record: 2,
            background_tones: 4,
            shared_tones: 4,
            noise_uv: 0.25,
            seed: 0,
        }
    }
}

const BACKGROUND_UV: f64 = 20.0;
const SEIZURE_UV: f64 = 80.0;
const PHYSICAL_RANGE_UV: f64 = 1000.0;

struct Tone {
    freq: f64,
    amp: f64,
    phase: f64,
}

fn random_tone(rng: &mut ChaCha8Rng) -> Tone {
    let freq = rng.random_range(1.0..30.0);
    Tone {
        freq,
        amp: BACKGROUND_UV / freq.sqrt(),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// Per-channel weights of a seizure focused around channel `focus`.
fn focus_gains(focus: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let neighbour = (focus + 2) % CHANNELS.len();
    (0..CHANNELS.len())
        .map(|c| {
            if c == focus || c == neighbour {
                1.0
            } else {
                rng.random_range(0.3..0.6)
            }
        })
        .collect()
}

/// Window-aligned seizure events that never share or touch a window.
fn seizure_events(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<AnnotationEvent> {
    let n_win = (cfg.record_seconds / WINDOW_SECONDS) as usize;
    let w = WINDOW_SECONDS as f64;
    let mut taken = vec![false; n_win];
    let mut events = Vec::new();
    for _ in 0..cfg.seizures_per_record {
        for _attempt in 0..50 {
            let span = rng.random_range(1..=2usize).min(n_win);
            let first = rng.random_range(0..=n_win - span);
            let lo = first.saturating_sub(1);
            let hi = (first + span + 1).min(n_win);
            if taken[lo..hi].iter().any(|&t| t) {
                continue;
            }
            taken[first..first + span].iter_mut().for_each(|t| *t = true);
            let start = first as f64 * w + rng.random_range(0.0..1.0);
            let stop = (first + span) as f64 * w - rng.random_range(0.0..1.0);
            events.push(AnnotationEvent::seizure(start, stop));
            break;
        }
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start));
    events
}

/// Samples of one recording, `[channel][time]` in microvolts.
pub fn synth_signals(
    cfg: &SynthConfig,
    events: &[AnnotationEvent],
    gains: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let fs = cfg.fs as f64;
    let n = (cfg.record_seconds * cfg.fs) as usize;
    let noise = Normal::new(0.0, cfg.noise_uv).unwrap();
    let shared: Vec<Tone> = (0..cfg.shared_tones).map(|_| random_tone(rng)).collect();
    let bursts: Vec<(f64, f64)> = events
        .iter()
        .map(|_| (rng.random_range(15.0..25.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let line_phase = rng.random_range(0.0..2.0 * PI);
    (0..CHANNELS.len())
        .map(|c| {
            let own: Vec<Tone> = (0..cfg.background_tones.saturating_sub(cfg.shared_tones)).map(|_| random_tone(rng)).collect();
            let mix: Vec<f64> = shared.iter().map(|_| rng.random_range(0.5..1.5)).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let mut v = 0.0;
                    for (tone, m) in shared.iter().zip(&mix) {
                        v += m * tone.amp * (2.0 * PI * tone.freq * t + tone.phase).sin();
                    }
                    for tone in &own {
                        v += tone.amp * (2.0 * PI * tone.freq * t + tone.phase).sin();
                    }
                    for (e, &(f, ph)) in events.iter().zip(&bursts) {
                        if t >= e.start && t < e.stop {
                            // half-second raised-cosine ramps at each end
                            let edge = ((t - e.start).min(e.stop - t) / 0.5).min(1.0);
                            let env = 0.5 - 0.5 * (PI * edge).cos();
                            v += gains[c] * SEIZURE_UV * env * (2.0 * PI * f * t + ph).sin();
                        }
                    }
                    v += 8.0 * (2.0 * PI * 60.0 * t + line_phase).sin();
                    v += 3.0 * (2.0 * PI * 120.0 * t + line_phase).sin();
                    v + noise.sample(rng)
                })
                .collect()
        })
        .collect()
}

fn edf_for(patient: &str, cfg: &SynthConfig, signals: Vec<Vec<f64>>, rng: &mut ChaCha8Rng) -> EdfFile {
    let spr = cfg.fs as usize;
    let mut sigs: Vec<EdfSignal> = CHANNELS
        .iter()
        .zip(signals)
        .map(|(name, data)| EdfSignal {
            label: format!("EEG {}-REF", name.to_ascii_uppercase()),
            physical_dim: "uV".into(),
            physical_min: -PHYSICAL_RANGE_UV,
            physical_max: PHYSICAL_RANGE_UV,
            digital_min: -32768,
            digital_max: 32767,
            samples_per_record: spr,
            data,
        })
        .collect();
    // a non-EEG channel the reader must skip
    sigs.push(EdfSignal {
        label: "EKG1-REF".into(),
        data: (0..cfg.record_seconds as usize * spr)
            .map(|i| 300.0 * ((i as f64 / cfg.fs as f64) * 2.0 * PI * 1.2).sin() + rng.random_range(-5.0..5.0))
            .collect(),
        ..sigs[0].clone()
    });
    EdfFile {
        patient: format!("{patient} X X X"),
        recording: "Startdate 01-JAN-2020 synthetic".into(),
        start_date: "01.01.20".into(),
        start_time: "00.00.00".into(),
        n_records: cfg.record_seconds as usize,
        record_duration: 1.0,
        signals: sigs,
    }
}

/// Writes `raw/<record>.edf`, `raw/<record>.csv` and `manifest.json` under
/// `out_dir` and returns the manifest.
pub fn generate(out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.record_seconds == 0 || cfg.record_seconds % WINDOW_SECONDS != 0 {
        return Err(IngestError::Manifest(format!(
            "record length {} s must be a positive multiple of {WINDOW_SECONDS} s",
            cfg.record_seconds
        )));
    }
    if cfg.shared_tones > cfg.background_tones || !(cfg.noise_uv >= 0.0 && cfg.noise_uv.is_finite()) {
        return Err(IngestError::Manifest(format!(
            "need shared_tones <= background_tones and a finite non-negative noise level, got {} / {} / {}",
            cfg.shared_tones, cfg.background_tones, cfg.noise_uv
        )));
    }
    if cfg.fs <= 240 {
        return Err(IngestError::Manifest(format!(
            "sampling rate {} Hz cannot carry the 120 Hz line component",
            cfg.fs
        )));
    }
    let raw_dir = out_dir.join("raw");
    std::fs::create_dir_all(&raw_dir).map_err(|e| IngestError::io(&raw_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for p in 0..cfg.train_patients + cfg.test_patients {
        let patient = format!("p{p:03}");
        let split = if p < cfg.train_patients { Split::Train } else { Split::Test };
        let focus = rng.random_range(0..CHANNELS.len());
        let gains = focus_gains(focus, &mut rng);
        for r in 0..cfg.records_per_patient {
            let record_id = format!("{patient}_s{r:02}");
            let events = seizure_events(cfg, &mut rng);
            let signals = synth_signals(cfg, &events, &gains, &mut rng);
            let edf = edf_for(&patient, cfg, signals, &mut rng);
            let raw_path = raw_dir.join(format!("{record_id}.edf"));
            let annotation_path = raw_dir.join(format!("{record_id}.csv"));
            write_edf(&raw_path, &edf)?;
            let csv = to_csv_bi(&events, cfg.record_seconds as f64);
            super::write_atomic(&annotation_path, csv.as_bytes()).map_err(|e| IngestError::io(&annotation_path, e))?;
            records.push(RecordEntry {
                record_id,
                patient_id: patient.clone(),
                split,
                raw_path,
                annotation_path,
                cache_path: None,
            });
        }
    }
    let manifest = Manifest { records };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_annotations_csv, parse_edf};

    #[test]
    fn events_are_window_aligned_and_separated() {
        let cfg = SynthConfig {
            seizures_per_record: 3,
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ev = seizure_events(&cfg, &mut rng);
            assert!(!ev.is_empty());
            for e in &ev {
                assert!(e.start % 10.0 < 1.0 && 10.0 - e.stop % 10.0 <= 1.0, "{e:?}");
            }
            for pair in ev.windows(2) {
                assert!(pair[1].start - pair[0].stop >= 10.0);
            }
        }
    }

    #[test]
    fn generates_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_patients: 1,
            test_patients: 1,
            record_seconds: 30,
            seed: 3,
            ..SynthConfig::default()
        };
        let m = generate(dir.path(), &cfg).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.patients(Split::Train), vec!["p000".to_string()]);
        let raw = parse_edf(&m.records[0].raw_path).unwrap();
        assert_eq!((raw.fs, raw.len(), raw.channels.len()), (256.0, 30 * 256, 19));
        let ev = parse_annotations_csv(&m.records[0].annotation_path).unwrap();
        assert!(!ev.is_empty());
        let again = tempfile::tempdir().unwrap();
        generate(again.path(), &cfg).unwrap();
        for id in ["p000_s00", "p001_s00"] {
            let a = std::fs::read(dir.path().join(format!("raw/{id}.edf"))).unwrap();
            let b = std::fs::read(again.path().join(format!("raw/{id}.edf"))).unwrap();
            assert!(a == b, "{id} differs between runs");
        }
        assert!(Manifest::load(&dir.path().join("manifest.json")).is_ok());
    }
}
