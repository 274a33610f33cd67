//! Channel saliency of detection outputs and spectra of the learned
//! front-end filters.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingest::{Window, CHANNELS, TARGET_FS};
use crate::model::{classify_logit, load_checkpoint, ModelConfig, ModelParams};
use crate::tensor::fft::rfft_magnitude;
use crate::tensor::{Element, Graph, Tensor};
use crate::{Error, Result};

/// Minimum DFT length of a filter spectrum.
pub const SPECTRUM_PAD: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub window_id: String,
    pub logit: f64,
    pub probability: f64,
    /// Per-channel L2 norm over time of the input gradient, divided by the
    /// largest one; all zeros when the gradient vanishes.
    pub importance: Vec<f64>,
    /// `|∂logit/∂x|`, `[channel][time]`.
    pub saliency: Vec<Vec<f64>>,
}

/// `record_id@start` with the start in seconds.
pub fn window_id(w: &Window) -> String {
    format!("{}@{}", w.record_id, w.start)
}

/// Logit and its gradient with respect to one `[channels, window_samples]`
/// input, computed in double precision.
pub fn logit_gradient(x: &[f64], cfg: &ModelConfig, params: &ModelParams<f64>) -> Result<(f64, Vec<f64>)> {
    let want = cfg.channels * cfg.window_samples;
    if x.len() != want {
        return Err(Error::data(format!("window has {} samples, model expects {want}", x.len())));
    }
    let g = Graph::new();
    let input = g.leaf(Tensor::from_vec(vec![1, cfg.channels, cfg.window_samples], x.to_vec())?);
    let logit = classify_logit(input, params, cfg)?;
    let value = logit.value().data()[0];
    g.backward(logit.sum())?;
    let grad = g.grad(input).expect("input is a leaf").into_vec();
    Ok((value, grad))
}

pub fn channel_saliency<T: Element>(window: &Window, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<SaliencyMap> {
    let x: Vec<f64> = window.data.iter().map(|&v| v as f64).collect();
    let (logit, grad) = logit_gradient(&x, cfg, &params.cast::<f64>())?;
    if !logit.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "saliency gradient".into(),
            step: 0,
        });
    }
    let t = cfg.window_samples;
    let saliency: Vec<Vec<f64>> = grad.chunks(t).map(|c| c.iter().map(|v| v.abs()).collect()).collect();
    let norms: Vec<f64> = saliency.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let importance = if max > 0.0 {
        norms.iter().map(|n| n / max).collect()
    } else {
        vec![0.0; norms.len()]
    };
    Ok(SaliencyMap {
        window_id: window_id(window),
        logit,
        probability: 1.0 / (1.0 + (-logit).exp()),
        importance,
        saliency,
    })
}

/// Loads a checkpoint and computes the saliency of every window.
pub fn saliency_from_checkpoint(windows: &[Window], checkpoint: &Path) -> Result<Vec<SaliencyMap>> {
    let (cfg, params) = load_checkpoint::<f64>(checkpoint)?;
    windows.iter().map(|w| channel_saliency(w, &cfg, &params)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpectrum {
    pub filter: usize,
    /// Bin centres in Hz, `0 ..= fs/2`.
    pub freqs: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub peak_hz: f64,
}

/// Magnitude response of one kernel zero-padded to `pad`; the peak is the
/// first bin holding the maximum.
pub fn kernel_spectrum(filter: usize, kernel: &[f64], fs: f64, pad: usize) -> Result<FilterSpectrum> {
    let magnitude = rfft_magnitude(kernel, pad)?;
    let freqs: Vec<f64> = (0..magnitude.len()).map(|b| b as f64 * fs / pad as f64).collect();
    let peak = magnitude
        .iter()
        .enumerate()
        .fold(0, |best, (i, &m)| if m > magnitude[best] { i } else { best });
    Ok(FilterSpectrum {
        filter,
        peak_hz: freqs[peak],
        freqs,
        magnitude,
    })
}

/// Spectra of the front-convolution kernels at the model sampling rate.
pub fn filter_spectra<T: Element>(params: &ModelParams<T>) -> Result<Vec<FilterSpectrum>> {
    let w = params.front_conv.weight.cast::<f64>();
    let k = *w.shape().last().expect("conv weight has rank 3");
    let pad = k.next_power_of_two().max(SPECTRUM_PAD);
    w.data()
        .chunks(k)
        .enumerate()
        .map(|(f, kernel)| kernel_spectrum(f, kernel, TARGET_FS as f64, pad))
        .collect()
}

pub fn spectra_from_checkpoint(checkpoint: &Path) -> Result<Vec<FilterSpectrum>> {
    let (_, params) = load_checkpoint::<f64>(checkpoint)?;
    filter_spectra(&params)
}

/// JSON form of a [`SaliencyMap`] without the per-sample gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyExport {
    pub window_id: String,
    pub logit: f64,
    pub probability: f64,
    pub channels: Vec<String>,
    pub importance: Vec<f64>,
}

impl From<&SaliencyMap> for SaliencyExport {
    fn from(m: &SaliencyMap) -> Self {
        SaliencyExport {
            window_id: m.window_id.clone(),
            logit: m.logit,
            probability: m.probability,
            channels: CHANNELS.iter().take(m.importance.len()).map(|c| c.to_string()).collect(),
            importance: m.importance.clone(),
        }
    }
}

/// One row per channel: the channel name then its absolute gradients.
pub fn saliency_csv(map: &SaliencyMap) -> String {
    let mut out = String::new();
    for (name, row) in CHANNELS.iter().zip(&map.saliency) {
        out.push_str(name);
        for v in row {
            write!(out, ",{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes the JSON summary to `json` and, if given, the per-sample
/// saliency to `csv`.
pub fn export_saliency(map: &SaliencyMap, json: &Path, csv: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&SaliencyExport::from(map)).expect("saliency serializes");
    crate::ingest::write_atomic(json, text.as_bytes()).map_err(|e| Error::io(json, e))?;
    if let Some(csv) = csv {
        crate::ingest::write_atomic(csv, saliency_csv(map).as_bytes()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_error;
    use crate::model::tiny_config;
    use std::f64::consts::PI;

    fn bin_width() -> f64 {
        TARGET_FS as f64 / SPECTRUM_PAD as f64
    }

    #[test]
    fn cosine_kernel_peaks_at_its_frequency() {
        for f0 in [5.0, 10.0, 23.0, 40.0] {
            let k: Vec<f64> = (0..100).map(|t| (2.0 * PI * f0 * t as f64 / 200.0).cos()).collect();
            let s = kernel_spectrum(0, &k, 200.0, SPECTRUM_PAD).unwrap();
            assert!((s.peak_hz - f0).abs() <= bin_width(), "{f0} -> {}", s.peak_hz);
            assert_eq!(s.freqs.len(), 129);
            assert_eq!(*s.freqs.last().unwrap(), 100.0);
        }
    }

    #[test]
    fn impulse_is_flat_and_constant_is_dc() {
        let mut imp = vec![0.0; 100];
        imp[37] = 1.0;
        let s = kernel_spectrum(0, &imp, 200.0, SPECTRUM_PAD).unwrap();
        let max = s.magnitude.iter().copied().fold(f64::MIN, f64::max);
        let min = s.magnitude.iter().copied().fold(f64::MAX, f64::min);
        assert!(max / min < 1.01, "{max} {min}");
        let c = kernel_spectrum(0, &[0.3; 100], 200.0, SPECTRUM_PAD).unwrap();
        assert_eq!(c.peak_hz, 0.0);
        let zero = kernel_spectrum(0, &[0.0; 100], 200.0, SPECTRUM_PAD).unwrap();
        assert_eq!(zero.peak_hz, 0.0);
    }

    #[test]
    fn spectra_follow_the_front_kernels() {
        let cfg = tiny_config(8, 64, 1);
        let mut p = ModelParams::<f32>::init(&cfg, 4).unwrap();
        let k = cfg.front_kernel;
        for (f, row) in p.front_conv.weight.data_mut().chunks_mut(k).enumerate() {
            let hz = 10.0 * (f + 1) as f64;
            for (t, v) in row.iter_mut().enumerate() {
                *v = (2.0 * PI * hz * t as f64 / 200.0).sin() as f32;
            }
        }
        let s = filter_spectra(&p).unwrap();
        assert_eq!(s.len(), cfg.front_filters);
        for (f, spec) in s.iter().enumerate() {
            assert!((spec.peak_hz - 10.0 * (f + 1) as f64).abs() <= bin_width());
            assert!((0.0..=100.0).contains(&spec.peak_hz));
        }
        assert_eq!(filter_spectra(&p).unwrap(), s);
    }

    fn window(cfg: &ModelConfig, seed: u64) -> Window {
        let x = crate::gradcheck::random(&[cfg.channels * cfg.window_samples], seed);
        Window {
            data: x.data().iter().map(|&v| v as f32).collect(),
            label: 0,
            record_id: "r".into(),
            start: 20.0,
        }
    }

    #[test]
    fn importance_is_max_normalized() {
        let cfg = tiny_config(8, 64, 1);
        let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let m = channel_saliency(&window(&cfg, 1), &cfg, &p).unwrap();
        assert_eq!(m.window_id, "r@20");
        assert_eq!(m.importance.len(), 19);
        assert_eq!(m.saliency.len(), 19);
        assert!(m.saliency.iter().all(|r| r.len() == 64 && r.iter().all(|v| *v >= 0.0)));
        assert!(m.importance.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.importance.iter().copied().fold(0.0, f64::max), 1.0);
        assert!((m.probability - 1.0 / (1.0 + (-m.logit).exp())).abs() < 1e-15);
    }

    #[test]
    fn unseen_channel_has_zero_importance() {
        let cfg = tiny_config(8, 64, 1);
        let mut p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let (f, hidden) = (cfg.front_filters, cfg.d_model);
        let c = 5;
        let w = p.channel_mix.weight.data_mut();
        for row in 0..hidden {
            for j in 0..f {
                w[row * cfg.channels * f + c * f + j] = 0.0;
            }
        }
        let m = channel_saliency(&window(&cfg, 3), &cfg, &p).unwrap();
        assert_eq!(m.importance[c], 0.0);
        assert!(m.saliency[c].iter().all(|&v| v == 0.0));
        assert!(m.importance.iter().filter(|&&v| v > 0.0).count() == 18);
    }

    #[test]
    fn zero_gradient_gives_zero_importance() {
        let cfg = tiny_config(8, 64, 1);
        let mut p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        p.channel_mix.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let m = channel_saliency(&window(&cfg, 3), &cfg, &p).unwrap();
        assert!(m.importance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny_config(8, 32, 1);
        let p = ModelParams::<f64>::init(&cfg, 6).unwrap();
        let x = crate::gradcheck::random(&[19 * 32], 9).into_vec();
        let (_, grad) = logit_gradient(&x, &cfg, &p).unwrap();
        let h = 1e-5;
        let logit = |x: &[f64]| logit_gradient(x, &cfg, &p).unwrap().0;
        let mut work = x.clone();
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                work[i] = x[i] + h;
                let up = logit(&work);
                work[i] = x[i] - h;
                let down = logit(&work);
                work[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        let err = rel_error(&grad, &numeric);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn export_round_trips_and_is_deterministic() {
        let cfg = tiny_config(8, 64, 1);
        let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let m = channel_saliency(&window(&cfg, 1), &cfg, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (j1, c1) = (dir.path().join("a.json"), dir.path().join("a.csv"));
        let (j2, c2) = (dir.path().join("b.json"), dir.path().join("b.csv"));
        export_saliency(&m, &j1, Some(&c1)).unwrap();
        export_saliency(&m, &j2, Some(&c2)).unwrap();
        assert_eq!(std::fs::read(&j1).unwrap(), std::fs::read(&j2).unwrap());
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
        let back: SaliencyExport = serde_json::from_str(&std::fs::read_to_string(&j1).unwrap()).unwrap();
        assert_eq!(back, SaliencyExport::from(&m));
        assert_eq!(back.channels, CHANNELS.to_vec());
        let csv = std::fs::read_to_string(&c1).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 19);
        for (row, (name, sal)) in rows.iter().zip(CHANNELS.iter().zip(&m.saliency)) {
            let mut fields = row.split(',');
            assert_eq!(fields.next(), Some(*name));
            let vals: Vec<f64> = fields.map(|v| v.parse().unwrap()).collect();
            assert_eq!(&vals, sal);
        }
    }

    #[test]
    fn missing_head_fails() {
        let cfg = tiny_config(8, 64, 1);
        let p = ModelParams::<f32>::init(&cfg, 2).unwrap();
        let mut bytes = Vec::new();
        crate::model::write_checkpoint(&mut bytes, &cfg, &p).unwrap();
        // classifier tensors come last: drop them and patch the tensor count
        let marker = b"cls_head.hidden.weight";
        let at = bytes.windows(marker.len()).position(|w| w == marker).unwrap() - 4;
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count_at = 12 + header_len;
        let count = u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap());
        let mut cut = bytes[..at].to_vec();
        cut[count_at..count_at + 4].copy_from_slice(&(count - 4).to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("headless.ckpt");
        std::fs::write(&path, &cut).unwrap();
        let err = saliency_from_checkpoint(&[window(&cfg, 1)], &path).unwrap_err().to_string();
        assert!(err.contains("cls_head"), "{err}");
    }
}
