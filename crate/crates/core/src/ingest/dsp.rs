//! Rational resampling and notch filtering.

use super::{IngestError, Result};

pub const KAISER_BETA: f64 = 8.6;
/// Filter half-length in units of the larger of the two rate factors.
const HALF_TAPS_PER_FACTOR: usize = 10;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let q = (x / 2.0) * (x / 2.0);
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Output length of [`resample`]: `floor(n · fs_out / fs_in)`.
pub fn resampled_len(n: usize, fs_in: u32, fs_out: u32) -> usize {
    (n as u128 * fs_out as u128 / fs_in as u128) as usize
}

/// Polyphase design for up-by-`l`, down-by-`m` resampling.
struct Polyphase {
    l: usize,
    m: usize,
    half: usize,
    /// `branches[φ][j]` multiplies input `k` where `m·i − k·l = φ + j·l − half`
    /// shifted into non-negative indices; each branch sums to one.
    branches: Vec<Vec<f64>>,
}

impl Polyphase {
    fn design(fs_in: u32, fs_out: u32) -> Self {
        let g = gcd(fs_in, fs_out);
        let (l, m) = ((fs_out / g) as usize, (fs_in / g) as usize);
        let half = HALF_TAPS_PER_FACTOR * l.max(m);
        // cutoff as a fraction of the upsampled rate fs_in · l
        let fc = 0.9 * fs_in.min(fs_out) as f64 / 2.0 / (fs_in as f64 * l as f64);
        let i0b = bessel_i0(KAISER_BETA);
        let tap = |n: isize| {
            let r = n as f64 / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            2.0 * fc * sinc(2.0 * fc * n as f64) * w
        };
        // branch φ gathers taps n ≡ φ − half (mod l), n in −half..=half
        let branches = (0..l)
            .map(|phi| {
                let mut taps: Vec<f64> = (0..)
                    .map(|j| phi + j * l)
                    .take_while(|&idx| idx <= 2 * half)
                    .map(|idx| tap(idx as isize - half as isize))
                    .collect();
                let s: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= s);
                taps
            })
            .collect();
        Polyphase { l, m, half, branches }
    }

    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n = x.len() as isize;
        let at = |k: isize| x[k.clamp(0, n - 1) as usize];
        (0..out_len)
            .map(|i| {
                // output i sits at upsampled time t = i·m; input k contributes
                // through tap n = t − k·l, stored at index n + half
                let t = (i * self.m) as isize;
                let lo = t - self.half as isize;
                // smallest k with t − k·l ≤ half  ⇒  k ≥ (t − half) / l
                let k_min = lo.div_euclid(self.l as isize) + isize::from(lo.rem_euclid(self.l as isize) != 0);
                let first_idx = (t - k_min * self.l as isize + self.half as isize) as usize;
                let phi = first_idx % self.l;
                let branch = &self.branches[phi];
                // taps in the branch run upward in n, i.e. downward in k
                let j_top = (first_idx - phi) / self.l;
                let mut acc = 0.0;
                for (j, &h) in branch.iter().enumerate().take(j_top + 1) {
                    acc += h * at(k_min + (j_top - j) as isize);
                }
                acc
            })
            .collect()
    }
}

/// Resamples `x` from `fs_in` to `fs_out` Hz with a Kaiser-windowed sinc
/// low-pass (β = 8.6, cutoff 0.9 · min(fs_in, fs_out) / 2). Edges are
/// extended by repeating the end samples. Each polyphase branch is scaled to
/// unit DC gain.
pub fn resample(x: &[f64], fs_in: u32, fs_out: u32) -> Result<Vec<f64>> {
    if fs_in == 0 || fs_out == 0 {
        return Err(IngestError::Filter("sampling rates must be positive".into()));
    }
    let out_len = resampled_len(x.len(), fs_in, fs_out);
    if fs_in == fs_out {
        return Ok(x.to_vec());
    }
    if out_len == 0 {
        return Ok(Vec::new());
    }
    Ok(Polyphase::design(fs_in, fs_out).apply(x, out_len))
}

/// Normalized second-order section `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Notch at `f0` Hz with quality `q`.
    pub fn notch(f0: f64, fs: f64, q: f64) -> Result<Self> {
        if !(f0 > 0.0 && f0 < fs / 2.0) {
            return Err(IngestError::Filter(format!(
                "notch frequency {f0} Hz must lie strictly between 0 and the Nyquist rate {} Hz",
                fs / 2.0
            )));
        }
        if !(q > 0.0) {
            return Err(IngestError::Filter(format!("notch quality {q} must be positive")));
        }
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        let c = -2.0 * w0.cos();
        Ok(Biquad {
            b: [1.0 / a0, c / a0, 1.0 / a0],
            a: [c / a0, (1.0 - alpha) / a0],
        })
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at `f` Hz.
    pub fn gain_at(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0, self.b[1] * z1.1 + self.b[2] * z2.1);
        let den = (1.0 + self.a[0] * z1.0 + self.a[1] * z2.0, self.a[0] * z1.1 + self.a[1] * z2.1);
        num.0.hypot(num.1) / den.0.hypot(den.1)
    }

    /// Direct form II transposed, started in the steady state for a constant
    /// input equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let g = self.dc_gain();
        let mut z0 = (g - b0) * x0;
        let mut z1 = (b2 - a2 * g) * x0;
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z0;
            z0 = b1 * xi - a1 * y + z1;
            z1 = b2 * xi - a2 * y;
            *v = y;
        }
    }

    /// Zero-phase forward-backward filtering with odd reflection padding.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Cascade of zero-phase notches at `freqs` (each below `fs / 2`).
/// Signals are padded by one second of odd reflection at each end.
pub fn notch_filter(x: &[f64], fs: f64, freqs: &[f64], q: f64) -> Result<Vec<f64>> {
    let sections = freqs
        .iter()
        .map(|&f| Biquad::notch(f, fs, q))
        .collect::<Result<Vec<_>>>()?;
    let pad = fs.round() as usize;
    Ok(sections.iter().fold(x.to_vec(), |y, s| s.filtfilt(&y, pad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Direct evaluation of the upsample, filter, downsample definition.
    fn naive_resample(x: &[f64], fs_in: u32, fs_out: u32) -> Vec<f64> {
        let p = Polyphase::design(fs_in, fs_out);
        let (l, m, half) = (p.l as isize, p.m as isize, p.half as isize);
        let n = x.len() as isize;
        (0..resampled_len(x.len(), fs_in, fs_out) as isize)
            .map(|i| {
                let t = i * m;
                let mut acc = 0.0;
                for k in (t - half) / l - 2..=(t + half) / l + 2 {
                    let tap = t - k * l;
                    if tap.abs() > half {
                        continue;
                    }
                    let idx = (tap + half) as usize;
                    let h = p.branches[idx % p.l][idx / p.l];
                    acc += h * x[k.clamp(0, n - 1) as usize];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn length_formula() {
        assert_eq!(resample(&vec![0.0; 4000], 400, 200).unwrap().len(), 2000);
        assert_eq!(resample(&vec![0.0; 2560], 256, 200).unwrap().len(), 2000);
        assert_eq!(resample(&vec![0.0; 1001], 250, 200).unwrap().len(), 800);
        assert_eq!(resample(&vec![0.0; 7], 256, 200).unwrap().len(), 5);
        assert!(resample(&[], 256, 200).unwrap().is_empty());
        assert!(resample(&[1.0], 0, 200).is_err());
    }

    #[test]
    fn polyphase_matches_direct_definition() {
        let x: Vec<f64> = (0..700).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) + (i as f64 * 0.05).sin()).collect();
        for (a, b) in [(256, 200), (250, 200), (400, 200), (100, 200)] {
            let fast = resample(&x, a, b).unwrap();
            let slow = naive_resample(&x, a, b);
            assert_eq!(fast.len(), slow.len());
            for (u, v) in fast.iter().zip(&slow) {
                assert!((u - v).abs() < 1e-12, "{a}->{b}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn constant_is_preserved() {
        for (a, b) in [(256, 200), (250, 200), (512, 200), (1000, 200), (100, 200)] {
            let y = resample(&vec![3.5; 3000], a, b).unwrap();
            assert!(y.iter().all(|v| (v - 3.5).abs() < 3.5e-3), "{a}->{b}");
        }
    }

    #[test]
    fn tone_peak_stays_put() {
        let y = resample(&sine(5.0, 256.0, 2560), 256, 200).unwrap();
        assert!((rms(&y[200..1800]) - 0.5f64.sqrt()).abs() < 1e-2);
        // 30 Hz survives; 125 Hz, past the transition band, is suppressed
        let pass = resample(&sine(30.0, 256.0, 2560), 256, 200).unwrap();
        assert!((rms(&pass[200..1800]) / 0.5f64.sqrt() - 1.0).abs() < 0.02);
        let stop = resample(&sine(125.0, 256.0, 2560), 256, 200).unwrap();
        assert!(rms(&stop[200..1800]) < 1e-3);
    }

    #[test]
    fn notch_response() {
        let fs = 200.0;
        let b = Biquad::notch(60.0, fs, 30.0).unwrap();
        assert!((b.dc_gain() - 1.0).abs() < 1e-12);
        assert!(b.gain_at(60.0, fs) < 1e-9);
        assert!((b.gain_at(10.0, fs) - 1.0).abs() < 1e-3);
        let y = notch_filter(&sine(60.0, fs, 2000), fs, &[60.0], 30.0).unwrap();
        let x = sine(60.0, fs, 2000);
        let att = 20.0 * (rms(&y[100..1900]) / rms(&x[100..1900])).log10();
        assert!(att <= -30.0, "{att} dB");
        let y = notch_filter(&sine(10.0, fs, 2000), fs, &[60.0], 30.0).unwrap();
        let db = 20.0 * (rms(&y[100..1900]) / rms(&sine(10.0, fs, 2000)[100..1900])).log10();
        assert!(db.abs() <= 1.0, "{db} dB");
        let dc = notch_filter(&vec![7.25; 1000], fs, &[60.0, 90.0], 30.0).unwrap();
        assert!(dc.iter().all(|v| (v - 7.25).abs() < 1e-6));
    }

    #[test]
    fn notch_rejects_frequencies_at_or_above_nyquist() {
        assert!(matches!(notch_filter(&[0.0; 10], 200.0, &[60.0, 120.0], 30.0), Err(IngestError::Filter(_))));
        assert!(notch_filter(&[0.0; 10], 200.0, &[100.0], 30.0).is_err());
        assert!(notch_filter(&[0.0; 10], 256.0, &[60.0, 120.0], 30.0).is_ok());
    }

    #[test]
    fn filtfilt_is_zero_phase() {
        let b = Biquad::notch(60.0, 200.0, 30.0).unwrap();
        let x = sine(15.0, 200.0, 1000);
        let y = b.filtfilt(&x, 200);
        // a phase shift would show up as a large residual at 15 Hz
        let resid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!(rms(&resid[100..900]) < 1e-3);
    }
}
