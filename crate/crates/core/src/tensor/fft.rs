//! Iterative radix-2 Cooley-Tukey FFT.
//!
//! Lengths must be powers of two; callers zero-pad. Twiddle factors are
//! evaluated directly in double precision for every length, so single and
//! double precision transforms share the same angles.

use super::{Element, Result, TensorError};

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place complex DFT of `re + i·im`. `inverse` uses the `+i` kernel and
/// does not scale by `1/n`.
pub fn fft_in_place<T: Element>(re: &mut [T], im: &mut [T], inverse: bool) -> Result<()> {
    let n = re.len();
    if n == 0 || !is_power_of_two(n) || im.len() != n {
        return Err(TensorError::invalid(
            "fft",
            format!("length {n} is not a nonzero power of two"),
        ));
    }
    if n == 1 {
        return Ok(());
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let half = n / 2;
    let (tw_re, tw_im): (Vec<T>, Vec<T>) = (0..half)
        .map(|k| {
            let ang = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (T::of(ang.cos()), T::of(ang.sin()))
        })
        .unzip();
    let mut len = 2;
    while len <= n {
        let step = n / len;
        let h = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..h {
                let (wr, wi) = (tw_re[k * step], tw_im[k * step]);
                let (a, b) = (start + k, start + k + h);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] = re[a] + tr;
                im[a] = im[a] + ti;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Real-input DFT: the `n/2 + 1` non-redundant bins as (re, im) vectors.
pub fn rfft<T: Element>(x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let mut re = x.to_vec();
    let mut im = vec![T::zero(); x.len()];
    fft_in_place(&mut re, &mut im, false)?;
    let bins = x.len() / 2 + 1;
    re.truncate(bins);
    im.truncate(bins);
    Ok((re, im))
}

/// Magnitudes of the real DFT of `x` zero-padded to `pad_to`.
pub fn rfft_magnitude<T: Element>(x: &[T], pad_to: usize) -> Result<Vec<T>> {
    if pad_to < x.len() {
        return Err(TensorError::invalid(
            "rfft_magnitude",
            format!("pad length {pad_to} shorter than input {}", x.len()),
        ));
    }
    let mut padded = x.to_vec();
    padded.resize(pad_to, T::zero());
    let (re, im) = rfft(&padded)?;
    Ok(re
        .iter()
        .zip(&im)
        .map(|(&r, &i)| (r * r + i * i).sqrt())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) reference DFT.
    fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for k in 0..n {
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                re[k] += v * ang.cos();
                im[k] += v * ang.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn impulse_is_flat() {
        let (re, im) = rfft(&[1.0f64, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(re, vec![1.0, 1.0, 1.0]);
        assert_eq!(im, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[1usize, 2, 4, 8, 64, 256, 1024] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (nr, ni) = naive_dft(&x);
            let (re, im) = rfft(&x).unwrap();
            for k in 0..re.len() {
                assert!((re[k] - nr[k]).abs() < 1e-9, "n={n} k={k}");
                assert!((im[k] - ni[k]).abs() < 1e-9, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 128;
        let mut re: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut im: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let (r0, i0) = (re.clone(), im.clone());
        fft_in_place(&mut re, &mut im, false).unwrap();
        fft_in_place(&mut re, &mut im, true).unwrap();
        for k in 0..n {
            assert!((re[k] / n as f64 - r0[k]).abs() < 1e-12);
            assert!((im[k] / n as f64 - i0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(rfft::<f64>(&[]).is_err());
        assert!(rfft(&[1.0f64, 2.0, 3.0]).is_err());
        assert!(rfft_magnitude(&[1.0f64; 8], 4).is_err());
    }

    #[test]
    fn on_bin_cosine_peak() {
        let n = 64;
        let k = 5;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64).cos())
            .collect();
        let mag = rfft_magnitude(&x, n).unwrap();
        for (b, m) in mag.iter().enumerate() {
            if b == k {
                assert!((m - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(m.abs() < 1e-9);
            }
        }
    }
}
