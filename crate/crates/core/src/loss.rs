//! Reconstruction and detection objectives.

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Result, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_spectral: f64,
    /// DFT length; signals are zero-padded to it.
    pub spectral_pad: usize,
    /// Multiplier on magnitudes; `1 / spectral_pad` when unset.
    pub spectral_scale: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_spectral: 1.0,
            spectral_pad: 2048,
            spectral_scale: None,
        }
    }
}

impl LossConfig {
    pub fn scale(&self) -> f64 {
        self.spectral_scale.unwrap_or(1.0 / self.spectral_pad as f64)
    }
}

fn same_shape<T: Element>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::shapes(op, &a.shape(), &b.shape()))
    }
}

/// Mean of squared differences over all elements.
pub fn mse_loss<'g, T: Element>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("mse_loss", pred, target)?;
    Ok(pred.sub(target)?.powf(2.0).mean())
}

/// MSE between scaled magnitude spectra of the last axis, averaged over all
/// leading positions and frequency bins.
pub fn spectral_loss<'g, T: Element>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    pad: usize,
    scale: f64,
) -> Result<Var<'g, T>> {
    same_shape("spectral_loss", pred, target)?;
    let p = pred.rfft_magnitude(pad)?.scale(scale);
    let t = target.rfft_magnitude(pad)?.scale(scale);
    Ok(p.sub(t)?.powf(2.0).mean())
}

/// Terms of the reconstruction objective.
pub struct ReconLoss<'g, T> {
    pub total: Var<'g, T>,
    pub mse: Var<'g, T>,
    /// Present only when the spectral weight is nonzero.
    pub spectral: Option<Var<'g, T>>,
}

/// `mse + λ · spectral`. With `λ = 0` the spectral term is not computed.
pub fn combined_recon_loss<'g, T: Element>(
    pred: Var<'g, T>,
    target: Var<'g, T>,
    cfg: &LossConfig,
) -> Result<ReconLoss<'g, T>> {
    if !(cfg.lambda_spectral >= 0.0) {
        return Err(TensorError::invalid("combined_recon_loss", "lambda_spectral must be non-negative"));
    }
    let mse = mse_loss(pred, target)?;
    if cfg.lambda_spectral == 0.0 {
        return Ok(ReconLoss {
            total: mse,
            mse,
            spectral: None,
        });
    }
    let spec = spectral_loss(pred, target, cfg.spectral_pad, cfg.scale())?;
    Ok(ReconLoss {
        total: mse.add(spec.scale(cfg.lambda_spectral))?,
        mse,
        spectral: Some(spec),
    })
}

pub const BCE_CLAMP: f64 = 1e-7;

/// `−mean(y log p + (1 − y) log(1 − p))` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<'g, T: Element>(prob: Var<'g, T>, label: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("bce_loss", prob, label)?;
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = label.mul(p.log())?;
    let neg = label.neg().add_scalar(1.0).mul(p.neg().add_scalar(1.0).log())?;
    Ok(pos.add(neg)?.mean().neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, random};
    use crate::tensor::{Graph, Tensor};

    fn value(f: impl for<'g> Fn(&'g Graph<f64>) -> Result<Var<'g, f64>>) -> f64 {
        let g = Graph::new();
        f(&g).unwrap().value().item().unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = random(&[3, 4], 1);
        let b = a.map(|v| v + 1.0);
        assert_eq!(value(|g| mse_loss(g.constant(a.clone()), g.constant(a.clone()))), 0.0);
        assert!((value(|g| mse_loss(g.constant(b.clone()), g.constant(a.clone()))) - 1.0).abs() < 1e-12);
        let c = random(&[3, 4], 2);
        let oracle = a.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 12.0;
        assert!((value(|g| mse_loss(g.constant(a.clone()), g.constant(c.clone()))) - oracle).abs() < 1e-9);
        let g = Graph::new();
        assert!(mse_loss(g.constant(a.clone()), g.constant(Tensor::zeros(vec![4]))).is_err());
    }

    #[test]
    fn spectral_single_bin() {
        let (pad, k) = (64usize, 5usize);
        let cosine = Tensor::from_fn(vec![1, 1, pad], |n| {
            (2.0 * std::f64::consts::PI * (k * n) as f64 / pad as f64).cos()
        });
        let scale = 1.0 / pad as f64;
        let got = value(|g| spectral_loss(g.constant(Tensor::zeros(vec![1, 1, pad])), g.constant(cosine.clone()), pad, scale));
        let want = (pad as f64 / 2.0 * scale).powi(2) / (pad / 2 + 1) as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let same = value(|g| spectral_loss(g.constant(cosine.clone()), g.constant(cosine.clone()), pad, scale));
        assert_eq!(same, 0.0);
    }

    #[test]
    fn spectral_ignores_circular_shift() {
        let pad = 128usize;
        let x = Tensor::from_fn(vec![2, pad], |i| {
            let n = (i % pad) as f64;
            (2.0 * std::f64::consts::PI * 3.0 * n / pad as f64).sin() + 0.5 * (2.0 * std::f64::consts::PI * 11.0 * n / pad as f64).cos()
        });
        let shifted = Tensor::from_fn(vec![2, pad], |i| x.data()[(i / pad) * pad + (i % pad + 17) % pad]);
        let v = value(|g| spectral_loss(g.constant(x.clone()), g.constant(shifted.clone()), pad, 1.0 / pad as f64));
        assert!(v.abs() < 1e-9, "{v}");
        assert!(value(|g| mse_loss(g.constant(x.clone()), g.constant(shifted.clone()))) > 1e-3);
    }

    #[test]
    fn spectral_gradient() {
        let t = random(&[2, 3, 12], 3);
        let err = check(&[random(&[2, 3, 12], 4)], 1e-5, |g, v| spectral_loss(v[0], g.constant(t.clone()), 16, 1.0 / 16.0));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn combined_is_sum_of_terms() {
        let (p, t) = (random(&[2, 19, 40], 5), random(&[2, 19, 40], 6));
        let cfg = LossConfig {
            lambda_spectral: 0.7,
            spectral_pad: 64,
            spectral_scale: None,
        };
        let g = Graph::new();
        let l = combined_recon_loss(g.constant(p.clone()), g.constant(t.clone()), &cfg).unwrap();
        let mse = value(|g| mse_loss(g.constant(p.clone()), g.constant(t.clone())));
        let spec = value(|g| spectral_loss(g.constant(p.clone()), g.constant(t.clone()), 64, 1.0 / 64.0));
        assert!((l.total.value().item().unwrap() - (mse + 0.7 * spec)).abs() < 1e-12);

        let zero = LossConfig {
            lambda_spectral: 0.0,
            ..cfg
        };
        let l0 = combined_recon_loss(g.constant(p.clone()), g.constant(t.clone()), &zero).unwrap();
        assert_eq!(l0.total.value().item().unwrap(), mse);
        let same = combined_recon_loss(g.constant(p.clone()), g.constant(p.clone()), &cfg).unwrap();
        assert_eq!(same.total.value().item().unwrap(), 0.0);
    }

    #[test]
    fn bce_examples() {
        let y = Tensor::from_vec(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let half = Tensor::full(vec![4], 0.5);
        assert!((value(|g| bce_loss(g.constant(half.clone()), g.constant(y.clone()))) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(value(|g| bce_loss(g.constant(y.clone()), g.constant(y.clone()))) < 1e-6);
        let p = random(&[6], 7).map(|v| 0.5 + 0.45 * v);
        let labels = Tensor::from_vec(vec![6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let oracle = -p
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / 6.0;
        assert!((value(|g| bce_loss(g.constant(p.clone()), g.constant(labels.clone()))) - oracle).abs() < 1e-9);
    }
}
