use eeg_ssm::gradcheck::{check_params, random};
use eeg_ssm::loss::{bce_loss, combined_recon_loss, LossConfig};
use eeg_ssm::model::{
    classify, classify_logit, infer, read_checkpoint, reconstruct, tiny_config, write_checkpoint, ModelParams,
};
use eeg_ssm::nn::ParamSet;
use eeg_ssm::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fresh_model_reconstructs_exact_zeros(seed in 0u64..1000, scale in 0.1f32..100.0) {
        let cfg = tiny_config(8, 32, 1);
        let params = ModelParams::<f32>::init(&cfg, seed).unwrap();
        let x = random(&[2, 19, 32], seed + 1).cast::<f32>().map(|v| v * scale);
        let y = infer(&x, |v| reconstruct(v, &params, &cfg)).unwrap();
        prop_assert_eq!(y.shape(), &[2, 19, 32]);
        prop_assert!(y.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn probabilities_lie_in_unit_interval(seed in 0u64..1000) {
        let cfg = tiny_config(8, 32, 1);
        let params = ModelParams::<f32>::init(&cfg, seed).unwrap();
        let x = random(&[3, 19, 32], seed + 7).cast::<f32>();
        let p = infer(&x, |v| classify(v, &params, &cfg)).unwrap();
        prop_assert_eq!(p.shape(), &[3]);
        prop_assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000) {
        let cfg = tiny_config(8, 32, 1);
        let params = ModelParams::<f32>::init(&cfg, seed).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &cfg, &params).unwrap();
        let (cfg2, loaded) = read_checkpoint::<f32, _>(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&cfg2, &cfg);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &cfg2, &loaded).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = tiny_config(8, 32, 1);
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &cfg, &params).unwrap();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(read_checkpoint::<f32, _>(&mut &bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn joint_objective_gradients_match_finite_differences() {
    let cfg = tiny_config(8, 32, 1);
    let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    // move off the zero-initialized head so every path carries gradient
    let mut k = 100;
    params.visit_mut("", &mut |name, t| {
        k += 1;
        let scale = if name.ends_with("a_log") { 0.0 } else { 0.3 };
        let r = random(t.shape(), k);
        for (v, d) in t.data_mut().iter_mut().zip(r.data()) {
            *v += scale * d;
        }
    });
    let x = random(&[2, 19, 32], 6);
    let labels = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
    let loss_cfg = LossConfig { lambda_spectral: 1.0, spectral_pad: cfg.spectral_pad, spectral_scale: None };
    let err = check_params(&[x], &params, 1e-5, |g, v, p| {
        let recon = combined_recon_loss(reconstruct(v[0], p, &cfg)?, v[0], &loss_cfg)?.total;
        recon.add(bce_loss(classify_logit(v[0], p, &cfg)?.sigmoid(), g.constant(labels.clone()))?)
    });
    assert!(err < 1e-3, "relative error {err:e}");
}
