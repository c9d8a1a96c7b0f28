use mvrelight_core::bridge::*;
use mvrelight_core::model::{ModelConfig, VelocityNet};
use mvrelight_core::Result;
use mvrelight_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn latents(seed: u64, shape: &[usize]) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn(shape, 1.0, &mut rng), Tensor::randn(shape, 1.0, &mut rng), Tensor::randn(shape, 1.0, &mut rng))
}

#[test]
fn endpoints_are_exact() {
    let (a, b, e) = latents(0, &[2, 12, 4, 4]);
    assert_eq!(interpolate(&a, &b, 0.0, &e, 0.3).unwrap(), a);
    assert_eq!(interpolate(&a, &b, 1.0, &e, 0.3).unwrap(), b);
    assert!(interpolate(&a, &b, 1.5, &e, 0.0).is_err());
    assert!(interpolate(&a, &Tensor::zeros(&[2, 12, 4, 2]), 0.5, &e, 0.0).is_err());
}

#[test]
fn midpoint_and_noise_scale() {
    let a = Tensor::full(&[3], 2.0f64);
    let b = Tensor::full(&[3], 4.0f64);
    let e = Tensor::full(&[3], 1.0f64);
    let m = interpolate(&a, &b, 0.5, &e, 0.0).unwrap();
    assert_eq!(m.data(), &[3.0; 3]);
    let n = interpolate(&a, &b, 0.5, &e, 0.2).unwrap();
    assert!(n.data().iter().all(|v| (v - 3.1).abs() < 1e-12));
    let q = interpolate(&a, &b, 0.25, &e, 1.0).unwrap();
    assert!((q.data()[0] - (2.5 + (0.1875f64).sqrt())).abs() < 1e-12);
}

proptest! {
    #[test]
    fn interpolant_is_antisymmetric_in_time(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let (a, b, e) = latents(seed, &[8]);
        let a = a.cast::<f64>();
        let b = b.cast::<f64>();
        let e = e.cast::<f64>();
        let fwd = interpolate(&a, &b, t, &e, 0.0).unwrap();
        let rev = interpolate(&b, &a, 1.0 - t, &e, 0.0).unwrap();
        prop_assert!(fwd.max_abs_diff(&rev) < 1e-12);
    }

    #[test]
    fn interpolation_does_not_touch_inputs(seed in any::<u64>(), t in 0.0f64..1.0) {
        let (a, b, e) = latents(seed, &[16]);
        let copies = (a.to_vec(), b.to_vec(), e.to_vec());
        let _ = interpolate(&a, &b, t, &e, 0.005).unwrap();
        prop_assert_eq!((a.to_vec(), b.to_vec(), e.to_vec()), copies);
    }
}

#[test]
fn velocity_target_is_difference() {
    let a = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
    let b = Tensor::from_vec(&[2], vec![4.0f64, 0.5]).unwrap();
    assert_eq!(velocity_target(&a, &b).unwrap().data(), &[3.0, 2.5]);
}

#[test]
fn loss_examples() {
    let tape = Tape::<f64>::new();
    let z_src = Tensor::zeros(&[1, 4]);
    let z_tar = Tensor::ones(&[1, 4]);
    let v = tape.constant(Tensor::full(&[1, 4], 0.5));
    let at_half = lbm_loss(&tape, &v, &z_src, &z_tar, 0.5).unwrap().value().item();
    assert!(at_half.abs() < 1e-15);
    let at_zero = lbm_loss(&tape, &v, &z_src, &z_tar, 0.0).unwrap().value().item();
    assert!((at_zero - 0.25).abs() < 1e-15);
    let zero_v = tape.constant(Tensor::zeros(&[1, 4]));
    let l = lbm_loss(&tape, &zero_v, &z_src, &z_tar, 0.75).unwrap().value().item();
    assert!((l - 1.0).abs() < 1e-15);
    assert!(lbm_loss(&tape, &v, &z_src, &z_tar, 1.0).is_err());
    let scalar = tape.constant(Tensor::scalar(1.0));
    assert!(lbm_loss(&tape, &scalar, &Tensor::scalar(0.0), &Tensor::scalar(1.0), 0.5).is_err());
}

#[test]
fn loss_matches_scalar_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [3, 2, 5];
    let v = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let a = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let ts = [0.0, 0.25, 0.75];
    let mut want = 0.0;
    for i in 0..v.numel() {
        let t = ts[i / 10];
        want += (v.data()[i] / (1.0 - t) - (b.data()[i] - a.data()[i])).powi(2);
    }
    want /= v.numel() as f64;
    let tape = Tape::new();
    let got = lbm_loss_batched(&tape, &tape.constant(v), &a, &b, &ts).unwrap().value().item();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn loss_gradient_is_analytic() {
    let tape = Tape::<f64>::new();
    let a = Tensor::zeros(&[1, 2]);
    let b = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
    let v = tape.leaf(Tensor::zeros(&[1, 2]));
    let l = lbm_loss(&tape, &v, &a, &b, 0.5).unwrap();
    let g = tape.backward(&l).unwrap().get_or_zeros(&v);
    // d/dv mean((2v − Δ)²) = 2·2·(2v − Δ)/2 = −2Δ at v = 0.
    assert_eq!(g.data(), &[-2.0, 2.0]);
}

#[test]
fn oracle_velocity_recovers_target_for_every_train_timestep() {
    let cfg = BridgeConfig::default();
    let (src, tar, noise) = latents(5, &[2, 12, 8, 8]);
    let lm = Tensor::zeros(&[4, 8, 8]);
    for &t in &cfg.train_timesteps {
        let z_t = interpolate(&src, &tar, t, &noise, 0.0).unwrap();
        let target = tar.clone();
        let oracle = move |z: &Tensor, _t: f64, _c: &Tensor| -> Result<Tensor> { Ok(target.zip_map(z, "oracle", |a, b| a - b)?) };
        let out = step_from(&oracle, &z_t, t, &lm).unwrap();
        assert!(out.max_abs_diff(&tar) < 1e-5, "t={t}: {}", out.max_abs_diff(&tar));

        let tape = Tape::new();
        let scaled = (1.0 - t) as f32;
        let v_star = velocity_target(&src, &tar).unwrap().map(|d| d * scaled);
        let shape: Vec<usize> = [1].iter().chain(src.shape()).copied().collect();
        let loss = lbm_loss(&tape, &tape.constant(v_star.reshape(&shape).unwrap()), &src.reshape(&shape).unwrap(), &tar.reshape(&shape).unwrap(), t).unwrap();
        assert!(loss.value().item() < 1e-10, "t={t}");
    }
    let delta = velocity_target(&src, &tar).unwrap();
    let oracle = move |_z: &Tensor, _t: f64, _c: &Tensor| -> Result<Tensor> { Ok(delta.clone()) };
    let out = one_step_infer(&oracle, &src, &lm, &cfg).unwrap();
    assert!(out.max_abs_diff(&tar) < 1e-5);
}

#[test]
fn zero_velocity_is_identity() {
    let (src, _, _) = latents(6, &[2, 12, 4, 4]);
    let zero = |z: &Tensor, _t: f64, _c: &Tensor| -> Result<Tensor> { Ok(Tensor::zeros(z.shape())) };
    assert_eq!(one_step_infer(&zero, &src, &Tensor::zeros(&[4, 4, 4]), &BridgeConfig::default()).unwrap(), src);
    let wrong = |_z: &Tensor, _t: f64, _c: &Tensor| -> Result<Tensor> { Ok(Tensor::zeros(&[1])) };
    assert!(one_step_infer(&wrong, &src, &Tensor::zeros(&[4, 4, 4]), &BridgeConfig::default()).is_err());
}

#[test]
fn fresh_network_relights_as_identity_in_one_pass() {
    let cfg = ModelConfig { embed_dim: 16, num_blocks: 1, num_heads: 2, latent_height: 8, latent_width: 8, ..Default::default() };
    let net = VelocityNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (src, _, _) = latents(7, &[3, 12, 8, 8]);
    let out = one_step_infer(&net, &src, &Tensor::zeros(&[4, 8, 8]), &BridgeConfig::default()).unwrap();
    assert_eq!(out, src);
    assert_eq!(net.forward_passes(), 1);
}

#[test]
fn bridge_noise_has_expected_spread() {
    let n = 100_000;
    let zeros = Tensor::<f64>::zeros(&[n]);
    let noise = Tensor::<f64>::randn(&[n], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let sigma = 0.005;
    let z = interpolate(&zeros, &zeros, 0.5, &noise, sigma).unwrap();
    let mean = z.data().iter().sum::<f64>() / n as f64;
    let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let want = sigma * 0.5;
    assert!((std - want).abs() / want < 0.05, "{std} vs {want}");
}

#[test]
fn config_validation() {
    assert!(BridgeConfig::default().validate().is_ok());
    assert!(BridgeConfig { sigma: -1.0, ..Default::default() }.validate().is_err());
    assert!(BridgeConfig { train_timesteps: vec![], ..Default::default() }.validate().is_err());
    assert!(BridgeConfig { train_timesteps: vec![0.5, 1.0], ..Default::default() }.validate().is_err());
    let late = BridgeConfig { inference_t: 1.0, ..Default::default() };
    let zero = |z: &Tensor, _t: f64, _c: &Tensor| -> Result<Tensor> { Ok(Tensor::zeros(z.shape())) };
    assert!(one_step_infer(&zero, &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &late).is_err());
}
