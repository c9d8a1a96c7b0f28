use mvrelight_core::bridge::BridgeConfig;
use mvrelight_core::codec::SpaceToDepth;
use mvrelight_core::datagen::{generate_split, sample_pair, GenConfig};
use mvrelight_core::model::{ModelConfig, VelocityNet};
use mvrelight_core::trainer::*;
use mvrelight_core::Error;
use mvrelight_tensor::{grad_check_floored, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn abs_mean(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

/// Per-channel valid Sobel responses computed with explicit loops.
fn sobel_oracle(d: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let (mut gx, mut gy) = (Vec::new(), Vec::new());
    for p in 0..planes {
        for y in 0..h - 2 {
            for x in 0..w - 2 {
                let (mut sx, mut sy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        let v = d[p * h * w + (y + i) * w + x + j];
                        sx += kx[i][j] * v;
                        sy += kx[j][i] * v;
                    }
                }
                gx.push(sx);
                gy.push(sy);
            }
        }
    }
    (gx, gy)
}

#[test]
fn pixel_loss_examples() {
    let tape = Tape::<f64>::new();
    let t = Tensor::<f64>::full(&[3, 5, 5], 0.4);
    let same = pixel_loss(&tape, &tape.constant(t.clone()), &t).unwrap();
    assert_eq!(same.value().item(), 0.0);
    // A constant offset has no edges.
    let shifted = pixel_loss(&tape, &tape.constant(t.map(|v| v + 0.25)), &t).unwrap();
    assert!((shifted.value().item() - 0.25).abs() < 1e-12);
    // A vertical step edge: only the x-gradient responds, with magnitude 4·h.
    let mut step = vec![0.0; 25];
    for y in 0..5 {
        for x in 3..5 {
            step[y * 5 + x] = 0.5;
        }
    }
    let pred = Tensor::from_vec(&[1, 5, 5], step).unwrap();
    let zero = Tensor::zeros(&[1, 5, 5]);
    let l = pixel_loss(&tape, &tape.constant(pred), &zero).unwrap().value().item();
    // L1 = 0.5·10/25; each row of valid windows sees x-responses [0, 2, 2].
    assert!((l - (0.2 + 4.0 / 3.0)).abs() < 1e-12, "{l}");
    assert!(pixel_loss(&tape, &tape.constant(Tensor::zeros(&[1, 2, 5])), &Tensor::zeros(&[1, 2, 5])).is_err());
    assert!(pixel_loss(&tape, &tape.constant(Tensor::zeros(&[1, 4, 4])), &Tensor::zeros(&[1, 4, 5])).is_err());
}

#[test]
fn pixel_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, 3, 6, 7];
    let a = Tensor::<f64>::uniform(&shape, 0.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(&shape, 0.0, 1.0, &mut rng);
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let (gx, gy) = sobel_oracle(&d, 6, 6, 7);
    let want = abs_mean(&d) + abs_mean(&gx) + abs_mean(&gy);
    let tape = Tape::new();
    let got = pixel_loss(&tape, &tape.constant(a), &b).unwrap().value().item();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        patch_size: 2,
        latent_height: 4,
        latent_width: 4,
        max_t_freqs: 4,
        ..Default::default()
    }
}

/// Random batch of `b` samples, `n` views of 8×8 images in (0.1, 0.9).
fn synthetic_batch(b: usize, n: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = |rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(&[b, n, 3, 8, 8], 0.1, 0.9, rng);
    let (x_src, x_tar) = (img(&mut rng), img(&mut rng));
    batch_from_images(b, n, x_src, x_tar, &mut rng)
}

/// Batch whose source exceeds its target by a ramp, so `x̂ - x` and its Sobel
/// responses keep one sign for a near-identity network.
fn ramp_batch(b: usize, n: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_tar = Tensor::<f64>::uniform(&[b, n, 3, 8, 8], 0.05, 0.1, &mut rng);
    let x_src: Vec<f64> = x_tar
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.2 + 0.04 * (i % 8) as f64 + 0.04 * (i / 8 % 8) as f64)
        .collect();
    let x_src = Tensor::from_vec(x_tar.shape(), x_src).unwrap();
    batch_from_images(b, n, x_src, x_tar, &mut rng)
}

fn batch_from_images(b: usize, n: usize, x_src: Tensor<f64>, x_tar: Tensor<f64>, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let codec = SpaceToDepth::default();
    let encode = |x: &Tensor<f64>| {
        let mut zs = Vec::new();
        for i in 0..b {
            let views: Vec<mvrelight_core::Image> = (0..n)
                .map(|v| {
                    let off = (i * n + v) * 192;
                    let chw = Tensor::<f32>::from_vec(&[3, 8, 8], x.data()[off..off + 192].iter().map(|&p| p as f32).collect()).unwrap();
                    mvrelight_core::Image::from_chw(&chw).unwrap()
                })
                .collect();
            zs.extend(codec.encode_views(&views).unwrap().to_f64_vec());
        }
        Tensor::<f64>::from_vec(&[b, n, 12, 4, 4], zs).unwrap()
    };
    let z_src = encode(&x_src);
    let z_tar = encode(&x_tar);
    let x_tar = Tensor::<f64>::from_vec(x_tar.shape(), x_tar.data().iter().map(|&p| p as f32 as f64).collect()).unwrap();
    let lightmap = Tensor::uniform(&[b, 4, 4, 4], -1.0, 1.0, rng);
    let t = (0..b).map(|_| [0.0, 0.25, 0.5, 0.75][rng.random_range(0..4)]).collect();
    let noise = Tensor::randn(&[b, n, 12, 4, 4], 1.0, rng);
    Batch { z_src, z_tar, x_tar, lightmap, t, noise }
}

#[test]
fn oracle_velocity_gives_zero_loss_without_noise() {
    let batch = synthetic_batch(3, 2, 2);
    let codec = SpaceToDepth::default();
    let z_t = interpolate_batch(&batch, 0.0).unwrap();
    let v: Vec<f64> = batch.z_tar.data().iter().zip(z_t.data()).map(|(a, b)| a - b).collect();
    let tape = Tape::new();
    let parts = total_loss_from_velocity(&tape, &tape.constant(Tensor::from_vec(z_t.shape(), v).unwrap()), &z_t, &batch, &codec, 10.0).unwrap();
    // Only the f32 rounding of the encoded images remains.
    assert!(parts.total.value().item() < 1e-5, "{}", parts.total.value().item());
    assert!(parts.l_lbm < 1e-20 && parts.l_pix.iter().all(|&p| p < 1e-6));
}

#[test]
fn loss_parts_add_up() {
    let batch = synthetic_batch(2, 3, 3);
    let codec = SpaceToDepth::default();
    let net: VelocityNet<f64> = VelocityNet::<f32>::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().cast();
    for lambda in [0.0, 10.0] {
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let parts = total_loss(&tape, &net, &bound, &batch, &codec, 0.005, lambda).unwrap();
        assert_eq!(parts.l_pix.len(), 3);
        let want = parts.l_lbm + lambda * parts.l_pix.iter().sum::<f64>();
        assert!((parts.total.value().item() - want).abs() < 1e-12);
        if lambda == 0.0 {
            assert_eq!(parts.total.value().item(), parts.l_lbm);
        }
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net32 = VelocityNet::<f32>::new(tiny_model(), &mut rng).unwrap();
    let head = net32.param("head.w").unwrap().shape().to_vec();
    net32.set_param("head.w", Tensor::randn(&head, 0.002, &mut rng)).unwrap();
    let net: VelocityNet<f64> = net32.cast();
    let batch = ramp_batch(2, 2, 5);
    let codec = SpaceToDepth::default();
    let mut worst = 0.0f64;
    for (idx, name) in net.names().iter().enumerate() {
        let n = net.params()[idx].numel();
        let coords: Vec<usize> = (0..n).step_by((n / 24).max(1)).collect();
        let report = grad_check_floored(
            |tape, x| {
                let mut bound = net.bind(tape, false);
                bound.vars[idx] = x.clone();
                Ok(total_loss(tape, &net, &bound, &batch, &codec, 0.005, 10.0).expect("total loss").total)
            },
            &net.params()[idx],
            1e-4,
            &coords,
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{name}: {report:?}");
        worst = worst.max(report.max_relative_error);
    }
    assert!(worst.is_finite());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut adam = Adam::new(0.01);
    let mut params = vec![Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap()];
    let grads = vec![Tensor::from_vec(&[3], vec![0.5f32, -4.0, 0.0]).unwrap()];
    adam.step(&mut params, &grads).unwrap();
    let p = params[0].data();
    assert!((p[0] - 0.99).abs() < 1e-6 && (p[1] - 2.01).abs() < 1e-6 && p[2] == 3.0);
}

#[test]
fn global_norm_clipping() {
    let mut g = vec![Tensor::from_vec(&[2], vec![3.0f32, 0.0]).unwrap(), Tensor::from_vec(&[1], vec![4.0f32]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-6 && (g[1].data()[0] - 0.8).abs() < 1e-6);
    let mut small = vec![Tensor::from_vec(&[1], vec![0.1f32]).unwrap()];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.1]);
}

fn small_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { embed_dim: 16, num_blocks: 1, num_heads: 2, patch_size: 4, latent_height: 16, latent_width: 16, max_t_freqs: 4, ..Default::default() },
        batch_size: 2,
        steps,
        eval_every: steps,
        checkpoint_every: 2,
        eval_pairs_per_scene: 1,
        ..Default::default()
    }
}

fn small_data() -> Vec<mvrelight_core::datagen::OlatScene> {
    let mut cfg = GenConfig { train_scenes: 3, test_scenes: 1, ..Default::default() };
    cfg.scene.width = 32;
    cfg.scene.height = 32;
    generate_split(&cfg, false).unwrap()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = small_data();
    let cfg = TrainConfig { learning_rate: 0.0, ..small_train_config(2) };
    let mut net = VelocityNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = net.params().to_vec();
    train(&cfg, &data, &[], &mut net, None, |_| {}).unwrap();
    assert_eq!(net.params(), &before[..]);
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let data = small_data();
    let cfg = small_train_config(3);
    let dir = tempfile::tempdir().unwrap();
    let mut a = VelocityNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut b = a.clone();
    let out = train(&cfg, &data, &data[..1], &mut a, Some(dir.path()), |_| {}).unwrap();
    let out_b = train(&cfg, &data, &data[..1], &mut b, None, |_| {}).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(out.log, out_b.log);
    assert_eq!(out.log.len(), 3);
    assert_eq!(out.evals.len(), 1);
    assert_eq!(out.evals[0].1.forward_passes, 1);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(csv.lines().count(), 4);
    assert!(std::fs::read_to_string(dir.path().join("eval.csv")).unwrap().lines().count() > 1);
    assert!(dir.path().join("ckpt_000002.bin").exists());
    let (loaded, extra) = VelocityNet::<f32>::load(dir.path().join("final.bin")).unwrap();
    assert_eq!(loaded.params(), a.params());
    assert_eq!(extra["step"], 3);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = small_data();
    let cfg = small_train_config(1);
    let mut net = VelocityNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let shape = net.param("head.b").unwrap().shape().to_vec();
    net.set_param("head.b", Tensor::full(&shape, f32::NAN)).unwrap();
    match train(&cfg, &data, &[], &mut net, None, |_| {}) {
        Err(Error::NonFinite { step: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_errors() {
    let data = small_data();
    let cfg = small_train_config(1);
    let mut net = VelocityNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(train(&TrainConfig { n_views: 1, ..cfg.clone() }, &data, &[], &mut net, None, |_| {}).is_err());
    assert!(train(&cfg, &[], &[], &mut net, None, |_| {}).is_err());
    let mut other = VelocityNet::new(ModelConfig { embed_dim: 32, ..cfg.model.clone() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(train(&cfg, &data, &[], &mut other, None, |_| {}).is_err());
    let parsed: TrainConfig = toml::from_str("steps = 5\n[model]\nembed_dim = 64\nlatent_channels = 12\nlightmap_channels = 4\nnum_blocks = 1\nnum_heads = 2\npatch_size = 2\nmax_t_freqs = 8\nlatent_height = 32\nlatent_width = 32\n").unwrap();
    assert_eq!(parsed.steps, 5);
    assert_eq!(parsed.lambda_pix, 10.0);
}

#[test]
fn batches_carry_per_sample_timesteps() {
    let data = small_data();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs: Vec<_> = (0..64).map(|i| sample_pair(&data[i % 3], &mut rng, 2).unwrap()).collect();
    let batch = assemble_batch(&pairs, &SpaceToDepth::default(), &BridgeConfig::default(), &mut rng).unwrap();
    assert_eq!(batch.z_src.shape(), &[64, 2, 12, 16, 16]);
    assert_eq!(batch.x_tar.shape(), &[64, 2, 3, 32, 32]);
    assert_eq!(batch.lightmap.shape(), &[64, 4, 16, 16]);
    let mut seen: Vec<f64> = batch.t.clone();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    assert_eq!(seen, vec![0.0, 0.25, 0.5, 0.75]);
}

#[test]
fn evaluation_reports_floor_and_counts_passes() {
    let data = small_data();
    let cfg = small_train_config(1);
    let net = VelocityNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let codec = SpaceToDepth::default();
    let r = evaluate(&net, &data, 3, 2, 0, &codec, &cfg.bridge).unwrap();
    assert_eq!(r.pairs, 6);
    assert_eq!(r.forward_passes, 6);
    // A fresh network predicts zero velocity, so it reproduces the floor.
    assert!((r.model.other.psnr - r.floor.other.psnr).abs() < 1e-3);
    assert!(r.model.additional.is_some());
    assert!(evaluate(&net, &data, 1, 1, 0, &codec, &cfg.bridge).is_err());
    let rows = r.csv_rows();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("3,model,reference,"));
}

#[test]
#[ignore = "full default configuration; long running"]
fn default_config_reduces_loss_in_500_steps() {
    let gcfg = GenConfig::default();
    let train_set = generate_split(&gcfg, false).unwrap();
    let cfg = TrainConfig { steps: 500, eval_every: 1000, ..Default::default() };
    let mut net = VelocityNet::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let out = train(&cfg, &train_set, &[], &mut net, None, |_| {}).unwrap();
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    let (first, last) = (mean(&out.log[..50]), mean(&out.log[450..]));
    assert!(last < 0.7 * first, "{first} -> {last}");
}
