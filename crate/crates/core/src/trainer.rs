//! Hybrid bridge-matching + pixel objective, Adam training loop and evaluation.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use mvrelight_tensor::{Conv2dSpec, Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{interpolate, lbm_loss_batched, BridgeConfig};
use crate::codec::{Codec, SpaceToDepth};
use crate::datagen::{sample_pair, OlatScene, TrainingPair};
use crate::error::io_err;
use crate::lightmap::to_latent_resolution;
use crate::metrics::MetricReport;
use crate::model::{ModelConfig, VelocityNet};
use crate::relight::relight_views;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_pix: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    pub n_views: usize,
    pub prefetch: usize,
    pub eval_pairs_per_scene: usize,
    pub codec_factor: usize,
    pub model: ModelConfig,
    pub bridge: BridgeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_pix: 10.0,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 20_000,
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 5000,
            clip_norm: 1.0,
            n_views: 2,
            prefetch: 4,
            eval_pairs_per_scene: 4,
            codec_factor: 2,
            model: ModelConfig::default(),
            bridge: BridgeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
            ("prefetch", self.prefetch),
            ("codec_factor", self.codec_factor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("{name} must be positive")));
        }
        if !(self.lambda_pix >= 0.0 && self.learning_rate >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Contract("lambda_pix, learning_rate must be >= 0 and clip_norm > 0".into()));
        }
        if self.n_views < 2 {
            return Err(Error::Contract("training uses at least 2 views".into()));
        }
        self.model.validate()?;
        self.bridge.validate()
    }
}

const SOBEL: [f64; 18] = [
    -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, //
    -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
];

/// `mean|x̂ − x| + mean|Sobel_x(x̂ − x)| + mean|Sobel_y(x̂ − x)|` over `[..., 3, H, W]`
/// images, Sobel applied per channel over valid 3×3 windows.
pub fn pixel_loss<E: Element>(tape: &Tape<E>, pred: &Var<E>, target: &Tensor<E>) -> Result<Var<E>> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "pixel_loss: shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let s = pred.shape();
    let r = s.len();
    if r < 2 || s[r - 2] < 3 || s[r - 1] < 3 {
        return Err(Error::Contract(format!("pixel_loss needs images of at least 3x3, got {s:?}")));
    }
    let diff = tape.sub(pred, &tape.constant(target.clone()))?;
    let l1 = tape.mean(&tape.abs(&diff));
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes = diff.value().numel() / (h * w);
    let x = tape.reshape(&diff, &[planes, 1, h, w])?;
    let k = tape.constant(Tensor::from_f64(&[2, 1, 3, 3], &SOBEL)?);
    let g = tape.conv2d(&x, &k, None, Conv2dSpec { stride: 1, padding: 0 })?;
    let grad = tape.mul_scalar(&tape.mean(&tape.abs(&g)), 2.0);
    Ok(tape.add(&l1, &grad)?)
}

/// Stacked training inputs for `B` pairs of `N` views.
#[derive(Clone, Debug)]
pub struct Batch<E: Element = f32> {
    pub z_src: Tensor<E>,
    pub z_tar: Tensor<E>,
    /// Target display images `[B, N, 3, H, W]`.
    pub x_tar: Tensor<E>,
    /// `[B, 4, h, w]`, one lightmap per sample shared by all its views.
    pub lightmap: Tensor<E>,
    pub t: Vec<f64>,
    pub noise: Tensor<E>,
}

impl<E: Element> Batch<E> {
    pub fn cast<F: Element>(&self) -> Batch<F> {
        Batch {
            z_src: self.z_src.cast(),
            z_tar: self.z_tar.cast(),
            x_tar: self.x_tar.cast(),
            lightmap: self.lightmap.cast(),
            t: self.t.clone(),
            noise: self.noise.cast(),
        }
    }

    pub fn size(&self) -> usize {
        self.z_src.dim(0)
    }

    pub fn views(&self) -> usize {
        self.z_src.dim(1)
    }
}

fn stack(parts: &[Tensor], lead: &[usize]) -> Result<Tensor> {
    let mut shape = lead.to_vec();
    shape.extend_from_slice(parts[0].shape());
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Encodes pairs and draws one timestep and one noise field per sample.
pub fn assemble_batch<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    codec: &SpaceToDepth,
    bridge: &BridgeConfig,
    rng: &mut R,
) -> Result<Batch> {
    let b = pairs.len();
    let n = pairs.first().map(|p| p.views.len()).ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut zs = Vec::with_capacity(b);
    let mut zt = Vec::with_capacity(b);
    let mut xt = Vec::with_capacity(b * n);
    let mut lm = Vec::with_capacity(b);
    for p in pairs {
        if p.views.len() != n {
            return Err(Error::Contract("pairs in a batch must share the view count".into()));
        }
        zs.push(codec.encode_views(&p.src)?);
        zt.push(codec.encode_views(&p.tar)?);
        xt.extend(p.tar.iter().map(|img| img.to_chw()));
        lm.push(to_latent_resolution(&p.lightmap, codec.factor())?);
    }
    let z_src = stack(&zs, &[b])?;
    let z_tar = stack(&zt, &[b])?;
    let x_tar = stack(&xt, &[b, n])?;
    let lightmap = stack(&lm, &[b])?;
    let t = (0..b).map(|_| bridge.train_timesteps[rng.random_range(0..bridge.train_timesteps.len())]).collect();
    let noise: Vec<f32> = (0..z_src.numel()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let noise = Tensor::from_vec(z_src.shape(), noise)?;
    Ok(Batch { z_src, z_tar, x_tar, lightmap, t, noise })
}

pub struct LossParts<E: Element> {
    pub total: Var<E>,
    pub l_lbm: f64,
    /// Unweighted pixel loss per view.
    pub l_pix: Vec<f64>,
}

/// Bridge point `z_t` for every sample of the batch at its own `t`.
pub fn interpolate_batch<E: Element>(batch: &Batch<E>, sigma: f64) -> Result<Tensor<E>> {
    let b = batch.size();
    let per = batch.z_src.numel() / b;
    let mut zt = Vec::with_capacity(batch.z_src.numel());
    for i in 0..b {
        let sl = |t: &Tensor<E>| Tensor::from_vec(&[per], t.data()[i * per..(i + 1) * per].to_vec());
        let z = interpolate(&sl(&batch.z_src)?, &sl(&batch.z_tar)?, batch.t[i], &sl(&batch.noise)?, sigma)?;
        zt.extend_from_slice(z.data());
    }
    Ok(Tensor::from_vec(batch.z_src.shape(), zt)?)
}

/// `L = L_lbm + λ Σ_i L_pix(decode(z_t + v)ⁱ, x_tarⁱ)` for a given velocity `v`.
pub fn total_loss_from_velocity<E: Element>(
    tape: &Tape<E>,
    v: &Var<E>,
    z_t: &Tensor<E>,
    batch: &Batch<E>,
    codec: &SpaceToDepth,
    lambda: f64,
) -> Result<LossParts<E>> {
    let l_lbm = lbm_loss_batched(tape, v, &batch.z_src, &batch.z_tar, &batch.t)?;
    let z_hat = tape.add(&tape.constant(z_t.clone()), v)?;
    let x_hat = codec.decode_var(tape, &z_hat)?;
    let mut total = l_lbm.clone();
    let mut l_pix = Vec::with_capacity(batch.views());
    for i in 0..batch.views() {
        let pred = tape.slice(&x_hat, 1, i, 1)?;
        let target = mvrelight_tensor::kernels::slice(&batch.x_tar, 1, i, 1)?;
        let lp = pixel_loss(tape, &pred, &target)?;
        l_pix.push(lp.value().item().f64());
        total = tape.add(&total, &tape.mul_scalar(&lp, lambda))?;
    }
    Ok(LossParts { total, l_lbm: l_lbm.value().item().f64(), l_pix })
}

/// [`total_loss_from_velocity`] with `v` from one forward pass of `net`.
pub fn total_loss<E: Element>(
    tape: &Tape<E>,
    net: &VelocityNet<E>,
    bound: &crate::model::Bound<E>,
    batch: &Batch<E>,
    codec: &SpaceToDepth,
    sigma: f64,
    lambda: f64,
) -> Result<LossParts<E>> {
    let z_t = interpolate_batch(batch, sigma)?;
    let v = net.forward(tape, bound, &tape.constant(z_t.clone()), &batch.t, &tape.constant(batch.lightmap.clone()))?;
    total_loss_from_velocity(tape, &v, &z_t, batch, codec, lambda)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1 as f32;
                let vh = v[j] / bc2 as f32;
                data[j] -= lr * mh / (vh.sqrt() + eps);
            }
            *p = Tensor::from_vec(p.shape(), data)?;
        }
        Ok(())
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_lbm: f64,
    pub l_pix0: f64,
    pub l_pix1: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,l_lbm,l_pix0,l_pix1,total,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.l_lbm, self.l_pix0, self.l_pix1, self.total, self.lr)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub evals: Vec<(usize, EvalReport)>,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

/// Runs one optimizer step on a batch and returns its log row.
pub fn train_step(
    net: &mut VelocityNet,
    adam: &mut Adam,
    batch: &Batch,
    codec: &SpaceToDepth,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LogRow> {
    let tape = Tape::new();
    let bound = net.bind(&tape, true);
    let parts = total_loss(&tape, net, &bound, batch, codec, cfg.bridge.sigma, cfg.lambda_pix)?;
    let total = parts.total.value().item() as f64;
    let pix = |i: usize| parts.l_pix.get(i).copied().unwrap_or(0.0);
    if !total.is_finite() {
        return Err(Error::NonFinite { step, l_lbm: parts.l_lbm, l_pix0: pix(0), l_pix1: pix(1) });
    }
    let grads = tape.backward(&parts.total)?;
    let mut g: Vec<Tensor> = bound.vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    clip_global_norm(&mut g, cfg.clip_norm);
    adam.step(net.params_mut(), &g)?;
    Ok(LogRow { step, l_lbm: parts.l_lbm, l_pix0: pix(0), l_pix1: pix(1), total, lr: adam.lr })
}

pub fn checkpoint_extra(cfg: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({
        "step": step,
        "bridge": cfg.bridge,
        "codec_factor": cfg.codec_factor,
        "lambda_pix": cfg.lambda_pix,
        "learning_rate": cfg.learning_rate,
    })
}

/// Trains `net` in place. Batches are produced by a worker thread into a bounded
/// queue; this thread alone updates weights. With `out` set, writes
/// `metrics.csv`, `eval.csv` and `ckpt_<step>.bin` / `final.bin`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[OlatScene],
    test_set: &[OlatScene],
    net: &mut VelocityNet,
    out: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if net.config() != &cfg.model {
        return Err(Error::Contract("network config differs from the training config".into()));
    }
    let codec = SpaceToDepth::new(cfg.codec_factor)?;
    let started = Instant::now();
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("metrics.csv");
            let mut f = File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };
    let mut outcome = TrainOutcome::default();
    let mut adam = Adam::new(cfg.learning_rate);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(cfg.prefetch);
        let producer = scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for _ in 0..cfg.steps {
                let batch = (0..cfg.batch_size)
                    .map(|_| {
                        let scene = &train_set[rng.random_range(0..train_set.len())];
                        sample_pair(scene, &mut rng, cfg.n_views)
                    })
                    .collect::<Result<Vec<_>>>()
                    .and_then(|pairs| assemble_batch(&pairs, &codec, &cfg.bridge, &mut rng));
                if tx.send(batch).is_err() {
                    return;
                }
            }
        });
        for step in 0..cfg.steps {
            let batch = rx.recv().map_err(|_| Error::Contract("data worker stopped".into()))??;
            let row = train_step(net, &mut adam, &batch, &codec, cfg, step)?;
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", row.csv()).map_err(io_err(path.clone()))?;
            }
            progress(&row);
            outcome.log.push(row);
            let done = step + 1;
            if !test_set.is_empty() && (done % cfg.eval_every == 0 || done == cfg.steps) {
                let report = evaluate(net, test_set, cfg.n_views, cfg.eval_pairs_per_scene, cfg.seed, &codec, &cfg.bridge)?;
                if let Some(dir) = out {
                    append_eval(&dir.join("eval.csv"), done, &report)?;
                }
                outcome.evals.push((done, report));
            }
            if let Some(dir) = out {
                if done % cfg.checkpoint_every == 0 && done != cfg.steps {
                    let path = dir.join(format!("ckpt_{done:06}.bin"));
                    net.save(&path, &checkpoint_extra(cfg, done))?;
                    outcome.checkpoints.push(path);
                }
            }
        }
        drop(rx);
        producer.join().map_err(|_| Error::Contract("data worker panicked".into()))?;
        Ok(())
    })?;

    if let Some(dir) = out {
        let path = dir.join("final.bin");
        net.save(&path, &checkpoint_extra(cfg, cfg.steps))?;
        outcome.checkpoints.push(path);
    }
    outcome.seconds = started.elapsed().as_secs_f64();
    Ok(outcome)
}

fn append_eval(path: &Path, step: usize, r: &EvalReport) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    if new {
        writeln!(f, "step,{}", EvalReport::CSV_HEADER).map_err(io_err(path))?;
    }
    for line in r.csv_rows() {
        writeln!(f, "{step},{line}").map_err(io_err(path))?;
    }
    Ok(())
}

/// PSNR cap used when averaging, so a bit-identical pair cannot make the mean infinite.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleReport {
    pub reference: MetricReport,
    pub other: MetricReport,
    pub additional: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_views: usize,
    pub pairs: usize,
    pub model: RoleReport,
    /// Identity relighter: the source images returned unchanged.
    pub floor: RoleReport,
    /// Forward passes the model ran during this evaluation.
    pub forward_passes: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_views,system,role,psnr,ssim,delta_e00";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (name, r) in [("model", &self.model), ("floor", &self.floor)] {
            let mut roles = vec![("reference", r.reference), ("other", r.other)];
            if let Some(a) = r.additional {
                roles.push(("additional", a));
            }
            for (role, m) in roles {
                rows.push(format!("{},{name},{role},{:.4},{:.5},{:.4}", self.n_views, m.psnr, m.ssim, m.delta_e00));
            }
        }
        rows
    }
}

fn capped(mut m: MetricReport) -> MetricReport {
    m.psnr = m.psnr.min(PSNR_CAP);
    m
}

fn mean_role(per_view: &[Vec<MetricReport>]) -> RoleReport {
    let take = |sel: &dyn Fn(&Vec<MetricReport>) -> Vec<MetricReport>| {
        let all: Vec<MetricReport> = per_view.iter().flat_map(sel).map(capped).collect();
        (!all.is_empty()).then(|| MetricReport::mean(&all))
    };
    RoleReport {
        reference: take(&|v| v[..1].to_vec()).unwrap_or_default(),
        other: take(&|v| v.get(1..2).map(<[_]>::to_vec).unwrap_or_default()).unwrap_or_default(),
        additional: take(&|v| v.get(2..).map(<[_]>::to_vec).unwrap_or_default()),
    }
}

/// Generator for pair `p` of scene `s`, independent of the view count.
pub fn eval_rng(seed: u64, scene: usize, pair: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    rng.set_stream(((scene as u64) << 20) + pair as u64);
    rng
}

/// One-step inference on all `n_views` jointly per pair; metrics of each
/// predicted view against the composed target, averaged by view role.
pub fn evaluate(
    net: &VelocityNet,
    test_set: &[OlatScene],
    n_views: usize,
    pairs_per_scene: usize,
    seed: u64,
    codec: &SpaceToDepth,
    bridge: &BridgeConfig,
) -> Result<EvalReport> {
    if n_views < 2 {
        return Err(Error::Contract("evaluation needs at least 2 views".into()));
    }
    let passes_before = net.forward_passes();
    let mut model = Vec::new();
    let mut floor = Vec::new();
    for (s, scene) in test_set.iter().enumerate() {
        for p in 0..pairs_per_scene {
            let pair = sample_pair(scene, &mut eval_rng(seed, s, p), n_views)?;
            let pred = relight_views(net, codec, bridge, &pair.src, &pair.edits)?;
            model.push(pred.iter().zip(&pair.tar).map(|(x, y)| MetricReport::compute(x, y)).collect::<Result<_>>()?);
            floor.push(pair.src.iter().zip(&pair.tar).map(|(x, y)| MetricReport::compute(x, y)).collect::<Result<_>>()?);
        }
    }
    Ok(EvalReport {
        n_views,
        pairs: model.len(),
        model: mean_role(&model),
        floor: mean_role(&floor),
        forward_passes: net.forward_passes() - passes_before,
    })
}
