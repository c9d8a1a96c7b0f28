//! Latent bridge matching: interpolant, velocity target, loss and one-step inference.

use mvrelight_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::VelocityNet;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub sigma: f64,
    pub train_timesteps: Vec<f64>,
    pub inference_t: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { sigma: 0.005, train_timesteps: vec![0.0, 0.25, 0.5, 0.75], inference_t: 0.0 }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::Contract(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.train_timesteps.is_empty() {
            return Err(Error::Contract("train_timesteps is empty".into()));
        }
        for &t in self.train_timesteps.iter().chain([&self.inference_t]) {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Contract(format!("timestep {t} is outside [0, 1)")));
            }
        }
        Ok(())
    }
}

fn same_shape<E: Element>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = (1−t)·z_src + t·z_tar + σ·√(t(1−t))·noise`.
pub fn interpolate<E: Element>(
    z_src: &Tensor<E>,
    z_tar: &Tensor<E>,
    t: f64,
    noise: &Tensor<E>,
    sigma: f64,
) -> Result<Tensor<E>> {
    same_shape("interpolate", z_src, z_tar)?;
    same_shape("interpolate", z_src, noise)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("interpolate: t = {t} is outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(z_src.clone());
    }
    if t == 1.0 {
        return Ok(z_tar.clone());
    }
    let (a, b, s) = (E::of(1.0 - t), E::of(t), E::of(sigma * (t * (1.0 - t)).sqrt()));
    let data = z_src
        .data()
        .iter()
        .zip(z_tar.data())
        .zip(noise.data())
        .map(|((&x, &y), &e)| a * x + b * y + s * e)
        .collect();
    Ok(Tensor::from_vec(z_src.shape(), data)?)
}

/// `z_tar − z_src`.
pub fn velocity_target<E: Element>(z_src: &Tensor<E>, z_tar: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("velocity_target", z_src, z_tar)?;
    Ok(z_tar.zip_map(z_src, "velocity_target", |y, x| y - x)?)
}

/// `mean((v_pred/(1−t) − (z_tar − z_src))²)` for a single `t`.
pub fn lbm_loss<E: Element>(
    tape: &Tape<E>,
    v_pred: &Var<E>,
    z_src: &Tensor<E>,
    z_tar: &Tensor<E>,
    t: f64,
) -> Result<Var<E>> {
    let Some(&lead) = v_pred.shape().first() else {
        return Err(Error::Contract("lbm_loss: scalar prediction".into()));
    };
    let ts = vec![t; lead];
    lbm_loss_batched(tape, v_pred, z_src, z_tar, &ts)
}

/// As [`lbm_loss`] with one `t` per leading-axis sample.
pub fn lbm_loss_batched<E: Element>(
    tape: &Tape<E>,
    v_pred: &Var<E>,
    z_src: &Tensor<E>,
    z_tar: &Tensor<E>,
    t: &[f64],
) -> Result<Var<E>> {
    same_shape("lbm_loss", v_pred.value(), z_src)?;
    same_shape("lbm_loss", z_src, z_tar)?;
    let b = v_pred.shape()[0];
    if t.len() != b {
        return Err(Error::Contract(format!("lbm_loss: {} timesteps for {b} samples", t.len())));
    }
    if let Some(&bad) = t.iter().find(|&&t| !(0.0..1.0).contains(&t)) {
        return Err(Error::Contract(format!("lbm_loss is singular at t = {bad}; t must lie in [0, 1)")));
    }
    let per = v_pred.value().numel() / b.max(1);
    let scale: Vec<E> = t.iter().flat_map(|&t| std::iter::repeat_n(E::of(1.0 / (1.0 - t)), per)).collect();
    let scale = tape.constant(Tensor::from_vec(v_pred.shape(), scale)?);
    let target = tape.constant(velocity_target(z_src, z_tar)?);
    let d = tape.sub(&tape.mul(v_pred, &scale)?, &target)?;
    Ok(tape.mean(&tape.mul(&d, &d)?))
}

/// Anything that predicts a velocity for one sample: `z_t: [N, C, h, w]`, `t`, `lightmap: [4, h, w]`.
pub trait VelocityModel<E: Element = f32> {
    fn velocity(&self, z_t: &Tensor<E>, t: f64, lightmap: &Tensor<E>) -> Result<Tensor<E>>;
}

impl<E: Element> VelocityModel<E> for VelocityNet<E> {
    fn velocity(&self, z_t: &Tensor<E>, t: f64, lightmap: &Tensor<E>) -> Result<Tensor<E>> {
        self.infer(z_t, t, lightmap)
    }
}

impl<E: Element, F> VelocityModel<E> for F
where
    F: Fn(&Tensor<E>, f64, &Tensor<E>) -> Result<Tensor<E>>,
{
    fn velocity(&self, z_t: &Tensor<E>, t: f64, lightmap: &Tensor<E>) -> Result<Tensor<E>> {
        self(z_t, t, lightmap)
    }
}

/// `ẑ_tar = z_t + v_θ(z_t, t, c)`, one model call.
pub fn step_from<E: Element>(
    model: &impl VelocityModel<E>,
    z_t: &Tensor<E>,
    t: f64,
    lightmap: &Tensor<E>,
) -> Result<Tensor<E>> {
    let v = model.velocity(z_t, t, lightmap)?;
    same_shape("one_step_infer", z_t, &v)?;
    Ok(z_t.zip_map(&v, "one_step_infer", |z, v| z + v)?)
}

/// One-step relighting at `cfg.inference_t`, starting from `z_t = z_src`
/// (exact at the default `t = 0`, where the bridge noise vanishes).
pub fn one_step_infer<E: Element>(
    model: &impl VelocityModel<E>,
    z_src: &Tensor<E>,
    lightmap: &Tensor<E>,
    cfg: &BridgeConfig,
) -> Result<Tensor<E>> {
    let t = cfg.inference_t;
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Contract(format!("inference_t {t} is outside [0, 1)")));
    }
    step_from(model, z_src, t, lightmap)
}
