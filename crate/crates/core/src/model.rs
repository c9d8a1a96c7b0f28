//! DiT-style velocity network with multi-view token-concatenation attention.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use mvrelight_tensor::{Conv2dSpec, Element, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::io_err;
use crate::lightmap::CHANNELS as LIGHTMAP_CHANNELS;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
/// Highest sinusoid frequency, in radians per unit t.
pub const MAX_FREQUENCY: f64 = 1000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Tokens of all views attend jointly over one `N·T` sequence.
    #[default]
    MultiView,
    /// Each view attends only within its own `T` tokens.
    PerView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub lightmap_channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub max_t_freqs: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    #[serde(default)]
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            lightmap_channels: LIGHTMAP_CHANNELS,
            embed_dim: 256,
            num_blocks: 6,
            num_heads: 8,
            patch_size: 2,
            max_t_freqs: 32,
            latent_height: 32,
            latent_width: 32,
            attention: AttentionMode::MultiView,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        let p = self.patch_size;
        if p == 0 || !self.latent_height.is_multiple_of(p) || !self.latent_width.is_multiple_of(p) {
            return bad(format!(
                "latent {}x{} is not divisible by patch size {p}",
                self.latent_height, self.latent_width
            ));
        }
        if self.max_t_freqs < 2 {
            return bad("max_t_freqs must be at least 2".into());
        }
        if self.latent_channels == 0 || self.lightmap_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        (self.latent_height / self.patch_size) * (self.latent_width / self.patch_size)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Ordered parameter names and shapes. Nothing here depends on the view count.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.embed_dim;
        let p = self.patch_size;
        let c_in = self.latent_channels + self.lightmap_channels;
        let mut out = vec![
            ("patch.w".to_string(), vec![f, c_in, p, p]),
            ("patch.b".to_string(), vec![f]),
            ("pos".to_string(), vec![self.tokens_per_view(), f]),
            ("temb.w1".to_string(), vec![2 * self.max_t_freqs, f]),
            ("temb.b1".to_string(), vec![f]),
            ("temb.w2".to_string(), vec![f, f]),
            ("temb.b2".to_string(), vec![f]),
        ];
        for i in 0..self.num_blocks {
            let name = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (name("mod.w"), vec![f, 4 * f]),
                (name("mod.b"), vec![4 * f]),
                (name("attn.qkv.w"), vec![f, 3 * f]),
                (name("attn.qkv.b"), vec![3 * f]),
                (name("attn.out.w"), vec![f, f]),
                (name("attn.out.b"), vec![f]),
                (name("mlp.w1"), vec![f, 4 * f]),
                (name("mlp.b1"), vec![4 * f]),
                (name("mlp.w2"), vec![4 * f, f]),
                (name("mlp.b2"), vec![f]),
            ]);
        }
        out.extend([
            ("final.mod.w".to_string(), vec![f, 2 * f]),
            ("final.mod.b".to_string(), vec![2 * f]),
            ("head.w".to_string(), vec![f, p * p * self.latent_channels]),
            ("head.b".to_string(), vec![p * p * self.latent_channels]),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Angular frequencies `ω_k = MAX_FREQUENCY^(k/(K−1))`, from 1 to `MAX_FREQUENCY`.
pub fn frequencies(k: usize) -> Vec<f64> {
    (0..k).map(|i| MAX_FREQUENCY.powf(i as f64 / (k - 1) as f64)).collect()
}

/// `[sin(ω_k t)..., cos(ω_k t)...]`.
pub fn sinusoid(t: f64, k: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} is outside [0, 1)")));
    }
    let w = frequencies(k);
    Ok(w.iter().map(|w| (w * t).sin()).chain(w.iter().map(|w| (w * t).cos())).collect())
}

pub struct VelocityNet<E: Element = f32> {
    config: ModelConfig,
    params: Vec<Tensor<E>>,
    names: Vec<String>,
    passes: AtomicUsize,
}

impl<E: Element> Clone for VelocityNet<E> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            names: self.names.clone(),
            passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

impl<E: Element> std::fmt::Debug for VelocityNet<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VelocityNet")
            .field("config", &self.config)
            .field("parameters", &self.config.num_parameters())
            .finish()
    }
}

/// Parameters bound to one tape, in [`ModelConfig::parameter_shapes`] order.
pub struct Bound<E: Element> {
    pub vars: Vec<Var<E>>,
}

struct BlockVars<'a, E: Element> {
    modulation: (&'a Var<E>, &'a Var<E>),
    qkv: (&'a Var<E>, &'a Var<E>),
    out: (&'a Var<E>, &'a Var<E>),
    mlp1: (&'a Var<E>, &'a Var<E>),
    mlp2: (&'a Var<E>, &'a Var<E>),
}

impl<E: Element> VelocityNet<E> {
    /// Truncated-normal weights, zero biases and a zero head.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        let params = shapes
            .iter()
            .map(|(name, shape)| {
                if name.starts_with("head.") || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2")
                {
                    Tensor::zeros(shape)
                } else {
                    Tensor::trunc_normal(shape, INIT_STD, rng)
                }
            })
            .collect();
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: ModelConfig, params: Vec<Tensor<E>>) -> Self {
        let names = config.parameter_shapes().into_iter().map(|(n, _)| n).collect();
        Self { config, params, names, passes: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::Contract(format!(
                "parameter {name}: shape {:?} != {:?}",
                value.shape(),
                self.params[i].shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.params
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.config.attention = mode;
        self
    }

    pub fn cast<F: Element>(&self) -> VelocityNet<F> {
        VelocityNet::from_parts(self.config.clone(), self.params.iter().map(|p| p.cast()).collect())
    }

    /// Number of forward passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::SeqCst)
    }

    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> Bound<E> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// Sinusoid features followed by the two-layer SiLU MLP, `[B] -> [B, F]`.
    pub fn timestep_embed(&self, tape: &Tape<E>, bound: &Bound<E>, t: &[f64]) -> Result<Var<E>> {
        let k = self.config.max_t_freqs;
        let mut feats = Vec::with_capacity(t.len() * 2 * k);
        for &ti in t {
            feats.extend(sinusoid(ti, k)?);
        }
        let x = tape.constant(Tensor::from_f64(&[t.len(), 2 * k], &feats)?);
        let v = &bound.vars;
        let h = tape.silu(&tape.linear(&x, &v[3], Some(&v[4]))?);
        Ok(tape.linear(&h, &v[5], Some(&v[6]))?)
    }

    fn block_vars<'a>(&self, bound: &'a Bound<E>, i: usize) -> BlockVars<'a, E> {
        let o = 7 + 10 * i;
        let v = &bound.vars;
        BlockVars {
            modulation: (&v[o], &v[o + 1]),
            qkv: (&v[o + 2], &v[o + 3]),
            out: (&v[o + 4], &v[o + 5]),
            mlp1: (&v[o + 6], &v[o + 7]),
            mlp2: (&v[o + 8], &v[o + 9]),
        }
    }

    /// `z_t: [B, N, C, h, w]`, one `t` per sample, `lightmap: [B, 4, h, w]` → `[B, N, C, h, w]`.
    pub fn forward(
        &self,
        tape: &Tape<E>,
        bound: &Bound<E>,
        z_t: &Var<E>,
        t: &[f64],
        lightmap: &Var<E>,
    ) -> Result<Var<E>> {
        self.passes.fetch_add(1, Ordering::SeqCst);
        let cfg = &self.config;
        let zs = z_t.shape();
        let (c, lh, lw) = (cfg.latent_channels, cfg.latent_height, cfg.latent_width);
        if zs.len() != 5 || zs[2] != c || zs[3] != lh || zs[4] != lw {
            return Err(Error::Contract(format!("z_t {zs:?} does not match [B, N, {c}, {lh}, {lw}]")));
        }
        let (b, n) = (zs[0], zs[1]);
        if n == 0 {
            return Err(Error::Contract("at least one view is required".into()));
        }
        if lightmap.shape() != [b, cfg.lightmap_channels, lh, lw] {
            return Err(Error::Contract(format!(
                "lightmap {:?} does not match [{b}, {}, {lh}, {lw}]",
                lightmap.shape(),
                cfg.lightmap_channels
            )));
        }
        if t.len() != b {
            return Err(Error::Contract(format!("{} timesteps for a batch of {b}", t.len())));
        }
        let f = cfg.embed_dim;
        let p = cfg.patch_size;
        let tokens = cfg.tokens_per_view();
        let seq = n * tokens;
        let v = &bound.vars;

        // Same lightmap on every view.
        let lm = tape.reshape(lightmap, &[b, 1, cfg.lightmap_channels, lh, lw])?;
        let lm = tape.expand(&lm, 1, n)?;
        let x = tape.concat(&[z_t, &lm], 2)?;
        let x = tape.reshape(&x, &[b * n, c + cfg.lightmap_channels, lh, lw])?;
        let x = tape.conv2d(&x, &v[0], Some(&v[1]), Conv2dSpec { stride: p, padding: 0 })?;
        let x = tape.reshape(&x, &[b * n, f, tokens])?;
        let x = tape.transpose(&x, 1, 2)?;
        let x = tape.add_bcast(&x, &v[2])?;
        let mut x = tape.reshape(&x, &[b, seq, f])?;

        let temb = tape.silu(&self.timestep_embed(tape, bound, t)?);

        for i in 0..cfg.num_blocks {
            let bv = self.block_vars(bound, i);
            let m = tape.linear(&temb, bv.modulation.0, Some(bv.modulation.1))?;
            let m = tape.reshape(&m, &[b, 1, 4 * f])?;
            let m = tape.expand(&m, 1, seq)?;
            let chunks = tape.split(&m, 2, &[f, f, f, f])?;
            let h = self.modulate(tape, &x, &chunks[0], &chunks[1])?;
            let h = self.attention(tape, &h, &bv, b, n)?;
            x = tape.add(&x, &h)?;
            let h = self.modulate(tape, &x, &chunks[2], &chunks[3])?;
            let h = tape.gelu(&tape.linear(&h, bv.mlp1.0, Some(bv.mlp1.1))?);
            let h = tape.linear(&h, bv.mlp2.0, Some(bv.mlp2.1))?;
            x = tape.add(&x, &h)?;
        }

        let o = 7 + 10 * cfg.num_blocks;
        let m = tape.linear(&temb, &v[o], Some(&v[o + 1]))?;
        let m = tape.expand(&tape.reshape(&m, &[b, 1, 2 * f])?, 1, seq)?;
        let chunks = tape.split(&m, 2, &[f, f])?;
        let h = self.modulate(tape, &x, &chunks[0], &chunks[1])?;
        let h = tape.linear(&h, &v[o + 2], Some(&v[o + 3]))?;

        // [B, N·T, p·p·C] -> [B, N, C, h, w]; head features ordered (C, dy, dx).
        let (hp, wp) = (lh / p, lw / p);
        let h = tape.reshape(&h, &[b, n, hp, wp, c, p, p])?;
        let h = tape.permute(&h, &[0, 1, 4, 2, 5, 3, 6])?;
        Ok(tape.reshape(&h, &[b, n, c, lh, lw])?)
    }

    /// `LN(x)·(1 + scale) + shift`, with scale/shift already expanded to `x`'s shape.
    fn modulate(&self, tape: &Tape<E>, x: &Var<E>, shift: &Var<E>, scale: &Var<E>) -> Result<Var<E>> {
        let h = tape.layer_norm(x, LN_EPS)?;
        let s = tape.add_scalar(scale, 1.0);
        Ok(tape.add(&tape.mul(&h, &s)?, shift)?)
    }

    fn attention(&self, tape: &Tape<E>, x: &Var<E>, bv: &BlockVars<'_, E>, b: usize, n: usize) -> Result<Var<E>> {
        let cfg = &self.config;
        let qkv = tape.linear(x, bv.qkv.0, Some(bv.qkv.1))?;
        let parts = tape.split(&qkv, 2, &[cfg.embed_dim; 3])?;
        let out = mv_self_attention_flat(tape, &parts[0], &parts[1], &parts[2], b, n, cfg.num_heads, cfg.attention)?;
        Ok(tape.linear(&out, bv.out.0, Some(bv.out.1))?)
    }

    /// One forward pass without gradient recording on a single sample:
    /// `z_t: [N, C, h, w]`, `lightmap: [4, h, w]`.
    pub fn infer(&self, z_t: &Tensor<E>, t: f64, lightmap: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::no_grad();
        let bound = self.bind(&tape, false);
        let mut zs = vec![1];
        zs.extend_from_slice(z_t.shape());
        let mut ls = vec![1];
        ls.extend_from_slice(lightmap.shape());
        let z = tape.constant(z_t.reshape(&zs)?);
        let lm = tape.constant(lightmap.reshape(&ls)?);
        let out = self.forward(&tape, &bound, &z, &[t], &lm)?;
        Ok(out.into_value().reshape(z_t.shape())?)
    }
}

/// Multi-head attention on token-major `[B, N·T, F]` projections. In
/// [`AttentionMode::MultiView`] every token sees all `N·T` tokens; in
/// [`AttentionMode::PerView`] the sequence is cut into `N` independent views.
#[allow(clippy::too_many_arguments)]
pub fn mv_self_attention_flat<E: Element>(
    tape: &Tape<E>,
    q: &Var<E>,
    k: &Var<E>,
    v: &Var<E>,
    b: usize,
    n: usize,
    heads: usize,
    mode: AttentionMode,
) -> Result<Var<E>> {
    let s = q.shape();
    let (seq, f) = (s[1], s[2]);
    let d = f / heads;
    let (groups, len) = match mode {
        AttentionMode::MultiView => (b, seq),
        AttentionMode::PerView => (b * n, seq / n),
    };
    let split = |x: &Var<E>| -> Result<Var<E>> {
        let x = tape.reshape(x, &[groups, len, heads, d])?;
        Ok(tape.permute(&x, &[0, 2, 1, 3])?)
    };
    let o = tape.attention(&split(q)?, &split(k)?, &split(v)?)?;
    let o = tape.permute(&o, &[0, 2, 1, 3])?;
    Ok(tape.reshape(&o, &[b, seq, f])?)
}

/// Joint self-attention over view tokens `[B, N, T, F]` with projection
/// weights `w_qkv: [F, 3F]` (no bias) and no output projection.
pub fn mv_self_attention<E: Element>(
    tape: &Tape<E>,
    x: &Var<E>,
    w_qkv: &Var<E>,
    heads: usize,
    mode: AttentionMode,
) -> Result<Var<E>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Contract(format!("view tokens must be [B, N, T, F], got {s:?}")));
    }
    let (b, n, t, f) = (s[0], s[1], s[2], s[3]);
    if n == 0 || f % heads != 0 {
        return Err(Error::Contract(format!("invalid view tokens {s:?} for {heads} heads")));
    }
    let flat = tape.reshape(x, &[b, n * t, f])?;
    let qkv = tape.linear(&flat, w_qkv, None)?;
    let parts = tape.split(&qkv, 2, &[f, f, f])?;
    let out = mv_self_attention_flat(tape, &parts[0], &parts[1], &parts[2], b, n, heads, mode)?;
    Ok(tape.reshape(&out, &s)?)
}

const MAGIC: &[u8; 8] = b"MVRLCKPT";
const VERSION: u32 = 1;

impl<E: Element> VelocityNet<E> {
    /// Writes magic, version, config JSON, an extra JSON blob, then named f32 tensors.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W, extra: &serde_json::Value) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        for blob in [serde_json::to_vec(&self.config)?, serde_json::to_vec(extra)?] {
            w.write_all(&(blob.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&blob).map_err(io)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, p) in self.names.iter().zip(&self.params) {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            p.cast::<f32>().write_to(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Self, serde_json::Value)> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut blob = || -> Result<Vec<u8>> {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io)?;
            Ok(buf)
        };
        let config: ModelConfig = serde_json::from_slice(&blob()?)?;
        let extra: serde_json::Value = serde_json::from_slice(&blob()?)?;
        config.validate()?;
        let expected = config.parameter_shapes();
        let count = read_u32(r)? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("{count} tensors, expected {}", expected.len())));
        }
        let mut params = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if &name != want_name {
                return Err(Error::Checkpoint(format!("expected parameter {want_name}, found {name}")));
            }
            let t = Tensor::<f32>::read_from(r)?;
            if t.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {want_shape:?}",
                    t.shape()
                )));
            }
            params.push(t.cast());
        }
        Ok((Self::from_parts(config, params), extra))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w, extra)?;
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_checkpoint(&mut std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}
