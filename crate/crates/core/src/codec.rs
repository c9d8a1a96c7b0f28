//! Invertible space-to-depth codec between display images and latents.

use mvrelight_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

/// Encoder/decoder pair between `[H, W, 3]` display images and `[C, H/f, W/f]` latents.
pub trait Codec: Send + Sync {
    fn factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, img: &Image) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Image>;
}

/// `x ↦ 2x − 1` followed by an f×f space-to-depth fold. Latent channel
/// `c·f² + dy·f + dx` holds colour `c` at sub-pixel offset `(dy, dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceToDepth {
    pub factor: usize,
}

impl Default for SpaceToDepth {
    fn default() -> Self {
        Self { factor: 2 }
    }
}

impl SpaceToDepth {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Contract("codec factor must be positive".into()));
        }
        Ok(Self { factor })
    }

    fn check_dims(&self, w: usize, h: usize) -> Result<()> {
        let f = self.factor;
        if !w.is_multiple_of(f) || !h.is_multiple_of(f) {
            return Err(Error::Contract(format!("image {w}x{h} is not divisible by codec factor {f}")));
        }
        Ok(())
    }

    /// Encode a stack of same-sized views into `[N, C, h, w]`.
    pub fn encode_views(&self, views: &[Image]) -> Result<Tensor> {
        let first = views.first().ok_or_else(|| Error::Contract("no views to encode".into()))?;
        let mut data = Vec::new();
        for v in views {
            first.same_dims(v)?;
            data.extend_from_slice(self.encode(v)?.data());
        }
        let f = self.factor;
        let shape = [views.len(), 3 * f * f, first.height() / f, first.width() / f];
        Ok(Tensor::from_vec(&shape, data)?)
    }

    pub fn decode_views(&self, z: &Tensor) -> Result<Vec<Image>> {
        if z.rank() != 4 {
            return Err(Error::Contract(format!("expected [N, C, h, w], got {:?}", z.shape())));
        }
        let per = z.numel() / z.dim(0);
        (0..z.dim(0))
            .map(|i| {
                let view = Tensor::from_vec(&z.shape()[1..], z.data()[i * per..(i + 1) * per].to_vec())?;
                self.decode(&view)
            })
            .collect()
    }

    /// Unclamped decode without the final clamp, as `[..., 3, H, W]`.
    pub fn decode_raw_var<E: Element>(&self, tape: &Tape<E>, z: &Var<E>) -> Result<Var<E>> {
        let f = self.factor;
        let s = z.shape();
        let r = s.len();
        if r < 3 || s[r - 3] != 3 * f * f {
            return Err(Error::Contract(format!("latent {s:?} does not have {} channels", 3 * f * f)));
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let lead = &s[..r - 3];
        let mut split = lead.to_vec();
        split.extend([3, f, f, h, w]);
        let x = tape.reshape(z, &split)?;
        let b = lead.len();
        let mut axes: Vec<usize> = (0..b).collect();
        axes.extend([b, b + 3, b + 1, b + 4, b + 2]);
        let x = tape.permute(&x, &axes)?;
        let mut out = lead.to_vec();
        out.extend([3, h * f, w * f]);
        let x = tape.reshape(&x, &out)?;
        Ok(tape.add_scalar(&tape.mul_scalar(&x, 0.5), 0.5))
    }

    /// Differentiable decode, `[..., C, h, w] -> [..., 3, H, W]`, clamped to [0,1].
    pub fn decode_var<E: Element>(&self, tape: &Tape<E>, z: &Var<E>) -> Result<Var<E>> {
        let x = self.decode_raw_var(tape, z)?;
        Ok(tape.clamp(&x, 0.0, 1.0))
    }
}

impl Codec for SpaceToDepth {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn encode(&self, img: &Image) -> Result<Tensor> {
        let (w, h) = img.dims();
        self.check_dims(w, h)?;
        let f = self.factor;
        let (lw, lh) = (w / f, h / f);
        let c_out = 3 * f * f;
        let mut out = vec![0.0f32; c_out * lh * lw];
        let src = img.data();
        for y in 0..h {
            for x in 0..w {
                let (i, dy, j, dx) = (y / f, y % f, x / f, x % f);
                for c in 0..3 {
                    let ch = c * f * f + dy * f + dx;
                    out[(ch * lh + i) * lw + j] = src[(y * w + x) * 3 + c] * 2.0 - 1.0;
                }
            }
        }
        Ok(Tensor::from_vec(&[c_out, lh, lw], out)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Image> {
        let f = self.factor;
        let c_in = 3 * f * f;
        if z.rank() != 3 || z.dim(0) != c_in {
            return Err(Error::Contract(format!("latent {:?} does not have {c_in} channels", z.shape())));
        }
        let (lh, lw) = (z.dim(1), z.dim(2));
        let (h, w) = (lh * f, lw * f);
        let mut out = vec![0.0f32; h * w * 3];
        let src = z.data();
        for y in 0..h {
            for x in 0..w {
                let (i, dy, j, dx) = (y / f, y % f, x / f, x % f);
                for c in 0..3 {
                    let ch = c * f * f + dy * f + dx;
                    out[(y * w + x) * 3 + c] = ((src[(ch * lh + i) * lw + j] + 1.0) / 2.0).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(w, h, out)
    }
}
