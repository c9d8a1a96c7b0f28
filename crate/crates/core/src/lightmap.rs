//! Parametric light edits and their 4-channel lightmap rasterization.

use mvrelight_tensor::Tensor;
use serde::{Deserialize, Serialize, Serializer};

use crate::colorimetry::Lab;
use crate::{Error, Result};

pub const CHANNELS: usize = 4;

/// Default marker radius as a fraction of image width.
pub const DEFAULT_RADIUS_FRAC: f64 = 0.04;

fn compact_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        s.serialize_i64(*v as i64)
    } else {
        s.serialize_f64(*v)
    }
}

fn compact_lab<S: Serializer>(v: &[f64; 3], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeTuple;
    let mut t = s.serialize_tuple(3)?;
    for x in v {
        t.serialize_element(&Compact(*x))?;
    }
    t.end()
}

fn compact_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => compact_f64(x, s),
        None => s.serialize_none(),
    }
}

struct Compact(f64);

impl Serialize for Compact {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        compact_f64(&self.0, s)
    }
}

/// One marker in reference-view pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightEdit {
    pub light: usize,
    #[serde(serialize_with = "compact_f64")]
    pub x: f64,
    #[serde(serialize_with = "compact_f64")]
    pub y: f64,
    pub active: bool,
    #[serde(serialize_with = "compact_lab")]
    pub lab: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "compact_opt")]
    pub radius: Option<f64>,
}

impl LightEdit {
    pub fn on(light: usize, x: f64, y: f64, lab: Lab, radius: f64) -> Self {
        Self { light, x, y, active: true, lab: lab.to_array(), radius: Some(radius) }
    }

    pub fn off(light: usize, x: f64, y: f64, radius: f64) -> Self {
        Self { light, x, y, active: false, lab: [0.0; 3], radius: Some(radius) }
    }

    pub fn color(&self) -> Lab {
        Lab::from(self.lab)
    }

    pub fn radius_for(&self, width: usize) -> f64 {
        self.radius.unwrap_or(DEFAULT_RADIUS_FRAC * width as f64)
    }

    /// Channel values inside the disc.
    pub fn encoding(&self) -> [f32; 4] {
        if !self.active {
            return [-1.0, 0.0, 0.0, 0.0];
        }
        let [l, a, b] = self.lab;
        let n = |v: f64| v.clamp(-1.0, 1.0) as f32;
        [1.0, n(l / 50.0 - 1.0), n(a / 127.0), n(b / 127.0)]
    }
}

/// The JSON document shared by the CLI, HTTP API and UI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditsDoc {
    pub edits: Vec<LightEdit>,
}

impl EditsDoc {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("edits serialize")
    }
}

/// `H × W × 4` conditioning image; channel 0 is activation, 1–3 normalized Lab.
#[derive(Clone, Debug, PartialEq)]
pub struct Lightmap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Lightmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * CHANNELS] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> [f32; 4] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    /// Area-average downsample by `f`.
    pub fn downsample(&self, f: usize) -> Result<Self> {
        if f == 0 || !self.width.is_multiple_of(f) || !self.height.is_multiple_of(f) {
            return Err(Error::Contract(format!(
                "lightmap {}x{} is not divisible by {f}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / f, self.height / f);
        let mut data = vec![0.0f32; w * h * CHANNELS];
        let inv = 1.0 / (f * f) as f32;
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f32;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += self.data[((y * f + dy) * self.width + x * f + dx) * CHANNELS + c];
                        }
                    }
                    data[(y * w + x) * CHANNELS + c] = acc * inv;
                }
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// Channel-first `[4, H, W]` tensor for the network.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut out = vec![0.0; CHANNELS * n];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * n + i] = px[c];
            }
        }
        Tensor::from_vec(&[CHANNELS, self.height, self.width], out).expect("shape matches")
    }
}

pub fn validate_edits(edits: &[LightEdit], width: usize, height: usize) -> Result<()> {
    for (i, e) in edits.iter().enumerate() {
        let r = e.radius_for(width);
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Contract(format!("edit {i}: radius must be positive, got {r}")));
        }
        if !(e.x >= 0.0 && e.x < width as f64 && e.y >= 0.0 && e.y < height as f64) {
            return Err(Error::Contract(format!(
                "edit {i}: centre ({}, {}) lies outside the {width}x{height} image",
                e.x, e.y
            )));
        }
        if e.lab.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("edit {i}: non-finite colour")));
        }
    }
    for i in 0..edits.len() {
        for j in i + 1..edits.len() {
            let (a, b) = (&edits[i], &edits[j]);
            let d = (a.x - b.x).hypot(a.y - b.y);
            if d < a.radius_for(width) + b.radius_for(width) {
                return Err(Error::Overlap { first: i, second: j });
            }
        }
    }
    Ok(())
}

/// Rasterize edits at `width × height`. A pixel belongs to a disc when its
/// centre `(x + ½, y + ½)` is within the radius.
pub fn build_lightmap(edits: &[LightEdit], width: usize, height: usize) -> Result<Lightmap> {
    validate_edits(edits, width, height)?;
    let mut map = Lightmap::zeros(width, height);
    for e in edits {
        let r = e.radius_for(width);
        let enc = e.encoding();
        let y0 = (e.y - r).floor().max(0.0) as usize;
        let y1 = ((e.y + r).ceil() as usize).min(height);
        let x0 = (e.x - r).floor().max(0.0) as usize;
        let x1 = ((e.x + r).ceil() as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - e.x, y as f64 + 0.5 - e.y);
                if dx * dx + dy * dy <= r * r {
                    let i = (y * width + x) * CHANNELS;
                    map.data[i..i + CHANNELS].copy_from_slice(&enc);
                }
            }
        }
    }
    Ok(map)
}

/// Lightmap at latent resolution as `[4, H/f, W/f]`.
pub fn to_latent_resolution(map: &Lightmap, f: usize) -> Result<Tensor> {
    Ok(map.downsample(f)?.to_tensor())
}
