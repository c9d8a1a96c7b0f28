//! Linear sRGB / CIE L*a*b* (D65) conversion, display encoding and CIEDE2000.

use std::f64::consts::PI;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::image::Image;

/// Linear sRGB to XYZ (IEC 61966-2-1 primaries, D65).
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white as the image of linear (1, 1, 1), so white maps to a = b = 0 exactly.
pub static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| SRGB_TO_XYZ.map(|row| row.iter().sum()));

static XYZ_TO_SRGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&SRGB_TO_XYZ));

const DELTA: f64 = 6.0 / 29.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l, self.a, self.b]
    }
}

impl From<[f64; 3]> for Lab {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    inv
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn linear_srgb_to_lab(rgb: [f64; 3]) -> Lab {
    let xyz = mat_vec(&SRGB_TO_XYZ, rgb);
    let w = *WHITE;
    let [fx, fy, fz] = [lab_f(xyz[0] / w[0]), lab_f(xyz[1] / w[1]), lab_f(xyz[2] / w[2])];
    Lab::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Inverse of [`linear_srgb_to_lab`]. Negative channels are clamped to 0 and the
/// returned flag reports whether that happened.
pub fn lab_to_linear_srgb(c: Lab) -> ([f64; 3], bool) {
    let fy = (c.l + 16.0) / 116.0;
    let fx = fy + c.a / 500.0;
    let fz = fy - c.b / 200.0;
    let w = *WHITE;
    let xyz = [w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)];
    let rgb = mat_vec(&XYZ_TO_SRGB, xyz);
    let clipped = rgb.iter().any(|&v| v < 0.0);
    (rgb.map(|v| v.max(0.0)), clipped)
}

pub fn srgb_oetf(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_eotf(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// `oetf(clamp(exposure * img, 0, 1))` per channel.
pub fn encode_display(img: &Image, exposure: f64) -> Image {
    assert!(exposure > 0.0, "exposure must be positive, got {exposure}");
    img.map(|v| srgb_oetf((exposure * v as f64).clamp(0.0, 1.0)) as f32)
}

/// Exposure that maps the 95th percentile of all channel values to 0.9.
pub fn auto_exposure(img: &Image) -> f64 {
    let mut v: Vec<f32> = img.data().iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 1.0;
    }
    let idx = ((v.len() - 1) as f64 * 0.95).round() as usize;
    let (_, p95, _) = v.select_nth_unstable_by(idx, f32::total_cmp);
    if *p95 > 0.0 {
        0.9 / *p95 as f64
    } else {
        1.0
    }
}

/// Display-referred (sRGB-encoded) RGB in [0,1] to Lab.
pub fn display_to_lab(rgb: [f64; 3]) -> Lab {
    linear_srgb_to_lab(rgb.map(srgb_eotf))
}

/// CIEDE2000 colour difference with unit weighting factors.
pub fn delta_e_2000(c1: Lab, c2: Lab) -> f64 {
    let c1s = c1.a.hypot(c1.b);
    let c2s = c2.a.hypot(c2.b);
    let cbar7 = ((c1s + c2s) / 2.0).powi(7);
    let g = 0.5 * (1.0 - (cbar7 / (cbar7 + 25f64.powi(7))).sqrt());
    let a1p = (1.0 + g) * c1.a;
    let a2p = (1.0 + g) * c2.a;
    let c1p = a1p.hypot(c1.b);
    let c2p = a2p.hypot(c2.b);
    let hue = |b: f64, a: f64| {
        if b == 0.0 && a == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(c1.b, a1p);
    let h2p = hue(c2.b, a2p);

    let dl = c2.l - c1.l;
    let dc = c2p - c1p;
    let prod = c1p * c2p;
    let dhp = if prod == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh = 2.0 * prod.sqrt() * (dhp / 2.0).to_radians().sin();

    let lbar = (c1.l + c2.l) / 2.0;
    let cbarp = (c1p + c2p) / 2.0;
    let hbarp = if prod == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };
    let t = 1.0 - 0.17 * (hbarp - 30.0).to_radians().cos()
        + 0.24 * (2.0 * hbarp).to_radians().cos()
        + 0.32 * (3.0 * hbarp + 6.0).to_radians().cos()
        - 0.20 * (4.0 * hbarp - 63.0).to_radians().cos();
    let dtheta = 30.0 * (-((hbarp - 275.0) / 25.0).powi(2)).exp();
    let cbarp7 = cbarp.powi(7);
    let rc = 2.0 * (cbarp7 / (cbarp7 + 25f64.powi(7))).sqrt();
    let l50 = (lbar - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * cbarp;
    let sh = 1.0 + 0.015 * cbarp * t;
    let rt = -(2.0 * dtheta * PI / 180.0).sin() * rc;

    let (tl, tc, th) = (dl / sl, dc / sc, dh / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).max(0.0).sqrt()
}
