//! Direct-illumination ray caster: diffuse room, spheres and boxes, point lights.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

const EPS: f64 = 1e-6;
/// Radiance of a light's visible bulb in its own OLAT image.
pub const BULB_RADIANCE: f32 = 1.0;
/// Sub-pixel samples per axis.
pub const SUPERSAMPLE: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self([x, y, z])
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }

    pub fn y(self) -> f64 {
        self.0[1]
    }

    pub fn z(self) -> f64 {
        self.0[2]
    }

    pub fn dot(self, o: Self) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Self) -> Self {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Self([b * f - c * e, c * d - a * f, a * e - b * d])
    }

    pub fn length(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (1.0 / self.length())
    }
}

impl Add for Vec3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self(self.0.map(|v| v * s))
    }
}

impl Neg for Vec3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self(self.0.map(|v| -v))
    }
}

/// Axis-aligned room seen from inside. Face albedo order: −x, +x, −y (floor), +y, −z, +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: [[f32; 3]; 6],
}

impl Room {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p.0[i] > self.min.0[i] && p.0[i] < self.max.0[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub albedo: [f32; 3],
}

/// Unit white isotropic point emitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub vfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub tan_half: f64,
    pub aspect: f64,
}

impl Camera {
    pub fn frame(&self) -> Result<Frame> {
        let d = self.look_at - self.position;
        if !(d.length() > EPS) {
            return Err(Error::Contract("degenerate camera: look_at equals position".into()));
        }
        let forward = d.normalized();
        let right = forward.cross(Vec3::new(0.0, 1.0, 0.0));
        if !(right.length() > EPS) {
            return Err(Error::Contract("degenerate camera: view direction is vertical".into()));
        }
        if !(self.vfov_deg > 0.0 && self.vfov_deg < 180.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Contract("degenerate camera intrinsics".into()));
        }
        let right = right.normalized();
        Ok(Frame {
            right,
            up: right.cross(forward),
            forward,
            tan_half: (self.vfov_deg.to_radians() / 2.0).tan(),
            aspect: self.width as f64 / self.height as f64,
        })
    }

    /// Primary ray direction through continuous pixel coordinates.
    pub fn ray(&self, frame: &Frame, px: f64, py: f64) -> Vec3 {
        let sx = (2.0 * px / self.width as f64 - 1.0) * frame.tan_half * frame.aspect;
        let sy = (1.0 - 2.0 * py / self.height as f64) * frame.tan_half;
        (frame.forward + frame.right * sx + frame.up * sy).normalized()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: Room,
    pub objects: Vec<Object>,
    pub lights: Vec<PointLight>,
    pub ambient_level: f64,
    pub cameras: Vec<Camera>,
    pub bulb_radius: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub albedo: [f32; 3],
}

fn hit_sphere(o: Vec3, d: Vec3, center: Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let oc = o - center;
    let b = oc.dot(d);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > EPS { -b - s } else { -b + s };
    (t > EPS).then(|| (t, (o + d * t - center) * (1.0 / radius)))
}

fn hit_cuboid(o: Vec3, d: Vec3, min: Vec3, max: Vec3) -> Option<(f64, Vec3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut n0, mut n1) = (Vec3::default(), Vec3::default());
    for i in 0..3 {
        if d.0[i].abs() < 1e-12 {
            if o.0[i] < min.0[i] || o.0[i] > max.0[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d.0[i];
        let (mut a, mut b) = ((min.0[i] - o.0[i]) * inv, (max.0[i] - o.0[i]) * inv);
        let mut na = Vec3::default();
        na.0[i] = -1.0;
        let mut nb = Vec3::default();
        nb.0[i] = 1.0;
        if a > b {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut na, &mut nb);
        }
        if a > t0 {
            t0 = a;
            n0 = na;
        }
        if b < t1 {
            t1 = b;
            n1 = nb;
        }
        if t0 > t1 {
            return None;
        }
    }
    if t0 > EPS {
        Some((t0, n0))
    } else if t1 > EPS {
        Some((t1, -n1))
    } else {
        None
    }
}

impl Scene {
    fn hit_objects(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for obj in &self.objects {
            let h = match obj.shape {
                Shape::Sphere { center, radius } => hit_sphere(o, d, center, radius),
                Shape::Cuboid { min, max } => hit_cuboid(o, d, min, max),
            };
            if let Some((t, n)) = h {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, point: o + d * t, normal: n, albedo: obj.albedo });
                }
            }
        }
        best
    }

    fn hit_room(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let (mut t_exit, mut face) = (f64::INFINITY, usize::MAX);
        for i in 0..3 {
            if d.0[i] > 1e-12 {
                let t = (self.room.max.0[i] - o.0[i]) / d.0[i];
                if t < t_exit {
                    (t_exit, face) = (t, 2 * i + 1);
                }
            } else if d.0[i] < -1e-12 {
                let t = (self.room.min.0[i] - o.0[i]) / d.0[i];
                if t < t_exit {
                    (t_exit, face) = (t, 2 * i);
                }
            }
        }
        if face == usize::MAX || t_exit <= EPS {
            return None;
        }
        let mut normal = Vec3::default();
        normal.0[face / 2] = if face % 2 == 0 { 1.0 } else { -1.0 };
        Some(Hit { t: t_exit, point: o + d * t_exit, normal, albedo: self.room.albedo[face] })
    }

    /// Nearest surface along a unit-direction ray.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        match (self.hit_objects(o, d), self.hit_room(o, d)) {
            (Some(a), Some(b)) => Some(if a.t <= b.t { a } else { b }),
            (a, b) => a.or(b),
        }
    }

    /// True when geometry blocks the open segment from `from` to `to`.
    pub fn occluded(&self, from: Vec3, to: Vec3) -> bool {
        let delta = to - from;
        let dist = delta.length();
        let d = delta * (1.0 / dist);
        self.intersect(from, d).is_some_and(|h| h.t < dist - 1e-5)
    }

    fn camera(&self, camera: usize) -> Result<&Camera> {
        self.cameras.get(camera).ok_or_else(|| Error::Contract(format!("camera {camera} out of range")))
    }

    /// Direct lighting with per-light linear RGB weights, plus each light's bulb glow.
    pub fn render_direct(&self, camera: usize, weights: &[[f32; 3]]) -> Result<Image> {
        if weights.len() != self.lights.len() {
            return Err(Error::Contract(format!("{} weights for {} lights", weights.len(), self.lights.len())));
        }
        let active: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] != [0.0; 3]).collect();
        self.render_with(camera, |o, d, hit| {
            let mut rgb = [0.0f64; 3];
            for &k in &active {
                let w = weights[k];
                let lp = self.lights[k].position;
                if let Some(h) = hit {
                    let shade = self.shade(h, lp);
                    for c in 0..3 {
                        rgb[c] += w[c] as f64 * shade * h.albedo[c] as f64 / PI;
                    }
                }
                if let Some((tb, _)) = hit_sphere(o, d, lp, self.bulb_radius) {
                    if hit.is_none_or(|h| tb < h.t) {
                        for c in 0..3 {
                            rgb[c] += (w[c] * BULB_RADIANCE) as f64;
                        }
                    }
                }
            }
            rgb
        })
    }

    /// `max(0, n·l)·V / d²` for a hit point and light position.
    fn shade(&self, h: &Hit, light: Vec3) -> f64 {
        let to_light = light - h.point;
        let d2 = to_light.dot(to_light);
        let l = to_light * (1.0 / d2.sqrt());
        let cos = h.normal.dot(l);
        if cos <= 0.0 {
            return 0.0;
        }
        if self.occluded(h.point + h.normal * 1e-6, light) {
            return 0.0;
        }
        cos / d2
    }

    pub fn render_olat(&self, camera: usize, light: usize) -> Result<Image> {
        if light >= self.lights.len() {
            return Err(Error::Contract(format!("light {light} out of range")));
        }
        let mut w = vec![[0.0f32; 3]; self.lights.len()];
        w[light] = [1.0; 3];
        self.render_direct(camera, &w)
    }

    /// Uniform-irradiance ambient pass: `albedo · ambient_level` on every hit.
    pub fn render_ambient(&self, camera: usize) -> Result<Image> {
        let level = self.ambient_level;
        self.render_with(camera, |_, _, hit| match hit {
            Some(h) => h.albedo.map(|a| a as f64 * level),
            None => [0.0; 3],
        })
    }

    fn render_with(&self, camera: usize, f: impl Fn(Vec3, Vec3, Option<&Hit>) -> [f64; 3]) -> Result<Image> {
        let cam = self.camera(camera)?;
        let frame = cam.frame()?;
        let (w, h) = (cam.width, cam.height);
        let mut data = vec![0.0f32; w * h * 3];
        let s = SUPERSAMPLE;
        let norm = 1.0 / (s * s) as f64;
        for py in 0..h {
            for px in 0..w {
                let mut acc = [0.0f64; 3];
                for sy in 0..s {
                    for sx in 0..s {
                        let fx = px as f64 + (sx as f64 + 0.5) / s as f64;
                        let fy = py as f64 + (sy as f64 + 0.5) / s as f64;
                        let d = cam.ray(&frame, fx, fy);
                        let hit = self.intersect(cam.position, d);
                        let rgb = f(cam.position, d, hit.as_ref());
                        for c in 0..3 {
                            acc[c] += rgb[c];
                        }
                    }
                }
                let i = (py * w + px) * 3;
                for c in 0..3 {
                    data[i + c] = (acc[c] * norm) as f32;
                }
            }
        }
        Image::new(w, h, data)
    }

    /// Pixel position of a light's centre and whether it is seen unobstructed.
    pub fn project_light(&self, camera: usize, light: usize) -> Result<LightProjection> {
        let cam = self.camera(camera)?;
        let lp = self
            .lights
            .get(light)
            .ok_or_else(|| Error::Contract(format!("light {light} out of range")))?
            .position;
        let frame = cam.frame()?;
        let rel = lp - cam.position;
        let zc = rel.dot(frame.forward);
        if zc <= EPS {
            return Ok(LightProjection::BEHIND);
        }
        let sx = rel.dot(frame.right) / (zc * frame.tan_half * frame.aspect);
        let sy = rel.dot(frame.up) / (zc * frame.tan_half);
        let x = (sx + 1.0) / 2.0 * cam.width as f64;
        let y = (1.0 - sy) / 2.0 * cam.height as f64;
        let in_frame = x >= 0.0 && x < cam.width as f64 && y >= 0.0 && y < cam.height as f64;
        let visible = in_frame && !self.occluded(cam.position, lp);
        Ok(LightProjection { x, y, visible })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightProjection {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl LightProjection {
    /// Sentinel for a light behind the camera.
    pub const BEHIND: Self = Self { x: -1.0, y: -1.0, visible: false };
}
