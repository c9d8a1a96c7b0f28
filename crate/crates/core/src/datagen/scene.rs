//! Procedural room scenes with a camera rig on one side and lights across the room.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{Camera, Object, PointLight, Room, Scene, Shape, Vec3};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub min_lights: usize,
    pub max_lights: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub ambient: (f64, f64),
    pub vfov_deg: f64,
    pub bulb_radius: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            cameras: 4,
            min_lights: 1,
            max_lights: 3,
            min_objects: 2,
            max_objects: 4,
            ambient: (0.03, 0.08),
            vfov_deg: 60.0,
            bulb_radius: 0.07,
        }
    }
}

const ROOM_MIN: Vec3 = Vec3::new(-2.0, 0.0, -2.0);
const ROOM_MAX: Vec3 = Vec3::new(2.0, 2.4, 2.0);

fn tint<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32, spread: f32) -> [f32; 3] {
    let base = rng.random_range(lo..hi);
    [0; 3].map(|_| (base + rng.random_range(-spread..spread)).clamp(0.02, 0.98))
}

fn object_clearance(obj: &Object, p: Vec3) -> f64 {
    match obj.shape {
        Shape::Sphere { center, radius } => (p - center).length() - radius,
        Shape::Cuboid { min, max } => {
            let d = Vec3::new(
                (min.x() - p.x()).max(p.x() - max.x()).max(0.0),
                (min.y() - p.y()).max(p.y() - max.y()).max(0.0),
                (min.z() - p.z()).max(p.z() - max.z()).max(0.0),
            );
            let outside = d.length();
            if outside > 0.0 {
                outside
            } else {
                -1.0
            }
        }
    }
}

/// Camera rig: evenly spread along x near the +z wall, looking into the room.
pub fn camera_rig<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneGenConfig) -> Vec<Camera> {
    let n = cfg.cameras;
    let target = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(0.8..1.1), rng.random_range(-0.8..-0.4));
    (0..n)
        .map(|c| {
            let u = if n == 1 { 0.5 } else { c as f64 / (n - 1) as f64 };
            let x = -1.2 + 2.4 * u + rng.random_range(-0.05..0.05);
            Camera {
                position: Vec3::new(x, rng.random_range(1.0..1.4), 1.7 + rng.random_range(-0.1..0.1)),
                look_at: target + Vec3::new(0.3 * (u - 0.5), 0.0, 0.0),
                vfov_deg: cfg.vfov_deg,
                width: cfg.width,
                height: cfg.height,
            }
        })
        .collect()
}

/// A random scene where at least one light is visible from at least one camera.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneGenConfig) -> Result<Scene> {
    if cfg.cameras < 2 || cfg.min_lights == 0 || cfg.min_lights > cfg.max_lights {
        return Err(Error::Contract("scene generation needs >= 2 cameras and >= 1 light".into()));
    }
    for _ in 0..1000 {
        let scene = try_scene(rng, cfg);
        let any_visible = (0..scene.cameras.len())
            .any(|c| (0..scene.lights.len()).any(|k| scene.project_light(c, k).is_ok_and(|p| p.visible)));
        if any_visible {
            return Ok(scene);
        }
    }
    Err(Error::Contract("could not place a visible light".into()))
}

fn try_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneGenConfig) -> Scene {
    let mut albedo = [[0.0; 3]; 6];
    for a in albedo.iter_mut() {
        *a = tint(rng, 0.45, 0.85, 0.08);
    }
    let room = Room { min: ROOM_MIN, max: ROOM_MAX, albedo };

    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let (x, z) = (rng.random_range(-1.4..1.4), rng.random_range(-1.6..0.4));
        let shape = if rng.random_bool(0.5) {
            let radius = rng.random_range(0.2..0.45);
            Shape::Sphere { center: Vec3::new(x, radius, z), radius }
        } else {
            let (hx, hz) = (rng.random_range(0.15..0.4), rng.random_range(0.15..0.4));
            let h = rng.random_range(0.3..1.0);
            Shape::Cuboid { min: Vec3::new(x - hx, 0.0, z - hz), max: Vec3::new(x + hx, h, z + hz) }
        };
        objects.push(Object { shape, albedo: tint(rng, 0.15, 0.9, 0.25) });
    }

    let n_lights = rng.random_range(cfg.min_lights..=cfg.max_lights);
    let mut lights: Vec<PointLight> = Vec::with_capacity(n_lights);
    while lights.len() < n_lights {
        let p = Vec3::new(rng.random_range(-1.6..1.6), rng.random_range(0.5..2.1), rng.random_range(-1.8..-0.1));
        let clear = objects.iter().all(|o| object_clearance(o, p) > cfg.bulb_radius + 0.05)
            && lights.iter().all(|l| (l.position - p).length() > 0.5);
        if clear {
            lights.push(PointLight { position: p });
        }
    }

    Scene {
        room,
        objects,
        lights,
        ambient_level: rng.random_range(cfg.ambient.0..cfg.ambient.1),
        cameras: camera_rig(rng, cfg),
        bulb_radius: cfg.bulb_radius,
    }
}
