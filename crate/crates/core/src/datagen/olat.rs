//! OLAT captures and their linear composition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{LightProjection, Scene};
use crate::colorimetry::{lab_to_linear_srgb, Lab};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraCapture {
    pub ambient: Image,
    pub olat: Vec<Image>,
}

/// Renders of one scene from every camera: ambient plus one image per light.
#[derive(Clone, Debug, PartialEq)]
pub struct OlatScene {
    pub id: String,
    pub scene: Scene,
    pub exposure: f64,
    pub captures: Vec<CameraCapture>,
    /// `projections[camera][light]`.
    pub projections: Vec<Vec<LightProjection>>,
}

impl OlatScene {
    pub fn render(id: impl Into<String>, scene: Scene, exposure: f64) -> Result<Self> {
        let n_cam = scene.cameras.len();
        let n_light = scene.lights.len();
        let tasks: Vec<(usize, Option<usize>)> =
            (0..n_cam).flat_map(|c| std::iter::once((c, None)).chain((0..n_light).map(move |k| (c, Some(k))))).collect();
        let images: Vec<Image> = tasks
            .par_iter()
            .map(|&(c, k)| match k {
                None => scene.render_ambient(c),
                Some(k) => scene.render_olat(c, k),
            })
            .collect::<Result<_>>()?;
        let mut it = images.into_iter();
        let captures = (0..n_cam)
            .map(|_| {
                let ambient = it.next().expect("ambient rendered");
                CameraCapture { ambient, olat: it.by_ref().take(n_light).collect() }
            })
            .collect();
        let projections = (0..n_cam)
            .map(|c| (0..n_light).map(|k| scene.project_light(c, k)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok(Self { id: id.into(), scene, exposure, captures, projections })
    }

    pub fn num_cameras(&self) -> usize {
        self.captures.len()
    }

    pub fn num_lights(&self) -> usize {
        self.scene.lights.len()
    }

    pub fn visible_lights(&self, camera: usize) -> Vec<usize> {
        (0..self.num_lights()).filter(|&k| self.projections[camera][k].visible).collect()
    }

    /// `ambient + Σ_k s_k ⊙ olat[k]`.
    pub fn compose(&self, camera: usize, cond: &LightCondition) -> Result<Image> {
        let cap = self
            .captures
            .get(camera)
            .ok_or_else(|| Error::Contract(format!("camera {camera} out of range")))?;
        if cond.lights.len() != cap.olat.len() {
            return Err(Error::Contract(format!(
                "condition covers {} lights, scene has {}",
                cond.lights.len(),
                cap.olat.len()
            )));
        }
        let mut out = cap.ambient.clone();
        for (k, img) in cap.olat.iter().enumerate() {
            let s = cond.scale(k);
            if s != [0.0; 3] {
                out.add_scaled(img, s)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum LightState {
    Off,
    On { lab: Lab },
}

impl LightState {
    pub fn white() -> Self {
        Self::On { lab: Lab::new(100.0, 0.0, 0.0) }
    }

    /// Linear RGB multiplier on the light's OLAT image.
    pub fn scale(&self) -> [f32; 3] {
        match self {
            Self::Off => [0.0; 3],
            Self::On { lab } => lab_to_linear_srgb(*lab).0.map(|v| v as f32),
        }
    }

    pub fn is_on(&self) -> bool {
        matches!(self, Self::On { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightCondition {
    pub lights: Vec<LightState>,
}

impl LightCondition {
    pub fn all(n: usize, state: LightState) -> Self {
        Self { lights: vec![state; n] }
    }

    pub fn scale(&self, k: usize) -> [f32; 3] {
        self.lights[k].scale()
    }

    pub fn scales(&self) -> Vec<[f32; 3]> {
        (0..self.lights.len()).map(|k| self.scale(k)).collect()
    }
}
