//! Procedural multi-view OLAT dataset generation.

pub mod io;
pub mod olat;
pub mod render;
pub mod sampling;
pub mod scene;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{read_dataset, read_pfm, read_scene, write_dataset, write_pfm, write_scene, SceneMeta};
pub use olat::{CameraCapture, LightCondition, LightState, OlatScene};
pub use render::{Camera, LightProjection, Object, PointLight, Room, Scene, Shape, Vec3};
pub use sampling::{sample_light_state, sample_pair, validate_pair, TrainingPair};
pub use scene::{random_scene, SceneGenConfig};

use crate::colorimetry::auto_exposure;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
    pub scene: SceneGenConfig,
    /// Cameras per test scene; defaults to the training rig size.
    pub test_cameras: Option<usize>,
    /// Per-scene exposure mapping the 95th percentile of the all-white render to 0.9.
    pub auto_exposure: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train_scenes: 64,
            test_scenes: 8,
            seed: 0,
            scene: SceneGenConfig::default(),
            test_cameras: None,
            auto_exposure: false,
        }
    }
}

/// Renders one scene; the scene seed is derived from `(seed, split, index)` so
/// each scene is reproducible on its own.
pub fn generate_scene(cfg: &GenConfig, split: u64, index: usize) -> Result<OlatScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split * (1 << 32) + index as u64);
    let mut scene_cfg = cfg.scene.clone();
    if split == 1 {
        scene_cfg.cameras = cfg.test_cameras.unwrap_or(scene_cfg.cameras);
    }
    let scene = random_scene(&mut rng, &scene_cfg)?;
    let id = format!("{index:04}");
    let mut olat = OlatScene::render(id, scene, 1.0)?;
    if cfg.auto_exposure {
        let white = olat.compose(0, &LightCondition::all(olat.num_lights(), LightState::white()))?;
        olat.exposure = auto_exposure(&white);
    }
    Ok(olat)
}

pub fn generate_split(cfg: &GenConfig, test: bool) -> Result<Vec<OlatScene>> {
    let (split, n) = if test { (1, cfg.test_scenes) } else { (0, cfg.train_scenes) };
    (0..n).map(|i| generate_scene(cfg, split, i)).collect()
}

/// Writes `out/train` and `out/test`.
pub fn generate_dataset(cfg: &GenConfig, out: &Path) -> Result<()> {
    write_dataset(&out.join("train"), &generate_split(cfg, false)?)?;
    write_dataset(&out.join("test"), &generate_split(cfg, true)?)
}
