//! On-the-fly training pairs from OLAT scenes.

use rand::seq::SliceRandom;
use rand::Rng;

use super::olat::{LightCondition, LightState, OlatScene};
use crate::colorimetry::{encode_display, Lab};
use crate::image::Image;
use crate::lightmap::{build_lightmap, LightEdit, Lightmap, DEFAULT_RADIUS_FRAC};
use crate::{Error, Result};

pub const P_OFF: f64 = 0.25;
pub const L_RANGE: (f64, f64) = (20.0, 100.0);
pub const AB_RADIUS: f64 = 60.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub scene: String,
    /// Camera indices, reference first.
    pub views: Vec<usize>,
    pub src: Vec<Image>,
    pub tar: Vec<Image>,
    pub lightmap: Lightmap,
    pub edits: Vec<LightEdit>,
    pub edited_lights: Vec<usize>,
    pub src_cond: LightCondition,
    pub tar_cond: LightCondition,
}

pub fn sample_light_state<R: Rng + ?Sized>(rng: &mut R) -> LightState {
    if rng.random_bool(P_OFF) {
        return LightState::Off;
    }
    let l = rng.random_range(L_RANGE.0..=L_RANGE.1);
    let r = AB_RADIUS * rng.random::<f64>().sqrt();
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    LightState::On { lab: Lab::new(l, r * th.cos(), r * th.sin()) }
}

fn edit_for(state: &LightState, light: usize, x: f64, y: f64, radius: f64) -> LightEdit {
    match state {
        LightState::Off => LightEdit::off(light, x, y, radius),
        LightState::On { lab } => LightEdit::on(light, x, y, *lab, radius),
    }
}

/// Samples a reference camera, an edited light subset visible there, src/tar
/// conditions and `n_views − 1` further cameras. The camera order is a full
/// shuffle truncated to `n_views`, so the first views agree across view counts
/// for the same generator state.
pub fn sample_pair<R: Rng + ?Sized>(olat: &OlatScene, rng: &mut R, n_views: usize) -> Result<TrainingPair> {
    let n_cam = olat.num_cameras();
    if n_views < 1 || n_views > n_cam {
        return Err(Error::Contract(format!("{n_views} views requested from a {n_cam}-camera scene")));
    }
    let candidates: Vec<usize> = (0..n_cam).filter(|&c| !olat.visible_lights(c).is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::Contract(format!("scene {} has no visible light in any camera", olat.id)));
    }
    let reference = candidates[rng.random_range(0..candidates.len())];
    let cam = &olat.scene.cameras[reference];
    let radius = DEFAULT_RADIUS_FRAC * cam.width as f64;

    let mut visible = olat.visible_lights(reference);
    visible.shuffle(rng);
    let mut chosen: Vec<usize> = Vec::new();
    for &k in &visible {
        let p = olat.projections[reference][k];
        let clear = chosen.iter().all(|&j| {
            let q = olat.projections[reference][j];
            (p.x - q.x).hypot(p.y - q.y) >= 2.0 * radius
        });
        if clear {
            chosen.push(k);
        }
    }
    let keep = rng.random_range(1..=chosen.len());
    chosen.truncate(keep);
    chosen.sort_unstable();

    let n_light = olat.num_lights();
    let shared: Vec<LightState> = (0..n_light).map(|_| sample_light_state(rng)).collect();
    let mut src_cond = LightCondition { lights: shared.clone() };
    let mut tar_cond = LightCondition { lights: shared };
    for &k in &chosen {
        src_cond.lights[k] = sample_light_state(rng);
        let mut tar = sample_light_state(rng);
        while !src_cond.lights[k].is_on() && !tar.is_on() {
            tar = sample_light_state(rng);
        }
        tar_cond.lights[k] = tar;
    }

    let mut others: Vec<usize> = (0..n_cam).filter(|&c| c != reference).collect();
    others.shuffle(rng);
    let mut views = vec![reference];
    views.extend(others.into_iter().take(n_views - 1));

    let edits: Vec<LightEdit> = chosen
        .iter()
        .map(|&k| {
            let p = olat.projections[reference][k];
            edit_for(&tar_cond.lights[k], k, p.x, p.y, radius)
        })
        .collect();
    let lightmap = build_lightmap(&edits, cam.width, cam.height)?;

    let display = |c: usize, cond: &LightCondition| -> Result<Image> {
        Ok(encode_display(&olat.compose(c, cond)?, olat.exposure))
    };
    let src = views.iter().map(|&c| display(c, &src_cond)).collect::<Result<_>>()?;
    let tar = views.iter().map(|&c| display(c, &tar_cond)).collect::<Result<_>>()?;
    Ok(TrainingPair {
        scene: olat.id.clone(),
        views,
        src,
        tar,
        lightmap,
        edits,
        edited_lights: chosen,
        src_cond,
        tar_cond,
    })
}

/// Independent re-check of a pair's contract against fresh projections.
pub fn validate_pair(olat: &OlatScene, pair: &TrainingPair) -> Result<()> {
    let reference = *pair.views.first().ok_or_else(|| Error::Contract("pair has no views".into()))?;
    if pair.edited_lights.is_empty() {
        return Err(Error::Contract("pair edits no light".into()));
    }
    for &k in &pair.edited_lights {
        if !olat.scene.project_light(reference, k)?.visible {
            return Err(Error::Contract(format!("edited light {k} is not visible in reference camera {reference}")));
        }
    }
    for k in 0..olat.num_lights() {
        if !pair.edited_lights.contains(&k) && pair.src_cond.lights[k] != pair.tar_cond.lights[k] {
            return Err(Error::Contract(format!("non-edited light {k} differs between src and tar")));
        }
    }
    let mut seen = pair.views.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != pair.views.len() {
        return Err(Error::Contract("views repeat a camera".into()));
    }
    Ok(())
}
