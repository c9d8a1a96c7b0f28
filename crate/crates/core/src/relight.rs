//! End-to-end one-step relighting of a multi-view image set.

use crate::bridge::{one_step_infer, BridgeConfig, VelocityModel};
use crate::codec::{Codec, SpaceToDepth};
use crate::image::Image;
use crate::lightmap::{build_lightmap, to_latent_resolution, LightEdit};
use crate::model::VelocityNet;
use crate::{Error, Result};

/// Encode all views, rasterize the edits on view 0, run one forward pass over
/// every view jointly and decode.
pub fn relight_views(
    net: &VelocityNet,
    codec: &SpaceToDepth,
    bridge: &BridgeConfig,
    views: &[Image],
    edits: &[LightEdit],
) -> Result<Vec<Image>> {
    let cfg = net.config();
    relight_views_with(net, (cfg.latent_width, cfg.latent_height), codec, bridge, views, edits)
}

/// [`relight_views`] for any velocity model with a fixed `(width, height)` latent grid.
pub fn relight_views_with(
    model: &impl VelocityModel,
    latent_dims: (usize, usize),
    codec: &SpaceToDepth,
    bridge: &BridgeConfig,
    views: &[Image],
    edits: &[LightEdit],
) -> Result<Vec<Image>> {
    let first = views.first().ok_or_else(|| Error::Contract("at least one view is required".into()))?;
    if edits.is_empty() {
        return Err(Error::Contract("at least one light edit is required".into()));
    }
    for (i, v) in views.iter().enumerate() {
        if v.dims() != first.dims() {
            return Err(Error::Contract(format!(
                "view {i} is {}x{}, view 0 is {}x{}",
                v.width(),
                v.height(),
                first.width(),
                first.height()
            )));
        }
    }
    let f = codec.factor();
    let (lw, lh) = latent_dims;
    if first.width() != lw * f || first.height() != lh * f {
        return Err(Error::Contract(format!(
            "model expects {}x{} images, got {}x{}",
            lw * f,
            lh * f,
            first.width(),
            first.height()
        )));
    }
    let map = build_lightmap(edits, first.width(), first.height())?;
    let lm = to_latent_resolution(&map, f)?;
    let z_src = codec.encode_views(views)?;
    let z_hat = one_step_infer(model, &z_src, &lm, bridge)?;
    codec.decode_views(&z_hat)
}
