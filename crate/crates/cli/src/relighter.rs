use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{Context, Result};
use mvrelight_core::bridge::BridgeConfig;
use mvrelight_core::codec::{Codec, SpaceToDepth};
use mvrelight_core::lightmap::LightEdit;
use mvrelight_core::model::VelocityNet;
use mvrelight_core::relight::relight_views_with;
use mvrelight_core::Image;
use mvrelight_tensor::Tensor;

/// A loaded checkpoint with the codec and bridge settings it was trained with.
pub struct Relighter {
    net: VelocityNet,
    codec: SpaceToDepth,
    bridge: BridgeConfig,
    pub step: Option<u64>,
}

pub struct Relit {
    pub images: Vec<Image>,
    /// Network forward passes spent on this request alone.
    pub forward_passes: usize,
}

impl Relighter {
    pub fn new(net: VelocityNet, codec: SpaceToDepth, bridge: BridgeConfig) -> Self {
        Self { net, codec, bridge, step: None }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, extra) = VelocityNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let factor = extra.get("codec_factor").and_then(|v| v.as_u64()).unwrap_or(2) as usize;
        let bridge = match extra.get("bridge") {
            Some(b) => serde_json::from_value(b.clone()).context("checkpoint bridge settings")?,
            None => BridgeConfig::default(),
        };
        let mut r = Self::new(net, SpaceToDepth::new(factor)?, bridge);
        r.step = extra.get("step").and_then(|v| v.as_u64());
        Ok(r)
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn codec(&self) -> &SpaceToDepth {
        &self.codec
    }

    pub fn bridge(&self) -> &BridgeConfig {
        &self.bridge
    }

    /// Input resolution the network accepts, `(width, height)`.
    pub fn image_dims(&self) -> (usize, usize) {
        let c = self.net.config();
        let f = self.codec.factor();
        (c.latent_width * f, c.latent_height * f)
    }

    pub fn relight(&self, views: &[Image], edits: &[LightEdit]) -> mvrelight_core::Result<Relit> {
        let passes = AtomicUsize::new(0);
        let counted = |z: &Tensor, t: f64, lm: &Tensor| {
            passes.fetch_add(1, Ordering::Relaxed);
            self.net.infer(z, t, lm)
        };
        let c = self.net.config();
        let images = relight_views_with(&counted, (c.latent_width, c.latent_height), &self.codec, &self.bridge, views, edits)?;
        Ok(Relit { images, forward_passes: passes.into_inner() })
    }
}
