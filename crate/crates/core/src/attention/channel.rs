//! Squeeze-and-excitation and CBAM channel/spatial gating.

use super::{hidden_width, AttentionModule};
use crate::error::Result;
use crate::params::{Bound, Conv2d, Init, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

/// Two-layer bottleneck `c -> c/r -> c` realised with 1x1 convolutions so it
/// applies directly to `(n, c, 1, 1)` descriptors.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, rng: &mut RngStream) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            reduce: Conv2d::new(store, &format!("{prefix}.fc1"), channels, hidden, 1, Init::KaimingNormal, rng),
            expand: Conv2d::new(store, &format!("{prefix}.fc2"), hidden, channels, 1, Init::KaimingNormal, rng),
        }
    }

    /// Scalars in the two affine layers.
    pub fn count(channels: usize, reduction: usize) -> usize {
        let hidden = hidden_width(channels, reduction);
        channels * hidden + hidden + hidden * channels + channels
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, p, x)?;
        let h = g.relu(h);
        self.expand.forward(g, p, h)
    }
}

/// `x * sigmoid(W2 relu(W1 avgpool(x) + b1) + b2)` per channel.
pub fn se_forward(g: &mut Graph, p: &Bound, x: Var, mlp: &Bottleneck) -> Result<Var> {
    let squeeze = g.global_avg_pool(x);
    let excite = mlp.forward(g, p, squeeze)?;
    let gate = g.sigmoid(excite);
    g.mul_channels(x, gate)
}

#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub mlp: Bottleneck,
}

impl AttentionModule for SqueezeExcitation {
    fn name(&self) -> &str {
        "se"
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        se_forward(g, p, x, &self.mlp)
    }
}

/// Channel gate from shared-MLP avg and max descriptors, followed by a spatial
/// gate from a `k x k` convolution over the channel-mean and channel-max maps.
pub fn cbam_forward(g: &mut Graph, p: &Bound, x: Var, mlp: &Bottleneck, spatial: &Conv2d) -> Result<Var> {
    let avg = g.global_avg_pool(x);
    let max = g.global_max_pool(x);
    let a = mlp.forward(g, p, avg)?;
    let m = mlp.forward(g, p, max)?;
    let logits = g.add(a, m)?;
    let gate = g.sigmoid(logits);
    let refined = g.mul_channels(x, gate)?;

    let mean_map = g.channel_mean_map(refined);
    let max_map = g.channel_max_map(refined);
    let maps = g.concat_channels(&[mean_map, max_map])?;
    let logits = spatial.forward(g, p, maps)?;
    let gate = g.sigmoid(logits);
    g.mul_spatial(refined, gate)
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub mlp: Bottleneck,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            mlp: Bottleneck::new(store, &format!("{prefix}.mlp"), channels, reduction, rng),
            spatial: Conv2d::new(store, &format!("{prefix}.spatial"), 2, 1, kernel, Init::KaimingNormal, rng),
        }
    }

    pub fn count(channels: usize, reduction: usize, kernel: usize) -> usize {
        Bottleneck::count(channels, reduction) + 2 * kernel * kernel + 1
    }
}

impl AttentionModule for Cbam {
    fn name(&self) -> &str {
        "cbam"
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        cbam_forward(g, p, x, &self.mlp, &self.spatial)
    }
}
