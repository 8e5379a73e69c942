//! Gaussian context gating (parameter free).

use super::AttentionModule;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Axes, Graph, Var};

pub const GCT_EPS: f64 = 1e-5;

/// Per batch item: standardise the channel contexts (spatial means) across
/// channels and gate each channel by `exp(-z^2 / (2 c^2))`.
pub fn gct_forward(g: &mut Graph, x: Var, c: f64) -> Result<Var> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("gct: c must be > 0, got {c}")));
    }
    let shape = g.shape(x);
    if shape.c < 2 {
        return Err(Error::Shape(format!("gct: needs at least 2 channels, got {}", shape.c)));
    }
    let context = g.global_avg_pool(x);
    let ctx_shape = g.shape(context);
    let mean = g.reduce_mean(context, Axes::C);
    let mean = g.expand(mean, ctx_shape)?;
    let centered = g.sub(context, mean)?;
    let sq = g.square(centered);
    let var = g.reduce_mean(sq, Axes::C);
    let std = g.sqrt(var)?;
    let denom = g.add_scalar(std, GCT_EPS);
    let denom = g.expand(denom, ctx_shape)?;
    let z = g.div(centered, denom)?;
    let z2 = g.square(z);
    let arg = g.scale(z2, -1.0 / (2.0 * c * c));
    let gate = g.exp(arg);
    g.mul_channels(x, gate)
}

#[derive(Clone, Debug)]
pub struct Gct {
    pub c: f64,
}

impl AttentionModule for Gct {
    fn name(&self) -> &str {
        "gct"
    }

    fn forward(&self, g: &mut Graph, _p: &Bound, x: Var) -> Result<Var> {
        gct_forward(g, x, self.c)
    }
}
