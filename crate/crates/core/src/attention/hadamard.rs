//! Modified Hadamard attention and the SimAM → L2-norm → Hadamard composite.

use super::l2norm::l2norm_forward;
use super::simam::{simam_forward, SimamConfig};
use super::{hidden_width, AttentionModule};
use crate::error::Result;
use crate::params::{Bound, Conv2d, Init, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

/// Query/key 1x1 projections `c -> c/r`, and an output projection `c/r -> c`.
///
/// The output projection starts at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct Hadamard {
    pub query: Conv2d,
    pub key: Conv2d,
    pub out: Conv2d,
}

impl Hadamard {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, rng: &mut RngStream) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            query: Conv2d::new(store, &format!("{prefix}.query"), channels, hidden, 1, Init::KaimingNormal, rng),
            key: Conv2d::new(store, &format!("{prefix}.key"), channels, hidden, 1, Init::KaimingNormal, rng),
            out: Conv2d::new(store, &format!("{prefix}.out"), hidden, channels, 1, Init::Zeros, rng),
        }
    }

    pub fn count(channels: usize, reduction: usize) -> usize {
        let hidden = hidden_width(channels, reduction);
        2 * (channels * hidden + hidden) + (hidden * channels + channels)
    }
}

/// `A * x + x` with `A = out(sigmoid(query(x)) * sigmoid(key(x)))`.
pub fn hadamard_forward(g: &mut Graph, p: &Bound, x: Var, block: &Hadamard) -> Result<Var> {
    let q = block.query.forward(g, p, x)?;
    let k = block.key.forward(g, p, x)?;
    let h = g.sigmoid_product(q, k)?;
    let a = block.out.forward(g, p, h)?;
    g.gated_residual(a, x)
}

impl AttentionModule for Hadamard {
    fn name(&self) -> &str {
        "hadamard"
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        hadamard_forward(g, p, x, self)
    }
}

#[derive(Clone, Debug)]
pub struct CmrAtt {
    pub simam: SimamConfig,
    pub eps: f64,
    pub hadamard: Hadamard,
}

/// `hadamard(l2norm(simam(x)))`.
pub fn cmratt_forward(g: &mut Graph, p: &Bound, x: Var, block: &CmrAtt) -> Result<Var> {
    let s = simam_forward(g, x, &block.simam)?;
    let n = l2norm_forward(g, s, block.eps)?;
    hadamard_forward(g, p, n, &block.hadamard)
}

impl AttentionModule for CmrAtt {
    fn name(&self) -> &str {
        "cmratt"
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        cmratt_forward(g, p, x, self)
    }
}
