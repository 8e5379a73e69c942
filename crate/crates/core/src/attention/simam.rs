//! Parameter-free energy-based attention.
//!
//! For a target neuron `t` in a channel, with `mu` and `var` the mean and
//! variance of its channel peers and coefficient `lambda`, the minimal energy is
//!
//! ```text
//! e_t = 4 (var + lambda) / ((t - mu)^2 + 2 var + 2 lambda)
//! ```
//!
//! and the block rescales features by `sigmoid(1 / e_t)`. A neuron that stands
//! out from its peers has low energy and therefore a large weight.

use serde::{Deserialize, Serialize};

use super::AttentionModule;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Axes, Graph, Tensor, Var};

/// How the peer statistics `mu`, `var` of each neuron are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticsMode {
    /// Mean and population variance of every *other* neuron in the channel.
    ExactLeaveOneOut,
    /// Mean and population variance of the whole channel, shared by all neurons.
    AllInclusiveApprox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimamConfig {
    pub lambda: f64,
    pub statistics_mode: StatisticsMode,
}

impl Default for SimamConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            statistics_mode: StatisticsMode::AllInclusiveApprox,
        }
    }
}

impl SimamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("simam lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lambda == 0.0 && self.statistics_mode == StatisticsMode::ExactLeaveOneOut {
            return Err(Error::Config(
                "simam lambda = 0 is only allowed with all_inclusive_approx statistics".into(),
            ));
        }
        Ok(())
    }
}

/// Per-neuron minimal energies, shaped like the input.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap(pub Tensor);

impl EnergyMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `1 / e_t` for every neuron, recorded on `g`.
pub(crate) fn inverse_energy(g: &mut Graph, x: Var, cfg: &SimamConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x);
    let n = shape.plane();
    let lambda = cfg.lambda;
    match cfg.statistics_mode {
        StatisticsMode::AllInclusiveApprox => {
            let mu = g.reduce_mean(x, Axes::SPATIAL);
            let mu = g.expand(mu, shape)?;
            let centered = g.sub(x, mu)?;
            let dev2 = g.square(centered);
            let var = g.reduce_mean(dev2, Axes::SPATIAL);
            if g.value(var).data().iter().any(|&v| v + lambda <= 0.0) {
                return Err(Error::InvalidArgument(
                    "simam: constant channel with lambda = 0 has undefined energy".into(),
                ));
            }
            // 1 / e = (t - mu)^2 / (4 (var + lambda)) + 1/2
            let denom = g.add_scalar(var, lambda);
            let denom = g.scale(denom, 4.0);
            let denom = g.expand(denom, shape)?;
            let ratio = g.div(dev2, denom)?;
            Ok(g.add_scalar(ratio, 0.5))
        }
        StatisticsMode::ExactLeaveOneOut => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "simam: leave-one-out statistics need at least 2 neurons per channel, got {}x{}",
                    shape.h, shape.w
                )));
            }
            let others = (n - 1) as f64;
            // Shift by the channel mean first; the statistics are shift invariant
            // and the closed form below is better conditioned on centred data.
            let mu = g.reduce_mean(x, Axes::SPATIAL);
            let mu = g.expand(mu, shape)?;
            let y = g.sub(x, mu)?;
            let y2 = g.square(y);
            let s1 = g.reduce_sum(y, Axes::SPATIAL);
            let s1 = g.expand(s1, shape)?;
            let s2 = g.reduce_sum(y2, Axes::SPATIAL);
            let s2 = g.expand(s2, shape)?;
            // Peer mean and population variance with the target removed.
            let peer_sum = g.sub(s1, y)?;
            let peer_mu = g.scale(peer_sum, 1.0 / others);
            let peer_sq = g.sub(s2, y2)?;
            let peer_m2 = g.scale(peer_sq, 1.0 / others);
            let peer_mu2 = g.square(peer_mu);
            let peer_var = g.sub(peer_m2, peer_mu2)?;
            let diff = g.sub(y, peer_mu)?;
            let dev2 = g.square(diff);
            // 1 / e = ((t - mu)^2 + 2 var + 2 lambda) / (4 (var + lambda))
            let var_l = g.add_scalar(peer_var, lambda);
            if g.value(var_l).data().iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidArgument("simam: non-positive peer variance".into()));
            }
            let twice = g.scale(var_l, 2.0);
            let num = g.add(dev2, twice)?;
            let den = g.scale(var_l, 4.0);
            g.div(num, den)
        }
    }
}

/// Minimal energy of every neuron.
pub fn simam_energy(x: &Tensor, cfg: &SimamConfig) -> Result<EnergyMap> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let inv = inverse_energy(&mut g, xv, cfg)?;
    Ok(EnergyMap(g.value(inv).map(|v| 1.0 / v)))
}

/// `sigmoid(1 / E) * x`.
pub fn simam_forward(g: &mut Graph, x: Var, cfg: &SimamConfig) -> Result<Var> {
    if cfg.statistics_mode == StatisticsMode::AllInclusiveApprox {
        cfg.validate()?;
        return g.simam_gate(x, cfg.lambda);
    }
    let inv = inverse_energy(g, x, cfg)?;
    let weight = g.sigmoid(inv);
    g.mul(weight, x)
}

#[derive(Clone, Debug)]
pub struct Simam {
    pub cfg: SimamConfig,
}

impl AttentionModule for Simam {
    fn name(&self) -> &str {
        "simam"
    }

    fn forward(&self, g: &mut Graph, _p: &Bound, x: Var) -> Result<Var> {
        simam_forward(g, x, &self.cfg)
    }
}
