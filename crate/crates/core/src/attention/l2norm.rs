use super::AttentionModule;
use crate::error::Result;
use crate::params::Bound;
use crate::tensor::{Graph, Var};

/// `x / (||x||_2 + eps)` with the norm taken per batch item over `(c, h, w)`.
pub fn l2norm_forward(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    g.l2_normalize(x, eps)
}

#[derive(Clone, Debug)]
pub struct L2Norm {
    pub eps: f64,
}

impl AttentionModule for L2Norm {
    fn name(&self) -> &str {
        "l2norm"
    }

    fn forward(&self, g: &mut Graph, _p: &Bound, x: Var) -> Result<Var> {
        l2norm_forward(g, x, self.eps)
    }
}
