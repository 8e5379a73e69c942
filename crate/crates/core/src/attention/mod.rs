//! Feature-map recalibration modules.
//!
//! Every module maps `(n, c, h, w)` to `(n, c, h, w)`. Modules are described by
//! an [`AttentionKind`] (what goes in configs and checkpoints) and instantiated
//! per insertion site with [`AttentionKind::build`], which registers any
//! learnable tensors under the site's name prefix.

mod channel;
mod gct;
mod hadamard;
mod l2norm;
mod simam;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use channel::{cbam_forward, se_forward, Bottleneck, Cbam, SqueezeExcitation};
pub use gct::{gct_forward, Gct, GCT_EPS};
pub use hadamard::{cmratt_forward, hadamard_forward, CmrAtt, Hadamard};
pub use l2norm::{l2norm_forward, L2Norm};
pub use simam::{simam_energy, simam_forward, EnergyMap, Simam, SimamConfig, StatisticsMode};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

/// Bottleneck width `c / r`, never below one channel.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// A shape-preserving attention block bound to one insertion site.
pub trait AttentionModule: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Identity;

impl AttentionModule for Identity {
    fn name(&self) -> &str {
        "none"
    }

    fn forward(&self, _g: &mut Graph, _p: &Bound, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Attention variant plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttentionKind {
    None,
    Simam(SimamConfig),
    Se { reduction: usize },
    Cbam { reduction: usize, spatial_kernel: usize },
    Gct { c: f64 },
    L2Norm { eps: f64 },
    Hadamard { reduction: usize },
    CmrAtt { simam: SimamConfig, eps: f64, reduction: usize },
}

impl AttentionKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Simam(_) => "simam",
            AttentionKind::Se { .. } => "se",
            AttentionKind::Cbam { .. } => "cbam",
            AttentionKind::Gct { .. } => "gct",
            AttentionKind::L2Norm { .. } => "l2norm",
            AttentionKind::Hadamard { .. } => "hadamard",
            AttentionKind::CmrAtt { .. } => "cmratt",
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, AttentionKind::None)
    }

    /// Hyperparameter summary in the style of a results-table "Parameters" column.
    pub fn settings_label(&self) -> String {
        match self {
            AttentionKind::None => "-".into(),
            AttentionKind::Simam(c) => format!("lambda={}", c.lambda),
            AttentionKind::Se { reduction } => format!("reduction={reduction}"),
            AttentionKind::Cbam { reduction, spatial_kernel } => {
                format!("reduction={reduction};kernel_size={spatial_kernel}")
            }
            AttentionKind::Gct { c } => format!("c={c}"),
            AttentionKind::L2Norm { eps } => format!("eps={eps}"),
            AttentionKind::Hadamard { reduction } => format!("reduction={reduction}"),
            AttentionKind::CmrAtt { simam, reduction, .. } => {
                format!("lambda={};reduction={reduction}", simam.lambda)
            }
        }
    }

    fn reduction(&self) -> Option<usize> {
        match self {
            AttentionKind::Se { reduction }
            | AttentionKind::Cbam { reduction, .. }
            | AttentionKind::Hadamard { reduction }
            | AttentionKind::CmrAtt { reduction, .. } => Some(*reduction),
            _ => None,
        }
    }

    /// Check the hyperparameters against an insertion site of `channels` width.
    pub fn validate_for(&self, channels: usize) -> Result<()> {
        if self.reduction() == Some(0) {
            return Err(Error::Config(format!("{}: reduction must be >= 1", self.name())));
        }
        match self {
            AttentionKind::Simam(cfg) | AttentionKind::CmrAtt { simam: cfg, .. } => cfg.validate()?,
            AttentionKind::Cbam { spatial_kernel, .. } if spatial_kernel % 2 == 0 => {
                return Err(Error::Config(format!("cbam: spatial kernel {spatial_kernel} must be odd")));
            }
            AttentionKind::Gct { c } if !(*c > 0.0) => {
                return Err(Error::Config(format!("gct: c must be > 0, got {c}")));
            }
            AttentionKind::Gct { .. } if channels < 2 => {
                return Err(Error::Config("gct: needs at least 2 channels".into()));
            }
            _ => {}
        }
        if let AttentionKind::L2Norm { eps } | AttentionKind::CmrAtt { eps, .. } = self {
            if !(*eps > 0.0) {
                return Err(Error::Config(format!("{}: eps must be > 0, got {eps}", self.name())));
            }
        }
        Ok(())
    }

    /// Learnable scalars added at one site of `channels` width.
    pub fn site_param_count(&self, channels: usize) -> usize {
        match self {
            AttentionKind::None
            | AttentionKind::Simam(_)
            | AttentionKind::Gct { .. }
            | AttentionKind::L2Norm { .. } => 0,
            AttentionKind::Se { reduction } => Bottleneck::count(channels, *reduction),
            AttentionKind::Cbam { reduction, spatial_kernel } => {
                Cbam::count(channels, *reduction, *spatial_kernel)
            }
            AttentionKind::Hadamard { reduction } | AttentionKind::CmrAtt { reduction, .. } => {
                Hadamard::count(channels, *reduction)
            }
        }
    }

    /// Instantiate the block for one site, registering parameters under `prefix`.
    pub fn build(
        &self,
        channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut RngStream,
    ) -> Result<Box<dyn AttentionModule>> {
        self.validate_for(channels)?;
        Ok(match self {
            AttentionKind::None => Box::new(Identity),
            AttentionKind::Simam(cfg) => Box::new(Simam { cfg: *cfg }),
            AttentionKind::Se { reduction } => Box::new(SqueezeExcitation {
                mlp: Bottleneck::new(store, prefix, channels, *reduction, rng),
            }),
            AttentionKind::Cbam { reduction, spatial_kernel } => {
                Box::new(Cbam::new(store, prefix, channels, *reduction, *spatial_kernel, rng))
            }
            AttentionKind::Gct { c } => Box::new(Gct { c: *c }),
            AttentionKind::L2Norm { eps } => Box::new(L2Norm { eps: *eps }),
            AttentionKind::Hadamard { reduction } => Box::new(Hadamard::new(store, prefix, channels, *reduction, rng)),
            AttentionKind::CmrAtt { simam, eps, reduction } => Box::new(CmrAtt {
                simam: *simam,
                eps: *eps,
                hadamard: Hadamard::new(store, prefix, channels, *reduction, rng),
            }),
        })
    }
}

/// Sum of learnable scalars over every insertion site in `channel_schedule`.
pub fn param_count(kind: &AttentionKind, channel_schedule: &[usize]) -> Result<usize> {
    if channel_schedule.is_empty() {
        return Err(Error::InvalidArgument("param_count: empty channel schedule".into()));
    }
    Ok(channel_schedule.iter().map(|&c| kind.site_param_count(c)).sum())
}

/// Flat hyperparameter bag used to resolve a variant from its name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionParams {
    pub lambda: f64,
    pub statistics_mode: StatisticsMode,
    /// Channel reduction ratio; `None` picks the variant's default (16 for SE/CBAM, 4 for Hadamard/CMRatt).
    pub reduction: Option<usize>,
    pub spatial_kernel: usize,
    pub gct_c: f64,
    pub l2_eps: f64,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            statistics_mode: StatisticsMode::AllInclusiveApprox,
            reduction: None,
            spatial_kernel: 7,
            gct_c: 2.0,
            l2_eps: 1e-8,
        }
    }
}

impl AttentionParams {
    fn simam(&self) -> SimamConfig {
        SimamConfig {
            lambda: self.lambda,
            statistics_mode: self.statistics_mode,
        }
    }
}

type Constructor = fn(&AttentionParams) -> AttentionKind;

/// Name → constructor table. Names of modules that are known but not
/// implemented here are reserved and fail with a descriptive error.
pub struct AttentionRegistry {
    constructors: BTreeMap<String, Constructor>,
    reserved: Vec<String>,
}

impl Default for AttentionRegistry {
    fn default() -> Self {
        let mut reg = Self {
            constructors: BTreeMap::new(),
            reserved: ["bam", "srm", "gcnet", "ab", "cab", "self_attention"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        reg.register("none", |_| AttentionKind::None);
        reg.register("simam", |p| AttentionKind::Simam(p.simam()));
        reg.register("se", |p| AttentionKind::Se {
            reduction: p.reduction.unwrap_or(16),
        });
        reg.register("cbam", |p| AttentionKind::Cbam {
            reduction: p.reduction.unwrap_or(16),
            spatial_kernel: p.spatial_kernel,
        });
        reg.register("gct", |p| AttentionKind::Gct { c: p.gct_c });
        reg.register("l2norm", |p| AttentionKind::L2Norm { eps: p.l2_eps });
        reg.register("hadamard", |p| AttentionKind::Hadamard {
            reduction: p.reduction.unwrap_or(4),
        });
        reg.register("cmratt", |p| AttentionKind::CmrAtt {
            simam: p.simam(),
            eps: p.l2_eps,
            reduction: p.reduction.unwrap_or(4),
        });
        reg
    }
}

impl AttentionRegistry {
    pub fn register(&mut self, name: &str, ctor: Constructor) {
        self.reserved.retain(|r| r != name);
        self.constructors.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.constructors.keys().map(String::as_str)
    }

    pub fn resolve(&self, name: &str, params: &AttentionParams) -> Result<AttentionKind> {
        let key = name.to_ascii_lowercase();
        if let Some(ctor) = self.constructors.get(&key) {
            return Ok(ctor(params));
        }
        if self.reserved.contains(&key) {
            return Err(Error::Config(format!(
                "attention '{name}' is reserved but not implemented; available: {}",
                self.names().collect::<Vec<_>>().join(", ")
            )));
        }
        Err(Error::Config(format!(
            "unknown attention '{name}'; available: {}",
            self.names().collect::<Vec<_>>().join(", ")
        )))
    }
}

/// Resolve a built-in variant by name.
pub fn resolve(name: &str, params: &AttentionParams) -> Result<AttentionKind> {
    AttentionRegistry::default().resolve(name, params)
}
