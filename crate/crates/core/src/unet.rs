//! Encoder/decoder reconstruction network with optional attention sites.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionModule};
use crate::error::{Error, Result};
use crate::params::{Bound, BatchNorm2d, Conv2d, ConvTranspose2d, Init, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, Mode, RunningStats, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    /// After both convolutions of every conv block and on every skip tensor.
    PerConvAndSkip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_p: f64,
    pub attention: AttentionKind,
    pub placement: Placement,
    pub input_size: (usize, usize),
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
            dropout_p: 0.25,
            attention: AttentionKind::None,
            placement: Placement::PerConvAndSkip,
            input_size: (256, 256),
        }
    }
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn attention_enabled(&self) -> bool {
        self.placement == Placement::PerConvAndSkip && !self.attention.is_none()
    }

    /// Width of every attention insertion site, in build order.
    pub fn attention_sites(&self) -> Vec<(String, usize)> {
        let mut sites = Vec::new();
        for i in 0..self.depth {
            let c = self.channels(i);
            sites.push((format!("enc{i}.att1"), c));
            sites.push((format!("enc{i}.att2"), c));
            sites.push((format!("skip{i}.att"), c));
        }
        let c = self.channels(self.depth);
        sites.push(("bridge.att1".into(), c));
        sites.push(("bridge.att2".into(), c));
        for i in (0..self.depth).rev() {
            let c = self.channels(i);
            sites.push((format!("dec{i}.att1"), c));
            sites.push((format!("dec{i}.att2"), c));
        }
        sites
    }

    /// Closed-form attention parameter count under this placement.
    pub fn attention_overhead(&self) -> usize {
        if !self.attention_enabled() {
            return 0;
        }
        self.attention_sites().iter().map(|(_, c)| self.attention.site_param_count(*c)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be >= 1".to_string());
        }
        if self.depth == 0 || self.depth > 8 {
            problems.push(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            problems.push(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        let (h, w) = self.input_size;
        let step = 1usize << self.depth.min(8);
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            problems.push(format!("input size {h}x{w} must be nonzero and divisible by 2^depth = {step}"));
        }
        if problems.is_empty() && self.attention_enabled() {
            for (_, c) in self.attention_sites() {
                if let Err(e) = self.attention.validate_for(c) {
                    problems.push(e.to_string());
                    break;
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid UNetConfig: {}", problems.join("; "))))
        }
    }
}

struct ConvUnit {
    conv: Conv2d,
    att: Option<Box<dyn AttentionModule>>,
    bn: BatchNorm2d,
}

struct ConvBlock {
    units: [ConvUnit; 2],
}

struct Builder<'a> {
    cfg: &'a UNetConfig,
    store: ParamStore,
    bn: Vec<(String, RunningStats)>,
    rng: &'a RngStream,
}

impl Builder<'_> {
    fn attention(&mut self, name: &str, c: usize) -> Result<Option<Box<dyn AttentionModule>>> {
        if !self.cfg.attention_enabled() {
            return Ok(None);
        }
        let mut rng = self.rng.fork(name);
        self.cfg.attention.build(c, &mut self.store, name, &mut rng).map(Some)
    }

    fn block(&mut self, prefix: &str, in_c: usize, out_c: usize) -> Result<ConvBlock> {
        let unit = |b: &mut Self, k: usize, cin: usize| -> Result<ConvUnit> {
            let name = format!("{prefix}.conv{k}");
            let mut rng = b.rng.fork(&name);
            let conv = Conv2d::new(&mut b.store, &name, cin, out_c, 3, Init::KaimingNormal, &mut rng);
            let att = b.attention(&format!("{prefix}.att{k}"), out_c)?;
            let bn = BatchNorm2d::new(&mut b.store, &format!("{prefix}.bn{k}"), out_c, &mut b.bn);
            Ok(ConvUnit { conv, att, bn })
        };
        let first = unit(self, 1, in_c)?;
        let second = unit(self, 2, out_c)?;
        Ok(ConvBlock { units: [first, second] })
    }
}

struct Encoder {
    block: ConvBlock,
    skip_att: Option<Box<dyn AttentionModule>>,
}

struct Decoder {
    up: ConvTranspose2d,
    block: ConvBlock,
}

/// Parameters, running statistics and the layer graph of one network.
pub struct UNetModel {
    cfg: UNetConfig,
    params: ParamStore,
    bn_names: Vec<String>,
    stats: Vec<RunningStats>,
    layers: Layers,
}

struct Layers {
    encoders: Vec<Encoder>,
    bridge: ConvBlock,
    /// Indexed by level, so `decoders[0]` is the last one applied.
    decoders: Vec<Decoder>,
    head: Conv2d,
}

/// Build a freshly initialised network. Every layer draws from its own
/// `rng.fork(layer_name)`, so backbone weights do not depend on the attention kind.
pub fn build_unet(cfg: &UNetConfig, rng: &RngStream) -> Result<UNetModel> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        store: ParamStore::new(),
        bn: Vec::new(),
        rng,
    };
    let mut encoders = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let in_c = if i == 0 { 1 } else { cfg.channels(i - 1) };
        let block = b.block(&format!("enc{i}"), in_c, cfg.channels(i))?;
        let skip_att = b.attention(&format!("skip{i}.att"), cfg.channels(i))?;
        encoders.push(Encoder { block, skip_att });
    }
    let bridge = b.block("bridge", cfg.channels(cfg.depth - 1), cfg.channels(cfg.depth))?;
    let mut decoders = Vec::with_capacity(cfg.depth);
    for i in (0..cfg.depth).rev() {
        let (hi, lo) = (cfg.channels(i + 1), cfg.channels(i));
        let name = format!("dec{i}.up");
        let mut r = rng.fork(&name);
        let up = ConvTranspose2d::new(&mut b.store, &name, hi, lo, 2, 2, &mut r);
        let block = b.block(&format!("dec{i}"), 2 * lo, lo)?;
        decoders.push(Decoder { up, block });
    }
    decoders.reverse();
    let mut r = rng.fork("head");
    let head = Conv2d::new(&mut b.store, "head", cfg.base_channels, 1, 1, Init::KaimingNormal, &mut r);
    let (bn_names, stats) = b.bn.into_iter().unzip();
    Ok(UNetModel {
        cfg: cfg.clone(),
        params: b.store,
        bn_names,
        stats,
        layers: Layers {
            encoders,
            bridge,
            decoders,
            head,
        },
    })
}

struct Ctx<'a> {
    p: &'a Bound,
    mode: Mode,
    stats: &'a mut [RunningStats],
}

fn apply_block(g: &mut Graph, ctx: &mut Ctx, block: &ConvBlock, mut x: Var) -> Result<Var> {
    for u in &block.units {
        x = u.conv.forward(g, ctx.p, x)?;
        if let Some(att) = &u.att {
            x = att.forward(g, ctx.p, x)?;
        }
        x = u.bn.forward(g, ctx.p, x, ctx.mode, ctx.stats)?;
        x = g.relu(x);
    }
    Ok(x)
}

impl Layers {
    fn run(&self, cfg: &UNetConfig, g: &mut Graph, ctx: &mut Ctx, x: Var, rng: &mut RngStream) -> Result<Var> {
        let (h, w) = cfg.input_size;
        let s = g.shape(x);
        if s.c != 1 || s.h != h || s.w != w {
            return Err(Error::Shape(format!("unet_forward: expected input (n, 1, {h}, {w}), got {s}")));
        }
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = x;
        for enc in &self.encoders {
            let y = apply_block(g, ctx, &enc.block, x)?;
            // The skip tensor is taken before dropout.
            let skip = match &enc.skip_att {
                Some(att) => att.forward(g, ctx.p, y)?,
                None => y,
            };
            skips.push(skip);
            let y = g.dropout(y, cfg.dropout_p, ctx.mode, rng)?;
            x = g.max_pool2(y)?;
        }
        x = apply_block(g, ctx, &self.bridge, x)?;
        for (dec, skip) in self.decoders.iter().zip(skips).rev() {
            let up = dec.up.forward(g, ctx.p, x)?;
            let cat = g.concat_channels(&[up, skip])?;
            x = apply_block(g, ctx, &dec.block, cat)?;
        }
        self.head.forward(g, ctx.p, x)
    }
}

impl UNetModel {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm layer names paired with their running statistics.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.bn_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn set_running_stats(&mut self, name: &str, stats: RunningStats) -> Result<()> {
        let i = self
            .bn_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no batch-norm layer named {name}")))?;
        if stats.channels() != self.stats[i].channels() {
            return Err(Error::Shape(format!(
                "running stats for {name}: expected {} channels, got {}",
                self.stats[i].channels(),
                stats.channels()
            )));
        }
        self.stats[i] = stats;
        Ok(())
    }

    /// Forward pass on an already bound parameter set. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        let mut ctx = Ctx {
            p,
            mode,
            stats: &mut self.stats,
        };
        self.layers.run(&self.cfg, g, &mut ctx, x, rng)
    }

    /// Eval-mode forward pass without a tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        // Eval mode never writes the statistics; a scratch copy keeps `&self`.
        let mut stats = self.stats.clone();
        let mut ctx = Ctx {
            p: &p,
            mode: Mode::Eval,
            stats: &mut stats,
        };
        let y = self.layers.run(&self.cfg, &mut g, &mut ctx, xv, &mut RngStream::new(0, "eval"))?;
        Ok(g.value(y).clone())
    }

    /// Names of parameters that belong to attention sites.
    pub fn attention_param_names(&self) -> Vec<&str> {
        let sites = self.cfg.attention_sites();
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| sites.iter().any(|(s, _)| n.starts_with(&format!("{s}."))))
            .collect()
    }
}

/// `(total learnable scalars, scalars added by attention)`.
pub fn model_param_count(model: &UNetModel) -> (usize, usize) {
    let total = model.params.scalar_count();
    let overhead = model
        .cfg
        .attention_sites()
        .iter()
        .map(|(s, _)| model.params.scalar_count_with_prefix(&format!("{s}.")))
        .sum();
    (total, overhead)
}

/// Parameter counts for a configuration without keeping the model around.
pub fn config_param_count(cfg: &UNetConfig) -> Result<(usize, usize)> {
    let model = build_unet(cfg, &RngStream::new(0, "count"))?;
    Ok(model_param_count(&model))
}

/// Shape used by the network for a batch of `n` images.
pub fn input_shape(cfg: &UNetConfig, n: usize) -> Shape {
    Shape::new(n, 1, cfg.input_size.0, cfg.input_size.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{resolve, AttentionParams};

    fn small(attention: AttentionKind) -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            depth: 2,
            dropout_p: 0.25,
            attention,
            placement: Placement::PerConvAndSkip,
            input_size: (16, 16),
        }
    }

    #[test]
    fn reference_schedule_has_22_sites() {
        let cfg = UNetConfig::default();
        let sites = cfg.attention_sites();
        assert_eq!(sites.len(), 22);
        assert_eq!(sites.iter().map(|s| s.1).sum::<usize>(), 3424);
        assert_eq!(cfg.channels(4), 512);
    }

    #[test]
    fn invalid_configs_list_the_problem() {
        let mut cfg = small(AttentionKind::None);
        cfg.input_size = (18, 16);
        let e = build_unet(&cfg, &RngStream::new(0, "m")).err().unwrap().to_string();
        assert!(e.contains("divisible"), "{e}");
        let cfg = small(AttentionKind::Se { reduction: 0 });
        assert!(build_unet(&cfg, &RngStream::new(0, "m")).is_err());
    }

    #[test]
    fn same_seed_same_weights_and_backbone_independent_of_attention() {
        let a = build_unet(&small(AttentionKind::None), &RngStream::new(4, "m")).unwrap();
        let b = build_unet(&small(AttentionKind::None), &RngStream::new(4, "m")).unwrap();
        let kind = resolve("cbam", &AttentionParams { reduction: Some(4), ..Default::default() }).unwrap();
        let c = build_unet(&small(kind), &RngStream::new(4, "m")).unwrap();
        for (name, t) in a.params().iter() {
            assert_eq!(b.params().get(b.params().find(name).unwrap()), t);
            assert_eq!(c.params().get(c.params().find(name).unwrap()), t, "{name}");
        }
        let (total, overhead) = model_param_count(&c);
        assert_eq!(total - overhead, a.params().scalar_count());
        assert_eq!(overhead, c.config().attention_overhead());
    }

    #[test]
    fn eval_is_deterministic_and_shape_preserving() {
        let model = build_unet(&small(resolve("cmratt", &AttentionParams::default()).unwrap()), &RngStream::new(1, "m")).unwrap();
        let x = Tensor::rand_uniform(Shape::new(2, 1, 16, 16), 0.0, 1.0, &mut RngStream::new(2, "x"));
        let a = model.predict(&x).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, model.predict(&x).unwrap());
        assert!(model.predict(&Tensor::zeros(Shape::new(1, 1, 8, 8))).is_err());
    }

    #[test]
    fn predict_matches_eval_forward() {
        let mut model = build_unet(&small(AttentionKind::None), &RngStream::new(1, "m")).unwrap();
        let x = Tensor::rand_uniform(Shape::new(1, 1, 16, 16), 0.0, 1.0, &mut RngStream::new(2, "x"));
        let mut g = Graph::no_grad();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let y = model.forward(&mut g, &p, xv, Mode::Eval, &mut RngStream::new(0, "d")).unwrap();
        assert_eq!(g.value(y), &model.predict(&x).unwrap());
    }
}
