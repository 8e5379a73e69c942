//! Named parameter storage and the basic trainable layers built on it.

use std::ops::Index;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{BnOptions, Graph, Mode, RunningStats, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = self.values[id.0].shape();
        if value.shape() != old {
            return Err(Error::Shape(format!(
                "parameter {} has shape {old}, replacement has {}",
                self.names[id.0],
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalars held by parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Register every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in [`ParamId`] order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingNormal,
    Zeros,
}

fn init_tensor(shape: Shape, fan_in: usize, init: Init, rng: &mut RngStream) -> Tensor {
    match init {
        Init::KaimingNormal => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `kernel x kernel` convolution with "same" padding for odd kernels.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Self {
        let weight = init_tensor(Shape::new(out_c, in_c, kernel, kernel), in_c * kernel * kernel, init, rng);
        Self {
            weight: store.add(format!("{prefix}.weight"), weight),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(Shape::vector(out_c))),
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], p[self.bias], self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut RngStream,
    ) -> Self {
        let weight = init_tensor(
            Shape::new(in_c, out_c, kernel, kernel),
            in_c * kernel * kernel,
            Init::KaimingNormal,
            rng,
        );
        Self {
            weight: store.add(format!("{prefix}.weight"), weight),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(Shape::vector(out_c))),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p[self.weight], p[self.bias], self.stride)
    }
}

/// Batch norm whose running statistics live in an external slot table.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
    pub opts: BnOptions,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, slots: &mut Vec<(String, RunningStats)>) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(Shape::vector(channels)));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(Shape::vector(channels)));
        slots.push((prefix.to_string(), RunningStats::initialized(channels)));
        Self {
            gamma,
            beta,
            slot: slots.len() - 1,
            opts: BnOptions::default(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, stats: &mut [RunningStats]) -> Result<Var> {
        g.batch_norm2d(x, p[self.gamma], p[self.beta], &mut stats[self.slot], mode, self.opts)
    }
}
