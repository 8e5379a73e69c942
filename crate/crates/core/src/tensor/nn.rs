//! Batch normalization, 2x2 max pooling and dropout.

use super::{Graph, Mode, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnOptions {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnOptions {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel running mean and (population) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    initialized: bool,
}

impl RunningStats {
    /// Placeholder stats that refuse eval-mode use until a train step updates them.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Explicit mean 0 / variance 1 initialization, usable in eval mode immediately.
    pub fn initialized(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels)
        }
    }

    pub fn from_values(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape(format!(
                "running mean has {} channels but running var has {}",
                mean.len(),
                var.len()
            )));
        }
        Ok(Self {
            mean,
            var,
            initialized: true,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn channel_sums(data: &[f64], s: Shape, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let plane = s.plane();
    let mut acc = vec![0.0; s.c];
    for (i, chunk) in data.chunks_exact(plane).enumerate() {
        let c = i % s.c;
        acc[c] += chunk.iter().enumerate().map(|(j, _)| f(i * plane + j)).sum::<f64>();
    }
    acc
}

impl Graph {
    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode uses `stats` and fails if they were never set.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        opts: BnOptions,
    ) -> Result<Var> {
        let s = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).numel() != s.c {
                return Err(Error::Shape(format!(
                    "batch_norm2d: {name} has {} entries for {} channels",
                    self.shape(v).numel(),
                    s.c
                )));
            }
        }
        if stats.channels() != s.c {
            return Err(Error::Shape(format!(
                "batch_norm2d: running stats have {} channels for {} input channels",
                stats.channels(),
                s.c
            )));
        }
        if !(opts.eps > 0.0) {
            return Err(Error::InvalidArgument("batch_norm2d: eps must be > 0".into()));
        }
        let xt = self.value(x).clone();
        let gt = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let xd = xt.data();
        let plane = s.plane();
        let count = (s.n * plane) as f64;

        let (mean, var) = match mode {
            Mode::Train => {
                let mean: Vec<f64> = channel_sums(xd, s, |i| xd[i]).iter().map(|v| v / count).collect();
                let var: Vec<f64> = channel_sums(xd, s, |i| {
                    let d = xd[i] - mean[(i / plane) % s.c];
                    d * d
                })
                .iter()
                .map(|v| v / count)
                .collect();
                let m = opts.momentum;
                for c in 0..s.c {
                    stats.mean[c] = (1.0 - m) * stats.mean[c] + m * mean[c];
                    stats.var[c] = (1.0 - m) * stats.var[c] + m * var[c];
                }
                stats.initialized = true;
                (mean, var)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::InvalidArgument(
                        "batch_norm2d: eval mode before running statistics were initialized".into(),
                    ));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + opts.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, chunk) in xd.chunks_exact(plane).enumerate() {
            let c = i % s.c;
            let (mu, is, ga, be) = (mean[c], inv_std[c], gt.data()[c], bt.data()[c]);
            for (j, &v) in chunk.iter().enumerate() {
                let h = (v - mu) * is;
                xhat[i * plane + j] = h;
                out[i * plane + j] = ga * h + be;
            }
        }
        let (gshape, bshape) = (gt.shape(), bt.shape());
        let train = mode == Mode::Train;
        Ok(self.push(Tensor::from_parts(s, out), &[x, gamma, beta], move |g| {
            let gd = g.data();
            let dbeta = channel_sums(gd, s, |i| gd[i]);
            let dgamma = channel_sums(gd, s, |i| gd[i] * xhat[i]);
            let mut dx = vec![0.0; gd.len()];
            for (i, chunk) in gd.chunks_exact(plane).enumerate() {
                let c = i % s.c;
                let scale = gt.data()[c] * inv_std[c];
                for (j, &gy) in chunk.iter().enumerate() {
                    let k = i * plane + j;
                    dx[k] = if train {
                        scale * (gy - dbeta[c] / count - xhat[k] * dgamma[c] / count)
                    } else {
                        scale * gy
                    };
                }
            }
            vec![
                Some(Tensor::from_parts(s, dx)),
                Some(Tensor::from_parts(gshape, dgamma)),
                Some(Tensor::from_parts(bshape, dbeta)),
            ]
        }))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "max_pool2: spatial dims {}x{} must both be even",
                s.h, s.w
            )));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(out_shape.numel());
        let mut arg = Vec::with_capacity(out_shape.numel());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * s.w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * i + di) * s.w + 2 * j + dj;
                        if src[k] > src[best] {
                            best = k;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), &[x], move |g| {
            let mut gx = vec![0.0; s.numel()];
            for (&a, &gv) in arg.iter().zip(g.data()) {
                gx[a] += gv;
            }
            vec![Some(Tensor::from_parts(s, gx))]
        }))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` so eval mode is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let s = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..s.numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(Tensor::from_parts(s, out), &[x], move |g| {
            let gx = g.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            vec![Some(Tensor::from_parts(s, gx))]
        }))
    }
}
