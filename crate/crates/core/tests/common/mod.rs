//! Shared oracles for the integration suites and the acceptance report.
#![allow(dead_code)]

use std::cell::RefCell;

use cmrlab::attention::{resolve, AttentionKind, AttentionParams, SimamConfig, StatisticsMode};
use cmrlab::params::{Bound, ParamStore};
use cmrlab::tensor::gradcheck::grad_check_many;
use cmrlab::tensor::{Axes, BnOptions, RunningStats};
use cmrlab::trainer::mse_loss;
use cmrlab::unet::{build_unet, Placement, UNetConfig};
use cmrlab::{Graph, Mode, Result, RngStream, Shape, Tensor, Var};

pub const STEP: f64 = 1e-5;

pub fn randn(shape: Shape, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RngStream::new(seed, "x"))
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut RngStream::new(seed, "u"))
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries a
/// distinct weight in the checked gradient.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), seed ^ 0x5eed);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

pub const SHAPES: [Shape; 3] = [
    Shape { n: 2, c: 3, h: 4, w: 4 },
    Shape { n: 1, c: 2, h: 6, w: 6 },
    Shape { n: 3, c: 4, h: 2, w: 4 },
];

pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "scale", "add_scalar", "square", "sqrt", "exp", "relu", "sigmoid", "expand",
    "reduce_sum", "reduce_mean", "reduce_max", "sum", "mean", "var", "global_avg_pool", "global_max_pool",
    "channel_mean_map", "channel_max_map", "mul_channels", "mul_spatial", "concat_channels", "conv2d",
    "conv2d_strided", "conv_transpose2d", "batch_norm2d", "max_pool2", "dropout", "simam_gate", "l2_normalize",
    "sigmoid_product", "gated_residual", "mse_loss",
];

/// Max relative finite-difference error of one differentiable op at `shape`.
pub fn op_error(op: &str, s: Shape, seed: u64) -> Result<f64> {
    let x = randn(s, seed);
    let y = randn(s, seed + 100);
    let pos = uniform(s, 0.5, 2.0, seed + 200);
    let chan = randn(Shape::new(s.n, s.c, 1, 1), seed + 300);
    let spat = randn(Shape::new(s.n, 1, s.h, s.w), seed + 400);
    let w3 = randn(Shape::new(5, s.c, 3, 3), seed + 500);
    let b5 = randn(Shape::new(1, 5, 1, 1), seed + 600);
    let wt = randn(Shape::new(s.c, 2, 2, 2), seed + 700);
    let b2 = randn(Shape::new(1, 2, 1, 1), seed + 800);
    let gamma = uniform(Shape::new(1, s.c, 1, 1), 0.5, 1.5, seed + 900);
    let beta = randn(Shape::new(1, s.c, 1, 1), seed + 1000);
    type F = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let (f, inputs): (F, Vec<Tensor>) = match op {
        "add" => (Box::new(|g, v| g.add(v[0], v[1])), vec![x, y]),
        "sub" => (Box::new(|g, v| g.sub(v[0], v[1])), vec![x, y]),
        "mul" => (Box::new(|g, v| g.mul(v[0], v[1])), vec![x, y]),
        "div" => (Box::new(|g, v| g.div(v[0], v[1])), vec![x, pos]),
        "scale" => (Box::new(|g, v| Ok(g.scale(v[0], -1.7))), vec![x]),
        "add_scalar" => (Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))), vec![x]),
        "square" => (Box::new(|g, v| Ok(g.square(v[0]))), vec![x]),
        "sqrt" => (Box::new(|g, v| g.sqrt(v[0])), vec![pos]),
        "exp" => (Box::new(|g, v| Ok(g.exp(v[0]))), vec![x]),
        "relu" => (Box::new(|g, v| Ok(g.relu(v[0]))), vec![x]),
        "sigmoid" => (Box::new(|g, v| Ok(g.sigmoid(v[0]))), vec![x]),
        "expand" => (Box::new(move |g, v| g.expand(v[0], s)), vec![chan]),
        "reduce_sum" => (Box::new(|g, v| Ok(g.reduce_sum(v[0], Axes::NHW))), vec![x]),
        "reduce_mean" => (Box::new(|g, v| Ok(g.reduce_mean(v[0], Axes::SPATIAL))), vec![x]),
        "reduce_max" => (Box::new(|g, v| Ok(g.reduce_max(v[0], Axes::C))), vec![x]),
        "sum" => (Box::new(|g, v| Ok(g.sum(v[0]))), vec![x]),
        "mean" => (Box::new(|g, v| Ok(g.mean(v[0]))), vec![x]),
        "var" => (Box::new(|g, v| g.var(v[0], Axes::SPATIAL)), vec![x]),
        "global_avg_pool" => (Box::new(|g, v| Ok(g.global_avg_pool(v[0]))), vec![x]),
        "global_max_pool" => (Box::new(|g, v| Ok(g.global_max_pool(v[0]))), vec![x]),
        "channel_mean_map" => (Box::new(|g, v| Ok(g.channel_mean_map(v[0]))), vec![x]),
        "channel_max_map" => (Box::new(|g, v| Ok(g.channel_max_map(v[0]))), vec![x]),
        "mul_channels" => (Box::new(|g, v| g.mul_channels(v[0], v[1])), vec![x, chan]),
        "mul_spatial" => (Box::new(|g, v| g.mul_spatial(v[0], v[1])), vec![x, spat]),
        "concat_channels" => (Box::new(|g, v| g.concat_channels(&[v[0], v[1], v[0]])), vec![x, y]),
        "conv2d" => (Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)), vec![x, w3, b5]),
        "conv2d_strided" => (Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)), vec![x, w3, b5]),
        "conv_transpose2d" => (Box::new(|g, v| g.conv_transpose2d(v[0], v[1], v[2], 2)), vec![x, wt, b2]),
        "batch_norm2d" => (
            Box::new(move |g, v| {
                let mut stats = RunningStats::new(s.c);
                g.batch_norm2d(v[0], v[1], v[2], &mut stats, Mode::Train, BnOptions::default())
            }),
            vec![x, gamma, beta],
        ),
        "max_pool2" => (Box::new(|g, v| g.max_pool2(v[0])), vec![x]),
        "dropout" => (
            Box::new(|g, v| g.dropout(v[0], 0.3, Mode::Train, &mut RngStream::new(5, "drop"))),
            vec![x],
        ),
        "simam_gate" => (Box::new(|g, v| g.simam_gate(v[0], 1e-4)), vec![x]),
        "l2_normalize" => (Box::new(|g, v| g.l2_normalize(v[0], 1e-8)), vec![x]),
        "sigmoid_product" => (Box::new(|g, v| g.sigmoid_product(v[0], v[1])), vec![x, y]),
        "gated_residual" => (Box::new(|g, v| g.gated_residual(v[0], v[1])), vec![x, y]),
        "mse_loss" => (Box::new(|g, v| mse_loss(g, v[0], v[1])), vec![x, y]),
        other => panic!("no gradient case for {other}"),
    };
    grad_check_many(
        |g, v| {
            let out = f(g, v)?;
            project(g, out, seed)
        },
        &inputs,
        STEP,
        None,
    )
}

pub const ATTENTION_SHAPES: [Shape; 3] = [
    Shape { n: 2, c: 4, h: 6, w: 6 },
    Shape { n: 1, c: 6, h: 4, w: 4 },
    Shape { n: 3, c: 2, h: 4, w: 8 },
];

/// Every attention variant, with SimAM in both statistics modes.
pub fn attention_kinds() -> Vec<(String, AttentionKind)> {
    let params = AttentionParams {
        reduction: Some(2),
        ..AttentionParams::default()
    };
    let mut out: Vec<(String, AttentionKind)> = ["simam", "se", "cbam", "gct", "l2norm", "hadamard", "cmratt"]
        .iter()
        .map(|n| (n.to_string(), resolve(n, &params).unwrap()))
        .collect();
    out.insert(
        1,
        (
            "simam_exact".into(),
            AttentionKind::Simam(SimamConfig {
                statistics_mode: StatisticsMode::ExactLeaveOneOut,
                ..SimamConfig::default()
            }),
        ),
    );
    out
}

/// Gradient check of one attention forward with respect to the input and
/// every parameter. Parameters are redrawn at random so zero-initialised
/// projections do not hide paths.
pub fn attention_error(kind: &AttentionKind, s: Shape, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed, "init");
    let mut store = ParamStore::new();
    let module = kind.build(s.c, &mut store, "att", &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    let mut inputs = vec![randn(s, seed)];
    for (k, id) in ids.into_iter().enumerate() {
        let t = Tensor::randn(store.get(id).shape(), 0.5, &mut rng.fork(&k.to_string()));
        store.set(id, t.clone())?;
        inputs.push(t);
    }
    grad_check_many(
        |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = module.forward(g, &p, v[0])?;
            project(g, y, seed)
        },
        &inputs,
        STEP,
        None,
    )
}

/// Finite-difference check of the training loss of a depth-2 U-Net on a
/// `1x1x16x16` input, over `count` randomly chosen parameter elements.
pub fn unet_subset_error(attention: AttentionKind, count: usize, seed: u64) -> Result<f64> {
    let cfg = UNetConfig {
        base_channels: 4,
        depth: 2,
        dropout_p: 0.25,
        attention,
        placement: Placement::PerConvAndSkip,
        input_size: (16, 16),
    };
    let model = RefCell::new(build_unet(&cfg, &RngStream::new(seed, "init"))?);
    let s = Shape::new(1, 1, 16, 16);
    let x = uniform(s, 0.0, 1.0, seed);
    let y = uniform(s, 0.0, 1.0, seed + 1);
    let params: Vec<Tensor> = model.borrow().params().iter().map(|(_, t)| t.clone()).collect();
    let mut pick = RngStream::new(seed, "probes");
    let probes: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let i = pick.int_inclusive(0, params.len() - 1);
            (i, pick.int_inclusive(0, params[i].numel() - 1))
        })
        .collect();
    grad_check_many(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            // Fixed dropout masks keep every evaluation on the same function.
            let mut drop = RngStream::new(seed, "dropout");
            let pred = model.borrow_mut().forward(g, &p, xv, Mode::Train, &mut drop)?;
            mse_loss(g, pred, yv)
        },
        &params,
        STEP,
        Some(&probes),
    )
}

/// Leave-one-out SimAM energies written out directly: O(N^2) per channel.
pub fn brute_force_energies(values: &[f64], lambda: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|t| {
            let peers: Vec<f64> = (0..n).filter(|&j| j != t).map(|j| values[j]).collect();
            let m = peers.len() as f64;
            let mu = peers.iter().sum::<f64>() / m;
            let var = peers.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / m;
            4.0 * (var + lambda) / ((values[t] - mu).powi(2) + 2.0 * var + 2.0 * lambda)
        })
        .collect()
}

/// Whole-image SSIM as a literal reading of its definition, using
/// `E[xy] - E[x]E[y]` forms rather than centred sums.
pub fn ssim_direct(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(a), mean(b));
    let exx = a.iter().map(|v| v * v).sum::<f64>() / n;
    let eyy = b.iter().map(|v| v * v).sum::<f64>() / n;
    let exy = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / n;
    let (sx2, sy2, sxy) = (exx - mx * mx, eyy - my * my, exy - mx * my);
    let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
    let den = (mx * mx + my * my + c1) * (sx2 + sy2 + c2);
    num / den
}

/// Scalar AdamW recursion with decoupled decay, evaluated step by step.
pub fn adamw_scalar(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p = p - lr * wd * p - lr * mhat / (vhat.sqrt() + eps);
        out.push(p);
    }
    out
}
