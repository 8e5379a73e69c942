//! Single-node versions of hot elementwise chains. Each has a composite
//! counterpart built from primitive ops; the tests hold them equal.

use super::ops::sigmoid;
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

impl Graph {
    /// `sigmoid((x - mu)^2 / (4 (var + lambda)) + 1/2) * x` with population
    /// mean and variance per `(n, c)` plane.
    pub fn simam_gate(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let shape = self.shape(x);
        let plane = shape.plane();
        let xt = self.value(x).clone();
        let nf = plane as f64;
        let mut stats = Vec::with_capacity(shape.n * shape.c);
        let mut gate = vec![0.0; shape.numel()];
        let mut out = vec![0.0; shape.numel()];
        for (k, xs) in xt.data().chunks_exact(plane).enumerate() {
            let mu = xs.iter().sum::<f64>() / nf;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
            let den = 4.0 * (var + lambda);
            if den <= 0.0 {
                return Err(Error::InvalidArgument(
                    "simam: constant channel with lambda = 0 has undefined energy".into(),
                ));
            }
            let r = k * plane..(k + 1) * plane;
            for ((s, o), &v) in gate[r.clone()].iter_mut().zip(&mut out[r]).zip(xs) {
                let d = v - mu;
                *s = sigmoid(d * d / den + 0.5);
                *o = *s * v;
            }
            stats.push((mu, den));
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[x], move |g| {
            let mut dx = vec![0.0; shape.numel()];
            for (k, &(mu, den)) in stats.iter().enumerate() {
                let r = k * plane..(k + 1) * plane;
                let (xs, ss, gs) = (&xt.data()[r.clone()], &gate[r.clone()], &g.data()[r.clone()]);
                // a_j = g_j x_j s_j (1 - s_j) is the gradient reaching z_j.
                let (mut ad, mut ad2) = (0.0, 0.0);
                for ((&v, &s), &gv) in xs.iter().zip(ss).zip(gs) {
                    let d = v - mu;
                    let a = gv * v * s * (1.0 - s);
                    ad += a * d;
                    ad2 += a * d * d;
                }
                for (((o, &v), &s), &gv) in dx[r].iter_mut().zip(xs).zip(ss).zip(gs) {
                    let d = v - mu;
                    let a = gv * v * s * (1.0 - s);
                    *o = gv * s + 2.0 / den * (a * d - ad / nf) - 8.0 * d * ad2 / (nf * den * den);
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    /// `x / (||x|| + eps)` with the norm over `(c, h, w)` of each batch item.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("l2norm: eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x);
        let item = shape.numel() / shape.n.max(1);
        let xt = self.value(x).clone();
        let norms: Vec<f64> = xt
            .data()
            .chunks_exact(item)
            .map(|xs| xs.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = Vec::with_capacity(shape.numel());
        for (xs, &r) in xt.data().chunks_exact(item).zip(&norms) {
            out.extend(xs.iter().map(|v| v / (r + eps)));
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[x], move |g| {
            let mut dx = Vec::with_capacity(shape.numel());
            for ((xs, gs), &r) in xt.data().chunks_exact(item).zip(g.data().chunks_exact(item)).zip(&norms) {
                let q = r + eps;
                // The norm's derivative at 0 is taken as 0, as for `sqrt`.
                let k = if r > 0.0 {
                    xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / (q * q * r)
                } else {
                    0.0
                };
                dx.extend(xs.iter().zip(gs).map(|(&v, &gv)| gv / q - v * k));
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    /// `sigmoid(a) * sigmoid(b)`.
    pub fn sigmoid_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::Shape(format!("sigmoid_product: {shape} vs {}", self.shape(b))));
        }
        let sa = self.value(a).map(sigmoid);
        let sb = self.value(b).map(sigmoid);
        let out: Vec<f64> = sa.data().iter().zip(sb.data()).map(|(p, q)| p * q).collect();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], move |g| {
            let (mut da, mut db) = (Vec::with_capacity(shape.numel()), Vec::with_capacity(shape.numel()));
            for ((&gv, &p), &q) in g.data().iter().zip(sa.data()).zip(sb.data()) {
                da.push(gv * q * p * (1.0 - p));
                db.push(gv * p * q * (1.0 - q));
            }
            vec![Some(Tensor::from_parts(shape, da)), Some(Tensor::from_parts(shape, db))]
        }))
    }

    /// `a * x + x`.
    pub fn gated_residual(&mut self, a: Var, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape != self.shape(a) {
            return Err(Error::Shape(format!("gated_residual: gate {} vs input {shape}", self.shape(a))));
        }
        let (at, xt) = (self.value(a).clone(), self.value(x).clone());
        let out: Vec<f64> = at.data().iter().zip(xt.data()).map(|(g, v)| g * v + v).collect();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, x], move |g| {
            let da = g.data().iter().zip(xt.data()).map(|(gv, v)| gv * v).collect();
            let dx = g.data().iter().zip(at.data()).map(|(gv, a)| gv * (a + 1.0)).collect();
            vec![Some(Tensor::from_parts(shape, da)), Some(Tensor::from_parts(shape, dx))]
        }))
    }
}
