//! Elementwise arithmetic, explicit broadcasting, and reductions.

use super::{Axes, Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};

/// Strides of `small` laid over the index space of `big`, zero on broadcast axes.
fn broadcast_strides(small: Shape, big: Shape) -> [usize; 4] {
    let sd = small.dims();
    let bd = big.dims();
    let dense = [sd[1] * sd[2] * sd[3], sd[2] * sd[3], sd[3], 1];
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if sd[i] == bd[i] { dense[i] } else { 0 };
    }
    out
}

/// `out[i] = src[map(i)]` for every index `i` of `big`.
fn gather(src: &[f64], small: Shape, big: Shape) -> Vec<f64> {
    let st = broadcast_strides(small, big);
    let mut out = Vec::with_capacity(big.numel());
    for n in 0..big.n {
        for c in 0..big.c {
            for h in 0..big.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..big.w {
                    out.push(src[base + w * st[3]]);
                }
            }
        }
    }
    out
}

/// `out[map(i)] += src[i]` for every index `i` of `big`.
fn scatter_add(src: &[f64], big: Shape, small: Shape) -> Vec<f64> {
    let st = broadcast_strides(small, big);
    let mut out = vec![0.0; small.numel()];
    let mut i = 0;
    for n in 0..big.n {
        for c in 0..big.c {
            for h in 0..big.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..big.w {
                    out[base + w * st[3]] += src[i];
                    i += 1;
                }
            }
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

impl Graph {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{op}: left operand {sa} vs right operand {sb}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], |g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let out = zip_map(&ta, &tb, |x, y| x * y);
        Ok(self.push(out, &[a, b], move |g| {
            vec![
                Some(zip_map(g, &tb, |g, y| g * y)),
                Some(zip_map(g, &ta, |g, x| g * x)),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if tb.data().contains(&0.0) {
            return Err(Error::InvalidArgument("div: zero in denominator".into()));
        }
        let out = zip_map(&ta, &tb, |x, y| x / y);
        let q = out.clone();
        Ok(self.push(out, &[a, b], move |g| {
            let ga = zip_map(g, &tb, |g, y| g / y);
            let gb = Tensor::from_parts(
                g.shape(),
                g.data()
                    .iter()
                    .zip(q.data())
                    .zip(tb.data())
                    .map(|((&g, &q), &y)| -g * q / y)
                    .collect(),
            );
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, &[x], |g| vec![Some(g.clone())])
    }

    /// Elementwise op whose derivative is expressed through input and output.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let input = self.value(x).clone();
        let out = input.map(f);
        let saved = out.clone();
        self.push(out, &[x], move |g| {
            let data = g
                .data()
                .iter()
                .zip(input.data())
                .zip(saved.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape(), data))]
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        Ok(self.unary(x, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Repeat size-1 axes of `x` up to `shape`.
    pub fn expand(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let small = self.shape(x);
        for (i, (s, b)) in small.dims().iter().zip(shape.dims()).enumerate() {
            if *s != b && *s != 1 {
                return Err(Error::Shape(format!(
                    "expand: axis {i} of {small} cannot broadcast to {shape}"
                )));
            }
        }
        if small == shape {
            return Ok(x);
        }
        let out = Tensor::from_parts(shape, gather(self.value(x).data(), small, shape));
        Ok(self.push(out, &[x], move |g| {
            vec![Some(Tensor::from_parts(small, scatter_add(g.data(), shape, small)))]
        }))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn reduce_sum(&mut self, x: Var, axes: Axes) -> Var {
        let big = self.shape(x);
        let small = big.reduced(axes);
        let out = Tensor::from_parts(small, scatter_add(self.value(x).data(), big, small));
        self.push(out, &[x], move |g| {
            vec![Some(Tensor::from_parts(big, gather(g.data(), small, big)))]
        })
    }

    pub fn reduce_mean(&mut self, x: Var, axes: Axes) -> Var {
        let big = self.shape(x);
        let count = big.numel() / big.reduced(axes).numel();
        let s = self.reduce_sum(x, axes);
        self.scale(s, 1.0 / count as f64)
    }

    /// Max over `axes`; the gradient flows to the first maximal element in row-major scan order.
    pub fn reduce_max(&mut self, x: Var, axes: Axes) -> Var {
        let big = self.shape(x);
        let small = big.reduced(axes);
        let st = broadcast_strides(small, big);
        let src = self.value(x).data();
        let mut best = vec![f64::NEG_INFINITY; small.numel()];
        let mut arg = vec![usize::MAX; small.numel()];
        let mut i = 0;
        for n in 0..big.n {
            for c in 0..big.c {
                for h in 0..big.h {
                    let base = n * st[0] + c * st[1] + h * st[2];
                    for w in 0..big.w {
                        let r = base + w * st[3];
                        if arg[r] == usize::MAX || src[i] > best[r] {
                            best[r] = src[i];
                            arg[r] = i;
                        }
                        i += 1;
                    }
                }
            }
        }
        let out = Tensor::from_parts(small, best);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; big.numel()];
            for (r, &a) in arg.iter().enumerate() {
                gx[a] += g.data()[r];
            }
            vec![Some(Tensor::from_parts(big, gx))]
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce_sum(x, Axes::ALL)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce_mean(x, Axes::ALL)
    }

    /// Population variance over `axes` (divide by the element count).
    pub fn var(&mut self, x: Var, axes: Axes) -> Result<Var> {
        let shape = self.shape(x);
        let mu = self.reduce_mean(x, axes);
        let mu = self.expand(mu, shape)?;
        let d = self.sub(x, mu)?;
        let d2 = self.square(d);
        Ok(self.reduce_mean(d2, axes))
    }

    /// `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        self.reduce_mean(x, Axes::SPATIAL)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        self.reduce_max(x, Axes::SPATIAL)
    }

    /// `(n, c, h, w) -> (n, 1, h, w)`.
    pub fn channel_mean_map(&mut self, x: Var) -> Var {
        self.reduce_mean(x, Axes::C)
    }

    pub fn channel_max_map(&mut self, x: Var) -> Var {
        self.reduce_max(x, Axes::C)
    }

    /// Scale each channel of `x` by the matching entry of a `(n, c, 1, 1)` gate.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(x);
        let gs = self.shape(gate);
        if gs != shape.reduced(Axes::SPATIAL) {
            return Err(Error::Shape(format!("channel gate {gs} does not match features {shape}")));
        }
        let g = self.expand(gate, shape)?;
        self.mul(x, g)
    }

    /// Scale every channel of `x` by a `(n, 1, h, w)` spatial gate.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(x);
        let gs = self.shape(gate);
        if gs != shape.reduced(Axes::C) {
            return Err(Error::Shape(format!("spatial gate {gs} does not match features {shape}")));
        }
        let g = self.expand(gate, shape)?;
        self.mul(x, g)
    }

    /// Concatenate along channels, preserving block order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|p| self.shape(*p))
            .ok_or_else(|| Error::Shape("concat_channels: no inputs".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {s} does not match {first} outside the channel axis"
                )));
            }
            widths.push(s.c);
        }
        let total_c: usize = widths.iter().sum();
        let plane = first.plane();
        let out_shape = Shape::new(first.n, total_c, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for (p, &c) in parts.iter().zip(&widths) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, parts, move |g| {
            let mut grads: Vec<Vec<f64>> =
                widths.iter().map(|c| Vec::with_capacity(first.n * c * plane)).collect();
            let mut off = 0;
            for _ in 0..first.n {
                for (gp, &c) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g.data()[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .map(|(d, &c)| Some(Tensor::from_parts(Shape::new(first.n, c, first.h, first.w), d)))
                .collect()
        }))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_activations() {
        let mut g = Graph::no_grad();
        let x = g.constant(t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sigmoid(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn population_variance() {
        let mut g = Graph::no_grad();
        let x = g.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let v = g.var(x, Axes::ALL).unwrap();
        assert!((g.value(v).item().unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn concat_preserves_block_order() {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::full(Shape::new(2, 3, 2, 2), 1.0));
        let b = g.constant(Tensor::full(Shape::new(2, 5, 2, 2), 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        let v = g.value(c);
        assert_eq!(v.shape(), Shape::new(2, 8, 2, 2));
        for n in 0..2 {
            for ch in 0..8 {
                let want = if ch < 3 { 1.0 } else { 2.0 };
                assert_eq!(v.get(n, ch, 1, 0), want);
            }
        }
    }

    #[test]
    fn mismatched_shapes_name_both_operands() {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 4)));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("(1, 2, 3, 3)") && err.contains("(1, 2, 3, 4)"), "{err}");
    }

    #[test]
    fn reduce_max_breaks_ties_at_first_occurrence() {
        let mut g = Graph::new();
        let x = g.param(t(Shape::new(1, 1, 2, 2), &[3.0, 3.0, 1.0, 3.0]));
        let m = g.reduce_max(x, Axes::ALL);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn expand_rejects_non_unit_axes() {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(g.expand(a, Shape::new(1, 3, 4, 4)).is_err());
        assert!(g.expand(a, Shape::new(2, 2, 4, 4)).is_ok());
    }
}
