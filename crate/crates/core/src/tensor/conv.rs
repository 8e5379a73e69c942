//! 2-D convolution and transposed convolution, lowered to GEMM.

use super::linalg::{col2im, gemm, im2col, Window};
use super::{Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};

fn check_bias(op: &str, bias: Shape, out_c: usize) -> Result<()> {
    if bias.numel() != out_c {
        return Err(Error::Shape(format!(
            "{op}: bias has {} entries but the layer has {out_c} output channels",
            bias.numel()
        )));
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad(g: &[f64], out_c: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; out_c];
    for (i, chunk) in g.chunks_exact(plane).enumerate() {
        db[i % out_c] += chunk.iter().sum::<f64>();
    }
    db
}

impl Graph {
    /// Zero-padded cross-correlation. `weight` is `(out_c, in_c, kh, kw)`,
    /// `bias` holds `out_c` values.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let (out_c, in_c, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if in_c != xs.c {
            return Err(Error::Shape(format!(
                "conv2d: input has {} channels but the kernel expects in_c = {in_c}",
                xs.c
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: kernel size {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        check_bias("conv2d", self.shape(bias), out_c)?;
        if xs.h + 2 * padding < kh || xs.w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                xs.h + 2 * padding,
                xs.w + 2 * padding
            )));
        }
        let geo = Window {
            c: in_c,
            h: xs.h,
            w: xs.w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (xs.h + 2 * padding - kh) / stride + 1,
            ow: (xs.w + 2 * padding - kw) / stride + 1,
        };
        let out_shape = Shape::new(xs.n, out_c, geo.oh, geo.ow);
        let (rows, ncols) = (geo.rows(), geo.cols());
        let in_len = in_c * xs.plane();
        let out_len = out_c * ncols;

        let xt = self.value(x).clone();
        let wt = self.value(weight).clone();
        let bt = self.value(bias).clone();
        let mut out = vec![0.0; out_shape.numel()];
        // Patch matrices for the whole batch, kept for the weight gradient.
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; xs.n * rows * ncols] };
        for n in 0..xs.n {
            let src = &xt.data()[n * in_len..(n + 1) * in_len];
            let patches: &[f64] = if geo.is_pointwise() {
                src
            } else {
                let c = &mut cols[n * rows * ncols..(n + 1) * rows * ncols];
                im2col(src, &geo, c);
                c
            };
            let dst = &mut out[n * out_len..(n + 1) * out_len];
            gemm(out_c, rows, ncols, wt.data(), (rows, 1), patches, (ncols, 1), dst, false);
        }
        add_bias(&mut out, bt.data(), ncols);

        let need_x = self.requires_grad(x);

        Ok(self.push(Tensor::from_parts(out_shape, out), &[x, weight, bias], move |g| {
            let gd = g.data();
            let mut dx = if need_x { vec![0.0; xs.numel()] } else { Vec::new() };
            let mut dw = vec![0.0; ws.numel()];
            let mut dcols = if need_x && !geo.is_pointwise() { vec![0.0; rows * ncols] } else { Vec::new() };
            for n in 0..xs.n {
                let gy = &gd[n * out_len..(n + 1) * out_len];
                let patches: &[f64] = if geo.is_pointwise() {
                    &xt.data()[n * in_len..(n + 1) * in_len]
                } else {
                    &cols[n * rows * ncols..(n + 1) * rows * ncols]
                };
                // dW += dY (out_c x P) * patches^T (P x rows)
                gemm(out_c, ncols, rows, gy, (ncols, 1), patches, (1, ncols), &mut dw, true);
                if need_x {
                    let dst = &mut dx[n * in_len..(n + 1) * in_len];
                    if geo.is_pointwise() {
                        gemm(rows, out_c, ncols, wt.data(), (1, rows), gy, (ncols, 1), dst, true);
                    } else {
                        gemm(rows, out_c, ncols, wt.data(), (1, rows), gy, (ncols, 1), &mut dcols, false);
                        col2im(&dcols, &geo, dst);
                    }
                }
            }
            let db = bias_grad(gd, out_c, ncols);
            vec![
                need_x.then(|| Tensor::from_parts(xs, dx)),
                Some(Tensor::from_parts(ws, dw)),
                Some(Tensor::from_parts(bt.shape(), db)),
            ]
        }))
    }

    /// Transposed convolution without padding. `weight` is `(in_c, out_c, kh, kw)`;
    /// the output has spatial size `stride * (size - 1) + k`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let (in_c, out_c, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if in_c != xs.c {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {} channels but the kernel expects in_c = {in_c}",
                xs.c
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d: stride must be >= 1".into()));
        }
        check_bias("conv_transpose2d", self.shape(bias), out_c)?;
        let (oh, ow) = (stride * (xs.h - 1) + kh, stride * (xs.w - 1) + kw);
        // Window over the *output* image whose patch grid is the input grid.
        let geo = Window { c: out_c, h: oh, w: ow, kh, kw, stride, pad: 0, oh: xs.h, ow: xs.w };
        let out_shape = Shape::new(xs.n, out_c, oh, ow);
        let (rows, ncols) = (geo.rows(), geo.cols());
        let in_len = in_c * ncols;
        let out_len = out_c * oh * ow;

        let xt = self.value(x).clone();
        let wt = self.value(weight).clone();
        let bt = self.value(bias).clone();
        let mut out = vec![0.0; out_shape.numel()];
        let mut cols = vec![0.0; rows * ncols];
        for n in 0..xs.n {
            let src = &xt.data()[n * in_len..(n + 1) * in_len];
            // cols (rows x P) = W^T (rows x in_c) * X (in_c x P)
            gemm(rows, in_c, ncols, wt.data(), (1, rows), src, (ncols, 1), &mut cols, false);
            col2im(&cols, &geo, &mut out[n * out_len..(n + 1) * out_len]);
        }
        add_bias(&mut out, bt.data(), oh * ow);

        let need_x = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), &[x, weight, bias], move |g| {
            let gd = g.data();
            let mut dx = if need_x { vec![0.0; xs.numel()] } else { Vec::new() };
            let mut dw = vec![0.0; ws.numel()];
            let mut dcols = vec![0.0; rows * ncols];
            for n in 0..xs.n {
                im2col(&gd[n * out_len..(n + 1) * out_len], &geo, &mut dcols);
                let src = &xt.data()[n * in_len..(n + 1) * in_len];
                // dW (in_c x rows) += X (in_c x P) * dcols^T (P x rows)
                gemm(in_c, ncols, rows, src, (ncols, 1), &dcols, (1, ncols), &mut dw, true);
                if need_x {
                    // dX (in_c x P) = W (in_c x rows) * dcols (rows x P)
                    let dst = &mut dx[n * in_len..(n + 1) * in_len];
                    gemm(in_c, rows, ncols, wt.data(), (rows, 1), &dcols, (ncols, 1), dst, false);
                }
            }
            let db = bias_grad(gd, out_c, oh * ow);
            vec![
                need_x.then(|| Tensor::from_parts(xs, dx)),
                Some(Tensor::from_parts(ws, dw)),
                Some(Tensor::from_parts(bt.shape(), db)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
        let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
        let mut out = Vec::new();
        for n in 0..xs.n {
            for o in 0..ws.n {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for c in 0..xs.c {
                            for ki in 0..ws.h {
                                for kj in 0..ws.w {
                                    let y = (i * stride + ki) as isize - pad as isize;
                                    let z = (j * stride + kj) as isize - pad as isize;
                                    if y >= 0 && z >= 0 && (y as usize) < xs.h && (z as usize) < xs.w {
                                        acc += x.get(n, c, y as usize, z as usize) * w.get(o, c, ki, kj);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::from_vec(Shape::new(xs.n, ws.n, oh, ow), out).unwrap()
    }

    fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(x, w, b, stride, pad)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn all_ones_3x3_center_and_corner() {
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let b = Tensor::zeros(Shape::vector(1));
        let y = run_conv(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 2, 2), 4.0);
        assert_eq!(y.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_and_zero_kernels() {
        let mut rng = RngStream::new(1, "test");
        let x = Tensor::randn(Shape::new(2, 1, 5, 4), 1.0, &mut rng);
        let one = Tensor::ones(Shape::new(1, 1, 1, 1));
        let zb = Tensor::zeros(Shape::vector(1));
        assert_eq!(run_conv(&x, &one, &zb, 1, 0).unwrap(), x);
        let zero = Tensor::zeros(Shape::new(3, 1, 3, 3));
        let y = run_conv(&x, &zero, &Tensor::zeros(Shape::vector(3)), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_for_strides_and_padding() {
        let mut rng = RngStream::new(2, "test");
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (3, 0, 3)] {
            let x = Tensor::randn(Shape::new(2, 3, 7, 6), 1.0, &mut rng);
            let w = Tensor::randn(Shape::new(4, 3, k, k), 1.0, &mut rng);
            let b = Tensor::randn(Shape::vector(4), 1.0, &mut rng);
            let fast = run_conv(&x, &w, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let x = Tensor::ones(Shape::new(1, 2, 4, 4));
        let w = Tensor::ones(Shape::new(1, 3, 3, 3));
        let err = run_conv(&x, &w, &Tensor::zeros(Shape::vector(1)), 1, 1).unwrap_err();
        assert!(err.to_string().contains("in_c"), "{err}");
        let w_even = Tensor::ones(Shape::new(1, 2, 2, 2));
        assert!(run_conv(&x, &w_even, &Tensor::zeros(Shape::vector(1)), 1, 1).is_err());
        let err = run_conv(&x, &Tensor::ones(Shape::new(1, 2, 3, 3)), &Tensor::zeros(Shape::vector(2)), 1, 1)
            .unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn transposed_single_pixel_and_zero_input() {
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let w = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let b = g.constant(Tensor::zeros(Shape::vector(1)));
        let y = g.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 1, 2, 2));
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));

        let z = g.constant(Tensor::zeros(Shape::new(2, 1, 3, 3)));
        let y = g.conv_transpose2d(z, w, b, 2).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(2, 1, 6, 6));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
