//! Neural-network primitives: softmax, GELU, LayerNorm, 3×3 convolution.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::graph::{BackwardContext, Function, Var};
use crate::{Tensor, TensorError};

/// Standard normal CDF, `Φ(x) = ½(1 + erf(x/√2))`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

struct SoftmaxFn;

impl Function for SoftmaxFn {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let y = ctx.output;
        let n = *y.shape().last().unwrap();
        let mut out = Vec::with_capacity(y.numel());
        for (yr, gr) in y
            .data()
            .chunks_exact(n)
            .zip(ctx.grad_output.data().chunks_exact(n))
        {
            let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - inner)));
        }
        vec![Some(Tensor::from_parts(y.shape().to_vec(), out))]
    }
}

struct GeluFn;

impl Function for GeluFn {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let out = x
            .data()
            .iter()
            .zip(ctx.grad_output.data())
            .map(|(&x, &g)| g * (normal_cdf(x) + x * normal_pdf(x)))
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), out))]
    }
}

struct LayerNormFn {
    /// Standardized input before the affine map.
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Function for LayerNormFn {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let c = gamma.len();
        let g = ctx.grad_output.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = ctx.needs_grad[0].then(|| Vec::with_capacity(x.numel()));
        let mut gxhat = vec![0.0; c];
        for (t, (gr, xr)) in g
            .chunks_exact(c)
            .zip(self.normalized.chunks_exact(c))
            .enumerate()
        {
            for j in 0..c {
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
                gxhat[j] = gr[j] * gamma[j];
            }
            if let Some(dx) = dx.as_mut() {
                let mean_g: f64 = gxhat.iter().sum::<f64>() / c as f64;
                let mean_gx: f64 = gxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                let rs = self.inv_std[t];
                dx.extend((0..c).map(|j| rs * (gxhat[j] - mean_g - xr[j] * mean_gx)));
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            ctx.needs_grad[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            ctx.needs_grad[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

struct Conv2dFn {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

/// Valid tap range along one axis for offset `d ∈ {-1, 0, 1}`.
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

fn conv_kernel(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for co in 0..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let kv = k[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = tap_range(dx, w);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + xlo..y * w + xhi];
                        let srow = &xin[sy * w + (xlo as isize + dx) as usize
                            ..sy * w + (xhi as isize + dx) as usize];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += kv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d_same"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let Self { c_in, c_out, h, w } = *self;
        let plane = h * w;
        let x = ctx.inputs[0].data();
        let k = ctx.inputs[1].data();
        let g = ctx.grad_output.data();

        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = vec![0.0; c_in * plane];
            for co in 0..c_out {
                let go = &g[co * plane..(co + 1) * plane];
                for ci in 0..c_in {
                    let dxi = &mut dx[ci * plane..(ci + 1) * plane];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (ylo, yhi) = tap_range(dy, h);
                        for kx in 0..3 {
                            let ddx = kx as isize - 1;
                            let kv = k[((co * c_in + ci) * 3 + ky) * 3 + kx];
                            let (xlo, xhi) = tap_range(ddx, w);
                            for y in ylo..yhi {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[y * w + xlo..y * w + xhi];
                                let start = sy * w + (xlo as isize + ddx) as usize;
                                let drow = &mut dxi[start..start + (xhi - xlo)];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += kv * gv;
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)
        });

        let dk = ctx.needs_grad[1].then(|| {
            let mut dk = vec![0.0; c_out * c_in * 9];
            for co in 0..c_out {
                let go = &g[co * plane..(co + 1) * plane];
                for ci in 0..c_in {
                    let xin = &x[ci * plane..(ci + 1) * plane];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (ylo, yhi) = tap_range(dy, h);
                        for kx in 0..3 {
                            let ddx = kx as isize - 1;
                            let (xlo, xhi) = tap_range(ddx, w);
                            let mut acc = 0.0;
                            for y in ylo..yhi {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[y * w + xlo..y * w + xhi];
                                let start = sy * w + (xlo as isize + ddx) as usize;
                                let srow = &xin[start..start + (xhi - xlo)];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            dk[((co * c_in + ci) * 3 + ky) * 3 + kx] = acc;
                        }
                    }
                }
            }
            Tensor::from_parts(ctx.inputs[1].shape().to_vec(), dk)
        });

        let db = ctx.needs_grad[2].then(|| {
            let sums = g.chunks_exact(plane).map(|p| p.iter().sum()).collect();
            Tensor::from_parts(vec![c_out], sums)
        });
        vec![dx, dk, db]
    }
}

impl<'g> Var<'g> {
    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_lastdim(self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = out[start..].iter().sum();
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.graph().record(Box::new(SoftmaxFn), &[self], out)
    }

    pub fn gelu(self) -> Var<'g> {
        let out = self.value().map(gelu_scalar);
        self.graph().record(Box::new(GeluFn), &[self], out)
    }

    /// Per-row standardization over the last dimension followed by
    /// `gamma · x̂ + beta`. Uses the biased variance.
    pub fn layer_norm(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> Result<Var<'g>, TensorError> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().unwrap();
        for p in [&gm, &bt] {
            if p.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let rows = x.numel() / c;
        let mut normalized = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            inv_std.push(rs);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                normalized.push(xh);
                out.push(gm.data()[j] * xh + bt.data()[j]);
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph().record(
            Box::new(LayerNormFn {
                normalized,
                inv_std,
            }),
            &[self, gamma, beta],
            out,
        ))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1:
    /// `[C_in, H, W] ⊛ [C_out, C_in, 3, 3] + bias[C_out] → [C_out, H, W]`.
    pub fn conv2d_same(self, kernel: Var<'g>, bias: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let (xs, ks) = (x.shape(), k.shape());
        let mismatch = |right: &[usize]| TensorError::ShapeMismatch {
            op: "conv2d_same",
            left: xs.to_vec(),
            right: right.to_vec(),
        };
        if xs.len() != 3 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[0] {
            return Err(mismatch(ks));
        }
        let (c_in, h, w, c_out) = (xs[0], xs[1], xs[2], ks[0]);
        if b.shape() != [c_out] {
            return Err(mismatch(b.shape()));
        }
        let data = conv_kernel(x.data(), k.data(), b.data(), c_in, c_out, h, w);
        let out = Tensor::from_parts(vec![c_out, h, w], data);
        Ok(self.graph().record(
            Box::new(Conv2dFn { c_in, c_out, h, w }),
            &[self, kernel, bias],
            out,
        ))
    }
}
