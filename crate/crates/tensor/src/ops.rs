//! Structural and linear-algebra operators.

use crate::graph::{BackwardContext, Function, Var};
use crate::tensor::check_same;
use crate::{Tensor, TensorError};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryFn(Binary);

impl Function for BinaryFn {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_output;
        match self.0 {
            Binary::Add => vec![
                ctx.needs_grad[0].then(|| g.clone()),
                ctx.needs_grad[1].then(|| g.clone()),
            ],
            Binary::Sub => vec![
                ctx.needs_grad[0].then(|| g.clone()),
                ctx.needs_grad[1].then(|| g.map(|v| -v)),
            ],
            Binary::Mul => {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                vec![
                    ctx.needs_grad[0].then(|| zip_map(g, b, |g, b| g * b)),
                    ctx.needs_grad[1].then(|| zip_map(g, a, |g, a| g * a)),
                ]
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

struct ScaleFn(f64);

impl Function for ScaleFn {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let c = self.0;
        vec![Some(ctx.grad_output.map(|g| g * c))]
    }
}

struct AddScalarFn;

impl Function for AddScalarFn {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad_output.clone())]
    }
}

struct SumFn;

impl Function for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_output.data()[0];
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    }
}

struct ReshapeFn;

impl Function for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(
            ctx.inputs[0].shape().to_vec(),
            ctx.grad_output.data().to_vec(),
        ))]
    }
}

/// Flat gather: `out[i] = x[index[i]]`, or zero where the index is `None`.
struct GatherFn {
    index: Vec<Option<usize>>,
}

impl Function for GatherFn {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let mut grad = Tensor::zeros(ctx.inputs[0].shape());
        let gd = grad.data_mut();
        for (&src, &g) in self.index.iter().zip(ctx.grad_output.data()) {
            if let Some(src) = src {
                gd[src] += g;
            }
        }
        vec![Some(grad)]
    }
}

struct PermuteFn {
    inverse: Vec<usize>,
}

impl Function for PermuteFn {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        vec![Some(permute_tensor(ctx.grad_output, &self.inverse))]
    }
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut counter = vec![0usize; nd];
    let src = x.data();
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut offset = 0usize;
    loop {
        for k in 0..inner {
            out.push(src[offset + k * inner_stride]);
        }
        // advance the outer counters
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            d -= 1;
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
}

/// Adds a `[C]` bias to every trailing-dimension row of `[.., C]`.
struct AddBiasFn;

impl Function for AddBiasFn {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_output;
        let c = ctx.inputs[1].numel();
        let bias_grad = ctx.needs_grad[1].then(|| {
            let mut acc = vec![0.0; c];
            for row in g.data().chunks_exact(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::from_parts(vec![c], acc)
        });
        vec![ctx.needs_grad[0].then(|| g.clone()), bias_grad]
    }
}

struct MatmulFn {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Function for MatmulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let Self { batch, m, k, n } = *self;
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let dc = ctx.grad_output.data();
        let da = ctx.needs_grad[0].then(|| {
            // dA = dC · Bᵀ
            let mut out = vec![0.0; batch * m * k];
            for t in 0..batch {
                let (dc, b) = (
                    &dc[t * m * n..(t + 1) * m * n],
                    &b[t * k * n..(t + 1) * k * n],
                );
                let out = &mut out[t * m * k..(t + 1) * m * k];
                for i in 0..m {
                    let dc_row = &dc[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &b[p * n..(p + 1) * n];
                        out[i * k + p] = dot(dc_row, b_row);
                    }
                }
            }
            Tensor::from_parts(ctx.inputs[0].shape().to_vec(), out)
        });
        let db = ctx.needs_grad[1].then(|| {
            // dB = Aᵀ · dC
            let mut out = vec![0.0; batch * k * n];
            for t in 0..batch {
                let (a, dc) = (
                    &a[t * m * k..(t + 1) * m * k],
                    &dc[t * m * n..(t + 1) * m * n],
                );
                let out = &mut out[t * k * n..(t + 1) * k * n];
                for i in 0..m {
                    let dc_row = &dc[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = a[i * k + p];
                        let row = &mut out[p * n..(p + 1) * n];
                        for (o, &d) in row.iter_mut().zip(dc_row) {
                            *o += aip * d;
                        }
                    }
                }
            }
            Tensor::from_parts(ctx.inputs[1].shape().to_vec(), out)
        });
        vec![da, db]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_kernel(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for t in 0..batch {
        let a = &a[t * m * k..(t + 1) * m * k];
        let b = &b[t * k * n..(t + 1) * k * n];
        let c = &mut c[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in c_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
    }
    c
}

impl<'g> Var<'g> {
    fn binary(self, other: Var<'g>, kind: Binary) -> Result<Var<'g>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let op = BinaryFn(kind);
        check_same(op.name(), a.shape(), b.shape())?;
        let out = match kind {
            Binary::Add => zip_map(&a, &b, |x, y| x + y),
            Binary::Sub => zip_map(&a, &b, |x, y| x - y),
            Binary::Mul => zip_map(&a, &b, |x, y| x * y),
        };
        Ok(self.graph().record(Box::new(op), &[self, other], out))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'g> {
        let out = self.value().map(|v| v * c);
        self.graph().record(Box::new(ScaleFn(c)), &[self], out)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let out = self.value().map(|v| v + c);
        self.graph().record(Box::new(AddScalarFn), &[self], out)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Var<'g> {
        let total: f64 = self.value().data().iter().sum();
        self.graph()
            .record(Box::new(SumFn), &[self], Tensor::scalar(total))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let out = self.value().reshaped(shape)?;
        Ok(self.graph().record(Box::new(ReshapeFn), &[self], out))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        let valid = axes.len() == nd
            && axes
                .iter()
                .all(|&a| a < nd && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                shape: axes.to_vec(),
                reason: "permute axes must be a permutation of the input dimensions",
            });
        }
        let mut inverse = vec![0; nd];
        for (d, &a) in axes.iter().enumerate() {
            inverse[a] = d;
        }
        let out = permute_tensor(&x, axes);
        Ok(self
            .graph()
            .record(Box::new(PermuteFn { inverse }), &[self], out))
    }

    /// Builds a tensor of `shape` whose flat element `i` is `self[index[i]]`
    /// (zero for `None`). Gradients scatter-add back to the sources.
    pub fn gather(
        self,
        shape: &[usize],
        index: Vec<Option<usize>>,
    ) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        let src = x.data();
        let mut out = Vec::with_capacity(numel);
        for &i in &index {
            match i {
                Some(i) if i >= src.len() => {
                    return Err(TensorError::IndexOutOfRange {
                        index: i,
                        len: src.len(),
                    })
                }
                Some(i) => out.push(src[i]),
                None => out.push(0.0),
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self
            .graph()
            .record(Box::new(GatherFn { index }), &[self], out))
    }

    /// `self[.., c] + bias[c]`.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (x, b) = (self.value(), bias.value());
        let c = *x
            .shape()
            .last()
            .expect("tensors have at least one dimension");
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph().record(Box::new(AddBiasFn), &[self, bias], out))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]`; the
    /// leading dimensions of both operands must be identical.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(mismatch());
        }
        let nd = sa.len();
        let (m, k, k2, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 2], sb[nd - 1]);
        if k != k2 || sa[..nd - 2] != sb[..nd - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let data = matmul_kernel(a.data(), b.data(), batch, m, k, n);
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::from_parts(shape, data);
        Ok(self
            .graph()
            .record(Box::new(MatmulFn { batch, m, k, n }), &[self, other], out))
    }

    /// `x · W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.matmul(weight)?.add_bias(bias)
    }

    /// Mean squared difference, optionally restricted to `mask` (1 keeps a
    /// position, 0 drops it); the mean is over kept positions.
    pub fn mse(self, target: Var<'g>, mask: Option<&Tensor>) -> Result<Var<'g>, TensorError> {
        let diff = self.sub(target)?;
        match mask {
            None => Ok(diff.mul(diff)?.mean()),
            Some(mask) => {
                check_same("mse", mask.shape(), &diff.shape())?;
                let kept: f64 = mask.data().iter().sum();
                let m = self.graph().constant(mask.clone());
                let masked = diff.mul(m)?;
                Ok(masked.mul(masked)?.sum().scale(1.0 / kept.max(1.0)))
            }
        }
    }
}
