//! Image-to-image regularizers: the residual swin-transformer regularizer
//! (RSTR) and a residual CNN used as an ablation baseline.
//!
//! RSTR is `conv3×3(1→C) → STL → conv3×3(C→1) + input`, where the swin
//! transformer layer (STL) runs windowed multi-head self-attention and an MLP,
//! each behind a LayerNorm and a residual connection.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use transem_tensor::{BackwardContext, Function, Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::image::Image2D;
use crate::params::ParamSet;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    #[default]
    Rstr,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    /// Feature channels `C`.
    pub channels: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Window side `M`.
    pub window_size: usize,
    /// Cyclically shift windows by `M/2` before partitioning.
    pub shift_windows: bool,
    /// Learned per-head bias indexed by relative token offset.
    pub relative_position_bias: bool,
    /// Add the module input to the output.
    pub outer_residual: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::Rstr,
            channels: 32,
            n_heads: 4,
            mlp_ratio: 2,
            window_size: 4,
            shift_windows: false,
            relative_position_bias: false,
            outer_residual: true,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.mlp_ratio == 0 || self.window_size == 0 || self.n_heads == 0 {
            return Err(CoreError::invalid("regularizer sizes must be positive"));
        }
        if self.kind == RegularizerKind::Rstr && !self.channels.is_multiple_of(self.n_heads) {
            return Err(CoreError::invalid(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let entries: Vec<(&str, Vec<usize>)> = match self.kind {
            RegularizerKind::Rstr => {
                let hidden = c * self.mlp_ratio;
                let mut v = vec![
                    ("conv_in.weight", vec![c, 1, 3, 3]),
                    ("conv_in.bias", vec![c]),
                    ("norm1.weight", vec![c]),
                    ("norm1.bias", vec![c]),
                    ("attn.q.weight", vec![c, c]),
                    ("attn.q.bias", vec![c]),
                    ("attn.k.weight", vec![c, c]),
                    ("attn.k.bias", vec![c]),
                    ("attn.v.weight", vec![c, c]),
                    ("attn.v.bias", vec![c]),
                    ("attn.proj.weight", vec![c, c]),
                    ("attn.proj.bias", vec![c]),
                ];
                if self.relative_position_bias {
                    let span = 2 * self.window_size - 1;
                    v.push(("attn.rel_bias", vec![self.n_heads, span * span]));
                }
                v.extend([
                    ("norm2.weight", vec![c]),
                    ("norm2.bias", vec![c]),
                    ("mlp.fc1.weight", vec![c, hidden]),
                    ("mlp.fc1.bias", vec![hidden]),
                    ("mlp.fc2.weight", vec![hidden, c]),
                    ("mlp.fc2.bias", vec![c]),
                    ("conv_out.weight", vec![1, c, 3, 3]),
                    ("conv_out.bias", vec![1]),
                ]);
                v
            }
            RegularizerKind::Cnn => vec![
                ("conv1.weight", vec![c, 1, 3, 3]),
                ("conv1.bias", vec![c]),
                ("conv2.weight", vec![c, c, 3, 3]),
                ("conv2.bias", vec![c]),
                ("conv3.weight", vec![1, c, 3, 3]),
                ("conv3.bias", vec![1]),
            ],
        };
        entries
            .into_iter()
            .map(|(n, s)| (n.to_string(), s))
            .collect()
    }

    fn is_zero_init(&self, name: &str) -> bool {
        matches!(
            name,
            "attn.proj.weight"
                | "attn.proj.bias"
                | "mlp.fc2.weight"
                | "mlp.fc2.bias"
                | "conv_out.weight"
                | "conv_out.bias"
        ) || (self.kind == RegularizerKind::Cnn && name.starts_with("conv3."))
    }
}

/// How [`Regularizer::init`] fills the output layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Output projections and the last convolution start at zero, making the
    /// module the identity map (with the outer residual).
    Identity,
    /// Every tensor random; used to exercise all gradient paths.
    Generic,
}

/// A regularizer's configuration and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Regularizer {
    pub config: RegularizerConfig,
    pub params: ParamSet,
}

impl Regularizer {
    /// Linear weights ~ N(0, 0.02²), convolution taps ~ U(±1/√fan_in),
    /// LayerNorm scale 1, biases 0.
    pub fn init<R: Rng>(config: &RegularizerConfig, mode: InitMode, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let linear = Normal::new(0.0, 0.02).expect("valid normal");
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let numel: usize = shape.iter().product();
            let zero = mode == InitMode::Identity && config.is_zero_init(&name);
            let data: Vec<f64> = if zero {
                vec![0.0; numel]
            } else if name.ends_with(".bias") {
                match mode {
                    InitMode::Identity => vec![0.0; numel],
                    InitMode::Generic => (0..numel).map(|_| linear.sample(rng)).collect(),
                }
            } else if name.starts_with("norm") {
                match mode {
                    InitMode::Identity => vec![1.0; numel],
                    InitMode::Generic => (0..numel)
                        .map(|_| 1.0 + 10.0 * linear.sample(rng))
                        .collect(),
                }
            } else if shape.len() == 4 {
                let bound = 1.0 / ((shape[1] * 9) as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..numel).map(|_| u.sample(rng)).collect()
            } else if mode == InitMode::Generic {
                // larger weights so attention is far from uniform
                (0..numel).map(|_| 10.0 * linear.sample(rng)).collect()
            } else {
                (0..numel).map(|_| linear.sample(rng)).collect()
            };
            params.push(name, Tensor::new(&shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn from_params(config: &RegularizerConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamSet::new();
        for (name, shape) in config.layout() {
            expected.push(name, Tensor::zeros(&shape));
        }
        expected.check_layout(&params)?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Registers the parameters on `graph`, trainable or constant.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundParams<'g> {
        BoundParams {
            names: self.params.names().map(str::to_string).collect(),
            vars: self
                .params
                .tensors()
                .map(|t| {
                    if trainable {
                        graph.param(t.clone())
                    } else {
                        graph.constant(t.clone())
                    }
                })
                .collect(),
        }
    }

    /// Forward pass on an image tensor of shape `[1, H, W]`.
    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        match self.config.kind {
            RegularizerKind::Rstr => rstr_forward(x, p, &self.config),
            RegularizerKind::Cnn => residual_cnn_forward(x, p, &self.config),
        }
    }

    /// Inference on an image.
    pub fn apply(&self, x: &Image2D) -> Result<Image2D> {
        let n = x.size();
        let g = Graph::new();
        let p = self.bind(&g, false);
        let input = g.constant(Tensor::new(&[1, n, n], x.values().to_vec())?);
        let out = self.forward(input, &p)?;
        Image2D::new(n, out.value().data().to_vec())
    }
}

/// Parameters of one regularizer registered on a graph.
pub struct BoundParams<'g> {
    names: Vec<String>,
    pub vars: Vec<Var<'g>>,
}

impl<'g> BoundParams<'g> {
    /// Pairs `names` with already-registered variables, in order.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var<'g>>) -> Self {
        assert_eq!(names.len(), vars.len(), "one variable per parameter name");
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| CoreError::invalid(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Index bookkeeping of a window partition over a `[C, H, W]` feature map:
/// symmetric zero padding to multiples of `M`, optional cyclic shift.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(channels: usize, height: usize, width: usize, window: usize, shifted: bool) -> Self {
        let ph = height.div_ceil(window) * window;
        let pw = width.div_ceil(window) * window;
        Self {
            channels,
            height,
            width,
            window,
            padded_height: ph,
            padded_width: pw,
            pad_top: (ph - height) / 2,
            pad_left: (pw - width) / 2,
            shift: if shifted { window / 2 } else { 0 },
        }
    }

    pub fn n_windows(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Padded-grid position `(row, col)` of token `t` in window `w`.
    fn padded_position(&self, w: usize, t: usize) -> (usize, usize) {
        let m = self.window;
        let per_row = self.padded_width / m;
        let (wr, wc) = (w / per_row, w % per_row);
        let (tr, tc) = (t / m, t % m);
        (
            (wr * m + tr + self.shift) % self.padded_height,
            (wc * m + tc + self.shift) % self.padded_width,
        )
    }

    /// Source index into `[C, H, W]` for every element of `[nW, M², C]`.
    pub fn partition_index(&self) -> Vec<Option<usize>> {
        let (c, hw) = (self.channels, self.height * self.width);
        let mut index = Vec::with_capacity(self.n_windows() * self.tokens_per_window() * c);
        for w in 0..self.n_windows() {
            for t in 0..self.tokens_per_window() {
                let (pr, pc) = self.padded_position(w, t);
                let src = pr
                    .checked_sub(self.pad_top)
                    .filter(|&r| r < self.height)
                    .zip(pc.checked_sub(self.pad_left).filter(|&q| q < self.width))
                    .map(|(r, q)| r * self.width + q);
                index.extend((0..c).map(|ch| src.map(|s| ch * hw + s)));
            }
        }
        index
    }

    /// Source index into `[nW, M², C]` for every element of `[C, H, W]`.
    pub fn merge_index(&self) -> Vec<Option<usize>> {
        let m = self.window;
        let per_row = self.padded_width / m;
        let (ph, pw) = (self.padded_height, self.padded_width);
        let c = self.channels;
        let mut index = Vec::with_capacity(c * self.height * self.width);
        for ch in 0..c {
            for r in 0..self.height {
                for q in 0..self.width {
                    let ur = (r + self.pad_top + ph - self.shift) % ph;
                    let uc = (q + self.pad_left + pw - self.shift) % pw;
                    let w = (ur / m) * per_row + uc / m;
                    let t = (ur % m) * m + uc % m;
                    index.push(Some((w * m * m + t) * c + ch));
                }
            }
        }
        index
    }
}

/// `[C, H, W] → [nW, M², C]`.
pub fn window_partition<'g>(x: Var<'g>, layout: &WindowLayout) -> Result<Var<'g>> {
    let shape = [
        layout.n_windows(),
        layout.tokens_per_window(),
        layout.channels,
    ];
    Ok(x.gather(&shape, layout.partition_index())?)
}

/// `[nW, M², C] → [C, H, W]`, cropping the padding.
pub fn window_merge<'g>(tokens: Var<'g>, layout: &WindowLayout) -> Result<Var<'g>> {
    let shape = [layout.channels, layout.height, layout.width];
    Ok(tokens.gather(&shape, layout.merge_index())?)
}

/// Adds a per-head relative-position bias table to attention logits.
struct RelBiasFn {
    heads: usize,
    tokens: usize,
    index: Vec<usize>,
}

impl Function for RelBiasFn {
    fn name(&self) -> &'static str {
        "relative_position_bias"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_output;
        let table_grad = ctx.needs_grad[1].then(|| {
            let table = &ctx.inputs[1];
            let span = table.shape()[1];
            let tt = self.tokens * self.tokens;
            let mut d = vec![0.0; table.numel()];
            for (b, block) in g.data().chunks_exact(tt).enumerate() {
                let h = b % self.heads;
                for (k, v) in block.iter().enumerate() {
                    d[h * span + self.index[k]] += v;
                }
            }
            Tensor::new(table.shape(), d).expect("table shape")
        });
        vec![ctx.needs_grad[0].then(|| g.clone()), table_grad]
    }
}

fn relative_index(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let t = m * m;
    let mut index = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dr = a / m + m - 1 - b / m;
            let dc = a % m + m - 1 - b % m;
            index.push(dr * span + dc);
        }
    }
    index
}

fn add_relative_bias<'g>(
    scores: Var<'g>,
    table: Var<'g>,
    heads: usize,
    window: usize,
) -> Result<Var<'g>> {
    let s = scores.value();
    let tb = table.value();
    let t = window * window;
    let span = (2 * window - 1) * (2 * window - 1);
    if tb.shape() != [heads, span] || s.shape().len() != 3 || s.shape()[1] != t || s.shape()[2] != t
    {
        return Err(CoreError::invalid(format!(
            "relative bias table {:?} does not fit scores {:?}",
            tb.shape(),
            s.shape()
        )));
    }
    let index = relative_index(window);
    let mut out = s.data().to_vec();
    for (b, block) in out.chunks_exact_mut(t * t).enumerate() {
        let h = b % heads;
        for (k, v) in block.iter_mut().enumerate() {
            *v += tb.data()[h * span + index[k]];
        }
    }
    let out = Tensor::new(s.shape(), out)?;
    Ok(scores.graph().record(
        Box::new(RelBiasFn {
            heads,
            tokens: t,
            index,
        }),
        &[scores, table],
        out,
    ))
}

/// `[N, C] → [nW·heads, T, d]` for `N = nW·T`.
fn split_heads<'g>(x: Var<'g>, nw: usize, t: usize, heads: usize, d: usize) -> Result<Var<'g>> {
    Ok(x.reshape(&[nw, t, heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * heads, t, d])?)
}

/// Multi-head self-attention inside each window: `softmax(QKᵀ/√d + B) V`
/// per head, heads concatenated and projected. `tokens: [nW, T, C]`.
pub fn window_msa<'g>(tokens: Var<'g>, p: &BoundParams<'g>, heads: usize) -> Result<Var<'g>> {
    let shape = tokens.shape();
    let (nw, t, c) = (shape[0], shape[1], shape[2]);
    let d = c / heads;
    let flat = tokens.reshape(&[nw * t, c])?;
    let q = flat.linear(p.get("attn.q.weight")?, p.get("attn.q.bias")?)?;
    let k = flat.linear(p.get("attn.k.weight")?, p.get("attn.k.bias")?)?;
    let v = flat.linear(p.get("attn.v.weight")?, p.get("attn.v.bias")?)?;
    let q = split_heads(q, nw, t, heads, d)?;
    let kt = k
        .reshape(&[nw, t, heads, d])?
        .permute(&[0, 2, 3, 1])?
        .reshape(&[nw * heads, d, t])?;
    let v = split_heads(v, nw, t, heads, d)?;
    let mut scores = q.matmul(kt)?.scale(1.0 / (d as f64).sqrt());
    if let Ok(table) = p.get("attn.rel_bias") {
        let window = (t as f64).sqrt().round() as usize;
        scores = add_relative_bias(scores, table, heads, window)?;
    }
    let attn = scores.softmax_lastdim();
    let out = attn
        .matmul(v)?
        .reshape(&[nw, heads, t, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * t, c])?;
    Ok(out
        .linear(p.get("attn.proj.weight")?, p.get("attn.proj.bias")?)?
        .reshape(&[nw, t, c])?)
}

/// Swin transformer layer on `[C, H, W]`:
/// `X₂ = MSA(LN(X₁)) + X₁`, `X₃ = MLP(LN(X₂)) + X₂`, evaluated per window.
pub fn stl_forward<'g>(
    x: Var<'g>,
    p: &BoundParams<'g>,
    config: &RegularizerConfig,
) -> Result<Var<'g>> {
    let shape = x.shape();
    let layout = WindowLayout::new(
        shape[0],
        shape[1],
        shape[2],
        config.window_size,
        config.shift_windows,
    );
    let tokens = window_partition(x, &layout)?;
    let (nw, t, c) = (
        layout.n_windows(),
        layout.tokens_per_window(),
        layout.channels,
    );
    let normed = tokens.layer_norm(p.get("norm1.weight")?, p.get("norm1.bias")?, LAYER_NORM_EPS)?;
    let x2 = window_msa(normed, p, config.n_heads)?.add(tokens)?;
    let flat = x2.reshape(&[nw * t, c])?;
    let hidden = flat
        .layer_norm(p.get("norm2.weight")?, p.get("norm2.bias")?, LAYER_NORM_EPS)?
        .linear(p.get("mlp.fc1.weight")?, p.get("mlp.fc1.bias")?)?
        .gelu();
    let x3 = hidden
        .linear(p.get("mlp.fc2.weight")?, p.get("mlp.fc2.bias")?)?
        .add(flat)?
        .reshape(&[nw, t, c])?;
    window_merge(x3, &layout)
}

fn check_image_input(x: &Var<'_>) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(CoreError::invalid(format!(
            "regularizer input must be [1, H, W], got {shape:?}"
        )));
    }
    Ok(())
}

/// `conv_out(STL(conv_in(x))) + x` on `[1, H, W]`.
pub fn rstr_forward<'g>(
    x: Var<'g>,
    p: &BoundParams<'g>,
    config: &RegularizerConfig,
) -> Result<Var<'g>> {
    check_image_input(&x)?;
    let x1 = x.conv2d_same(p.get("conv_in.weight")?, p.get("conv_in.bias")?)?;
    let x3 = stl_forward(x1, p, config)?;
    let out = x3.conv2d_same(p.get("conv_out.weight")?, p.get("conv_out.bias")?)?;
    Ok(if config.outer_residual {
        out.add(x)?
    } else {
        out
    })
}

/// `conv(C→1)(GELU(conv(C→C)(GELU(conv(1→C)(x))))) + x`.
pub fn residual_cnn_forward<'g>(
    x: Var<'g>,
    p: &BoundParams<'g>,
    config: &RegularizerConfig,
) -> Result<Var<'g>> {
    check_image_input(&x)?;
    let h = x
        .conv2d_same(p.get("conv1.weight")?, p.get("conv1.bias")?)?
        .gelu();
    let h = h
        .conv2d_same(p.get("conv2.weight")?, p.get("conv2.bias")?)?
        .gelu();
    let out = h.conv2d_same(p.get("conv3.weight")?, p.get("conv3.bias")?)?;
    Ok(if config.outer_residual {
        out.add(x)?
    } else {
        out
    })
}
