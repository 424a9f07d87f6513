use std::sync::Arc;

use super::kernels::{self, ConvGeometry, WarpPlan};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    Relu(Var),
    GatedRelu { input: Var, gate: Arc<[bool]> },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize },
    Softmax(Var),
    Warp { input: Var, plans: Vec<Option<Arc<WarpPlan>>> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    SoftCrossEntropy { logits: Var, targets: Arc<[f32]>, weights: Arc<[f32]> },
    SquaredDiff { a: Var, b: Var, weights: Arc<[f32]> },
    MarginHinge { logits: Var, margin: f32, weights: Arc<[f32]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Full-precision value for scalar reductions.
    scalar64: Option<f64>,
    /// Unweighted per-pixel values for the loss primitives.
    pixel_map: Option<Vec<f64>>,
}

/// Linear record of executed primitives for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumers. [`Tape::backward`] walks the record once in reverse and adds
/// the resulting gradients into the `grad` buffers of leaves created from
/// tensors with `requires_grad` set. Repeated calls accumulate.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Fixed relu gates consumed in execution order, see [`Tape::with_relu_pattern`].
    relu_gates: Option<(Vec<bool>, usize)>,
}

fn add_into(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose relu ops pass exactly the entries marked in `pattern`
    /// (as returned by [`Tape::relu_pattern`]) instead of the positive ones.
    /// Replaying a graph on such a tape evaluates the linear piece selected
    /// by the pattern, which is the function reverse mode differentiates.
    pub fn with_relu_pattern(pattern: Vec<bool>) -> Self {
        Self { nodes: Vec::new(), relu_gates: Some((pattern, 0)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, scalar64: None, pixel_map: None });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, needs_grad: bool, map: Option<Vec<f64>>) -> Var {
        let v = self.push(Tensor::scalar(value as f32), op, needs_grad);
        self.nodes[v.0].scalar64 = Some(value);
        self.nodes[v.0].pixel_map = map;
        v
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. It participates in differentiation when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value, at full precision when the producing op tracked it.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar64.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    /// Per-pixel unweighted loss values recorded by a loss primitive.
    pub fn pixel_map(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].pixel_map.as_deref()
    }

    /// Sign pattern (`x > 0`) of every relu input, in execution order. Two
    /// evaluations of the same graph with equal patterns lie on the same
    /// linear piece of every relu.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .flat_map(|n| -> Box<dyn Iterator<Item = bool> + '_> {
                match &n.op {
                    Op::Relu(x) => Box::new(self.value(*x).data().iter().map(|&v| v > 0.0)),
                    Op::GatedRelu { gate, .. } => Box::new(gate.iter().copied()),
                    _ => Box::new(std::iter::empty()),
                }
            })
            .collect()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, kcin, kh, kw] = self.value(kernel).dims4()?;
        if kh != kw {
            return Err(shape_err!("kernel must be square, got {kh}×{kw}"));
        }
        if kh % 2 == 0 {
            return Err(shape_err!("kernel size must be odd, got {kh}"));
        }
        if kcin != cin {
            return Err(shape_err!("kernel expects {kcin} input channels, input has {cin}"));
        }
        if self.value(bias).shape() != [cout] {
            return Err(shape_err!("bias shape {:?} does not match {cout} outputs", self.value(bias).shape()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err!("{h}×{w} input with padding {padding} is smaller than kernel {kh}"));
        }
        let geom = ConvGeometry { batch: n, in_channels: cin, out_channels: cout, height: h, width: w, kernel: kh, padding };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data(), self.value(bias).data());
        let t = Tensor::new(&[n, cout, geom.out_height(), geom.out_width()], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(t, Op::Conv2d { input, kernel, bias, geom }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let needs = self.needs(input);
        let n = self.value(input).numel();
        if let Some((pattern, pos)) = &mut self.relu_gates {
            if *pos + n <= pattern.len() {
                let gate: Arc<[bool]> = pattern[*pos..*pos + n].into();
                *pos += n;
                let x = self.value(input);
                let data = x.data().iter().zip(gate.iter()).map(|(&v, &g)| if g { v } else { 0.0 }).collect();
                let t = Tensor::new(x.shape(), data).unwrap();
                return self.push(t, Op::GatedRelu { input, gate }, needs);
            }
        }
        let x = self.value(input);
        let t = Tensor::new(x.shape(), kernels::relu_forward(x.data())).unwrap();
        self.push(t, Op::Relu(input), needs)
    }

    /// 2×2 average pooling.
    pub fn downsample2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("downsample2x needs even extents, got {h}×{w}"));
        }
        let out = kernels::avgpool2_forward(n * c, h, w, self.value(input).data());
        let t = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::AvgPool2(input), needs))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let out = kernels::upsample2_forward(n * c, h, w, self.value(input).data());
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::Upsample2(input), needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!("concat mismatch {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Concat(a, b), needs))
    }

    /// Channels `start..start + len` of an `N×C×H×W` value.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if start + len > c || len == 0 {
            return Err(shape_err!("channel slice {start}..{} out of range for {c}", start + len));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let t = Tensor::new(&[n, len, h, w], out)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::SliceChannels { input, start }, needs))
    }

    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        let out = kernels::softmax_channels(n, c, h * w, self.value(logits).data());
        let t = Tensor::new(&[n, c, h, w], out)?;
        let needs = self.needs(logits);
        Ok(self.push(t, Op::Softmax(logits), needs))
    }

    /// Resamples every channel of sample `i` with `plans[i]`; `None` copies the sample unchanged.
    pub fn warp(&mut self, input: Var, plans: Vec<Option<Arc<WarpPlan>>>, fill: f32) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if plans.len() != n {
            return Err(shape_err!("{} warp plans for a batch of {n}", plans.len()));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = vec![0.0f32; src.len()];
        for (s, plan) in plans.iter().enumerate() {
            let range = s * c * plane..(s + 1) * c * plane;
            match plan {
                None => out[range.clone()].copy_from_slice(&src[range]),
                Some(p) => {
                    if (p.height, p.width) != (h, w) {
                        return Err(shape_err!("warp plan {}×{} for {h}×{w} input", p.height, p.width));
                    }
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        p.apply(&src[off..off + plane], fill, &mut out[off..off + plane]);
                    }
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::Warp { input, plans }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("add shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let needs = self.needs(a) || self.needs(b);
        if ta.numel() == 1 && ta.rank() == 0 {
            let v = self.scalar(a) + self.scalar(b);
            return Ok(self.push_scalar(v, Op::Add(a, b), needs, None));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("mul shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let needs = self.needs(input);
        let x = self.value(input);
        if x.rank() == 0 {
            let v = self.scalar(input) * factor as f64;
            return self.push_scalar(v, Op::Scale(input, factor), needs, None);
        }
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect()).unwrap();
        self.push(t, Op::Scale(input, factor), needs)
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(input);
        self.push_scalar(s, Op::Sum(input), needs, None)
    }

    /// `Σ_j w_j · (−Σ_c t_cj log softmax(z)_cj)` over pixels `j` of an `N×C×H×W` logit batch.
    ///
    /// `targets` has the logits' shape, `weights` one entry per pixel (`N·H·W`).
    /// The per-pixel cross-entropy (before weighting) is kept as the node's pixel map.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Arc<[f32]>, weights: Arc<[f32]>) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        if targets.len() != n * c * plane || weights.len() != n * plane {
            return Err(shape_err!(
                "cross-entropy targets/weights sized {}/{} for logits {:?}",
                targets.len(),
                weights.len(),
                self.value(logits).shape()
            ));
        }
        let z = self.value(logits).data();
        let mut map = vec![0.0f64; n * plane];
        let mut total = 0.0f64;
        let mut zj = vec![0.0f64; c];
        let mut lp = vec![0.0f64; c];
        for s in 0..n {
            for j in 0..plane {
                for k in 0..c {
                    zj[k] = z[(s * c + k) * plane + j] as f64;
                }
                kernels::log_softmax_pixel(&zj, &mut lp);
                let mut ce = 0.0f64;
                for k in 0..c {
                    let t = targets[(s * c + k) * plane + j] as f64;
                    if t != 0.0 {
                        ce -= t * lp[k];
                    }
                }
                map[s * plane + j] = ce;
                total += weights[s * plane + j] as f64 * ce;
            }
        }
        let needs = self.needs(logits);
        Ok(self.push_scalar(total, Op::SoftCrossEntropy { logits, targets, weights }, needs, Some(map)))
    }

    /// `Σ_j w_j Σ_c (a_cj − b_cj)²` for two equally shaped `N×C×H×W` batches.
    pub fn squared_diff(&mut self, a: Var, b: Var, weights: Arc<[f32]>) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4()?;
        if self.value(b).shape() != self.value(a).shape() {
            return Err(shape_err!("consistency shape mismatch {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let plane = h * w;
        if weights.len() != n * plane {
            return Err(shape_err!("{} weights for {} pixels", weights.len(), n * plane));
        }
        let (za, zb) = (self.value(a).data(), self.value(b).data());
        let mut map = vec![0.0f64; n * plane];
        let mut total = 0.0f64;
        for s in 0..n {
            for j in 0..plane {
                let mut acc = 0.0f64;
                for k in 0..c {
                    let idx = (s * c + k) * plane + j;
                    let d = za[idx] as f64 - zb[idx] as f64;
                    acc += d * d;
                }
                map[s * plane + j] = acc;
                total += weights[s * plane + j] as f64 * acc;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_scalar(total, Op::SquaredDiff { a, b, weights }, needs, Some(map)))
    }

    /// `Σ_j w_j Σ_c max(0, max_k z_kj − z_cj − margin)`.
    pub fn margin_hinge(&mut self, logits: Var, margin: f32, weights: Arc<[f32]>) -> Result<Var> {
        if margin.is_nan() || margin <= 0.0 {
            return Err(invalid!("margin must be positive, got {margin}"));
        }
        let [n, c, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        if weights.len() != n * plane {
            return Err(shape_err!("{} weights for {} pixels", weights.len(), n * plane));
        }
        let z = self.value(logits).data();
        let mut map = vec![0.0f64; n * plane];
        let mut total = 0.0f64;
        for s in 0..n {
            for j in 0..plane {
                let max = (0..c).map(|k| z[(s * c + k) * plane + j]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let pen: f64 = (0..c)
                    .map(|k| (max - z[(s * c + k) * plane + j] as f64 - margin as f64).max(0.0))
                    .sum();
                map[s * plane + j] = pen;
                total += weights[s * plane + j] as f64 * pen;
            }
        }
        let needs = self.needs(logits);
        Ok(self.push_scalar(total, Op::MarginHinge { logits, margin, weights }, needs, Some(map)))
    }

    /// Reverse pass from a scalar `root`, adding gradients into every
    /// differentiable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!("backward needs a scalar root, got {:?}", self.value(root).shape()));
        }
        let mut adj: Vec<Option<Vec<f32>>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Vec<f32>, adj: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { input, kernel, bias, geom } => {
                let want = [self.needs(*input), self.needs(*kernel), self.needs(*bias)];
                let grads = kernels::conv2d_backward(geom, self.value(*input).data(), self.value(*kernel).data(), &g, want);
                if let Some(d) = grads.input {
                    add_into(&mut adj[input.0], d);
                }
                if let Some(d) = grads.kernel {
                    add_into(&mut adj[kernel.0], d);
                }
                if let Some(d) = grads.bias {
                    add_into(&mut adj[bias.0], d);
                }
            }
            Op::Relu(x) => add_into(&mut adj[x.0], kernels::relu_backward(self.value(*x).data(), &g)),
            Op::GatedRelu { input, gate } => {
                add_into(&mut adj[input.0], g.iter().zip(gate.iter()).map(|(&d, &k)| if k { d } else { 0.0 }).collect())
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.value(*x).dims4().unwrap();
                add_into(&mut adj[x.0], kernels::avgpool2_backward(n * c, h, w, &g));
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(*x).dims4().unwrap();
                add_into(&mut adj[x.0], kernels::upsample2_backward(n * c, h, w, &g));
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                if self.needs(*a) {
                    add_into(&mut adj[a.0], ga);
                }
                if self.needs(*b) {
                    add_into(&mut adj[b.0], gb);
                }
            }
            Op::SliceChannels { input, start } => {
                let [n, c, h, w] = self.value(*input).dims4().unwrap();
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut gi = vec![0.0f32; n * c * plane];
                for s in 0..n {
                    gi[(s * c + start) * plane..(s * c + start + len) * plane]
                        .copy_from_slice(&g[s * len * plane..(s + 1) * len * plane]);
                }
                add_into(&mut adj[input.0], gi);
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = node.value.dims4().unwrap();
                let plane = h * w;
                let p = node.value.data();
                let mut gi = vec![0.0f32; p.len()];
                for s in 0..n {
                    for j in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|k| {
                                let idx = (s * c + k) * plane + j;
                                p[idx] as f64 * g[idx] as f64
                            })
                            .sum();
                        for k in 0..c {
                            let idx = (s * c + k) * plane + j;
                            gi[idx] = (p[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                        }
                    }
                }
                add_into(&mut adj[x.0], gi);
            }
            Op::Warp { input, plans } => {
                let [_, c, h, w] = self.value(*input).dims4().unwrap();
                let plane = h * w;
                let mut gi = vec![0.0f32; g.len()];
                for (s, plan) in plans.iter().enumerate() {
                    let range = s * c * plane..(s + 1) * c * plane;
                    match plan {
                        None => gi[range.clone()].copy_from_slice(&g[range]),
                        Some(p) => {
                            for ch in 0..c {
                                let off = (s * c + ch) * plane;
                                p.apply_transpose_add(&g[off..off + plane], &mut gi[off..off + plane]);
                            }
                        }
                    }
                }
                add_into(&mut adj[input.0], gi);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(&mut adj[a.0], g.clone());
                }
                if self.needs(*b) {
                    add_into(&mut adj[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[b.0], d);
                }
            }
            Op::Scale(x, f) => add_into(&mut adj[x.0], g.iter().map(|v| v * f).collect()),
            Op::Sum(x) => add_into(&mut adj[x.0], vec![g[0]; self.value(*x).numel()]),
            Op::SoftCrossEntropy { logits, targets, weights } => {
                let [n, c, h, w] = self.value(*logits).dims4().unwrap();
                let plane = h * w;
                let upstream = g[0] as f64;
                let z = self.value(*logits).data();
                let mut gi = vec![0.0f32; z.len()];
                let mut zj = vec![0.0f64; c];
                let mut lp = vec![0.0f64; c];
                for s in 0..n {
                    for j in 0..plane {
                        let wj = weights[s * plane + j] as f64 * upstream;
                        if wj == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            zj[k] = z[(s * c + k) * plane + j] as f64;
                        }
                        kernels::log_softmax_pixel(&zj, &mut lp);
                        let tsum: f64 = (0..c).map(|k| targets[(s * c + k) * plane + j] as f64).sum();
                        for k in 0..c {
                            let idx = (s * c + k) * plane + j;
                            gi[idx] = (wj * (tsum * lp[k].exp() - targets[idx] as f64)) as f32;
                        }
                    }
                }
                add_into(&mut adj[logits.0], gi);
            }
            Op::SquaredDiff { a, b, weights } => {
                let [n, c, h, w] = self.value(*a).dims4().unwrap();
                let plane = h * w;
                let upstream = g[0] as f64;
                let (za, zb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0f32; za.len()];
                for s in 0..n {
                    for j in 0..plane {
                        let wj = 2.0 * weights[s * plane + j] as f64 * upstream;
                        for k in 0..c {
                            let idx = (s * c + k) * plane + j;
                            ga[idx] = (wj * (za[idx] as f64 - zb[idx] as f64)) as f32;
                        }
                    }
                }
                if self.needs(*b) {
                    add_into(&mut adj[b.0], ga.iter().map(|v| -v).collect());
                }
                if self.needs(*a) {
                    add_into(&mut adj[a.0], ga);
                }
            }
            Op::MarginHinge { logits, margin, weights } => {
                let [n, c, h, w] = self.value(*logits).dims4().unwrap();
                let plane = h * w;
                let upstream = g[0] as f64;
                let z = self.value(*logits).data();
                let mut gi = vec![0.0f32; z.len()];
                for s in 0..n {
                    for j in 0..plane {
                        let wj = weights[s * plane + j] as f64 * upstream;
                        // lowest index wins ties
                        let mut arg = 0;
                        for k in 1..c {
                            if z[(s * c + k) * plane + j] > z[(s * c + arg) * plane + j] {
                                arg = k;
                            }
                        }
                        let max = z[(s * c + arg) * plane + j] as f64;
                        let mut active = 0usize;
                        for k in 0..c {
                            let idx = (s * c + k) * plane + j;
                            if max - z[idx] as f64 - *margin as f64 > 0.0 {
                                gi[idx] -= wj as f32;
                                active += 1;
                            }
                        }
                        gi[(s * c + arg) * plane + j] += (wj * active as f64) as f32;
                    }
                }
                add_into(&mut adj[logits.0], gi);
            }
        }
    }
}
