use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// A fixed sparse linear resampling of image planes.
///
/// The input has shape `[B, C, in_h, in_w]` and the output
/// `[B * groups, C, out_h, out_w]`; output image `b * groups + g` reads only
/// from input image `b`. Each output pixel is a weighted sum of input pixels
/// from the same channel, identical for every image and channel. Flips, crops,
/// cutout, bilinear warps, and multiformation decoding are all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    groups: usize,
    offsets: Vec<usize>,
    sources: Vec<u32>,
    weights: Vec<f64>,
}

impl SpatialMap {
    /// Builds a map by asking `taps(group, y, x)` for the `(source_y, source_x,
    /// weight)` contributions of each output pixel. Out-of-range sources must
    /// not be emitted; an empty list yields zero.
    pub fn from_fn<F>(in_hw: (usize, usize), out_hw: (usize, usize), groups: usize, mut taps: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> Vec<(usize, usize, f64)>,
    {
        let (in_h, in_w) = in_hw;
        let (out_h, out_w) = out_hw;
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        for g in 0..groups {
            for y in 0..out_h {
                for x in 0..out_w {
                    for (sy, sx, wgt) in taps(g, y, x) {
                        debug_assert!(sy < in_h && sx < in_w);
                        sources.push((sy * in_w + sx) as u32);
                        weights.push(wgt);
                    }
                    offsets.push(sources.len());
                }
            }
        }
        SpatialMap {
            in_h,
            in_w,
            out_h,
            out_w,
            groups,
            offsets,
            sources,
            weights,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    fn forward(&self, batch: usize, channels: usize, x: &[f64]) -> Vec<f64> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![0.0; batch * self.groups * channels * op];
        for b in 0..batch {
            for g in 0..self.groups {
                for c in 0..channels {
                    let src = &x[(b * channels + c) * ip..][..ip];
                    let dst = &mut out[((b * self.groups + g) * channels + c) * op..][..op];
                    for (p, d) in dst.iter_mut().enumerate() {
                        let row = g * op + p;
                        let mut s = 0.0;
                        for t in self.offsets[row]..self.offsets[row + 1] {
                            s += self.weights[t] * src[self.sources[t] as usize];
                        }
                        *d = s;
                    }
                }
            }
        }
        out
    }

    fn backward(&self, batch: usize, channels: usize, grad_out: &[f64]) -> Vec<f64> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut dx = vec![0.0; batch * channels * ip];
        for b in 0..batch {
            for g in 0..self.groups {
                for c in 0..channels {
                    let src = &grad_out[((b * self.groups + g) * channels + c) * op..][..op];
                    let dst = &mut dx[(b * channels + c) * ip..][..ip];
                    for (p, &gv) in src.iter().enumerate() {
                        let row = g * op + p;
                        for t in self.offsets[row]..self.offsets[row + 1] {
                            dst[self.sources[t] as usize] += self.weights[t] * gv;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize },
    AvgPool2d { input: usize },
    InstanceNorm { input: usize, scale: usize, shift: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { input: usize },
    Linear { input: usize, weight: usize, bias: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Reshape { input: usize },
    MeanRows { input: usize },
    SliceRows { input: usize, start: usize },
    ConcatRows { inputs: Vec<usize> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    AddScalar { input: usize },
    Sum { input: usize },
    SumSquares { input: usize },
    Spatial { input: usize, map: Rc<SpatialMap> },
    Saturation { input: usize, factor: f64 },
    Contrast { input: usize, factor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward pass.
///
/// Values are appended in execution order, so the node list is always a
/// topological order. [`Tape::backward`] consumes the recording; the gradients
/// it produced stay readable until the tape is dropped or cleared.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles issued before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("foreign variable");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Gradient of the last backward pass with respect to `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let i = self.check(v).ok()?;
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        self.grads.get_mut(i).and_then(|g| g.take())
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (i, k, b) = (self.check(input)?, self.check(kernel)?, self.check(bias)?);
        let xs = self.nodes[i].value.shape();
        let ks = self.nodes[k].value.shape();
        let bs = self.nodes[b].value.shape();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return shape_err(format!("conv2d expects [B,C,H,W] input and [O,C,3,3] kernel, got {xs:?} and {ks:?}"));
        }
        if xs[1] != ks[1] {
            return shape_err(format!("conv2d channel mismatch: input {} vs kernel {}", xs[1], ks[1]));
        }
        if bs != [ks[0]] {
            return shape_err(format!("conv2d bias shape {bs:?} for {} output channels", ks[0]));
        }
        let d = ConvDims {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            h: xs[2],
            w: xs[3],
        };
        let out = kernels::conv2d_forward(
            d,
            self.nodes[i].value.data(),
            self.nodes[k].value.data(),
            self.nodes[b].value.data(),
        );
        let t = Tensor::new(vec![d.batch, d.cout, d.h, d.w], out)?;
        let rg = self.rg(&[i, k, b]);
        Ok(self.push(t, Op::Conv2d { input: i, kernel: k, bias: b }, rg))
    }

    pub fn avgpool2d(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let s = self.nodes[i].value.shape().to_vec();
        if s.len() != 4 {
            return shape_err(format!("avgpool2d expects [B,C,H,W], got {s:?}"));
        }
        let out = kernels::avgpool_forward(s[0] * s[1], s[2], s[3], self.nodes[i].value.data());
        let t = Tensor::new(
            vec![s[0], s[1], kernels::pooled_len(s[2]), kernels::pooled_len(s[3])],
            out,
        )?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::AvgPool2d { input: i }, rg))
    }

    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let (i, sc, sh) = (self.check(input)?, self.check(scale)?, self.check(shift)?);
        let s = self.nodes[i].value.shape().to_vec();
        if s.len() != 4 {
            return shape_err(format!("instance_norm expects [B,C,H,W], got {s:?}"));
        }
        if self.nodes[sc].value.shape() != [s[1]] || self.nodes[sh].value.shape() != [s[1]] {
            return shape_err(format!("instance_norm affine parameters must have shape [{}]", s[1]));
        }
        let f = kernels::instance_norm_forward(
            s[0],
            s[1],
            s[2] * s[3],
            self.nodes[i].value.data(),
            self.nodes[sc].value.data(),
            self.nodes[sh].value.data(),
        );
        let t = Tensor::new(s, f.out)?;
        let rg = self.rg(&[i, sc, sh]);
        Ok(self.push(
            t,
            Op::InstanceNorm {
                input: i,
                scale: sc,
                shift: sh,
                xhat: f.xhat,
                inv_std: f.inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let t = self.nodes[i].value.map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Relu { input: i }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let xs = self.nodes[i].value.shape();
        let ws = self.nodes[w].value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        if self.nodes[b].value.shape() != [ws[0]] {
            return shape_err(format!("linear: bias must have shape [{}]", ws[0]));
        }
        let (batch, features, classes) = (xs[0], xs[1], ws[0]);
        let out = kernels::linear_forward(
            batch,
            features,
            classes,
            self.nodes[i].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
        );
        let t = Tensor::new(vec![batch, classes], out)?;
        let rg = self.rg(&[i, w, b]);
        Ok(self.push(t, Op::Linear { input: i, weight: w, bias: b }, rg))
    }

    /// Mean cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.check(logits)?;
        let s = self.nodes[l].value.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!("cross_entropy: logits {s:?} with {} labels", labels.len()));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelRange {
                label: bad,
                num_classes: classes,
            });
        }
        let (loss, probs) = kernels::cross_entropy_forward(batch, classes, self.nodes[l].value.data(), labels);
        let rg = self.rg(&[l]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: l,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(input)?;
        let t = self.nodes[i].value.clone().reshape(shape)?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Reshape { input: i }, rg))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(input, &shape)
    }

    /// Mean over the leading axis with pairwise summation: `[B, ...] -> [...]`.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let v = &self.nodes[i].value;
        if v.shape().len() < 2 {
            return shape_err(format!("mean_rows needs at least 2 axes, got {:?}", v.shape()));
        }
        let (b, r) = (v.shape()[0], v.row_len());
        let mut column = vec![0.0; b];
        let mut out = vec![0.0; r];
        for (j, o) in out.iter_mut().enumerate() {
            for (k, c) in column.iter_mut().enumerate() {
                *c = v.data()[k * r + j];
            }
            *o = kernels::pairwise_sum(&column) / b as f64;
        }
        let t = Tensor::new(v.shape()[1..].to_vec(), out)?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::MeanRows { input: i }, rg))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.check(input)?;
        let t = self.nodes[i].value.rows(start, len)?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::SliceRows { input: i, start }, rg))
    }

    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let t = Tensor::concat_rows(&parts)?;
        let rg = self.rg(&idx);
        Ok(self.push(t, Op::ConcatRows { inputs: idx }, rg))
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a].value.data().iter().zip(self.nodes[b].value.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a].value.data().iter().zip(self.nodes[b].value.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.check(input)?;
        let t = self.nodes[i].value.map(|v| v * factor);
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Scale { input: i, factor }, rg))
    }

    pub fn add_scalar(&mut self, input: Var, value: f64) -> Result<Var> {
        let i = self.check(input)?;
        let t = self.nodes[i].value.map(|v| v + value);
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::AddScalar { input: i }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let t = Tensor::scalar(kernels::pairwise_sum(self.nodes[i].value.data()));
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Sum { input: i }, rg))
    }

    /// Squared Euclidean norm of all elements.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let sq: Vec<f64> = self.nodes[i].value.data().iter().map(|v| v * v).collect();
        let t = Tensor::scalar(kernels::pairwise_sum(&sq));
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::SumSquares { input: i }, rg))
    }

    pub fn spatial_map(&mut self, input: Var, map: Rc<SpatialMap>) -> Result<Var> {
        let i = self.check(input)?;
        let s = self.nodes[i].value.shape().to_vec();
        if s.len() != 4 || s[2] != map.in_h || s[3] != map.in_w {
            return shape_err(format!(
                "spatial map for {}x{} planes applied to {s:?}",
                map.in_h, map.in_w
            ));
        }
        let out = map.forward(s[0], s[1], self.nodes[i].value.data());
        let t = Tensor::new(vec![s[0] * map.groups, s[1], map.out_h, map.out_w], out)?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Spatial { input: i, map }, rg))
    }

    /// Blends each pixel with its cross-channel mean: `m + factor * (x - m)`.
    pub fn saturation(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.check(input)?;
        let s = self.nodes[i].value.shape().to_vec();
        if s.len() != 4 {
            return shape_err(format!("saturation expects [B,C,H,W], got {s:?}"));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.nodes[i].value.data();
        let mut out = vec![0.0; x.len()];
        for n in 0..b {
            for p in 0..hw {
                let m = (0..c).map(|ch| x[(n * c + ch) * hw + p]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    let k = (n * c + ch) * hw + p;
                    out[k] = m + factor * (x[k] - m);
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Saturation { input: i, factor }, rg))
    }

    /// Blends each image with its global mean: `m + factor * (x - m)`.
    pub fn contrast(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.check(input)?;
        let v = &self.nodes[i].value;
        if v.shape().len() < 2 {
            return shape_err(format!("contrast expects a batch, got {:?}", v.shape()));
        }
        let r = v.row_len();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(r) {
            let m = kernels::pairwise_sum(row) / r as f64;
            out.extend(row.iter().map(|x| m + factor * (x - m)));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[i]);
        Ok(self.push(t, Op::Contrast { input: i, factor }, rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Populates gradients for every node that requires one and is reachable
    /// from `loss`. The recording is consumed; a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        let root = self.check(loss)?;
        if self.consumed {
            return Err(Error::Tape("tape already consumed by a previous backward".into()));
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));

        for n in (0..=root).rev() {
            let Some(g) = grads[n].take() else { continue };
            self.propagate(n, &g, &mut grads);
            grads[n] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, n: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].requires_grad;
        let gd = g.data();
        let mut acc = |i: usize, delta: Vec<f64>| add_into(&mut grads[i], nodes[i].value.shape(), delta);
        match &nodes[n].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let s = nodes[*input].value.shape();
                let d = ConvDims {
                    batch: s[0],
                    cin: s[1],
                    cout: nodes[*kernel].value.shape()[0],
                    h: s[2],
                    w: s[3],
                };
                let r = kernels::conv2d_backward(
                    d,
                    nodes[*input].value.data(),
                    nodes[*kernel].value.data(),
                    gd,
                    [needs(*input), needs(*kernel), needs(*bias)],
                );
                if let Some(v) = r.input {
                    acc(*input, v);
                }
                if let Some(v) = r.kernel {
                    acc(*kernel, v);
                }
                if let Some(v) = r.bias {
                    acc(*bias, v);
                }
            }
            Op::AvgPool2d { input } => {
                if needs(*input) {
                    let s = nodes[*input].value.shape();
                    acc(*input, kernels::avgpool_backward(s[0] * s[1], s[2], s[3], gd));
                }
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let s = nodes[*input].value.shape();
                let (dx, dscale, dshift) = kernels::instance_norm_backward(
                    s[0],
                    s[1],
                    s[2] * s[3],
                    xhat,
                    inv_std,
                    nodes[*scale].value.data(),
                    gd,
                    [needs(*input), needs(*scale), needs(*shift)],
                );
                if let Some(v) = dx {
                    acc(*input, v);
                }
                if let Some(v) = dscale {
                    acc(*scale, v);
                }
                if let Some(v) = dshift {
                    acc(*shift, v);
                }
            }
            Op::Relu { input } => {
                if needs(*input) {
                    let x = nodes[*input].value.data();
                    acc(*input, x.iter().zip(gd).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect());
                }
            }
            Op::Linear { input, weight, bias } => {
                let (batch, features) = {
                    let s = nodes[*input].value.shape();
                    (s[0], s[1])
                };
                let classes = nodes[*weight].value.shape()[0];
                if needs(*input) {
                    let mut dx = vec![0.0; batch * features];
                    kernels::gemm(batch, classes, features, gd, false, nodes[*weight].value.data(), false, 0.0, &mut dx);
                    acc(*input, dx);
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; classes * features];
                    kernels::gemm(classes, batch, features, gd, true, nodes[*input].value.data(), false, 0.0, &mut dw);
                    acc(*weight, dw);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; classes];
                    for row in gd.chunks_exact(classes) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let k = gd[0] / batch as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * k).collect();
                    for (b, &y) in labels.iter().enumerate() {
                        d[b * classes + y] -= k;
                    }
                    acc(*logits, d);
                }
            }
            Op::Reshape { input } => {
                if needs(*input) {
                    acc(*input, gd.to_vec());
                }
            }
            Op::MeanRows { input } => {
                if needs(*input) {
                    let b = nodes[*input].value.shape()[0];
                    let k = 1.0 / b as f64;
                    let mut d = Vec::with_capacity(b * gd.len());
                    for _ in 0..b {
                        d.extend(gd.iter().map(|v| v * k));
                    }
                    acc(*input, d);
                }
            }
            Op::SliceRows { input, start } => {
                if needs(*input) {
                    let v = &nodes[*input].value;
                    let r = v.row_len();
                    let mut d = vec![0.0; v.numel()];
                    d[start * r..start * r + gd.len()].copy_from_slice(gd);
                    acc(*input, d);
                }
            }
            Op::ConcatRows { inputs } => {
                let mut off = 0;
                for &i in inputs {
                    let len = nodes[i].value.numel();
                    if needs(i) {
                        acc(i, gd[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    acc(*a, gd.to_vec());
                }
                if needs(*b) {
                    acc(*b, gd.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    acc(*a, gd.to_vec());
                }
                if needs(*b) {
                    acc(*b, gd.iter().map(|v| -v).collect());
                }
            }
            Op::Scale { input, factor } => {
                if needs(*input) {
                    acc(*input, gd.iter().map(|v| v * factor).collect());
                }
            }
            Op::AddScalar { input } => {
                if needs(*input) {
                    acc(*input, gd.to_vec());
                }
            }
            Op::Sum { input } => {
                if needs(*input) {
                    acc(*input, vec![gd[0]; nodes[*input].value.numel()]);
                }
            }
            Op::SumSquares { input } => {
                if needs(*input) {
                    acc(*input, nodes[*input].value.data().iter().map(|x| 2.0 * x * gd[0]).collect());
                }
            }
            Op::Spatial { input, map } => {
                if needs(*input) {
                    let s = nodes[*input].value.shape();
                    acc(*input, map.backward(s[0], s[1], gd));
                }
            }
            Op::Saturation { input, factor } => {
                if needs(*input) {
                    let s = nodes[*input].value.shape();
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut d = vec![0.0; gd.len()];
                    let blend = (1.0 - factor) / c as f64;
                    for n in 0..b {
                        for p in 0..hw {
                            let gs: f64 = (0..c).map(|ch| gd[(n * c + ch) * hw + p]).sum();
                            for ch in 0..c {
                                let k = (n * c + ch) * hw + p;
                                d[k] = factor * gd[k] + blend * gs;
                            }
                        }
                    }
                    acc(*input, d);
                }
            }
            Op::Contrast { input, factor } => {
                if needs(*input) {
                    let r = nodes[*input].value.row_len();
                    let mut d = Vec::with_capacity(gd.len());
                    for row in gd.chunks_exact(r) {
                        let gs = kernels::pairwise_sum(row) * (1.0 - factor) / r as f64;
                        d.extend(row.iter().map(|g| factor * g + gs));
                    }
                    acc(*input, d);
                }
            }
        }
    }
}
