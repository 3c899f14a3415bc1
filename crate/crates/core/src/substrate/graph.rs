//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; `backward` walks the tape
//! in reverse and accumulates gradients. Nodes that do not depend on a
//! gradient-carrying leaf are never visited on the way back, so data inputs
//! cost nothing extra.

use super::gemm::{gemm, Mat};
use super::{SubstrateError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable parameter: owning component group and position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u16,
    pub index: u32,
}

/// Read-only view of a node value handed to custom functions.
#[derive(Clone, Copy)]
pub struct Value<'a> {
    pub tensor: &'a Tensor,
    /// Double-precision shadow of a scalar node, when the producer had one.
    pub scalar: Option<f64>,
}

impl Value<'_> {
    pub fn as_f64(&self) -> f64 {
        self.scalar
            .unwrap_or_else(|| self.tensor.data().first().copied().unwrap_or(0.0) as f64)
    }
}

/// Output of a custom function's forward pass.
pub struct Output {
    pub tensor: Tensor,
    pub scalar: Option<f64>,
}

/// A differentiable op defined outside the substrate (losses live here).
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[Value<'_>]) -> Result<Output, SubstrateError>;
    /// Gradients w.r.t. each input, given the upstream gradient of the output.
    /// `None` means "no gradient" for that input.
    fn backward(
        &self,
        inputs: &[Value<'_>],
        output: &Tensor,
        grad: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

/// Static geometry of one NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op {
    Input,
    Leaf,
    Param(ParamKey),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f32> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Reshape(Var),
    Upsample2x(Var),
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    GradReversal { x: Var, lambda: f32 },
    Custom { inputs: Vec<Var>, f: Box<dyn Function> },
}

struct Node {
    value: Tensor,
    scalar: Option<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, scalar: Option<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            scalar,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is ever computed for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, None, Op::Input, false)
    }

    /// Free variable whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, Op::Leaf, true)
    }

    /// Trainable parameter; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, value: Tensor, key: ParamKey, trainable: bool) -> Var {
        self.push(value, None, Op::Param(key), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node, in double precision when available.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar
            .unwrap_or_else(|| n.value.data().first().copied().unwrap_or(0.0) as f64)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter node reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(key) => self.grads.get(i).and_then(Option::as_ref).map(|g| (key, g)),
            _ => None,
        })
    }

    /// Dense layer: `x[n,k] · w[k,m] + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, SubstrateError> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(SubstrateError::ShapeMismatch {
                op: "linear",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * m];
        let bias = self.value(b).data();
        for row in out.chunks_mut(m.max(1)) {
            row.copy_from_slice(&bias[..row.len()]);
        }
        gemm(
            Mat::new(self.value(x).data(), n, k),
            Mat::new(self.value(w).data(), k, m),
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, None, Op::Linear { x, w, b }, rg))
    }

    /// NHWC convolution with zero padding `kernel / 2`.
    /// `w` is `[kernel*kernel*in_c, out_c]`, rows ordered (ky, kx, c).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
    ) -> Result<Var, SubstrateError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[0] != kernel * kernel * xs[3] {
            return Err(SubstrateError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        let pad = kernel / 2;
        let out_h = (xs[1] + 2 * pad - kernel) / stride + 1;
        let out_w = (xs[2] + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            in_c: xs[3],
            kernel,
            stride,
            pad,
            out_h,
            out_w,
            out_c: ws[1],
        };
        if self.value(b).shape() != [geom.out_c] {
            return Err(SubstrateError::ShapeMismatch {
                op: "conv2d bias",
                left: self.value(b).shape().to_vec(),
                right: vec![geom.out_c],
            });
        }
        let cols = im2col(self.value(x).data(), &geom);
        let (m, kk, oc) = (geom.positions(), geom.patch_len(), geom.out_c);
        let mut out = vec![0.0; m * oc];
        let bias = self.value(b).data();
        for row in out.chunks_mut(oc.max(1)) {
            row.copy_from_slice(&bias[..row.len()]);
        }
        gemm(
            Mat::new(&cols, m, kk),
            Mat::new(self.value(w).data(), kk, oc),
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![geom.batch, out_h, out_w, oc], out)?;
        Ok(self.push(value, None, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, None, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, None, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(v, None, Op::Tanh(x), rg)
    }

    /// Row-wise softmax over the last dimension of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, SubstrateError> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(SubstrateError::ShapeMismatch {
                op: "softmax",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        let mut out = t.clone();
        let k = t.shape()[1];
        if k > 0 {
            for row in out.data_mut().chunks_mut(k) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, None, Op::Softmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, SubstrateError> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, None, Op::Reshape(x), rg))
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, SubstrateError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(SubstrateError::ShapeMismatch {
                op: "upsample2x",
                left: s.to_vec(),
                right: vec![0, 0, 0, 0],
            });
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = t.data();
        let mut out = vec![0.0; n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((b * h + y / 2) * w + xx / 2) * c;
                    let di = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let rg = self.rg(x);
        let v = Tensor::new(vec![n, 2 * h, 2 * w, c], out)?;
        Ok(self.push(v, None, Op::Upsample2x(x), rg))
    }

    /// Concatenates two `[n, *]` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, SubstrateError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(SubstrateError::ShapeMismatch {
                op: "concat_cols",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (n, da, db) = (ta.rows(), ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        let v = Tensor::new(vec![n, da + db], out)?;
        Ok(self.push(v, None, Op::ConcatCols(a, b), rg))
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, SubstrateError> {
        let t = self.value(x);
        if t.shape().is_empty() || start > end || end > t.rows() {
            return Err(SubstrateError::ShapeMismatch {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = t.row_len();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(shape, t.data()[start * w..end * w].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, None, Op::SliceRows { x, start }, rg))
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f32) -> Result<Var, SubstrateError> {
        if !(lambda >= 0.0) {
            return Err(SubstrateError::NegativeLambda(lambda));
        }
        let v = self.value(x).clone();
        let scalar = self.nodes[x.0].scalar;
        let rg = self.rg(x);
        Ok(self.push(v, scalar, Op::GradReversal { x, lambda }, rg))
    }

    pub fn custom(&mut self, inputs: &[Var], f: Box<dyn Function>) -> Result<Var, SubstrateError> {
        let out = {
            let vals: Vec<Value<'_>> = inputs.iter().map(|&v| self.view(v)).collect();
            f.forward(&vals)?
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out.tensor,
            out.scalar,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            rg,
        ))
    }

    fn view(&self, v: Var) -> Value<'_> {
        let n = &self.nodes[v.0];
        Value {
            tensor: &n.value,
            scalar: n.scalar,
        }
    }

    /// Backpropagates from a one-element node.
    pub fn backward(&mut self, loss: Var) -> Result<(), SubstrateError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(SubstrateError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.all_finite() {
            return Err(SubstrateError::NonFinite("loss"));
        }
        let seed = Tensor::filled(lv.shape().to_vec(), 1.0);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (v, dg) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xt.rows(), wt.shape()[0], wt.shape()[1]);
                let mut out = Vec::new();
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * k];
                    gemm(Mat::new(g.data(), n, m), Mat::new(wt.data(), k, m).t(), &mut dx, false);
                    out.push((*x, Tensor::new(vec![n, k], dx).unwrap()));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * m];
                    gemm(Mat::new(xt.data(), n, k).t(), Mat::new(g.data(), n, m), &mut dw, false);
                    out.push((*w, Tensor::new(vec![k, m], dw).unwrap()));
                }
                if self.rg(*b) {
                    out.push((*b, column_sums(g.data(), m)));
                }
                out
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let wt = self.value(*w);
                let (m, kk, oc) = (geom.positions(), geom.patch_len(), geom.out_c);
                let mut out = Vec::new();
                if self.rg(*w) {
                    let mut dw = vec![0.0; kk * oc];
                    gemm(Mat::new(cols, m, kk).t(), Mat::new(g.data(), m, oc), &mut dw, false);
                    out.push((*w, Tensor::new(vec![kk, oc], dw).unwrap()));
                }
                if self.rg(*b) {
                    out.push((*b, column_sums(g.data(), oc)));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; m * kk];
                    gemm(Mat::new(g.data(), m, oc), Mat::new(wt.data(), kk, oc).t(), &mut dcols, false);
                    let dx = col2im(&dcols, geom);
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap()));
                }
                out
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let mut d = g.clone();
                for (dv, &a) in d.data_mut().iter_mut().zip(xv) {
                    if a <= 0.0 {
                        *dv = 0.0;
                    }
                }
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y * (1.0 - y);
                }
                vec![(*x, d)]
            }
            Op::Tanh(x) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= 1.0 - y * y;
                }
                vec![(*x, d)]
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut d = g.clone();
                if k > 0 {
                    for (drow, prow) in d.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                        let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (dv, &p) in drow.iter_mut().zip(prow) {
                            *dv = p * (*dv - dot);
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                vec![(*x, g.clone().reshape(shape).unwrap())]
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![0.0; n * h * w * c];
                let gd = g.data();
                for bi in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let si = ((bi * 2 * h + y) * 2 * w + xx) * c;
                            let di = ((bi * h + y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                dx[di + ch] += gd[si + ch];
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(s.to_vec(), dx).unwrap())]
            }
            Op::ConcatCols(a, b) => {
                let (da, db) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                let n = g.rows();
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for r in 0..n {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                vec![
                    (*a, Tensor::new(vec![n, da], ga).unwrap()),
                    (*b, Tensor::new(vec![n, db], gb).unwrap()),
                ]
            }
            Op::SliceRows { x, start } => {
                let xt = self.value(*x);
                let w = xt.row_len();
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                dx.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::GradReversal { x, lambda } => {
                let l = *lambda;
                vec![(*x, g.map(|v| -l * v))]
            }
            Op::Custom { inputs, f } => {
                let vals: Vec<Value<'_>> = inputs.iter().map(|&v| self.view(v)).collect();
                f.backward(&vals, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, &v)| d.map(|d| (v, d)))
                    .collect()
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn column_sums(data: &[f32], cols: usize) -> Tensor {
    let mut acc = vec![0.0f32; cols];
    if cols > 0 {
        for row in data.chunks(cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    Tensor::new(vec![cols], acc).unwrap()
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let kk = g.patch_len();
    let c = g.in_c;
    let mut cols = vec![0.0; g.positions() * kk];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut cols[r * kk..(r + 1) * kk];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = (ky * g.kernel + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(dcols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let kk = g.patch_len();
    let c = g.in_c;
    let mut dx = vec![0.0; g.batch * g.height * g.width * c];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &dcols[r * kk..(r + 1) * kk];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = (ky * g.kernel + kx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += row[src + ch];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    dx
}
