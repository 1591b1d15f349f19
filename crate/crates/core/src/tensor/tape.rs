//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive in execution order, so node `i` only
//! ever reads nodes `< i`. [`Tape::backward`] replays the record in reverse.
//! Gradients are kept only for leaves; repeated `backward` calls add into
//! them until [`Tape::zero_grad`].

use super::{gemm, softmax_in_place, Tensor};
use crate::error::{FusionError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        cols: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            false,
        )
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(FusionError::Dimension(format!(
                "{what} expects a matrix, got shape {s:?}"
            ))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FusionError::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(FusionError::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(a, b, what)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `x (m×n) + b` with `b` of length `n` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row_bias")?;
        if self.value(b).len() != n {
            return Err(FusionError::Dimension(format!(
                "bias of shape {:?} for rows of width {n}",
                self.shape(b)
            )));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::AddRowBias(x, b), rg))
    }

    /// `x (N×C×H×W) + b` with one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, c, h, w] = *self.shape(x) else {
            return Err(FusionError::Dimension(format!(
                "channel bias expects N×C×H×W, got {:?}",
                self.shape(x)
            )));
        };
        if self.value(b).len() != c {
            return Err(FusionError::Dimension(format!(
                "bias of shape {:?} for {c} channels",
                self.shape(b)
            )));
        }
        let plane = h * w;
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(plane.max(1)).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|o| *o += bc);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddChannelBias(x, b), rg))
    }

    /// Affine map `x·w + b` with `w` of shape `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(FusionError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Collapses all trailing axes: `N×...` becomes `N×rest`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(FusionError::Domain("mean of an empty tensor".into()));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Mean(x), rg))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax")?;
        if n == 0 {
            return Err(FusionError::Domain("softmax of an empty vector".into()));
        }
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(FusionError::Domain("softmax input is not finite".into()));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(x), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(FusionError::Dimension(format!(
                "{} labels for {b} rows of logits",
                labels.len()
            )));
        }
        if b == 0 {
            return Err(FusionError::Domain("cross entropy of an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(FusionError::Index(format!("label {bad} with {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(FusionError::Domain("mse of empty tensors".into()));
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![loss], Op::Mse(pred, target), rg))
    }

    /// Valid (unpadded) cross-correlation of `N×C×H×W` input with an `F×C×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let [n, c, h, w] = *self.shape(input) else {
            return Err(FusionError::Dimension(format!(
                "conv2d input must be N×C×H×W, got {:?}",
                self.shape(input)
            )));
        };
        let [f, kc, kh, kw] = *self.shape(kernel) else {
            return Err(FusionError::Dimension(format!(
                "conv2d kernel must be F×C×kh×kw, got {:?}",
                self.shape(kernel)
            )));
        };
        if kc != c || kh > h || kw > w || kh == 0 || kw == 0 || stride == 0 {
            return Err(FusionError::Dimension(format!(
                "conv2d of input {:?} with kernel {:?} at stride {stride}",
                self.shape(input),
                self.shape(kernel)
            )));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride);
        let (ck, p) = (geom.ck(), geom.p());
        let mut cols = vec![0.0; n * ck * p];
        let mut out = vec![0.0; n * f * p];
        let x = self.value(input);
        let kv = self.value(kernel);
        let img = c * h * w;
        for i in 0..n {
            let col = &mut cols[i * ck * p..(i + 1) * ck * p];
            geom.im2col(&x[i * img..(i + 1) * img], col);
            gemm(f, ck, p, kv, false, col, false, &mut out[i * f * p..(i + 1) * f * p], false);
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![n, f, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(FusionError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i];
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = nodes[v.0].value.len();
            let buf = local[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &out.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    acc(*a, &mut |da| gemm(m, n, k, g, false, bv, true, da, true));
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, db, true));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(v, &mut |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, &mut |d| add_into(d, g));
                }
                if wants(*b) {
                    acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    acc(*a, &mut |d| {
                        for ((x, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                            *x += gi * bi;
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                            *x += gi * ai;
                        }
                    });
                }
            }
            Op::AddRowBias(x, b) => {
                if wants(*x) {
                    acc(*x, &mut |d| add_into(d, g));
                }
                if wants(*b) {
                    let n = out.shape[1];
                    acc(*b, &mut |d| {
                        for row in g.chunks(n.max(1)) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::AddChannelBias(x, b) => {
                if wants(*x) {
                    acc(*x, &mut |d| add_into(d, g));
                }
                if wants(*b) {
                    let c = out.shape[1];
                    let plane = out.shape[2] * out.shape[3];
                    acc(*b, &mut |d| {
                        for (j, chunk) in g.chunks(plane.max(1)).enumerate() {
                            d[j % c] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for ((a, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &out.value;
                acc(*x, &mut |d| {
                    for ((a, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *a += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &out.value;
                acc(*x, &mut |d| {
                    for ((a, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *a += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::SoftmaxRows(x) => {
                let n = out.shape[1];
                let y = &out.value;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, (drow, prow)) in d.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (dv, pv)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            *dv += scale * (pv - target);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = 2.0 * g[0] / av.len() as f64;
                if wants(*a) {
                    acc(*a, &mut |d| {
                        for ((x, p), t) in d.iter_mut().zip(av).zip(bv) {
                            *x += k * (p - t);
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |d| {
                        for ((x, p), t) in d.iter_mut().zip(av).zip(bv) {
                            *x -= k * (p - t);
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                cols,
            } => {
                let [n, c, h, w] = nodes[input.0].shape[..] else {
                    unreachable!()
                };
                let [f, _, kh, kw] = nodes[kernel.0].shape[..] else {
                    unreachable!()
                };
                let geom = ConvGeom::new(c, h, w, kh, kw, *stride);
                let (ck, p) = (geom.ck(), geom.p());
                if wants(*kernel) {
                    acc(*kernel, &mut |dk| {
                        for i in 0..n {
                            let gi = &g[i * f * p..(i + 1) * f * p];
                            let col = &cols[i * ck * p..(i + 1) * ck * p];
                            gemm(f, p, ck, gi, false, col, true, dk, true);
                        }
                    });
                }
                if wants(*input) {
                    let kv = &nodes[kernel.0].value;
                    let img = c * h * w;
                    let mut dcol = vec![0.0; ck * p];
                    acc(*input, &mut |dx| {
                        for i in 0..n {
                            let gi = &g[i * f * p..(i + 1) * f * p];
                            gemm(ck, f, p, kv, true, gi, false, &mut dcol, false);
                            geom.col2im(&dcol, &mut dx[i * img..(i + 1) * img]);
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Self {
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        }
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Row `(ch·kh + ky)·kw + kx`, column `oy·ow + ox`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.p();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let src = (ch * self.h + oy * self.stride + ky) * self.w + kx;
                        let dst = row + oy * self.ow;
                        for ox in 0..self.ow {
                            col[dst + ox] = x[src + ox * self.stride];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let dst = (ch * self.h + oy * self.stride + ky) * self.w + kx;
                        let src = row + oy * self.ow;
                        for ox in 0..self.ow {
                            dx[dst + ox * self.stride] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1., 2., 3., 4.]);

        let row = tape.constant(&t(&[1, 2], &[1., 0.]));
        let col = tape.constant(&t(&[2, 1], &[2., 5.]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out), &[2.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] by [2, 3]"), "{err}");
    }

    #[test]
    fn conv_full_overlap_and_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let k = tape.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[4.0]);

        let img: Vec<f64> = (0..12).map(f64::from).collect();
        let x = tape.constant(&t(&[1, 1, 3, 4], &img));
        let k = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.value(y), img.as_slice());
    }

    #[test]
    fn conv_kernel_larger_than_input_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(&Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1), Err(FusionError::Dimension(_))));
    }

    #[test]
    fn conv_stride_output_size() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3, 7, 8]));
        let k = tape.constant(&Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, k, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3, 3]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::full(&[4, 7], 0.3));
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 6]).unwrap();
        assert!((tape.value(loss)[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut tape = Tape::new();
            let logits = tape.constant(&t(&[1, 3], &[margin, 0.0, 0.0]));
            let loss = tape.cross_entropy(logits, &[0]).unwrap();
            let v = tape.value(loss)[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(FusionError::Index(_))
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(FusionError::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -2.0]).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1, 1], &[3.0]).with_requires_grad(true));
        let x = tape.constant(&t(&[1, 1], &[2.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0]);
        assert!(tape.grad(x).is_none());
    }
}
