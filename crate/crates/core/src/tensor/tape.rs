use serde::{Deserialize, Serialize};

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{check_positive, flop_cost as cost, softmax_in_place, FlopTally, Tensor};
use crate::error::{Error, Result};

/// Variance epsilon used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Probabilities are clamped to at least this value before entering a KL term.
pub const SOFTMAX_FLOOR: f64 = 1e-12;

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics and report them for a running update.
    Train,
    /// Normalize with the running statistics; nothing is updated.
    Frozen,
}

/// Per-channel mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// `self ← (1 − momentum)·self + momentum·batch`.
    pub fn absorb(&mut self, batch: &BnStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mode: BnMode },
    GlobalAvgPool(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Floor(Var, f64),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Kl(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    flops: FlopTally,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    forward: FlopTally,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    flops: FlopTally,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// FLOPs charged for the backward sweep (twice the forward charge of
    /// every node it passed through).
    pub fn flops(&self) -> FlopTally {
        self.flops
    }
}

fn mac(flops: usize) -> FlopTally {
    FlopTally { mac: flops as u64, elementwise: 0 }
}

fn elementwise(per: u64, count: usize) -> FlopTally {
    FlopTally { mac: 0, elementwise: per * count as u64 }
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

    /// FLOPs charged by every primitive recorded so far.
    pub fn forward_flops(&self) -> FlopTally {
        self.forward
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, flops: FlopTally::default() });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], flops: FlopTally) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.forward += flops;
        self.nodes.push(Node { value, op, requires_grad, flops });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.value(v).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a rank-2 tensor, got {s:?}"))),
        }
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b], mac(2 * m * k * n)))
    }

    /// Square-kernel convolution of an NCHW batch with `[C_out, C_in, k, k]`
    /// weights, computed as im2col followed by one matrix product.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let [c_out, c_in, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {ws:?}")));
        }
        let geom = ConvGeom::new(&xs, kh, stride, padding).filter(|g| g.in_channels == c_in).ok_or_else(|| {
            Error::shape("conv2d", format!("input {xs:?} with weight {ws:?}, stride {stride}, padding {padding}"))
        })?;
        let cols = im2col(&geom, self.value(input).data());
        let (patch, positions) = (geom.patch_len(), geom.positions());
        let mut mat = vec![0.0; c_out * positions];
        gemm(c_out, patch, positions, self.value(weight).data(), false, &cols, false, 0.0, &mut mat);
        let plane = geom.out_height * geom.out_width;
        let mut out = vec![0.0; mat.len()];
        for co in 0..c_out {
            for n in 0..geom.batch {
                let src = &mat[co * positions + n * plane..co * positions + (n + 1) * plane];
                out[(n * c_out + co) * plane..(n * c_out + co + 1) * plane].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![geom.batch, c_out, geom.out_height, geom.out_width], out)?;
        let flops = mac(2 * c_out * patch * positions);
        Ok(self.push(value, Op::Conv2d { input, weight, geom, cols }, &[input, weight], flops))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let n = value.len();
        Ok(self.push(value, Op::Add(a, b), &[a, b], elementwise(cost::ADD, n)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let n = value.len();
        Ok(self.push(value, Op::Sub(a, b), &[a, b], elementwise(cost::ADD, n)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let n = value.len();
        Ok(self.push(value, Op::Mul(a, b), &[a, b], elementwise(cost::MUL, n)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let n = value.len();
        self.push(value, Op::Scale(a, factor), &[a], elementwise(cost::MUL, n))
    }

    /// Add a per-channel bias along dimension 1 of `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (channels, inner) = self.channel_layout("add_bias", x, bias)?;
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let n = value.len();
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias], elementwise(cost::BIAS, n)))
    }

    fn channel_layout(&self, op: &'static str, x: Var, per_channel: Var) -> Result<(usize, usize)> {
        let xs = self.value(x).shape();
        let ps = self.value(per_channel).shape();
        if xs.len() < 2 || ps != [xs[1]] {
            return Err(Error::shape(op, format!("input {xs:?} with per-channel vector {ps:?}")));
        }
        Ok((xs[1], xs[2..].iter().product()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let n = value.len();
        self.push(value, Op::Relu(x), &[x], elementwise(cost::RELU, n))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let n = value.len();
        self.push(value, Op::Gelu(x), &[x], elementwise(cost::GELU, n))
    }

    /// Batch normalization over all axes except dimension 1.
    ///
    /// In [`BnMode::Train`] the batch mean and unbiased variance are returned
    /// so the owner can fold them into its running statistics; in
    /// [`BnMode::Frozen`] `running` is used as-is and `None` is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnStats,
        mode: BnMode,
    ) -> Result<(Var, Option<BnStats>)> {
        let (channels, inner) = self.channel_layout("batch_norm", x, gamma)?;
        if self.value(beta).shape() != [channels] {
            return Err(Error::shape("batch_norm", format!("beta {:?}", self.value(beta).shape())));
        }
        if running.mean.len() != channels || running.var.len() != channels {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let xv = self.value(x);
        let batch = xv.rows();
        let count = batch * inner;
        let (mean, var, batch_stats) = match mode {
            BnMode::Frozen => (running.mean.clone(), running.var.clone(), None),
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("train mode needs at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for n in 0..batch {
                        let base = (n * channels + c) * inner;
                        s += xv.data()[base..base + inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for n in 0..batch {
                        let base = (n * channels + c) * inner;
                        ss += xv.data()[base..base + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = ss / count as f64;
                }
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                let stats = BnStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (h, o))) in xv.data().iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / inner) % channels;
            *h = (v - mean[c]) * inv_std[c];
            *o = g[c] * *h + b[c];
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let n = value.len();
        let op = Op::BatchNorm { input: x, gamma, beta, xhat, inv_std, mode };
        let var = self.push(value, op, &[x, gamma, beta], elementwise(cost::BATCH_NORM, n));
        Ok((var, batch_stats))
    }

    /// Mean over the spatial axes: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[n, c, h, w] = xv.shape() else {
            return Err(Error::shape("global_avg_pool", format!("expected NCHW, got {:?}", xv.shape())));
        };
        let plane = h * w;
        let data = xv.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let count = xv.len();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x], elementwise(cost::POOL, count)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.value(x).shape())))?;
        Ok(self.push(value, Op::Reshape(x), &[x], FlopTally::default()))
    }

    /// Collapse everything after the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.rows(), v.row_len()];
        self.reshape(x, &shape)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.rank2("softmax", x)?;
        let value = self.value(x).softmax_rows();
        let n = value.len();
        Ok(self.push(value, Op::Softmax(x), &[x], elementwise(cost::SOFTMAX, n)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rank2("log_softmax", x)?;
        let mut value = self.value(x).clone();
        let w = value.row_len();
        for row in value.data_mut().chunks_mut(w) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let n = value.len();
        Ok(self.push(value, Op::LogSoftmax(x), &[x], elementwise(cost::LOG_SOFTMAX, n)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::domain("log", format!("argument {v} is not positive")));
        }
        let value = self.value(x).map(f64::ln);
        let n = value.len();
        Ok(self.push(value, Op::Log(x), &[x], elementwise(cost::LOG, n)))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn floor(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor));
        let n = value.len();
        self.push(value, Op::Floor(x, floor), &[x], elementwise(cost::FLOOR, n))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x], elementwise(cost::REDUCE, n))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n as f64);
        self.push(value, Op::Mean(x), &[x], elementwise(cost::REDUCE, n))
    }

    /// Batch-mean cross-entropy of rank-2 logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.rank2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows of logits but {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::shape("cross_entropy", format!("target {t} outside {classes} classes")));
        }
        let lv = self.value(logits);
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(classes).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / rows as f64);
        let n = rows * classes;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(value, op, &[logits], elementwise(cost::CROSS_ENTROPY, n)))
    }

    /// Batch-mean `Σ p·ln(p/q)` of two rank-2 probability tables.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.rank2("kl_divergence", p)?;
        self.same_shape("kl_divergence", p, q)?;
        let value = Tensor::scalar(super::kl_divergence(self.value(p), self.value(q))?);
        let n = self.value(p).len();
        Ok(self.push(value, Op::Kl(p, q), &[p, q], elementwise(cost::KL, n)))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is not consumed, so calling this twice on the same tape
    /// yields bitwise-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::shape("backward", "tape is empty"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {:?}", lv.shape())));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut flops = FlopTally::default();
        pending[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = pending[idx].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                flops += FlopTally {
                    mac: node.flops.mac * cost::BACKWARD_MULTIPLIER,
                    elementwise: node.flops.elementwise * cost::BACKWARD_MULTIPLIER,
                };
            }
            self.propagate(idx, node, g, &mut pending, &mut leaves)?;
        }
        Ok(Gradients { grads: leaves, flops })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        idx: usize,
        node: &Node,
        g: Vec<f64>,
        pending: &mut [Option<Vec<f64>>],
        leaves: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut send = |v: Var, contrib: Vec<f64>| accumulate(&mut pending[v.0], contrib);
        match &node.op {
            Op::Leaf => {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.rank2("matmul", a)?;
                let n = self.value(b).shape()[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, self.value(b).data(), true, 0.0, &mut da);
                    send(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, &g, false, 0.0, &mut db);
                    send(b, db);
                }
            }
            Op::Conv2d { input, weight, geom, cols } => {
                let c_out = self.value(*weight).shape()[0];
                let (patch, positions) = (geom.patch_len(), geom.positions());
                let plane = geom.out_height * geom.out_width;
                let mut gmat = vec![0.0; c_out * positions];
                for n in 0..geom.batch {
                    for co in 0..c_out {
                        let src = &g[(n * c_out + co) * plane..(n * c_out + co + 1) * plane];
                        gmat[co * positions + n * plane..co * positions + (n + 1) * plane].copy_from_slice(src);
                    }
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; c_out * patch];
                    gemm(c_out, positions, patch, &gmat, false, cols, true, 0.0, &mut dw);
                    send(*weight, dw);
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; patch * positions];
                    gemm(patch, c_out, positions, self.value(*weight).data(), true, &gmat, false, 0.0, &mut dcols);
                    send(*input, col2im(geom, &dcols));
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    send(a, g.clone());
                }
                if self.wants(b) {
                    send(b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(b) {
                    send(b, g.iter().map(|v| -v).collect());
                }
                if self.wants(a) {
                    send(a, g);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    send(a, g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect());
                }
                if self.wants(b) {
                    send(b, g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, factor) => send(a, g.iter().map(|v| v * factor).collect()),
            &Op::AddBias(x, bias) => {
                if self.wants(bias) {
                    let (channels, inner) = self.channel_layout("add_bias", x, bias)?;
                    let mut db = vec![0.0; channels];
                    for (i, v) in g.iter().enumerate() {
                        db[(i / inner) % channels] += v;
                    }
                    send(bias, db);
                }
                if self.wants(x) {
                    send(x, g);
                }
            }
            &Op::Relu(x) => {
                let dx = g.iter().zip(self.value(x).data()).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 });
                send(x, dx.collect());
            }
            &Op::Gelu(x) => {
                let dx = g.iter().zip(self.value(x).data()).map(|(d, &v)| d * gelu_grad(v));
                send(x, dx.collect());
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode } => {
                let (channels, inner) = self.channel_layout("batch_norm", *input, *gamma)?;
                let batch = self.value(*input).rows();
                let count = (batch * inner) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (i, (d, h)) in g.iter().zip(xhat).enumerate() {
                    let c = (i / inner) % channels;
                    sum_g[c] += d;
                    sum_gx[c] += d * h;
                }
                if self.wants(*input) {
                    let gam = self.value(*gamma).data();
                    let dx = g.iter().zip(xhat).enumerate().map(|(i, (d, h))| {
                        let c = (i / inner) % channels;
                        let scale = gam[c] * inv_std[c];
                        match mode {
                            BnMode::Frozen => d * scale,
                            BnMode::Train => scale * (d - sum_g[c] / count - h * sum_gx[c] / count),
                        }
                    });
                    send(*input, dx.collect());
                }
                if self.wants(*gamma) {
                    send(*gamma, sum_gx);
                }
                if self.wants(*beta) {
                    send(*beta, sum_g);
                }
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.value(x).shape();
                let plane = s[2] * s[3];
                let mut dx = Vec::with_capacity(self.value(x).len());
                for d in &g {
                    dx.extend(std::iter::repeat_n(d / plane as f64, plane));
                }
                send(x, dx);
            }
            &Op::Reshape(x) => send(x, g),
            &Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.row_len();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(x, dx);
            }
            &Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = node.value.row_len();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                send(x, dx);
            }
            &Op::Log(x) => send(x, g.iter().zip(self.value(x).data()).map(|(d, v)| d / v).collect()),
            &Op::Floor(x, floor) => {
                let dx = g.iter().zip(self.value(x).data()).map(|(d, &v)| if v > floor { *d } else { 0.0 });
                send(x, dx.collect());
            }
            &Op::Sum(x) => send(x, vec![g[0]; self.value(x).len()]),
            &Op::Mean(x) => {
                let n = self.value(x).len();
                send(x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = self.value(*logits).row_len();
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * classes + t] -= scale;
                }
                send(*logits, dx);
            }
            &Op::Kl(p, q) => {
                let pv = self.value(p);
                let qv = self.value(q);
                let scale = g[0] / pv.rows() as f64;
                if self.wants(p) {
                    let dp = pv.data().iter().zip(qv.data()).map(|(a, b)| scale * (a.ln() - b.ln() + 1.0));
                    send(p, dp.collect());
                }
                if self.wants(q) {
                    let dq = pv.data().iter().zip(qv.data()).map(|(a, b)| -scale * a / b);
                    send(q, dq.collect());
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Check that `probs` is a valid probability table for a KL term.
pub(crate) fn validate_probabilities(op: &'static str, probs: &Tensor) -> Result<()> {
    check_positive(op, probs)?;
    for i in 0..probs.rows() {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain(op, format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sign_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), false);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut t = Tape::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 7.0, -1.0], vec![9.0, 0.0, 4.5]]).unwrap();
        let i = t.leaf(eye, false);
        let av = t.leaf(a.clone(), false);
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn kl_gradient_vanishes_at_minimum() {
        let p = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let mut t = Tape::new();
        let pv = t.leaf(p.clone(), false);
        let qv = t.leaf(p, true);
        let loss = t.kl_divergence(pv, qv).unwrap();
        assert_eq!(t.value(loss).item().unwrap(), 0.0);
        let grads = t.backward(loss).unwrap();
        // dq = -p/q per row; the tangent space of the simplex sees zero.
        for row in grads.get(qv).unwrap().data().chunks(2) {
            assert!((row[0] - row[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]), false);
        let b = t.leaf(Tensor::zeros(&[2, 3]), false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.leaf(Tensor::zeros(&[3]), false);
        let err = t.add(a, c).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2]), true);
        let r = t.relu(a);
        assert!(t.backward(r).is_err());
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn diamond_graph_accumulates() {
        // loss = sum(x + x) → gradient 2 everywhere.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.5, -3.0]), true);
        let y = t.add(x, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]), false);
        let w = t.leaf(Tensor::vector(vec![3.0]), true);
        let y = t.mul(x, w).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn frozen_batch_norm_reports_no_stats() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let g = t.leaf(Tensor::vector(vec![1.0]), false);
        let b = t.leaf(Tensor::vector(vec![0.0]), false);
        let running = BnStats { mean: vec![1.0], var: vec![4.0] };
        let (y, stats) = t.batch_norm(x, g, b, &running, BnMode::Frozen).unwrap();
        assert!(stats.is_none());
        let expect = (3.0 - 1.0) / (4.0 + BN_EPS).sqrt();
        assert!((t.value(y).data()[2] - expect).abs() < 1e-15);
        let (_, stats) = t.batch_norm(x, g, b, &running, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-15);
    }
}
