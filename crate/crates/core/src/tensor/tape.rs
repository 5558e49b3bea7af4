//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value, the ids of its
//! inputs and whatever it saved for the backward pass. Node ids are indices
//! into the tape, so inputs always precede outputs and a reverse sweep over
//! the node list is a valid topological order.

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Probabilities are clamped to this floor inside logarithms only.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch, as seen by a batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<f64>,
    /// Number of values per channel (`B·H·W`).
    pub count: usize,
}

/// Which statistics a batch-norm node normalises with.
#[derive(Debug, Clone, Copy)]
pub enum BnStatsSource<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    AddBias { x: NodeId, bias: NodeId },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom, col: Vec<T> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        batch_stats: bool,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu { x: NodeId },
    AvgPool2 { x: NodeId },
    GlobalAvgPool { x: NodeId },
    NchwToRows { x: NodeId },
    SoftmaxRows { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
    CondEntropy { z: NodeId, dlog: Vec<T> },
    MarginalEntropy { z: NodeId, dlog: Vec<T> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    Sum { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::NchwToRows { .. } => "nchw_to_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CondEntropy { .. } => "cond_entropy",
            Op::MarginalEntropy { .. } => "marginal_entropy",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by leaf node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[inline]
fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Input node ids of `id`, in operand order.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::AvgPool2 { x }
            | Op::GlobalAvgPool { x }
            | Op::NchwToRows { x }
            | Op::SoftmaxRows { x }
            | Op::Scale { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::CondEntropy { z, .. } | Op::MarginalEntropy { z, .. } => vec![*z],
            Op::ConcatCols { parts } => parts.clone(),
            Op::SliceCols { x, .. } => vec![*x],
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn expect_rank(&self, id: NodeId, rank: usize, op: &str) -> Result<&[usize]> {
        let shape = self.shape(id);
        if shape.len() != rank {
            return dim_err(format!("{op}: expected rank {rank}, got shape {shape:?}"));
        }
        Ok(shape)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.expect_rank(a, 2, "matmul")?.to_vec();
        let sb = self.expect_rank(b, 2, "matmul")?.to_vec();
        if sa[1] != sb[0] {
            return dim_err(format!("matmul: inner dimensions of {sa:?} and {sb:?} disagree"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Side-by-side concatenation of matrices with equal row counts, or of
    /// vectors end to end.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: no parts".into()))?;
        let rank = self.shape(first).len();
        if rank != 1 && rank != 2 {
            return dim_err("concat_cols: parts must be vectors or matrices");
        }
        let rows = if rank == 2 { self.shape(first)[0] } else { 1 };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || (rank == 2 && s[0] != rows) {
                return dim_err(format!("concat_cols: part {s:?} does not line up"));
            }
            widths.push(s[rank - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let rg = self.any_grad(parts);
        self.push(Tensor::new(shape, out)?, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    /// Columns `start..start + width` of `x[N×K]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let s = self.expect_rank(x, 2, "slice_cols")?.to_vec();
        if width == 0 || start + width > s[1] {
            return dim_err(format!("slice_cols: {start}..{} out of {s:?}", start + width));
        }
        let mut out = Vec::with_capacity(s[0] * width);
        for row in self.value(x).data().chunks_exact(s[1]) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![s[0], width], out)?, Op::SliceCols { x, start }, rg)
    }

    /// Adds `bias[K]` to every row of `x[N×K]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.expect_rank(x, 2, "add_bias")?.to_vec();
        if self.shape(bias) != [sx[1]] {
            return dim_err(format!(
                "add_bias: bias {:?} does not match rows of {sx:?}",
                self.shape(bias)
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(sx[1]) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(Tensor::new(sx, out)?, Op::AddBias { x, bias }, rg)
    }

    /// 3×3 cross-correlation of `x[B×C×H×W]` with `w[C'×C×3×3]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        if !(1..=2).contains(&stride) || pad > 1 {
            return dim_err(format!("conv2d: unsupported stride {stride} / pad {pad}"));
        }
        let sx = self.expect_rank(x, 4, "conv2d")?.to_vec();
        let sw = self.expect_rank(w, 4, "conv2d")?.to_vec();
        if sw[1] != sx[1] || sw[2] != kernels::KSIZE || sw[3] != kernels::KSIZE {
            return dim_err(format!("conv2d: kernel {sw:?} incompatible with input {sx:?}"));
        }
        let (Some(out_h), Some(out_w)) = (
            ConvGeom::out_extent(sx[2], stride, pad),
            ConvGeom::out_extent(sx[3], stride, pad),
        ) else {
            return dim_err(format!(
                "conv2d: input {sx:?} with stride {stride}, pad {pad} gives a non-integral output"
            ));
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            h: sx[2],
            w: sx[3],
            out_h,
            out_w,
            stride,
            pad,
        };
        let (y, col) = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let rg = self.any_grad(&[x, w]);
        let col = if rg { col } else { Vec::new() };
        self.push(
            Tensor::new(vec![geom.batch, geom.out_ch, out_h, out_w], y)?,
            Op::Conv2d { x, w, geom, col },
            rg,
        )
    }

    /// Per-channel normalisation of `x[B×C×H×W]` followed by `gamma·x̂ + beta`.
    ///
    /// With [`BnStatsSource::Batch`] the statistics of this batch are used and
    /// returned so the caller can fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        source: BnStatsSource<'_, T>,
        eps: f64,
    ) -> Result<(NodeId, Option<BnBatchStats>)> {
        let sx = self.expect_rank(x, 4, "batchnorm")?.to_vec();
        let (b, ch, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return dim_err(format!("batchnorm: affine parameters must have shape [{ch}]"));
        }
        let count = b * hw;
        let xv = self.value(x).data();
        let (mean, var) = match source {
            BnStatsSource::Batch => {
                if count < 2 {
                    return Err(Error::BatchSize { got: count });
                }
                let mut mean = vec![0.0f64; ch];
                let mut var = vec![0.0f64; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xv[(bi * ch + c) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for bi in 0..b {
                        q += xv[(bi * ch + c) * hw..][..hw]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[c] = mu;
                    var[c] = q / count as f64;
                }
                (mean, var)
            }
            BnStatsSource::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return dim_err("batchnorm: running statistics have the wrong length");
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| c(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..ch {
                let off = (bi * ch + ci) * hw;
                let mu: T = c(mean[ci]);
                for i in off..off + hw {
                    let h = (xv[i] - mu) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + be[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let batch_stats = matches!(source, BnStatsSource::Batch);
        let stats = batch_stats.then(|| BnBatchStats { mean, var, count });
        let id = self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch_stats,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
            },
            rg,
        )?;
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.expect_rank(x, 4, "avg_pool2")?.to_vec();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return dim_err(format!("avg_pool2: spatial extent of {s:?} is not even"));
        }
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        let q: T = c(0.25);
        for plane in 0..s[0] * s[1] {
            let src = &xv[plane * s[2] * s[3]..][..s[2] * s[3]];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * s[3] + 2 * ox;
                    dst[oy * ow + ox] = (src[i] + src[i + 1] + src[i + s[3]] + src[i + s[3] + 1]) * q;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![s[0], s[1], oh, ow], out)?, Op::AvgPool2 { x }, rg)
    }

    /// Mean over the spatial axes: `[B×C×H×W]` → `[B×C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.expect_rank(x, 4, "global_avg_pool")?.to_vec();
        let hw = s[2] * s[3];
        let inv: T = c(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool { x }, rg)
    }

    /// Flattens batch and spatial axes: `[B×C×H×W]` → `[(B·H·W)×C]`.
    pub fn nchw_to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.expect_rank(x, 4, "nchw_to_rows")?.to_vec();
        let (b, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..ch {
                let src = &xv[(bi * ch + ci) * hw..][..hw];
                for (sp, &v) in src.iter().enumerate() {
                    out[(bi * hw + sp) * ch + ci] = v;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![b * hw, ch], out)?, Op::NchwToRows { x }, rg)
    }

    /// Row-wise softmax of an `N×K` matrix, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.expect_rank(x, 2, "softmax_rows")?.to_vec();
        let mut out = self.value(x).data().to_vec();
        softmax_rows_in_place(&mut out, s[1]);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(s, out)?, Op::SoftmaxRows { x }, rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.expect_rank(logits, 2, "cross_entropy")?.to_vec();
        let (b, k) = (s[0], s[1]);
        if labels.len() != b {
            return dim_err(format!("cross_entropy: {} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &y) in probs.chunks_exact_mut(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            total += lse - row[y].as_f64();
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(c(total / b as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: if rg { probs } else { Vec::new() },
            },
            rg,
        )
    }

    /// Mean row entropy `−(1/N) Σᵢ Σₖ zᵢₖ log zᵢₖ` of an `N×K` matrix.
    pub fn cond_entropy(&mut self, z: NodeId) -> Result<NodeId> {
        let s = self.expect_rank(z, 2, "cond_entropy")?.to_vec();
        let n = s[0] as f64;
        let zv = self.value(z).data();
        let floor = c(LOG_CLAMP);
        let mut dlog = Vec::with_capacity(zv.len());
        T::ln_floor(zv, floor, &mut dlog);
        let mut total = 0.0f64;
        for (d, &p) in dlog.iter_mut().zip(zv) {
            total += p.as_f64() * d.as_f64();
            if p >= floor {
                *d += T::one();
            }
        }
        let rg = self.any_grad(&[z]);
        self.push(
            Tensor::scalar(c(-total / n)),
            Op::CondEntropy {
                z,
                dlog: if rg { dlog } else { Vec::new() },
            },
            rg,
        )
    }

    /// Entropy `−Σₖ z̄ₖ log z̄ₖ` of the column means `z̄ₖ = (1/N) Σᵢ zᵢₖ`.
    pub fn marginal_entropy(&mut self, z: NodeId) -> Result<NodeId> {
        let s = self.expect_rank(z, 2, "marginal_entropy")?.to_vec();
        let (n, k) = (s[0], s[1]);
        let mut marg = vec![0.0f64; k];
        for row in self.value(z).data().chunks_exact(k) {
            for (m, v) in marg.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        let mut h = 0.0;
        let mut dlog = Vec::with_capacity(k);
        for m in &mut marg {
            *m /= n as f64;
            let l = m.max(LOG_CLAMP).ln();
            h -= *m * l;
            dlog.push(c(l + if *m >= LOG_CLAMP { 1.0 } else { 0.0 }));
        }
        let rg = self.any_grad(&[z]);
        self.push(Tensor::scalar(c(h)), Op::MarginalEntropy { z, dlog }, rg)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let s = self.same_shape(a, b, op.name())?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(s, out)?, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f: T = c(factor);
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * f).collect())?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale { x, c: f }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(c(total)), Op::Sum { x }, rg)
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all: no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Only leaves created with `requires_grad` receive a gradient, and only
    /// if they are connected to `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut acc: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            acc[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = acc[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            if let Op::SliceCols { x, start } = node.op {
                // scatter straight into the input's accumulator
                if self.nodes[x.0].requires_grad {
                    let total = self.nodes[x.0].value.shape()[1];
                    let width = node.value.shape()[1];
                    let numel = self.nodes[x.0].value.numel();
                    let dst = acc[x.0].get_or_insert_with(|| vec![T::zero(); numel]);
                    for (drow, grow) in dst.chunks_exact_mut(total).zip(g.chunks_exact(width)) {
                        for (d, &v) in drow[start..start + width].iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                }
                continue;
            }
            for (input, grad) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut acc[input.0] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&grad) {
                            *e += *v;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Vector-Jacobian products of one node for each input that needs them.
    fn local_grads(&self, node: &Node<T>, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_a_bt_acc(g, val(*b), m, n, k, &mut da);
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_b_acc(val(*a), g, m, k, n, &mut db);
                    out.push((*b, db));
                }
            }
            Op::AddBias { x, bias } => {
                if rg(*bias) {
                    let k = self.nodes[bias.0].value.numel();
                    let mut db = vec![T::zero(); k];
                    for row in g.chunks_exact(k) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*bias, db));
                }
                if rg(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Conv2d { x, w, geom, col } => {
                let (dx, dw) = kernels::conv2d_backward(g, val(*w), col, geom, rg(*x), rg(*w));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch_stats,
                xhat,
                inv_std,
            } => {
                let s = self.nodes[x.0].value.shape();
                let (b, ch, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (b * hw) as f64;
                let mut sum_dy = vec![0.0f64; ch];
                let mut sum_dy_xhat = vec![0.0f64; ch];
                for bi in 0..b {
                    for ci in 0..ch {
                        let off = (bi * ch + ci) * hw;
                        for i in off..off + hw {
                            sum_dy[ci] += g[i].as_f64();
                            sum_dy_xhat[ci] += (g[i] * xhat[i]).as_f64();
                        }
                    }
                }
                if rg(*x) {
                    let gm = val(*gamma);
                    let mut dx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ci in 0..ch {
                            let off = (bi * ch + ci) * hw;
                            let scale = gm[ci] * inv_std[ci];
                            if *batch_stats {
                                let k: T = scale / c(count);
                                let s1: T = c(sum_dy[ci]);
                                let s2: T = c(sum_dy_xhat[ci]);
                                let cnt: T = c(count);
                                for i in off..off + hw {
                                    dx[i] = k * (cnt * g[i] - s1 - xhat[i] * s2);
                                }
                            } else {
                                for i in off..off + hw {
                                    dx[i] = scale * g[i];
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, sum_dy_xhat.iter().map(|&v| c(v)).collect()));
                }
                if rg(*beta) {
                    out.push((*beta, sum_dy.iter().map(|&v| c(v)).collect()));
                }
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::AvgPool2 { x } => {
                let s = self.nodes[x.0].value.shape();
                let (oh, ow) = (s[2] / 2, s[3] / 2);
                let mut dx = vec![T::zero(); s.iter().product()];
                let q: T = c(0.25);
                for plane in 0..s[0] * s[1] {
                    let src = &g[plane * oh * ow..][..oh * ow];
                    let dst = &mut dx[plane * s[2] * s[3]..][..s[2] * s[3]];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = src[oy * ow + ox] * q;
                            let i = 2 * oy * s[3] + 2 * ox;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + s[3]] = v;
                            dst[i + s[3] + 1] = v;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv: T = c(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                out.push((*x, dx));
            }
            Op::NchwToRows { x } => {
                let s = self.nodes[x.0].value.shape();
                let (b, ch, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for ci in 0..ch {
                        let dst = &mut dx[(bi * ch + ci) * hw..][..hw];
                        for (sp, d) in dst.iter_mut().enumerate() {
                            *d = g[(bi * hw + sp) * ch + ci];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SoftmaxRows { x } => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); g.len()];
                for ((drow, grow), yrow) in dx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                    let inner: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yv * (gv - inner);
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let scale = g[0] / c(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * k + y] -= scale;
                }
                out.push((*logits, dx));
            }
            Op::CondEntropy { z, dlog } => {
                let n = self.nodes[z.0].value.shape()[0];
                let scale = -g[0] / c(n as f64);
                out.push((*z, dlog.iter().map(|&d| d * scale).collect()));
            }
            Op::MarginalEntropy { z, dlog } => {
                let n = self.nodes[z.0].value.shape()[0];
                let scale = -g[0] / c(n as f64);
                let row: Vec<T> = dlog.iter().map(|&d| d * scale).collect();
                let mut dz = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    dz.extend_from_slice(&row);
                }
                out.push((*z, dz));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul { a, b } => {
                out.push((*a, g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect()));
                out.push((*b, g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect()));
            }
            Op::Scale { x, c: f } => {
                out.push((*x, g.iter().map(|&v| v * *f).collect()));
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                out.push((*x, vec![g[0]; n]));
            }
            Op::ConcatCols { parts } => {
                let s = node.value.shape();
                let (rows, total) = if s.len() == 2 { (s[0], s[1]) } else { (1, s[0]) };
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.numel() / rows;
                    if rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for row in g.chunks_exact(total) {
                            d.extend_from_slice(&row[start..start + w]);
                        }
                        out.push((p, d));
                    }
                    start += w;
                }
            }
            Op::SliceCols { .. } => unreachable!("handled in backward"),
        }
        out
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let k = row.len();
    softmax_rows_in_place(row, k);
}

/// Softmax of every length-`k` row of `data`.
pub fn softmax_rows_in_place<T: Scalar>(data: &mut [T], k: usize) {
    for row in data.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v -= m);
    }
    T::exp_in_place(data);
    for row in data.chunks_exact_mut(k) {
        let inv = T::one() / row.iter().copied().sum::<T>();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 0.1]), true);
        let s = tape.softmax_rows(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1000.0, 0.0, 0.0, 0.0]), false);
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        assert_eq!(&v[2..], &[0.5, 0.5]);
    }

    #[test]
    fn leaves_without_grad_receive_none() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.scale(a, 2.0).unwrap();
        assert!(matches!(tape.backward(b), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1], &[f64::MAX]), false);
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 4, 4], 0.5), false);
        let w = tape.leaf(Tensor::full(&[3, 1, 3, 3], 0.1), true);
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let p = tape.avg_pool2(y).unwrap();
        let r = tape.nchw_to_rows(p).unwrap();
        let s = tape.sum(r).unwrap();
        for id in [y, p, r, s] {
            assert!(tape.inputs(id).iter().all(|i| i.index() < id.index()));
        }
    }
}

