//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the sensitivities of that scalar with respect to every node that needs one.
//! Parameters are borrowed from a [`ParamStore`], so building a tape never
//! copies weights.

use alloc::borrow::Cow;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub t_in: usize,
    pub cin: usize,
}

impl ConvGeom {
    pub fn pad_left(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn t_out(&self) -> usize {
        output_frames(self.t_in, self.stride)
    }
}

/// Frame count after a same-padded convolution with the given stride.
pub fn output_frames(t_in: usize, stride: usize) -> usize {
    if t_in == 0 {
        0
    } else {
        (t_in - 1) / stride + 1
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance of the normalised frames.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Glu(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Box<Tensor>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Box<Tensor>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    AvgPoolRows {
        x: Var,
        chunk: usize,
    },
    BroadcastRows(Var),
    Reshape(Var),
    SqrtClamp {
        x: Var,
        eps: f64,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    L2NormCols {
        x: Var,
        norms: Vec<f64>,
    },
    AamLogits {
        cos: Var,
        labels: Vec<Option<usize>>,
        margin: f64,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Box<Tensor>,
        count: usize,
    },
    Grl {
        x: Var,
        scale: f64,
    },
    GroupSoftmaxSum {
        x: Var,
        k: usize,
        inv_gamma: f64,
        weights: Box<Tensor>,
    },
    ScaleShiftTarget {
        x: Var,
        scale: f64,
    },
    RelBias {
        scores: Var,
        table: Var,
        max_rel: usize,
    },
    OuterRows(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `cos(acos(c) + m)`, with `c` clamped to `[-1, 1]`.
#[inline]
pub fn cos_plus_margin(c: f64, margin: f64) -> f64 {
    let c = c.clamp(-1.0, 1.0);
    let sin_theta = libm::sqrt((1.0 - c * c).max(0.0));
    c * libm::cos(margin) - sin_theta * libm::sin(margin)
}

#[inline]
fn d_cos_plus_margin(c: f64, margin: f64) -> f64 {
    let c = c.clamp(-1.0, 1.0);
    let sin_theta = libm::sqrt((1.0 - c * c).max(1e-12));
    libm::cos(margin) + libm::sin(margin) * c / sin_theta
}

fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul(self.value(b));
        self.push(y, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul_nt(self.value(b));
        self.push(y, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols()), rv.shape(), "add_row shape");
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (a, b) in y.row_mut(r).iter_mut().zip(rv.data()) {
                *a += b;
            }
        }
        self.push(y, Op::AddRow(x, row), &[x, row])
    }

    /// Scales column `j` of `x` by `row[j]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols()), rv.shape(), "mul_row shape");
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (a, b) in y.row_mut(r).iter_mut().zip(rv.data()) {
                *a *= b;
            }
        }
        self.push(y, Op::MulRow(x, row), &[x, row])
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!((xv.rows(), 1), cv.shape(), "mul_col shape");
        let mut y = xv.clone();
        for r in 0..y.rows() {
            let k = cv.data()[r];
            y.row_mut(r).iter_mut().for_each(|a| *a *= k);
        }
        self.push(y, Op::MulCol(x, col), &[x, col])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, k), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(libm::tanh);
        self.push(y, Op::Tanh(x), &[x])
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    /// Gated linear unit over the column halves: `a ⊙ sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.cols() % 2 == 0, "glu needs an even width");
        let h = xv.cols() / 2;
        let mut y = Tensor::zeros(xv.rows(), h);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            for (c, out) in y.row_mut(r).iter_mut().enumerate() {
                *out = row[c] * sigmoid(row[c + h]);
            }
        }
        self.push(y, Op::Glu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for r in 0..y.rows() {
            softmax_in_place(y.row_mut(r));
        }
        self.push(y, Op::SoftmaxRows(x), &[x])
    }

    /// Softmax down each column (over frames).
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let mut yt = self.value(x).transpose();
        for r in 0..yt.rows() {
            softmax_in_place(yt.row_mut(r));
        }
        self.push(yt.transpose(), Op::SoftmaxCols(x), &[x])
    }

    /// Per-row normalisation over channels with affine `gamma`, `beta` (`1 × C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in y.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Box::new(xhat),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-channel normalisation over frames.
    ///
    /// With `running = None` the frame statistics are used (training mode) and
    /// an update for the running buffers is queued; otherwise the supplied
    /// `(mean, var)` buffers are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        buffers: (ParamId, ParamId),
        running: Option<(&Tensor, &Tensor)>,
    ) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.data().to_vec(), v.data().to_vec(), false),
            None => {
                let mean = xv
                    .col_sums()
                    .into_vec()
                    .into_iter()
                    .map(|s| s / rows as f64)
                    .collect::<Vec<_>>();
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for ((acc, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *acc += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for (c, (o, v)) in xhat.row_mut(r).iter_mut().zip(xv.row(r)).enumerate() {
                *o = (v - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in y.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        if batch_stats {
            let unbiased = if rows > 1 {
                rows as f64 / (rows - 1) as f64
            } else {
                1.0
            };
            self.bn_updates.push(BnUpdate {
                mean_id: buffers.0,
                var_id: buffers.1,
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Box::new(xhat),
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Unfolds `x` (`T × C`) into `T' × (k·C)` patches; multiply by a
    /// `(k·C) × C_out` kernel to get a convolution.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, dilation: usize) -> Var {
        let xv = self.value(x);
        let geom = ConvGeom {
            kernel,
            stride,
            dilation,
            t_in: xv.rows(),
            cin: xv.cols(),
        };
        let (t_out, pad) = (geom.t_out(), geom.pad_left() as isize);
        let cin = geom.cin;
        let mut y = Tensor::zeros(t_out, kernel * cin);
        for t in 0..t_out {
            let row = y.row_mut(t);
            for j in 0..kernel {
                let src = (t * stride + j * dilation) as isize - pad;
                if src >= 0 && (src as usize) < geom.t_in {
                    row[j * cin..(j + 1) * cin].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push(y, Op::Im2Col { x, geom }, &[x])
    }

    /// Same-padded depthwise convolution, stride 1; `w` is `k × C`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.cols(), "depthwise channel count");
        let (t_len, k) = (xv.rows(), wv.rows());
        let pad = ((k - 1) / 2) as isize;
        let mut y = Tensor::zeros(t_len, xv.cols());
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - pad;
                if src < 0 || src as usize >= t_len {
                    continue;
                }
                let (xr, wr) = (xv.row(src as usize), wv.row(j));
                for ((o, a), b) in y.row_mut(t).iter_mut().zip(xr).zip(wr) {
                    *o += a * b;
                }
            }
        }
        self.push(y, Op::Depthwise { x, w }, &[x, w])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut y = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            y.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(y, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                y.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(y, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut y = Tensor::zeros(idx.len(), xv.cols());
        for (o, &i) in idx.iter().enumerate() {
            y.row_mut(o).copy_from_slice(xv.row(i));
        }
        self.push(
            y,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let y = self.value(x).transpose();
        self.push(y, Op::Transpose(x), &[x])
    }

    /// Mean over rows, `1 × C`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut y = xv.col_sums();
        y.scale_in_place(1.0 / xv.rows() as f64);
        self.push(y, Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor::full(1, 1, self.value(x).sum());
        self.push(y, Op::SumAll(x), &[x])
    }

    /// Averages contiguous chunks of `chunk` rows; a trailing partial chunk is
    /// averaged over its own length.
    pub fn avg_pool_rows(&mut self, x: Var, chunk: usize) -> Var {
        let xv = self.value(x);
        let n = xv.rows().div_ceil(chunk);
        let mut y = Tensor::zeros(n, xv.cols());
        for o in 0..n {
            let (lo, hi) = (o * chunk, ((o + 1) * chunk).min(xv.rows()));
            let inv = 1.0 / (hi - lo) as f64;
            for r in lo..hi {
                for (a, b) in y.row_mut(o).iter_mut().zip(xv.row(r)) {
                    *a += b * inv;
                }
            }
        }
        self.push(y, Op::AvgPoolRows { x, chunk }, &[x])
    }

    /// Repeats a `1 × C` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "broadcast_rows needs a single row");
        let mut y = Tensor::zeros(n, xv.cols());
        for r in 0..n {
            y.row_mut(r).copy_from_slice(xv.data());
        }
        self.push(y, Op::BroadcastRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let y = self.value(x).clone().reshape(rows, cols);
        self.push(y, Op::Reshape(x), &[x])
    }

    /// `sqrt(max(x, eps))`
    pub fn sqrt_clamp(&mut self, x: Var, eps: f64) -> Var {
        let y = self.value(x).map(|v| libm::sqrt(v.max(eps)));
        self.push(y, Op::SqrtClamp { x, eps }, &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = libm::sqrt(xv.row(r).iter().map(|v| v * v).sum::<f64>());
            if !(n > 1e-12) {
                return Err(Error::DegenerateEmbedding);
            }
            y.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(y, Op::L2NormRows { x, norms }, &[x]))
    }

    pub fn l2_normalize_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut norms = vec![0.0; xv.cols()];
        for r in 0..xv.rows() {
            for (n, v) in norms.iter_mut().zip(xv.row(r)) {
                *n += v * v;
            }
        }
        for n in norms.iter_mut() {
            *n = libm::sqrt(*n);
            if !(*n > 1e-12) {
                return Err(Error::DegenerateEmbedding);
            }
        }
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (v, n) in y.row_mut(r).iter_mut().zip(&norms) {
                *v /= n;
            }
        }
        Ok(self.push(y, Op::L2NormCols { x, norms }, &[x]))
    }

    /// Additive-angular-margin logits from cosines: `s·cos(θ_y + m)` at each
    /// row's label, `s·cos θ_j` elsewhere. Unlabelled rows get no margin.
    pub fn aam_logits(
        &mut self,
        cos: Var,
        labels: &[Option<usize>],
        margin: f64,
        scale: f64,
    ) -> Var {
        let cv = self.value(cos);
        assert_eq!(cv.rows(), labels.len(), "one label slot per row");
        let mut y = cv.map(|c| c * scale);
        for (r, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                y.set(r, l, scale * cos_plus_margin(cv.get(r, l), margin));
            }
        }
        self.push(
            y,
            Op::AamLogits {
                cos,
                labels: labels.to_vec(),
                margin,
                scale,
            },
            &[cos],
        )
    }

    /// Mean softmax cross-entropy over the labelled rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label slot per row");
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::NoSupervisedFrames);
        }
        let classes = lv.cols();
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, l) in labels.iter().enumerate() {
            let Some(l) = *l else { continue };
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            total += lse - row[l];
            softmax_in_place(probs.row_mut(r));
        }
        let y = Tensor::full(1, 1, total / count as f64);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Box::new(probs),
                count,
            },
            &[logits],
        ))
    }

    /// Identity forward; the backward sensitivity is multiplied by `-scale`.
    pub fn gradient_reversal(&mut self, x: Var, scale: f64) -> Var {
        let y = self.value(x).clone();
        self.push(y, Op::Grl { x, scale }, &[x])
    }

    /// For each group of `k` adjacent columns, the softmax(`x / γ`)-weighted sum of the group.
    pub fn group_softmax_sum(&mut self, x: Var, k: usize, gamma: f64) -> Var {
        let xv = self.value(x);
        assert!(
            k >= 1 && xv.cols() % k == 0,
            "width must be a multiple of k"
        );
        let groups = xv.cols() / k;
        let inv_gamma = 1.0 / gamma;
        let mut weights = xv.map(|v| v * inv_gamma);
        let mut y = Tensor::zeros(xv.rows(), groups);
        for r in 0..xv.rows() {
            for g in 0..groups {
                let w = &mut weights.row_mut(r)[g * k..(g + 1) * k];
                softmax_in_place(w);
                let s: f64 = w
                    .iter()
                    .zip(&xv.row(r)[g * k..(g + 1) * k])
                    .map(|(a, b)| a * b)
                    .sum();
                y.set(r, g, s);
            }
        }
        self.push(
            y,
            Op::GroupSoftmaxSum {
                x,
                k,
                inv_gamma,
                weights: Box::new(weights),
            },
            &[x],
        )
    }

    /// `scale · (x − shift·onehot(label))` per row.
    pub fn scale_shift_target(
        &mut self,
        x: Var,
        labels: &[Option<usize>],
        scale: f64,
        shift: f64,
    ) -> Var {
        let mut y = self.value(x).map(|v| v * scale);
        for (r, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                let v = y.get(r, l);
                y.set(r, l, v - scale * shift);
            }
        }
        self.push(y, Op::ScaleShiftTarget { x, scale }, &[x])
    }

    /// Adds a learned bias indexed by the clipped offset `j − i` to attention scores.
    pub fn rel_bias(&mut self, scores: Var, table: Var, max_rel: usize) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.len(), 2 * max_rel + 1, "relative bias table size");
        let mut y = self.value(scores).clone();
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                let off = (j as isize - i as isize).clamp(-(max_rel as isize), max_rel as isize);
                let v = y.get(i, j) + tv.data()[(off + max_rel as isize) as usize];
                y.set(i, j, v);
            }
        }
        self.push(
            y,
            Op::RelBias {
                scores,
                table,
                max_rel,
            },
            &[scores, table],
        )
    }

    /// Row `i·n_b + j` of the result is `a_i ⊙ b_j`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "outer_rows width");
        let mut y = Tensor::zeros(av.rows() * bv.rows(), av.cols());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let out = y.row_mut(i * bv.rows() + j);
                for ((o, x), z) in out.iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                    *o = x * z;
                }
            }
        }
        self.push(y, Op::OuterRows(a, b), &[a, b])
    }

    /// Sensitivities of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.matmul_nt(self.value(b)));
                }
                if self.needs(b) {
                    acc(grads, b, self.value(a).matmul_tn(g));
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.matmul(self.value(b)));
                }
                if self.needs(b) {
                    acc(grads, b, g.matmul_tn(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.clone());
                }
                if self.needs(b) {
                    acc(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.clone());
                }
                if self.needs(b) {
                    acc(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.needs(b) {
                    acc(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(x, row) => {
                if self.needs(x) {
                    acc(grads, x, g.clone());
                }
                if self.needs(row) {
                    acc(grads, row, g.col_sums());
                }
            }
            &Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(x), self.value(row));
                if self.needs(x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(rv.data()) {
                            *a *= b;
                        }
                    }
                    acc(grads, x, gx);
                }
                if self.needs(row) {
                    acc(grads, row, g.zip_map(xv, |a, b| a * b).col_sums());
                }
            }
            &Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(x), self.value(col));
                if self.needs(x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let k = cv.data()[r];
                        gx.row_mut(r).iter_mut().for_each(|a| *a *= k);
                    }
                    acc(grads, x, gx);
                }
                if self.needs(col) {
                    let gc = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(grads, col, Tensor::from_vec(g.rows(), 1, gc));
                }
            }
            &Op::Scale(x, k) => acc(grads, x, g.map(|v| v * k)),
            &Op::Relu(x) => acc(
                grads,
                x,
                g.zip_map(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 }),
            ),
            &Op::Sigmoid(x) => acc(grads, x, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            &Op::Tanh(x) => acc(grads, x, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            &Op::Silu(x) => {
                let gx = g.zip_map(self.value(x), |gv, v| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (1.0 - s))
                });
                acc(grads, x, gx);
            }
            &Op::Glu(x) => {
                let xv = self.value(x);
                let h = xv.cols() / 2;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let out = gx.row_mut(r);
                    for c in 0..h {
                        let s = sigmoid(row[c + h]);
                        out[c] = gr[c] * s;
                        out[c + h] = gr[c] * row[c] * s * (1.0 - s);
                    }
                }
                acc(grads, x, gx);
            }
            &Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, a), b) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = a * (b - dot);
                    }
                }
                acc(grads, x, gx);
            }
            &Op::SoftmaxCols(x) => {
                let mut dots = vec![0.0; y.cols()];
                for r in 0..y.rows() {
                    for ((d, a), b) in dots.iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d += a * b;
                    }
                }
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dots[c]);
                    }
                }
                acc(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let (xh, gr) = (xhat.row(r), g.row(r));
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv.data()[c];
                            sum += d;
                            sum_x += d * xh[c];
                        }
                        let n = cols as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            let d = gr[c] * gv.data()[c];
                            *o = inv_std[r] * (d - sum / n - xh[c] * sum_x / n);
                        }
                    }
                    acc(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, g.zip_map(xhat, |a, b| a * b).col_sums());
                }
                if self.needs(*beta) {
                    acc(grads, *beta, g.col_sums());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    if *batch_stats {
                        let mut sum = vec![0.0; cols];
                        let mut sum_x = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let d = g.get(r, c) * gv.data()[c];
                                sum[c] += d;
                                sum_x[c] += d * xhat.get(r, c);
                            }
                        }
                        let n = rows as f64;
                        for r in 0..rows {
                            for c in 0..cols {
                                let d = g.get(r, c) * gv.data()[c];
                                gx.set(
                                    r,
                                    c,
                                    inv_std[c] * (d - sum[c] / n - xhat.get(r, c) * sum_x[c] / n),
                                );
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                gx.set(r, c, g.get(r, c) * gv.data()[c] * inv_std[c]);
                            }
                        }
                    }
                    acc(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, g.zip_map(xhat, |a, b| a * b).col_sums());
                }
                if self.needs(*beta) {
                    acc(grads, *beta, g.col_sums());
                }
            }
            &Op::Im2Col { x, geom } => {
                let mut gx = Tensor::zeros(geom.t_in, geom.cin);
                let pad = geom.pad_left() as isize;
                let cin = geom.cin;
                for t in 0..geom.t_out() {
                    let row = g.row(t);
                    for j in 0..geom.kernel {
                        let src = (t * geom.stride + j * geom.dilation) as isize - pad;
                        if src >= 0 && (src as usize) < geom.t_in {
                            for (o, v) in gx
                                .row_mut(src as usize)
                                .iter_mut()
                                .zip(&row[j * cin..(j + 1) * cin])
                            {
                                *o += v;
                            }
                        }
                    }
                }
                acc(grads, x, gx);
            }
            &Op::Depthwise { x, w } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (t_len, k) = (xv.rows(), wv.rows());
                let pad = ((k - 1) / 2) as isize;
                let mut gx = Tensor::zeros(t_len, xv.cols());
                let mut gw = Tensor::zeros(k, xv.cols());
                for t in 0..t_len {
                    let gr = g.row(t);
                    for j in 0..k {
                        let src = t as isize + j as isize - pad;
                        if src < 0 || src as usize >= t_len {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..xv.cols() {
                            gx.data_mut()[src * xv.cols() + c] += gr[c] * wv.get(j, c);
                            gw.data_mut()[j * xv.cols() + c] += gr[c] * xv.get(src, c);
                        }
                    }
                }
                if self.needs(x) {
                    acc(grads, x, gx);
                }
                if self.needs(w) {
                    acc(grads, w, gw);
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (a, b) in gx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                acc(grads, *x, gx);
            }
            &Op::Transpose(x) => acc(grads, x, g.transpose()),
            &Op::MeanRows(x) => {
                let rows = self.value(x).rows();
                let mut gx = Tensor::zeros(rows, g.cols());
                for r in 0..rows {
                    for (a, b) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *a = b / rows as f64;
                    }
                }
                acc(grads, x, gx);
            }
            &Op::SumAll(x) => {
                let (r, c) = self.value(x).shape();
                acc(grads, x, Tensor::full(r, c, g.data()[0]));
            }
            &Op::AvgPoolRows { x, chunk } => {
                let xv = self.value(x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for o in 0..g.rows() {
                    let (lo, hi) = (o * chunk, ((o + 1) * chunk).min(xv.rows()));
                    let inv = 1.0 / (hi - lo) as f64;
                    for r in lo..hi {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a += b * inv;
                        }
                    }
                }
                acc(grads, x, gx);
            }
            &Op::BroadcastRows(x) => acc(grads, x, g.col_sums()),
            &Op::Reshape(x) => {
                let (r, c) = self.value(x).shape();
                acc(grads, x, g.clone().reshape(r, c));
            }
            &Op::SqrtClamp { x, eps } => {
                let gx = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .zip(y.data())
                        .map(|((gv, xv), yv)| if *xv > eps { gv / (2.0 * yv) } else { 0.0 })
                        .collect(),
                );
                acc(grads, x, gx);
            }
            Op::L2NormRows { x, norms } => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, a), b) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (b - a * dot) / norms[r];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::L2NormCols { x, norms } => {
                let mut dots = vec![0.0; y.cols()];
                for r in 0..y.rows() {
                    for ((d, a), b) in dots.iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d += a * b;
                    }
                }
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * dots[c]) / norms[c];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::AamLogits {
                cos,
                labels,
                margin,
                scale,
            } => {
                let cv = self.value(*cos);
                let mut gx = g.map(|v| v * scale);
                for (r, l) in labels.iter().enumerate() {
                    if let Some(l) = *l {
                        gx.set(
                            r,
                            l,
                            g.get(r, l) * scale * d_cos_plus_margin(cv.get(r, l), *margin),
                        );
                    }
                }
                acc(grads, *cos, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let k = g.data()[0] / *count as f64;
                let mut gx = Tensor::zeros(probs.rows(), probs.cols());
                for (r, l) in labels.iter().enumerate() {
                    let Some(l) = *l else { continue };
                    for (o, p) in gx.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = k * p;
                    }
                    let v = gx.get(r, l);
                    gx.set(r, l, v - k);
                }
                acc(grads, *logits, gx);
            }
            &Op::Grl { x, scale } => acc(grads, x, g.map(|v| -scale * v)),
            Op::GroupSoftmaxSum {
                x,
                k,
                inv_gamma,
                weights,
            } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for grp in 0..y.cols() {
                        let gy = g.get(r, grp);
                        let s = y.get(r, grp);
                        for j in grp * k..(grp + 1) * k {
                            let w = weights.get(r, j);
                            gx.set(r, j, gy * (w + inv_gamma * w * (xv.get(r, j) - s)));
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            &Op::ScaleShiftTarget { x, scale } => acc(grads, x, g.map(|v| v * scale)),
            &Op::RelBias {
                scores,
                table,
                max_rel,
            } => {
                if self.needs(scores) {
                    acc(grads, scores, g.clone());
                }
                if self.needs(table) {
                    let mut gt = Tensor::zeros(1, 2 * max_rel + 1);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let off = (j as isize - i as isize)
                                .clamp(-(max_rel as isize), max_rel as isize);
                            gt.data_mut()[(off + max_rel as isize) as usize] += g.get(i, j);
                        }
                    }
                    acc(grads, table, gt);
                }
            }
            &Op::OuterRows(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let gr = g.row(i * bv.rows() + j);
                        for c in 0..av.cols() {
                            ga.data_mut()[i * av.cols() + c] += gr[c] * bv.get(j, c);
                            gb.data_mut()[j * bv.cols() + c] += gr[c] * av.get(i, c);
                        }
                    }
                }
                if self.needs(a) {
                    acc(grads, a, ga);
                }
                if self.needs(b) {
                    acc(grads, b, gb);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradients for every parameter of `store`, zero where a parameter did not
    /// influence the loss.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = store.get(id).shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect()
    }
}
