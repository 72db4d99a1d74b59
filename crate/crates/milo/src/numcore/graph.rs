//! The tape. Builder methods run forward eagerly and record enough to
//! replay the op in reverse; `backward` walks the tape once from the loss.

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::tensor::Tensor;
use super::{RMS_EPS, ROPE_THETA};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// A single-input op whose forward value was computed by the caller.
/// `backward` must accumulate (`+=`) into `grad_in`.
pub trait CustomOp {
    fn label(&self) -> &'static str;
    fn backward(&self, grad_out: &[f64], input: &[f64], grad_in: &mut [f64]);
}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out = a · bᵀ where `b` is stored row-major as (n, k).
    MatMulTB {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Exp {
        a: NodeId,
    },
    Log {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    /// `outer` lanes of `len` strided elements repeated over `inner`.
    LogSoftmax {
        a: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
        dim: usize,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        rows: usize,
        cols: usize,
        inv_rms: Vec<f64>,
    },
    Silu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    Rope {
        x: NodeId,
        rows: usize,
        seq: usize,
        n_heads: usize,
        head_dim: usize,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        n_heads: usize,
        head_dim: usize,
        /// Saved softmax weights, laid out (batch, head, seq, seq).
        attn: Vec<f64>,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
        rows: usize,
        cols_a: usize,
        cols_b: usize,
    },
    Reshape {
        a: NodeId,
    },
    Custom {
        input: NodeId,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Write-once autodiff tape over dense `f64` buffers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn ensure_finite(op: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// tanh-form GELU.
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if it flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Registers a leaf. Gradients flow to it iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        ensure_finite("input", &t.data)?;
        Ok(self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad))
    }

    /// Registers a constant leaf from raw parts.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        ensure_finite("leaf", &data)?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected 2-d, got {s:?}"),
            }),
        }
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── elementwise and reduction ops ──

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        ensure_finite("add", &data)?;
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        ensure_finite("mul", &data)?;
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        ensure_finite("scale", &data)?;
        let rg = self.needs_grad(&[a]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Scale { a, c }, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        ensure_finite("exp", &data)?;
        let rg = self.needs_grad(&[a]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Exp { a }, rg))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        ensure_finite("log", &data)?;
        let rg = self.needs_grad(&[a]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Log { a }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        ensure_finite("sum", &[total])?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![1], vec![total], Op::Sum { a }, rg))
    }

    // ── matmul ──

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_nn(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut data,
            m,
            ka,
            n,
        );
        ensure_finite("matmul", &data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMul { a, b, m, k: ka, n }, rg))
    }

    /// out = a · bᵀ for `a` of shape (m, k) and `b` of shape (n, k).
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_tb")?;
        let (n, kb) = self.dims2(b, "matmul_tb")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_nt(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut data,
            m,
            ka,
            n,
        );
        ensure_finite("matmul_tb", &data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMulTB { a, b, m, k: ka, n }, rg))
    }

    // ── softmax family ──

    /// Log-softmax along `axis`, stable via max subtraction:
    /// `out = z - max - ln Σ exp(z - max)`.
    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "log_softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.nodes[a.0].data.clone();
        log_softmax_lanes(&mut data, outer, len, inner);
        ensure_finite("log_softmax", &data)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            shape,
            data,
            Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    // ── model building blocks ──

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: vocab,
                });
            }
        }
        let src = &self.nodes[table.0].data;
        let mut data = vec![0.0; ids.len() * dim];
        for (row, &id) in ids.iter().enumerate() {
            let from = id as usize * dim;
            data[row * dim..(row + 1) * dim].copy_from_slice(&src[from..from + dim]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), dim],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// RMS normalization with learned gain:
    /// out[i, j] = x[i, j] * gain[j] / sqrt(mean_j x[i, j]^2 + eps).
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "rms_norm")?;
        if self.nodes[gain.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                detail: format!("gain {:?} for {cols} columns", self.nodes[gain.0].shape),
            });
        }
        let xs = &self.nodes[x.0].data;
        let gs = &self.nodes[gain.0].data;
        let mut data = vec![0.0; rows * cols];
        let mut inv_rms = vec![0.0; rows];
        for i in 0..rows {
            let xr = &xs[i * cols..(i + 1) * cols];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms[i] = r;
            for (j, o) in data[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                *o = xr[j] * r * gs[j];
            }
        }
        ensure_finite("rms_norm", &data)?;
        let rg = self.needs_grad(&[x, gain]);
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::RmsNorm {
                x,
                gain,
                rows,
                cols,
                inv_rms,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        ensure_finite("silu", &data)?;
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Silu { x }, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu(v)).collect();
        ensure_finite("gelu", &data)?;
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Gelu { x }, rg))
    }

    /// Rotary position encoding applied per head to (rows, n_heads*head_dim)
    /// where `rows` is a whole number of sequences of length `seq` and the
    /// position of row `i` is `i % seq`.
    pub fn rope(&mut self, x: NodeId, seq: usize, n_heads: usize) -> Result<NodeId> {
        let (rows, dim) = self.dims2(x, "rope")?;
        if n_heads == 0 || dim % n_heads != 0 || !(dim / n_heads).is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "rope",
                detail: format!("dim {dim} must split into even-sized heads ({n_heads})"),
            });
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                detail: format!("rows {rows} not a multiple of seq {seq}"),
            });
        }
        let head_dim = dim / n_heads;
        let mut data = self.nodes[x.0].data.clone();
        rope_apply(&mut data, rows, seq, n_heads, head_dim, false);
        ensure_finite("rope", &data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            vec![rows, dim],
            data,
            Op::Rope {
                x,
                rows,
                seq,
                n_heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention with a causal mask, all heads fused.
    /// q, k, v have shape (batch*seq, n_heads*head_dim).
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (rows, dim) = self.dims2(q, "causal_attention")?;
        for id in [k, v] {
            if self.nodes[id.0].shape != [rows, dim] {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    detail: "q, k, v must share a shape".into(),
                });
            }
        }
        if rows != batch * seq || n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                detail: format!("rows {rows}, batch {batch}, seq {seq}, heads {n_heads}"),
            });
        }
        let head_dim = dim / n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qs = &self.nodes[q.0].data;
        let ks = &self.nodes[k.0].data;
        let vs = &self.nodes[v.0].data;
        let mut data = vec![0.0; rows * dim];
        let mut attn = vec![0.0; batch * n_heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..n_heads {
                let col = h * head_dim;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * dim + col..][..head_dim];
                    for (j, s) in scores[..=i].iter_mut().enumerate() {
                        let kj = &ks[(b * seq + j) * dim + col..][..head_dim];
                        *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let row = &mut attn[((b * n_heads + h) * seq + i) * seq..][..seq];
                    let m = scores[..=i]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (scores[j] - m).exp();
                        row[j] = e;
                        z += e;
                    }
                    let inv = 1.0 / z;
                    let out = &mut data[(b * seq + i) * dim + col..][..head_dim];
                    for j in 0..=i {
                        let a = row[j] * inv;
                        row[j] = a;
                        let vj = &vs[(b * seq + j) * dim + col..][..head_dim];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        ensure_finite("causal_attention", &data)?;
        let rg = self.needs_grad(&[q, k, v]);
        Ok(self.push(
            vec![rows, dim],
            data,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                n_heads,
                head_dim,
                attn,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims2(a, "concat_cols")?;
        let (rb, cb) = self.dims2(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {ra} vs {rb}"),
            });
        }
        let mut data = vec![0.0; ra * (ca + cb)];
        for i in 0..ra {
            data[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            vec![ra, ca + cb],
            data,
            Op::ConcatCols {
                a,
                b,
                rows: ra,
                cols_a: ca,
                cols_b: cb,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[a.0].shape, shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, rg))
    }

    /// Records a caller-computed op with one differentiable input.
    pub fn custom_unary(
        &mut self,
        input: NodeId,
        shape: &[usize],
        data: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "custom",
                detail: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        ensure_finite(op.label(), &data)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(shape.to_vec(), data, Op::Custom { input, op }, rg))
    }

    // ── backward ──

    /// Seeds `loss` (which must be scalar) with 1.0 and accumulates
    /// gradients for every upstream node that requires them. Resets any
    /// gradients from a previous call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        // Append-only construction means the reverse index order is already
        // topological.
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gout = self.grads[i].take().expect("present by check above");
            self.backward_op(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Takes the gradient buffer for `id` (allocating zeros on first touch),
    /// lets `f` accumulate into it, and puts it back. No-op for nodes that
    /// do not require gradients.
    fn acc_grad(&mut self, id: NodeId, f: impl FnOnce(&Graph, &mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let mut buf = self.grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()]);
        f(self, &mut buf);
        self.grads[id.0] = Some(buf);
    }

    fn backward_op(&mut self, idx: usize, gout: &[f64]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                self.acc_grad(a, |g, buf| {
                    matmul_nt(gout, &g.nodes[b.0].data, buf, m, n, k);
                });
                self.acc_grad(b, |g, buf| {
                    matmul_tn(&g.nodes[a.0].data, gout, buf, m, k, n);
                });
            }
            &Op::MatMulTB { a, b, m, k, n } => {
                self.acc_grad(a, |g, buf| {
                    matmul_nn(gout, &g.nodes[b.0].data, buf, m, n, k);
                });
                self.acc_grad(b, |g, buf| {
                    matmul_tn(gout, &g.nodes[a.0].data, buf, m, n, k);
                });
            }
            &Op::Add { a, b } => {
                self.acc_grad(a, |_, buf| axpy(buf, gout, 1.0));
                self.acc_grad(b, |_, buf| axpy(buf, gout, 1.0));
            }
            &Op::Mul { a, b } => {
                self.acc_grad(a, |g, buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(gout).zip(&g.nodes[b.0].data) {
                        *o += gv * bv;
                    }
                });
                self.acc_grad(b, |g, buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(gout).zip(&g.nodes[a.0].data) {
                        *o += gv * av;
                    }
                });
            }
            &Op::Scale { a, c } => {
                self.acc_grad(a, |_, buf| axpy(buf, gout, c));
            }
            &Op::Exp { a } => {
                self.acc_grad(a, |g, buf| {
                    for ((o, &gv), &ev) in buf.iter_mut().zip(gout).zip(&g.nodes[idx].data) {
                        *o += gv * ev;
                    }
                });
            }
            &Op::Log { a } => {
                self.acc_grad(a, |g, buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(gout).zip(&g.nodes[a.0].data) {
                        *o += gv / xv;
                    }
                });
            }
            &Op::Sum { a } => {
                let g0 = gout[0];
                self.acc_grad(a, |_, buf| {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                });
            }
            &Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            } => {
                self.acc_grad(a, |g, buf| {
                    let out = &g.nodes[idx].data;
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut gsum = 0.0;
                            for t in 0..len {
                                gsum += gout[base + t * inner];
                            }
                            for t in 0..len {
                                let p = out[base + t * inner].exp();
                                buf[base + t * inner] += gout[base + t * inner] - p * gsum;
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, dim, .. } => {
                let (table, dim) = (*table, *dim);
                self.acc_grad(table, |g, buf| {
                    let ids = match &g.nodes[idx].op {
                        Op::Embedding { ids, .. } => ids,
                        _ => unreachable!(),
                    };
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * dim..(id as usize + 1) * dim];
                        for (o, &gv) in dst.iter_mut().zip(&gout[row * dim..(row + 1) * dim]) {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::RmsNorm {
                x,
                gain,
                rows,
                cols,
                ..
            } => {
                self.acc_grad(x, |g, buf| {
                    let inv_rms = match &g.nodes[idx].op {
                        Op::RmsNorm { inv_rms, .. } => inv_rms,
                        _ => unreachable!(),
                    };
                    let xs = &g.nodes[x.0].data;
                    let gs = &g.nodes[gain.0].data;
                    for i in 0..rows {
                        let r = inv_rms[i];
                        let xr = &xs[i * cols..(i + 1) * cols];
                        let gr = &gout[i * cols..(i + 1) * cols];
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += gr[j] * gs[j] * xr[j];
                        }
                        let c = r * r * r / cols as f64 * dot;
                        for (j, o) in buf[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                            *o += r * gr[j] * gs[j] - c * xr[j];
                        }
                    }
                });
                self.acc_grad(gain, |g, buf| {
                    let inv_rms = match &g.nodes[idx].op {
                        Op::RmsNorm { inv_rms, .. } => inv_rms,
                        _ => unreachable!(),
                    };
                    let xs = &g.nodes[x.0].data;
                    for i in 0..rows {
                        let r = inv_rms[i];
                        let xr = &xs[i * cols..(i + 1) * cols];
                        let gr = &gout[i * cols..(i + 1) * cols];
                        for (j, o) in buf.iter_mut().enumerate() {
                            *o += gr[j] * xr[j] * r;
                        }
                    }
                });
            }
            &Op::Silu { x } => {
                self.acc_grad(x, |g, buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(gout).zip(&g.nodes[x.0].data) {
                        let s = sigmoid(xv);
                        *o += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            &Op::Gelu { x } => {
                self.acc_grad(x, |g, buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(gout).zip(&g.nodes[x.0].data) {
                        *o += gv * gelu_grad(xv);
                    }
                });
            }
            &Op::Rope {
                x,
                rows,
                seq,
                n_heads,
                head_dim,
            } => {
                self.acc_grad(x, |_, buf| {
                    // The rotation is orthogonal: the adjoint rotates by -angle.
                    let mut g = gout.to_vec();
                    rope_apply(&mut g, rows, seq, n_heads, head_dim, true);
                    axpy(buf, &g, 1.0);
                });
            }
            &Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                n_heads,
                head_dim,
                ..
            } => {
                let dim = n_heads * head_dim;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let mut dq = vec![0.0; batch * seq * dim];
                let mut dk = vec![0.0; batch * seq * dim];
                let mut dv = vec![0.0; batch * seq * dim];
                {
                    let attn = match &self.nodes[idx].op {
                        Op::CausalAttention { attn, .. } => attn,
                        _ => unreachable!(),
                    };
                    let qs = &self.nodes[q.0].data;
                    let ks = &self.nodes[k.0].data;
                    let vs = &self.nodes[v.0].data;
                    let mut da = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..n_heads {
                            let col = h * head_dim;
                            for i in 0..seq {
                                let row = &attn[((b * n_heads + h) * seq + i) * seq..][..seq];
                                let go = &gout[(b * seq + i) * dim + col..][..head_dim];
                                // dA_ij = dOut_i · v_j ; dV_j += A_ij dOut_i
                                let mut da_dot_a = 0.0;
                                for j in 0..=i {
                                    let vj = &vs[(b * seq + j) * dim + col..][..head_dim];
                                    let mut d = 0.0;
                                    for (gg, vv) in go.iter().zip(vj) {
                                        d += gg * vv;
                                    }
                                    da[j] = d;
                                    da_dot_a += d * row[j];
                                    let dvj = &mut dv[(b * seq + j) * dim + col..][..head_dim];
                                    for (o, &gg) in dvj.iter_mut().zip(go) {
                                        *o += row[j] * gg;
                                    }
                                }
                                // Softmax backward, then scatter into dQ/dK.
                                let qi = &qs[(b * seq + i) * dim + col..][..head_dim];
                                let qbase = (b * seq + i) * dim + col;
                                for j in 0..=i {
                                    let ds = row[j] * (da[j] - da_dot_a) * scale;
                                    let kj = &ks[(b * seq + j) * dim + col..][..head_dim];
                                    for (o, &kv) in dq[qbase..qbase + head_dim].iter_mut().zip(kj) {
                                        *o += ds * kv;
                                    }
                                    let dkj = &mut dk[(b * seq + j) * dim + col..][..head_dim];
                                    for (o, &qv) in dkj.iter_mut().zip(qi) {
                                        *o += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc_grad(q, |_, buf| axpy(buf, &dq, 1.0));
                self.acc_grad(k, |_, buf| axpy(buf, &dk, 1.0));
                self.acc_grad(v, |_, buf| axpy(buf, &dv, 1.0));
            }
            &Op::ConcatCols {
                a,
                b,
                rows,
                cols_a,
                cols_b,
            } => {
                let cols = cols_a + cols_b;
                self.acc_grad(a, |_, buf| {
                    for i in 0..rows {
                        for (o, &gv) in buf[i * cols_a..(i + 1) * cols_a]
                            .iter_mut()
                            .zip(&gout[i * cols..i * cols + cols_a])
                        {
                            *o += gv;
                        }
                    }
                });
                self.acc_grad(b, |_, buf| {
                    for i in 0..rows {
                        for (o, &gv) in buf[i * cols_b..(i + 1) * cols_b]
                            .iter_mut()
                            .zip(&gout[i * cols + cols_a..(i + 1) * cols])
                        {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::Reshape { a } => {
                self.acc_grad(a, |_, buf| axpy(buf, gout, 1.0));
            }
            Op::Custom { input, .. } => {
                let input = *input;
                if self.nodes[input.0].requires_grad {
                    let mut buf = self.grads[input.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[input.0].data.len()]);
                    if let Op::Custom { op, .. } = &self.nodes[idx].op {
                        op.backward(gout, &self.nodes[input.0].data, &mut buf);
                    }
                    self.grads[input.0] = Some(buf);
                }
            }
        }
    }
}

fn axpy(out: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// In-place log-softmax over `outer` lane groups of `len` elements with
/// stride `inner`.
fn log_softmax_lanes(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for t in 0..len {
                m = m.max(data[base + t * inner]);
            }
            let mut z = 0.0;
            for t in 0..len {
                z += (data[base + t * inner] - m).exp();
            }
            let lse = m + z.ln();
            for t in 0..len {
                data[base + t * inner] -= lse;
            }
        }
    }
}

/// Applies (or, with `inverse`, un-applies) the rotary rotation in place.
fn rope_apply(
    data: &mut [f64],
    rows: usize,
    seq: usize,
    n_heads: usize,
    head_dim: usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    let dim = n_heads * head_dim;
    // cos/sin per (position, frequency), shared across heads.
    let mut table = vec![(0.0, 0.0); seq * half];
    for pos in 0..seq {
        for p in 0..half {
            let freq = ROPE_THETA.powf(-2.0 * p as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            table[pos * half + p] = angle.sin_cos();
        }
    }
    for row in 0..rows {
        let pos = row % seq;
        for h in 0..n_heads {
            let base = row * dim + h * head_dim;
            for p in 0..half {
                let (mut sin, cos) = table[pos * half + p];
                if inverse {
                    sin = -sin;
                }
                let (x0, x1) = (data[base + 2 * p], data[base + 2 * p + 1]);
                data[base + 2 * p] = x0 * cos - x1 * sin;
                data[base + 2 * p + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}
