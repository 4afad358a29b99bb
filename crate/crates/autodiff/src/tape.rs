use crate::{Result, Tensor, TensorError};

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Recorded operation. Input fields are node indices on the same tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a flattened to [rows, k] times b [k, n].
    Matmul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    /// a [m, k] times b [n, k] transposed.
    MatmulNt {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SoftmaxLast {
        x: usize,
        row: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dim: usize,
        /// per-row (mean, 1/sqrt(var+eps)) saved from the forward pass
        row_stats: Vec<(f64, f64)>,
    },
    Gelu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    ScaleT {
        x: usize,
        s: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        lo: usize,
        hi: usize,
    },
    Reshape {
        x: usize,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    SumAll {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Append-only record of operations; backward walks it in strict reverse
/// order, accumulating gradient contributions additively.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

/// out[i, j] += sum_k a[i, k] * b[k, j], row-major, out pre-zeroed region.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[i, j] += dot(a[i, :], b[j, :]) with a [m, k], b [n, k].
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k, j] += sum_i a[i, k] * b[i, j] with a [m, k], b [m, n].
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_forward(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op
        );
        let id = self.nodes.len();
        let t = Tensor {
            shape: shape.clone(),
            data: data.clone(),
            grad: None,
            tape_id: Some(id),
        };
        self.nodes.push(Node { op, shape, data });
        t
    }

    fn id_of(&self, t: &Tensor) -> Result<usize> {
        match t.tape_id {
            Some(id) if id < self.nodes.len() => Ok(id),
            _ => Err(TensorError::NotOnTape),
        }
    }

    /// Record a tensor as a leaf (input / parameter) on this tape.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone())
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = (self.id_of(a)?, self.id_of(b)?);
        if a.rank() < 2 || b.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let k = a.shape[a.rank() - 1];
        if b.shape[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let n = b.shape[1];
        let rows = a.numel() / k;
        let mut out = vec![0.0; rows * n];
        matmul_acc(&a.data, &b.data, rows, k, n, &mut out);
        let mut shape = a.shape[..a.rank() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Op::Matmul { a: aid, b: bid, rows, k, n }, shape, out))
    }

    /// a [m, k] times transpose of b [n, k], yielding [m, n].
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = (self.id_of(a)?, self.id_of(b)?);
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&a.data, &b.data, m, k, n, &mut out);
        Ok(self.push(Op::MatmulNt { a: aid, b: bid, m, k, n }, vec![m, n], out))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_last(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        let row = *x.shape.last().ok_or(TensorError::Dimension {
            op: "softmax_last",
            msg: "rank-0 tensor".into(),
        })?;
        if row == 0 {
            return Err(TensorError::Dimension {
                op: "softmax_last",
                msg: "empty last dimension".into(),
            });
        }
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data.chunks(row).zip(out.chunks_mut(row)) {
            let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in or.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxLast { x: xid, row }, x.shape.clone(), out))
    }

    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (xid, gid, bid) = (self.id_of(x)?, self.id_of(gamma)?, self.id_of(beta)?);
        let dim = *x.shape.last().ok_or(TensorError::Dimension {
            op: "layer_norm",
            msg: "rank-0 tensor".into(),
        })?;
        if gamma.numel() != dim || beta.numel() != dim {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let rows = x.numel() / dim;
        let mut out = vec![0.0; x.numel()];
        let mut row_stats = Vec::with_capacity(rows);
        for (xr, or) in x.data.chunks(dim).zip(out.chunks_mut(dim)) {
            let mean = xr.iter().sum::<f64>() / dim as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            row_stats.push((mean, inv_std));
            for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
                *o = gamma.data[j] * (v - mean) * inv_std + beta.data[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { x: xid, gamma: gid, beta: bid, dim, row_stats },
            x.shape.clone(),
            out,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        let out = x.data.iter().map(|&v| gelu_forward(v)).collect();
        Ok(self.push(Op::Gelu { x: xid }, x.shape.clone(), out))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = (self.id_of(a)?, self.id_of(b)?);
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Op::Add { a: aid, b: bid }, a.shape.clone(), out))
    }

    /// Add a length-d bias vector to every last-dimension row of x.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (xid, bid) = (self.id_of(x)?, self.id_of(b)?);
        let dim = *x.shape.last().unwrap_or(&0);
        if b.numel() != dim || dim == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = x.data.clone();
        for row in out.chunks_mut(dim) {
            for (o, &bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias { x: xid, b: bid }, x.shape.clone(), out))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        let out = x.data.iter().map(|&v| v * c).collect();
        Ok(self.push(Op::Scale { x: xid, c }, x.shape.clone(), out))
    }

    /// Multiply x elementwise by a single-element tensor s; gradient flows
    /// to both operands.
    pub fn scale_t(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (xid, sid) = (self.id_of(x)?, self.id_of(s)?);
        if s.numel() != 1 {
            return Err(TensorError::Dimension {
                op: "scale_t",
                msg: format!("scale tensor must have one element, got shape {:?}", s.shape),
            });
        }
        let sv = s.data[0];
        let out = x.data.iter().map(|&v| v * sv).collect();
        Ok(self.push(Op::ScaleT { x: xid, s: sid }, x.shape.clone(), out))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Dimension {
                op: "concat",
                msg: "no tensors to concatenate".into(),
            });
        }
        let first = parts[0];
        if axis >= first.rank() {
            return Err(TensorError::Dimension {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, first.rank()),
            });
        }
        let mut ids = Vec::with_capacity(parts.len());
        let mut total_extent = 0;
        for p in parts {
            ids.push(self.id_of(p)?);
            let mut want = first.shape.clone();
            want[axis] = p.shape.get(axis).copied().unwrap_or(0);
            if p.shape != want {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total_extent += p.shape[axis];
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_extent;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut out = vec![0.0; outer * total_extent * inner];
        for o in 0..outer {
            let mut off = 0;
            for p in parts {
                let e = p.shape[axis];
                let src = &p.data[o * e * inner..(o + 1) * e * inner];
                let dst_start = (o * total_extent + off) * inner;
                out[dst_start..dst_start + e * inner].copy_from_slice(src);
                off += e;
            }
        }
        Ok(self.push(Op::Concat { parts: ids, axis }, shape, out))
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, lo: usize, hi: usize) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        if axis >= x.rank() {
            return Err(TensorError::Dimension {
                op: "slice",
                msg: format!("axis {} out of range for rank {}", axis, x.rank()),
            });
        }
        let extent = x.shape[axis];
        if lo > hi || hi > extent {
            return Err(TensorError::SliceBounds { axis, lo, hi, extent });
        }
        let (outer, _, inner) = outer_inner(&x.shape, axis);
        let e = hi - lo;
        let mut out = vec![0.0; outer * e * inner];
        for o in 0..outer {
            let src_start = (o * extent + lo) * inner;
            out[o * e * inner..(o + 1) * e * inner]
                .copy_from_slice(&x.data[src_start..src_start + e * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = e;
        Ok(self.push(Op::Slice { x: xid, axis, lo, hi }, shape, out))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", x.shape, shape),
            });
        }
        Ok(self.push(Op::Reshape { x: xid }, shape, x.data.clone()))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        if axis >= x.rank() {
            return Err(TensorError::Dimension {
                op: "mean",
                msg: format!("axis {} out of range for rank {}", axis, x.rank()),
            });
        }
        let (outer, extent, inner) = outer_inner(&x.shape, axis);
        if extent == 0 {
            return Err(TensorError::Dimension {
                op: "mean",
                msg: "mean over empty axis".into(),
            });
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &x.data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for v in out.iter_mut() {
            *v /= extent as f64;
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        Ok(self.push(Op::Mean { x: xid, axis }, shape, out))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x)?;
        let s: f64 = x.data.iter().sum();
        Ok(self.push(Op::SumAll { x: xid }, vec![], vec![s]))
    }

    /// Negative log softmax probability of the target class. Logits must be
    /// a vector.
    pub fn cross_entropy(&mut self, logits: &Tensor, target: usize) -> Result<Tensor> {
        let lid = self.id_of(logits)?;
        let classes = logits.numel();
        if logits.rank() != 1 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                msg: format!("logits must be rank 1, got shape {:?}", logits.shape),
            });
        }
        if target >= classes {
            return Err(TensorError::IndexOutOfRange { index: target, classes });
        }
        let max = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - logits.data[target];
        Ok(self.push(Op::CrossEntropy { logits: lid, target }, vec![], vec![loss]))
    }

    /// Run reverse-mode accumulation from a scalar loss. Gradients for every
    /// node are retained on the tape and can be read with [`Tape::grad`].
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        let lid = self.id_of(loss)?;
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape.clone(),
            });
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        grads[lid][0] = 1.0;
        for id in (0..self.nodes.len()).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.accumulate(id, &g, &mut grads);
            grads[id] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, rows, k, n } => {
                // dA = dOut B^T ; dB = A^T dOut
                matmul_nt_acc(g, &self.nodes[*b].data, *rows, *n, *k, &mut grads[*a]);
                matmul_tn_acc(&self.nodes[*a].data, g, *rows, *k, *n, &mut grads[*b]);
            }
            Op::MatmulNt { a, b, m, k, n } => {
                // out = A B^T : dA = dOut B ; dB = dOut^T A
                matmul_acc(g, &self.nodes[*b].data, *m, *n, *k, &mut grads[*a]);
                matmul_tn_acc(g, &self.nodes[*a].data, *m, *n, *k, &mut grads[*b]);
            }
            Op::SoftmaxLast { x, row } => {
                let y = &node.data;
                let gx = &mut grads[*x];
                for r in 0..y.len() / row {
                    let ys = &y[r * row..(r + 1) * row];
                    let gs = &g[r * row..(r + 1) * row];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for (j, gx) in gx[r * row..(r + 1) * row].iter_mut().enumerate() {
                        *gx += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, dim, row_stats } => {
                let xs = &self.nodes[*x].data;
                let gam = &self.nodes[*gamma].data;
                let d = *dim;
                for (r, &(mean, inv_std)) in row_stats.iter().enumerate() {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    // xhat and gamma-weighted upstream
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gam[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        grads[*gamma][j] += gr[j] * xhat;
                        grads[*beta][j] += gr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gam[j];
                        grads[*x][r * d + j] +=
                            inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
            Op::Gelu { x } => {
                let xs = &self.nodes[*x].data;
                for (gx, (&xv, &gv)) in grads[*x].iter_mut().zip(xs.iter().zip(g)) {
                    *gx += gv * gelu_derivative(xv);
                }
            }
            Op::Add { a, b } => {
                for (ga, &gv) in grads[*a].iter_mut().zip(g) {
                    *ga += gv;
                }
                for (gb, &gv) in grads[*b].iter_mut().zip(g) {
                    *gb += gv;
                }
            }
            Op::AddBias { x, b } => {
                let dim = self.nodes[*b].data.len();
                for (gx, &gv) in grads[*x].iter_mut().zip(g) {
                    *gx += gv;
                }
                for row in g.chunks(dim) {
                    for (gb, &gv) in grads[*b].iter_mut().zip(row) {
                        *gb += gv;
                    }
                }
            }
            Op::Scale { x, c } => {
                for (gx, &gv) in grads[*x].iter_mut().zip(g) {
                    *gx += gv * c;
                }
            }
            Op::ScaleT { x, s } => {
                let sv = self.nodes[*s].data[0];
                let xs = &self.nodes[*x].data;
                let mut ds = 0.0;
                for (i, (gx, &gv)) in grads[*x].iter_mut().zip(g).enumerate() {
                    *gx += gv * sv;
                    ds += gv * xs[i];
                }
                grads[*s][0] += ds;
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = outer_inner(&node.shape, *axis);
                for o in 0..outer {
                    let mut off = 0;
                    for &p in parts {
                        let e = self.nodes[p].shape[*axis];
                        let src_start = (o * total + off) * inner;
                        let dst = &mut grads[p][o * e * inner..(o + 1) * e * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[src_start..src_start + e * inner]) {
                            *d += gv;
                        }
                        off += e;
                    }
                }
            }
            Op::Slice { x, axis, lo, hi } => {
                let extent = self.nodes[*x].shape[*axis];
                let (outer, e, inner) = outer_inner(&node.shape, *axis);
                debug_assert_eq!(e, hi - lo);
                for o in 0..outer {
                    let dst_start = (o * extent + lo) * inner;
                    let dst = &mut grads[*x][dst_start..dst_start + e * inner];
                    for (d, &gv) in dst.iter_mut().zip(&g[o * e * inner..(o + 1) * e * inner]) {
                        *d += gv;
                    }
                }
            }
            Op::Reshape { x } => {
                for (gx, &gv) in grads[*x].iter_mut().zip(g) {
                    *gx += gv;
                }
            }
            Op::Mean { x, axis } => {
                let (outer, extent, inner) = outer_inner(&self.nodes[*x].shape, *axis);
                let scale = 1.0 / extent as f64;
                for o in 0..outer {
                    for e in 0..extent {
                        let dst = &mut grads[*x][(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += gv * scale;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                for gx in grads[*x].iter_mut() {
                    *gx += gv;
                }
            }
            Op::CrossEntropy { logits, target } => {
                let ls = &self.nodes[*logits].data;
                let max = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = ls.iter().map(|&v| (v - max).exp()).sum();
                let gv = g[0];
                for (j, gl) in grads[*logits].iter_mut().enumerate() {
                    let p = (ls[j] - max).exp() / sum;
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    *gl += gv * (p - onehot);
                }
            }
        }
    }

    /// Gradient buffer of a tensor recorded on this tape. Empty until
    /// [`Tape::backward`] has run.
    pub fn grad(&self, t: &Tensor) -> Result<&[f64]> {
        let id = self.id_of(t)?;
        if self.grads.is_empty() {
            return Err(TensorError::Dimension {
                op: "grad",
                msg: "backward has not been run on this tape".into(),
            });
        }
        Ok(&self.grads[id])
    }

    /// Copy the tape gradient into the tensor's own grad buffer.
    pub fn write_grad(&self, t: &mut Tensor) -> Result<()> {
        let id = self.id_of(t)?;
        if self.grads.is_empty() {
            return Err(TensorError::Dimension {
                op: "grad",
                msg: "backward has not been run on this tape".into(),
            });
        }
        t.grad = Some(self.grads[id].clone());
        Ok(())
    }
}
