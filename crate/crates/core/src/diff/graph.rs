//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Because inputs
//! always precede their consumers on the tape, walking the tape backwards is a
//! reverse topological order and each node is visited exactly once.

use std::sync::Arc;

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Floor applied inside the fused KL primitive.
pub const KL_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    L2NormalizeRows { x: Var, eps: f64 },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Arc<[usize]> },
    KlRows { p: Var, q: Var },
    Reshape(Var),
    CellsToRows(Var),
    RowDot { x: Var, keys: Var },
    ScaleCells { x: Var, w: Var },
    GlobalAvgPool(Var),
    AddBias { x: Var, b: Var },
    GroupSum { x: Var, parent: Arc<[usize]>, groups: usize },
    Gather { x: Var, index: Arc<[usize]> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` is disconnected from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the logical shapes and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_cells(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let oc = self.out_cells();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * oc..(row + 1) * oc];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] =
                                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                    0.0
                                } else {
                                    plane[iy as usize * self.w + ix as usize]
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let oc = self.out_cells();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * oc..(row + 1) * oc];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] × [n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul needs 2-d operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err!("matmul inner dimensions {k} and {kb} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), transpose_b, &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, transpose_b }, &[a, b]))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err!("conv2d needs [B,C,H,W] input and [O,C,K,K] kernel"));
        }
        if sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err!("kernel {sw:?} incompatible with input {sx:?}"));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(shape_err!("kernel larger than padded input"));
        }
        Ok(ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride,
            pad,
            ho: (sx[2] + 2 * pad - k) / stride + 1,
            wo: (sx[3] + 2 * pad - k) / stride + 1,
        })
    }

    /// 2-d cross-correlation with zero padding, `[B,C,H,W] ⊛ [O,C,K,K] (+ [O])`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [g.cout] {
                return Err(shape_err!("conv bias must have shape [{}]", g.cout));
            }
        }
        let (patch, oc) = (g.patch(), g.out_cells());
        let mut out = vec![0.0; g.batch * g.cout * oc];
        let mut cols = vec![0.0; patch * oc];
        let xin = self.value(x).data();
        let wd = self.value(w).data();
        for bi in 0..g.batch {
            g.im2col(&xin[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w], &mut cols);
            let dst = &mut out[bi * g.cout * oc..(bi + 1) * g.cout * oc];
            gemm(g.cout, patch, oc, wd, false, &cols, false, dst, 0.0);
            if let Some(b) = b {
                for (o, bias) in self.value(b).data().iter().enumerate() {
                    dst[o * oc..(o + 1) * oc].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(vec![g.batch, g.cout, g.ho, g.wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Divides every row (last axis) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = last_dim(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::L2NormalizeRows { x, eps }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = last_dim(t);
        let mut data = vec![0.0; t.numel()];
        for (row, out) in t.data().chunks(d).zip(data.chunks_mut(d)) {
            softmax_into(row, out);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = last_dim(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmaxRows(x), &[x])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Batch-mean categorical cross-entropy of `[B, K]` logits.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err!("logits {s:?} for {} labels", labels.len()));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("label {bad} out of range for {k} classes"));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.into() }, &[logits]))
    }

    /// Row-mean of `KL(p_r ‖ q_r)` over the last axis, entries floored at
    /// [`KL_FLOOR`].
    pub fn kl_of_distributions(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl")?;
        let (tp, tq) = (self.value(p), self.value(q));
        let d = last_dim(tp);
        let rows = tp.numel() / d;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tq.data())
            .map(|(a, b)| {
                let (a, b) = (a.max(KL_FLOOR), b.max(KL_FLOOR));
                a * (a / b).ln()
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / rows as f64), Op::KlRows { p, q }, &[p, q]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[B, C, H, W] → [B, H·W, C]`: one row per spatial cell.
    pub fn cells_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("cells_to_rows needs [B,C,H,W], got {s:?}"));
        }
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..n {
                    out[(bi * n + i) * c + ci] = src[(bi * c + ci) * n + i];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, n, c], out)?, Op::CellsToRows(x), &[x]))
    }

    /// Per-cell inner products with per-cell keys: `[B, N, C] · [N, C] → [B, N]`.
    pub fn row_dot(&mut self, x: Var, keys: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(keys));
        if sx.len() != 3 || sk.len() != 2 || sx[1] != sk[0] || sx[2] != sk[1] {
            return Err(shape_err!("row_dot of {sx:?} with keys {sk:?}"));
        }
        let (b, n, c) = (sx[0], sx[1], sx[2]);
        let (xd, kd) = (self.value(x).data(), self.value(keys).data());
        let out = (0..b * n)
            .map(|r| {
                let i = r % n;
                xd[r * c..(r + 1) * c].iter().zip(&kd[i * c..(i + 1) * c]).map(|(a, k)| a * k).sum()
            })
            .collect();
        Ok(self.push(Tensor::new(vec![b, n], out)?, Op::RowDot { x, keys }, &[x, keys]))
    }

    /// Scales every channel vector of `x: [B, C, H, W]` by the per-cell weight
    /// `w: [B, H·W]`.
    pub fn scale_cells(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w));
        if sx.len() != 4 || sw.iter().product::<usize>() != sx[0] * sx[2] * sx[3] || sw[0] != sx[0] {
            return Err(shape_err!("scale_cells of {sx:?} by {sw:?}"));
        }
        let (b, c, n) = (sx[0], sx[1], sx[2] * sx[3]);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            let weights = &wd[bi * n..(bi + 1) * n];
            for ci in 0..c {
                let base = (bi * c + ci) * n;
                for i in 0..n {
                    out[base + i] = xd[base + i] * weights[i];
                }
            }
        }
        Ok(self.push(Tensor::new(sx, out)?, Op::ScaleCells { x, w }, &[x, w]))
    }

    /// `[B, C, H, W] → [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool needs [B,C,H,W], got {s:?}"));
        }
        let n = s[2] * s[3];
        let out = self.value(x).data().chunks(n).map(|p| p.iter().sum::<f64>() / n as f64).collect();
        Ok(self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    /// Adds `b: [K]` to every length-`K` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let k = last_dim(self.value(x));
        if self.shape(b) != [k] {
            return Err(shape_err!("bias {:?} for rows of length {k}", self.shape(b)));
        }
        let bd = self.value(b).data().to_vec();
        let t = self.value(x);
        let data = t.data().chunks(k).flat_map(|row| row.iter().zip(&bd).map(|(v, c)| v + c)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    /// Sums the last axis into `groups` buckets: `out[.., parent[j]] += x[.., j]`.
    pub fn group_sum(&mut self, x: Var, parent: Arc<[usize]>, groups: usize) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t);
        if parent.len() != d || parent.iter().any(|&p| p >= groups) {
            return Err(shape_err!("group map of length {} for rows of length {d}", parent.len()));
        }
        let rows = t.numel() / d;
        let mut out = vec![0.0; rows * groups];
        for (row, dst) in t.data().chunks(d).zip(out.chunks_mut(groups)) {
            for (v, &p) in row.iter().zip(parent.iter()) {
                dst[p] += v;
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = groups;
        Ok(self.push(Tensor::new(shape, out)?, Op::GroupSum { x, parent, groups }, &[x]))
    }

    /// Gathers along the last axis: `out[.., j] = x[.., index[j]]`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t);
        if index.iter().any(|&i| i >= d) {
            return Err(shape_err!("gather index out of range for rows of length {d}"));
        }
        let out = t.data().chunks(d).flat_map(|row| index.iter().map(move |&i| row[i])).collect();
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = index.len(),
            None => shape.push(index.len()),
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, &[x]))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only trainable leaves and interior nodes keep gradients; constants never get one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut accumulate = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape");
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if *transpose_b { sb[0] } else { sb[1] };
                if wants(*a) {
                    // dA = dY · Bᵀ (or dY · B when B was used transposed).
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, val(*b).data(), !*transpose_b, &mut da, 0.0);
                    accumulate(*a, like(*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *transpose_b {
                        // d(Bᵀ) = Aᵀ dY, so dB = dYᵀ A.
                        gemm(n, m, k, dy.data(), true, val(*a).data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, val(*a).data(), true, dy.data(), false, &mut db, 0.0);
                    }
                    accumulate(*b, like(*b, db));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let g = self.conv_geom(*x, *w, *stride, *pad).expect("validated in forward");
                let (patch, oc) = (g.patch(), g.out_cells());
                let xin = val(*x).data();
                let wd = val(*w).data();
                let mut dw = vec![0.0; g.cout * patch];
                let mut dx = vec![0.0; xin.len()];
                let mut cols = vec![0.0; patch * oc];
                let mut dcols = vec![0.0; patch * oc];
                for bi in 0..g.batch {
                    let dyb = &dy.data()[bi * g.cout * oc..(bi + 1) * g.cout * oc];
                    let xb = &xin[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
                    if wants(*w) {
                        g.im2col(xb, &mut cols);
                        gemm(g.cout, oc, patch, dyb, false, &cols, true, &mut dw, 1.0);
                    }
                    if wants(*x) {
                        gemm(patch, g.cout, oc, wd, true, dyb, false, &mut dcols, 0.0);
                        g.col2im(&dcols, &mut dx[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w]);
                    }
                }
                if wants(*w) {
                    accumulate(*w, like(*w, dw));
                }
                if wants(*x) {
                    accumulate(*x, like(*x, dx));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; g.cout];
                    for (chunk_idx, chunk) in dy.data().chunks(oc).enumerate() {
                        db[chunk_idx % g.cout] += chunk.iter().sum::<f64>();
                    }
                    accumulate(*b, like(*b, db));
                }
            }
            Op::Relu(x) => {
                let dx = val(*x).data().iter().zip(dy.data()).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(*x, like(*x, dx));
            }
            Op::L2NormalizeRows { x, eps } => {
                let d = last_dim(y);
                let mut dx = vec![0.0; y.numel()];
                for ((xr, yr), (gr, out)) in val(*x)
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(dy.data().chunks(d).zip(dx.chunks_mut(d)))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *eps {
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, g), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (g - yv * proj) / norm;
                        }
                    } else {
                        for (o, g) in out.iter_mut().zip(gr) {
                            *o = g / eps;
                        }
                    }
                }
                accumulate(*x, like(*x, dx));
            }
            Op::SoftmaxRows(x) => {
                let d = last_dim(y);
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), out) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (g - dot);
                    }
                }
                accumulate(*x, like(*x, dx));
            }
            Op::LogSoftmaxRows(x) => {
                let d = last_dim(y);
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), out) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = g - yv.exp() * total;
                    }
                }
                accumulate(*x, like(*x, dx));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let da = dy.data().iter().zip(val(*b).data()).map(|(g, v)| g * v).collect();
                    accumulate(*a, like(*a, da));
                }
                if wants(*b) {
                    let db = dy.data().iter().zip(val(*a).data()).map(|(g, v)| g * v).collect();
                    accumulate(*b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                accumulate(*a, like(*a, dy.data().to_vec()));
                accumulate(*b, like(*b, dy.data().to_vec()));
            }
            Op::Sub(a, b) => {
                accumulate(*a, like(*a, dy.data().to_vec()));
                accumulate(*b, like(*b, dy.data().iter().map(|g| -g).collect()));
            }
            Op::Scale(x, c) => {
                accumulate(*x, like(*x, dy.data().iter().map(|g| g * c).collect()));
            }
            Op::Exp(x) => {
                let dx = dy.data().iter().zip(y.data()).map(|(g, v)| g * v).collect();
                accumulate(*x, like(*x, dx));
            }
            Op::Log(x) => {
                let dx = dy.data().iter().zip(val(*x).data()).map(|(g, v)| g / v).collect();
                accumulate(*x, like(*x, dx));
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                accumulate(*x, Tensor::full(val(*x).shape(), g));
            }
            Op::Mean(x) => {
                let g = dy.data()[0] / val(*x).numel() as f64;
                accumulate(*x, Tensor::full(val(*x).shape(), g));
            }
            Op::CrossEntropy { logits, labels } => {
                let t = val(*logits);
                let k = t.shape()[1];
                let scale = dy.data()[0] / labels.len() as f64;
                let mut dx = vec![0.0; t.numel()];
                for ((row, out), &label) in t.data().chunks(k).zip(dx.chunks_mut(k)).zip(labels.iter()) {
                    softmax_into(row, out);
                    out[label] -= 1.0;
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(*logits, like(*logits, dx));
            }
            Op::KlRows { p, q } => {
                let d = last_dim(val(*p));
                let rows = val(*p).numel() / d;
                let scale = dy.data()[0] / rows as f64;
                let (pd, qd) = (val(*p).data(), val(*q).data());
                if wants(*p) {
                    let dp = pd
                        .iter()
                        .zip(qd)
                        .map(|(a, b)| if *a > KL_FLOOR { scale * ((a / b.max(KL_FLOOR)).ln() + 1.0) } else { 0.0 })
                        .collect();
                    accumulate(*p, like(*p, dp));
                }
                if wants(*q) {
                    let dq = pd
                        .iter()
                        .zip(qd)
                        .map(|(a, b)| if *b > KL_FLOOR { -scale * a.max(KL_FLOOR) / b } else { 0.0 })
                        .collect();
                    accumulate(*q, like(*q, dq));
                }
            }
            Op::Reshape(x) => accumulate(*x, like(*x, dy.data().to_vec())),
            Op::CellsToRows(x) => {
                let s = val(*x).shape();
                let (b, c, n) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; dy.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..n {
                            dx[(bi * c + ci) * n + i] = dy.data()[(bi * n + i) * c + ci];
                        }
                    }
                }
                accumulate(*x, like(*x, dx));
            }
            Op::RowDot { x, keys } => {
                let s = val(*x).shape();
                let (b, n, c) = (s[0], s[1], s[2]);
                let (xd, kd) = (val(*x).data(), val(*keys).data());
                if wants(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for r in 0..b * n {
                        let (g, i) = (dy.data()[r], r % n);
                        for (o, k) in dx[r * c..(r + 1) * c].iter_mut().zip(&kd[i * c..(i + 1) * c]) {
                            *o = g * k;
                        }
                    }
                    accumulate(*x, like(*x, dx));
                }
                if wants(*keys) {
                    let mut dk = vec![0.0; kd.len()];
                    for r in 0..b * n {
                        let (g, i) = (dy.data()[r], r % n);
                        for (o, v) in dk[i * c..(i + 1) * c].iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                            *o += g * v;
                        }
                    }
                    accumulate(*keys, like(*keys, dk));
                }
            }
            Op::ScaleCells { x, w } => {
                let s = val(*x).shape();
                let (b, c, n) = (s[0], s[1], s[2] * s[3]);
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * n;
                        for i in 0..n {
                            let g = dy.data()[base + i];
                            dx[base + i] = g * wd[bi * n + i];
                            dw[bi * n + i] += g * xd[base + i];
                        }
                    }
                }
                if wants(*x) {
                    accumulate(*x, like(*x, dx));
                }
                if wants(*w) {
                    accumulate(*w, like(*w, dw));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let n = s[2] * s[3];
                let dx = dy.data().iter().flat_map(|g| std::iter::repeat_n(g / n as f64, n)).collect();
                accumulate(*x, like(*x, dx));
            }
            Op::AddBias { x, b } => {
                let k = val(*b).numel();
                accumulate(*x, like(*x, dy.data().to_vec()));
                if wants(*b) {
                    let mut db = vec![0.0; k];
                    for row in dy.data().chunks(k) {
                        db.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                    }
                    accumulate(*b, like(*b, db));
                }
            }
            Op::GroupSum { x, parent, groups } => {
                let dx = dy.data().chunks(*groups).flat_map(|row| parent.iter().map(move |&p| row[p])).collect();
                accumulate(*x, like(*x, dx));
            }
            Op::Gather { x, index } => {
                let d = last_dim(val(*x));
                let rows = val(*x).numel() / d;
                let mut dx = vec![0.0; rows * d];
                for (row, out) in dy.data().chunks(index.len()).zip(dx.chunks_mut(d)) {
                    for (g, &i) in row.iter().zip(index.iter()) {
                        out[i] += g;
                    }
                }
                accumulate(*x, like(*x, dx));
            }
        }
    }
}
