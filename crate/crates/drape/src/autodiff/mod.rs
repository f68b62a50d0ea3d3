//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Computation is recorded on an explicit [`Tape`]: leaves are created with
//! [`Tape::leaf`] (tracked) or [`Tape::constant`], every operation appends a
//! node and returns a [`Var`], and [`Tape::backward`] runs one reverse sweep.
//! Tapes are single-use and confined to one thread; the tensors themselves
//! are plain values.
//!
//! Every operation validates shapes (errors name the op and the shapes) and
//! rejects non-finite inputs, so a finite graph stays finite.

mod kernels;
mod registry;

pub use registry::{eval_op, op_cases, sweep_grad_checks, OpCase};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul { a: usize, b: usize, transpose_b: bool },
    AddRow { x: usize, row: usize },
    AddChan { x: usize, chan: usize },
    Conv2d { x: usize, w: usize, b: usize, pad: usize },
    AvgPool2(usize),
    Upsample2(usize),
    Patchify { x: usize, patch: usize },
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Gelu(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    RowNormalize(usize),
    CosineSim(usize, usize),
    SquaredError(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
    grad: Option<Vec<f64>>,
}

/// Single-use recording tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &str, inputs: &[&Tensor]) -> Result<()> {
    for t in inputs {
        if !t.is_finite() {
            return Err(Error::NonFinite { context: op.to_string() });
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. `requires_grad` leaves receive gradients
    /// from [`Tape::backward`]; everything derived from them is tracked.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires: requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// The value currently held at `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise binary (exact shape match, or scalar-with-tensor) ----

    fn binary(&mut self, op_name: &str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        check_finite(op_name, &[ta, tb])?;
        let data;
        let shape;
        if ta.shape() == tb.shape() {
            shape = ta.shape().to_vec();
            data = ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        } else if tb.is_scalar() {
            shape = ta.shape().to_vec();
            let s = tb.data()[0];
            data = ta.data().iter().map(|&x| f(x, s)).collect();
        } else if ta.is_scalar() {
            shape = tb.shape().to_vec();
            let s = ta.data()[0];
            data = tb.data().iter().map(|&y| f(s, y)).collect();
        } else {
            return Err(Error::shape(op_name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, data)?, op, requires))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        check_finite("scale", &[self.val(x)])?;
        if !c.is_finite() {
            return Err(Error::NonFinite { context: "scale".into() });
        }
        let value = self.val(x).map(|v| c * v);
        let requires = self.req(x);
        Ok(self.push(value, Op::Scale(x.0, c), requires))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        check_finite("add_scalar", &[self.val(x)])?;
        if !c.is_finite() {
            return Err(Error::NonFinite { context: "add_scalar".into() });
        }
        let value = self.val(x).map(|v| v + c);
        let requires = self.req(x);
        Ok(self.push(value, Op::AddScalar(x.0), requires))
    }

    // ---- linear algebra ----

    /// 2-d matrix product; with `transpose_b`, `b` is stored `[n,k]`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        check_finite("matmul", &[ta, tb])?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?} (need rank 2)", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if transpose_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n, false, transpose_b);
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a: a.0, b: b.0, transpose_b }, requires))
    }

    /// x[m,n] + row[n], broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.val(x), self.val(row));
        check_finite("add_row", &[tx, tr])?;
        if tx.shape().len() != 2 || tr.shape().len() != 1 || tx.shape()[1] != tr.shape()[0] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tr.shape())));
        }
        let n = tr.shape()[0];
        let data = tx
            .data()
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(tr.data()).map(|(&a, &b)| a + b))
            .collect();
        let requires = self.req(x) || self.req(row);
        Ok(self.push(Tensor::new(tx.shape().to_vec(), data)?, Op::AddRow { x: x.0, row: row.0 }, requires))
    }

    /// x[c,h,w] + v[c], broadcast over the spatial grid.
    pub fn add_chan(&mut self, x: Var, chan: Var) -> Result<Var> {
        let (tx, tc) = (self.val(x), self.val(chan));
        check_finite("add_chan", &[tx, tc])?;
        if tx.shape().len() != 3 || tc.shape().len() != 1 || tx.shape()[0] != tc.shape()[0] {
            return Err(Error::shape("add_chan", format!("{:?} + {:?}", tx.shape(), tc.shape())));
        }
        let hw = tx.shape()[1] * tx.shape()[2];
        let mut data = Vec::with_capacity(tx.numel());
        for (c, &v) in tc.data().iter().enumerate() {
            data.extend(tx.data()[c * hw..(c + 1) * hw].iter().map(|&a| a + v));
        }
        let requires = self.req(x) || self.req(chan);
        Ok(self.push(Tensor::new(tx.shape().to_vec(), data)?, Op::AddChan { x: x.0, chan: chan.0 }, requires))
    }

    /// Stride-1 convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        check_finite("conv2d", &[tx, tw, tb])?;
        let (sx, sw, sb) = (tx.shape(), tw.shape(), tb.shape());
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?} (need [ci,h,w], [co,ci,kh,kw], [co])", sx, sw, sb),
            ));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if sw[1] != ci || sb[0] != co || h + 2 * pad + 1 <= kh || wd + 2 * pad + 1 <= kw {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}, b {:?}, pad {}", sx, sw, sb, pad)));
        }
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;
        let data = kernels::conv2d_fwd(tx.data(), (ci, h, wd), tw.data(), (co, kh, kw), tb.data(), pad);
        let requires = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(
            Tensor::new(vec![co, oh, ow], data)?,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, pad },
            requires,
        ))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        check_finite("avg_pool2", &[tx])?;
        let s = tx.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{:?} (need [c, even, even])", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = tx.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    data[(ch * oh + oy) * ow + ox] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * 0.25;
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], data)?, Op::AvgPool2(x.0), requires))
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        check_finite("upsample2", &[tx])?;
        let s = tx.shape();
        if s.len() != 3 {
            return Err(Error::shape("upsample2", format!("{:?} (need [c,h,w])", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = tx.data();
        let mut data = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = src[(ch * h + y) * w + xx];
                    let base = (ch * oh + 2 * y) * ow + 2 * xx;
                    data[base] = v;
                    data[base + 1] = v;
                    data[base + ow] = v;
                    data[base + ow + 1] = v;
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], data)?, Op::Upsample2(x.0), requires))
    }

    /// [c,h,w] -> [num_patches, c*p*p]; patches in row-major order, features
    /// ordered (channel, ky, kx).
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let tx = self.val(x);
        check_finite("patchify", &[tx])?;
        let s = tx.shape();
        if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
            return Err(Error::shape("patchify", format!("{:?} with patch {}", s, patch)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gy, gx) = (h / patch, w / patch);
        let src = tx.data();
        let mut data = Vec::with_capacity(c * h * w);
        for py in 0..gy {
            for px in 0..gx {
                for ch in 0..c {
                    for ky in 0..patch {
                        let row = (ch * h + py * patch + ky) * w + px * patch;
                        data.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(
            Tensor::new(vec![gy * gx, c * patch * patch], data)?,
            Op::Patchify { x: x.0, patch },
            requires,
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.val(x).reshaped(shape)?;
        let requires = self.req(x);
        Ok(self.push(value, Op::Reshape(x.0), requires))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat: no inputs".into()));
        }
        let rank = self.val(parts[0]).shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {} of rank {}", axis, rank)));
        }
        let mut out_shape = self.val(parts[0]).shape().to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.val(p).shape();
            check_finite("concat", &[self.val(p)])?;
            if s.len() != rank
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != out_shape[i] && out_shape[i] != 0)
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", s, out_shape, axis)));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for &p in parts {
            let s = self.val(p).shape().to_vec();
            let src = self.val(p).data();
            let chunk = s[axis] * inner;
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                data[dst..dst + chunk].copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
            }
            offset += s[axis];
        }
        let requires = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat { parts: parts.iter().map(|v| v.0).collect(), axis },
            requires,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        check_finite("slice", &[tx])?;
        let s = tx.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.to_vec();
        shape[axis] = len;
        let src = tx.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let requires = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x: x.0, axis, start }, requires))
    }

    // ---- reductions / activations ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        check_finite("sum", &[tx])?;
        let value = Tensor::scalar(tx.data().iter().sum());
        let requires = self.req(x);
        Ok(self.push(value, Op::Sum(x.0), requires))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        check_finite("mean", &[tx])?;
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.numel() as f64);
        let requires = self.req(x);
        Ok(self.push(value, Op::Mean(x.0), requires))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        check_finite("softmax", &[tx])?;
        let s = tx.shape();
        if s.is_empty() {
            return Err(Error::shape("softmax", "rank-0 input".to_string()));
        }
        let cols = s[s.len() - 1];
        let data = kernels::softmax_rows(tx.data(), cols);
        let requires = self.req(x);
        Ok(self.push(Tensor::new(s.to_vec(), data)?, Op::Softmax(x.0), requires))
    }

    /// Layer normalization along the last axis with affine gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        check_finite("layer_norm", &[tx, tg, tb])?;
        let s = tx.shape();
        if s.is_empty() {
            return Err(Error::shape("layer_norm", "rank-0 input".to_string()));
        }
        let cols = s[s.len() - 1];
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", s, tg.shape(), tb.shape()),
            ));
        }
        let data = kernels::layer_norm_fwd(tx.data(), tg.data(), tb.data(), cols, eps);
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor::new(s.to_vec(), data)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            requires,
        ))
    }

    fn unary(&mut self, name: &str, x: Var, f: fn(f64) -> f64, op: Op, domain: Option<fn(f64) -> bool>) -> Result<Var> {
        let tx = self.val(x);
        check_finite(name, &[tx])?;
        if let Some(ok) = domain {
            if let Some(v) = tx.data().iter().find(|&&v| !ok(v)) {
                return Err(Error::InvalidArgument(format!("{}: value {} outside domain", name, v)));
            }
        }
        let value = tx.map(f);
        let requires = self.req(x);
        Ok(self.push(value, op, requires))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x.0), None)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x.0), Some(|v| v >= 0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x.0), None)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x.0), Some(|v| v > 0.0))
    }

    /// L2-normalizes each row of an [m,n] matrix.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        check_finite("row_normalize", &[tx])?;
        let s = tx.shape();
        if s.len() != 2 {
            return Err(Error::shape("row_normalize", format!("{:?} (need rank 2)", s)));
        }
        let n = s[1];
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument("row_normalize: zero row".into()));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        let requires = self.req(x);
        Ok(self.push(Tensor::new(s.to_vec(), data)?, Op::RowNormalize(x.0), requires))
    }

    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        check_finite("cosine_similarity", &[ta, tb])?;
        if ta.shape() != tb.shape() {
            return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let na = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument("cosine_similarity: zero vector".into()));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Tensor::scalar(dot / (na * nb)), Op::CosineSim(a.0, b.0), requires))
    }

    /// Sum of squared differences (a scalar).
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        check_finite("squared_error", &[ta, tb])?;
        if ta.shape() != tb.shape() {
            return Err(Error::shape("squared_error", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let requires = self.req(a) || self.req(b);
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a.0, b.0), requires))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// errors. Gradients land on every tracked node and are read back with
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::NonScalarLoss(lnode.value.shape().to_vec()));
        }
        if !lnode.requires {
            return Err(Error::NoTrackedInputs);
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn add_grad(&mut self, idx: usize, contrib: Vec<f64>) {
        if !self.nodes[idx].requires {
            return;
        }
        match &mut self.nodes[idx].grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Accumulates `contrib` into `idx`, collapsing to a scalar when the
    /// target is a broadcast scalar operand.
    fn add_grad_broadcast(&mut self, idx: usize, contrib: Vec<f64>) {
        if !self.nodes[idx].requires {
            return;
        }
        if self.nodes[idx].value.numel() == 1 && contrib.len() != 1 {
            self.add_grad(idx, vec![contrib.iter().sum()]);
        } else {
            self.add_grad(idx, contrib);
        }
    }

    fn propagate(&mut self, i: usize) {
        let g = self.nodes[i].grad.clone().expect("grad present");
        // Clone the small descriptors we need; tensor data is Arc-backed.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.add_grad_broadcast(a, g.clone());
                self.add_grad_broadcast(b, g);
            }
            &Op::Sub(a, b) => {
                self.add_grad_broadcast(a, g.clone());
                self.add_grad_broadcast(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let ta = self.nodes[a].value.clone();
                let tb = self.nodes[b].value.clone();
                let aval = |j: usize| if ta.numel() == 1 { ta.data()[0] } else { ta.data()[j] };
                let bval = |j: usize| if tb.numel() == 1 { tb.data()[0] } else { tb.data()[j] };
                let n = g.len();
                let da: Vec<f64> = (0..n).map(|j| g[j] * bval(j)).collect();
                let db: Vec<f64> = (0..n).map(|j| g[j] * aval(j)).collect();
                self.add_grad_broadcast(a, da);
                self.add_grad_broadcast(b, db);
            }
            &Op::Scale(x, c) => {
                self.add_grad(x, g.iter().map(|v| c * v).collect());
            }
            &Op::AddScalar(x) => {
                self.add_grad(x, g);
            }
            &Op::Matmul { a, b, transpose_b } => {
                let ta = self.nodes[a].value.clone();
                let tb = self.nodes[b].value.clone();
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if transpose_b { tb.shape()[0] } else { tb.shape()[1] };
                if self.nodes[a].requires {
                    let da = if transpose_b {
                        kernels::matmul(&g, tb.data(), m, n, k, false, false)
                    } else {
                        kernels::matmul(&g, tb.data(), m, n, k, false, true)
                    };
                    self.add_grad(a, da);
                }
                if self.nodes[b].requires {
                    let db = if transpose_b {
                        kernels::matmul(&g, ta.data(), n, m, k, true, false)
                    } else {
                        kernels::matmul(ta.data(), &g, k, m, n, true, false)
                    };
                    self.add_grad(b, db);
                }
            }
            &Op::AddRow { x, row } => {
                let n = self.nodes[row].value.numel();
                if self.nodes[row].requires {
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.add_grad(row, dr);
                }
                self.add_grad(x, g);
            }
            &Op::AddChan { x, chan } => {
                let c = self.nodes[chan].value.numel();
                if self.nodes[chan].requires {
                    let hw = g.len() / c;
                    let dc: Vec<f64> = (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                    self.add_grad(chan, dc);
                }
                self.add_grad(x, g);
            }
            &Op::Conv2d { x, w, b, pad } => {
                let tx = self.nodes[x].value.clone();
                let tw = self.nodes[w].value.clone();
                let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                if self.nodes[x].requires {
                    let dx = kernels::conv2d_bwd_input(&g, (ci, h, wd), tw.data(), (co, kh, kw), pad);
                    self.add_grad(x, dx);
                }
                if self.nodes[w].requires || self.nodes[b].requires {
                    let (dw, db) = kernels::conv2d_bwd_weight(&g, tx.data(), (ci, h, wd), (co, kh, kw), pad);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
            }
            &Op::AvgPool2(x) => {
                let s = self.nodes[x].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(ch * oh + oy) * ow + ox] * 0.25;
                            let base = (ch * h + 2 * oy) * w + 2 * ox;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                self.add_grad(x, dx);
            }
            &Op::Upsample2(x) => {
                let s = self.nodes[x].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let base = (ch * oh + 2 * y) * ow + 2 * xx;
                            dx[(ch * h + y) * w + xx] = g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
                        }
                    }
                }
                self.add_grad(x, dx);
            }
            &Op::Patchify { x, patch } => {
                let s = self.nodes[x].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (gy, gx) = (h / patch, w / patch);
                let mut dx = vec![0.0; c * h * w];
                let mut src = 0;
                for py in 0..gy {
                    for px in 0..gx {
                        for ch in 0..c {
                            for ky in 0..patch {
                                let row = (ch * h + py * patch + ky) * w + px * patch;
                                dx[row..row + patch].copy_from_slice(&g[src..src + patch]);
                                src += patch;
                            }
                        }
                    }
                }
                self.add_grad(x, dx);
            }
            &Op::Reshape(x) => {
                self.add_grad(x, g);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut offset = 0;
                for p in parts {
                    let plen = self.nodes[p].value.shape()[axis];
                    if self.nodes[p].requires {
                        let chunk = plen * inner;
                        let mut dp = vec![0.0; outer * chunk];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            dp[o * chunk..(o + 1) * chunk].copy_from_slice(&g[src..src + chunk]);
                        }
                        self.add_grad(p, dp);
                    }
                    offset += plen;
                }
            }
            &Op::Slice { x, axis, start } => {
                let s = self.nodes[x].value.shape().to_vec();
                let out_len = self.nodes[i].value.shape()[axis];
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for o in 0..outer {
                    let dst = (o * s[axis] + start) * inner;
                    let src = o * out_len * inner;
                    dx[dst..dst + out_len * inner].copy_from_slice(&g[src..src + out_len * inner]);
                }
                self.add_grad(x, dx);
            }
            &Op::Sum(x) => {
                let n = self.nodes[x].value.numel();
                self.add_grad(x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                self.add_grad(x, vec![g[0] / n as f64; n]);
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].value.clone();
                let cols = *y.shape().last().unwrap();
                let dx = kernels::softmax_rows_bwd(y.data(), &g, cols);
                self.add_grad(x, dx);
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.nodes[x].value.clone();
                let tg = self.nodes[gamma].value.clone();
                let cols = tg.numel();
                let (dx, dg, db) = kernels::layer_norm_bwd(tx.data(), tg.data(), &g, cols, eps);
                self.add_grad(x, dx);
                self.add_grad(gamma, dg);
                self.add_grad(beta, db);
            }
            &Op::Gelu(x) => {
                let tx = self.nodes[x].value.clone();
                let dx = tx.data().iter().zip(&g).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect();
                self.add_grad(x, dx);
            }
            &Op::Sqrt(x) => {
                let y = self.nodes[i].value.clone();
                let dx = y.data().iter().zip(&g).map(|(&v, &gv)| gv * 0.5 / v).collect();
                self.add_grad(x, dx);
            }
            &Op::Exp(x) => {
                let y = self.nodes[i].value.clone();
                let dx = y.data().iter().zip(&g).map(|(&v, &gv)| gv * v).collect();
                self.add_grad(x, dx);
            }
            &Op::Log(x) => {
                let tx = self.nodes[x].value.clone();
                let dx = tx.data().iter().zip(&g).map(|(&v, &gv)| gv / v).collect();
                self.add_grad(x, dx);
            }
            &Op::RowNormalize(x) => {
                let tx = self.nodes[x].value.clone();
                let y = self.nodes[i].value.clone();
                let n = tx.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..tx.shape()[0] {
                    let xr = &tx.data()[r * n..(r + 1) * n];
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - dot * yr[j]) / norm;
                    }
                }
                self.add_grad(x, dx);
            }
            &Op::CosineSim(a, b) => {
                let ta = self.nodes[a].value.clone();
                let tb = self.nodes[b].value.clone();
                let c = self.nodes[i].value.data()[0];
                let na = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let gv = g[0];
                if self.nodes[a].requires {
                    let da = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&av, &bv)| gv * (bv / (na * nb) - c * av / (na * na)))
                        .collect();
                    self.add_grad(a, da);
                }
                if self.nodes[b].requires {
                    let db = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&av, &bv)| gv * (av / (na * nb) - c * bv / (nb * nb)))
                        .collect();
                    self.add_grad(b, db);
                }
            }
            &Op::SquaredError(a, b) => {
                let ta = self.nodes[a].value.clone();
                let tb = self.nodes[b].value.clone();
                let gv = g[0];
                if self.nodes[a].requires {
                    let da = ta.data().iter().zip(tb.data()).map(|(&x, &y)| gv * 2.0 * (x - y)).collect();
                    self.add_grad(a, da);
                }
                if self.nodes[b].requires {
                    let db = ta.data().iter().zip(tb.data()).map(|(&x, &y)| -gv * 2.0 * (x - y)).collect();
                    self.add_grad(b, db);
                }
            }
        }
    }
}

/// Attribute bag for the string-dispatch entry point.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub value: Option<f64>,
    pub patch: Option<usize>,
    pub pad: Option<usize>,
    pub transpose_b: bool,
    pub eps: Option<f64>,
}

impl Tape {
    /// Applies a registered operation by name. The typed methods are the
    /// primary API; this entry point backs the op registry and generic tests.
    pub fn apply(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::InvalidArgument(format!("{}: expected {} inputs, got {}", name, n, inputs.len())))
            } else {
                Ok(())
            }
        };
        match name {
            "add" => { need(2)?; self.add(inputs[0], inputs[1]) }
            "sub" => { need(2)?; self.sub(inputs[0], inputs[1]) }
            "mul" => { need(2)?; self.mul(inputs[0], inputs[1]) }
            "scale" => { need(1)?; self.scale(inputs[0], attrs.value.unwrap_or(1.0)) }
            "add_scalar" => { need(1)?; self.add_scalar(inputs[0], attrs.value.unwrap_or(0.0)) }
            "matmul" => { need(2)?; self.matmul(inputs[0], inputs[1], attrs.transpose_b) }
            "add_row" => { need(2)?; self.add_row(inputs[0], inputs[1]) }
            "add_chan" => { need(2)?; self.add_chan(inputs[0], inputs[1]) }
            "conv2d" => { need(3)?; self.conv2d(inputs[0], inputs[1], inputs[2], attrs.pad.unwrap_or(0)) }
            "avg_pool2" => { need(1)?; self.avg_pool2(inputs[0]) }
            "upsample2" => { need(1)?; self.upsample2(inputs[0]) }
            "patchify" => {
                need(1)?;
                let p = attrs.patch.ok_or_else(|| Error::InvalidArgument("patchify: missing patch attr".into()))?;
                self.patchify(inputs[0], p)
            }
            "reshape" => {
                need(1)?;
                let s = attrs.shape.clone().ok_or_else(|| Error::InvalidArgument("reshape: missing shape attr".into()))?;
                self.reshape(inputs[0], s)
            }
            "concat" => self.concat(inputs, attrs.axis.unwrap_or(0)),
            "slice" => {
                need(1)?;
                let (a, s, l) = (
                    attrs.axis.unwrap_or(0),
                    attrs.start.ok_or_else(|| Error::InvalidArgument("slice: missing start attr".into()))?,
                    attrs.len.ok_or_else(|| Error::InvalidArgument("slice: missing len attr".into()))?,
                );
                self.slice(inputs[0], a, s, l)
            }
            "sum" => { need(1)?; self.sum(inputs[0]) }
            "mean" => { need(1)?; self.mean(inputs[0]) }
            "softmax" => { need(1)?; self.softmax(inputs[0]) }
            "layer_norm" => { need(3)?; self.layer_norm(inputs[0], inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5)) }
            "gelu" => { need(1)?; self.gelu(inputs[0]) }
            "sqrt" => { need(1)?; self.sqrt(inputs[0]) }
            "exp" => { need(1)?; self.exp(inputs[0]) }
            "log" => { need(1)?; self.log(inputs[0]) }
            "row_normalize" => { need(1)?; self.row_normalize(inputs[0]) }
            "cosine_similarity" => { need(2)?; self.cosine_similarity(inputs[0], inputs[1]) }
            "squared_error" => { need(2)?; self.squared_error(inputs[0], inputs[1]) }
            _ => Err(Error::InvalidArgument(format!("unknown op {:?}", name))),
        }
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with the given step.
///
/// The error metric per coordinate is |analytic - numeric| divided by
/// max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), false);
        let out = f(&mut tape, v)?;
        let val = tape.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite { context: "grad_check: objective".into() });
        }
        Ok(val)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let val = tape.value(out).item()?;
    if !val.is_finite() {
        return Err(Error::NonFinite { context: "grad_check: objective".into() });
    }
    tape.backward(out)?;
    let analytic = tape.grad(xv).ok_or(Error::NoTrackedInputs)?;

    let mut max_err: f64 = 0.0;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = eval(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(&Tensor::new(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests;
