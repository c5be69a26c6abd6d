//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op takes [`Var`] handles into a [`Tape`], computes its value eagerly
//! and records what the backward pass needs. Ops whose inputs are all
//! constants are recorded without any saved context.
//!
//! Tensors follow NCHW layout for image ops. Elementwise ops require equal
//! shapes; the only broadcast is against a compile-time scalar
//! ([`Tape::scale`], [`Tape::add_scalar`]) or an explicit bias
//! ([`Tape::add_bias`]).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// A fixed linear operator usable as a tape op. The backward pass applies
/// the adjoint, so the pair must be exact transposes of each other.
pub trait LinearMap: Send + Sync {
    fn name(&self) -> &'static str;
    /// Per-sample input shape.
    fn input_shape(&self) -> Vec<usize>;
    /// Per-sample output shape.
    fn output_shape(&self) -> Vec<usize>;
    fn forward(&self, x: &[f64], out: &mut [f64]);
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Relu(usize),
    LeakyRelu(usize, f64),
    Silu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    L2Normalize { x: usize, norms: Vec<f64> },
    LogSumExpLast { x: usize, probs: Vec<f64> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    UpsampleNearest { x: usize, factor: usize },
    Reshape(usize),
    AddBias { x: usize, b: usize },
    GlobalAvgPool(usize),
    Linear { x: usize, map: Arc<dyn LinearMap> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn len(&self) -> usize {
        self.ho * self.wo
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records values and the ops that produced them. Single owner; build one
/// per forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { id, tape: self.id }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::NotOnTape(v.id));
        }
        Ok(&self.nodes[v.id])
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { id, tape: self.id })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.val(a)?.map(f);
        let rg = self.rg(&[a]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a.id, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.id, slope),
        )
    }

    /// `x * sigmoid(x)`, the smooth activation used by the networks.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a.id))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a.id))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a.id))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a)?.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a.id), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a.id), rg)
    }

    /// Reduces the last axis by summation. A rank-1 input yields shape `[1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?;
        let c = *v.shape().last().unwrap();
        let data: Vec<f64> = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = reduced_shape(v.shape());
        let rg = self.rg(&[a]);
        self.push("sum_last", Tensor::from_parts(shape, data), Op::SumLast(a.id), rg)
    }

    /// Numerically stable log-sum-exp over the last axis. Entries where
    /// `mask` is zero are excluded; a row with no admitted entry is an error.
    pub fn logsumexp_last(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let v = self.val(a)?;
        if let Some(m) = mask {
            if m.shape() != v.shape() {
                return Err(mismatch("logsumexp_last", v.shape(), m.shape()));
            }
        }
        let c = *v.shape().last().unwrap();
        let rows = v.numel() / c;
        let mut out = Vec::with_capacity(rows);
        let mut probs = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let admitted = |j: usize| mask.map_or(true, |m| m.data()[r * c + j] != 0.0);
            let mut best = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if admitted(j) && x > best {
                    best = x;
                }
            }
            if best == f64::NEG_INFINITY {
                return Err(Error::invalid("logsumexp_last: row with every entry masked"));
            }
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if admitted(j) {
                    let e = (x - best).exp();
                    probs[r * c + j] = e;
                    total += e;
                }
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= total;
            }
            out.push(best + total.ln());
        }
        let shape = reduced_shape(v.shape());
        let rg = self.rg(&[a]);
        self.push(
            "logsumexp_last",
            Tensor::from_parts(shape, out),
            Op::LogSumExpLast { x: a.id, probs },
            rg,
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a.id, b.id), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.val(a)?;
        if va.rank() != 2 {
            return Err(Error::invalid(format!("transpose: rank-2 input required, got {:?}", va.shape())));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let out = kernels::transpose(va.data(), m, n);
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a.id), rg)
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    /// `x: [N, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.val(x)?, self.val(w)?);
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(mismatch("conv2d", xs, ws));
        }
        let k = ws[2];
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        if let Some(b) = b {
            let vb = self.val(b)?;
            if vb.shape() != [geom.o] {
                return Err(mismatch("conv2d(bias)", vb.shape(), &[geom.o]));
            }
        }
        let (rows, len) = (geom.rows(), geom.len());
        let keep_cols = self.nodes[w.id].requires_grad;
        let mut all_cols = if keep_cols { vec![0.0; geom.n * rows * len] } else { Vec::new() };
        let mut scratch = vec![0.0; rows * len];
        let mut out = vec![0.0; geom.n * geom.o * len];
        let per_in = geom.c * geom.h * geom.w;
        for s in 0..geom.n {
            let cols = if keep_cols {
                &mut all_cols[s * rows * len..(s + 1) * rows * len]
            } else {
                &mut scratch[..]
            };
            im2col(&vx.data()[s * per_in..(s + 1) * per_in], &geom, cols);
            let o_slice = &mut out[s * geom.o * len..(s + 1) * geom.o * len];
            if let Some(b) = b {
                let bias = self.nodes[b.id].value.data();
                for (oc, chunk) in o_slice.chunks_mut(len).enumerate() {
                    chunk.fill(bias[oc]);
                }
            }
            kernels::matmul_acc(vw.data(), cols, o_slice, geom.o, rows, len);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::from_parts(vec![geom.n, geom.o, geom.ho, geom.wo], out);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                cols: keep_cols.then_some(all_cols),
            },
            rg,
        )
    }

    /// Normalizes each row (last axis) to unit L2 norm. Rows with norm below
    /// 1e-12 pass through unchanged and receive zero gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?;
        let c = *v.shape().last().unwrap();
        let mut norms = Vec::with_capacity(v.numel() / c);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n >= 1e-12 {
                row.iter_mut().for_each(|x| *x /= n);
            }
            norms.push(n);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(
            "l2_normalize",
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x: a.id, norms },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.val(inputs[0])?.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.val(v)?.shape();
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.id].value;
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.val(a)?;
        if axis >= v.rank() || start >= end || end > v.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for {:?}",
                v.shape()
            )));
        }
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner;
            out.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice { x: a.id, axis, start }, rg)
    }

    /// Nearest-neighbour upsampling of the two trailing axes of `[N, C, H, W]`.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let v = self.val(a)?;
        if v.rank() != 4 || factor == 0 {
            return Err(Error::invalid(format!("upsample_nearest: bad input {:?} x{factor}", v.shape())));
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[(i / factor) * w + j / factor];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            "upsample_nearest",
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::UpsampleNearest { x: a.id, factor },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(a)?.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", v, Op::Reshape(a.id), rg)
    }

    /// Adds `b: [F]` to every row of `x: [.., F]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.val(x)?, self.val(b)?);
        let f = *vx.shape().last().unwrap();
        if vb.shape() != [f] {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(f) {
            row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x, b]);
        self.push("add_bias", Tensor::from_parts(shape, out), Op::AddBias { x: x.id, b: b.id }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?;
        if v.rank() != 4 {
            return Err(Error::invalid(format!("global_avg_pool: need rank 4, got {:?}", v.shape())));
        }
        let (n, c, hw) = (v.shape()[0], v.shape()[1], v.shape()[2] * v.shape()[3]);
        let out = v.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(&[a]);
        self.push("global_avg_pool", Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(a.id), rg)
    }

    /// Applies a [`LinearMap`] to each sample along the leading axis.
    pub fn linear_map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let v = self.val(x)?;
        let ins = map.input_shape();
        let per_in: usize = ins.iter().product();
        if v.rank() != ins.len() + 1 || v.shape()[1..] != ins[..] {
            return Err(mismatch(map.name(), v.shape(), &ins));
        }
        let outs = map.output_shape();
        let per_out: usize = outs.iter().product();
        let n = v.shape()[0];
        let mut out = vec![0.0; n * per_out];
        for s in 0..n {
            map.forward(
                &v.data()[s * per_in..(s + 1) * per_in],
                &mut out[s * per_out..(s + 1) * per_out],
            );
        }
        let mut shape = vec![n];
        shape.extend(outs);
        let rg = self.rg(&[x]);
        let name = map.name();
        self.push(name, Tensor::from_parts(shape, out), Op::Linear { x: x.id, map }, rg)
    }

    /// Reverse pass from a scalar `loss`, returning d(loss)/d(wrt) for each
    /// requested var. Vars that do not require grad get zeros.
    pub fn gradient(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let lnode = self.node(loss)?;
        if lnode.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "gradient: loss must have one element, got shape {:?}",
                lnode.value.shape()
            )));
        }
        for &v in wrt {
            self.node(v)?;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        wrt.iter()
            .map(|v| {
                let shape = self.nodes[v.id].value.shape().to_vec();
                let data = match grads.get_mut(v.id).and_then(Option::take) {
                    Some(g) if self.nodes[v.id].requires_grad => g,
                    _ => vec![0.0; shape.iter().product()],
                };
                let t = Tensor::from_parts(shape, data);
                if t.is_finite() {
                    Ok(t)
                } else {
                    Err(Error::NonFinite { op: "gradient" })
                }
            })
            .collect()
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |id: usize| self.nodes[id].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&self.nodes, grads, *a, |d| add_into(d, g));
                accumulate(&self.nodes, grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(&self.nodes, grads, *a, |d| add_into(d, g));
                accumulate(&self.nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(&self.nodes, grads, *a, |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y)
                });
                accumulate(&self.nodes, grads, *b, |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x)
                });
            }
            Op::Scale(a, c) => {
                accumulate(&self.nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&self.nodes, grads, *a, |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                accumulate(&self.nodes, grads, *a, |d| kernels::matmul_nt_acc(g, val(*b), d, m, n, k));
                accumulate(&self.nodes, grads, *b, |d| kernels::matmul_tn_acc(val(*a), g, d, m, k, n));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let gt = kernels::transpose(g, s[0], s[1]);
                accumulate(&self.nodes, grads, *a, |d| add_into(d, &gt));
            }
            Op::Conv2d { x, w, b, geom, cols } => conv_backward(self, g, *x, *w, *b, geom, cols, grads),
            Op::Relu(a) => accumulate(&self.nodes, grads, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::LeakyRelu(a, slope) => accumulate(&self.nodes, grads, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += if *x > 0.0 { *g } else { slope * g };
                }
            }),
            Op::Silu(a) => accumulate(&self.nodes, grads, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    let s = sigmoid(*x);
                    *d += g * s * (1.0 + x * (1.0 - s));
                }
            }),
            Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(&self.nodes, grads, *a, |d| {
                    d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * (1.0 - y * y))
                })
            }
            Op::Sum(a) => accumulate(&self.nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                accumulate(&self.nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumLast(a) => {
                let c = *self.nodes[*a].value.shape().last().unwrap();
                accumulate(&self.nodes, grads, *a, |d| {
                    for (row, gv) in d.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                })
            }
            Op::LogSumExpLast { x, probs } => {
                let c = *self.nodes[*x].value.shape().last().unwrap();
                accumulate(&self.nodes, grads, *x, |d| {
                    for ((row, p), gv) in d.chunks_mut(c).zip(probs.chunks(c)).zip(g) {
                        row.iter_mut().zip(p).for_each(|(d, p)| *d += gv * p);
                    }
                })
            }
            Op::Square(a) => accumulate(&self.nodes, grads, *a, |d| {
                d.iter_mut().zip(g).zip(val(*a)).for_each(|((d, g), x)| *d += 2.0 * x * g)
            }),
            Op::Sqrt(a) => {
                let y = node.value.data();
                if y.iter().zip(g).any(|(y, g)| *y == 0.0 && *g != 0.0) {
                    return Err(Error::NonFinite { op: "sqrt(backward)" });
                }
                accumulate(&self.nodes, grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        if *g != 0.0 {
                            *d += 0.5 * g / y;
                        }
                    }
                })
            }
            Op::Abs(a) => accumulate(&self.nodes, grads, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    if *x > 0.0 {
                        *d += g;
                    } else if *x < 0.0 {
                        *d -= g;
                    }
                }
            }),
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(&self.nodes, grads, *a, |d| {
                    d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y)
                })
            }
            Op::Log(a) => accumulate(&self.nodes, grads, *a, |d| {
                d.iter_mut().zip(g).zip(val(*a)).for_each(|((d, g), x)| *d += g / x)
            }),
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                accumulate(&self.nodes, grads, *x, |d| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n < 1e-12 {
                            continue;
                        }
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &id in inputs {
                    let dsize = self.nodes[id].value.shape()[*axis];
                    accumulate(&self.nodes, grads, id, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + dsize) * inner];
                            add_into(&mut d[o * dsize * inner..(o + 1) * dsize * inner], src);
                        }
                    });
                    offset += dsize;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, d_in, inner) = split_axis(self.nodes[*x].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                accumulate(&self.nodes, grads, *x, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * d_in + start) * inner..(o * d_in + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                })
            }
            Op::UpsampleNearest { x, factor } => {
                let s = self.nodes[*x].value.shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                accumulate(&self.nodes, grads, *x, |d| {
                    for p in 0..s[0] * s[1] {
                        let src = &g[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut d[p * h * w..(p + 1) * h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                dst[(i / factor) * w + j / factor] += src[i * wo + j];
                            }
                        }
                    }
                })
            }
            Op::AddBias { x, b } => {
                let f = self.nodes[*b].value.numel();
                accumulate(&self.nodes, grads, *x, |d| add_into(d, g));
                accumulate(&self.nodes, grads, *b, |d| {
                    for row in g.chunks(f) {
                        add_into(d, row);
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[*a].value.shape();
                let hw = s[2] * s[3];
                accumulate(&self.nodes, grads, *a, |d| {
                    for (plane, gv) in d.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv / hw as f64);
                    }
                })
            }
            Op::Linear { x, map } => {
                let per_in: usize = map.input_shape().iter().product();
                let per_out: usize = map.output_shape().iter().product();
                let mut buf = vec![0.0; per_in];
                accumulate(&self.nodes, grads, *x, |d| {
                    for (s, gs) in g.chunks(per_out).enumerate() {
                        map.adjoint(gs, &mut buf);
                        add_into(&mut d[s * per_in..(s + 1) * per_in], &buf);
                    }
                })
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let len = g.len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * len..][..len];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let len = g.len();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * len..][..len];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    tape: &Tape,
    g: &[f64],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: &ConvGeom,
    cols: &Option<Vec<f64>>,
    grads: &mut [Option<Vec<f64>>],
) {
    let (rows, len) = (geom.rows(), geom.len());
    let per_out = geom.o * len;
    let per_in = geom.c * geom.h * geom.w;
    let wv = tape.nodes[w].value.data();
    if let Some(b) = b {
        accumulate(&tape.nodes, grads, b, |d| {
            for s in 0..geom.n {
                for (oc, chunk) in g[s * per_out..(s + 1) * per_out].chunks(len).enumerate() {
                    d[oc] += chunk.iter().sum::<f64>();
                }
            }
        });
    }
    if let Some(cols) = cols {
        accumulate(&tape.nodes, grads, w, |d| {
            for s in 0..geom.n {
                let gs = &g[s * per_out..(s + 1) * per_out];
                let cs = &cols[s * rows * len..(s + 1) * rows * len];
                kernels::matmul_nt_acc(gs, cs, d, geom.o, len, rows);
            }
        });
    }
    if tape.nodes[x].requires_grad {
        let mut gcols = vec![0.0; rows * len];
        accumulate(&tape.nodes, grads, x, |d| {
            for s in 0..geom.n {
                gcols.fill(0.0);
                kernels::matmul_tn_acc(wv, &g[s * per_out..(s + 1) * per_out], &mut gcols, geom.o, rows, len);
                col2im_acc(&gcols, geom, &mut d[s * per_in..(s + 1) * per_in]);
            }
        });
    }
}
