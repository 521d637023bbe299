//! Dense f64 tensors on a reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation eagerly; [`Tensor`] is a cheap handle
//! (node id + shape + shared tape). Calling [`Tensor::backward`] on a scalar
//! walks the tape once in reverse and accumulates adjoints into every node
//! that requires gradients.
//!
//! Broadcasting is deliberately narrow: elementwise ops accept equal shapes,
//! a scalar operand, or a right-aligned suffix shape (e.g. bias `[d]` against
//! activations `[b, t, d]`). Matmul broadcasts leading batch extents that are
//! equal, one, or absent.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014326779399460599343818684758586311649;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ---------------------------------------------------------------------------
// Tape

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
    check_finite: bool,
}

/// Shared recording of tensor operations for one forward/backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                macs: 0,
                check_finite: true,
            })),
        }
    }

    /// A tape that does not debug-assert finiteness of op outputs. Training
    /// loops use this so a diverging run surfaces as a reported error rather
    /// than a panic.
    pub fn permissive() -> Self {
        let t = Self::new();
        t.inner.borrow_mut().check_finite = false;
        t
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total multiply-accumulate operations performed by matmul so far.
    pub fn mac_count(&self) -> u64 {
        self.inner.borrow().macs
    }

    /// Leaf with no gradient tracking (inputs, constants).
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.make_leaf(data, shape, false)
    }

    /// Leaf that accumulates gradients (model parameters).
    pub fn param(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.make_leaf(data, shape, true)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.make_leaf(vec![value], &[], false).expect("scalar leaf")
    }

    fn make_leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                detail: format!("shape implies {} elements, got {}", numel(shape), data.len()),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        if inner.check_finite {
            debug_assert!(
                data.iter().all(|v| v.is_finite()),
                "non-finite value produced by {}",
                op.name()
            );
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape: shape.clone(),
            requires_grad,
            op,
        });
        Tensor {
            id,
            shape,
            requires_grad,
            tape: self.clone(),
        }
    }

    /// Concatenate along `axis`. All inputs must agree on every other extent.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0];
        if axis >= first.shape.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                shape: first.shape.clone(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if !Rc::ptr_eq(&self.inner, &p.tape.inner) {
                return Err(Error::TapeMismatch { op: "concat" });
            }
            if p.shape.len() != first.shape.len()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner_sz: usize = first.shape[axis + 1..].iter().product();

        let mut data = vec![0.0; numel(&out_shape)];
        {
            let tape = self.inner.borrow();
            let row = axis_total * inner_sz;
            let mut col = 0;
            for p in parts {
                let src = &tape.nodes[p.id].data;
                let block = p.shape[axis] * inner_sz;
                for o in 0..outer {
                    data[o * row + col..o * row + col + block]
                        .copy_from_slice(&src[o * block..(o + 1) * block]);
                }
                col += block;
            }
        }
        let requires_grad = parts.iter().any(|p| p.requires_grad);
        Ok(self.push(
            data,
            out_shape,
            requires_grad,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Operations

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Transpose {
        input: usize,
        axis_a: usize,
        axis_b: usize,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    LogSoftmax {
        input: usize,
        axis: usize,
    },
    Gelu(usize),
    Ln(usize),
    Clamp {
        input: usize,
        min: f64,
        max: f64,
    },
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    NllLoss {
        log_probs: usize,
        labels: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Matmul(..) => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Gelu(..) => "gelu",
            Op::Ln(..) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NllLoss { .. } => "nll_loss",
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcast planning for elementwise binary ops

enum EwPlan {
    Same,
    /// lhs repeats: lhs numel divides rhs numel, output takes rhs shape.
    LhsRepeats,
    /// rhs repeats: output takes lhs shape.
    RhsRepeats,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn ew_plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Vec<usize>, EwPlan)> {
    if lhs == rhs {
        return Ok((lhs.to_vec(), EwPlan::Same));
    }
    if numel(rhs) == 1 || is_suffix(rhs, lhs) {
        return Ok((lhs.to_vec(), EwPlan::RhsRepeats));
    }
    if numel(lhs) == 1 || is_suffix(lhs, rhs) {
        return Ok((rhs.to_vec(), EwPlan::LhsRepeats));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Matmul planning: [..batch, n, k] x [..batch, k, m] -> [..batch, n, m]

struct MatmulPlan {
    batch: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
    n: usize,
    k: usize,
    m: usize,
}

fn matmul_plan(lhs: &[usize], rhs: &[usize]) -> Result<MatmulPlan> {
    if lhs.len() < 2 || rhs.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let (n, k) = (lhs[lhs.len() - 2], lhs[lhs.len() - 1]);
    let (k2, m) = (rhs[rhs.len() - 2], rhs[rhs.len() - 1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let lb = &lhs[..lhs.len() - 2];
    let rb = &rhs[..rhs.len() - 2];
    let rank = lb.len().max(rb.len());
    let mut batch = vec![0usize; rank];
    for i in 0..rank {
        let a = if i < rank - lb.len() { 1 } else { lb[i - (rank - lb.len())] };
        let b = if i < rank - rb.len() { 1 } else { rb[i - (rank - rb.len())] };
        batch[i] = if a == b || b == 1 {
            a
        } else if a == 1 {
            b
        } else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    // Per-side flat strides over the batch index, zero where broadcast.
    let side_strides = |side: &[usize]| -> Vec<usize> {
        let mut strides = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..side.len()).rev() {
            let pos = rank - side.len() + i;
            if side[i] == batch[pos] && side[i] != 1 {
                strides[pos] = acc;
            } else if side[i] == 1 && batch[pos] != 1 {
                strides[pos] = 0;
            } else {
                strides[pos] = acc;
            }
            acc *= side[i];
        }
        strides
    };
    Ok(MatmulPlan {
        lhs_strides: side_strides(lb),
        rhs_strides: side_strides(rb),
        batch,
        n,
        k,
        m,
    })
}

impl MatmulPlan {
    fn batch_len(&self) -> usize {
        self.batch.iter().product::<usize>().max(1)
    }

    /// Map a flat output-batch index to (lhs, rhs) flat batch indices.
    fn side_indices(&self, mut flat: usize) -> (usize, usize) {
        let mut l = 0;
        let mut r = 0;
        for (i, &dim) in self.batch.iter().enumerate().rev() {
            let idx = flat % dim;
            flat /= dim;
            l += idx * self.lhs_strides[i];
            r += idx * self.rhs_strides[i];
        }
        (l, r)
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.n);
        s.push(self.m);
        s
    }
}

/// c[n,m] += a[n,k] * b[k,m]
fn mm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[n,k] += a[n,m] * b[k,m]^T  (row-by-row dot products)
fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,m] += a[n,k]^T * b[n,m]
fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Axis lane iteration: visit each 1-d lane along `axis` of `shape`.

fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn transpose_copy(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        // idx is the multi-index into the output; swap a,b to index the input.
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            let src_dim = if d == a { b } else if d == b { a } else { d };
            off += i * in_strides[src_dim];
        }
        *slot = data[off];
        // odometer increment over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + erf(x / SQRT_2));
    let phi_small = (-0.5 * x * x).exp() * INV_SQRT_2PI;
    phi_big + x * phi_small
}

// ---------------------------------------------------------------------------
// Tensor handle

/// Handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    id: usize,
    shape: Vec<usize>,
    requires_grad: bool,
    tape: Tape,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Copy of the node's value buffer.
    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Scalar value; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                detail: "expected a single element".into(),
            });
        }
        Ok(self.tape.inner.borrow().nodes[self.id].data[0])
    }

    /// Gradient accumulated by the most recent [`Tensor::backward`], if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads.get(self.id).and_then(|g| g.clone())
    }

    fn same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::TapeMismatch { op })
        }
    }

    fn binary(&self, rhs: &Tensor, op_name: &'static str, op: Op) -> Result<Tensor> {
        self.same_tape(rhs, op_name)?;
        let (out_shape, plan) = ew_plan(op_name, &self.shape, &rhs.shape)?;
        let data = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[rhs.id].data;
            let combine: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                Op::Mul(..) => |x, y| x * y,
                _ => unreachable!(),
            };
            match plan {
                EwPlan::Same => a.iter().zip(b).map(|(&x, &y)| combine(x, y)).collect(),
                EwPlan::RhsRepeats => {
                    let bn = b.len();
                    a.iter()
                        .enumerate()
                        .map(|(i, &x)| combine(x, b[i % bn]))
                        .collect()
                }
                EwPlan::LhsRepeats => {
                    let an = a.len();
                    b.iter()
                        .enumerate()
                        .map(|(i, &y)| combine(a[i % an], y))
                        .collect()
                }
            }
        };
        let req = self.requires_grad || rhs.requires_grad;
        Ok(self.tape.push(data, out_shape, req, op))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.map_values(|x| x + c);
        self.tape
            .push(data, self.shape.clone(), self.requires_grad, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.map_values(|x| x * c);
        self.tape.push(
            data,
            self.shape.clone(),
            self.requires_grad,
            Op::MulScalar(self.id, c),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id]
            .data
            .iter()
            .map(|&x| f(x))
            .collect()
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_tape(rhs, "matmul")?;
        let plan = matmul_plan(&self.shape, &rhs.shape)?;
        let out_shape = plan.out_shape();
        let data = {
            let mut inner = self.tape.inner.borrow_mut();
            let batches = plan.batch_len();
            let (n, k, m) = (plan.n, plan.k, plan.m);
            inner.macs += (batches * n * k * m) as u64;
            let mut out = vec![0.0; batches * n * m];
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[rhs.id].data;
            for ob in 0..batches {
                let (la, rb) = plan.side_indices(ob);
                mm_nn_acc(
                    &mut out[ob * n * m..(ob + 1) * n * m],
                    &a[la * n * k..(la + 1) * n * k],
                    &b[rb * k * m..(rb + 1) * k * m],
                    n,
                    k,
                    m,
                );
            }
            out
        };
        let req = self.requires_grad || rhs.requires_grad;
        Ok(self
            .tape
            .push(data, out_shape, req, Op::Matmul(self.id, rhs.id)))
    }

    /// Swap two axes (copying).
    pub fn transpose(&self, axis_a: usize, axis_b: usize) -> Result<Tensor> {
        for &ax in &[axis_a, axis_b] {
            if ax >= self.shape.len() {
                return Err(Error::InvalidAxis {
                    op: "transpose",
                    axis: ax,
                    shape: self.shape.clone(),
                });
            }
        }
        let (data, out_shape) = {
            let inner = self.tape.inner.borrow();
            transpose_copy(&inner.nodes[self.id].data, &self.shape, axis_a, axis_b)
        };
        Ok(self.tape.push(
            data,
            out_shape,
            self.requires_grad,
            Op::Transpose {
                input: self.id,
                axis_a,
                axis_b,
            },
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                detail: format!("cannot reshape {:?} ({} elements)", self.shape, self.numel()),
            });
        }
        let data = self.value();
        Ok(self
            .tape
            .push(data, new_shape.to_vec(), self.requires_grad, Op::Reshape(self.id)))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                shape: self.shape.clone(),
            });
        }
        if start + len > self.shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                detail: format!("range {}..{} exceeds axis {}", start, start + len, axis),
            });
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let src_block = self.shape[axis] * inner_sz;
        let dst_block = len * inner_sz;
        let data = {
            let inner = self.tape.inner.borrow();
            let src = &inner.nodes[self.id].data;
            let mut out = vec![0.0; outer * dst_block];
            for o in 0..outer {
                out[o * dst_block..(o + 1) * dst_block].copy_from_slice(
                    &src[o * src_block + start * inner_sz..o * src_block + (start + len) * inner_sz],
                );
            }
            out
        };
        Ok(self.tape.push(
            data,
            out_shape,
            self.requires_grad,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.tape.inner.borrow().nodes[self.id].data.iter().sum();
        self.tape
            .push(vec![total], vec![], self.requires_grad, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let data = &inner.nodes[self.id].data;
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        drop(inner);
        self.tape
            .push(vec![mean], vec![], self.requires_grad, Op::Mean(self.id))
    }

    /// Numerically stabilized softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("softmax", axis)?;
        let data = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            for_each_lane(&self.shape, axis, |base, stride, len| {
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[base + j * stride]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (x[base + j * stride] - max).exp();
                    out[base + j * stride] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[base + j * stride] /= denom;
                }
            });
            out
        };
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            self.requires_grad,
            Op::Softmax {
                input: self.id,
                axis,
            },
        ))
    }

    /// log softmax along `axis` via the log-sum-exp stable form.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("log_softmax", axis)?;
        let data = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            for_each_lane(&self.shape, axis, |base, stride, len| {
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[base + j * stride]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    denom += (x[base + j * stride] - max).exp();
                }
                let lse = max + denom.ln();
                for j in 0..len {
                    out[base + j * stride] = x[base + j * stride] - lse;
                }
            });
            out
        };
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            self.requires_grad,
            Op::LogSoftmax {
                input: self.id,
                axis,
            },
        ))
    }

    /// Exact Gaussian-CDF GELU: x * Phi(x).
    pub fn gelu(&self) -> Tensor {
        let data = self.map_values(gelu_scalar);
        self.tape
            .push(data, self.shape.clone(), self.requires_grad, Op::Gelu(self.id))
    }

    pub fn ln(&self) -> Tensor {
        let data = self.map_values(f64::ln);
        self.tape
            .push(data, self.shape.clone(), self.requires_grad, Op::Ln(self.id))
    }

    pub fn clamp(&self, min: f64, max: f64) -> Tensor {
        let data = self.map_values(|x| x.clamp(min, max));
        self.tape.push(
            data,
            self.shape.clone(),
            self.requires_grad,
            Op::Clamp {
                input: self.id,
                min,
                max,
            },
        )
    }

    /// Per-lane normalization over the last axis with learnable affine.
    /// Pre-affine output has population mean 0 and std 1 up to `eps` effects.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_tape(gamma, "layer_norm")?;
        self.same_tape(beta, "layer_norm")?;
        let d = *self.shape.last().ok_or_else(|| Error::InvalidShape {
            op: "layer_norm",
            shape: self.shape.clone(),
            detail: "rank must be >= 1".into(),
        })?;
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let g = &inner.nodes[gamma.id].data;
            let b = &inner.nodes[beta.id].data;
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    orow[j] = (row[j] - mu) * inv * g[j] + b[j];
                }
            }
            out
        };
        let req = self.requires_grad || gamma.requires_grad || beta.requires_grad;
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            req,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    /// Mean of -log_probs[i, labels[i]] over the batch (negative log likelihood).
    pub fn nll_loss(&self, labels: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "nll_loss",
                shape: self.shape.clone(),
                detail: format!("expected [batch={}, classes]", labels.len()),
            });
        }
        let classes = self.shape[1];
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let lp = &inner.nodes[self.id].data;
            let mut acc = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                acc -= lp[i * classes + l];
            }
            acc / labels.len() as f64
        };
        Ok(self.tape.push(
            vec![value],
            vec![],
            self.requires_grad,
            Op::NllLoss {
                log_probs: self.id,
                labels: labels.to_vec(),
            },
        ))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Reverse pass from this scalar: populates gradients for every node with
    /// `requires_grad`. Each recorded op is visited exactly once; calling
    /// backward again replays the same adjoints from scratch.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        let mut inner = self.tape.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads.clear();
        inner.grads.resize_with(n, || None);
        inner.grads[self.id] = Some(vec![1.0]);
        let TapeInner { nodes, grads, .. } = &mut *inner;
        for id in (0..=self.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(id);
            let gout = hi[0].as_ref().expect("checked above");
            backward_op(nodes, id, gout, lo);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Backward kernels. Inputs always have smaller node ids than outputs, so the
// adjoint of node `id` is complete before its inputs are visited.

fn grad_buf<'a>(
    nodes: &[Node],
    lo: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(lo[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]))
}

fn backward_op(nodes: &[Node], id: usize, gout: &[f64], lo: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(nodes, lo, *a) {
                accumulate_broadcast(ga, gout, 1.0);
            }
            if let Some(gb) = grad_buf(nodes, lo, *b) {
                accumulate_broadcast(gb, gout, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_buf(nodes, lo, *a) {
                accumulate_broadcast(ga, gout, 1.0);
            }
            if let Some(gb) = grad_buf(nodes, lo, *b) {
                accumulate_broadcast(gb, gout, -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (an, bn) = (nodes[*a].data.len(), nodes[*b].data.len());
            if nodes[*a].requires_grad {
                let bdata = &nodes[*b].data;
                let ga = grad_buf(nodes, lo, *a).expect("requires_grad checked");
                for (i, &g) in gout.iter().enumerate() {
                    ga[i % an] += g * bdata[i % bn];
                }
            }
            if nodes[*b].requires_grad {
                let adata = &nodes[*a].data;
                let gb = grad_buf(nodes, lo, *b).expect("requires_grad checked");
                for (i, &g) in gout.iter().enumerate() {
                    gb[i % bn] += g * adata[i % an];
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = grad_buf(nodes, lo, *a) {
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go;
                }
            }
        }
        Op::MulScalar(a, c) => {
            if let Some(ga) = grad_buf(nodes, lo, *a) {
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go * c;
                }
            }
        }
        Op::Matmul(a, b) => {
            let plan = matmul_plan(&nodes[*a].shape, &nodes[*b].shape).expect("planned in forward");
            let (n, k, m) = (plan.n, plan.k, plan.m);
            if nodes[*a].requires_grad {
                let bdata = &nodes[*b].data;
                let ga = grad_buf(nodes, lo, *a).expect("requires_grad checked");
                for ob in 0..plan.batch_len() {
                    let (la, rb) = plan.side_indices(ob);
                    mm_nt_acc(
                        &mut ga[la * n * k..(la + 1) * n * k],
                        &gout[ob * n * m..(ob + 1) * n * m],
                        &bdata[rb * k * m..(rb + 1) * k * m],
                        n,
                        m,
                        k,
                    );
                }
            }
            if nodes[*b].requires_grad {
                let adata = &nodes[*a].data;
                let gb = grad_buf(nodes, lo, *b).expect("requires_grad checked");
                for ob in 0..plan.batch_len() {
                    let (la, rb) = plan.side_indices(ob);
                    mm_tn_acc(
                        &mut gb[rb * k * m..(rb + 1) * k * m],
                        &adata[la * n * k..(la + 1) * n * k],
                        &gout[ob * n * m..(ob + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
            }
        }
        Op::Transpose {
            input,
            axis_a,
            axis_b,
        } => {
            if nodes[*input].requires_grad {
                let (gt, _) = transpose_copy(gout, &nodes[id].shape, *axis_a, *axis_b);
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for (g, &v) in gi.iter_mut().zip(&gt) {
                    *g += v;
                }
            }
        }
        Op::Reshape(input) => {
            if let Some(gi) = grad_buf(nodes, lo, *input) {
                for (g, &v) in gi.iter_mut().zip(gout) {
                    *g += v;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let axis = *axis;
            let out_shape = &nodes[id].shape;
            let inner_sz: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..axis].iter().product();
            let row = out_shape[axis] * inner_sz;
            let mut col = 0;
            for &inp in inputs {
                let block = nodes[inp].shape[axis] * inner_sz;
                if nodes[inp].requires_grad {
                    let gi = grad_buf(nodes, lo, inp).expect("requires_grad checked");
                    for o in 0..outer {
                        let src = &gout[o * row + col..o * row + col + block];
                        for (g, &v) in gi[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
                col += block;
            }
        }
        Op::Slice { input, axis, start } => {
            if nodes[*input].requires_grad {
                let in_shape = &nodes[*input].shape;
                let out_len = nodes[id].shape[*axis];
                let inner_sz: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let src_block = in_shape[*axis] * inner_sz;
                let dst_block = out_len * inner_sz;
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for o in 0..outer {
                    let dst = &mut gi
                        [o * src_block + start * inner_sz..o * src_block + (start + out_len) * inner_sz];
                    for (g, &v) in dst.iter_mut().zip(&gout[o * dst_block..(o + 1) * dst_block]) {
                        *g += v;
                    }
                }
            }
        }
        Op::Sum(input) => {
            if let Some(gi) = grad_buf(nodes, lo, *input) {
                for g in gi.iter_mut() {
                    *g += gout[0];
                }
            }
        }
        Op::Mean(input) => {
            if nodes[*input].requires_grad {
                let scale = 1.0 / nodes[*input].data.len() as f64;
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for g in gi.iter_mut() {
                    *g += gout[0] * scale;
                }
            }
        }
        Op::Softmax { input, axis } => {
            if nodes[*input].requires_grad {
                let y = &nodes[id].data;
                let shape = nodes[id].shape.clone();
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for_each_lane(&shape, *axis, |base, stride, len| {
                    let mut dot = 0.0;
                    for j in 0..len {
                        dot += gout[base + j * stride] * y[base + j * stride];
                    }
                    for j in 0..len {
                        let idx = base + j * stride;
                        gi[idx] += (gout[idx] - dot) * y[idx];
                    }
                });
            }
        }
        Op::LogSoftmax { input, axis } => {
            if nodes[*input].requires_grad {
                let logp = &nodes[id].data;
                let shape = nodes[id].shape.clone();
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for_each_lane(&shape, *axis, |base, stride, len| {
                    let mut gsum = 0.0;
                    for j in 0..len {
                        gsum += gout[base + j * stride];
                    }
                    for j in 0..len {
                        let idx = base + j * stride;
                        gi[idx] += gout[idx] - logp[idx].exp() * gsum;
                    }
                });
            }
        }
        Op::Gelu(input) => {
            if nodes[*input].requires_grad {
                let x = &nodes[*input].data;
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for i in 0..x.len() {
                    gi[i] += gout[i] * gelu_grad_scalar(x[i]);
                }
            }
        }
        Op::Ln(input) => {
            if nodes[*input].requires_grad {
                let x = &nodes[*input].data;
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for i in 0..x.len() {
                    gi[i] += gout[i] / x[i];
                }
            }
        }
        Op::Clamp { input, min, max } => {
            if nodes[*input].requires_grad {
                let x = &nodes[*input].data;
                let (min, max) = (*min, *max);
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for i in 0..x.len() {
                    if x[i] >= min && x[i] <= max {
                        gi[i] += gout[i];
                    }
                }
            }
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            eps,
        } => {
            let d = *nodes[id].shape.last().expect("layer_norm rank >= 1");
            let x = &nodes[*input].data;
            let g = &nodes[*gamma].data;
            // Recompute per-lane statistics; cheaper than storing them.
            if nodes[*gamma].requires_grad || nodes[*beta].requires_grad {
                let want_gamma = nodes[*gamma].requires_grad;
                if want_gamma {
                    let gg = grad_buf(nodes, lo, *gamma).expect("requires_grad checked");
                    for (row, grow) in x.chunks_exact(d).zip(gout.chunks_exact(d)) {
                        let mu = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..d {
                            gg[j] += grow[j] * (row[j] - mu) * inv;
                        }
                    }
                }
                if nodes[*beta].requires_grad {
                    let gb = grad_buf(nodes, lo, *beta).expect("requires_grad checked");
                    for grow in gout.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                }
            }
            if nodes[*input].requires_grad {
                let gi = grad_buf(nodes, lo, *input).expect("requires_grad checked");
                for ((row, grow), girow) in x
                    .chunks_exact(d)
                    .zip(gout.chunks_exact(d))
                    .zip(gi.chunks_exact_mut(d))
                {
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let gh = grow[j] * g[j];
                        mean_gh += gh;
                        mean_gh_xhat += gh * xhat;
                    }
                    mean_gh /= d as f64;
                    mean_gh_xhat /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let gh = grow[j] * g[j];
                        girow[j] += inv * (gh - mean_gh - xhat * mean_gh_xhat);
                    }
                }
            }
        }
        Op::NllLoss { log_probs, labels } => {
            if nodes[*log_probs].requires_grad {
                let classes = nodes[*log_probs].shape[1];
                let scale = gout[0] / labels.len() as f64;
                let gi = grad_buf(nodes, lo, *log_probs).expect("requires_grad checked");
                for (i, &l) in labels.iter().enumerate() {
                    gi[i * classes + l] -= scale;
                }
            }
        }
    }
}

/// Accumulate `gout * sign` into `target`, summing over broadcast repeats
/// when the target buffer is smaller than the adjoint.
fn accumulate_broadcast(target: &mut [f64], gout: &[f64], sign: f64) {
    let tn = target.len();
    if tn == gout.len() {
        for (t, &g) in target.iter_mut().zip(gout) {
            *t += sign * g;
        }
    } else {
        for (i, &g) in gout.iter().enumerate() {
            target[i % tn] += sign * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let a = tape.leaf(vec![3.0, -1.0, 2.5, 4.0], &[2, 2]).unwrap();
        let out = i2.matmul(&a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn matmul_row_sums() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let ones = tape.leaf(vec![1.0, 1.0], &[2, 1]).unwrap();
        let out = a.matmul(&ones).unwrap();
        assert_eq!(out.value(), vec![3.0, 7.0]);
        assert_eq!(out.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = randn(&mut rng, 12);
        let b = randn(&mut rng, 20);
        let tape = Tape::new();
        let ta = tape.leaf(a.clone(), &[3, 4]).unwrap();
        let tb = tape.leaf(b.clone(), &[4, 5]).unwrap();
        let out = ta.matmul(&tb).unwrap().value();
        // independent triple-loop oracle
        let mut expect = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a[i * 4 + p] * b[p * 5 + j];
                }
                expect[i * 5 + j] = acc;
            }
        }
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.leaf(vec![0.0; 8], &[4, 2]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_batched_broadcast() {
        // [2, 2, 3] x [3, 2]: shared rhs across the batch.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 12);
        let b = randn(&mut rng, 6);
        let tape = Tape::new();
        let ta = tape.leaf(a.clone(), &[2, 2, 3]).unwrap();
        let tb = tape.leaf(b.clone(), &[3, 2]).unwrap();
        let out = ta.matmul(&tb).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        let v = out.value();
        for bat in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..3 {
                        acc += a[bat * 6 + i * 3 + p] * b[p * 2 + j];
                    }
                    assert!((v[bat * 4 + i * 2 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_trivial_cases() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0], &[2]).unwrap();
        let s = x.softmax(0).unwrap().value();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);

        let x = tape.leaf(vec![2.0f64.ln(), 0.0], &[2]).unwrap();
        let s = x.softmax(0).unwrap().value();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 7);
        let tape = Tape::new();
        let t = tape.leaf(x.clone(), &[7]).unwrap();
        let got = t.softmax(0).unwrap().value();
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        for (g, v) in got.iter().zip(&x) {
            assert!((g - v.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = randn(&mut rng, 12);
            let tape = Tape::new();
            let t = tape.leaf(x.clone(), &[3, 4]).unwrap();
            let s = t.softmax(1).unwrap().value();
            for row in s.chunks_exact(4) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
            let shift: f64 = rng.random_range(-50.0..50.0);
            let t2 = tape
                .leaf(x.iter().map(|v| v + shift).collect(), &[3, 4])
                .unwrap();
            let s2 = t2.softmax(1).unwrap().value();
            for (a, b) in s.iter().zip(&s2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_known_values() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0, 10.0, 1.0], &[3]).unwrap();
        let y = x.gelu().value();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        // erf-based oracle for x = 1
        let phi1 = 0.5 * (1.0 + libm::erf(1.0 / SQRT_2));
        assert!((y[2] - phi1).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_replay_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.param(randn(&mut rng, 8), &[2, 4]).unwrap();
        let w = tape.param(randn(&mut rng, 12), &[4, 3]).unwrap();
        let loss = x.matmul(&w).unwrap().gelu().sum();
        loss.backward().unwrap();
        let g1x = x.grad().unwrap();
        let g1w = w.grad().unwrap();
        loss.backward().unwrap();
        assert_eq!(g1x, x.grad().unwrap());
        assert_eq!(g1w, w.grad().unwrap());
    }

    #[test]
    fn reshape_transpose_roundtrip_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = randn(&mut rng, 24);
        let tape = Tape::new();
        let x = tape.leaf(data.clone(), &[2, 3, 4]).unwrap();
        let back = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(back.value(), data);
        let t2 = x.transpose(0, 2).unwrap().transpose(0, 2).unwrap();
        assert_eq!(t2.value(), data);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape
            .leaf((0..12).map(|v| v as f64).collect(), &[2, 3, 2])
            .unwrap();
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 2).unwrap();
        let joined = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(joined.value(), x.value());
    }

    #[test]
    fn layer_norm_closed_form() {
        let tape = Tape::new();
        let gamma = tape.leaf(vec![1.0, 1.0], &[2]).unwrap();
        let beta = tape.leaf(vec![0.0, 0.0], &[2]).unwrap();
        let x = tape.leaf(vec![1.0, 3.0], &[1, 2]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 0.0).unwrap().value();
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
    }

    // One scalar-valued program per op family, reused by the analytic pass
    // and the finite-difference oracle.
    fn op_loss(
        which: usize,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        b: &[f64],
        labels: &[usize],
    ) -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let tx = tape.param(x.to_vec(), &[3, 4]).unwrap();
        let tw = tape.param(w.to_vec(), &[4, 3]).unwrap();
        let tg = tape.param(g.to_vec(), &[4]).unwrap();
        let tb = tape.param(b.to_vec(), &[4]).unwrap();
        let loss = match which {
            0 => tx.matmul(&tw).unwrap().sum(),
            1 => tx.softmax(1).unwrap().mul(&tx).unwrap().sum(),
            2 => tx.gelu().mean(),
            3 => tx.layer_norm(&tg, &tb, 1e-5).unwrap().gelu().sum(),
            4 => tx.log_softmax(1).unwrap().nll_loss(labels).unwrap(),
            5 => tx.transpose(0, 1).unwrap().matmul(&tx).unwrap().mean(),
            6 => tx.add(&tg).unwrap().mul(&tx).unwrap().sum(),
            7 => tx.clamp(-0.8, 0.8).sum(),
            _ => tx
                .slice(1, 1, 2)
                .unwrap()
                .mul_scalar(3.0)
                .add_scalar(1.0)
                .sum(),
        };
        loss.backward().unwrap();
        (loss.item().unwrap(), vec![tx, tw, tg, tb])
    }

    // Finite-difference property check over every differentiable op.
    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = randn(&mut rng, 12);
            let w0 = randn(&mut rng, 12);
            let g0: Vec<f64> = randn(&mut rng, 4).iter().map(|v| 1.0 + 0.1 * v).collect();
            let b0 = randn(&mut rng, 4);
            let labels = vec![
                rng.random_range(0..4usize),
                rng.random_range(0..4usize),
                rng.random_range(0..4usize),
            ];
            let which = (seed % 9) as usize;

            let (_, params) = op_loss(which, &x0, &w0, &g0, &b0, &labels);
            let gx = params[0].grad().unwrap_or_else(|| vec![0.0; 12]);
            let fd_x = central_difference(
                &mut |x| op_loss(which, x, &w0, &g0, &b0, &labels).0,
                &x0,
                1e-5,
            );
            let err = max_rel_error(&gx, &fd_x, 1e-2);
            assert!(err < 1e-4, "seed {seed} op {which}: x grad err {err}");

            if which == 0 {
                let gw = params[1].grad().unwrap();
                let fd_w = central_difference(
                    &mut |w| op_loss(0, &x0, w, &g0, &b0, &labels).0,
                    &w0,
                    1e-5,
                );
                let err = max_rel_error(&gw, &fd_w, 1e-2);
                assert!(err < 1e-4, "seed {seed}: w grad err {err}");
            }
            if which == 3 {
                let gg = params[2].grad().unwrap();
                let fd_g = central_difference(
                    &mut |g| op_loss(3, &x0, &w0, g, &b0, &labels).0,
                    &g0,
                    1e-5,
                );
                let err = max_rel_error(&gg, &fd_g, 1e-2);
                assert!(err < 1e-4, "seed {seed}: gamma grad err {err}");
                let gb = params[3].grad().unwrap();
                let fd_b = central_difference(
                    &mut |b| op_loss(3, &x0, &w0, &g0, b, &labels).0,
                    &b0,
                    1e-5,
                );
                let err = max_rel_error(&gb, &fd_b, 1e-2);
                assert!(err < 1e-4, "seed {seed}: beta grad err {err}");
            }
        }
    }

    #[test]
    fn broadcast_add_sums_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0; 6], &[2, 3]).unwrap();
        let b = tape.param(vec![0.5, -0.5, 1.0], &[3]).unwrap();
        let loss = x.add(&b).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn tape_mismatch_is_reported() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(vec![1.0], &[1]).unwrap();
        let b = t2.leaf(vec![1.0], &[1]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch { .. })));
    }

    #[test]
    fn mac_counter_counts_matmul_only() {
        let tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.leaf(vec![0.0; 12], &[3, 4]).unwrap();
        let c = a.matmul(&b).unwrap();
        let _ = c.gelu().softmax(1).unwrap();
        assert_eq!(tape.mac_count(), 2 * 3 * 4);
    }
}
