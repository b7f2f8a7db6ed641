//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Parameters
//! enter through [`Tape::bind`]; frozen parameters (and plain inputs) enter as
//! constants and never receive gradient. [`Tape::backward`] walks the tape in
//! reverse and returns the gradient of a scalar loss for every bound
//! trainable parameter. The tape is rebuilt for each step.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::params::{ParamKey, Parameterized, Variable};
use crate::tensor::{gemm, Scalar, Tensor};

/// Operation family, used in diagnostics and by the self-check fault injector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRowBias,
    MatMul,
    BatchedMatMul,
    Conv2d,
    ConvTranspose2d,
    LocationMajor,
    Reshape,
    SliceOuter,
    GatherOuter,
    ConcatOuter,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Square,
    Softplus,
    Sum,
    Mean,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddRowBias,
        OpKind::MatMul,
        OpKind::BatchedMatMul,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::LocationMajor,
        OpKind::Reshape,
        OpKind::SliceOuter,
        OpKind::GatherOuter,
        OpKind::ConcatOuter,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Square,
        OpKind::Softplus,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::MatMul => "matmul",
            OpKind::BatchedMatMul => "batched_matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::LocationMajor => "location_major",
            OpKind::Reshape => "reshape",
            OpKind::SliceOuter => "slice_outer",
            OpKind::GatherOuter => "gather_outer",
            OpKind::ConcatOuter => "concat_outer",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Square => "square",
            OpKind::Softplus => "softplus",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRowBias(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `out[l] = a[l] · b[l]ᵀ`; `a` may be shared across `l`.
    BatchedMatMulNT {
        a: usize,
        b: usize,
        shared_a: bool,
        l: usize,
        rows: usize,
        cols: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        out_c: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        /// Geometry of the forward convolution this op transposes
        /// (its input is our output).
        geom: ConvGeom,
        in_c: usize,
        x_cm: Vec<T>,
    },
    LocationMajor {
        x: usize,
        batch: usize,
        ch: usize,
        pos: usize,
    },
    Reshape(usize),
    SliceOuter {
        x: usize,
        start: usize,
    },
    GatherOuter {
        x: usize,
        rows: Vec<usize>,
    },
    ConcatOuter(Vec<usize>),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
        k: usize,
    },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchedMatMulNT { .. } => OpKind::BatchedMatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::LocationMajor { .. } => OpKind::LocationMajor,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceOuter { .. } => OpKind::SliceOuter,
            Op::GatherOuter { .. } => OpKind::GatherOuter,
            Op::ConcatOuter(..) => OpKind::ConcatOuter,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Exp(..) => OpKind::Exp,
            Op::Square(..) => OpKind::Square,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamKey, usize>>,
    fault: Cell<Option<OpKind>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar> {
    by_key: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, p: &Variable<T>) -> Option<&Tensor<T>> {
        self.by_key.get(&p.key())
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Accumulates into every matching parameter's grad slot.
    pub fn accumulate_into<M: Parameterized<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        for p in model.params_mut() {
            if let Some(g) = self.by_key.get(&p.key()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            fault: Cell::new(None),
        }
    }

    /// Corrupts the backward rule of `kind` by scaling its input gradients.
    /// Exists so the self-check can prove it detects broken derivatives.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter. Trainable parameters receive gradients; repeated
    /// binds of the same parameter share one node.
    pub fn bind(&self, p: &Variable<T>) -> Var<'_, T> {
        if let Some(&id) = self.bound.borrow().get(&p.key()) {
            return Var { tape: self, id };
        }
        let v = self.push(p.value().clone(), Op::Leaf, p.trainable());
        self.nodes.borrow_mut()[v.id].param = Some(p.key());
        self.bound.borrow_mut().insert(p.key(), v.id);
        v
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn req(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Hash of every relu's on/off pattern; changes iff some unit crossed its kink.
    pub fn activation_pattern(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in nodes.iter() {
            if let Op::Relu(_) = node.op {
                for &x in node.value.data() {
                    h ^= (x > T::zero()) as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut out = Gradients::default();
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(key) = node.param {
                    match out.by_key.get_mut(&key) {
                        Some(acc) => add_into(acc.data_mut(), g.data()),
                        None => {
                            out.by_key.insert(key, g);
                        }
                    }
                }
                continue;
            }
            let mut parents = backward_op(&nodes, node, &g);
            if fault == Some(node.op.kind()) {
                for (_, pg) in parents.iter_mut() {
                    *pg = pg.map(|x| x * T::of(1.25));
                }
            }
            for (pid, pg) in parents {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => add_into(acc.data_mut(), pg.data()),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and accumulates into `model`'s grad slots.
    pub fn backward_into<M: Parameterized<T> + ?Sized>(&self, loss: Var<'_, T>, model: &mut M) -> Result<()> {
        self.backward(loss)?.accumulate_into(model)
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Gradients with respect to each input of `node`, given the output gradient `g`.
fn backward_op<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |id: usize| nodes[id].value.as_ref();
    let req = |id: usize| nodes[id].requires_grad;
    let out = node.value.as_ref();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let mut v = Vec::new();
            if req(*a) {
                v.push((*a, g.zip_map(val(*b), |x, y| x * y).unwrap()));
            }
            if req(*b) {
                v.push((*b, g.zip_map(val(*a), |x, y| x * y).unwrap()));
            }
            v
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::AddRowBias(x, b) => {
            let width = val(*b).numel();
            let mut gb = vec![T::zero(); width];
            for row in g.data().chunks(width) {
                add_into(&mut gb, row);
            }
            vec![(*x, g.clone()), (*b, Tensor::from_parts(vec![width], gb))]
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let mut v = Vec::new();
            if req(*a) {
                let mut da = vec![T::zero(); m * k];
                if !*ta {
                    gemm(m, n, k, g.data(), false, val(*b).data(), !*tb, &mut da, T::zero());
                } else {
                    gemm(k, n, m, val(*b).data(), *tb, g.data(), true, &mut da, T::zero());
                }
                v.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), da)));
            }
            if req(*b) {
                let mut db = vec![T::zero(); k * n];
                if !*tb {
                    gemm(k, m, n, val(*a).data(), !*ta, g.data(), false, &mut db, T::zero());
                } else {
                    gemm(n, m, k, g.data(), true, val(*a).data(), *ta, &mut db, T::zero());
                }
                v.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), db)));
            }
            v
        }
        Op::BatchedMatMulNT {
            a,
            b,
            shared_a,
            l,
            rows,
            cols,
            inner,
        } => {
            let (l, r, c, k) = (*l, *rows, *cols, *inner);
            let av = val(*a).data();
            let bv = val(*b).data();
            let mut v = Vec::new();
            if req(*a) {
                let mut da = vec![T::zero(); if *shared_a { r * k } else { l * r * k }];
                for li in 0..l {
                    let gl = &g.data()[li * r * c..(li + 1) * r * c];
                    let bl = &bv[li * c * k..(li + 1) * c * k];
                    if *shared_a {
                        gemm(r, c, k, gl, false, bl, false, &mut da, T::one());
                    } else {
                        gemm(r, c, k, gl, false, bl, false, &mut da[li * r * k..(li + 1) * r * k], T::zero());
                    }
                }
                v.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), da)));
            }
            if req(*b) {
                let mut db = vec![T::zero(); l * c * k];
                for li in 0..l {
                    let gl = &g.data()[li * r * c..(li + 1) * r * c];
                    let al = if *shared_a { av } else { &av[li * r * k..(li + 1) * r * k] };
                    gemm(c, r, k, gl, true, al, false, &mut db[li * c * k..(li + 1) * c * k], T::zero());
                }
                v.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), db)));
            }
            v
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            out_c,
            cols,
        } => {
            let pos = geom.positions();
            let gt = conv::batch_major_to_channel_major(g.data(), geom.batch, *out_c, pos);
            let bp = geom.batch * pos;
            let pl = geom.patch_len();
            let mut v = Vec::new();
            if req(*w) {
                let mut dw = vec![T::zero(); *out_c * pl];
                gemm(*out_c, bp, pl, &gt, false, cols, true, &mut dw, T::zero());
                v.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), dw)));
            }
            if req(*b) {
                let db: Vec<T> = gt.chunks(bp).map(|r| r.iter().copied().sum()).collect();
                v.push((*b, Tensor::from_parts(vec![*out_c], db)));
            }
            if req(*x) {
                let mut dcols = vec![T::zero(); pl * bp];
                gemm(pl, *out_c, bp, val(*w).data(), true, &gt, false, &mut dcols, T::zero());
                let mut dx = vec![T::zero(); val(*x).numel()];
                conv::col2im(&dcols, geom, &mut dx);
                v.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            }
            v
        }
        Op::ConvTranspose2d {
            x,
            w,
            b,
            geom,
            in_c,
            x_cm,
        } => {
            let bp = geom.batch * geom.positions();
            let pl = geom.patch_len();
            let dcols = conv::im2col(g.data(), geom);
            let mut v = Vec::new();
            if req(*w) {
                let mut dw = vec![T::zero(); *in_c * pl];
                gemm(*in_c, bp, pl, x_cm, false, &dcols, true, &mut dw, T::zero());
                v.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), dw)));
            }
            if req(*b) {
                let plane = geom.in_h * geom.in_w;
                let mut db = vec![T::zero(); geom.channels];
                for (i, chunk) in g.data().chunks(plane).enumerate() {
                    db[i % geom.channels] += chunk.iter().copied().sum();
                }
                v.push((*b, Tensor::from_parts(vec![geom.channels], db)));
            }
            if req(*x) {
                let mut dx_cm = vec![T::zero(); *in_c * bp];
                gemm(*in_c, pl, bp, val(*w).data(), false, &dcols, false, &mut dx_cm, T::zero());
                let dx = conv::channel_major_to_batch_major(&dx_cm, geom.batch, *in_c, geom.positions());
                v.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            }
            v
        }
        Op::LocationMajor { x, batch, ch, pos } => {
            let (bn, cn, pn) = (*batch, *ch, *pos);
            let mut dx = vec![T::zero(); g.numel()];
            let gd = g.data();
            for b in 0..bn {
                for c in 0..cn {
                    for p in 0..pn {
                        dx[(b * cn + c) * pn + p] = gd[(p * bn + b) * cn + c];
                    }
                }
            }
            vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx))]
        }
        Op::Reshape(x) => vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()))],
        Op::SliceOuter { x, start } => {
            let xv = val(*x);
            let width = xv.numel() / xv.dim(0);
            let mut dx = vec![T::zero(); xv.numel()];
            dx[start * width..start * width + g.numel()].copy_from_slice(g.data());
            vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
        }
        Op::GatherOuter { x, rows } => {
            let xv = val(*x);
            let width = xv.numel() / xv.dim(0);
            let mut dx = vec![T::zero(); xv.numel()];
            for (i, &r) in rows.iter().enumerate() {
                add_into(&mut dx[r * width..(r + 1) * width], &g.data()[i * width..(i + 1) * width]);
            }
            vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
        }
        Op::ConcatOuter(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let n = val(p).numel();
                    let piece = Tensor::from_parts(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                    (p, piece)
                })
                .collect()
        }
        Op::Relu(x) => vec![(
            *x,
            g.zip_map(out, |gi, yi| if yi > T::zero() { gi } else { T::zero() }).unwrap(),
        )],
        Op::Sigmoid(x) => vec![(*x, g.zip_map(out, |gi, s| gi * s * (T::one() - s)).unwrap())],
        Op::Tanh(x) => vec![(*x, g.zip_map(out, |gi, t| gi * (T::one() - t * t)).unwrap())],
        Op::Exp(x) => vec![(*x, g.zip_map(out, |gi, e| gi * e).unwrap())],
        Op::Square(x) => {
            let two = T::of(2.0);
            vec![(*x, g.zip_map(val(*x), |gi, xi| gi * two * xi).unwrap())]
        }
        Op::Softplus(x) => vec![(*x, g.zip_map(val(*x), |gi, xi| gi * sigmoid(xi)).unwrap())],
        Op::Sum(x) => {
            let s = g.data()[0];
            vec![(*x, Tensor::full(val(*x).shape(), s))]
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            let s = g.data()[0] / T::of(n as f64);
            vec![(*x, Tensor::full(val(*x).shape(), s))]
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            k,
        } => {
            let rows = targets.len();
            let scale = g.data()[0] / T::of(rows as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * k + t] -= scale;
            }
            vec![(*logits, Tensor::from_parts(val(*logits).shape().to_vec(), d))]
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.req(self.id)
    }

    /// Scalar value of this node.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.push(v, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t, T>, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let v = a.zip_map(&b, f)?;
        Ok(self.tape.push(v, op, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let width = *x.shape().last().unwrap_or(&1);
        if b.ndim() != 1 || b.numel() != width {
            return Err(Error::dim("add_row_bias", "features", width, b.numel()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(width) {
            add_into(row, b.data());
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::AddRowBias(self.id, bias.id),
            self.requires_grad() || bias.requires_grad(),
        ))
    }

    fn matmul_impl(&self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k) = if ta { (a.dim(1), a.dim(0)) } else { (a.dim(0), a.dim(1)) };
        let (k2, n) = if tb { (b.dim(1), b.dim(0)) } else { (b.dim(0), b.dim(1)) };
        if k != k2 {
            return Err(Error::dim("matmul", "inner", k, k2));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), ta, b.data(), tb, &mut out, T::zero());
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                m,
                k,
                n,
            },
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// `self · other`
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true, false)
    }

    /// `[L,R,K]·[L,C,K]ᵀ -> [L,R,C]`; a 2-D `self` (`[R,K]`) is shared by every `l`.
    pub fn batched_matmul_nt(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if b.ndim() != 3 {
            return Err(Error::shape("batched_matmul", format!("rhs must be 3-D, got {:?}", b.shape())));
        }
        let (l, c, k) = (b.dim(0), b.dim(1), b.dim(2));
        let (shared, r, ka) = match a.ndim() {
            2 => (true, a.dim(0), a.dim(1)),
            3 => {
                if a.dim(0) != l {
                    return Err(Error::dim("batched_matmul", "batch", l, a.dim(0)));
                }
                (false, a.dim(1), a.dim(2))
            }
            _ => return Err(Error::shape("batched_matmul", format!("lhs {:?}", a.shape()))),
        };
        if ka != k {
            return Err(Error::dim("batched_matmul", "features", k, ka));
        }
        let mut out = vec![T::zero(); l * r * c];
        for li in 0..l {
            let al = if shared { a.data() } else { &a.data()[li * r * k..(li + 1) * r * k] };
            let bl = &b.data()[li * c * k..(li + 1) * c * k];
            gemm(r, k, c, al, false, bl, true, &mut out[li * r * c..(li + 1) * r * c], T::zero());
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![l, r, c], out),
            Op::BatchedMatMulNT {
                a: self.id,
                b: other.id,
                shared_a: shared,
                l,
                rows: r,
                cols: c,
                inner: k,
            },
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// Valid cross-correlation: `[B,C,H,W] ⋆ [O,C,kH,kW] + bias[O]`.
    pub fn conv2d(&self, kernel: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernel);
        self.same_tape(&bias);
        let (x, w, b) = (self.value(), kernel.value(), bias.value());
        if x.ndim() != 4 {
            return Err(Error::shape("conv2d", format!("input must be B×C×H×W, got {:?}", x.shape())));
        }
        if w.ndim() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be O×C×kH×kW, got {:?}", w.shape())));
        }
        let (bn, cn, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (on, kc, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if kc != cn {
            return Err(Error::dim("conv2d", "channels", cn, kc));
        }
        if b.ndim() != 1 || b.numel() != on {
            return Err(Error::dim("conv2d", "bias", on, b.numel()));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let oh = ConvGeom::valid_extent(h, kh, stride).ok_or_else(|| Error::dim("conv2d", "height", h, kh))?;
        let ow = ConvGeom::valid_extent(wd, kw, stride).ok_or_else(|| Error::dim("conv2d", "width", wd, kw))?;
        let geom = ConvGeom {
            batch: bn,
            channels: cn,
            in_h: h,
            in_w: wd,
            k_h: kh,
            k_w: kw,
            stride,
            out_h: oh,
            out_w: ow,
        };
        let cols = conv::im2col(x.data(), &geom);
        let bp = bn * geom.positions();
        let mut tmp = vec![T::zero(); on * bp];
        gemm(on, geom.patch_len(), bp, w.data(), false, &cols, false, &mut tmp, T::zero());
        for (o, row) in tmp.chunks_mut(bp).enumerate() {
            let bo = b.data()[o];
            row.iter_mut().for_each(|v| *v += bo);
        }
        let out = conv::channel_major_to_batch_major(&tmp, bn, on, geom.positions());
        let req = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![bn, on, oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                b: bias.id,
                geom,
                out_c: on,
                cols: if req { cols } else { Vec::new() },
            },
            req,
        ))
    }

    /// Transposed convolution: the adjoint of [`Var::conv2d`] w.r.t. its input.
    /// `kernel` is `[C_in, C_out, kH, kW]`; `out_hw` picks the output size
    /// among those a forward convolution would map back onto our input size.
    pub fn conv_transpose2d(
        &self,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        self.same_tape(&kernel);
        self.same_tape(&bias);
        let (x, w, b) = (self.value(), kernel.value(), bias.value());
        if x.ndim() != 4 || w.ndim() != 4 {
            return Err(Error::shape("conv_transpose2d", "input and kernel must be 4-D"));
        }
        let (bn, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (wc, cout, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if wc != cin {
            return Err(Error::dim("conv_transpose2d", "channels", cin, wc));
        }
        if b.numel() != cout {
            return Err(Error::dim("conv_transpose2d", "bias", cout, b.numel()));
        }
        let (oh, ow) = out_hw;
        if ConvGeom::valid_extent(oh, kh, stride) != Some(h) {
            return Err(Error::dim("conv_transpose2d", "height", h, oh));
        }
        if ConvGeom::valid_extent(ow, kw, stride) != Some(wd) {
            return Err(Error::dim("conv_transpose2d", "width", wd, ow));
        }
        let geom = ConvGeom {
            batch: bn,
            channels: cout,
            in_h: oh,
            in_w: ow,
            k_h: kh,
            k_w: kw,
            stride,
            out_h: h,
            out_w: wd,
        };
        let bp = bn * geom.positions();
        let x_cm = conv::batch_major_to_channel_major(x.data(), bn, cin, geom.positions());
        let mut cols = vec![T::zero(); geom.patch_len() * bp];
        gemm(geom.patch_len(), cin, bp, w.data(), true, &x_cm, false, &mut cols, T::zero());
        let mut out = vec![T::zero(); bn * cout * oh * ow];
        conv::col2im(&cols, &geom, &mut out);
        let plane = oh * ow;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let req = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![bn, cout, oh, ow], out),
            Op::ConvTranspose2d {
                x: self.id,
                w: kernel.id,
                b: bias.id,
                geom,
                in_c: cin,
                x_cm: if req { x_cm } else { Vec::new() },
            },
            req,
        ))
    }

    /// `[B,C,H,W] -> [H·W, B, C]`: one `B×C` feature matrix per spatial location.
    pub fn location_major(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 4 {
            return Err(Error::shape("location_major", format!("expected 4-D, got {:?}", x.shape())));
        }
        let (bn, cn, pn) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let mut out = vec![T::zero(); x.numel()];
        let xd = x.data();
        for b in 0..bn {
            for c in 0..cn {
                for p in 0..pn {
                    out[(p * bn + b) * cn + c] = xd[(b * cn + c) * pn + p];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![pn, bn, cn], out),
            Op::LocationMajor {
                x: self.id,
                batch: bn,
                ch: cn,
                pos: pn,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().slice_outer(start, len)?;
        Ok(self.tape.push(v, Op::SliceOuter { x: self.id, start }, self.requires_grad()))
    }

    pub fn gather_outer(&self, rows: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().gather_outer(rows)?;
        Ok(self.tape.push(
            v,
            Op::GatherOuter {
                x: self.id,
                rows: rows.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    pub fn concat_outer(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_outer", "no inputs"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_outer(&refs)?;
        let req = parts.iter().any(|p| p.requires_grad());
        Ok(first
            .tape
            .push(v, Op::ConcatOuter(parts.iter().map(|p| p.id).collect()), req))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s = v.sum() / T::of(v.numel() as f64);
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Mean over rows of `-log softmax(row)[target]`. Rows are the leading
    /// axes flattened; the softmax runs over the last axis.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        self.masked_cross_entropy(targets, None)
    }

    /// As [`Var::cross_entropy`], but columns with `mask == false` are excluded
    /// from each row's softmax (`mask` is row-major, same size as the logits).
    pub fn masked_cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let x = self.value();
        let k = *x.shape().last().ok_or_else(|| Error::shape("cross_entropy", "scalar logits"))?;
        let rows = x.numel() / k;
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", "rows", rows, targets.len()));
        }
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::dim("cross_entropy", "mask", x.numel(), m.len()));
            }
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: k,
                });
            }
            let row = &x.data()[r * k..(r + 1) * k];
            let live = |j: usize| mask.is_none_or(|m| m[r * k + j]);
            if !live(t) {
                return Err(Error::Contract(format!("cross_entropy target {t} of row {r} is masked out")));
            }
            let mx = (0..k).filter(|&j| live(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..k {
                if live(j) {
                    let e = (row[j] - mx).exp();
                    probs[r * k + j] = e;
                    z += e;
                }
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            total += (mx + z.ln() - row[t]).as_f64();
        }
        let loss = T::of(total / rows as f64);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                k,
            },
            self.requires_grad(),
        ))
    }

    /// `x · Wᵀ + b` for `x: [B, F_in]`, `W: [F_out, F_in]`, `b: [F_out]`.
    pub fn affine(&self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_nt(weight)?.add_row_bias(bias)
    }

    /// Bilinear scores `out[b,k] = self[b]ᵀ · W · v[k]`.
    pub fn bilinear(&self, w: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(w)?.matmul_nt(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let mut x = Variable::new("x", t(&[2], &[1.0, 2.0]));
        let tape = Tape::new();
        let loss = tape.bind(&x).square().sum();
        tape.backward_into(loss, &mut x).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let x = Variable::new("x", t(&[2], &[1.0, 2.0]));
        let mut y = Variable::new("y", t(&[2], &[3.0, 4.0]));
        let tape = Tape::new();
        let _ = tape.bind(&y);
        let loss = tape.bind(&x).sum().scale(3.0);
        y.zero_grad();
        tape.backward_into(loss, &mut y).unwrap();
        assert_eq!(y.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Variable::new("x", t(&[2], &[1.0, 2.0]));
        let tape = Tape::new();
        let y = tape.bind(&x).relu();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameter_is_a_constant() {
        let mut x = Variable::new("x", t(&[2], &[1.0, 2.0]));
        x.set_trainable(false);
        let tape = Tape::new();
        let xv = tape.bind(&x);
        assert!(!xv.requires_grad());
        let grads = tape.backward(xv.square().sum()).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn repeated_bind_accumulates() {
        let mut x = Variable::new("x", t(&[1], &[3.0]));
        let tape = Tape::new();
        let a = tape.bind(&x);
        let b = tape.bind(&x);
        let loss = a.mul(b).unwrap().sum();
        tape.backward_into(loss, &mut x).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_columns() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(t(&[1, 3], &[0.0, 50.0, 0.0]));
        let loss = logits
            .masked_cross_entropy(&[0], Some(&[true, false, true]))
            .unwrap();
        assert!((loss.item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
