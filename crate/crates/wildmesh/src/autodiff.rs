//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is a Wengert tape with eager evaluation: building an op node
//! computes its value immediately, so a graph is always fully evaluated.
//! Graphs are rebuilt from scratch every step; recorded nodes are never
//! mutated. Gradients are produced by [`Tape::grad`], which constructs the
//! adjoint computation *as new tape nodes*. Because adjoints are ordinary
//! nodes, taking a gradient of an expression that itself contains gradients
//! (second-order, used by the R1 penalty) needs no extra machinery.
//!
//! Shape errors are programming errors and panic at graph build with a
//! description of the offending op. Data-dependent failures (a non-finite
//! value anywhere in a forward evaluation) poison the tape and surface
//! through [`Tape::check_finite`].
//!
//! Non-differentiable kinks take a fixed subgradient, documented per op:
//! `min2`/`max2` and `clamp` credit the first argument on ties, `abs` uses
//! slope 0 at the origin, and `sign`/`floor` propagate no gradient at all.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    ReduceSum { x: usize, axes: Vec<usize>, keepdims: bool },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, len: usize },
    Gather { x: usize, idx: Rc<Vec<usize>> },
    ScatterAdd { x: usize, idx: Rc<Vec<usize>> },
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    Min2(usize, usize),
    Max2(usize, usize),
    ClampConst { x: usize, lo: f64, hi: f64 },
    Sign(usize),
    Floor(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Abs(..) => "abs",
            Op::Min2(..) => "min2",
            Op::Max2(..) => "max2",
            Op::ClampConst { .. } => "clamp",
            Op::Sign(..) => "sign",
            Op::Floor(..) => "floor",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul(a, b)
            | Op::Min2(a, b)
            | Op::Max2(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Abs(a)
            | Op::Sign(a)
            | Op::Floor(a) => vec![*a],
            Op::ReduceSum { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::ClampConst { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    op: Op,
    grad: bool,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    poison: RefCell<Option<(usize, &'static str)>>,
}

/// An eagerly-evaluated computation tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// A handle to one tape node: a shaped f64 value plus its recorded op.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                poison: RefCell::new(None),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.inner.poison.borrow().is_none() && !data.iter().all(|x| x.is_finite()) {
            let id = self.inner.nodes.borrow().len();
            *self.inner.poison.borrow_mut() = Some((id, op.name()));
        }
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, data: Rc::new(data), op, grad });
        Var { tape: self.clone(), id }
    }

    fn push_shared(&self, shape: Vec<usize>, data: Rc<Vec<f64>>, op: Op, grad: bool) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, data, op, grad });
        Var { tape: self.clone(), id }
    }

    /// A differentiable leaf.
    pub fn var(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// A constant leaf (no gradient flows into it).
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Leaf, false)
    }

    pub fn scalar_var(&self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Leaf, true)
    }

    pub fn cvec(&self, data: Vec<f64>) -> Var {
        self.push(vec![data.len()], data, Op::Leaf, false)
    }

    /// First non-finite value recorded on this tape, if any.
    pub fn check_finite(&self) -> Result<()> {
        match *self.inner.poison.borrow() {
            Some((node, op)) => Err(Error::NonFinite { node, op: op.into() }),
            None => Ok(()),
        }
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        let nodes = self.inner.nodes.borrow();
        f(&nodes[id])
    }

    fn node_parts(&self, id: usize) -> (Vec<usize>, Rc<Vec<f64>>, bool) {
        let nodes = self.inner.nodes.borrow();
        let n = &nodes[id];
        (n.shape.clone(), Rc::clone(&n.data), n.grad)
    }

    /// Gradient of a one-element `root` with respect to each of `wrt`.
    ///
    /// Adjoints are built as new tape nodes, so the returned values may
    /// themselves be differentiated. Entries of `wrt` that `root` does not
    /// depend on receive a zero tensor of the right shape.
    pub fn grad(&self, root: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
        assert!(
            Rc::ptr_eq(&self.inner, &root.tape.inner),
            "grad root from a different tape"
        );
        if root.len() != 1 {
            return Err(Error::BadInput(format!(
                "grad root must have one element, got shape {:?}",
                root.shape()
            )));
        }
        self.check_finite()?;

        let n_at_start = self.len();
        // Active set: nodes reachable from the root that also lead to a
        // differentiable leaf.
        let mut active = vec![false; n_at_start];
        {
            let nodes = self.inner.nodes.borrow();
            let mut stack = vec![root.id];
            let mut seen = vec![false; n_at_start];
            while let Some(id) = stack.pop() {
                if seen[id] {
                    continue;
                }
                seen[id] = true;
                if nodes[id].grad {
                    active[id] = true;
                    for inp in nodes[id].op.inputs() {
                        stack.push(inp);
                    }
                }
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n_at_start];
        let seed_shape = root.shape().to_vec();
        let seed_len: usize = seed_shape.iter().product();
        adj[root.id] = Some(self.push(seed_shape, vec![1.0; seed_len], Op::Leaf, false));

        for id in (0..n_at_start).rev() {
            if !active[id] {
                continue;
            }
            let a = match adj[id].take() {
                Some(a) => a,
                None => continue,
            };
            let op = self.with_node(id, |n| n.op.clone());
            let out = Var { tape: self.clone(), id };
            let contribs = self.op_vjp(&op, &out, &a);
            for (inp, c) in contribs {
                if !active[inp] {
                    continue;
                }
                adj[inp] = Some(match adj[inp].take() {
                    Some(prev) => &prev + &c,
                    None => c,
                });
            }
            // Keep the adjoint around: `wrt` may name intermediate nodes.
            adj[id] = Some(a);
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            assert!(
                Rc::ptr_eq(&self.inner, &w.tape.inner),
                "grad target from a different tape"
            );
            out.push(match adj.get(w.id).and_then(|a| a.clone()) {
                Some(a) => a,
                None => self.constant(&Tensor::zeros(w.shape().to_vec())),
            });
        }
        self.check_finite()?;
        Ok(out)
    }

    /// Contributions of `out`'s adjoint to each input of `op`.
    fn op_vjp(&self, op: &Op, out: &Var, a: &Var) -> Vec<(usize, Var)> {
        let v = |id: usize| Var { tape: self.clone(), id };
        match op {
            Op::Leaf => vec![],
            Op::Add(x, y) => vec![(*x, a.clone()), (*y, a.clone())],
            Op::Sub(x, y) => vec![(*x, a.clone()), (*y, -a)],
            Op::Mul(x, y) => vec![(*x, a * &v(*y)), (*y, a * &v(*x))],
            Op::Div(x, y) => {
                let yv = v(*y);
                vec![(*x, a / &yv), (*y, -&(&(a * out) / &yv))]
            }
            Op::Neg(x) => vec![(*x, -a)],
            Op::Matmul(x, y) => {
                let (xa, ya) = (v(*x), v(*y));
                vec![(*x, a.matmul(&ya.t())), (*y, xa.t().matmul(a))]
            }
            Op::Transpose(x) => vec![(*x, a.t())],
            Op::Reshape(x) => {
                let shape = self.with_node(*x, |n| n.shape.clone());
                vec![(*x, a.reshape(shape))]
            }
            Op::BroadcastTo(x) => {
                let from = self.with_node(*x, |n| n.shape.clone());
                vec![(*x, a.sum_to(&from))]
            }
            Op::ReduceSum { x, axes, keepdims } => {
                let from = self.with_node(*x, |n| n.shape.clone());
                let mut keep = from.clone();
                for &ax in axes {
                    keep[ax] = 1;
                }
                let g = if *keepdims { a.clone() } else { a.reshape(keep) };
                vec![(*x, g.broadcast_to(&from))]
            }
            Op::Concat { parts, axis } => {
                let mut offs = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.with_node(p, |n| n.shape[*axis]);
                    res.push((p, a.slice(*axis, offs, len)));
                    offs += len;
                }
                res
            }
            Op::Slice { x, axis, start, len } => {
                let from = self.with_node(*x, |n| n.shape.clone());
                let total = from[*axis];
                let mut parts = Vec::new();
                if *start > 0 {
                    let mut s = from.clone();
                    s[*axis] = *start;
                    parts.push(self.constant(&Tensor::zeros(s)));
                }
                parts.push(a.clone());
                if start + len < total {
                    let mut s = from.clone();
                    s[*axis] = total - start - len;
                    parts.push(self.constant(&Tensor::zeros(s)));
                }
                let refs: Vec<&Var> = parts.iter().collect();
                vec![(*x, concat(&refs, *axis))]
            }
            Op::Gather { x, idx } => {
                let dim0 = self.with_node(*x, |n| n.shape[0]);
                vec![(*x, a.scatter_add(idx.as_ref().clone(), dim0))]
            }
            Op::ScatterAdd { x, idx, .. } => vec![(*x, a.gather(idx.as_ref().clone()))],
            Op::Sigmoid(x) => {
                let one = self.scalar(1.0);
                vec![(*x, a * &(out * &(&one - out)))]
            }
            Op::Softplus(x) => vec![(*x, a * &v(*x).sigmoid())],
            Op::Exp(x) => vec![(*x, a * out)],
            Op::Ln(x) => vec![(*x, a / &v(*x))],
            Op::Sqrt(x) => vec![(*x, &(a * &self.scalar(0.5)) / out)],
            Op::Tanh(x) => {
                let one = self.scalar(1.0);
                vec![(*x, a * &(&one - &(out * out)))]
            }
            Op::Sin(x) => vec![(*x, a * &v(*x).cos())],
            Op::Cos(x) => vec![(*x, -&(a * &v(*x).sin()))],
            // Subgradient 0 at the origin.
            Op::Abs(x) => vec![(*x, a * &v(*x).sign())],
            Op::Min2(x, y) => {
                let m = self.choice_mask(*x, *y, |p, q| p <= q);
                let one = self.scalar(1.0);
                vec![(*x, a * &m), (*y, a * &(&one - &m))]
            }
            Op::Max2(x, y) => {
                let m = self.choice_mask(*x, *y, |p, q| p >= q);
                let one = self.scalar(1.0);
                vec![(*x, a * &m), (*y, a * &(&one - &m))]
            }
            Op::ClampConst { x, lo, hi } => {
                let (shape, data, _) = self.node_parts(*x);
                let mask: Vec<f64> = data
                    .iter()
                    .map(|&p| if p >= *lo && p <= *hi { 1.0 } else { 0.0 })
                    .collect();
                let m = self.push(shape, mask, Op::Leaf, false);
                vec![(*x, a * &m)]
            }
            Op::Sign(_) | Op::Floor(_) => vec![],
        }
    }

    /// 1.0 where `pick(x, y)` holds (ties included by the predicate), else
    /// 0.0, as a constant node. Both inputs must already share a shape.
    fn choice_mask(&self, x: usize, y: usize, pick: impl Fn(f64, f64) -> bool) -> Var {
        let (shape, xd, _) = self.node_parts(x);
        let (_, yd, _) = self.node_parts(y);
        let mask: Vec<f64> = xd
            .iter()
            .zip(yd.iter())
            .map(|(&p, &q)| if pick(p, q) { 1.0 } else { 0.0 })
            .collect();
        self.push(shape, mask, Op::Leaf, false)
    }
}

fn elementwise_shapes(a: &Var, b: &Var, what: &str) -> (Var, Var) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    let target = broadcast_shape(&a.shape(), &b.shape())
        .unwrap_or_else(|_| panic!("{what}: incompatible shapes {:?} vs {:?}", a.shape(), b.shape()));
    let ab = if a.shape() == target.as_slice() { a.clone() } else { a.broadcast_to(&target) };
    let bb = if b.shape() == target.as_slice() { b.clone() } else { b.broadcast_to(&target) };
    (ab, bb)
}

impl Var {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn len(&self) -> usize {
        self.tape.with_node(self.id, |n| n.data.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.grad)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_node(self.id, |n| {
            Tensor::new(n.shape.clone(), n.data.as_ref().clone()).expect("node invariant")
        })
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar var");
        self.tape.with_node(self.id, |n| n.data[0])
    }

    /// Snapshot of the value as a constant leaf: gradients do not flow back.
    pub fn detach(&self) -> Var {
        let (shape, data, _) = self.tape.node_parts(self.id);
        self.tape.push_shared(shape, data, Op::Leaf, false)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (shape, data, grad) = self.tape.node_parts(self.id);
        let out: Vec<f64> = data.iter().map(|&x| f(x)).collect();
        let g = grad && !matches!(op, Op::Sign(_) | Op::Floor(_));
        self.tape.push(shape, out, op, g)
    }

    fn binary(&self, other: &Var, make: impl Fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Var {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "{what}: operands from different tapes"
        );
        let (a, b) = elementwise_shapes(self, other, what);
        let (shape, ad, ag) = a.tape.node_parts(a.id);
        let (_, bd, bg) = b.tape.node_parts(b.id);
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(shape, out, make(a.id, b.id), ag || bg)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn softplus(&self) -> Var {
        self.unary(Op::Softplus(self.id), stable_softplus)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sin(&self) -> Var {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(&self) -> Var {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// -1, 0, or +1 per element. Propagates no gradient.
    pub fn sign(&self) -> Var {
        self.unary(Op::Sign(self.id), |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Propagates no gradient.
    pub fn floor(&self) -> Var {
        self.unary(Op::Floor(self.id), f64::floor)
    }

    pub fn square(&self) -> Var {
        self * self
    }

    /// Elementwise minimum; ties credit this (first) argument's gradient.
    pub fn min2(&self, other: &Var) -> Var {
        self.binary(other, Op::Min2, f64::min, "min2")
    }

    /// Elementwise maximum; ties credit this (first) argument's gradient.
    pub fn max2(&self, other: &Var) -> Var {
        self.binary(other, Op::Max2, f64::max, "max2")
    }

    /// Clamp into `[lo, hi]`; the gradient inside the interval is 1
    /// (boundary points included), 0 outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: lo > hi");
        let (shape, data, grad) = self.tape.node_parts(self.id);
        let out: Vec<f64> = data.iter().map(|&x| x.clamp(lo, hi)).collect();
        self.tape.push(shape, out, Op::ClampConst { x: self.id, lo, hi }, grad)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let sa = self.shape();
        let sb = other.shape();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (_, ad, ag) = self.tape.node_parts(self.id);
        let (_, bd, bg) = other.tape.node_parts(other.id);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        self.tape.push(vec![m, n], out, Op::Matmul(self.id, other.id), ag || bg)
    }

    /// 2-d transpose.
    pub fn t(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose expects 2-d, got {s:?}");
        let (m, n) = (s[0], s[1]);
        let (_, d, g) = self.tape.node_parts(self.id);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.tape.push(vec![n, m], out, Op::Transpose(self.id), g)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape {:?} -> {:?}", self.shape(), shape);
        let (_, data, g) = self.tape.node_parts(self.id);
        self.tape.push_shared(shape, data, Op::Reshape(self.id), g)
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Var {
        let from = self.shape();
        if from == target {
            return self.clone();
        }
        let check = broadcast_shape(&from, target)
            .unwrap_or_else(|_| panic!("broadcast_to: {from:?} -> {target:?}"));
        assert_eq!(check, target, "broadcast_to: {from:?} -> {target:?}");
        let (_, data, g) = self.tape.node_parts(self.id);
        let out = broadcast_copy(&from, target, &data);
        self.tape.push(target.to_vec(), out, Op::BroadcastTo(self.id), g)
    }

    /// Reduce-sum back to a previously broadcast shape (adjoint of
    /// `broadcast_to`); also handy on its own.
    pub fn sum_to(&self, target: &[usize]) -> Var {
        let from = self.shape();
        if from == target {
            return self.clone();
        }
        let lead = from.len() - target.len();
        let mut axes: Vec<usize> = (0..lead).collect();
        for (i, &t) in target.iter().enumerate() {
            if t == 1 && from[lead + i] != 1 {
                axes.push(lead + i);
            }
        }
        let summed = self.sum_axes(&axes, true);
        summed.reshape(target.to_vec())
    }

    pub fn sum_axes(&self, axes: &[usize], keepdims: bool) -> Var {
        let from = self.shape();
        for &ax in axes {
            assert!(ax < from.len(), "sum_axes: axis {ax} out of range for {from:?}");
        }
        let mut reduce = vec![false; from.len()];
        for &ax in axes {
            reduce[ax] = true;
        }
        let out_shape: Vec<usize> = if keepdims {
            from.iter().enumerate().map(|(i, &d)| if reduce[i] { 1 } else { d }).collect()
        } else {
            from.iter().enumerate().filter(|(i, _)| !reduce[*i]).map(|(_, &d)| d).collect()
        };
        let (_, data, g) = self.tape.node_parts(self.id);
        let out = reduce_sum_copy(&from, &reduce, &data);
        self.tape.push(
            out_shape,
            out,
            Op::ReduceSum { x: self.id, axes: axes.to_vec(), keepdims },
            g,
        )
    }

    pub fn sum_all(&self) -> Var {
        let from = self.shape();
        let axes: Vec<usize> = (0..from.len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.len().max(1) as f64;
        &self.sum_all() * &self.tape.scalar(1.0 / n)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        let from = self.shape();
        assert!(axis < from.len() && start + len <= from[axis], "slice out of range");
        let outer: usize = from[..axis].iter().product();
        let inner: usize = from[axis + 1..].iter().product();
        let (_, data, g) = self.tape.node_parts(self.id);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * from[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = from.clone();
        shape[axis] = len;
        self.tape.push(shape, out, Op::Slice { x: self.id, axis, start, len }, g)
    }

    /// Select rows (axis 0) by index, repeats allowed.
    pub fn gather(&self, idx: Vec<usize>) -> Var {
        let from = self.shape();
        assert!(!from.is_empty(), "gather on scalar");
        let inner: usize = from[1..].iter().product();
        let (_, data, g) = self.tape.node_parts(self.id);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in &idx {
            assert!(i < from[0], "gather index {i} out of range {}", from[0]);
            out.extend_from_slice(&data[i * inner..(i + 1) * inner]);
        }
        let mut shape = from.clone();
        shape[0] = idx.len();
        self.tape.push(shape, out, Op::Gather { x: self.id, idx: Rc::new(idx) }, g)
    }

    /// Adjoint of `gather`: rows of `self` are summed into a zero tensor of
    /// leading dimension `dim0` at positions `idx`.
    pub fn scatter_add(&self, idx: Vec<usize>, dim0: usize) -> Var {
        let from = self.shape();
        assert!(!from.is_empty() && from[0] == idx.len(), "scatter_add arity");
        let inner: usize = from[1..].iter().product();
        let (_, data, g) = self.tape.node_parts(self.id);
        let mut out = vec![0.0; dim0 * inner];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < dim0, "scatter index {i} out of range {dim0}");
            let src = &data[r * inner..(r + 1) * inner];
            let dst = &mut out[i * inner..(i + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let mut shape = from.clone();
        shape[0] = dim0;
        self.tape.push(shape, out, Op::ScatterAdd { x: self.id, idx: Rc::new(idx) }, g)
    }
}

/// Concatenate along `axis`. All inputs must share the other dimensions.
pub fn concat(parts: &[&Var], axis: usize) -> Var {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape.clone();
    let first = parts[0].shape();
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), first.len(), "concat rank mismatch");
        for (i, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
            assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
        }
        axis_total += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut shape = first.clone();
    shape[axis] = axis_total;
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    let datas: Vec<(Vec<usize>, Rc<Vec<f64>>, bool)> =
        parts.iter().map(|p| p.tape.node_parts(p.id)).collect();
    for o in 0..outer {
        for (s, d, _) in &datas {
            let blk = s[axis] * inner;
            out.extend_from_slice(&d[o * blk..(o + 1) * blk]);
        }
    }
    let grad = datas.iter().any(|(_, _, g)| *g);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(shape, out, Op::Concat { parts: ids, axis }, grad)
}

/// Pack scalar vars into a vector of length `parts.len()`.
pub fn stack_scalars(parts: &[&Var]) -> Var {
    let rs: Vec<Var> = parts.iter().map(|p| p.reshape(vec![1])).collect();
    let refs: Vec<&Var> = rs.iter().collect();
    concat(&refs, 0)
}

fn broadcast_copy(from: &[usize], to: &[usize], data: &[f64]) -> Vec<f64> {
    // Fast paths cover the shapes the renderer and networks use heavily.
    if from.iter().product::<usize>() == 1 {
        return vec![data[0]; to.iter().product()];
    }
    if to.len() == 2 {
        let (m, n) = (to[0], to[1]);
        let aligned: Vec<usize> = if from.len() == 1 { vec![1, from[0]] } else { from.to_vec() };
        if aligned == [1, n] {
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(data);
            }
            return out;
        }
        if aligned == [m, 1] {
            let mut out = Vec::with_capacity(m * n);
            for &x in data {
                out.extend(std::iter::repeat(x).take(n));
            }
            return out;
        }
    }
    // General case: odometer over the output, stride 0 on broadcast axes.
    let lead = to.len() - from.len();
    let mut strides = vec![0isize; to.len()];
    let mut acc = 1isize;
    for i in (0..from.len()).rev() {
        strides[lead + i] = if from[i] == 1 { 0 } else { acc };
        acc *= from[i] as isize;
    }
    let total: usize = to.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    let mut off = 0isize;
    for _ in 0..total {
        out.push(data[off as usize]);
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < to[ax] {
                break;
            }
            off -= strides[ax] * to[ax] as isize;
            idx[ax] = 0;
        }
    }
    out
}

fn reduce_sum_copy(from: &[usize], reduce: &[bool], data: &[f64]) -> Vec<f64> {
    if from.is_empty() {
        return vec![data[0]];
    }
    // Fast paths for the 2-d reductions that dominate runtime.
    if from.len() == 2 {
        let (m, n) = (from[0], from[1]);
        if reduce[1] && !reduce[0] {
            return (0..m).map(|i| data[i * n..(i + 1) * n].iter().sum()).collect();
        }
        if reduce[0] && !reduce[1] {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &x) in out.iter_mut().zip(&data[i * n..(i + 1) * n]) {
                    *o += x;
                }
            }
            return out;
        }
        if reduce[0] && reduce[1] {
            return vec![data.iter().sum()];
        }
    }
    let mut out_strides = vec![0usize; from.len()];
    let mut acc = 1usize;
    for i in (0..from.len()).rev() {
        if !reduce[i] {
            out_strides[i] = acc;
            acc *= from[i];
        }
    }
    let mut out = vec![0.0; acc];
    let mut idx = vec![0usize; from.len()];
    let mut off = 0usize;
    for &x in data {
        out[off] += x;
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            off += out_strides[ax];
            if idx[ax] < from[ax] {
                break;
            }
            off -= out_strides[ax] * from[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x >= 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

macro_rules! impl_binop {
    ($trait:ident, $fn:ident, $op:ident, $f:expr) => {
        impl $trait<&Var> for &Var {
            type Output = Var;
            fn $fn(self, rhs: &Var) -> Var {
                self.binary(rhs, Op::$op, $f, stringify!($fn))
            }
        }
        impl $trait<f64> for &Var {
            type Output = Var;
            fn $fn(self, rhs: f64) -> Var {
                let r = self.tape.scalar(rhs);
                self.binary(&r, Op::$op, $f, stringify!($fn))
            }
        }
    };
}

impl_binop!(Add, add, Add, |a, b| a + b);
impl_binop!(Sub, sub, Sub, |a, b| a - b);
impl_binop!(Mul, mul, Mul, |a, b| a * b);
impl_binop!(Div, div, Div, |a, b| a / b);

impl Sub<&Var> for f64 {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        let l = rhs.tape.scalar(self);
        &l - rhs
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}

/// The result of one functional evaluation: the root value and, when
/// requested, the gradient with respect to each input in order.
pub struct Evaluation {
    pub value: Tensor,
    pub grads: Option<Vec<Tensor>>,
}

/// Build a fresh graph from `inputs` via `build`, evaluate it, and
/// optionally differentiate the (one-element) root with respect to every
/// input. The graph is reconstructed on every call; identical inputs give
/// bit-identical outputs.
pub fn evaluate<F>(build: F, inputs: &[Tensor], want_grads: bool) -> Result<Evaluation>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t)).collect();
    let root = build(&tape, &vars);
    tape.check_finite()?;
    let grads = if want_grads {
        let refs: Vec<&Var> = vars.iter().collect();
        let gs = tape.grad(&root, &refs)?;
        Some(gs.iter().map(Var::value).collect())
    } else {
        None
    };
    Ok(Evaluation { value: root.value(), grads })
}

/// Worst-coordinate result of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the tape gradient of a scalar-valued builder against central
/// finite differences at absolute step `step` per coordinate.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<FdReport>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let base = evaluate(&build, inputs, true)?;
    let grads = base.grads.expect("grads requested");
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, g) in grads.iter().enumerate() {
        for ci in 0..g.len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let fp = evaluate(&build, &work, false)?.value.item();
            work[ti].data_mut()[ci] = orig - step;
            let fm = evaluate(&build, &work, false)?.value.item();
            work[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = g.data()[ci];
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            if rel > report.max_rel_err {
                report = FdReport {
                    max_rel_err: rel,
                    worst_input: ti,
                    worst_coord: ci,
                    analytic,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn forward_values() {
        let t = Tape::new();
        let a = t.var(&Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let b = t.var(&Tensor::from_vec(vec![0.5, 4.0, -1.0]));
        let c = &(&a * &b) + &a;
        assert_eq!(c.value().data(), &[1.5, -10.0, 0.0]);
        let s = c.sum_all();
        assert_eq!(s.item(), -8.5);
    }

    #[test]
    fn matmul_and_transpose() {
        let t = Tape::new();
        let a = t.var(&Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.var(&Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = a.matmul(&b);
        assert_eq!(c.value().data(), &[58., 64., 139., 154.]);
        assert_eq!(a.t().value().data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn simple_gradient() {
        // d/dx sum(x*x + 3x) = 2x + 3
        let t = Tape::new();
        let x = t.var(&Tensor::from_vec(vec![1.0, -2.0]));
        let y = &(&x * &x) + &(&x * 3.0);
        let g = t.grad(&y.sum_all(), &[&x]).unwrap();
        assert_eq!(g[0].value().data(), &[5.0, -1.0]);
    }

    #[test]
    fn second_order_gradient() {
        // y = x^3, y' = 3x^2, y'' = 6x
        let t = Tape::new();
        let x = t.scalar_var(1.7);
        let y = &(&x * &x) * &x;
        let g1 = t.grad(&y, &[&x]).unwrap().remove(0);
        let g2 = t.grad(&g1, &[&x]).unwrap().remove(0);
        assert!((g1.item() - 3.0 * 1.7 * 1.7).abs() < 1e-12);
        assert!((g2.item() - 6.0 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn broadcast_bias_gradient() {
        // Bias added across rows accumulates its gradient over rows.
        let t = Tape::new();
        let x = t.var(&Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.var(&Tensor::from_vec(vec![10.0, 20.0]));
        let y = (&x + &b).sum_all();
        let g = t.grad(&y, &[&b]).unwrap();
        assert_eq!(g[0].value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let t = Tape::new();
        let x = t.var(&Tensor::new(vec![4, 2], vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap());
        let y = x.gather(vec![3, 1, 3]);
        assert_eq!(y.value().data(), &[6., 7., 2., 3., 6., 7.]);
        let g = t.grad(&y.sum_all(), &[&x]).unwrap();
        // Row 3 was taken twice.
        assert_eq!(g[0].value().data(), &[0., 0., 1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn concat_slice_gradients() {
        let t = Tape::new();
        let a = t.var(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.var(&Tensor::from_vec(vec![3.0]));
        let c = concat(&[&a, &b], 0);
        let s = c.slice(0, 1, 2); // [2, 3]
        assert_eq!(s.value().data(), &[2.0, 3.0]);
        let g = t.grad(&(&s * &s).sum_all(), &[&a, &b]).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 4.0]);
        assert_eq!(g[1].value().data(), &[6.0]);
    }

    #[test]
    fn min_max_tie_goes_to_first_argument() {
        let t = Tape::new();
        let a = t.scalar_var(2.0);
        let b = t.scalar_var(2.0);
        let g = t.grad(&a.min2(&b), &[&a, &b]).unwrap();
        assert_eq!((g[0].item(), g[1].item()), (1.0, 0.0));
        let g = t.grad(&a.max2(&b), &[&a, &b]).unwrap();
        assert_eq!((g[0].item(), g[1].item()), (1.0, 0.0));
    }

    #[test]
    fn detached_value_blocks_gradient() {
        let t = Tape::new();
        let x = t.scalar_var(3.0);
        let y = &x.detach() * &x;
        let g = t.grad(&y, &[&x]).unwrap();
        assert_eq!(g[0].item(), 3.0);
    }

    #[test]
    fn nonfinite_poisons_tape() {
        let t = Tape::new();
        let x = t.var(&Tensor::from_vec(vec![-1.0]));
        let _ = x.ln(); // ln of a negative number
        assert!(matches!(t.check_finite(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let xs = [Tensor::from_vec(vec![0.3, -1.2, 2.2])];
        let build = |_t: &Tape, v: &[Var]| (&v[0].sigmoid() * &v[0].tanh()).sum_all();
        let a = evaluate(build, &xs, true).unwrap();
        let b = evaluate(build, &xs, true).unwrap();
        assert_eq!(a.value.data(), b.value.data());
        assert_eq!(a.grads.unwrap()[0].data(), b.grads.unwrap()[0].data());
    }

    // Central-difference checks for every registered primitive, at several
    // random points each. The tolerance matches the acceptance gate for
    // elementary ops.
    #[test]
    fn primitives_match_finite_differences() {
        let mut r = rng(71);
        for trial in 0..10 {
            let x = rand_tensor(&mut r, vec![2, 3]);
            let y = rand_tensor(&mut r, vec![2, 3]);
            let m = rand_tensor(&mut r, vec![3, 2]);
            let cases: Vec<(&str, Box<dyn Fn(&Tape, &[Var]) -> Var>)> = vec![
                ("add", Box::new(|_, v: &[Var]| (&v[0] + &v[1]).sum_all())),
                ("sub", Box::new(|_, v: &[Var]| (&v[0] - &v[1]).sum_all())),
                ("mul", Box::new(|_, v: &[Var]| (&v[0] * &v[1]).sum_all())),
                ("div", Box::new(|_, v: &[Var]| (&v[0] / &(&v[1].square() + 1.0)).sum_all())),
                ("matmul", Box::new(|_, v: &[Var]| v[0].matmul(&v[2]).square().sum_all())),
                ("sigmoid", Box::new(|_, v: &[Var]| v[0].sigmoid().sum_all())),
                ("softplus", Box::new(|_, v: &[Var]| v[0].softplus().sum_all())),
                ("exp", Box::new(|_, v: &[Var]| v[0].exp().sum_all())),
                ("tanh", Box::new(|_, v: &[Var]| v[0].tanh().sum_all())),
                ("sin_cos", Box::new(|_, v: &[Var]| (&v[0].sin() * &v[1].cos()).sum_all())),
                ("sqrt", Box::new(|_, v: &[Var]| (&v[0].square() + 1.0).sqrt().sum_all())),
                ("ln", Box::new(|_, v: &[Var]| (&v[0].square() + 1.5).ln().sum_all())),
                (
                    "sum_broadcast",
                    Box::new(|_, v: &[Var]| {
                        let s = v[0].sum_axes(&[0], true);
                        (&s * &v[1]).sum_all()
                    }),
                ),
                (
                    "gather",
                    Box::new(|_, v: &[Var]| v[0].gather(vec![1, 0, 1]).square().sum_all()),
                ),
                (
                    "concat_slice",
                    Box::new(|_, v: &[Var]| {
                        concat(&[&v[0], &v[1]], 0).slice(0, 1, 2).square().sum_all()
                    }),
                ),
            ];
            for (name, build) in cases {
                let rep =
                    finite_diff_check(build, &[x.clone(), y.clone(), m.clone()], 1e-5).unwrap();
                assert!(
                    rep.max_rel_err < 1e-6,
                    "{name} trial {trial}: rel err {:.2e} (analytic {}, numeric {})",
                    rep.max_rel_err,
                    rep.analytic,
                    rep.numeric
                );
            }
        }
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let t = Tape::new();
        let x = t.scalar_var(1.0);
        let y = t.var(&Tensor::from_vec(vec![1.0, 2.0]));
        let g = t.grad(&(&x * 2.0), &[&x, &y]).unwrap();
        assert_eq!(g[1].value().data(), &[0.0, 0.0]);
    }
}
