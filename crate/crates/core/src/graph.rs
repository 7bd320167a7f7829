//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Node order is forward execution order, which
//! is a valid topological order, so [`Graph::backward`] is a single reverse
//! sweep.
//!
//! ```
//! use rcsnet::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(&Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use crate::error::{dim_err, param_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<S> {
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Abs,
    SqrtEps(S),
    Scale(S),
    AddConst(S),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Down/up resampling of the two trailing axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Block mean over `f x f` tiles.
    DownAverage(usize),
    /// Separable linear interpolation to `f` times the size.
    UpLinear(usize),
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Unary(Var, Unary<S>),
    Binary(Var, Var, Binary),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, in5: [usize; 5], w5: [usize; 5] },
    AvgPool { x: Var, k: usize },
    Down { x: Var, f: usize },
    Up { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Expand(Var),
    MeanAxes(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Recorded computation. One graph per forward/backward pass.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// For every element of `full`, the offset of the element of `small` it
/// maps to when `small` (same rank, each axis equal or 1) is broadcast.
fn broadcast_map(full: &[usize], small: &[usize]) -> Vec<usize> {
    let ss = strides(small);
    let eff: Vec<usize> = small.iter().zip(&ss).map(|(&d, &s)| if d == 1 { 0 } else { s }).collect();
    let n = numel(full);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; full.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..full.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < full[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn broadcastable(full: &[usize], small: &[usize]) -> bool {
    small.len() == full.len() && small.iter().zip(full).all(|(&s, &f)| s == f || s == 1)
}

fn as5(shape: &[usize]) -> [usize; 5] {
    [shape[0], shape[1], shape[2], shape[3], shape[4]]
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that never tracks gradients, whatever its leaves request.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool, what: &str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what} produced a non-finite value")));
        }
        self.nodes.push(Node { shape, value, op, requires_grad: requires_grad && self.grad_enabled, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad, "leaf")
            .expect("leaf values must be finite")
    }

    /// Leaf that rejects non-finite input instead of panicking.
    pub fn input(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad, "input")
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, "constant")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.node(v).grad.as_deref()
    }

    /// Which side of zero every relu / abs input lies on. Two evaluations
    /// with equal patterns sit on the same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Unary(x, Unary::Relu | Unary::Abs) = n.op {
                out.extend(self.node(x).value.iter().map(|&v| v > S::zero()));
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, op: Unary<S>) -> Result<Var> {
        let n = self.node(x);
        let value: Vec<S> = n
            .value
            .iter()
            .map(|&v| match op {
                Unary::Sigmoid => S::one() / (S::one() + (-v).exp()),
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(S::zero()),
                Unary::Square => v * v,
                Unary::Abs => v.abs(),
                Unary::SqrtEps(e) => (v + e).sqrt(),
                Unary::Scale(c) => v * c,
                Unary::AddConst(c) => v + c,
            })
            .collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Unary(x, op), rg, "elementwise op")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: S) -> Result<Var> {
        self.unary(x, Unary::SqrtEps(eps))
    }
    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, Unary::AddConst(c))
    }

    // --------------------------------------------------------------- binary

    /// `lhs (op) rhs`, where `rhs` has the shape of `lhs`, a single element,
    /// or the same rank with some axes of size 1.
    fn binary(&mut self, lhs: Var, rhs: Var, op: Binary) -> Result<Var> {
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        let (a, b) = (&self.node(lhs).value, &self.node(rhs).value);
        let f = |x: S, y: S| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value: Vec<S> = if ls == rs {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if b.len() == 1 {
            a.iter().map(|&x| f(x, b[0])).collect()
        } else if broadcastable(&ls, &rs) {
            let map = broadcast_map(&ls, &rs);
            a.iter().zip(map).map(|(&x, o)| f(x, b[o])).collect()
        } else {
            return Err(dim_err!("cannot broadcast {rs:?} onto {ls:?}"));
        };
        let rg = self.rg(&[lhs, rhs]);
        self.push(ls, value, Op::Binary(lhs, rhs, op), rg, "binary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    // ---------------------------------------------------------- convolution

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(dim_err!("conv3d expects rank-5 input and weight, got {xs:?} and {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(dim_err!("conv bias {:?} does not match {} output channels", self.shape(b), ws[0]));
            }
        }
        let (in5, w5) = (as5(&xs), as5(&ws));
        let bias = b.map(|b| self.data(b));
        let (value, out) = kernels::conv3d_forward(self.data(x), in5, self.data(w), w5, bias, &geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out.to_vec(), value, Op::Conv { x, w, b, geom, in5, w5 }, rg, "conv")
    }

    /// 2-D convolution on `(B, C, H, W)`, routed through the 3-D kernel with
    /// a unit temporal axis.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!("conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x5, w5, b, ConvGeometry::planar(stride, padding, dilation))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    // -------------------------------------------------------------- pooling

    fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() < 2 {
            return Err(dim_err!("spatial op needs at least two axes, got {shape:?}"));
        }
        let r = shape.len();
        Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
    }

    /// Same-size k x k mean with zero padding and divisor k².
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (p, h, w) = Self::planes(&shape)?;
        let value = kernels::avg_pool2d(self.data(x), p, h, w, k)?;
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::AvgPool { x, k }, rg, "avg_pool2d")
    }

    pub fn resample2d(&mut self, x: Var, mode: Resample) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (p, h, w) = Self::planes(&shape)?;
        let r = shape.len();
        match mode {
            Resample::DownAverage(f) => {
                let value = kernels::downsample_mean(self.data(x), p, h, w, f)?;
                let mut out = shape.clone();
                out[r - 2] = h / f;
                out[r - 1] = w / f;
                let rg = self.rg(&[x]);
                self.push(out, value, Op::Down { x, f }, rg, "downsample")
            }
            Resample::UpLinear(f) => {
                if f == 0 {
                    return Err(param_err!("upsampling factor must be >= 1"));
                }
                self.upsample_to(x, h * f, w * f)
            }
        }
    }

    /// Linear upsampling of the two trailing axes to exactly `(oh, ow)`.
    pub fn upsample_to(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (p, h, w) = Self::planes(&shape)?;
        let value = kernels::upsample_linear(self.data(x), p, h, w, oh, ow);
        let mut out = shape.clone();
        let r = out.len();
        out[r - 2] = oh;
        out[r - 1] = ow;
        let rg = self.rg(&[x]);
        self.push(out, value, Op::Up { x }, rg, "upsample")
    }

    /// Global average pooling `(B, C, H, W) -> (B, C)`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("gap expects (B, C, H, W), got {s:?}"));
        }
        let m = self.mean_axes(x, &[2, 3])?;
        self.reshape(m, &[s[0], s[1]])
    }

    // --------------------------------------------------------------- linear

    /// `x (B, n) -> x W^T + b`, with `W (m, n)` and `b (m)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(dim_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (bsz, n, m) = (xs[0], xs[1], ws[0]);
        let mut value = vec![S::zero(); bsz * m];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(dim_err!("linear bias {:?} does not match {m} outputs", self.shape(b)));
            }
            let bd = self.data(b);
            for row in value.chunks_mut(m) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        S::gemm(bsz, n, m, S::one(), self.data(x), n as isize, 1, self.data(w), 1, n as isize, beta, &mut value, m as isize, 1);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(vec![bsz, m], value, Op::Linear { x, w, b }, rg, "linear")
    }

    // ------------------------------------------------------------ structure

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| param_err!("concat of an empty list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        self.push(shape, value, Op::Concat { xs: xs.to_vec(), axis }, rg, "concat")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err!("narrow [{start}, {}) invalid on axis {axis} of {s:?}", start + len));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.data(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Narrow { x, axis, start }, rg, "narrow")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(x).len() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let value = self.data(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), value, Op::Reshape(x), rg, "reshape")
    }

    /// Repeat size-1 axes up to `shape` (rank preserved).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if !broadcastable(shape, &s) {
            return Err(dim_err!("cannot expand {s:?} to {shape:?}"));
        }
        let src = self.data(x);
        let value = broadcast_map(shape, &s).into_iter().map(|o| src[o]).collect();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), value, Op::Expand(x), rg, "expand")
    }

    /// Mean over `axes`, keeping them as size-1 axes.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut out = s.clone();
        let mut count = 1usize;
        for &a in axes {
            if a >= s.len() || out[a] == 1 && s[a] != 1 {
                return Err(dim_err!("invalid reduction axes {axes:?} for {s:?}"));
            }
            count *= s[a];
            out[a] = 1;
        }
        let mut value = vec![S::zero(); numel(&out)];
        for (v, o) in self.data(x).iter().zip(broadcast_map(&s, &out)) {
            value[o] += *v;
        }
        let inv = S::one() / S::lit(count as f64);
        value.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push(out, value, Op::MeanAxes(x), rg, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v: S = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let v = d.iter().copied().sum::<S>() / S::lit(d.len() as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![v], Op::Mean(x), rg, "mean")
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients of leaves accumulate
    /// across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).requires_grad {
            return Err(Error::Contract("loss does not depend on any tracked tensor".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<S>, grads: &mut [Option<Vec<S>>]) -> Result<()> {
        if matches!(self.nodes[i].op, Op::Leaf) {
            let n = &mut self.nodes[i];
            match n.grad.as_mut() {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => n.grad = Some(g),
            }
            return Ok(());
        }
        let nodes = &self.nodes;
        // Lazily allocated gradient slot for an input, or None if untracked.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves handled above"),
            Op::Unary(x, op) => {
                let (xv, yv) = (&nodes[x.0].value, &node.value);
                if let Some(dx) = slot!(*x) {
                    for k in 0..g.len() {
                        let d = match *op {
                            Unary::Sigmoid => yv[k] * (S::one() - yv[k]),
                            Unary::Tanh => S::one() - yv[k] * yv[k],
                            Unary::Relu => {
                                if xv[k] > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::Square => S::lit(2.0) * xv[k],
                            Unary::Abs => {
                                if xv[k] > S::zero() {
                                    S::one()
                                } else if xv[k] < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::SqrtEps(_) => S::lit(0.5) / yv[k],
                            Unary::Scale(c) => c,
                            Unary::AddConst(_) => S::one(),
                        };
                        dx[k] += g[k] * d;
                    }
                }
            }
            Op::Binary(a, b, op) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ls, rs) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let map: Vec<usize> = if ls == rs {
                    (0..g.len()).collect()
                } else if bv.len() == 1 {
                    vec![0; g.len()]
                } else {
                    broadcast_map(ls, rs)
                };
                if let Some(da) = slot!(*a) {
                    for k in 0..g.len() {
                        let y = bv[map[k]];
                        da[k] += match op {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * y,
                            Binary::Div => g[k] / y,
                        };
                    }
                }
                if let Some(db) = slot!(*b) {
                    for k in 0..g.len() {
                        let (x, y) = (av[k], bv[map[k]]);
                        db[map[k]] += match op {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * x,
                            Binary::Div => -g[k] * x / (y * y),
                        };
                    }
                }
            }
            Op::Conv { x, w, b, geom, in5, w5 } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                // Distinct nodes, so the three slots never alias; collect
                // them into owned buffers first to satisfy the borrow checker.
                let mut dx = nodes[x.0].requires_grad.then(|| vec![S::zero(); xv.len()]);
                let mut dw = nodes[w.0].requires_grad.then(|| vec![S::zero(); wv.len()]);
                let mut db = b.filter(|b| nodes[b.0].requires_grad).map(|_| vec![S::zero(); w5[0]]);
                kernels::conv3d_backward(xv, *in5, wv, *w5, geom, &g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut())?;
                let (x, w, b) = (*x, *w, *b);
                add_into(grads, nodes, x, dx);
                add_into(grads, nodes, w, dw);
                if let Some(b) = b {
                    add_into(grads, nodes, b, db);
                }
            }
            Op::AvgPool { x, k } => {
                if let Some(dx) = slot!(*x) {
                    let (p, h, w) = Self::planes(&node.shape)?;
                    let back = kernels::avg_pool2d(&g, p, h, w, *k)?;
                    dx.iter_mut().zip(back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Down { x, f } => {
                if let Some(dx) = slot!(*x) {
                    let (p, h, w) = Self::planes(&nodes[x.0].shape)?;
                    kernels::downsample_mean_backward(&g, p, h, w, *f, dx);
                }
            }
            Op::Up { x } => {
                if let Some(dx) = slot!(*x) {
                    let (p, h, w) = Self::planes(&nodes[x.0].shape)?;
                    let (_, oh, ow) = Self::planes(&node.shape)?;
                    kernels::upsample_linear_backward(&g, p, h, w, oh, ow, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (&nodes[x.0].shape, &nodes[w.0].shape);
                let (bsz, n, m) = (xs[0], xs[1], ws[0]);
                if let Some(dx) = slot!(*x) {
                    // dx (B x n) += g (B x m) * W (m x n)
                    S::gemm(bsz, m, n, S::one(), &g, m as isize, 1, &nodes[w.0].value, n as isize, 1, S::one(), dx, n as isize, 1);
                }
                if let Some(dw) = slot!(*w) {
                    // dW (m x n) += g^T (m x B) * x (B x n)
                    S::gemm(m, bsz, n, S::one(), &g, 1, m as isize, &nodes[x.0].value, n as isize, 1, S::one(), dw, n as isize, 1);
                }
                if let Some(b) = b {
                    if let Some(db) = slot!(*b) {
                        for row in g.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis] * inner;
                let mut start = 0;
                for &v in xs {
                    let len = nodes[v.0].shape[*axis] * inner;
                    if let Some(dv) = slot!(v) {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + len];
                            dv[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(dx) = slot!(*x) {
                    let xs = &nodes[x.0].shape;
                    let outer = numel(&xs[..*axis]);
                    let inner = numel(&xs[axis + 1..]);
                    let len = node.shape[*axis] * inner;
                    for o in 0..outer {
                        let base = (o * xs[*axis] + start) * inner;
                        dx[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Expand(x) | Op::MeanAxes(x) => {
                let expand = matches!(node.op, Op::Expand(_));
                let (full, small) = if expand {
                    (&node.shape, &nodes[x.0].shape)
                } else {
                    (&nodes[x.0].shape, &node.shape)
                };
                let map = broadcast_map(full, small);
                if let Some(dx) = slot!(*x) {
                    if expand {
                        for (k, o) in map.into_iter().enumerate() {
                            dx[o] += g[k];
                        }
                    } else {
                        let inv = S::lit(numel(small) as f64 / numel(full) as f64);
                        for (k, o) in map.into_iter().enumerate() {
                            dx[k] += g[o] * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = slot!(*x) {
                    let s = g[0] / S::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|a| *a += s);
                }
            }
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var, g: Option<Vec<S>>) {
    let Some(g) = g else { return };
    match grads[v.0].as_mut() {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => {
            debug_assert_eq!(g.len(), nodes[v.0].value.len());
            grads[v.0] = Some(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn(&[2, 3, 4], |i| i as f64).with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(&t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        let th = g.tanh(z).unwrap();
        let r = g.sqrt_eps(z, 1e-6).unwrap();
        assert_eq!(g.data(s), &[0.5]);
        assert_eq!(g.data(th), &[0.0]);
        assert!((g.data(r)[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[1], &[1.0]));
        let z = g.leaf(&t(&[1], &[0.0]));
        assert!(matches!(g.div(a, z), Err(Error::Numeric(_))));
        assert!(g.input(&t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let c = g.leaf(&Tensor::from_fn(&[1, 3, 1, 1], |i| i as f64));
        let y = g.mul(a, c).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2, 2]);
        assert_eq!(g.data(y)[4], 4.0 * 1.0);
        let bad = g.leaf(&Tensor::zeros(&[3, 1, 1]));
        assert!(g.add(a, bad).is_err());
        let bad2 = g.leaf(&Tensor::zeros(&[2, 2, 2, 2]));
        assert!(g.add(a, bad2).is_err());
    }

    #[test]
    fn concat_shapes_and_empty_list() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(&Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.leaf(&Tensor::zeros(&[1, 3, 3, 3]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 3, 3]);
        assert!(matches!(g.concat(&[], 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn linear_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 2], &[2.0, 3.0]));
        let w = g.leaf(&t(&[1, 2], &[1.0, 1.0]));
        let b = g.leaf(&t(&[1], &[1.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[6.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let s = g.sum(x).unwrap();
        assert!(!g.requires_grad(x));
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn gap_of_small_map() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = g.gap(x).unwrap();
        assert_eq!(g.shape(m), &[1, 1]);
        assert_eq!(g.data(m), &[4.0]);
    }
}
