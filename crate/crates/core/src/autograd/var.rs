use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul {
        ta: bool,
        tb: bool,
    },
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    SafeRecip,
    /// Multiplication by a constant slope mask (relu family, abs).
    MaskMul(Rc<Tensor>),
    Reshape(Vec<usize>),
    Expand(Vec<usize>),
    SumTo(Vec<usize>),
    Narrow {
        axis: usize,
        start: usize,
        total: usize,
    },
    Pad {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Conv {
        g: ConvGeom,
    },
    ConvInputGrad {
        g: ConvGeom,
    },
    ConvWeightGrad {
        g: ConvGeom,
    },
    Up2,
    Up2Adjoint,
    GatherRows(Rc<Vec<usize>>),
    ScatterRows(Rc<Vec<usize>>),
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

impl Drop for Node {
    // Long recurrent chains would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let mut stack: Vec<Var> = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A node in the differentiable computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// Leaf that participates in differentiation.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor, op: Op, parents: Vec<Var>) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                op,
                parents,
                requires_grad,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    // ----- elementwise -----

    pub fn add(&self, o: &Var) -> Var {
        let v = self.value().zip_map(o.value(), |a, b| a + b);
        Var::from_op(v, Op::Add, vec![self.clone(), o.clone()])
    }

    pub fn sub(&self, o: &Var) -> Var {
        let v = self.value().zip_map(o.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub, vec![self.clone(), o.clone()])
    }

    pub fn mul(&self, o: &Var) -> Var {
        let v = self.value().zip_map(o.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul, vec![self.clone(), o.clone()])
    }

    pub fn div(&self, o: &Var) -> Var {
        self.mul(&o.recip())
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|a| -a), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::from_op(self.value().map(|a| a * k), Op::Scale(k), vec![self.clone()])
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        Var::from_op(self.value().map(|a| a + k), Op::AddScalar, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f64::ln), Op::Log, vec![self.clone()])
    }

    /// Square root whose derivative at zero is taken as zero.
    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    /// `1 / x`, with `1 / 0` defined as 0.
    pub fn recip(&self) -> Var {
        Var::from_op(self.value().map(safe_recip), Op::SafeRecip, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().map(|a| if a > 0.0 { 1.0 } else { slope });
        self.mask_mul(mask)
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self) -> Var {
        let mask = self.value().map(|a| {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.mask_mul(mask)
    }

    fn mask_mul(&self, mask: Tensor) -> Var {
        let v = self.value().zip_map(&mask, |a, m| a * m);
        Var::from_op(v, Op::MaskMul(Rc::new(mask)), vec![self.clone()])
    }

    // ----- linear algebra -----

    pub fn matmul(&self, o: &Var) -> Var {
        self.matmul_t(o, false, false)
    }

    /// `op(self) * op(o)` where `op` optionally transposes a matrix.
    pub fn matmul_t(&self, o: &Var, ta: bool, tb: bool) -> Var {
        let v = matmul_value(self.value(), o.value(), ta, tb);
        Var::from_op(v, Op::MatMul { ta, tb }, vec![self.clone(), o.clone()])
    }

    // ----- shape -----

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value().clone().reshape(shape);
        Var::from_op(v, Op::Reshape(self.shape().to_vec()), vec![self.clone()])
    }

    pub fn expand(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().expand(shape);
        Var::from_op(v, Op::Expand(self.shape().to_vec()), vec![self.clone()])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().sum_to(shape);
        Var::from_op(v, Op::SumTo(self.shape().to_vec()), vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let total = self.shape()[axis];
        let v = self.value().narrow(axis, start, len);
        Var::from_op(v, Op::Narrow { axis, start, total }, vec![self.clone()])
    }

    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var {
        let len = self.shape()[axis];
        let v = self.value().pad_axis(axis, start, total);
        Var::from_op(v, Op::Pad { axis, start, len }, vec![self.clone()])
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero vars");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat(&tensors, axis);
        let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(v, Op::Concat { axis, sizes }, parts.to_vec())
    }

    // ----- image ops -----

    /// 2-D cross-correlation of NCHW input with an OIHW kernel.
    pub fn conv2d(&self, w: &Var, stride: usize, padding: usize) -> Var {
        let g = ConvGeom { stride, padding };
        let v = kernels::conv2d(self.value(), w.value(), g);
        Var::from_op(v, Op::Conv { g }, vec![self.clone(), w.clone()])
    }

    fn conv_input_grad(gy: &Var, w: &Var, in_shape: &[usize], g: ConvGeom) -> Var {
        let v = kernels::conv2d_input_grad(gy.value(), w.value(), in_shape, g);
        Var::from_op(v, Op::ConvInputGrad { g }, vec![gy.clone(), w.clone()])
    }

    fn conv_weight_grad(x: &Var, gy: &Var, w_shape: &[usize], g: ConvGeom) -> Var {
        let v = kernels::conv2d_weight_grad(x.value(), gy.value(), w_shape, g);
        Var::from_op(v, Op::ConvWeightGrad { g }, vec![x.clone(), gy.clone()])
    }

    /// Bilinear 2x upsampling.
    pub fn upsample2x(&self) -> Var {
        Var::from_op(kernels::upsample2x(self.value()), Op::Up2, vec![self.clone()])
    }

    fn upsample2x_adjoint(&self) -> Var {
        Var::from_op(
            kernels::upsample2x_adjoint(self.value()),
            Op::Up2Adjoint,
            vec![self.clone()],
        )
    }

    /// Row lookup into a `[rows, cols]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Var {
        let ids = Rc::new(ids.to_vec());
        let v = kernels::gather_rows(self.value(), &ids);
        Var::from_op(v, Op::GatherRows(ids), vec![self.clone()])
    }

    fn scatter_rows(&self, ids: Rc<Vec<usize>>, rows: usize) -> Var {
        let v = kernels::scatter_rows(self.value(), &ids, rows);
        Var::from_op(v, Op::ScatterRows(ids), vec![self.clone()])
    }

    // ----- composites -----

    /// Softmax over the leading axis of a `[T, 1]` column.
    pub fn softmax_col(&self) -> Var {
        let max = self.value().data().iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let shifted = self.add_scalar(-max);
        let e = shifted.exp();
        let z = e.sum().expand(self.shape());
        e.div(&z)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn safe_recip(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        1.0 / x
    }
}

fn matmul_value(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be a matrix");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be a matrix");
    let (m, k) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (k2, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    super::tensor::gemm(m, k, n, a.data(), ta, b.data(), tb, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

impl Node {
    /// Gradients for each parent given the output gradient `g`; `need[i]`
    /// marks parents whose gradient is wanted.
    fn backward(&self, out: &Var, g: &Var, need: &[bool]) -> Vec<Option<Var>> {
        let p = &self.parents;
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        match &self.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), want(1).then(|| g.neg())],
            Op::Mul => vec![want(0).then(|| g.mul(&p[1])), want(1).then(|| g.mul(&p[0]))],
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(k) => vec![Some(g.scale(*k))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::MatMul { ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (a, b) = (&p[0], &p[1]);
                let ga = want(0).then(|| {
                    if ta {
                        b.matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(b, false, !tb)
                    }
                });
                let gb = want(1).then(|| {
                    if tb {
                        g.matmul_t(a, true, ta)
                    } else {
                        a.matmul_t(g, !ta, false)
                    }
                });
                vec![ga, gb]
            }
            Op::Tanh => {
                let one_minus = out.square().neg().add_scalar(1.0);
                vec![Some(g.mul(&one_minus))]
            }
            Op::Sigmoid => {
                let d = out.mul(&out.neg().add_scalar(1.0));
                vec![Some(g.mul(&d))]
            }
            Op::Exp => vec![Some(g.mul(out))],
            Op::Log => vec![Some(g.mul(&p[0].recip()))],
            Op::Sqrt => vec![Some(g.mul(&out.recip()).scale(0.5))],
            Op::SafeRecip => vec![Some(g.mul(&out.square()).neg())],
            Op::MaskMul(mask) => {
                vec![Some(g.mask_mul((**mask).clone()))]
            }
            Op::Reshape(shape) => vec![Some(g.reshape(shape))],
            Op::Expand(shape) => vec![Some(g.sum_to(shape))],
            Op::SumTo(shape) => vec![Some(g.expand(shape))],
            Op::Narrow { axis, start, total } => vec![Some(g.pad_axis(*axis, *start, *total))],
            Op::Pad { axis, start, len } => vec![Some(g.narrow(*axis, *start, *len))],
            Op::Concat { axis, sizes } => {
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let r = want(i).then(|| g.narrow(*axis, off, s));
                        off += s;
                        r
                    })
                    .collect()
            }
            Op::Conv { g: geom } => {
                let (x, w) = (&p[0], &p[1]);
                vec![
                    want(0).then(|| Var::conv_input_grad(g, w, x.shape(), *geom)),
                    want(1).then(|| Var::conv_weight_grad(x, g, w.shape(), *geom)),
                ]
            }
            Op::ConvInputGrad { g: geom } => {
                // out = A_w^T gy  =>  d gy = conv(g, w), d w = weight_grad(g, gy)
                let (gy, w) = (&p[0], &p[1]);
                vec![
                    want(0).then(|| g.conv2d(w, geom.stride, geom.padding)),
                    want(1).then(|| Var::conv_weight_grad(g, gy, w.shape(), *geom)),
                ]
            }
            Op::ConvWeightGrad { g: geom } => {
                // <g, out> = <conv(x, g), gy>
                let (x, gy) = (&p[0], &p[1]);
                vec![
                    want(0).then(|| Var::conv_input_grad(gy, g, x.shape(), *geom)),
                    want(1).then(|| x.conv2d(g, geom.stride, geom.padding)),
                ]
            }
            Op::Up2 => vec![Some(g.upsample2x_adjoint())],
            Op::Up2Adjoint => vec![Some(g.upsample2x())],
            Op::GatherRows(ids) => {
                let rows = p[0].shape()[0];
                vec![Some(g.scatter_rows(ids.clone(), rows))]
            }
            Op::ScatterRows(ids) => vec![Some(g.gather_rows(ids))],
        }
    }
}

/// Gradients keyed by leaf id.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Var>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id()).map(|g| g.value())
    }

    pub fn get_var(&self, v: &Var) -> Option<&Var> {
        self.map.get(&v.id())
    }

    /// Gradient with respect to `v`, zero if `v` does not influence the output.
    pub fn get_or_zero(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Nodes reachable from `root` through differentiable edges, parents first.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.0.parents.iter().rev() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn backprop(output: &Var, targets: Option<&[&Var]>, create_graph: bool) -> HashMap<u64, Var> {
    let run = || {
        let order = topo_order(output);
        let mut needed: HashMap<u64, bool> = HashMap::with_capacity(order.len());
        let target_ids: Option<std::collections::HashSet<u64>> = targets.map(|t| t.iter().map(|v| v.id()).collect());
        for v in &order {
            let n = match &target_ids {
                Some(ids) => {
                    ids.contains(&v.id())
                        || v.0
                            .parents
                            .iter()
                            .any(|p| needed.get(&p.id()).copied().unwrap_or(false))
                }
                None => true,
            };
            needed.insert(v.id(), n);
        }
        let mut grads: HashMap<u64, Var> = HashMap::new();
        if !output.requires_grad() {
            return grads;
        }
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
        let mut result = HashMap::new();
        for v in order.iter().rev() {
            let Some(g) = grads.remove(&v.id()) else {
                continue;
            };
            let node = &v.0;
            if matches!(node.op, Op::Leaf) {
                let keep = match &target_ids {
                    Some(ids) => ids.contains(&v.id()),
                    None => true,
                };
                if keep {
                    result.insert(v.id(), g);
                }
                continue;
            }
            if let Some(ids) = &target_ids {
                if ids.contains(&v.id()) {
                    result.insert(v.id(), g.clone());
                }
            }
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|p| p.requires_grad() && needed.get(&p.id()).copied().unwrap_or(false))
                .collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let pg = node.backward(v, &g, &need);
            for ((parent, gp), &want) in node.parents.iter().zip(pg).zip(&need) {
                let (Some(gp), true) = (gp, want) else {
                    continue;
                };
                match grads.remove(&parent.id()) {
                    Some(acc) => {
                        grads.insert(parent.id(), acc.add(&gp));
                    }
                    None => {
                        grads.insert(parent.id(), gp);
                    }
                }
            }
        }
        result
    };
    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}

/// Reverse-mode gradients of a scalar `output` with respect to every leaf
/// that requires grad.
pub fn backward(output: &Var) -> Gradients {
    Gradients {
        map: backprop(output, None, false),
    }
}

/// Gradients of `output` with respect to `inputs`. With `create_graph` the
/// returned vars are themselves differentiable.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    let map = backprop(output, Some(inputs), create_graph);
    inputs
        .iter()
        .map(|v| {
            map.get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, o: &Var) -> Var {
        Var::add(self, o)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, o: &Var) -> Var {
        Var::sub(self, o)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, o: &Var) -> Var {
        Var::mul(self, o)
    }
}
