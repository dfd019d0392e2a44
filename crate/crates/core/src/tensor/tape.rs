use std::sync::Arc;

use super::kernels::{self, gemm_acc};
use super::{check_permutation, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    Relu,
    Gelu,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Global minimum; treated as a constant by `backward`.
    MinAll,
    /// Global maximum; treated as a constant by `backward`.
    MaxAll,
    /// `Σ|x|` over the last axis.
    RowAbsSum,
}

/// Shape bookkeeping for a (batched) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    batch_a: usize,
    batch_b: usize,
    batch_out: usize,
    pub(crate) out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, ka) = if ta {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let (kb, n) = if tb {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (la, lb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let lead = if la.len() >= lb.len() { la } else { lb };
        let short = if la.len() >= lb.len() { lb } else { la };
        if lead[lead.len() - short.len()..] != *short {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            ta,
            tb,
            m,
            n,
            k: ka,
            batch_a: la.iter().product(),
            batch_b: lb.iter().product(),
            batch_out: lead.iter().product(),
            out_shape,
        })
    }

    pub(crate) fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, n, k) = (self.m, self.n, self.k);
        let mut out = vec![0.0; self.batch_out * m * n];
        for i in 0..self.batch_out {
            let ai = i % self.batch_a;
            let bi = i % self.batch_b;
            gemm_acc(
                self.ta,
                self.tb,
                m,
                n,
                k,
                &a[ai * m * k..(ai + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        out
    }

    fn backward(
        &self,
        g: &[f64],
        a: &[f64],
        b: &[f64],
        ga: Option<&mut [f64]>,
        gb: Option<&mut [f64]>,
    ) {
        let (m, n, k) = (self.m, self.n, self.k);
        let (sa, sb, sg) = (m * k, k * n, m * n);
        if let Some(ga) = ga {
            for i in 0..self.batch_out {
                let ai = i % self.batch_a;
                let bi = i % self.batch_b;
                let gi = &g[i * sg..(i + 1) * sg];
                let bs = &b[bi * sb..(bi + 1) * sb];
                let out = &mut ga[ai * sa..(ai + 1) * sa];
                match (self.ta, self.tb) {
                    (false, false) => gemm_acc(false, true, m, k, n, gi, bs, out),
                    (false, true) => gemm_acc(false, false, m, k, n, gi, bs, out),
                    (true, false) => gemm_acc(false, true, k, m, n, bs, gi, out),
                    (true, true) => gemm_acc(true, true, k, m, n, bs, gi, out),
                }
            }
        }
        if let Some(gb) = gb {
            for i in 0..self.batch_out {
                let ai = i % self.batch_a;
                let bi = i % self.batch_b;
                let gi = &g[i * sg..(i + 1) * sg];
                let as_ = &a[ai * sa..(ai + 1) * sa];
                let out = &mut gb[bi * sb..(bi + 1) * sb];
                match (self.ta, self.tb) {
                    (false, false) => gemm_acc(true, false, k, n, m, as_, gi, out),
                    (false, true) => gemm_acc(true, false, n, k, m, gi, as_, out),
                    (true, false) => gemm_acc(false, false, k, n, m, as_, gi, out),
                    (true, true) => gemm_acc(true, true, n, k, m, gi, as_, out),
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Binary {
        op: ElementwiseOp,
        a: Var,
        b: Var,
    },
    Unary {
        op: ElementwiseOp,
        a: Var,
    },
    Affine {
        a: Var,
        mul: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    /// Detached reduction (min/max): no gradient flows.
    Detached,
    RowAbsSum {
        a: Var,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        inverse: Vec<usize>,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    AbsAct {
        a: Var,
        cols: usize,
        eps: f64,
        denoms: Vec<f64>,
        allowed: Option<Arc<Vec<bool>>>,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: Var,
        scale: Vec<f64>,
    },
    ShiftMin {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order (which is a topological order)
/// and replays them in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Values of detached quantities (global min/max) in recording order.
    detached: Vec<f64>,
    replay: Option<(Vec<f64>, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Detached constants recorded so far, in order.
    pub fn detached_values(&self) -> &[f64] {
        &self.detached
    }

    /// Use `values` (from [`Tape::detached_values`] of an earlier run) in
    /// place of freshly computed detached constants. This lets finite
    /// differences see the same stop-gradient function that `backward`
    /// differentiates.
    pub fn replay_detached(&mut self, values: Vec<f64>) {
        self.replay = Some((values, 0));
    }

    fn detached_value(&mut self, computed: f64) -> f64 {
        let v = match &mut self.replay {
            Some((vals, pos)) if *pos < vals.len() => {
                *pos += 1;
                vals[*pos - 1]
            }
            _ => computed,
        };
        self.detached.push(v);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut t = tensor;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    // ---------------------------------------------------------------- matmul

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), ta, tb)?;
        let data = plan.forward(self.value(a).data(), self.value(b).data());
        let value = Tensor::new(plan.out_shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, plan }, rg))
    }

    // ----------------------------------------------------------- elementwise

    /// Binary ops accept `b` of identical shape, a single element, or a shape
    /// equal to a trailing suffix of `a`'s shape (repeated over the leading
    /// axes). Unary ops ignore `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        if op.is_binary() {
            let b = b.ok_or_else(|| Error::invalid("elementwise", format!("{op:?} needs two operands")))?;
            return self.binary(op, a, b);
        }
        let x = self.value(a);
        let data: Vec<f64> = match op {
            ElementwiseOp::Abs => x.data().iter().map(|v| v.abs()).collect(),
            ElementwiseOp::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
            ElementwiseOp::Gelu => x.data().iter().map(|&v| kernels::gelu(v)).collect(),
            _ => unreachable!(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary { op, a }, rg))
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bl = self.value(b).len();
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !(bl == 1 || suffix_ok) {
            return Err(Error::shape("elementwise", sa, sb));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(xa.len());
        for (i, &x) in xa.iter().enumerate() {
            let y = xb[i % bl];
            data.push(match op {
                ElementwiseOp::Add => x + y,
                ElementwiseOp::Sub => x - y,
                ElementwiseOp::Mul => x * y,
                ElementwiseOp::Div => {
                    if y == 0.0 {
                        return Err(Error::Numeric {
                            op: "div",
                            index: i % bl,
                            msg: "division by zero".into(),
                        });
                    }
                    x / y
                }
                _ => unreachable!(),
            });
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { op, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Abs, a, None).expect("unary")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Relu, a, None).expect("unary")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Gelu, a, None).expect("unary")
    }

    /// `a · mul + add` with constant scalars.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let value = self.value(a).map(|v| v * mul + add);
        let rg = self.rg(a);
        self.push(value, Op::Affine { a, mul }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    // ------------------------------------------------------------- reduction

    /// Reduce `a`. `Sum`/`Mean` reduce everything when `axis` is `None`,
    /// otherwise the given axis (which is removed from the shape).
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let rg = self.rg(a);
        match (op, axis) {
            (ReduceOp::Sum, None) => {
                let v = Tensor::scalar(x.sum_all());
                Ok(self.push(v, Op::Sum { a }, rg))
            }
            (ReduceOp::Mean, None) => {
                let v = Tensor::scalar(x.mean_all());
                Ok(self.push(v, Op::Mean { a }, rg))
            }
            (ReduceOp::Sum | ReduceOp::Mean, Some(ax)) => {
                if ax >= shape.len() {
                    return Err(Error::invalid(
                        "reduce",
                        format!("axis {ax} out of range for shape {shape:?}"),
                    ));
                }
                let outer: usize = shape[..ax].iter().product();
                let len = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mean = op == ReduceOp::Mean;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut new_shape: Vec<usize> = shape.clone();
                new_shape.remove(ax);
                if new_shape.is_empty() {
                    new_shape.push(1);
                }
                let v = Tensor::new(new_shape, out)?;
                Ok(self.push(
                    v,
                    Op::SumAxis {
                        a,
                        outer,
                        len,
                        inner,
                        mean,
                    },
                    rg,
                ))
            }
            (ReduceOp::MinAll, _) => {
                let m = x.min_all();
                let v = Tensor::scalar(self.detached_value(m));
                Ok(self.push(v, Op::Detached, false))
            }
            (ReduceOp::MaxAll, _) => {
                let m = x.max_all();
                let v = Tensor::scalar(self.detached_value(m));
                Ok(self.push(v, Op::Detached, false))
            }
            (ReduceOp::RowAbsSum, _) => {
                let cols = *shape.last().expect("rank >= 1");
                let sums = x.row_abs_sum();
                let mut new_shape = shape[..shape.len() - 1].to_vec();
                if new_shape.is_empty() {
                    new_shape.push(1);
                }
                let v = Tensor::new(new_shape, sums)?;
                Ok(self.push(v, Op::RowAbsSum { a, cols }, rg))
            }
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None).expect("mean")
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(new_shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        check_permutation(perm, self.value(a).rank())?;
        let v = self.value(a).permute(perm)?;
        let rg = self.rg(a);
        let inverse = kernels::inverse_permutation(perm);
        Ok(self.push(v, Op::Permute { a, inverse }, rg))
    }

    pub fn permute_reshape(&mut self, a: Var, perm: &[usize], new_shape: &[usize]) -> Result<Var> {
        let p = self.permute(a, perm)?;
        self.reshape(p, new_shape)
    }

    // ---------------------------------------------------- row normalizations

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax where `allowed` (rows × cols of the trailing matrix)
    /// excludes entries as if their score were −∞.
    pub fn softmax_rows_masked(&mut self, a: Var, allowed: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().expect("rank >= 1");
        check_pattern("softmax_rows", x.shape(), allowed.as_deref())?;
        let data = kernels::softmax_rows(x.data(), cols, allowed.as_ref().map(|p| p.as_slice()))?;
        let v = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softmax { a, cols }, rg))
    }

    /// Signed absolute-sum normalization over the last axis. See
    /// [`kernels::absact_rows`].
    pub fn absact(
        &mut self,
        a: Var,
        eps: f64,
        delta: f64,
        allowed: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().expect("rank >= 1");
        check_pattern("absact", x.shape(), allowed.as_deref())?;
        let (data, denoms) =
            kernels::absact_rows(x.data(), cols, eps, delta, allowed.as_ref().map(|p| p.as_slice()))?;
        let v = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            v,
            Op::AbsAct {
                a,
                cols,
                eps,
                denoms,
                allowed,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm", "eps must be positive"));
        }
        let x = self.value(a);
        let d = *x.shape().last().expect("rank >= 1");
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layernorm", x.shape(), self.shape(gain)));
        }
        let r = kernels::layernorm_rows(x.data(), self.value(gain).data(), self.value(bias).data(), eps);
        let v = Tensor::new(x.shape().to_vec(), r.out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat: r.xhat,
                inv_std: r.inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. In eval mode (or with `rate == 0`) returns `a`.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let scale: Vec<f64> = (0..x.len())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Dropout { a, scale }, rg))
    }

    /// Subtract from each trailing matrix its own global minimum. The
    /// minimum is a constant for differentiation.
    pub fn shift_by_min(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::invalid("shift_by_min", "rank must be >= 2"));
        }
        let inner = s[s.len() - 1] * s[s.len() - 2];
        let shape = s.to_vec();
        let mut data = x.data().to_vec();
        for mat in data.chunks_mut(inner) {
            let mn = mat.iter().copied().fold(f64::INFINITY, f64::min);
            let mn = self.detached_value(mn);
            mat.iter_mut().for_each(|v| *v -= mn);
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::ShiftMin { a }, rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`. Replaces any gradients from
    /// a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul { a, b, plan } => {
                let mut ga = needs(*a).then(|| vec![0.0; nodes[a.0].value.len()]);
                let mut gb = needs(*b).then(|| vec![0.0; nodes[b.0].value.len()]);
                plan.backward(g, val(*a), val(*b), ga.as_deref_mut(), gb.as_deref_mut());
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Binary { op, a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                let bl = xb.len();
                if needs(*a) {
                    let ga: Vec<f64> = match op {
                        ElementwiseOp::Add | ElementwiseOp::Sub => g.to_vec(),
                        ElementwiseOp::Mul => g.iter().enumerate().map(|(j, gv)| gv * xb[j % bl]).collect(),
                        ElementwiseOp::Div => g.iter().enumerate().map(|(j, gv)| gv / xb[j % bl]).collect(),
                        _ => unreachable!(),
                    };
                    accumulate(grads, *a, &ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; bl];
                    for (j, gv) in g.iter().enumerate() {
                        let y = xb[j % bl];
                        gb[j % bl] += match op {
                            ElementwiseOp::Add => *gv,
                            ElementwiseOp::Sub => -gv,
                            ElementwiseOp::Mul => gv * xa[j],
                            ElementwiseOp::Div => -gv * xa[j] / (y * y),
                            _ => unreachable!(),
                        };
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Unary { op, a } => {
                let x = val(*a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        gv * match op {
                            ElementwiseOp::Abs => sign(xv),
                            ElementwiseOp::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ElementwiseOp::Gelu => kernels::gelu_grad(xv),
                            _ => unreachable!(),
                        }
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Affine { a, mul } => {
                let ga: Vec<f64> = g.iter().map(|v| v * mul).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum { a } => {
                let n = nodes[a.0].value.len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = nodes[a.0].value.len();
                accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
                mean,
            } => {
                let f = if *mean { 1.0 / *len as f64 } else { 1.0 };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            ga[(o * len + l) * inner + j] = g[o * inner + j] * f;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::RowAbsSum { a, cols } => {
                let x = val(*a);
                let ga: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(j, &xv)| g[j / cols] * sign(xv))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Reshape { a } => accumulate(grads, *a, g),
            Op::Permute { a, inverse } => {
                let out_shape = nodes[i].value.shape();
                let ga = kernels::permute(g, out_shape, inverse);
                accumulate(grads, *a, &ga);
            }
            // excluded entries have y == 0, so their gradient vanishes as well
            Op::Softmax { a, cols } => {
                let y = nodes[i].value.data();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y
                    .chunks(*cols)
                    .zip(g.chunks(*cols))
                    .zip(ga.chunks_mut(*cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::AbsAct {
                a,
                cols,
                eps,
                denoms,
                allowed,
            } => {
                let x = val(*a);
                let mut ga = vec![0.0; x.len()];
                for (r, s) in denoms.iter().enumerate() {
                    let pat = allowed
                        .as_ref()
                        .map(|p| kernels::pattern_row(p, *cols, r));
                    let ok = |j: usize| pat.is_none_or(|p| p[j]);
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    // Σ_j g_j u_j over allowed entries
                    let mut gu = 0.0;
                    for j in 0..*cols {
                        if ok(j) {
                            gu += gr[j] * (xr[j] + eps);
                        }
                    }
                    let out = &mut ga[r * cols..(r + 1) * cols];
                    for l in 0..*cols {
                        if ok(l) {
                            out[l] = gr[l] / s - sign(xr[l] + eps) * gu / (s * s);
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gw = val(*gain);
                let d = gw.len();
                if needs(*a) {
                    let mut ga = vec![0.0; xhat.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gw).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] = inv / d as f64 * (d as f64 * dh[j] - s1 - h[j] * s2);
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
                if needs(*gain) || needs(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for (idx, gv) in g.iter().enumerate() {
                        gg[idx % d] += gv * xhat[idx];
                        gbias[idx % d] += gv;
                    }
                    if needs(*gain) {
                        accumulate(grads, *gain, &gg);
                    }
                    if needs(*bias) {
                        accumulate(grads, *bias, &gbias);
                    }
                }
            }
            Op::Dropout { a, scale } => {
                let ga: Vec<f64> = g.iter().zip(scale).map(|(a, b)| a * b).collect();
                accumulate(grads, *a, &ga);
            }
            Op::ShiftMin { a } => accumulate(grads, *a, g),
        }
    }
}

fn check_pattern(op: &'static str, shape: &[usize], allowed: Option<&Vec<bool>>) -> Result<()> {
    if let Some(p) = allowed {
        let r = shape.len();
        let mat = if r >= 2 { shape[r - 1] * shape[r - 2] } else { shape[0] };
        if p.len() != mat {
            return Err(Error::shape(op, shape, &[p.len()]));
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::rand_uniform(shape, -2.0, 2.0, &mut rng)
    }

    fn weights(shape: &[usize], seed: u64) -> Tensor {
        // fixed random weights make every output element matter
        rand(shape, seed + 1000)
    }

    /// `Σ w ⊙ y` so that the gradient probes every output element.
    fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let w = t.constant(weights(t.shape(y), seed));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn grad_matmul_all_transposes() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let sa = if ta { [4, 3] } else { [3, 4] };
            let sb = if tb { [2, 4] } else { [4, 2] };
            let r = gradcheck::check(&[rand(&sa, 1), rand(&sb, 2)], H, |t, v| {
                let y = t.matmul_ex(v[0], v[1], ta, tb)?;
                weighted_sum(t, y, 3)
            })
            .unwrap();
            assert!(r.max_rel_error() < TOL, "{ta} {tb}: {r:?}");
        }
    }

    #[test]
    fn grad_batched_matmul_with_broadcast() {
        let r = gradcheck::check(&[rand(&[2, 3, 4, 5], 1), rand(&[3, 5, 2], 2)], H, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
        let r = gradcheck::check(&[rand(&[2, 3, 4, 5], 1), rand(&[3, 4, 2], 2)], H, |t, v| {
            let y = t.matmul_tn(v[0], v[1])?;
            weighted_sum(t, y, 4)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
    }

    #[test]
    fn grad_sum_of_product_is_b_transpose_pattern() {
        // d(sum(A·B))/dA_ij = Σ_k B_jk
        let a = rand(&[3, 4], 5);
        let b = rand(&[4, 2], 6);
        let mut t = Tape::new();
        let va = t.leaf(a.clone().with_requires_grad(true));
        let vb = t.constant(b.clone());
        let p = t.matmul(va, vb).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        let g = t.grad(va).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|k| b.at(&[j, k])).sum();
                assert!((g[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_elementwise_binary_and_broadcast() {
        for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul, ElementwiseOp::Div] {
            for bshape in [vec![3, 4], vec![4], vec![1]] {
                let mut b = rand(&bshape, 8);
                if op == ElementwiseOp::Div {
                    b = b.map(|v| if v.abs() < 0.5 { v.signum() * 0.5 + v } else { v });
                }
                let r = gradcheck::check(&[rand(&[3, 4], 7), b], H, |t, v| {
                    let y = t.elementwise(op, v[0], Some(v[1]))?;
                    weighted_sum(t, y, 9)
                })
                .unwrap();
                assert!(r.max_rel_error() < TOL, "{op:?} {bshape:?}: {r:?}");
            }
        }
    }

    #[test]
    fn grad_unary() {
        // keep inputs away from the kinks of abs/relu
        let x = rand(&[4, 5], 10).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        for op in [ElementwiseOp::Abs, ElementwiseOp::Relu, ElementwiseOp::Gelu] {
            let r = gradcheck::check(std::slice::from_ref(&x), H, |t, v| {
                let y = t.elementwise(op, v[0], None)?;
                weighted_sum(t, y, 11)
            })
            .unwrap();
            assert!(r.max_rel_error() < TOL, "{op:?}: {r:?}");
        }
    }

    #[test]
    fn gelu_gradient_at_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.5).with_requires_grad(true));
        let y = t.gelu(x);
        t.backward(y).unwrap();
        let h = 1e-6;
        let fd = (kernels::gelu(0.5 + h) - kernels::gelu(0.5 - h)) / (2.0 * h);
        assert!((t.grad(x).unwrap()[0] - fd).abs() < 1e-6);
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
        let y = t.abs(a);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 0.0]);
        let m = rand(&[2, 3], 1);
        let mv = t.constant(m.clone());
        let ones = t.constant(Tensor::ones(&[2, 3]));
        let y = t.mul(mv, ones).unwrap();
        assert_eq!(t.value(y), &m);
    }

    #[test]
    fn division_by_zero_reports_index() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::ones(&[3]));
        let b = t.constant(Tensor::new(vec![3], vec![1.0, 0.0, 2.0]).unwrap());
        match t.div(a, b) {
            Err(Error::Numeric { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn grad_reductions() {
        let x = rand(&[4, 3], 12).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        for (op, axis) in [
            (ReduceOp::Sum, None),
            (ReduceOp::Mean, None),
            (ReduceOp::Sum, Some(0)),
            (ReduceOp::Mean, Some(1)),
            (ReduceOp::RowAbsSum, None),
        ] {
            let r = gradcheck::check(std::slice::from_ref(&x), H, |t, v| {
                let y = t.reduce(op, v[0], axis)?;
                weighted_sum(t, y, 13)
            })
            .unwrap();
            assert!(r.max_rel_error() < TOL, "{op:?} {axis:?}: {r:?}");
        }
    }

    #[test]
    fn sum_axis0_vs_loop() {
        let x = rand(&[4, 3], 14);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let s = t.reduce(ReduceOp::Sum, v, Some(0)).unwrap();
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| x.at(&[i, j])).sum();
            assert!((t.value(s).data()[j] - want).abs() < 1e-12);
        }
        assert!(t.reduce(ReduceOp::Sum, v, Some(2)).is_err());
    }

    #[test]
    fn min_max_all_are_detached() {
        let x = Tensor::from_rows(&[vec![2.0, 5.0], vec![-1.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x.with_requires_grad(true));
        let mn = t.reduce(ReduceOp::MinAll, v, None).unwrap();
        assert_eq!(t.value(mn).data(), &[-1.0]);
        let mx = t.reduce(ReduceOp::MaxAll, v, None).unwrap();
        assert_eq!(t.value(mx).data(), &[5.0]);
        let s = t.sum(v);
        let y = t.add(s, mn).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_permute_reshape() {
        let r = gradcheck::check(&[rand(&[2, 3, 4], 15)], H, |t, v| {
            let y = t.permute_reshape(v[0], &[1, 0, 2], &[3, 8])?;
            weighted_sum(t, y, 16)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
    }

    #[test]
    fn patch_first_flatten_order() {
        // (B=1, C=2, P=3, D=1) -> (B, P, C, D) -> (B, P·C, D)
        let data: Vec<f64> = (0..6).map(f64::from).collect(); // c*3 + p
        let x = Tensor::new(vec![1, 2, 3, 1], data).unwrap();
        let y = x.permute_reshape(&[0, 2, 1, 3], &[1, 6, 1]).unwrap();
        // index-map oracle: flat = p*C + c holds element (c, p)
        let mut want = vec![0.0; 6];
        for c in 0..2 {
            for p in 0..3 {
                want[p * 2 + c] = (c * 3 + p) as f64;
            }
        }
        assert_eq!(y.data(), want.as_slice());
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_errors() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.permute(v, &[0, 0]).is_err());
        assert!(t.reshape(v, &[4]).is_err());
        let same = t.permute(v, &[0, 1]).unwrap();
        assert_eq!(t.value(same), t.value(v));
    }

    #[test]
    fn grad_softmax_rows() {
        let r = gradcheck::check(&[rand(&[3, 5], 17)], H, |t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 18)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
        let allowed = Arc::new(vec![true, false, true, true, false, true, true, true, false]);
        let r = gradcheck::check(&[rand(&[2, 3, 3], 19)], H, |t, v| {
            let y = t.softmax_rows_masked(v[0], Some(allowed.clone()))?;
            weighted_sum(t, y, 20)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
    }

    #[test]
    fn grad_absact_stabilized_and_restricted() {
        let x = rand(&[2, 4, 4], 21).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let r = gradcheck::check(std::slice::from_ref(&x), H, |t, v| {
            let y = t.absact(v[0], 1e-4, 1e-8, None)?;
            weighted_sum(t, y, 22)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
        let allowed = Arc::new((0..16).map(|i| i % 3 != 1).collect::<Vec<_>>());
        let r = gradcheck::check(&[x], H, |t, v| {
            let y = t.absact(v[0], 1e-4, 1e-8, Some(allowed.clone()))?;
            weighted_sum(t, y, 23)
        })
        .unwrap();
        assert!(r.max_rel_error() < TOL, "{r:?}");
    }

    #[test]
    fn grad_layernorm() {
        let r = gradcheck::check(
            &[rand(&[3, 6], 24), rand(&[6], 25), rand(&[6], 26)],
            H,
            |t, v| {
                let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 27)
            },
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-5, "{r:?}");
    }

    #[test]
    fn layernorm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[3]));
        let b = t.constant(Tensor::zeros(&[3]));
        let c = t.constant(Tensor::full(&[1, 3], 4.0));
        let y = t.layernorm(c, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
        let x = t.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.layernorm(x, g, b, 1e-15).unwrap();
        let d = t.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        assert!(t.layernorm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn shift_by_min_gradient_treats_min_as_constant() {
        let x = rand(&[2, 3, 3], 28);
        let mut t = Tape::new();
        let v = t.leaf(x.clone().with_requires_grad(true));
        let s = t.shift_by_min(v).unwrap();
        for (mat_in, mat_out) in x.data().chunks(9).zip(t.value(s).data().chunks(9)) {
            let mn = mat_in.iter().copied().fold(f64::INFINITY, f64::min);
            for (a, b) in mat_in.iter().zip(mat_out) {
                assert_eq!(a - mn, *b);
            }
        }
        let y = t.affine(s, 1.5, 0.2);
        let l = weighted_sum(&mut t, y, 29).unwrap();
        t.backward(l).unwrap();
        let w = weights(&[2, 3, 3], 29);
        for (g, wv) in t.grad(v).unwrap().iter().zip(w.data()) {
            assert!((g - 1.5 * wv).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_by_min_passes_gradcheck_with_frozen_min() {
        let x = rand(&[2, 3, 3], 30);
        let m = rand(&[3, 3], 31);
        let r = gradcheck::check(&[x, m], 1e-5, |t, v| {
            let s = t.shift_by_min(v[0])?;
            let y = t.mul(s, v[1])?;
            let y = t.square(y);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "{:?}", r.rel_errors);
    }

    #[test]
    fn dropout_behaviour() {
        let mut rng = SeededRng::new(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[100_000]));
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.9, false, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = t.value(y).data();
        let survivors = v.iter().filter(|&&e| e != 0.0).count() as f64 / v.len() as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    }

    #[test]
    fn identity_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(rand(&[1], 30).with_requires_grad(true));
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);
        let m = t.leaf(rand(&[2, 2], 31).with_requires_grad(true));
        assert!(t.backward(m).is_err());
    }
}
