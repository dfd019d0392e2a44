//! Dense 64-bit tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is plain owned data (row-major, no aliasing) and is `Send`.
//! Differentiation happens on a [`Tape`], which owns copies of the values
//! it records; parameters are copied onto a fresh tape every step and their
//! gradients written back afterwards.

pub mod kernels;
pub mod gradcheck;
mod tape;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub use tape::{ElementwiseOp, ReduceOp, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("shape dimensions must be >= 1, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_fn(shape, |_| value)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(shape, |_| rng.normal(0.0, std))
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(shape, |_| rng.uniform_range(lo, hi))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let st = kernels::strides(&self.shape);
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", &self.shape, new_shape));
        }
        Tensor::new(new_shape.to_vec(), self.data.clone())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        check_permutation(perm, self.rank())?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        Tensor::new(out_shape, kernels::permute(&self.data, &self.shape, perm))
    }

    pub fn permute_reshape(&self, perm: &[usize], new_shape: &[usize]) -> Result<Tensor> {
        self.permute(perm)?.reshape(new_shape)
    }

    /// Matrix product over the last two axes; leading axes are batch axes
    /// and may be broadcast when one operand's leading axes are a suffix of
    /// the other's.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = tape::MatmulPlan::new(&self.shape, &other.shape, false, false)?;
        Tensor::new(plan.out_shape.clone(), plan.forward(&self.data, &other.data))
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let plan = tape::MatmulPlan::new(&self.shape, &other.shape, false, true)?;
        Tensor::new(plan.out_shape.clone(), plan.forward(&self.data, &other.data))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank must be >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let cols = *self.shape.last().expect("rank >= 1");
        Tensor::new(
            self.shape.clone(),
            kernels::softmax_rows(&self.data, cols, None)?,
        )
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.len() as f64
    }

    pub fn min_all(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_all(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `Σ_j |x_ij|` over the last axis.
    pub fn row_abs_sum(&self) -> Vec<f64> {
        let cols = *self.shape.last().expect("rank >= 1");
        self.data
            .chunks(cols)
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Slice along the first axis.
    pub fn index_first(&self, i: usize) -> Result<Tensor> {
        if i >= self.shape[0] {
            return Err(Error::invalid(
                "index_first",
                format!("index {i} out of range for {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor::new(shape, self.data[i * inner..(i + 1) * inner].to_vec())
    }
}

pub(crate) fn check_permutation(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::invalid(
            "permute",
            format!("permutation {perm:?} does not match rank {rank}"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(
                "param_set",
                format!("duplicate parameter name {name}"),
            ));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_id(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Place every parameter on `tape` as a differentiable leaf. The returned
    /// vars are indexed by parameter id.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect()
    }

    /// Copy gradients for `vars` (from [`ParamSet::attach`]) back onto the
    /// parameters. Parameters unreachable from the loss get zero gradients.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            p.tensor.set_grad(g).expect("grad length matches");
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Tensor::identity(2);
        assert_eq!(a.matmul(&i).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(e.matmul(&z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_vs_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -2.0, 2.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_matmul_broadcasts_suffix() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::rand_uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 5, 2], -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4, 2]);
        for bi in 0..2 {
            for h in 0..3 {
                for i in 0..4 {
                    for j in 0..2 {
                        let s: f64 = (0..5).map(|p| a.at(&[bi, h, i, p]) * b.at(&[h, p, j])).sum();
                        assert!((c.at(&[bi, h, i, j]) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn reductions() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(a.row_abs_sum(), vec![3.0, 3.0]);
        let b = Tensor::from_rows(&[vec![2.0, 5.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(b.min_all(), -1.0);
        assert_eq!(b.max_all(), 5.0);
    }

    #[test]
    fn softmax_examples() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(a.softmax_rows().unwrap().data(), &[0.5, 0.5]);
        let b = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = b.softmax_rows().unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        let nan = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(nan.softmax_rows().is_err());
    }

    #[test]
    fn param_names_unique() {
        let mut ps = ParamSet::new();
        ps.insert("layer0.head1.mask", Tensor::zeros(&[2, 2])).unwrap();
        assert!(ps.insert("layer0.head1.mask", Tensor::zeros(&[1])).is_err());
        assert!(ps.get("layer0.head1.mask").unwrap().tensor.requires_grad());
    }
}
