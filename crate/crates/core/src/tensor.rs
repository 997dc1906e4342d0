//! Dense row-major tensors and named parameter collections.
//!
//! Values default to `f64`; `f32` is available for callers that trade
//! precision for speed. Gradient storage lives next to the values and is
//! only ever touched for tensors flagged `requires_grad`.

use std::collections::HashMap;
use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable by the tensor engine.
pub trait Real: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

/// Below these sizes packing costs more than it saves, so `gemm` falls back
/// to direct loops.
const SMALL_ROWS: usize = 4;
const SMALL_VOLUME: usize = 4096;

/// Dot product with independent partial sums so the loop vectorizes.
#[inline(always)]
fn dot<T: Float>(u: &[T], v: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (uc, vc) = (u.chunks_exact(8), v.chunks_exact(8));
    let (ur, vr) = (uc.remainder(), vc.remainder());
    for (a, b) in uc.zip(vc) {
        for ((s, &x), &y) in acc.iter_mut().zip(a).zip(b) {
            *s = *s + x * y;
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in ur.iter().zip(vr) {
        tail = tail + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn small_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    let at = |i: usize, p: usize| a[(i as isize * rsa + p as isize * csa) as usize];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == T::zero() {
            row.iter_mut().for_each(|x| *x = T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|x| *x = *x * beta);
        }
        if k == 0 {
            continue;
        }
        if csb == 1 {
            // Rows of b are contiguous: accumulate scaled rows.
            for p in 0..k {
                let s = alpha * at(i, p);
                let off = (p as isize * rsb) as usize;
                for (x, &y) in row.iter_mut().zip(&b[off..off + n]) {
                    *x = *x + s * y;
                }
            }
        } else if rsb == 1 && csa == 1 {
            // Columns of b are contiguous: dot products.
            let off_a = (i as isize * rsa) as usize;
            let ar = &a[off_a..off_a + k];
            for (j, x) in row.iter_mut().enumerate() {
                let off = (j as isize * csb) as usize;
                *x = *x + alpha * dot(ar, &b[off..off + k]);
            }
        } else {
            for (j, x) in row.iter_mut().enumerate() {
                let mut dot = T::zero();
                for p in 0..k {
                    dot = dot + at(i, p) * b[(p as isize * rsb + j as isize * csb) as usize];
                }
                *x = *x + alpha * dot;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm_avx2<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    beta: T,
    c: &mut [T],
) {
    small_gemm(m, k, n, alpha, a, sa, b, sb, beta, c)
}

#[allow(clippy::too_many_arguments)]
fn small_gemm_dispatch<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    beta: T,
    c: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        unsafe { small_gemm_avx2(m, k, n, alpha, a, sa, b, sb, beta, c) };
        return;
    }
    small_gemm(m, k, n, alpha, a, sa, b, sb, beta, c)
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n, "gemm output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rs: isize, cs: isize, rows: usize, cols: usize| {
                    (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs)
                        as usize
                };
                if k > 0 {
                    assert!(a.len() > last(rsa, csa, m, k), "gemm lhs out of bounds");
                    assert!(b.len() > last(rsb, csb, k, n), "gemm rhs out of bounds");
                }
                if m <= SMALL_ROWS || m * k * n <= SMALL_VOLUME {
                    small_gemm_dispatch(m, k, n, alpha, a, (rsa, csa), b, (rsb, csb), beta, c);
                    return;
                }
                // SAFETY: every element addressed through the strides was bounds
                // checked above and `c` is a dense m×n row-major buffer.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm);
impl_real!(f32, matrixmultiply::sgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![T::zero(); n]).expect("zeros: invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(Vec::new(), vec![value]).unwrap()
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor::new(shape, data).expect("from_fn: invalid shape")
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Resets the accumulated gradient to zeros. No-op on frozen tensors.
    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
    }

    /// Adds `delta` into the stored gradient.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::contract("cannot accumulate gradient into a frozen tensor"));
        }
        if delta.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::lit(x.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Ordered, uniquely named collection of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Ids of every tensor flagged `requires_grad`, in insertion order.
    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.tensors.len())
            .filter(|&i| self.tensors[i].requires_grad())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new([2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::<f64>::new([0, 3], vec![]).is_err());
    }

    #[test]
    fn frozen_tensor_never_accumulates() {
        let mut t = Tensor::<f64>::zeros([2]);
        assert!(t.accumulate_grad(&[1.0, 2.0]).is_err());
        assert!(t.grad().is_none());
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn accumulation_is_additive_until_zeroed() {
        let mut t = Tensor::<f64>::zeros([2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn param_set_rejects_duplicates() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::zeros([1])).unwrap();
        assert!(ps.insert("w", Tensor::zeros([1])).is_err());
        assert_eq!(ps.id("w"), Some(0));
    }
}
