//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array handle. Operations on
//! tensors that require gradients record the computation as a DAG; calling
//! [`backward`] on a scalar result walks that DAG in reverse topological
//! order and accumulates gradients into every reachable leaf.
//!
//! Determinism contract: every operation computes its result in a fixed
//! element order (reductions in ascending row-major index), so identical
//! inputs produce bit-identical outputs regardless of thread count.

mod backward;
mod gradcheck;
pub mod ops;

pub use backward::{backward, backward_retain, GradMap};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckEntry, GradCheckReport};
pub use ops::EwOp;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element trait implemented for `f32` and `f64`.
///
/// Random draws and byte-level serialization go through this trait so that
/// every consumer is generic over precision. Initializers sample in `f64`
/// and convert, which keeps the random stream identical across dtypes.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor node inside an autograd graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Backward rule of a recorded operation.
///
/// Arguments: gradient of the output (same length as the output data),
/// `needs[i]` telling whether parent `i` wants a gradient, and one
/// pre-zeroed buffer per parent to accumulate input gradients into.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool], &mut [Vec<T>]) + Send + Sync>;

pub(crate) struct Node<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

struct TensorInner<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    /// Gradient accumulator, populated on leaves by `backward`.
    grad: RwLock<Option<Vec<T>>>,
    /// Recorded operation that produced this tensor; `None` for leaves.
    node: Option<Node<T>>,
}

/// Immutable dense tensor handle. Cloning is cheap (shared storage).
pub struct Tensor<T: Scalar> {
    inner: Arc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={:?}, shape={:?}, dtype={}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            T::DTYPE,
            self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    /// Creates a leaf tensor from a shape and row-major values.
    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "all dimensions must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements but {} values were given",
                values.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), values, false))
    }

    /// Creates a leaf tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![T::zero(); numel], false)
    }

    /// Creates a leaf tensor filled with a constant.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    /// Creates a 1-element tensor.
    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId::fresh(),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: RwLock::new(None),
                node: None,
            }),
        }
    }

    /// Creates an op-output tensor recording its parents and backward rule.
    ///
    /// The output participates in autograd iff any parent requires a
    /// gradient; otherwise the node is dropped and the result is a constant.
    pub(crate) fn from_op(
        parents: Vec<Tensor<T>>,
        shape: Vec<usize>,
        data: Vec<T>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId::fresh(),
                shape,
                data: Arc::new(data),
                requires_grad: track,
                grad: RwLock::new(None),
                node: if track {
                    Some(Node { parents, backward })
                } else {
                    None
                },
            }),
        }
    }

    /// Same data, same storage, new shape. Both tensors stay valid.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape(),
                self.numel()
            )));
        }
        let parent = self.clone();
        let track = self.inner.requires_grad;
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId::fresh(),
                shape: shape.to_vec(),
                data: Arc::clone(&self.inner.data),
                requires_grad: track,
                grad: RwLock::new(None),
                node: if track {
                    Some(Node {
                        parents: vec![parent],
                        backward: Box::new(|grad_out, needs, parent_grads| {
                            if needs[0] {
                                for (dst, &g) in parent_grads[0].iter_mut().zip(grad_out) {
                                    *dst = *dst + g;
                                }
                            }
                        }),
                    })
                } else {
                    None
                },
            }),
        })
    }

    /// Returns a gradient-free view of the same data.
    pub fn detach(&self) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId::fresh(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                grad: RwLock::new(None),
                node: None,
            }),
        }
    }

    /// Marks a leaf as trainable. Only valid on leaves.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.inner.node.is_none(),
            "requires_grad() is only valid on leaf tensors"
        );
        Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId::fresh(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: true,
                grad: RwLock::new(None),
                node: None,
            }),
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    /// Multi-index accessor (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.inner.data[flat]
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a 1-element tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated leaf gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().unwrap().clone()
    }

    /// Clears the accumulated leaf gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    pub(crate) fn accumulate_leaf_grad(&self, contribution: &[T]) {
        let mut slot = self.inner.grad.write().unwrap();
        match slot.as_mut() {
            Some(existing) => {
                for (dst, &g) in existing.iter_mut().zip(contribution) {
                    *dst = *dst + g;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Converts elements to another scalar type (drops the graph).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .iter()
            .map(|&v| U::of_f64(v.as_f64()))
            .collect();
        Tensor::leaf(self.inner.shape.clone(), data, false)
    }
}

/// Creates a tensor per the public construction contract.
pub fn tensor_create<T: Scalar>(shape: &[usize], values: Vec<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let t = tensor_create(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[0, 0]), 1.0);
        assert_eq!(t.at(&[0, 1]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 1]), 4.0);
    }

    #[test]
    fn scalar_like_tensor() {
        let t = tensor_create(&[1], vec![0.0f32]).unwrap();
        assert_eq!(t.item(), 0.0);
        assert_eq!(t.shape(), &[1]);
    }

    #[test]
    fn count_mismatch_rejected() {
        let err = tensor_create(&[2], vec![1.0f64, 2.0, 3.0]);
        assert!(err.is_err());
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(tensor_create::<f64>(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_shares_data() {
        let t = tensor_create(&[2, 3], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.at(&[2, 1]), 5.0);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn cast_preserves_values() {
        let t = tensor_create(&[3], vec![1.5f32, -2.0, 0.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5f64, -2.0, 0.25]);
    }
}
