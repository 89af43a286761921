//! Differentiable primitive operations.
//!
//! Binary ops accept a right-hand side whose shape right-aligns against the
//! left (missing leading axes and trailing singleton axes broadcast). The
//! left operand never broadcasts.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Elementwise binary operation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Max,
}

/// Dispatching entry point for the elementwise family.
pub fn elementwise<T: Scalar>(op: EwOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match op {
        EwOp::Add => add(a, b),
        EwOp::Sub => sub(a, b),
        EwOp::Mul => mul(a, b),
        EwOp::Max => max(a, b),
    }
}

/// Broadcast plan: for each element of `a` (iterated in row-major order),
/// yields the flat index into `b`.
struct Broadcast {
    a_shape: Vec<usize>,
    /// Stride of each `a` axis inside `b`'s buffer; 0 where `b` broadcasts.
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn plan(a_shape: &[usize], b_shape: &[usize]) -> Result<Broadcast> {
        if b_shape.len() > a_shape.len() {
            return Err(Error::Shape(format!(
                "cannot broadcast rhs {b_shape:?} against lhs {a_shape:?}"
            )));
        }
        let offset = a_shape.len() - b_shape.len();
        let mut b_strides = vec![0usize; a_shape.len()];
        let mut stride = 1usize;
        for i in (0..b_shape.len()).rev() {
            let (ad, bd) = (a_shape[offset + i], b_shape[i]);
            if bd == ad {
                b_strides[offset + i] = stride;
            } else if bd == 1 {
                b_strides[offset + i] = 0;
            } else {
                return Err(Error::Shape(format!(
                    "cannot broadcast rhs {b_shape:?} against lhs {a_shape:?} (axis {i})"
                )));
            }
            stride *= bd;
        }
        Ok(Broadcast {
            a_shape: a_shape.to_vec(),
            b_strides,
        })
    }

    fn is_identity(&self) -> bool {
        // True when b has exactly a's shape (every axis keeps its stride).
        let mut stride = 1usize;
        for i in (0..self.a_shape.len()).rev() {
            if self.b_strides[i] != stride {
                return false;
            }
            stride *= self.a_shape[i];
        }
        true
    }

    /// Visits `(a_flat, b_flat)` pairs in ascending `a_flat` order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let rank = self.a_shape.len();
        let numel: usize = self.a_shape.iter().product();
        let mut idx = vec![0usize; rank];
        let mut b_flat = 0usize;
        for a_flat in 0..numel {
            f(a_flat, b_flat);
            // Odometer increment, updating b_flat incrementally.
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                b_flat += self.b_strides[axis];
                if idx[axis] < self.a_shape[axis] {
                    break;
                }
                b_flat -= self.b_strides[axis] * self.a_shape[axis];
                idx[axis] = 0;
            }
        }
    }
}

/// Sums a gradient over `a`'s shape down into `b`'s buffer, in ascending
/// row-major order of `a`.
fn reduce_to_rhs<T: Scalar>(plan: &Broadcast, grad_a: &[T], out_b: &mut [T]) {
    plan.for_each(|a_flat, b_flat| {
        out_b[b_flat] = out_b[b_flat] + grad_a[a_flat];
    });
}

fn binary_op<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    forward: impl Fn(T, T) -> T,
    backward: super::BackwardFn<T>,
) -> Result<Tensor<T>> {
    let plan = Broadcast::plan(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); a.numel()];
    if plan.is_identity() {
        for i in 0..out.len() {
            out[i] = forward(ad[i], bd[i]);
        }
    } else {
        plan.for_each(|ai, bi| out[ai] = forward(ad[ai], bd[bi]));
    }
    Ok(Tensor::from_op(
        vec![a.clone(), b.clone()],
        a.shape().to_vec(),
        out,
        backward,
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = Broadcast::plan(a.shape(), b.shape())?;
    binary_op(a, b, |x, y| x + y, Box::new(move |grad, needs, parents| {
        if needs[0] {
            for (dst, &g) in parents[0].iter_mut().zip(grad) {
                *dst = *dst + g;
            }
        }
        if needs[1] {
            reduce_to_rhs(&plan, grad, &mut parents[1]);
        }
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = Broadcast::plan(a.shape(), b.shape())?;
    binary_op(a, b, |x, y| x - y, Box::new(move |grad, needs, parents| {
        if needs[0] {
            for (dst, &g) in parents[0].iter_mut().zip(grad) {
                *dst = *dst + g;
            }
        }
        if needs[1] {
            let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
            reduce_to_rhs(&plan, &neg, &mut parents[1]);
        }
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = Broadcast::plan(a.shape(), b.shape())?;
    let a_data = a.data_arc();
    let b_data = b.data_arc();
    binary_op(a, b, |x, y| x * y, Box::new(move |grad, needs, parents| {
        if needs[0] {
            let da = &mut parents[0];
            plan.for_each(|ai, bi| da[ai] = da[ai] + grad[ai] * b_data[bi]);
        }
        if needs[1] {
            let db = &mut parents[1];
            plan.for_each(|ai, bi| db[bi] = db[bi] + grad[ai] * a_data[ai]);
        }
    }))
}

/// Elementwise maximum. Ties route the gradient to the left operand.
pub fn max<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = Broadcast::plan(a.shape(), b.shape())?;
    let a_data = a.data_arc();
    let b_data = b.data_arc();
    binary_op(
        a,
        b,
        |x, y| if x >= y { x } else { y },
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0];
                plan.for_each(|ai, bi| {
                    if a_data[ai] >= b_data[bi] {
                        da[ai] = da[ai] + grad[ai];
                    }
                });
            }
            if needs[1] {
                let db = &mut parents[1];
                plan.for_each(|ai, bi| {
                    if a_data[ai] < b_data[bi] {
                        db[bi] = db[bi] + grad[ai];
                    }
                });
            }
        }),
    )
}

/// Multiplies by a compile-time constant (not differentiated through).
pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    let out = a.data().iter().map(|&x| x * factor).collect();
    Tensor::from_op(
        vec![a.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                for (dst, &g) in parents[0].iter_mut().zip(grad) {
                    *dst = *dst + g * factor;
                }
            }
        }),
    )
}

pub fn neg<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    scale(a, -T::one())
}

/// 2-D matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul requires rank-2 tensors, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    crate::nn::kernels::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
    let a_data = a.data_arc();
    let b_data = b.data_arc();
    Ok(Tensor::from_op(
        vec![a.clone(), b.clone()],
        vec![m, n],
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                // dA = G . B^T
                crate::nn::kernels::matmul_nt(grad, &b_data, &mut parents[0], m, n, k);
            }
            if needs[1] {
                // dB = A^T . G
                crate::nn::kernels::matmul_tn(&a_data, grad, &mut parents[1], k, m, n);
            }
        }),
    ))
}

/// Materialized 2-D transpose.
pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::Shape(format!(
            "transpose2d requires rank 2, got {:?}",
            a.shape()
        )));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_op(
        vec![a.clone()],
        vec![c, r],
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = da[i * c + j] + grad[j * r + i];
                    }
                }
            }
        }),
    ))
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let out = a
        .data()
        .iter()
        .map(|&x| if x > T::zero() { x } else { T::zero() })
        .collect();
    let a_data = a.data_arc();
    Tensor::from_op(
        vec![a.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0];
                for i in 0..grad.len() {
                    if a_data[i] > T::zero() {
                        da[i] = da[i] + grad[i];
                    }
                }
            }
        }),
    )
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let out: Vec<T> = a.data().iter().map(|&x| one / (one + (-x).exp())).collect();
    let y = std::sync::Arc::new(out.clone());
    Tensor::from_op(
        vec![a.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0];
                for i in 0..grad.len() {
                    da[i] = da[i] + grad[i] * y[i] * (T::one() - y[i]);
                }
            }
        }),
    )
}

pub fn tanh<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = a.data().iter().map(|&x| x.tanh()).collect();
    let y = std::sync::Arc::new(out.clone());
    Tensor::from_op(
        vec![a.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0];
                for i in 0..grad.len() {
                    da[i] = da[i] + grad[i] * (T::one() - y[i] * y[i]);
                }
            }
        }),
    )
}

/// Full reduction to a 1-element tensor, summed in ascending index order.
pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &x in a.data() {
        acc = acc + x;
    }
    Tensor::from_op(
        vec![a.clone()],
        vec![1],
        vec![acc],
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let g = grad[0];
                for dst in parents[0].iter_mut() {
                    *dst = *dst + g;
                }
            }
        }),
    )
}

pub fn mean_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = T::of_f64(a.numel() as f64);
    scale(&sum_all(a), T::one() / n)
}

/// Contiguous slice along axis 0.
pub fn narrow0<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let d0 = *a
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("narrow0 on rank-0 tensor".into()))?;
    if start + len > d0 || len == 0 {
        return Err(Error::Shape(format!(
            "narrow0 range {start}..{} out of bounds for axis of size {d0}",
            start + len
        )));
    }
    let row: usize = a.shape()[1..].iter().product();
    let mut shape = a.shape().to_vec();
    shape[0] = len;
    let out = a.data()[start * row..(start + len) * row].to_vec();
    Ok(Tensor::from_op(
        vec![a.clone()],
        shape,
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0][start * row..(start + len) * row];
                for (dst, &g) in da.iter_mut().zip(grad) {
                    *dst = *dst + g;
                }
            }
        }),
    ))
}

/// Column range of a rank-2 tensor.
pub fn slice_cols<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::Shape(format!(
            "slice_cols requires rank 2, got {:?}",
            a.shape()
        )));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    if start + len > c || len == 0 {
        return Err(Error::Shape(format!(
            "slice_cols range {start}..{} out of bounds for {c} columns",
            start + len
        )));
    }
    let src = a.data();
    let mut out = vec![T::zero(); r * len];
    for i in 0..r {
        out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
    }
    Ok(Tensor::from_op(
        vec![a.clone()],
        vec![r, len],
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let da = &mut parents[0];
                for i in 0..r {
                    for j in 0..len {
                        let t = i * c + start + j;
                        da[t] = da[t] + grad[i * len + j];
                    }
                }
            }
        }),
    ))
}

/// Concatenation along axis 0. All inputs must agree on trailing dims.
pub fn concat0<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat0 of zero tensors".into()))?;
    let trailing = &first.shape()[1..];
    let row: usize = trailing.iter().product();
    let mut d0 = 0usize;
    for p in parts {
        if &p.shape()[1..] != trailing {
            return Err(Error::Shape(format!(
                "concat0 trailing dims disagree: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        d0 += p.shape()[0];
    }
    let mut shape = first.shape().to_vec();
    shape[0] = d0;
    let mut out = Vec::with_capacity(d0 * row);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[0] * row).collect();
    Ok(Tensor::from_op(
        parts.to_vec(),
        shape,
        out,
        Box::new(move |grad, needs, parents| {
            let mut offset = 0usize;
            for (i, &len) in lens.iter().enumerate() {
                if needs[i] {
                    for (dst, &g) in parents[i].iter_mut().zip(&grad[offset..offset + len]) {
                        *dst = *dst + g;
                    }
                }
                offset += len;
            }
        }),
    ))
}

/// Extracts one element as a scalar tensor.
pub fn gather_scalar<T: Scalar>(a: &Tensor<T>, flat_index: usize) -> Result<Tensor<T>> {
    if flat_index >= a.numel() {
        return Err(Error::InvalidArgument(format!(
            "gather_scalar index {flat_index} out of bounds for {} elements",
            a.numel()
        )));
    }
    let value = a.data()[flat_index];
    Ok(Tensor::from_op(
        vec![a.clone()],
        vec![1],
        vec![value],
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                parents[0][flat_index] = parents[0][flat_index] + grad[0];
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_mul_values() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        let c = Tensor::from_vec(&[2], vec![2.0f64, 3.0]).unwrap();
        let d = Tensor::from_vec(&[2], vec![0.0f64, 5.0]).unwrap();
        assert_eq!(mul(&c, &d).unwrap().data(), &[0.0, 15.0]);
    }

    #[test]
    fn elementwise_dispatch() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 5.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(elementwise(EwOp::Max, &a, &b).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(elementwise(EwOp::Sub, &a, &b).unwrap().data(), &[-2.0, 1.0]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn trailing_singleton_broadcast() {
        // [2,3] + [2,1]
        let a = Tensor::from_vec(&[2, 3], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![10.0f64, 20.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), &[10.0, 11.0, 12.0, 23.0, 24.0, 25.0]);
    }

    #[test]
    fn suffix_broadcast_for_bias() {
        // [2,3] + [3]
        let a = Tensor::from_vec(&[2, 3], vec![0.0f64; 6]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn broadcast_backward_reduces() {
        let a = Tensor::from_vec(&[2, 3], vec![0.0f64; 6]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0])
            .unwrap()
            .requires_grad();
        let loss = sum_all(&add(&a, &b).unwrap());
        super::super::backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_values() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());

        let a = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);

        let bad = Tensor::from_vec(&[3, 1], vec![0.0f64; 3]).unwrap();
        assert!(matmul(&a, &bad).is_err());
    }

    #[test]
    fn narrow_and_slice_and_concat() {
        let t = Tensor::from_vec(&[3, 2], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mid = narrow0(&t, 1, 1).unwrap();
        assert_eq!(mid.data(), &[2.0, 3.0]);
        let cols = slice_cols(&t, 1, 1).unwrap();
        assert_eq!(cols.data(), &[1.0, 3.0, 5.0]);
        let back = concat0(&[narrow0(&t, 0, 1).unwrap(), narrow0(&t, 1, 2).unwrap()]).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn max_tie_routes_left() {
        let a = Tensor::from_vec(&[1], vec![2.0f64]).unwrap().requires_grad();
        let b = Tensor::from_vec(&[1], vec![2.0f64]).unwrap().requires_grad();
        let loss = sum_all(&max(&a, &b).unwrap());
        super::super::backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0]);
    }
}
