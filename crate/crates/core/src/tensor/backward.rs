//! Reverse-mode gradient propagation over the recorded tensor DAG.

use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor, TensorId};
use crate::error::{Error, Result};

/// Gradients retained for explicitly requested tensors.
pub struct GradMap<T: Scalar> {
    grads: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }
}

/// Propagates gradients from a scalar loss to every reachable
/// gradient-requiring leaf, accumulating into each leaf's `grad` slot.
///
/// Repeated calls without `zero_grad` keep accumulating, so running
/// backward twice doubles every leaf gradient.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    run_backward(loss, &[]).map(|_| ())
}

/// Like [`backward`], additionally returning the gradients of the listed
/// tensors (which may be interior nodes of the graph).
pub fn backward_retain<T: Scalar>(loss: &Tensor<T>, retain: &[&Tensor<T>]) -> Result<GradMap<T>> {
    run_backward(loss, retain)
}

fn run_backward<T: Scalar>(loss: &Tensor<T>, retain: &[&Tensor<T>]) -> Result<GradMap<T>> {
    if loss.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let retain_ids: HashSet<TensorId> = retain.iter().map(|t| t.id()).collect();

    // Post-order DFS over gradient-requiring tensors. Parent visit order is
    // the recorded order, so the traversal (and with it every gradient
    // accumulation sequence) is identical across runs.
    let order = topological_order(loss);

    let mut grads: HashMap<TensorId, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::one()]);
    let mut retained: HashMap<TensorId, Vec<T>> = HashMap::new();

    for tensor in order.iter().rev() {
        let grad_out = match grads.remove(&tensor.id()) {
            Some(g) => g,
            None => continue, // not actually on a path to the loss
        };
        if retain_ids.contains(&tensor.id()) {
            retained.insert(tensor.id(), grad_out.clone());
        }
        match tensor.node() {
            Some(node) => {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| p.is_requires_grad())
                    .collect();
                let mut parent_bufs: Vec<Vec<T>> = node
                    .parents
                    .iter()
                    .zip(&needs)
                    .map(|(p, &n)| if n { vec![T::zero(); p.numel()] } else { Vec::new() })
                    .collect();
                (node.backward)(&grad_out, &needs, &mut parent_bufs);
                for ((parent, buf), &need) in node.parents.iter().zip(parent_bufs).zip(&needs) {
                    if !need {
                        continue;
                    }
                    match grads.get_mut(&parent.id()) {
                        Some(existing) => {
                            for (dst, g) in existing.iter_mut().zip(buf) {
                                *dst = *dst + g;
                            }
                        }
                        None => {
                            grads.insert(parent.id(), buf);
                        }
                    }
                }
            }
            None => {
                // Gradient-requiring leaf: accumulate into its grad slot.
                tensor.accumulate_leaf_grad(&grad_out);
            }
        }
    }

    Ok(GradMap { grads: retained })
}

fn topological_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<TensorId> = HashSet::new();
    // Each stack frame is (tensor, next child index to expand).
    let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();
    if root.is_requires_grad() {
        visited.insert(root.id());
        stack.push((root.clone(), 0));
    }
    while let Some((tensor, child_idx)) = stack.pop() {
        let child = tensor.node().and_then(|n| {
            n.parents
                .iter()
                .skip(child_idx)
                .enumerate()
                .find(|(_, p)| p.is_requires_grad() && !visited.contains(&p.id()))
                .map(|(offset, p)| (child_idx + offset + 1, p.clone()))
        });
        match child {
            Some((next_idx, child_tensor)) => {
                visited.insert(child_tensor.id());
                stack.push((tensor, next_idx));
                stack.push((child_tensor, 0));
            }
            None => order.push(tensor),
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use crate::tensor::ops;
    use crate::tensor::{backward, backward_retain, Tensor};

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0])
            .unwrap()
            .requires_grad();
        let loss = ops::sum_all(&x);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(x * x) at x = [1, 2] -> grad = [2, 4]
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .requires_grad();
        let loss = ops::sum_all(&ops::mul(&x, &x).unwrap());
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .requires_grad();
        let build = || ops::sum_all(&ops::mul(&x, &x).unwrap());
        backward(&build()).unwrap();
        backward(&build()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x + x, loss = sum(y * y) = sum(4 x^2) -> d/dx = 8x
        let x = Tensor::from_vec(&[2], vec![1.0f64, -3.0])
            .unwrap()
            .requires_grad();
        let y = ops::add(&x, &x).unwrap();
        let loss = ops::sum_all(&ops::mul(&y, &y).unwrap());
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0, -24.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .requires_grad();
        let y = ops::add(&x, &x).unwrap();
        assert!(backward(&y).is_err());
    }

    #[test]
    fn retain_interior_gradient() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .requires_grad();
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&y);
        let map = backward_retain(&loss, &[&y]).unwrap();
        assert_eq!(map.get(&y).unwrap(), &[1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn detached_branch_gets_no_grad() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0])
            .unwrap()
            .requires_grad();
        let d = x.detach();
        let loss = ops::sum_all(&ops::mul(&x, &d).unwrap());
        backward(&loss).unwrap();
        // d treated as a constant: d(x*const)/dx = const
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }
}
