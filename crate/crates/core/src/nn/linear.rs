//! Fully connected layer.

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Affine map `y = x . W^T + b` with `x: [b, f]`, `weight: [f', f]`,
/// optional `bias: [f']`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [b, f] = match input.shape() {
        [a, b] => [*a, *b],
        other => {
            return Err(Error::Shape(format!(
                "linear input must be rank 2, got {other:?}"
            )))
        }
    };
    let [fo, fi] = match weight.shape() {
        [a, b] => [*a, *b],
        other => {
            return Err(Error::Shape(format!(
                "linear weight must be rank 2, got {other:?}"
            )))
        }
    };
    if fi != f {
        return Err(Error::Shape(format!(
            "linear weight {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [fo] {
            return Err(Error::Shape(format!(
                "linear bias must be [{fo}], got {:?}",
                bias.shape()
            )));
        }
    }

    let mut out = vec![T::zero(); b * fo];
    kernels::matmul_nt(input.data(), weight.data(), &mut out, b, f, fo);
    if let Some(bias) = bias {
        let bd = bias.data();
        for row in out.chunks_mut(fo) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v = *v + bv;
            }
        }
    }

    let x_data = input.data_arc();
    let w_data = weight.data_arc();
    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        parents,
        vec![b, fo],
        out,
        Box::new(move |grad, needs, parent_grads| {
            if needs[0] {
                // dX = G . W
                kernels::matmul_nn(grad, &w_data, &mut parent_grads[0], b, fo, f);
            }
            if needs[1] {
                // dW = G^T . X
                kernels::matmul_tn(grad, &x_data, &mut parent_grads[1], fo, b, f);
            }
            if has_bias && needs[2] {
                let db = &mut parent_grads[2];
                for row in grad.chunks(fo) {
                    for (dst, &g) in db.iter_mut().zip(row) {
                        *dst = *dst + g;
                    }
                }
            }
        }),
    ))
}
