//! Differentiable convolution and transposed convolution.

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn expect_rank4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(Error::Shape(format!("{what} must be rank 4, got {other:?}"))),
    }
}

/// 2-D convolution (cross-correlation), zero padding, square kernel.
///
/// `input: [b, c, h, w]`, `weight: [o, c, k, k]`, optional `bias: [o]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let [b, c, h, w] = expect_rank4(input, "conv2d input")?;
    let [o, wc, kh, kw] = expect_rank4(weight, "conv2d weight")?;
    if wc != c || kh != kw {
        return Err(Error::Shape(format!(
            "conv2d weight {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{o}], got {:?}",
                bias.shape()
            )));
        }
    }
    let geom = ConvGeom::conv(h, w, kh, stride, padding.0, padding.1).ok_or_else(|| {
        Error::Shape(format!(
            "conv2d output would be empty for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding:?}"
        ))
    })?;

    let mut out = vec![T::zero(); b * o * geom.out_h * geom.out_w];
    kernels::conv2d_forward(
        input.data(),
        weight.data(),
        bias.map(|t| t.data()),
        b,
        c,
        o,
        &geom,
        &mut out,
    );

    let x_data = input.data_arc();
    let w_data = weight.data_arc();
    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        parents,
        vec![b, o, geom.out_h, geom.out_w],
        out,
        Box::new(move |grad, needs, parent_grads| {
            if needs[0] {
                kernels::conv2d_backward_input(grad, &w_data, b, c, o, &geom, &mut parent_grads[0]);
            }
            if needs[1] || (has_bias && needs[2]) {
                let (w_buf, rest) = parent_grads[1..].split_first_mut().unwrap();
                let bias_buf = if has_bias && needs[2] {
                    Some(rest[0].as_mut_slice())
                } else {
                    None
                };
                if needs[1] {
                    kernels::conv2d_backward_params(grad, &x_data, b, c, o, &geom, w_buf, bias_buf);
                } else if let Some(bias_buf) = bias_buf {
                    bias_grad_only(grad, b, o, geom.out_h * geom.out_w, bias_buf);
                }
            }
        }),
    ))
}

fn bias_grad_only<T: Scalar>(grad: &[T], batch: usize, out_c: usize, plane: usize, gb: &mut [T]) {
    for bi in 0..batch {
        let g_b = &grad[bi * out_c * plane..(bi + 1) * out_c * plane];
        for (o, chunk) in g_b.chunks(plane).enumerate() {
            let mut acc = T::zero();
            for &g in chunk {
                acc = acc + g;
            }
            gb[o] = gb[o] + acc;
        }
    }
}

/// 2-D transposed convolution with possibly different per-axis padding.
///
/// `input: [b, c, h, w]`, `weight: [c, o, k, k]`, optional `bias: [o]`.
/// Output spatial dims are `(h-1)*stride - 2*pad + k` per axis.
pub fn deconv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let [b, c, h, w] = expect_rank4(input, "deconv2d input")?;
    let [wc, o, kh, kw] = expect_rank4(weight, "deconv2d weight")?;
    if wc != c || kh != kw {
        return Err(Error::Shape(format!(
            "deconv2d weight {:?} incompatible with input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "deconv2d bias must be [{o}], got {:?}",
                bias.shape()
            )));
        }
    }
    let geom = ConvGeom::deconv(h, w, kh, stride, padding.0, padding.1).ok_or_else(|| {
        Error::Shape(format!(
            "deconv2d output would be empty for input {h}x{w}, kernel {kh}, stride {stride}, padding {padding:?}"
        ))
    })?;
    let (oh, ow) = (geom.in_h, geom.in_w);

    let mut out = vec![T::zero(); b * o * oh * ow];
    kernels::deconv2d_forward(
        input.data(),
        weight.data(),
        bias.map(|t| t.data()),
        b,
        c,
        o,
        &geom,
        &mut out,
    );

    let x_data = input.data_arc();
    let w_data = weight.data_arc();
    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        parents,
        vec![b, o, oh, ow],
        out,
        Box::new(move |grad, needs, parent_grads| {
            if needs[0] {
                kernels::deconv2d_backward_input(
                    grad,
                    &w_data,
                    b,
                    c,
                    o,
                    &geom,
                    &mut parent_grads[0],
                );
            }
            if needs[1] {
                kernels::deconv2d_backward_params(
                    grad,
                    &x_data,
                    b,
                    c,
                    o,
                    &geom,
                    &mut parent_grads[1],
                    None,
                );
            }
            if has_bias && needs[2] {
                bias_grad_only(grad, b, o, oh * ow, &mut parent_grads[2]);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn stem_shape_from_config_table() {
        let x = Tensor::<f64>::zeros(&[1, 3, 126, 224]);
        let w = Tensor::<f64>::zeros(&[64, 3, 7, 7]);
        let y = conv2d(&x, &w, None, 2, (3, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 64, 63, 112]);
    }

    #[test]
    fn empty_output_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, (0, 0)).is_err());
    }

    #[test]
    fn conv2d_gradcheck() {
        let x = randn(&[2, 2, 5, 5], 1);
        let w = randn(&[3, 2, 3, 3], 2);
        let bias = randn(&[3], 3);
        let report = finite_diff_check(
            |p| ops::sum_all(&ops::tanh(&conv2d(&p[0], &p[1], Some(&p[2]), 2, (1, 1)).unwrap())),
            &[x, w, bias],
            1e-4,
            1e-3,
        );
        report.assert_passed();
    }

    #[test]
    fn deconv2d_gradcheck() {
        let x = randn(&[2, 3, 3, 4], 4);
        let w = randn(&[3, 2, 4, 4], 5);
        let bias = randn(&[2], 6);
        let report = finite_diff_check(
            |p| {
                ops::sum_all(&ops::tanh(
                    &deconv2d(&p[0], &p[1], Some(&p[2]), 2, (2, 1)).unwrap(),
                ))
            },
            &[x, w, bias],
            1e-4,
            1e-3,
        );
        report.assert_passed();
    }

    #[test]
    fn decoder_final_layer_shape() {
        let x = Tensor::<f64>::zeros(&[1, 8, 64, 112]);
        let w = Tensor::<f64>::zeros(&[8, 2, 4, 4]);
        let y = deconv2d(&x, &w, None, 2, (2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 126, 224]);
    }
}
