//! Max pooling.

use super::kernels::ConvGeom;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2-D max pooling. Padded cells are ignored (never win the max), and ties
/// route the gradient to the lowest flat input index.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match input.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(Error::Shape(format!(
                "maxpool2d input must be rank 4, got {other:?}"
            )))
        }
    };
    let geom = ConvGeom::conv(h, w, kernel, stride, padding, padding).ok_or_else(|| {
        Error::Shape(format!(
            "maxpool2d output would be empty for input {h}x{w}, kernel {kernel}"
        ))
    })?;
    let (oh, ow) = (geom.out_h, geom.out_w);
    let src = input.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let base = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let flat = iy as usize * w + ix as usize;
                            let v = plane[flat];
                            match best {
                                Some((bv, _)) if v <= bv => {}
                                _ => best = Some((v, flat)),
                            }
                        }
                    }
                    let (v, flat) = best.expect("pool window never fully out of range");
                    let oflat = ((bi * c + ci) * oh + oy) * ow + ox;
                    out[oflat] = v;
                    argmax[oflat] = base + flat;
                }
            }
        }
    }

    Ok(Tensor::from_op(
        vec![input.clone()],
        vec![b, c, oh, ow],
        out,
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let dx = &mut parents[0];
                for (i, &g) in grad.iter().enumerate() {
                    dx[argmax[i]] = dx[argmax[i]] + g;
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, finite_diff_check, ops, Tensor};

    #[test]
    fn stem_pool_shape() {
        let x = Tensor::<f64>::zeros(&[1, 1, 63, 112]);
        let y = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 32, 56]);
    }

    #[test]
    fn values_and_argmax_routing() {
        // 4x4 ascending values, pool 2/2/0: maxima at each window's corner.
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect())
            .unwrap()
            .requires_grad();
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let loss = ops::sum_all(&y);
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        let mut expected = vec![0.0; 16];
        for i in [5, 7, 13, 15] {
            expected[i] = 1.0;
        }
        assert_eq!(g, expected);
    }

    #[test]
    fn tie_routes_to_lowest_index() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![2.0f64, 2.0, 2.0, 2.0])
            .unwrap()
            .requires_grad();
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        backward(&ops::sum_all(&y)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradcheck_distinct_values() {
        let data: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let x = Tensor::from_vec(&[1, 1, 5, 5], data).unwrap();
        let report = finite_diff_check(
            |p| ops::sum_all(&ops::tanh(&maxpool2d(&p[0], 3, 2, 1).unwrap())),
            &[x],
            1e-5,
            1e-3,
        );
        report.assert_passed();
    }
}
