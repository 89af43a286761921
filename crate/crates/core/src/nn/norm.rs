//! Batch normalization over channel axes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// New running statistics produced by a train-mode forward pass. The caller
/// decides when (and whether) to commit them, which keeps the forward pass
/// itself pure.
#[derive(Clone, Debug)]
pub struct BnStatsUpdate<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Batch normalization of a `[b, c, h, w]` tensor, statistics per channel
/// over the `b*h*w` remaining elements.
///
/// Train mode normalizes with biased batch variance and returns running
/// statistics updated as `(1-momentum)*old + momentum*new`, with the
/// unbiased variance entering the running estimate. Eval mode normalizes
/// with the provided running statistics.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    momentum: f64,
    eps: f64,
    mode: BnMode,
) -> Result<(Tensor<T>, Option<BnStatsUpdate<T>>)> {
    let [b, c, h, w] = match input.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(Error::Shape(format!(
                "batchnorm2d input must be rank 4, got {other:?}"
            )))
        }
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm2d gamma/beta must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm2d running stats must have {c} channels"
        )));
    }
    let n = b * h * w;
    let plane = h * w;
    let src = input.data();
    let g = gamma.data();
    let bt = beta.data();
    let eps_t = T::of_f64(eps);

    match mode {
        BnMode::Train => {
            if n == 1 {
                return Err(Error::InvalidArgument(
                    "batchnorm2d train mode needs more than one element per channel".into(),
                ));
            }
            // Two-pass statistics in ascending (b, h, w) order per channel.
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut acc = T::zero();
                for bi in 0..b {
                    let sl = &src[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    for &v in sl {
                        acc = acc + v;
                    }
                }
                let m = acc / T::of_f64(n as f64);
                let mut vacc = T::zero();
                for bi in 0..b {
                    let sl = &src[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    for &v in sl {
                        let d = v - m;
                        vacc = vacc + d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = vacc / T::of_f64(n as f64);
            }

            let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            let mut xhat = vec![T::zero(); src.len()];
            let mut out = vec![T::zero(); src.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        let xh = (src[base + i] - mean[ci]) * invstd[ci];
                        xhat[base + i] = xh;
                        out[base + i] = g[ci] * xh + bt[ci];
                    }
                }
            }

            let mom = T::of_f64(momentum);
            let keep = T::one() - mom;
            let unbias = T::of_f64(n as f64 / (n as f64 - 1.0));
            let update = BnStatsUpdate {
                running_mean: (0..c)
                    .map(|ci| keep * running_mean[ci] + mom * mean[ci])
                    .collect(),
                running_var: (0..c)
                    .map(|ci| keep * running_var[ci] + mom * var[ci] * unbias)
                    .collect(),
            };

            let xhat = std::sync::Arc::new(xhat);
            let gamma_data = gamma.data_arc();
            let xhat_b = std::sync::Arc::clone(&xhat);
            let out_tensor = Tensor::from_op(
                vec![input.clone(), gamma.clone(), beta.clone()],
                input.shape().to_vec(),
                out,
                Box::new(move |grad, needs, parents| {
                    // Per-channel reductions of the output gradient.
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let mut sg = T::zero();
                            let mut sgx = T::zero();
                            for i in 0..plane {
                                sg = sg + grad[base + i];
                                sgx = sgx + grad[base + i] * xhat_b[base + i];
                            }
                            sum_g[ci] = sum_g[ci] + sg;
                            sum_gx[ci] = sum_gx[ci] + sgx;
                        }
                    }
                    if needs[0] {
                        let nf = T::of_f64(n as f64);
                        let dx = &mut parents[0];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let coef = gamma_data[ci] * invstd[ci] / nf;
                                for i in 0..plane {
                                    let term = nf * grad[base + i]
                                        - sum_g[ci]
                                        - xhat_b[base + i] * sum_gx[ci];
                                    dx[base + i] = dx[base + i] + coef * term;
                                }
                            }
                        }
                    }
                    if needs[1] {
                        for ci in 0..c {
                            parents[1][ci] = parents[1][ci] + sum_gx[ci];
                        }
                    }
                    if needs[2] {
                        for ci in 0..c {
                            parents[2][ci] = parents[2][ci] + sum_g[ci];
                        }
                    }
                }),
            );
            Ok((out_tensor, Some(update)))
        }
        BnMode::Eval => {
            let invr: Vec<T> = running_var
                .iter()
                .map(|&v| T::one() / (v + eps_t).sqrt())
                .collect();
            let rm = running_mean.to_vec();
            let mut out = vec![T::zero(); src.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        out[base + i] = g[ci] * (src[base + i] - rm[ci]) * invr[ci] + bt[ci];
                    }
                }
            }
            let x_data = input.data_arc();
            let gamma_data = gamma.data_arc();
            let out_tensor = Tensor::from_op(
                vec![input.clone(), gamma.clone(), beta.clone()],
                input.shape().to_vec(),
                out,
                Box::new(move |grad, needs, parents| {
                    if needs[0] {
                        let dx = &mut parents[0];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let coef = gamma_data[ci] * invr[ci];
                                for i in 0..plane {
                                    dx[base + i] = dx[base + i] + grad[base + i] * coef;
                                }
                            }
                        }
                    }
                    if needs[1] || needs[2] {
                        for ci in 0..c {
                            let mut sg = T::zero();
                            let mut sgx = T::zero();
                            for bi in 0..b {
                                let base = (bi * c + ci) * plane;
                                for i in 0..plane {
                                    sg = sg + grad[base + i];
                                    sgx = sgx + grad[base + i] * (x_data[base + i] - rm[ci]) * invr[ci];
                                }
                            }
                            if needs[1] {
                                parents[1][ci] = parents[1][ci] + sgx;
                            }
                            if needs[2] {
                                parents[2][ci] = parents[2][ci] + sg;
                            }
                        }
                    }
                }),
            );
            Ok((out_tensor, None))
        }
    }
}

/// Batch normalization of a `[b, f]` tensor, statistics per feature over the
/// batch. Implemented as [`batchnorm2d`] on a `[b, f, 1, 1]` view.
pub fn batchnorm1d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    momentum: f64,
    eps: f64,
    mode: BnMode,
) -> Result<(Tensor<T>, Option<BnStatsUpdate<T>>)> {
    let [b, f] = match input.shape() {
        [a, b] => [*a, *b],
        other => {
            return Err(Error::Shape(format!(
                "batchnorm1d input must be rank 2, got {other:?}"
            )))
        }
    };
    let view = input.reshape(&[b, f, 1, 1])?;
    let (out, update) = batchnorm2d(&view, gamma, beta, running_mean, running_var, momentum, eps, mode)?;
    Ok((out.reshape(&[b, f])?, update))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops, Tensor};

    #[test]
    fn two_value_batch_normalizes_to_unit() {
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0f64, 2.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let (y, update) = batchnorm2d(
            &x, &gamma, &beta, &[0.0], &[1.0], 0.1, 1e-5, BnMode::Train,
        )
        .unwrap();
        let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!((y.data()[1] - expected).abs() < 1e-12);
        let update = update.unwrap();
        // mean 1, biased var 1, unbiased var 2
        assert!((update.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((update.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![5.0f64, -3.0, 2.0, 0.5]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![7.0f64]).unwrap();
        let (y, _) = batchnorm2d(
            &x, &gamma, &beta, &[0.0], &[1.0], 0.1, 1e-5, BnMode::Train,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn eval_mode_with_identity_stats() {
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![0.25f64, -1.5]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0f64, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        let (y, update) = batchnorm2d(
            &x, &gamma, &beta, &[0.0, 0.0], &[1.0, 1.0], 0.1, 1e-5, BnMode::Eval,
        )
        .unwrap();
        assert!(update.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_train_batch_rejected() {
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0f64, 2.0]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0f64, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        assert!(batchnorm2d(
            &x, &gamma, &beta, &[0.0, 0.0], &[1.0, 1.0], 0.1, 1e-5, BnMode::Train,
        )
        .is_err());
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 2.0 + 0.3).collect();
        let x = Tensor::from_vec(&[2, 3, 2, 2], data).unwrap();
        let gamma = Tensor::from_vec(&[3], vec![1.0f64; 3]).unwrap();
        let beta = Tensor::from_vec(&[3], vec![0.0f64; 3]).unwrap();
        let (y, _) = batchnorm2d(
            &x, &gamma, &beta, &[0.0; 3], &[1.0; 3], 0.1, 1e-5, BnMode::Train,
        )
        .unwrap();
        // Per-channel mean ~0 and variance ~1.
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..2 {
                for i in 0..4 {
                    vals.push(y.data()[(b * 3 + c) * 4 + i]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn gradcheck_train_mode() {
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.61).cos()).collect();
        let x = Tensor::from_vec(&[2, 2, 2, 2], data).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.3f64, 0.8]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.2f64, -0.4]).unwrap();
        let report = finite_diff_check(
            |p| {
                let (y, _) = batchnorm2d(
                    &p[0], &p[1], &p[2], &[0.1, -0.2], &[1.5, 0.7], 0.1, 1e-5, BnMode::Train,
                )
                .unwrap();
                ops::sum_all(&ops::tanh(&y))
            },
            &[x, gamma, beta],
            1e-5,
            1e-3,
        );
        report.assert_passed();
    }

    #[test]
    fn gradcheck_eval_mode() {
        let data: Vec<f64> = (0..8).map(|i| (i as f64 * 0.13).sin()).collect();
        let x = Tensor::from_vec(&[2, 2, 1, 2], data).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![0.9f64, 1.1]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![-0.1f64, 0.3]).unwrap();
        let report = finite_diff_check(
            |p| {
                let (y, _) = batchnorm2d(
                    &p[0], &p[1], &p[2], &[0.4, -0.3], &[2.0, 0.5], 0.1, 1e-5, BnMode::Eval,
                )
                .unwrap();
                ops::sum_all(&ops::tanh(&y))
            },
            &[x, gamma, beta],
            1e-5,
            1e-3,
        );
        report.assert_passed();
    }
}
