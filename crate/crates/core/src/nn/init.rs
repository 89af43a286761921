//! Weight initializers.
//!
//! All draws happen in `f64` and convert afterwards, so the random stream
//! consumed for a given seed is identical regardless of model precision.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("initializer shape must have rank >= 1".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

/// Fan-in/fan-out of a weight shape. Rank 2 is `[out, in]`; rank 4 is
/// `[out, in, k, k]` with the kernel area folded into both fans.
fn fans(shape: &[usize]) -> Result<(f64, f64)> {
    match shape {
        [out, inp] => Ok((*inp as f64, *out as f64)),
        [out, inp, kh, kw] => {
            let area = (kh * kw) as f64;
            Ok((*inp as f64 * area, *out as f64 * area))
        }
        other => Err(Error::Shape(format!(
            "fan computation needs rank 2 or 4, got {other:?}"
        ))),
    }
}

pub fn init_zeros<T: Scalar>(shape: &[usize]) -> Result<Tensor<T>> {
    check_shape(shape)?;
    Ok(Tensor::zeros(shape))
}

fn normal_draws<T: Scalar, R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of_f64(z * std)
        })
        .collect()
}

/// Normal draws with `std = sqrt(2 / (fan_in + fan_out))`.
pub fn init_xavier_normal<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let n = check_shape(shape)?;
    let (fan_in, fan_out) = fans(shape)?;
    let std = (2.0 / (fan_in + fan_out)).sqrt();
    Ok(Tensor::leaf(shape.to_vec(), normal_draws(n, std, rng), false))
}

/// Normal draws with `std = sqrt(2 / fan_in)`.
pub fn init_kaiming<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let n = check_shape(shape)?;
    let (fan_in, _) = fans(shape)?;
    let std = (2.0 / fan_in).sqrt();
    Ok(Tensor::leaf(shape.to_vec(), normal_draws(n, std, rng), false))
}

/// Orthogonal rank-2 initializer: orthonormal rows when `rows <= cols`,
/// orthonormal columns otherwise.
pub fn init_orthogonal<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    check_shape(shape)?;
    let [rows, cols] = match shape {
        [r, c] => [*r, *c],
        other => {
            return Err(Error::Shape(format!(
                "orthogonal initializer needs rank 2, got {other:?}"
            )))
        }
    };
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };

    // Gaussian matrix with orthonormalized rows (two passes of modified
    // Gram-Schmidt; r <= c so the rows are independent almost surely).
    let mut q: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..r {
        for _pass in 0..2 {
            for j in 0..i {
                let mut dot = 0.0;
                for k in 0..c {
                    dot += q[j * c + k] * q[i * c + k];
                }
                for k in 0..c {
                    q[i * c + k] -= dot * q[j * c + k];
                }
            }
        }
        let norm: f64 = (0..c).map(|k| q[i * c + k] * q[i * c + k]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(
                "orthogonal initializer hit a degenerate draw".into(),
            ));
        }
        for k in 0..c {
            q[i * c + k] /= norm;
        }
    }

    let data: Vec<T> = if transpose {
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..r {
            for k in 0..c {
                out[k * cols + i] = T::of_f64(q[i * c + k]);
            }
        }
        out
    } else {
        q.into_iter().map(T::of_f64).collect()
    };
    Ok(Tensor::leaf(shape.to_vec(), data, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_wide_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = init_orthogonal(&[4, 8], &mut rng).unwrap();
        // W . W^T = I4
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for k in 0..8 {
                    dot += w.at(&[i, k]) * w.at(&[j, k]);
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-5, "({i},{j}) -> {dot}");
            }
        }
    }

    #[test]
    fn orthogonal_tall_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Tensor<f64> = init_orthogonal(&[8, 3], &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..8 {
                    dot += w.at(&[k, i]) * w.at(&[k, j]);
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn xavier_std_within_ten_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Tensor<f64> = init_xavier_normal(&[100, 100], &mut rng).unwrap();
        let mean: f64 = w.data().iter().sum::<f64>() / w.numel() as f64;
        let var: f64 =
            w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.numel() as f64;
        let target = (2.0f64 / 200.0).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.1);
    }

    #[test]
    fn zeros_and_bad_shapes() {
        let z: Tensor<f32> = init_zeros(&[4]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(init_zeros::<f64>(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(init_orthogonal::<f64, _>(&[], &mut rng).is_err());
    }

    #[test]
    fn seeded_draws_reproduce() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            init_kaiming::<f64, _>(&[4, 4], &mut rng).unwrap().data().to_vec()
        };
        assert_eq!(draw(), draw());
    }
}
