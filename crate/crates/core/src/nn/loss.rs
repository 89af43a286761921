//! Cross-entropy losses, computed through shifted log-sum-exp.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy of `logits: [b, k]` against class indices.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let [b, k] = match logits.shape() {
        [a, b] => [*a, *b],
        other => {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy logits must be [b, k], got {other:?}"
            )))
        }
    };
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy got {} targets for batch {b}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!(
            "target class {bad} out of range for {k} classes"
        )));
    }

    let data = logits.data();
    let mut probs = vec![T::zero(); b * k];
    let mut total = T::zero();
    for i in 0..b {
        let row = &data[i * k..(i + 1) * k];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - m).exp();
        }
        let lse = m + denom.ln();
        total = total + (lse - row[targets[i]]);
        for (j, &v) in row.iter().enumerate() {
            probs[i * k + j] = (v - lse).exp();
        }
    }
    let loss = total / T::of_f64(b as f64);

    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        vec![logits.clone()],
        vec![1],
        vec![loss],
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let scale = grad[0] / T::of_f64(b as f64);
                let dl = &mut parents[0];
                for i in 0..b {
                    for j in 0..k {
                        let indicator = if j == targets[i] { T::one() } else { T::zero() };
                        dl[i * k + j] = dl[i * k + j] + scale * (probs[i * k + j] - indicator);
                    }
                }
            }
        }),
    ))
}

/// Row-wise softmax probabilities (no gradient; reporting helper).
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - m).exp();
        }
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp() / denom;
        }
    }
    out
}

/// Mean per-pixel two-class cross-entropy.
///
/// `logit_map: [b, 2, h, w]` with channel 0 = context and channel 1 = the
/// foreground class; `mask: [b, h, w]` holding exactly 0.0 or 1.0. The mask
/// is a constant, never differentiated through.
pub fn pixelwise_cross_entropy<T: Scalar>(
    logit_map: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match logit_map.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(Error::Shape(format!(
                "pixelwise_cross_entropy logits must be [b, 2, h, w], got {other:?}"
            )))
        }
    };
    if c != 2 {
        return Err(Error::Shape(format!(
            "pixelwise_cross_entropy needs 2 channels, got {c}"
        )));
    }
    if mask.shape() != [b, h, w] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match logits {:?}",
            mask.shape(),
            logit_map.shape()
        )));
    }
    let md = mask.data();
    if md.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument(
            "mask values must be exactly 0 or 1".into(),
        ));
    }

    let data = logit_map.data();
    let plane = h * w;
    let n = b * plane;
    let mut total = T::zero();
    for bi in 0..b {
        for p in 0..plane {
            let l0 = data[(bi * 2) * plane + p];
            let l1 = data[(bi * 2 + 1) * plane + p];
            let m = if l0 > l1 { l0 } else { l1 };
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let target = if md[bi * plane + p] == T::one() { l1 } else { l0 };
            total = total + (lse - target);
        }
    }
    let loss = total / T::of_f64(n as f64);

    let logits_data = logit_map.data_arc();
    let mask_data = mask.data_arc();
    Ok(Tensor::from_op(
        vec![logit_map.clone()],
        vec![1],
        vec![loss],
        Box::new(move |grad, needs, parents| {
            if needs[0] {
                let scale = grad[0] / T::of_f64(n as f64);
                let dl = &mut parents[0];
                for bi in 0..b {
                    for p in 0..plane {
                        let i0 = (bi * 2) * plane + p;
                        let i1 = (bi * 2 + 1) * plane + p;
                        let l0 = logits_data[i0];
                        let l1 = logits_data[i1];
                        let m = if l0 > l1 { l0 } else { l1 };
                        let e0 = (l0 - m).exp();
                        let e1 = (l1 - m).exp();
                        let denom = e0 + e1;
                        let p1 = e1 / denom;
                        let p0 = e0 / denom;
                        let is_fg = mask_data[bi * plane + p] == T::one();
                        let t0 = if is_fg { T::zero() } else { T::one() };
                        let t1 = if is_fg { T::one() } else { T::zero() };
                        dl[i0] = dl[i0] + scale * (p0 - t0);
                        dl[i1] = dl[i1] + scale * (p1 - t1);
                    }
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    #[test]
    fn uniform_two_class_is_ln2() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_margin_two() {
        let logits = Tensor::from_vec(&[1, 2], vec![2.0f64, 0.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss.item() - expected).abs() < 1e-12);
        assert!((loss.item() - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn shift_invariance() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.5f64, -1.0, 2.0, 0.0, 0.3, -0.7]).unwrap();
        let shifted =
            Tensor::from_vec(&[2, 3], logits.data().iter().map(|v| v + 123.75).collect()).unwrap();
        let a = softmax_cross_entropy(&logits, &[2, 1]).unwrap().item();
        let b = softmax_cross_entropy(&shifted, &[2, 1]).unwrap().item();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn bad_target_rejected() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn softmax_ce_gradcheck() {
        let logits = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64 * 0.43).sin()).collect())
            .unwrap();
        let report = finite_diff_check(
            |p| softmax_cross_entropy(&p[0], &[1, 3, 0]).unwrap(),
            &[logits],
            1e-4,
            1e-3,
        );
        report.assert_passed();
    }

    #[test]
    fn pixelwise_uniform_is_ln2() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let mask = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let loss = pixelwise_cross_entropy(&logits, &mask).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pixelwise_saturated_is_tiny() {
        // +-20 margin toward the correct class everywhere.
        let mask_vals = vec![1.0f64, 0.0, 1.0, 1.0];
        let mut logits = vec![0.0f64; 8];
        for (p, &m) in mask_vals.iter().enumerate() {
            logits[p] = if m == 1.0 { -20.0 } else { 20.0 };
            logits[4 + p] = if m == 1.0 { 20.0 } else { -20.0 };
        }
        let logits = Tensor::from_vec(&[1, 2, 2, 2], logits).unwrap();
        let mask = Tensor::from_vec(&[1, 2, 2], mask_vals).unwrap();
        let loss = pixelwise_cross_entropy(&logits, &mask).unwrap();
        assert!(loss.item() < 1e-8);
    }

    #[test]
    fn pixelwise_matches_scalar_sum() {
        // Random 2x2 single-image case vs per-pixel hand evaluation.
        let logit_vals = vec![0.3f64, -0.7, 1.2, 0.5, -0.2, 0.9, 0.0, -1.5];
        let mask_vals = vec![0.0f64, 1.0, 1.0, 0.0];
        let logits = Tensor::from_vec(&[1, 2, 2, 2], logit_vals.clone()).unwrap();
        let mask = Tensor::from_vec(&[1, 2, 2], mask_vals.clone()).unwrap();
        let loss = pixelwise_cross_entropy(&logits, &mask).unwrap().item();
        let mut expected = 0.0;
        for p in 0..4 {
            let (l0, l1) = (logit_vals[p], logit_vals[4 + p]);
            let lse = l0.max(l1) + ((l0 - l0.max(l1)).exp() + (l1 - l0.max(l1)).exp()).ln();
            expected += lse - if mask_vals[p] == 1.0 { l1 } else { l0 };
        }
        expected /= 4.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn pixelwise_rejects_non_binary_mask() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let mask = Tensor::from_vec(&[1, 1, 1], vec![0.5f64]).unwrap();
        assert!(pixelwise_cross_entropy(&logits, &mask).is_err());
    }

    #[test]
    fn pixelwise_gradcheck() {
        let logits = Tensor::from_vec(
            &[2, 2, 2, 2],
            (0..16).map(|i| (i as f64 * 0.29).cos()).collect(),
        )
        .unwrap();
        let mask =
            Tensor::from_vec(&[2, 2, 2], vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let report = finite_diff_check(
            |p| pixelwise_cross_entropy(&p[0], &mask).unwrap(),
            &[logits],
            1e-4,
            1e-3,
        );
        report.assert_passed();
    }

    #[test]
    fn nonnegative_and_uniform_equals_ln_k() {
        let logits = Tensor::from_vec(&[1, 5], vec![3.25f64; 5]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[4]).unwrap().item();
        assert!((loss - (5.0f64).ln()).abs() < 1e-9);
        assert!(loss >= 0.0);
    }
}
