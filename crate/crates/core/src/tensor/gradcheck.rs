//! Central finite-difference checking of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, Scalar, Tensor};

/// Per-parameter outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param_index: usize,
    pub max_rel_err: f64,
    /// Flat element index where the worst error occurred.
    pub worst_element: usize,
    pub checked_elements: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn assert_passed(&self) {
        assert!(
            self.passed,
            "gradient check failed (max rel err {:.3e}): {:?}",
            self.max_rel_err,
            self.entries
                .iter()
                .filter(|e| e.failure.is_some() || e.max_rel_err.is_nan())
                .collect::<Vec<_>>()
        );
    }
}

/// Compares analytic gradients of `f` against central finite differences,
/// element by element: `(f(p+eps) - f(p-eps)) / (2 eps)`.
///
/// An element passes when the relative error is below `tol`, or when both
/// values are below 1e-6 in magnitude and agree within 1e-6 absolutely.
/// `f` must be deterministic.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64, tol: f64) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    finite_diff_impl(f, params, eps, tol, None, 0)
}

/// Same check probing at most `max_elements` seeded-random elements per
/// parameter; full sweeps of large models are too slow to be useful.
pub fn finite_diff_check_sampled<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: f64,
    tol: f64,
    max_elements: usize,
    seed: u64,
) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    finite_diff_impl(f, params, eps, tol, Some(max_elements), seed)
}

fn finite_diff_impl<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: f64,
    tol: f64,
    max_elements: Option<usize>,
    seed: u64,
) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    assert!(eps > 0.0, "eps must be positive");
    let tracked: Vec<Tensor<T>> = params
        .iter()
        .map(|p| Tensor::leaf(p.shape().to_vec(), p.data().to_vec(), true))
        .collect();
    let loss = f(&tracked);
    backward(&loss).expect("finite_diff_check: backward failed");
    let analytic: Vec<Vec<T>> = tracked
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();

    let eval = |probe: &[Tensor<T>]| -> f64 {
        let out = f(probe);
        assert_eq!(out.numel(), 1, "finite_diff_check target must be scalar");
        out.item().as_f64()
    };

    let mut entries = Vec::with_capacity(params.len());
    let mut passed = true;
    let mut global_max = 0.0f64;

    for (pi, base) in params.iter().enumerate() {
        let numel = base.numel();
        let mut indices: Vec<usize> = (0..numel).collect();
        if let Some(limit) = max_elements {
            if numel > limit {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e3779b9));
                indices.shuffle(&mut rng);
                indices.truncate(limit);
                indices.sort_unstable();
            }
        }

        let mut entry = GradCheckEntry {
            param_index: pi,
            max_rel_err: 0.0,
            worst_element: 0,
            checked_elements: indices.len(),
            failure: None,
        };

        for &j in &indices {
            let perturbed = |delta: f64| -> Vec<Tensor<T>> {
                params
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        if qi == pi {
                            let mut data = q.data().to_vec();
                            data[j] = T::of_f64(data[j].as_f64() + delta);
                            Tensor::leaf(q.shape().to_vec(), data, false)
                        } else {
                            q.clone()
                        }
                    })
                    .collect()
            };
            let plus = eval(&perturbed(eps));
            let minus = eval(&perturbed(-eps));
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[pi][j].as_f64();
            if !fd.is_finite() || !an.is_finite() {
                entry.failure = Some(format!(
                    "non-finite value at param {pi} element {j}: fd={fd}, analytic={an}"
                ));
                passed = false;
                break;
            }
            let denom = fd.abs().max(an.abs());
            let rel = if denom > 0.0 { (fd - an).abs() / denom } else { 0.0 };
            let small_ok = fd.abs() < 1e-6 && an.abs() < 1e-6 && (fd - an).abs() < 1e-6;
            let elem_ok = rel < tol || small_ok;
            let effective = if small_ok { 0.0 } else { rel };
            if effective > entry.max_rel_err {
                entry.max_rel_err = effective;
                entry.worst_element = j;
            }
            if !elem_ok {
                passed = false;
            }
        }

        global_max = global_max.max(entry.max_rel_err);
        entries.push(entry);
    }

    GradCheckReport {
        entries,
        passed,
        max_rel_err: global_max,
    }
}
