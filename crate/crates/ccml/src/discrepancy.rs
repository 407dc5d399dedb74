//! Kernel two-sample statistic between the two networks' activations.
//!
//! The biased squared maximum mean discrepancy with a Gaussian RBF kernel is
//! used both as the disparity loss on intermediate features (maximized, so
//! the networks learn different representations) and as the consistency loss
//! on final logits (minimized, so they agree in their predictions).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound for the median-heuristic bandwidth, guarding against
/// degenerate batches where all points coincide.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Bandwidth policy for the Gaussian RBF kernel
/// `k(x, y) = exp(-||x - y||^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bandwidth_policy", rename_all = "snake_case")]
#[derive(Default)]
pub enum KernelSpec {
    /// Fixed bandwidth, `sigma > 0`.
    Fixed { sigma: f64 },
    /// Median pairwise distance over the two sample sets concatenated,
    /// recomputed per call, floored at [`SIGMA_FLOOR`] and treated as a
    /// constant w.r.t. gradients.
    #[default]
    MedianHeuristic,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Fixed { sigma } if !(sigma.is_finite() && *sigma > 0.0) => Err(
                Error::validation(format!("kernel bandwidth must be positive, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}


/// Squared-MMD estimate with its gradients w.r.t. both sample matrices.
#[derive(Debug, Clone)]
pub struct MmdResult<S: Scalar> {
    /// Biased squared-MMD estimate, clamped at zero against round-off.
    pub value: S,
    /// Gradient w.r.t. each row of the first sample matrix.
    pub grad_p: Array2<S>,
    /// Gradient w.r.t. each row of the second sample matrix.
    pub grad_q: Array2<S>,
    /// Bandwidth actually used (resolved when the policy is the heuristic).
    pub sigma: S,
}

/// Biased squared-MMD estimate between equally sized sample sets.
///
/// `(1/m^2) [ sum k(P,P) - 2 sum k(P,Q) + sum k(Q,Q) ]`, accumulated so that
/// the value is bitwise symmetric in `(P, Q)` and exactly zero when both
/// matrices are equal.
pub fn mmd<S: Scalar>(s_p: &Array2<S>, s_q: &Array2<S>, kernel: &KernelSpec) -> Result<MmdResult<S>> {
    kernel.validate()?;
    let (m, h) = s_p.dim();
    if s_q.dim() != (m, h) {
        return Err(Error::validation(format!(
            "sample sets must have equal shapes, got {:?} and {:?}",
            s_p.dim(),
            s_q.dim()
        )));
    }
    if m == 0 || h == 0 {
        return Err(Error::validation(
            "sample sets must be non-empty with at least one feature",
        ));
    }

    let sigma = match kernel {
        KernelSpec::Fixed { sigma } => S::cast(*sigma),
        KernelSpec::MedianHeuristic => median_bandwidth(s_p, s_q),
    };
    let inv_two_sigma_sq = S::one() / (S::cast(2.0) * sigma * sigma);
    let kern = |a: &Array2<S>, i: usize, b: &Array2<S>, t: usize| -> S {
        let mut d2 = S::zero();
        for c in 0..h {
            let diff = a[(i, c)] - b[(t, c)];
            d2 += diff * diff;
        }
        (-d2 * inv_two_sigma_sq).exp()
    };

    // Kernel matrices are kept for the gradient pass.
    let mut k_pp = Array2::zeros((m, m));
    let mut k_qq = Array2::zeros((m, m));
    let mut k_pq = Array2::zeros((m, m));
    for i in 0..m {
        for t in i..m {
            let v = kern(s_p, i, s_p, t);
            k_pp[(i, t)] = v;
            k_pp[(t, i)] = v;
            let w = kern(s_q, i, s_q, t);
            k_qq[(i, t)] = w;
            k_qq[(t, i)] = w;
        }
        for t in 0..m {
            k_pq[(i, t)] = kern(s_p, i, s_q, t);
        }
    }

    // All three sums use the same diagonal-then-pairs accumulation order:
    // for P == Q they are bitwise identical (so the value is exactly zero),
    // and swapping P and Q only commutes the additions inside each pair term.
    let pair_sum = |k: &Array2<S>| -> S {
        let mut acc = S::zero();
        for i in 0..m {
            acc += k[(i, i)];
        }
        for i in 0..m {
            for t in (i + 1)..m {
                acc += k[(i, t)] + k[(t, i)];
            }
        }
        acc
    };
    let sum_pp = pair_sum(&k_pp);
    let sum_qq = pair_sum(&k_qq);
    let sum_pq = pair_sum(&k_pq);

    let m_s = S::cast(m as f64);
    let inv_m2 = S::one() / (m_s * m_s);
    let raw = ((sum_pp + sum_qq) - S::cast(2.0) * sum_pq) * inv_m2;
    let value = raw.max(S::zero());

    // d/dx k(x, y) = -k(x, y) (x - y) / sigma^2
    let coeff = S::cast(2.0) * inv_m2 * inv_two_sigma_sq * S::cast(2.0);
    let mut grad_p = Array2::zeros((m, h));
    let mut grad_q = Array2::zeros((m, h));
    for i in 0..m {
        for c in 0..h {
            let mut gp = S::zero();
            let mut gq = S::zero();
            for t in 0..m {
                gp += -k_pp[(i, t)] * (s_p[(i, c)] - s_p[(t, c)])
                    + k_pq[(i, t)] * (s_p[(i, c)] - s_q[(t, c)]);
                gq += -k_qq[(i, t)] * (s_q[(i, c)] - s_q[(t, c)])
                    + k_pq[(t, i)] * (s_q[(i, c)] - s_p[(t, c)]);
            }
            grad_p[(i, c)] = coeff * gp;
            grad_q[(i, c)] = coeff * gq;
        }
    }

    Ok(MmdResult {
        value,
        grad_p,
        grad_q,
        sigma,
    })
}

/// Disparity statistic between the two networks' tap features.
pub fn disparity_loss<S: Scalar>(
    f_tap: &Array2<S>,
    g_tap: &Array2<S>,
    kernel: &KernelSpec,
) -> Result<MmdResult<S>> {
    mmd(f_tap, g_tap, kernel)
}

/// Consistency statistic between the two networks' final logits.
pub fn consistency_loss<S: Scalar>(
    f_logits: &Array2<S>,
    g_logits: &Array2<S>,
    kernel: &KernelSpec,
) -> Result<MmdResult<S>> {
    mmd(f_logits, g_logits, kernel)
}

/// Median pairwise Euclidean distance over the rows of both matrices
/// concatenated, floored at [`SIGMA_FLOOR`].
pub fn median_bandwidth<S: Scalar>(s_p: &Array2<S>, s_q: &Array2<S>) -> S {
    let h = s_p.ncols();
    let n = s_p.nrows() + s_q.nrows();
    let row = |idx: usize, c: usize| -> S {
        if idx < s_p.nrows() {
            s_p[(idx, c)]
        } else {
            s_q[(idx - s_p.nrows(), c)]
        }
    };
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = S::zero();
            for c in 0..h {
                let diff = row(i, c) - row(j, c);
                d2 += diff * diff;
            }
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return S::cast(SIGMA_FLOOR).max(S::one());
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are never NaN"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        (dists[mid - 1] + dists[mid]) / S::cast(2.0)
    };
    median.max(S::cast(SIGMA_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent evaluation of the estimator with plain nested loops.
    fn mmd_oracle(p: &Array2<f64>, q: &Array2<f64>, sigma: f64) -> f64 {
        let m = p.nrows();
        let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            (-d2 / (2.0 * sigma * sigma)).exp()
        };
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        for i in 0..m {
            for t in 0..m {
                s1 += k(p.row(i), p.row(t));
                s2 += k(p.row(i), q.row(t));
                s3 += k(q.row(i), q.row(t));
            }
        }
        (s1 - 2.0 * s2 + s3) / (m * m) as f64
    }

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, h: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((m, h), |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn identical_inputs_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_matrix(&mut rng, 17, 5, 3.0);
        let res = mmd(&p, &p.clone(), &KernelSpec::Fixed { sigma: 0.7 }).unwrap();
        assert_eq!(res.value, 0.0);
    }

    #[test]
    fn hand_computed_single_point_value() {
        let res = mmd(&array![[0.0]], &array![[1.0]], &KernelSpec::Fixed { sigma: 1.0 }).unwrap();
        let expected = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((res.value - expected).abs() < 1e-12);
        assert!((res.value - 0.786939).abs() < 1e-6);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let m = rng.random_range(1..=32);
            let h = rng.random_range(1..=8);
            let p = random_matrix(&mut rng, m, h, 2.0);
            let q = random_matrix(&mut rng, m, h, 2.0);
            let sigma = rng.random_range(0.3..3.0);
            let res = mmd(&p, &q, &KernelSpec::Fixed { sigma }).unwrap();
            let oracle = mmd_oracle(&p, &q, sigma);
            assert!(
                (res.value - oracle).abs() < 1e-9,
                "impl {} vs oracle {}",
                res.value,
                oracle
            );
        }
    }

    #[test]
    fn symmetric_in_arguments_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_matrix(&mut rng, 9, 4, 1.5);
        let q = random_matrix(&mut rng, 9, 4, 1.5);
        for kernel in [KernelSpec::Fixed { sigma: 1.1 }, KernelSpec::MedianHeuristic] {
            let a = mmd(&p, &q, &kernel).unwrap();
            let b = mmd(&q, &p, &kernel).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn translation_invariant_with_fixed_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_matrix(&mut rng, 6, 3, 1.0);
        let q = random_matrix(&mut rng, 6, 3, 1.0);
        let kernel = KernelSpec::Fixed { sigma: 0.9 };
        let base = mmd(&p, &q, &kernel).unwrap().value;
        let shift = 5.25;
        let shifted = mmd(&p.mapv(|v| v + shift), &q.mapv(|v| v + shift), &kernel)
            .unwrap()
            .value;
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_matrix(&mut rng, 5, 3, 1.0);
        let q = random_matrix(&mut rng, 5, 3, 1.0);
        let kernel = KernelSpec::Fixed { sigma: 0.8 };
        let res = mmd(&p, &q, &kernel).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for c in 0..3 {
                let mut up = p.clone();
                let mut down = p.clone();
                up[(i, c)] += h;
                down[(i, c)] -= h;
                let numeric = (mmd(&up, &q, &kernel).unwrap().value
                    - mmd(&down, &q, &kernel).unwrap().value)
                    / (2.0 * h);
                let analytic = res.grad_p[(i, c)];
                let denom = analytic.abs().max(numeric.abs()).max(1e-2);
                assert!(
                    ((numeric - analytic) / denom).abs() < 1e-6,
                    "grad_p mismatch at ({i},{c}): {analytic} vs {numeric}"
                );

                let mut up = q.clone();
                let mut down = q.clone();
                up[(i, c)] += h;
                down[(i, c)] -= h;
                let numeric = (mmd(&p, &up, &kernel).unwrap().value
                    - mmd(&p, &down, &kernel).unwrap().value)
                    / (2.0 * h);
                let analytic = res.grad_q[(i, c)];
                let denom = analytic.abs().max(numeric.abs()).max(1e-2);
                assert!(
                    ((numeric - analytic) / denom).abs() < 1e-6,
                    "grad_q mismatch at ({i},{c}): {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let m = rng.random_range(1..=16);
            let h = rng.random_range(1..=6);
            let p = random_matrix(&mut rng, m, h, 0.5);
            let q = random_matrix(&mut rng, m, h, 0.5);
            let res = mmd(&p, &q, &KernelSpec::MedianHeuristic).unwrap();
            assert!(res.value >= 0.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = array![[0.0, 1.0]];
        let q = array![[0.0], [1.0]];
        assert!(matches!(
            mmd(&p, &q, &KernelSpec::MedianHeuristic).unwrap_err(),
            Error::Validation(_)
        ));
        assert!(matches!(
            mmd(&p, &p.clone(), &KernelSpec::Fixed { sigma: 0.0 }).unwrap_err(),
            Error::Validation(_)
        ));
        assert!(matches!(
            mmd(&p, &p.clone(), &KernelSpec::Fixed { sigma: -1.0 }).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn delegating_wrappers_equal_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_matrix(&mut rng, 4, 2, 1.0);
        let q = random_matrix(&mut rng, 4, 2, 1.0);
        let kernel = KernelSpec::Fixed { sigma: 1.3 };
        let base = mmd(&p, &q, &kernel).unwrap().value;
        assert_eq!(disparity_loss(&p, &q, &kernel).unwrap().value, base);
        assert_eq!(consistency_loss(&p, &q, &kernel).unwrap().value, base);
        assert_eq!(disparity_loss(&p, &p.clone(), &kernel).unwrap().value, 0.0);
    }

    #[test]
    fn median_bandwidth_floors_degenerate_batches() {
        let p = Array2::<f64>::zeros((4, 3));
        let q = Array2::<f64>::zeros((4, 3));
        assert_eq!(median_bandwidth(&p, &q), SIGMA_FLOOR);
        let res = mmd(&p, &q, &KernelSpec::MedianHeuristic).unwrap();
        assert_eq!(res.value, 0.0);
    }
}
