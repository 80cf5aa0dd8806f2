//! Small numeric helpers shared across modules.
//!
//! All probability arithmetic in this crate goes through log space; these are
//! the only places where exponentials and normalizers are formed.

/// Log of the sum of exponentials, stable under large negative inputs.
///
/// Returns `-inf` for an empty slice or when every input is `-inf`, which is
/// the correct log of a zero sum.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Log-softmax of a logit row. `-inf` logits map to `-inf` log-probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(logits);
    logits.iter().map(|x| x - l).collect()
}

/// Softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|x| x.exp()).collect()
}

/// Softmax of `logits / temperature`. The caller guarantees `temperature > 0`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    softmax(&scaled)
}

/// Mean and standard error of a slice; SE is `sd / sqrt(n)` with the sample
/// (n-1) variance. Returns `(mean, 0.0)` for slices shorter than two.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_inputs() {
        let xs: [f64; 4] = [0.3, -1.2, 2.0, 0.0];
        let naive: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let xs = [-1000.0, -1000.5];
        let got = log_sum_exp(&xs);
        let want = -1000.0 + (1.0 + (-0.5f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_sum_exp_ignores_neg_inf_terms() {
        let got = log_sum_exp(&[f64::NEG_INFINITY, 0.0]);
        assert!((got - 0.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax(&[0.5, -0.25, 0.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn softmax_of_log_probs_recovers_probs() {
        let target: [f64; 3] = [0.1, 0.8, 0.1];
        let logits: Vec<f64> = target.iter().map(|p| p.ln()).collect();
        let p = softmax(&logits);
        for (a, b) in p.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let p = softmax_with_temperature(&[0.0, 2.0, 1.0], 1e-3);
        assert!(p[1] > 1.0 - 1e-12);
    }
}
