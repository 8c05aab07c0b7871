//! Small numeric helpers shared across the crate.

pub const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of a normal distribution, in the cancellation-safe form
/// `-0.5 * (r^2/var + ln var + ln 2pi)` with `r = x - mean`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (r * r / var + var.ln() + LN_2PI)
}

/// Log-sum-exp with max shift. Returns -inf for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights into probabilities (softmax). Computed as shifted
/// exponentials over their sum, so a constant vector yields exactly `1/n`.
pub fn softmax(log_w: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in log_w {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return vec![1.0 / log_w.len() as f64; log_w.len()];
    }
    let exps: Vec<f64> = log_w.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Ordered pairwise summation; the reduction tree depends only on the length,
/// never on worker scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Mean via pairwise summation.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// B x d matrix of zeros as nested vectors.
pub fn zeros(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; cols]; rows]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [0.1, -2.0, 3.5];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_handles_large_magnitudes() {
        let xs = [-900.0, -901.0];
        let v = logsumexp(&xs);
        assert!(v.is_finite());
        assert!((v - (-900.0 + (1.0f64 + (-1.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let w = softmax(&[1.0, 2.0, 3.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_sequential() {
        let xs: Vec<f64> = (0..1001).map(|i| (i as f64) * 0.25 - 10.0).collect();
        let seq: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - seq).abs() < 1e-9);
    }

    #[test]
    fn normal_logpdf_standard_at_zero() {
        assert!((normal_logpdf(0.0, 0.0, 1.0) + 0.5 * LN_2PI).abs() < 1e-15);
    }
}
