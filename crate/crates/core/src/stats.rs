//! Seed derivation and order-independent reductions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; maps `(master, index)` to a well-mixed child seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 generator on `stream` of `seed`. Streams of one seed are
/// independent, so trial `j` can be drawn without touching trials `< j`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pairwise summation: error grows as O(log n) and the result depends only
/// on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased (n − 1) sample variance, two-pass.
pub fn sample_variance(values: &[f64]) -> f64 {
    let mu = mean(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
    pairwise_sum(&dev) / (values.len() as f64 - 1.0)
}

/// Standard error of the unbiased sample variance, from the fourth central
/// moment: `sqrt((m4 − s⁴ (n − 3)/(n − 1)) / n)`.
pub fn variance_stderr(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mu = mean(values);
    let s2 = sample_variance(values);
    let quart: Vec<f64> = values.iter().map(|v| (v - mu).powi(4)).collect();
    let m4 = pairwise_sum(&quart) / n;
    ((m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

/// Ordinary least squares `y = intercept + slope · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    let mx = mean(x);
    let my = mean(y);
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let slope = pairwise_sum(&sxy) / pairwise_sum(&sxx);
    let intercept = my - slope * mx;
    let resid: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .collect();
    let r2 = r_squared(pairwise_sum(&resid), y);
    LineFit { slope, intercept, r2 }
}

/// `1 − SS_res / SS_tot` against the centered total sum of squares, clamped
/// to `[0, 1]`. A constant response scores 1 only when fitted exactly.
pub fn r_squared(ss_res: f64, y: &[f64]) -> f64 {
    let my = mean(y);
    let tot: Vec<f64> = y.iter().map(|b| (b - my) * (b - my)).collect();
    let ss_tot = pairwise_sum(&tot);
    if ss_tot <= f64::EPSILON * y.len() as f64 {
        return if ss_res <= 1e-24 { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(7, 3).random();
        let b: u64 = stream_rng(7, 3).random();
        let c: u64 = stream_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let v = vec![0.1; 10_000];
        assert!((pairwise_sum(&v) - 1000.0).abs() < 1e-10);
    }

    #[test]
    fn line_fit_exact() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let f = fit_line(&x, &y);
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.intercept - 3.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_helpers() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((sample_variance(&v) - 5.0 / 3.0).abs() < 1e-15);
        assert!(variance_stderr(&v) >= 0.0);
    }
}
