//! Summary statistics and trend tests over latency samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Linear interpolation between closest ranks; `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
    pub mean: f64,
    pub std_dev: f64,
    /// Coefficient of variation, std_dev / mean.
    pub cov: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let m = mean(xs);
        let sd = std_dev(xs);
        Summary {
            n: xs.len(),
            median: percentile(&s, 0.5),
            p10: percentile(&s, 0.1),
            p25: percentile(&s, 0.25),
            p75: percentile(&s, 0.75),
            p90: percentile(&s, 0.9),
            p95: percentile(&s, 0.95),
            mean: m,
            std_dev: sd,
            cov: if m == 0.0 { 0.0 } else { sd / m },
        }
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

/// Ordinary least squares fit `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
    /// Two-sided 95% confidence interval of the slope.
    pub slope_ci95: (f64, f64),
}

impl LinearFit {
    pub fn of(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
        let n = xs.len();
        if n < 3 || n != ys.len() {
            return None;
        }
        let (mx, my) = (mean(xs), mean(ys));
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let sst: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r2 = if sst == 0.0 { 1.0 } else { 1.0 - sse / sst };
        let df = (n - 2) as f64;
        let slope_stderr = (sse / df / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, df).ok()?.inverse_cdf(0.975);
        Some(LinearFit {
            slope,
            intercept,
            r2,
            slope_stderr,
            slope_ci95: (slope - t * slope_stderr, slope + t * slope_stderr),
        })
    }

    pub fn ci_contains_zero(&self) -> bool {
        self.slope_ci95.0 <= 0.0 && 0.0 <= self.slope_ci95.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn percentiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.5), 3.0);
        assert_eq!(percentile(&s, 0.25), 2.0);
        assert!((percentile(&s, 0.1) - 1.4).abs() < 1e-12);
        assert!(percentile(&[], 0.5).is_nan());
    }

    #[test]
    fn summary_of_constant_has_no_spread() {
        let s = Summary::of(&[7.0; 10]);
        assert_eq!((s.median, s.std_dev, s.cov), (7.0, 0.0, 0.0));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_of_monotone_is_one() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.powi(3) + 1.0).collect();
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = ys.iter().rev().copied().collect();
        assert!((spearman(&xs, &rev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_fit() {
        // y = 2x + 1 with symmetric residuals
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys = [1.1, 2.9, 5.1, 6.9, 9.0];
        let f = LinearFit::of(&xs, &ys).unwrap();
        assert!((f.slope - 1.98).abs() < 1e-9);
        assert!(f.r2 > 0.99);
        assert!(!f.ci_contains_zero());
        // t(0.975, 3) = 3.182446
        let half = (f.slope_ci95.1 - f.slope_ci95.0) / 2.0;
        assert!((half / f.slope_stderr - 3.182446).abs() < 1e-4);
    }

    #[test]
    fn flat_noise_has_zero_in_ci() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let ys = [5.0, 6.0, 4.0, 6.0, 4.0, 5.0];
        assert!(LinearFit::of(&xs, &ys).unwrap().ci_contains_zero());
    }

    proptest! {
        #[test]
        fn percentiles_are_ordered(mut xs in proptest::collection::vec(-1e6f64..1e6, 1..60)) {
            xs.sort_by(f64::total_cmp);
            let s = Summary::of(&xs);
            prop_assert!(xs[0] <= s.p10 && s.p10 <= s.p25 && s.p25 <= s.median);
            prop_assert!(s.median <= s.p75 && s.p75 <= s.p90 && s.p90 <= s.p95 && s.p95 <= xs[xs.len() - 1]);
        }

        #[test]
        fn spearman_is_bounded(xs in proptest::collection::vec(0f64..100.0, 3..40), seed in 0u64..1000) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| (x * 7.0 + (i as u64 * seed % 13) as f64) % 50.0).collect();
            let r = spearman(&xs, &ys);
            prop_assert!(r.is_nan() || (-1.0 - 1e-9..=1.0 + 1e-9).contains(&r));
        }
    }
}
