//! Correlation coefficients, ranks, t-intervals and least squares.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), CorrelationError> {
    if x.len() != y.len() {
        return Err(CorrelationError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(CorrelationError::TooFewPoints(x.len()));
    }
    if constant(x) || constant(y) {
        return Err(CorrelationError::ZeroVariance);
    }
    Ok(())
}

/// Pearson product-moment correlation, two-pass over centred values.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson on mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(x, y)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Ordinary least squares fit `y = slope * x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 || constant(x) {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Two-sided 95% t-interval for the mean of `xs`; `None` below two values.
pub fn t_interval_95(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let sd = sample_sd(xs);
    if sd == 0.0 {
        return Some((m, m));
    }
    let df = (xs.len() - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, df)
        .expect("df >= 1")
        .inverse_cdf(0.975);
    let half = t * sd / (xs.len() as f64).sqrt();
    Some((m - half, m + half))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Ok(1.0));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Ok(-1.0));
        assert_eq!(
            pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(CorrelationError::ZeroVariance)
        );
        assert_eq!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(CorrelationError::TooFewPoints(2))
        );
        assert_eq!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(CorrelationError::LengthMismatch(3, 2))
        );
        // a constant that is not exactly representable after averaging
        assert_eq!(
            pearson(&[0.1, 0.1, 0.1], &[1.0, 2.0, 3.0]),
            Err(CorrelationError::ZeroVariance)
        );
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 100.0, 1000.0]), Ok(1.0));
        let rho = spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        // sum d^2 = 6, rho = 1 - 6 * 6 / (3 * 8)
        assert!((rho - (-0.5)).abs() < 1e-15);
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]),
            Err(CorrelationError::ZeroVariance)
        );
    }

    #[test]
    fn mid_ranks_with_ties() {
        assert_eq!(mid_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(mid_ranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn least_squares_line() {
        let (m, b) = least_squares(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert!(least_squares(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    /// df = 1: the 0.975 quantile is tan(pi * 0.475) in closed form.
    #[test]
    fn t_interval_two_points() {
        let (lo, hi) = t_interval_95(&[60.0, 80.0]).unwrap();
        let t = (std::f64::consts::PI * 0.475).tan();
        let half = t * 200f64.sqrt() / 2f64.sqrt();
        assert!((lo - (70.0 - half)).abs() < 1e-6, "{lo}");
        assert!((hi - (70.0 + half)).abs() < 1e-6, "{hi}");
        assert_eq!(t_interval_95(&[100.0, 100.0, 100.0]), Some((100.0, 100.0)));
        assert_eq!(t_interval_95(&[1.0]), None);
    }
}
