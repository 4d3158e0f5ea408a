//! Weighted sample statistics shared by the Monte Carlo checks.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// `|estimate - target|` in units of the standard error.
pub fn z_score(estimate: f64, target: f64, se: f64) -> f64 {
    if se == 0.0 {
        if estimate == target {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (estimate - target).abs() / se
    }
}

/// Standard error of the sample variance, `sqrt((m4 - var^2)/n)`.
pub fn variance_standard_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let var = variance(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - var * var).max(0.0) / n).sqrt()
}

pub fn weighted_mean(xs: &[f64], ws: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, w) in xs.iter().zip(ws) {
        num += w * x;
        den += w;
    }
    num / den
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_variance() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn weighted_mean_matches_unweighted_for_uniform_weights() {
        let xs = [1.0, 5.0, 3.0];
        assert!((weighted_mean(&xs, &[0.2, 0.2, 0.2]) - mean(&xs)).abs() < 1e-14);
    }

    #[test]
    fn correlation_of_identical_series_is_one() {
        let xs = [0.3, -1.0, 2.0, 0.7];
        assert!((correlation(&xs, &xs) - 1.0).abs() < 1e-12);
    }
}
