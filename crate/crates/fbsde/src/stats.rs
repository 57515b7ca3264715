//! Small statistical helpers shared by the experiment modules.

/// Pairwise (cascade) summation. Deterministic for a fixed input order and
/// more accurate than a running sum on long Monte Carlo accumulations.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Weighted least squares line `y ~ a + b x`. Weights are inverse variances;
/// the returned slope standard error uses the stated weights (not the
/// residuals), matching the normal approximation.
pub fn weighted_line_fit(xs: &[f64], ys: &[f64], ws: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert_eq!(xs.len(), ws.len());
    let sw: f64 = ws.iter().sum();
    let xbar: f64 = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ybar: f64 = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
        sxx += w * (x - xbar) * (x - xbar);
        sxy += w * (x - xbar) * (y - ybar);
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    (slope, intercept, (1.0 / sxx).sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at significance `alpha`
/// (`c(alpha) sqrt((n+m)/(nm))` with `c = sqrt(-ln(alpha/2)/2)`).
pub fn ks_critical(alpha: f64, na: usize, nb: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((na + nb) as f64 / (na as f64 * nb as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_relative_eq!(pairwise_sum(&v), 1.5, max_relative = 1e-15);
    }

    #[test]
    fn mean_se_basics() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m, 2.5);
        // sample sd = sqrt(5/3), se = sd/2
        assert_relative_eq!(se, (5.0f64 / 3.0).sqrt() / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn exact_line_is_recovered() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let ws = [1.0, 2.0, 1.0, 0.5];
        let (slope, intercept, _) = weighted_line_fit(&xs, &ys, &ws);
        assert_relative_eq!(slope, -0.5, max_relative = 1e-14);
        assert_relative_eq!(intercept, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn ks_identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
    }

    #[test]
    fn ks_disjoint_samples() {
        let a = [1.0, 2.0];
        let b = [5.0, 6.0];
        assert_eq!(ks_statistic(&a, &b), 1.0);
    }
}
