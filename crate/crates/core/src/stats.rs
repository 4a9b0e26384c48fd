//! Small statistics helpers shared by the detector monitors and tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Two-sided 99% normal quantile, used for confidence intervals.
pub const Z_99: f64 = 2.575_829_303_548_901;

/// Poisson probability mass function, computed by direct recurrence
/// (no factorials, stable for the small means used here).
pub fn poisson_pmf(mu: f64, k: u32) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let mut p = (-mu).exp();
    for i in 1..=k {
        p *= mu / i as f64;
    }
    p
}

/// Chi-square goodness-of-fit of a photon-number histogram against
/// Poisson(mu). Cells are counts n = 0..=max_bin with the tail pooled;
/// cells are then pooled rightward until every expected count is at least
/// five, keeping the chi-square approximation honest. Returns the statistic
/// and its p-value. Degenerate cases (fewer than two cells) return p = 1.
pub fn poisson_chi_square(histogram: &[u64], mu: f64, max_bin: u32) -> (f64, f64) {
    let n: u64 = histogram.iter().sum();
    if n == 0 {
        return (0.0, 1.0);
    }
    if mu == 0.0 {
        // All mass at zero: any higher count is an exact mismatch.
        let extra: u64 = histogram.iter().skip(1).sum();
        return if extra == 0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        };
    }

    // Observed and expected for cells 0..=max_bin plus the pooled tail.
    let cells = max_bin as usize + 2;
    let mut observed = vec![0u64; cells];
    for (k, &count) in histogram.iter().enumerate() {
        let idx = k.min(cells - 1);
        observed[idx] += count;
    }
    let mut expected = vec![0.0f64; cells];
    let mut cumulative = 0.0;
    for (k, e) in expected.iter_mut().enumerate().take(cells - 1) {
        *e = n as f64 * poisson_pmf(mu, k as u32);
        cumulative += *e;
    }
    expected[cells - 1] = (n as f64 - cumulative).max(0.0);

    // Pool rightward until every remaining cell expects >= 5.
    while expected.len() > 2 {
        let last = expected.len() - 1;
        if expected[last] >= 5.0 && expected[last - 1] >= 5.0 {
            break;
        }
        let (eo, el) = (expected.pop().unwrap(), observed.pop().unwrap());
        *expected.last_mut().unwrap() += eo;
        *observed.last_mut().unwrap() += el;
    }
    if expected.len() < 2 {
        return (0.0, 1.0);
    }

    let stat: f64 = observed
        .iter()
        .zip(&expected)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&o, &e)| {
            let d = o as f64 - e;
            d * d / e
        })
        .sum();
    let df = (expected.len() - 1) as f64;
    let dist = ChiSquared::new(df).expect("df >= 1");
    let p = 1.0 - dist.cdf(stat);
    (stat, p)
}
