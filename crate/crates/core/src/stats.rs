//! Small statistics helpers: medians and goodness-of-fit tests used to check
//! sampler distributions.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Median of a non-empty sample; the mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyRange("median of an empty sample".into()));
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pearson chi-square statistic of observed counts against expected probabilities.
pub fn chi_square_statistic(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e) * (c as f64 - e) / e
        })
        .sum()
}

/// Upper `alpha` quantile of the standard normal distribution (Acklam's rational approximation).
pub fn normal_upper_quantile(alpha: f64) -> f64 {
    -normal_quantile(alpha)
}

fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail(libm::sqrt(-2.0 * libm::log(p)))
    } else if p > 1.0 - 0.02425 {
        -tail(libm::sqrt(-2.0 * libm::log(1.0 - p)))
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Critical value of the chi-square distribution with `df` degrees of freedom
/// at level `alpha`, via the Wilson-Hilferty cube approximation.
pub fn chi_square_critical(df: usize, alpha: f64) -> f64 {
    let k = df as f64;
    let z = normal_upper_quantile(alpha);
    let a = 2.0 / (9.0 * k);
    k * libm::pow(1.0 - a + z * libm::sqrt(a), 3.0)
}

/// Whether `counts` are consistent with `probs` at level `alpha`.
pub fn chi_square_passes(counts: &[u64], probs: &[f64], alpha: f64) -> bool {
    let df = probs.iter().filter(|&&p| p > 0.0).count().saturating_sub(1).max(1);
    let observed_impossible = counts.iter().zip(probs).any(|(&c, &p)| p == 0.0 && c > 0);
    !observed_impossible && chi_square_statistic(counts, probs) <= chi_square_critical(df, alpha)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut worst: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / na - j as f64 / nb).abs());
    }
    worst
}

/// Asymptotic two-sample KS critical value at level `alpha`.
pub fn ks_critical(na: usize, nb: usize, alpha: f64) -> f64 {
    let c = libm::sqrt(-0.5 * libm::log(alpha / 2.0));
    let (na, nb) = (na as f64, nb as f64);
    c * libm::sqrt((na + nb) / (na * nb))
}
