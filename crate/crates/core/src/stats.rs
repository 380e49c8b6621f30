//! Descriptive statistics over seed groups and the Kruskal-Wallis H test
//! with mid-rank tie correction and chi-square p-values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test accuracies of one model variant across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSample {
    pub label: String,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }
}

/// Which divisor the standard deviation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divisor n.
    #[default]
    Population,
    /// Divisor n - 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg: f64,
    pub max: f64,
    pub std: f64,
}

/// Arithmetic mean, maximum, and standard deviation (population divisor by
/// default).
pub fn summarize(values: &[f64]) -> Result<Summary> {
    summarize_with(values, StdKind::Population)
}

pub fn summarize_with(values: &[f64], kind: StdKind) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Domain("summarize of an empty sample".into()));
    }
    let n = values.len() as f64;
    let avg = values.iter().sum::<f64>() / n;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ss: f64 = values.iter().map(|v| (v - avg) * (v - avg)).sum();
    let divisor = match kind {
        StdKind::Population => n,
        StdKind::Sample => (n - 1.0).max(1.0),
    };
    Ok(Summary {
        avg,
        max,
        std: (ss / divisor).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HTestResult {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
    pub tie_correction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    Significant,
    NotSignificant,
}

/// Significant iff p < alpha (strict).
pub fn significance_flag(result: &HTestResult, alpha: f64) -> Significance {
    if result.p_value < alpha {
        Significance::Significant
    } else {
        Significance::NotSignificant
    }
}

/// Kruskal-Wallis H test over two or more independent groups.
///
/// Pooled mid-rank assignment (tied runs share the average rank), then
/// H = [12/(N(N+1)) * sum R_i^2/n_i - 3(N+1)] / (1 - sum(t^3-t)/(N^3-N)).
/// The p-value is the chi-square survival at H with g-1 degrees of freedom.
/// When every pooled value is identical the statistic is defined as H = 0
/// with p = 1 (the tie-correction denominator vanishes).
pub fn kruskal_wallis(groups: &[GroupSample]) -> Result<HTestResult> {
    if groups.len() < 2 {
        return Err(Error::Domain(format!(
            "kruskal_wallis needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    for g in groups {
        if g.values.is_empty() {
            return Err(Error::Domain(format!("group '{}' is empty", g.label)));
        }
        if let Some(v) = g.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "group '{}' contains non-finite value {v}",
                g.label
            )));
        }
    }
    let n_total: usize = groups.iter().map(|g| g.values.len()).sum();
    if n_total < 3 {
        return Err(Error::Domain(format!(
            "kruskal_wallis needs at least 3 pooled values, got {n_total}"
        )));
    }

    // Pool (value, group) pairs and sort by value.
    let mut pooled: Vec<(f64, usize)> = Vec::with_capacity(n_total);
    for (gi, g) in groups.iter().enumerate() {
        pooled.extend(g.values.iter().map(|&v| (v, gi)));
    }
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values"));

    let (per_group_rank_sums, tie_term) = mid_rank_sums(&pooled, groups.len());
    let rank_sums = per_group_rank_sums;

    let n = n_total as f64;
    let correction = 1.0 - tie_term / (n * n * n - n);
    let df = groups.len() - 1;
    if correction <= 0.0 {
        // All pooled values identical: no separation at all.
        return Ok(HTestResult {
            h: 0.0,
            df,
            p_value: 1.0,
            tie_correction: 0.0,
        });
    }

    let mut sum_r2 = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        sum_r2 += rank_sums[gi] * rank_sums[gi] / g.values.len() as f64;
    }
    let h_raw = 12.0 / (n * (n + 1.0)) * sum_r2 - 3.0 * (n + 1.0);
    let h = h_raw / correction;
    Ok(HTestResult {
        h,
        df,
        p_value: chi_square_sf(h.max(0.0), df),
        tie_correction: correction,
    })
}

/// Per-group rank sums under pooled mid-rank assignment (tied runs share
/// the average 1-based rank), plus the tie term sum(t^3 - t). The rank
/// sums always total N(N+1)/2 exactly. `pooled` must be sorted by value.
fn mid_rank_sums(pooled: &[(f64, usize)], group_count: usize) -> (Vec<f64>, f64) {
    let n = pooled.len();
    let mut rank_sums = vec![0.0f64; group_count];
    let mut tie_term = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let run = (j - i) as f64;
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for k in i..j {
            rank_sums[pooled[k].1] += mid_rank;
        }
        tie_term += run * run * run - run;
        i = j;
    }
    (rank_sums, tie_term)
}

/// Survival function of the chi-square law: 1 - P(df/2, x/2) where P is
/// the regularized lower incomplete gamma, via the series expansion for
/// small arguments and a continued fraction otherwise. Absolute error is
/// well below 1e-10 over the tested range.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    assert!(x >= 0.0, "chi_square_sf needs x >= 0, got {x}");
    assert!(df >= 1, "chi_square_sf needs df >= 1");
    let a = df as f64 / 2.0;
    let x = x / 2.0;
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - lower_gamma_series(a, x)
    } else {
        upper_gamma_cf(a, x)
    }
}

/// Regularized lower incomplete gamma P(a, x) by series expansion;
/// converges fast for x < a + 1.
fn lower_gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..500 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by Lentz's continued
/// fraction; converges fast for x >= a + 1.
fn upper_gamma_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Lanczos approximation of ln Gamma, g=7, n=9.
#[allow(clippy::excessive_precision)]
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
