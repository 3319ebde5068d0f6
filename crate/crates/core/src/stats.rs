//! Paired significance tests and relative-gain summaries for comparing
//! model variants subject by subject.

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("paired inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate test: paired differences have zero variance")]
    DegenerateTest,
    #[error("no valid pairs remain after excluding zero baselines")]
    NoValidPairs,
}

/// Two-sided paired t-test on `x - y` with `n - 1` degrees of freedom.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let d: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(StatsError::DegenerateTest);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok((t, p))
}

/// Paired comparison of one metric between a single-task and a multitask
/// variant: means, significance, and relative gain with a normal 95% CI.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub metric: String,
    pub mean_single: f64,
    pub mean_multi: f64,
    /// Two-sided paired t-test p-value on the raw metric values; NaN when
    /// the differences are constant.
    pub p_value: f64,
    pub relative_gain_pct: f64,
    pub ci_low_pct: f64,
    pub ci_high_pct: f64,
    /// Subjects dropped because their single-task value was exactly zero.
    pub excluded: usize,
}

/// Per-subject gain is `(multi - single)/single * 100`, sign-flipped for
/// lower-is-better metrics so an improvement always reports positive. The CI
/// is mean +- 1.96 standard errors.
pub fn relative_gain(
    metric: &str,
    single: &[f64],
    multi: &[f64],
    higher_is_better: bool,
) -> Result<ComparisonReport, StatsError> {
    if single.len() != multi.len() {
        return Err(StatsError::LengthMismatch(single.len(), multi.len()));
    }
    if single.is_empty() {
        return Err(StatsError::NoValidPairs);
    }
    let mut gains = Vec::with_capacity(single.len());
    let mut excluded = 0usize;
    for (&s, &m) in single.iter().zip(multi.iter()) {
        if s == 0.0 {
            excluded += 1;
            continue;
        }
        let g = (m - s) / s * 100.0;
        gains.push(if higher_is_better { g } else { -g });
    }
    if gains.is_empty() {
        return Err(StatsError::NoValidPairs);
    }
    let n = gains.len() as f64;
    let mean = gains.iter().sum::<f64>() / n;
    let se = if gains.len() > 1 {
        (gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    let p_value = match paired_t_test(single, multi) {
        Ok((_, p)) => p,
        Err(StatsError::DegenerateTest) | Err(StatsError::TooFewSamples(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(ComparisonReport {
        metric: metric.to_string(),
        mean_single: single.iter().sum::<f64>() / single.len() as f64,
        mean_multi: multi.iter().sum::<f64>() / multi.len() as f64,
        p_value,
        relative_gain_pct: mean,
        ci_low_pct: mean - 1.96 * se,
        ci_high_pct: mean + 1.96 * se,
        excluded,
    })
}

/// Tab-separated comparison table, one row per metric.
pub fn comparison_table(reports: &[ComparisonReport]) -> String {
    let mut out = String::from(
        "metric\tmean_single\tmean_multi\tgain_pct\tci_low_pct\tci_high_pct\tp_value\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.3}\t{:.3}\t{:.3}\t{:.4}\n",
            r.metric,
            r.mean_single,
            r.mean_multi,
            r.relative_gain_pct,
            r.ci_low_pct,
            r.ci_high_pct,
            r.p_value,
        ));
    }
    out
}
