//! Box-plot statistics over seeds.

use serde::{Deserialize, Serialize};

/// Five-number summary with Tukey whiskers. Quartiles use linear
/// interpolation between order statistics (Hyndman and Fan type 7).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Smallest sample at or above `q1 - 1.5 IQR`.
    pub whisker_lo: f64,
    /// Largest sample at or below `q3 + 1.5 IQR`.
    pub whisker_hi: f64,
}

/// Type-7 quantile of an ascending, nonempty slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    /// `None` for an empty sample.
    pub fn of(samples: &[f64]) -> Option<BoxStats> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
        let reach = 1.5 * (q3 - q1);
        Some(BoxStats {
            n: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            q1,
            median: quantile(&s, 0.5),
            q3,
            max: s[s.len() - 1],
            whisker_lo: *s.iter().find(|&&v| v >= q1 - reach).expect("q1 lies within the sample range"),
            whisker_hi: *s.iter().rev().find(|&&v| v <= q3 + reach).expect("q3 lies within the sample range"),
        })
    }
}

/// Mean, minimum and maximum of a nonempty sample.
pub fn mean_min_max(samples: &[f64]) -> Option<(f64, f64, f64)> {
    if samples.is_empty() {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, min, max))
}
