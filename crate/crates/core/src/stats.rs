//! Small order-statistics helpers shared across the pipeline.

use crate::error::{Error, Result};

/// Percentile of a sample with linear interpolation between order statistics.
///
/// `p` is in percent (0 to 100). The rank is `p/100 * (n-1)`; fractional ranks
/// interpolate between the two neighboring sorted values. Input need not be
/// sorted; non-finite values must be filtered by the caller.
///
/// Panics if `values` is empty or `p` is outside [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    assert!((0.0..=100.0).contains(&p), "percentile {p} out of range");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in percentile"));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Arithmetic mean. Panics on an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of empty sample");
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fills entries whose `known` flag is false by linear interpolation
/// between the nearest known neighbors, extending the end values outward.
pub fn fill_missing_linear(values: &mut [f64], known: &[bool]) -> Result<()> {
    assert_eq!(
        values.len(),
        known.len(),
        "values and known flags must align: {} vs {}",
        values.len(),
        known.len()
    );
    let idx: Vec<usize> = (0..values.len()).filter(|&i| known[i]).collect();
    if idx.is_empty() {
        return Err(Error::InsufficientData(
            "no known bins to interpolate from".into(),
        ));
    }
    for i in 0..values.len() {
        if known[i] {
            continue;
        }
        let next = idx.partition_point(|&j| j < i);
        values[i] = if next == 0 {
            values[idx[0]]
        } else if next == idx.len() {
            values[idx[idx.len() - 1]]
        } else {
            let (a, b) = (idx[next - 1], idx[next]);
            let t = (i - a) as f64 / (b - a) as f64;
            values[a] * (1.0 - t) + values[b] * t
        };
    }
    Ok(())
}
