//! Small order-statistic helpers shared by calibration and timing.

/// Nearest-rank quantile over an ascending-sorted slice: the 1-based index
/// ⌈q·n⌉, clamped into [1, n].
pub fn nearest_rank_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[idx - 1]
}

/// Median of an odd-length sample.
pub fn median_odd(values: &mut [f64]) -> f64 {
    debug_assert!(values.len() % 2 == 1);
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let v = [10.0, 20.0, 30.0, 40.0];
        assert_eq!(nearest_rank_quantile(&v, 0.5), 20.0);
        let hundred: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(nearest_rank_quantile(&hundred, 0.95), 95.0);
        assert_eq!(nearest_rank_quantile(&v, 0.0), 10.0);
        assert_eq!(nearest_rank_quantile(&v, 1.0), 40.0);
    }

    #[test]
    fn median_is_middle_order_statistic() {
        let mut v = [5.0, 1.0, 9.0, 2.0, 7.0];
        assert_eq!(median_odd(&mut v), 5.0);
    }
}
