/// Arithmetic mean; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Standard error of the mean with the sample (n − 1) standard deviation;
/// 0 for fewer than two values.
pub fn sem(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Slope of the least-squares line through `(x, y)`; 0 when `x` is constant.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sem_examples() {
        assert_eq!(sem(&[0.7; 5]), 0.0);
        assert!((sem(&[0.5, 0.7]) - 0.1).abs() < 1e-12);
        assert_eq!(sem(&[0.3]), 0.0);
    }

    #[test]
    fn slope_of_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        assert!((slope(&x, &y) + 0.5).abs() < 1e-12);
        assert_eq!(slope(&[1.0, 1.0], &[0.0, 3.0]), 0.0);
    }
}
