//! Small summary statistics shared by the tables and acceptance checks.

/// Mean, sample standard deviation and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    /// Delta-method standard error of `std`.
    pub std_stderr: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, std: f64::NAN, stderr: f64::NAN, std_stderr: f64::NAN };
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    if n < 2 {
        return Summary { n, mean, std: 0.0, stderr: 0.0, std_stderr: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();
    // Var(s²) ≈ (m4 − (n−3)/(n−1)·σ⁴)/n, then SE(s) ≈ SE(s²)/(2s).
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    let var_of_var = ((m4 - (nf - 3.0) / (nf - 1.0) * var * var) / nf).max(0.0);
    let std_stderr = if std > 0.0 { var_of_var.sqrt() / (2.0 * std) } else { 0.0 };
    Summary { n, mean, std, stderr: std / nf.sqrt(), std_stderr }
}

/// `a − b` exceeds `k` combined standard errors.
pub fn exceeds_by(a: f64, se_a: f64, b: f64, se_b: f64, k: f64) -> bool {
    a - b > k * (se_a * se_a + se_b * se_b).sqrt()
}
