use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); zero for a single value.
    pub std: f64,
    pub count: usize,
}

/// Per-k mean and std over the repetitions that reached that k.
pub fn summarize(ks: &[usize], traces: &[&[f64]]) -> Vec<SummaryRow> {
    ks.iter()
        .enumerate()
        .filter_map(|(idx, &k)| {
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.get(idx).copied()).collect();
            if vals.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&vals);
            Some(SummaryRow { k, mean, std, count: vals.len() })
        })
        .collect()
}

pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Ordinary least squares of `log error` on `log k`.
fn log_log_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 10 {
        return Err(Error::InvalidTrace(format!("slope fit needs at least 10 points, got {}", points.len())));
    }
    if let Some((k, e)) = points.iter().find(|(k, e)| !(*k > 0.0 && *e > 0.0)) {
        return Err(Error::InvalidTrace(format!("nonpositive point (k = {k}, error = {e})")));
    }
    let xs: Vec<f64> = points.iter().map(|(k, _)| k.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (sse / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, stderr, intercept, points: points.len() })
}

/// Fit over the final `tail_fraction` of the trace.
pub fn slope_fit(trace: &[(f64, f64)], tail_fraction: f64) -> Result<SlopeFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidTrace(format!("tail fraction {tail_fraction} not in (0, 1]")));
    }
    let take = ((trace.len() as f64) * tail_fraction).ceil() as usize;
    log_log_fit(&trace[trace.len() - take..])
}

/// Fit over the points with `lo ≤ k ≤ hi`.
pub fn slope_fit_range(trace: &[(f64, f64)], lo: f64, hi: f64) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = trace.iter().copied().filter(|(k, _)| *k >= lo && *k <= hi).collect();
    log_log_fit(&pts)
}
