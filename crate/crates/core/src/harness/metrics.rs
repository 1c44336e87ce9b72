//! Repeated-sampling accuracy measures, in percent of the true value.

use crate::error::{Result, SaeError};

fn check(estimates: &[f64], truth: f64) -> Result<()> {
    if truth == 0.0 || !truth.is_finite() {
        return Err(SaeError::invalid(format!("relative measures need a finite nonzero truth, got {truth}")));
    }
    if estimates.is_empty() {
        return Err(SaeError::invalid("relative measures need at least one estimate"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `100 * mean(estimates) / truth - 100`.
pub fn relative_bias(estimates: &[f64], truth: f64) -> Result<f64> {
    check(estimates, truth)?;
    Ok(100.0 * (mean(estimates) - truth) / truth)
}

/// `100 * sqrt(mean((estimate - truth)^2)) / |truth|`.
///
/// Computed as the hypotenuse of the bias and spread parts so that
/// `rrmse >= |rb|` holds in floating point too.
pub fn relative_rrmse(estimates: &[f64], truth: f64) -> Result<f64> {
    check(estimates, truth)?;
    let m = mean(estimates);
    let var = estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / estimates.len() as f64;
    let rb = 100.0 * (m - truth) / truth;
    Ok(rb.hypot(100.0 * var.sqrt() / truth.abs()))
}

/// Median of the finite values; NaN when there are none.
pub fn finite_median(v: &[f64]) -> f64 {
    let mut f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        return f64::NAN;
    }
    crate::linalg::median_in_place(&mut f)
}

/// Mean of the finite values; NaN when there are none.
pub fn finite_mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        return f64::NAN;
    }
    mean(&f)
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(SaeError::invalid("rank correlation needs two equal-length series of length >= 2"));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let (ma, mb) = (mean(&ra), mean(&rb));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(SaeError::invalid("rank correlation of a constant series"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// True when the sequence changes direction at most once.
pub fn unimodal_or_monotone(v: &[f64]) -> bool {
    let mut last = 0i8;
    let mut turns = 0;
    for w in v.windows(2) {
        let s = match w[1].partial_cmp(&w[0]) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => -1,
            _ => 0,
        };
        if s != 0 {
            if last != 0 && s != last {
                turns += 1;
            }
            last = s;
        }
    }
    turns <= 1
}
