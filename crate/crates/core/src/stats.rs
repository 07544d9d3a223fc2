//! Ensemble reductions. Inputs arrive in member order, so every reduction here
//! is a fixed sequential computation and independent of the thread count that
//! produced the samples.

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 32;

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSummary {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Mean and standard error (`s/√n`). Data are shifted by the first sample, so
/// a constant sample yields that constant and a standard error of exactly 0.
pub fn summarize(xs: &[f64]) -> Result<SampleSummary> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::Estimation("no samples".into()));
    }
    let shift = xs[0];
    let d: Vec<f64> = xs.iter().map(|x| x - shift).collect();
    let mean_d = pairwise_sum(&d) / n as f64;
    let var = if n > 1 {
        let sq: Vec<f64> = d.iter().map(|v| (v - mean_d) * (v - mean_d)).collect();
        pairwise_sum(&sq) / (n - 1) as f64
    } else {
        0.0
    };
    Ok(SampleSummary {
        mean: shift + mean_d,
        std_error: (var / n as f64).sqrt(),
        n,
    })
}

/// `Σ num / Σ den` with a delete-one jackknife standard error.
pub fn jackknife_ratio(num: &[f64], den: &[f64]) -> Result<(f64, f64)> {
    let n = num.len();
    if n < 2 || den.len() != n {
        return Err(Error::Estimation("ratio needs at least two paired samples".into()));
    }
    let sn = pairwise_sum(num);
    let sd = pairwise_sum(den);
    let ratio = sn / sd;
    let loo: Vec<f64> = num.iter().zip(den).map(|(a, b)| (sn - a) / (sd - b)).collect();
    let mean_loo = pairwise_sum(&loo) / n as f64;
    let sq: Vec<f64> = loo.iter().map(|r| (r - mean_loo) * (r - mean_loo)).collect();
    let se = ((n - 1) as f64 / n as f64 * pairwise_sum(&sq)).sqrt();
    Ok((ratio, se))
}
