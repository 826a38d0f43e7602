//! Character error rate and reconstruction micro-dynamics metrics.
//!
//! The correlation, delta and flux definitions are artifact definitions:
//! Pearson correlation over flattened bins, mean absolute error of first
//! temporal differences, and mean absolute error of per-frame positively
//! rectified spectral flux.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::tensor::Mat;

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by reference length.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(input("cer is undefined for an empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus CER: total edits over total reference length.
pub fn corpus_cer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let total: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if total == 0 {
        return Err(input("cer is undefined for an empty reference"));
    }
    let edits: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mel_mae: f64,
    pub mel_corr: f64,
    pub delta_mae: f64,
    pub flux_mae: f64,
    pub duration_ratio: f64,
    /// Set when either input had zero variance and `mel_corr` was reported as 0.
    pub corr_degenerate: bool,
}

/// Metrics on the overlapping frame prefix; `duration_ratio` uses the full lengths.
pub fn mel_metrics(mel_hat: &Mat, mel_ref: &Mat) -> Result<ReconMetrics> {
    if mel_hat.rows() == 0 || mel_ref.rows() == 0 {
        return Err(input("mel metrics need non-empty spectrograms"));
    }
    if mel_hat.cols() != mel_ref.cols() {
        return Err(input(format!("band count mismatch {} vs {}", mel_hat.cols(), mel_ref.cols())));
    }
    let t = mel_hat.rows().min(mel_ref.rows());
    let f = mel_ref.cols();
    let (h, r) = (&mel_hat.data()[..t * f], &mel_ref.data()[..t * f]);
    let n = (t * f) as f64;
    let mel_mae = h.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (mel_corr, corr_degenerate) = match pearson(h, r) {
        Some(c) => (c, false),
        None => (0.0, true),
    };
    let (mut delta_sum, mut flux_sum) = (0.0, 0.0);
    for ti in 1..t {
        let (mut fh, mut fr) = (0.0, 0.0);
        for fi in 0..f {
            let dh = h[ti * f + fi] - h[(ti - 1) * f + fi];
            let dr = r[ti * f + fi] - r[(ti - 1) * f + fi];
            delta_sum += (dh - dr).abs();
            fh += dh.max(0.0);
            fr += dr.max(0.0);
        }
        flux_sum += ((fh - fr) / f as f64).abs();
    }
    let (delta_mae, flux_mae) =
        if t > 1 { (delta_sum / ((t - 1) * f) as f64, flux_sum / (t - 1) as f64) } else { (0.0, 0.0) };
    Ok(ReconMetrics {
        mel_mae,
        mel_corr,
        delta_mae,
        flux_mae,
        duration_ratio: mel_hat.rows() as f64 / mel_ref.rows() as f64,
        corr_degenerate,
    })
}

/// `None` when either side has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    // sqrt of a rounded square is exact, so identical inputs give exactly 1.
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quantile `p` by linear interpolation between order statistics at position `p * (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(input("cannot aggregate an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles { q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mel_mae: Quartiles,
    pub mel_corr: Quartiles,
    pub delta_mae: Quartiles,
    pub flux_mae: Quartiles,
    pub duration_ratio: Quartiles,
}

pub fn aggregate(reports: &[ReconMetrics]) -> Result<AggregateReport> {
    let q = |f: fn(&ReconMetrics) -> f64| quartiles(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        mel_mae: q(|m| m.mel_mae)?,
        mel_corr: q(|m| m.mel_corr)?,
        delta_mae: q(|m| m.delta_mae)?,
        flux_mae: q(|m| m.flux_mae)?,
        duration_ratio: q(|m| m.duration_ratio)?,
    })
}
