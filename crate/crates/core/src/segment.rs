//! Otsu thresholding and binarization.

use crate::error::{invalid, Error, Result};
use crate::image::Image2D;

pub const DEFAULT_BINS: usize = 256;

/// Histogram of `values` with `num_bins` equal bins spanning `[lo, hi]`; the
/// maximum lands in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, num_bins: usize) -> Vec<u64> {
    let width = (hi - lo) / num_bins as f64;
    let mut counts = vec![0u64; num_bins];
    for &v in values {
        let bin = ((v - lo) / width).floor();
        let bin = if bin < 0.0 {
            0
        } else {
            (bin as usize).min(num_bins - 1)
        };
        counts[bin] += 1;
    }
    counts
}

/// Threshold maximizing the between-class variance of a `num_bins` histogram
/// over `[min, max]` of the image.
///
/// Candidate thresholds are the interior bin edges `min + k·width`,
/// `k = 1..num_bins`; class 0 holds bins `< k`. The result is the left edge of
/// the first bin of the upper class. Ties resolve to the smallest `k`.
pub fn otsu_threshold(image: &Image2D, num_bins: usize) -> Result<f64> {
    if num_bins < 2 {
        return Err(invalid("num_bins", format!("must be >= 2, got {num_bins}")));
    }
    let (lo, hi) = image.min_max();
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "image is constant ({lo}); Otsu threshold is undefined"
        )));
    }
    let counts = histogram(image.data(), lo, hi, num_bins);
    let width = (hi - lo) / num_bins as f64;
    let center = |i: usize| lo + (i as f64 + 0.5) * width;

    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let total_moment: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * center(i))
        .sum();

    let mut w0 = 0.0;
    let mut m0 = 0.0;
    let mut best = (f64::NEG_INFINITY, 1);
    for k in 1..num_bins {
        w0 += counts[k - 1] as f64;
        m0 += counts[k - 1] as f64 * center(k - 1);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mean0 = m0 / w0;
        let mean1 = (total_moment - m0) / w1;
        let between = w0 * w1 * (mean0 - mean1).powi(2);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok(lo + best.1 as f64 * width)
}

/// 1 where `value > threshold`, else 0.
pub fn binarize(image: &Image2D, threshold: f64) -> Image2D {
    image.map(|v| if v > threshold { 1.0 } else { 0.0 })
}
