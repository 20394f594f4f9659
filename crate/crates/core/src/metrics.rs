//! Image quality measures: PSNR, SSIM, line profiles and a cupping index.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image2D;

fn check_shapes(a: &Image2D, b: &Image2D) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "images differ in shape: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

pub fn mse(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `max − min` of an image, the default PSNR/SSIM data range.
pub fn data_range(reference: &Image2D) -> f64 {
    let (lo, hi) = reference.min_max();
    hi - lo
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(invalid(
            "data_range",
            format!("must be positive, got {data_range}"),
        ));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimParams {
    pub fn with_range(data_range: f64) -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(values: impl Iterator<Item = f64>, w: usize, h: usize) -> Vec<f64> {
    let mut table = vec![0.0; (w + 1) * (h + 1)];
    let mut it = values;
    for r in 0..h {
        let mut row_sum = 0.0;
        for c in 0..w {
            row_sum += it.next().expect("w*h values");
            table[(r + 1) * (w + 1) + c + 1] = table[r * (w + 1) + c + 1] + row_sum;
        }
    }
    table
}

fn box_sum(table: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let s = w + 1;
    table[(r + k) * s + c + k] - table[r * s + c + k] - table[(r + k) * s + c] + table[r * s + c]
}

/// Mean structural similarity over every fully contained `window × window`
/// box, with sample (N−1) local covariances.
pub fn ssim(a: &Image2D, b: &Image2D, params: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    let k = params.window;
    let (w, h) = (a.width(), a.height());
    if k.is_multiple_of(2) || k == 0 || k > w.min(h) {
        return Err(invalid(
            "window",
            format!("must be odd and at most {}, got {k}", w.min(h)),
        ));
    }
    if !(params.data_range > 0.0) {
        return Err(invalid("data_range", "must be positive"));
    }
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let (x, y) = (a.data(), b.data());
    let sx = integral(x.iter().copied(), w, h);
    let sy = integral(y.iter().copied(), w, h);
    let sxx = integral(x.iter().map(|v| v * v), w, h);
    let syy = integral(y.iter().map(|v| v * v), w, h);
    let sxy = integral(x.iter().zip(y).map(|(p, q)| p * q), w, h);

    let n = (k * k) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = box_sum(&sx, w, r, c, k) / n;
            let my = box_sum(&sy, w, r, c, k) / n;
            let vx = cov_norm * (box_sum(&sxx, w, r, c, k) / n - mx * mx);
            let vy = cov_norm * (box_sum(&syy, w, r, c, k) / n - my * my);
            let cxy = cov_norm * (box_sum(&sxy, w, r, c, k) / n - mx * my);
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `(x in mm, value)` samples along one image row.
pub fn line_profile(image: &Image2D, row: usize) -> Result<Vec<(f64, f64)>> {
    if row >= image.height() {
        return Err(invalid(
            "row",
            format!("{row} is outside an image of height {}", image.height()),
        ));
    }
    Ok((0..image.width())
        .map(|c| (image.pixel_center(row, c).0, image.get(row, c)))
        .collect())
}

/// Renders a profile as CSV with header `x_mm,value`.
pub fn profile_csv(profile: &[(f64, f64)]) -> String {
    let mut out = String::from("x_mm,value\n");
    for (x, v) in profile {
        writeln!(out, "{x},{v}").expect("write to string");
    }
    out
}

/// Squared Euclidean distance transform of a 1D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        // z[0] = −∞ stops the walk at k = 0.
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Euclidean distance, in pixels, from each pixel with `mask > 0.5` to the
/// nearest pixel outside the mask; the region beyond the image border counts
/// as outside. Pixels outside the mask get 0.
pub fn distance_to_boundary(mask: &Image2D) -> Vec<f64> {
    let (w, h) = (mask.width() + 2, mask.height() + 2);
    let big = ((w * w + h * h) as f64) * 4.0;
    let mut grid = vec![0.0; w * h];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) > 0.5 {
                grid[(r + 1) * w + c + 1] = big;
            }
        }
    }
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[r * w + c];
        }
        edt_1d(&col_in, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w], &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    let mut out = vec![0.0; mask.width() * mask.height()];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            out[r * mask.width() + c] = grid[(r + 1) * w + c + 1].sqrt();
        }
    }
    out
}

/// Inner edge of the boundary band, in pixels from the mask outline.
pub const BAND_INNER: f64 = 2.0;
/// Outer edge of the boundary band.
pub const BAND_OUTER: f64 = 6.0;

/// Ratio of the mean value in the boundary band (`2 < dist ≤ 6` pixels from
/// the mask outline) to the mean in the core (`dist ≥ max_dist / 2`).
///
/// The outermost two pixels are skipped so that partial-volume edge pixels do
/// not masquerade as cupping. A flat object scores 1; cupping scores above 1.
pub fn cupping_index(image: &Image2D, mask: &Image2D) -> Result<f64> {
    check_shapes(image, mask)?;
    let dist = distance_to_boundary(mask);
    let max_dist = dist.iter().cloned().fold(0.0, f64::max);
    let core_from = (max_dist / 2.0).max(BAND_OUTER);
    let (mut band_sum, mut band_n, mut core_sum, mut core_n) = (0.0, 0usize, 0.0, 0usize);
    for (&d, &v) in dist.iter().zip(image.data()) {
        if d > BAND_INNER && d <= BAND_OUTER {
            band_sum += v;
            band_n += 1;
        } else if d > BAND_OUTER && d >= core_from {
            core_sum += v;
            core_n += 1;
        }
    }
    if band_n == 0 || core_n == 0 {
        return Err(Error::Degenerate(format!(
            "cupping bands are empty (boundary {band_n} px, core {core_n} px); mask too thin"
        )));
    }
    Ok((band_sum / band_n as f64) / (core_sum / core_n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new(w, h, 1.0, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(16, 16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = random_image(16, 16, 2);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());
        assert!(psnr(&a, &random_image(8, 16, 2), 1.0).is_err());
    }

    #[test]
    fn psnr_drops_with_noise() {
        let a = random_image(32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..1024).map(|_| rng.gen::<f64>() - 0.5).collect();
        let values: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|&amp| {
                let mut b = a.clone();
                for (v, n) in b.data_mut().iter_mut().zip(&noise) {
                    *v += amp * n;
                }
                psnr(&a, &b, 1.0).unwrap()
            })
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2]);
    }

    #[test]
    fn ssim_cases() {
        let p = SsimParams::with_range(1.0);
        let a = random_image(20, 20, 4);
        assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
        let b = random_image(20, 20, 5);
        let s = ssim(&a, &b, &p).unwrap();
        assert_eq!(s, ssim(&b, &a, &p).unwrap());
        assert!((-1.0..=1.0).contains(&s));

        let (c1v, c2v) = (0.3, 0.7);
        let x = Image2D::filled(10, 10, 1.0, c1v);
        let y = Image2D::filled(10, 10, 1.0, c2v);
        let c1 = (0.01f64 * 1.0).powi(2);
        let expected = (2.0 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
        assert!((ssim(&x, &y, &p).unwrap() - expected).abs() < 1e-12);

        let bad = SsimParams { window: 6, ..p };
        assert!(ssim(&a, &a, &bad).is_err());
    }

    #[test]
    fn profile_shape_and_csv() {
        let img = Image2D::filled(5, 3, 0.5, 2.0);
        let prof = line_profile(&img, 1).unwrap();
        assert_eq!(prof.len(), 5);
        assert!(prof.iter().all(|p| p.1 == 2.0));
        assert_eq!(prof[0].0, -1.0);
        let csv = profile_csv(&prof);
        assert!(csv.starts_with("x_mm,value\n-1,2\n"));
        assert!(csv.ends_with('\n'));
        assert!(line_profile(&img, 3).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut mask = Image2D::zeros(23, 17, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in mask.data_mut() {
            *v = if rng.gen::<f64>() < 0.85 { 1.0 } else { 0.0 };
        }
        let d = distance_to_boundary(&mask);
        for r in 0..17i64 {
            for c in 0..23i64 {
                let mut best = f64::INFINITY;
                for rr in -1..=17i64 {
                    for cc in -1..=23i64 {
                        let outside = rr < 0
                            || cc < 0
                            || rr >= 17
                            || cc >= 23
                            || mask.get(rr as usize, cc as usize) <= 0.5;
                        if outside {
                            best = best.min((((rr - r).pow(2) + (cc - c).pow(2)) as f64).sqrt());
                        }
                    }
                }
                let got = d[(r * 23 + c) as usize];
                if mask.get(r as usize, c as usize) > 0.5 {
                    assert!((got - best).abs() < 1e-9, "({r},{c}) {got} vs {best}");
                } else {
                    assert_eq!(got, 0.0);
                }
            }
        }
    }

    #[test]
    fn cupping_of_flat_object_is_one() {
        let mask = crate::phantom::gen_disk(&crate::phantom::PhantomSpec::disk(64, 1.0, 25.0))
            .unwrap()
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let img = mask.map(|v| 0.4 * v);
        assert!((cupping_index(&img, &mask).unwrap() - 1.0).abs() < 1e-12);
        let thin = Image2D::filled(3, 3, 1.0, 1.0);
        assert!(cupping_index(&thin, &thin).is_err());
    }
}
