//! Filtered backprojection, SIRT, and view subsampling.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{GeometryKind, Image2D, Sinogram};
use crate::projector::{Grid, SystemMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterWindow {
    #[default]
    Ramlak,
    Hann,
}

/// Band-limited ramp kernel `h[n]` for sample spacing `tau`, `n = -(len-1)..=len-1`
/// stored with `h[0]` at index `len - 1`.
pub fn ramp_kernel(len: usize, tau: f64, window: FilterWindow) -> Vec<f64> {
    let size = 2 * len - 1;
    let mid = len as isize - 1;
    let ramp = |n: isize| -> f64 {
        if n == 0 {
            1.0 / (4.0 * tau * tau)
        } else if n % 2 == 0 {
            0.0
        } else {
            -1.0 / (PI * PI * (n * n) as f64 * tau * tau)
        }
    };
    (0..size as isize)
        .map(|i| {
            let n = i - mid;
            match window {
                FilterWindow::Ramlak => ramp(n),
                // Spatial [1/4, 1/2, 1/4] smoothing is the Hann window cos²(πfτ) in frequency.
                FilterWindow::Hann => 0.25 * ramp(n - 1) + 0.5 * ramp(n) + 0.25 * ramp(n + 1),
            }
        })
        .collect()
}

/// Discrete convolution `out[k] = tau · Σ_m h[k − m]·row[m]` (zero outside the row).
fn filter_row(row: &[f64], kernel: &[f64], tau: f64, out: &mut [f64]) {
    let n = row.len();
    let mid = n - 1;
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (m, &v) in row.iter().enumerate() {
            if v != 0.0 {
                acc += kernel[mid + k - m] * v;
            }
        }
        *o = acc * tau;
    }
}

/// Linear interpolation of `row` at fractional index `f`; zero outside.
#[inline]
fn sample(row: &[f64], f: f64) -> f64 {
    if f < 0.0 || f > (row.len() - 1) as f64 {
        return 0.0;
    }
    let i = f.floor() as usize;
    if i + 1 >= row.len() {
        return row[row.len() - 1];
    }
    let t = f - i as f64;
    row[i] * (1.0 - t) + row[i + 1] * t
}

/// Filtered backprojection onto a `width × height` grid.
///
/// Views are assumed evenly spread over a half turn (parallel) or a full turn
/// (either geometry); the result is scaled by `π / num_views`. Fan data are
/// rebinned onto a virtual detector through the rotation axis, cosine
/// weighted, ramp filtered, and backprojected with the `1/U²` distance weight.
pub fn fbp(
    sino: &Sinogram,
    width: usize,
    height: usize,
    pixel_size: f64,
    window: FilterWindow,
) -> Result<Image2D> {
    let geometry = sino.geometry();
    geometry.validate()?;
    if sino.num_views() < 2 {
        return Err(invalid(
            "sinogram",
            format!("needs >= 2 views, got {}", sino.num_views()),
        ));
    }
    let grid = Grid::new(width, height, pixel_size)?;
    let n = sino.num_bins();

    // Magnification onto the virtual detector through the rotation axis.
    let (scale, sc) = match geometry.kind {
        GeometryKind::Parallel => (1.0, f64::INFINITY),
        GeometryKind::Fan => {
            let sc = geometry.source_to_center.unwrap_or_default();
            let sd = geometry.source_to_detector.unwrap_or_default();
            (sc / sd, sc)
        }
    };
    let tau = geometry.detector_spacing * scale;
    let offset = geometry.detector_offset * scale;
    let center_index = (n as f64 - 1.0) / 2.0;
    let kernel = ramp_kernel(n, tau, window);

    let filtered: Vec<Vec<f64>> = (0..sino.num_views())
        .into_par_iter()
        .map(|v| {
            let raw = sino.view(v);
            let weighted: Vec<f64> = match geometry.kind {
                GeometryKind::Parallel => raw.to_vec(),
                GeometryKind::Fan => raw
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let u = (k as f64 - center_index) * tau + offset;
                        p * sc / (sc * sc + u * u).sqrt()
                    })
                    .collect(),
            };
            let mut q = vec![0.0; n];
            filter_row(&weighted, &kernel, tau, &mut q);
            q
        })
        .collect();

    let trig: Vec<(f64, f64)> = geometry.angles.iter().map(|a| a.sin_cos()).collect();
    let weight = PI / sino.num_views() as f64;
    let probe = Image2D::zeros(width, height, pixel_size);
    let mut data = vec![0.0; grid.len()];
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, px) in out.iter_mut().enumerate() {
                let (x, y) = probe.pixel_center(row, col);
                let mut acc = 0.0;
                for (q, &(sin, cos)) in filtered.iter().zip(&trig) {
                    let s = x * cos + y * sin;
                    match geometry.kind {
                        GeometryKind::Parallel => {
                            acc += sample(q, (s - offset) / tau + center_index);
                        }
                        GeometryKind::Fan => {
                            let depth = sc + (-x * sin + y * cos);
                            let u = sc * s / depth;
                            let w = (sc / depth).powi(2);
                            acc += w * sample(q, (u - offset) / tau + center_index);
                        }
                    }
                }
                *px = acc * weight;
            }
        });
    Image2D::new(width, height, pixel_size, data)
}

/// Result of a SIRT run.
#[derive(Debug, Clone)]
pub struct SirtOutput {
    pub image: Image2D,
    /// `‖b − A x_k‖₂` after each iteration `k = 1..=iters`.
    pub residuals: Vec<f64>,
}

/// SIRT on a prebuilt projection matrix.
///
/// `x ← x + C·Aᵀ·R·(b − A x)` with `R`, `C` the inverse row and column sums of
/// `A`, starting from zero. With `nonneg` every iterate is clamped at zero.
pub fn sirt_with_matrix(
    matrix: &SystemMatrix,
    sino: &[f64],
    iters: usize,
    nonneg: bool,
) -> Result<SirtOutput> {
    if iters == 0 {
        return Err(invalid("iters", "must be >= 1"));
    }
    if sino.len() != matrix.num_rows() {
        return Err(Error::Shape(format!(
            "sinogram has {} values, projector expects {}",
            sino.len(),
            matrix.num_rows()
        )));
    }
    let inv = |s: f64| if s > 0.0 { 1.0 / s } else { 0.0 };
    let r: Vec<f64> = matrix.row_sums().into_iter().map(inv).collect();
    let c: Vec<f64> = matrix.col_sums().into_iter().map(inv).collect();
    let grid = matrix.grid();

    let mut x = vec![0.0; grid.len()];
    let mut ax = vec![0.0; sino.len()];
    let mut resid = sino.to_vec();
    let mut update = vec![0.0; grid.len()];
    let mut residuals = Vec::with_capacity(iters);
    for _ in 0..iters {
        // `resid` holds b − A x on entry.
        for (e, &ri) in resid.iter_mut().zip(&r) {
            *e *= ri;
        }
        matrix.apply_transpose(&resid, &mut update);
        for ((xi, &ui), &ci) in x.iter_mut().zip(&update).zip(&c) {
            *xi += ci * ui;
            if nonneg && *xi < 0.0 {
                *xi = 0.0;
            }
        }
        matrix.apply(&x, &mut ax);
        let mut norm = 0.0;
        for ((e, &bi), &axi) in resid.iter_mut().zip(sino).zip(&ax) {
            *e = bi - axi;
            norm += *e * *e;
        }
        residuals.push(norm.sqrt());
    }
    Ok(SirtOutput {
        image: Image2D::new(grid.width, grid.height, grid.pixel_size, x)?,
        residuals,
    })
}

/// SIRT reconstruction onto a `width × height` grid.
pub fn sirt(
    sino: &Sinogram,
    width: usize,
    height: usize,
    pixel_size: f64,
    iters: usize,
    nonneg: bool,
) -> Result<SirtOutput> {
    let grid = Grid::new(width, height, pixel_size)?;
    let matrix = SystemMatrix::build(sino.geometry(), sino.num_bins(), grid)?;
    sirt_with_matrix(&matrix, sino.data(), iters, nonneg)
}

/// Keeps views `0, factor, 2·factor, …`.
pub fn subsample_views(sino: &Sinogram, factor: usize) -> Result<Sinogram> {
    if factor == 0 {
        return Err(invalid("factor", "must be >= 1"));
    }
    if factor > sino.num_views() {
        return Err(invalid(
            "factor",
            format!(
                "{factor} exceeds the number of views ({})",
                sino.num_views()
            ),
        ));
    }
    let mut geometry = sino.geometry().clone();
    let keep: Vec<usize> = (0..sino.num_views()).step_by(factor).collect();
    geometry.angles = keep.iter().map(|&v| sino.geometry().angles[v]).collect();
    let data = keep
        .iter()
        .flat_map(|&v| sino.view(v).iter().copied())
        .collect();
    Sinogram::new(sino.num_bins(), geometry, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{uniform_angles, Geometry};

    fn sino(views: usize) -> Sinogram {
        let g = Geometry::parallel(uniform_angles(views, false), 1.0);
        let data = (0..views * 4).map(|i| i as f64).collect();
        Sinogram::new(4, g, data).unwrap()
    }

    #[test]
    fn subsample_arithmetic() {
        let s = sino(360);
        assert_eq!(subsample_views(&s, 1).unwrap(), s);
        let q = subsample_views(&s, 4).unwrap();
        assert_eq!(q.num_views(), 90);
        assert_eq!(q.geometry().angles[1], s.geometry().angles[4]);
        assert_eq!(q.view(2), s.view(8));
        assert_eq!(subsample_views(&sino(500), 3).unwrap().num_views(), 167);
        assert!(subsample_views(&s, 361).is_err());
        assert!(subsample_views(&s, 0).is_err());
    }

    #[test]
    fn ramp_kernel_values() {
        let h = ramp_kernel(4, 0.5, FilterWindow::Ramlak);
        assert_eq!(h.len(), 7);
        assert_eq!(h[3], 1.0);
        assert_eq!(h[1], 0.0);
        assert!((h[2] + 4.0 / (PI * PI)).abs() < 1e-15);
        // The Hann kernel sums to zero like the ramp (zero DC gain) up to truncation.
        let hann = ramp_kernel(200, 1.0, FilterWindow::Hann);
        assert!(hann.iter().sum::<f64>().abs() < 5e-3);
    }

    #[test]
    fn zero_sinogram_reconstructs_to_zero() {
        let g = Geometry::parallel(uniform_angles(8, false), 1.0);
        let s = Sinogram::zeros(12, g).unwrap();
        let img = fbp(&s, 8, 8, 1.0, FilterWindow::Hann).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        let out = sirt(&s, 8, 8, 1.0, 5, true).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fbp_needs_two_views() {
        let g = Geometry::parallel(vec![0.0], 1.0);
        let s = Sinogram::zeros(4, g).unwrap();
        assert!(fbp(&s, 4, 4, 1.0, FilterWindow::Ramlak).is_err());
    }

    #[test]
    fn sirt_rejects_zero_iterations() {
        let s = sino(4);
        assert!(sirt(&s, 2, 2, 1.0, 0, false).is_err());
    }
}
