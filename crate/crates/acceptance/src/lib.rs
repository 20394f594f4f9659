//! Shared scenarios for the acceptance suite.

use bhct::bhcn::{apply_correction, fit_linearization};
use bhct::phantom::{Feature, PhantomSpec};
use bhct::physics::simulate_scan;
use bhct::projector::{default_num_bins, Grid};
use bhct::recon::{fbp, sirt, subsample_views, FilterWindow};
use bhct::{uniform_angles, BhParams, Geometry, Image2D, NoiseSpec, Result, Sinogram};

/// Component phantom filling about 70% of the field of view.
pub fn component_spec(size: usize, pixel_size: f64, seed: u64) -> PhantomSpec {
    PhantomSpec {
        num_pores: 4,
        pore_radius_range: (0.15, 0.4),
        feature_set: vec![Feature::Fins, Feature::Rods, Feature::Notches],
        seed,
        ..PhantomSpec::disk(size, pixel_size, 0.36 * size as f64 * pixel_size)
    }
}

pub fn parallel_geometry(views: usize, spacing: f64) -> Geometry {
    Geometry::parallel(uniform_angles(views, false), spacing)
}

pub fn bins_for(support: &Image2D, spacing: f64) -> usize {
    default_num_bins(&Grid::of(support), spacing)
}

pub fn max_value(s: &Sinogram) -> f64 {
    s.data().iter().cloned().fold(0.0, f64::max)
}

/// Beam-hardened scan linearized with the simulation's own parameters.
pub fn truth_corrected_scan(
    support: &Image2D,
    views: usize,
    params: &BhParams,
    noise: Option<NoiseSpec>,
) -> Result<Sinogram> {
    let h = support.pixel_size();
    let g = parallel_geometry(views, h);
    let scan = simulate_scan(support, &g, bins_for(support, h), params, noise)?;
    let poly = fit_linearization(params, 1.25 * max_value(&scan.thickness), 5)?;
    Ok(apply_correction(&scan.bh, &poly).sino)
}

/// Sparse-view FBP inputs for each factor plus the dense-view SIRT target.
pub fn sparse_dense_set(
    corrected: &Sinogram,
    size: usize,
    pixel_size: f64,
    factors: &[usize],
    sirt_iters: usize,
) -> Result<(Vec<(usize, Image2D)>, Image2D)> {
    let target = sirt(corrected, size, size, pixel_size, sirt_iters, true)?.image;
    let inputs = factors
        .iter()
        .map(|&f| {
            let sparse = subsample_views(corrected, f)?;
            Ok((
                f,
                fbp(&sparse, size, size, pixel_size, FilterWindow::Ramlak)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, target))
}

/// Squared Pearson correlation.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy * sxy / (sxx * syy)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn binary_mask(support: &Image2D) -> Image2D {
    support.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}
