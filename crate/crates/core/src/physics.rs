//! Bimodal-energy beam-hardening model.
//!
//! A single-material object of path length `d` seen by a spectrum dominated by
//! two energies with attenuation `mu1 > mu2` and spectral weight ratio `alpha`
//! produces the post-log projection
//!
//! ```text
//! p_bh(d)  = mu2·d + ln(1 + alpha) − ln(1 + alpha·exp(−(mu1 − mu2)·d))
//! p_bhc(d) = (alpha·mu1 + mu2) / (1 + alpha) · d
//! ```
//!
//! `p_bhc` is the tangent of `p_bh` at `d = 0`; linearization maps the former
//! curve back onto it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Geometry, Image2D, Sinogram};
use crate::projector::forward_project;

/// Parameters `(alpha, mu1, mu2)` of the two-energy attenuation model; `mu1`
/// and `mu2` in mm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BhParams {
    pub alpha: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl BhParams {
    /// Simulation preset with clearly visible cupping on a 15 mm disk.
    pub const CANONICAL: BhParams = BhParams {
        alpha: 2.0,
        mu1: 0.35,
        mu2: 0.12,
    };

    pub fn new(alpha: f64, mu1: f64, mu2: f64) -> Result<Self> {
        let p = Self { alpha, mu1, mu2 };
        p.validate()?;
        Ok(p)
    }

    /// Monochromatic beam: both energies attenuate equally.
    pub fn monochromatic(mu: f64) -> Self {
        Self {
            alpha: 1.0,
            mu1: mu,
            mu2: mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid(
                "alpha",
                format!("must be >= 0, got {}", self.alpha),
            ));
        }
        if !(self.mu2 > 0.0 && self.mu2.is_finite()) {
            return Err(invalid("mu2", format!("must be > 0, got {}", self.mu2)));
        }
        if !(self.mu1 >= self.mu2 && self.mu1.is_finite()) {
            return Err(invalid(
                "mu1",
                format!("must be >= mu2 = {}, got {}", self.mu2, self.mu1),
            ));
        }
        Ok(())
    }

    /// Slope of the ideal linear projection, `(alpha·mu1 + mu2)/(1 + alpha)`.
    pub fn effective_mu(&self) -> f64 {
        (self.alpha * self.mu1 + self.mu2) / (1.0 + self.alpha)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.mu1, self.mu2]
    }
}

fn check_thickness(d: f64) -> Result<()> {
    if d >= 0.0 {
        Ok(())
    } else {
        Err(invalid("d", format!("thickness must be >= 0, got {d}")))
    }
}

/// Beam-hardened projection; the caller guarantees `d >= 0`.
#[inline]
pub(crate) fn bh_projection_unchecked(d: f64, params: &BhParams) -> f64 {
    let BhParams { alpha, mu1, mu2 } = *params;
    mu2 * d + alpha.ln_1p() - (alpha * (-(mu1 - mu2) * d).exp()).ln_1p()
}

/// Beam-hardened projection of thickness `d` (mm).
pub fn bh_projection(d: f64, params: &BhParams) -> Result<f64> {
    check_thickness(d)?;
    Ok(bh_projection_unchecked(d, params))
}

/// Beam-hardening-free projection of thickness `d` (mm).
pub fn ideal_projection(d: f64, params: &BhParams) -> Result<f64> {
    check_thickness(d)?;
    Ok(params.effective_mu() * d)
}

/// Poisson transmission noise with `i0` incident photons per bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub i0: f64,
    pub seed: u64,
}

/// Replaces each projection `p` with `−ln(max(N, 1)/i0)`, `N ~ Poisson(i0·e^{−p})`.
///
/// Every bin draws from its own ChaCha stream keyed by `(seed, bin index)`, so
/// the output does not depend on the number of worker threads.
pub fn add_noise(sino: &Sinogram, i0: f64, seed: u64) -> Result<Sinogram> {
    if !(i0 > 0.0 && i0.is_finite()) {
        return Err(invalid("i0", format!("must be positive, got {i0}")));
    }
    let noisy: Vec<f64> = sino
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let lambda = i0 * (-p).exp();
            let n = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map(|dist| dist.sample(&mut rng))
                    .unwrap_or(lambda)
            } else {
                0.0
            };
            -(n.max(1.0) / i0).ln()
        })
        .collect();
    sino.with_data(noisy)
}

/// Output of [`simulate_scan`].
#[derive(Debug, Clone)]
pub struct Scan {
    pub bh: Sinogram,
    pub ideal: Sinogram,
    pub thickness: Sinogram,
}

/// Simulates a single-material scan of a support map with values in `[0, 1]`.
pub fn simulate_scan(
    support: &Image2D,
    geometry: &Geometry,
    num_bins: usize,
    params: &BhParams,
    noise: Option<NoiseSpec>,
) -> Result<Scan> {
    params.validate()?;
    if let Some(i) = support.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid(
            "support",
            format!(
                "values must lie in [0, 1]; pixel {i} is {}",
                support.data()[i]
            ),
        ));
    }
    let thickness = forward_project(support, geometry, num_bins)?;
    // Path lengths are sums of nonnegative terms, but guard against -0.0 style noise.
    let ideal = thickness.map(|d| params.effective_mu() * d.max(0.0));
    let clean = thickness.map(|d| bh_projection_unchecked(d.max(0.0), params));
    let bh = match noise {
        Some(n) => add_noise(&clean, n.i0, n.seed)?,
        None => clean,
    };
    Ok(Scan {
        bh,
        ideal,
        thickness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const EXAMPLE: BhParams = BhParams {
        alpha: 1.0,
        mu1: 0.2,
        mu2: 0.1,
    };

    #[test]
    fn zero_thickness() {
        assert_eq!(bh_projection(0.0, &EXAMPLE).unwrap(), 0.0);
        assert_eq!(ideal_projection(0.0, &EXAMPLE).unwrap(), 0.0);
    }

    #[test]
    fn negative_thickness_rejected() {
        assert!(bh_projection(-1.0, &EXAMPLE).is_err());
        assert!(ideal_projection(-1e-9, &EXAMPLE).is_err());
    }

    #[test]
    fn monochromatic_collapse() {
        for alpha in [0.0, 0.5, 3.0, 100.0] {
            let p = BhParams {
                alpha,
                mu1: 0.3,
                mu2: 0.3,
            };
            assert_relative_eq!(bh_projection(10.0, &p).unwrap(), 3.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn worked_example() {
        // 1 + ln(2 / (1 + e^-1))
        let expected = 1.0 + (2.0 / (1.0 + (-1.0f64).exp())).ln();
        assert_relative_eq!(expected, 1.379_885_493_041_722_4, max_relative = 1e-15);
        assert_relative_eq!(
            bh_projection(10.0, &EXAMPLE).unwrap(),
            expected,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            ideal_projection(10.0, &EXAMPLE).unwrap(),
            1.5,
            max_relative = 1e-15
        );
    }

    #[test]
    fn alpha_zero_is_mu2_line() {
        let p = BhParams {
            alpha: 0.0,
            mu1: 0.9,
            mu2: 0.2,
        };
        assert_relative_eq!(
            ideal_projection(7.0, &p).unwrap(),
            1.4,
            max_relative = 1e-15
        );
        assert_relative_eq!(bh_projection(7.0, &p).unwrap(), 1.4, max_relative = 1e-14);
    }

    #[test]
    fn large_alpha_does_not_overflow() {
        let p = BhParams {
            alpha: 1e300,
            mu1: 1.0,
            mu2: 0.1,
        };
        assert!(bh_projection(50.0, &p).unwrap().is_finite());
    }

    #[test]
    fn noise_is_seeded() {
        let g = Geometry::parallel(vec![0.0, 1.0], 1.0);
        let s = Sinogram::new(3, g, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let a = add_noise(&s, 1e3, 7).unwrap();
        assert_eq!(a, add_noise(&s, 1e3, 7).unwrap());
        assert_ne!(a, add_noise(&s, 1e3, 8).unwrap());
        assert!(add_noise(&s, 0.0, 7).is_err());
    }

    #[test]
    fn huge_photon_count_is_nearly_noiseless() {
        let g = Geometry::parallel(vec![0.0], 1.0);
        let values: Vec<f64> = (0..200).map(|i| i as f64 * 0.02).collect();
        let s = Sinogram::new(200, g, values.clone()).unwrap();
        let n = add_noise(&s, 1e12, 1).unwrap();
        let dev = n
            .data()
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-4, "max deviation {dev}");
    }

    #[test]
    fn zero_projection_noise_is_unbiased() {
        let g = Geometry::parallel(vec![0.0], 1.0);
        let s = Sinogram::new(100_000, g, vec![0.0; 100_000]).unwrap();
        let n = add_noise(&s, 1e4, 42).unwrap();
        let mean = n.data().iter().sum::<f64>() / n.data().len() as f64;
        assert!(mean.abs() < 3e-3, "mean {mean}");
    }
}
