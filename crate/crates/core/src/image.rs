//! Image and sinogram containers with their physical metadata.
//!
//! Pixel `(row, col)` of a `width × height` image with pixel size `h` has its
//! center at `x = (col − width/2 + 0.5)·h`, `y = (height/2 − row − 0.5)·h`;
//! row 0 is the top of the image and the grid is centered on the rotation axis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A real-valued image on a square pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(invalid(
                "pixel_size",
                format!("must be positive, got {pixel_size}"),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "image".into(),
                index,
            });
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_size: f64) -> Self {
        Self::filled(width, height, pixel_size, 0.0)
    }

    pub fn filled(width: usize, height: usize, pixel_size: f64, value: f64) -> Self {
        assert!(pixel_size > 0.0, "pixel_size must be positive");
        Self {
            width,
            height,
            pixel_size,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Physical coordinates of a pixel center in mm.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let h = self.pixel_size;
        (
            (col as f64 - self.width as f64 / 2.0 + 0.5) * h,
            (self.height as f64 / 2.0 - row as f64 - 0.5) * h,
        )
    }

    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Returns a copy with every value transformed by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Parallel,
    Fan,
}

/// 2D acquisition geometry.
///
/// For a view at angle `θ` let `e_s = (cos θ, sin θ)` (detector axis) and
/// `e_r = (−sin θ, cos θ)` (beam direction). Detector bin `k` of `n` sits at
/// `u_k = (k − (n−1)/2)·detector_spacing + detector_offset` along `e_s`.
/// Parallel rays are the lines `u_k·e_s + t·e_r`; fan rays run from the source
/// at `−source_to_center·e_r` to the flat detector point
/// `(source_to_detector − source_to_center)·e_r + u_k·e_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub kind: GeometryKind,
    pub angles: Vec<f64>,
    pub detector_spacing: f64,
    #[serde(default)]
    pub detector_offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_detector: Option<f64>,
}

/// Evenly spaced angles over `[0, π)` (`full_circle = false`) or `[0, 2π)`.
pub fn uniform_angles(num_views: usize, full_circle: bool) -> Vec<f64> {
    let span = if full_circle { 2.0 * PI } else { PI };
    (0..num_views)
        .map(|i| span * i as f64 / num_views as f64)
        .collect()
}

impl Geometry {
    pub fn parallel(angles: Vec<f64>, detector_spacing: f64) -> Self {
        Self {
            kind: GeometryKind::Parallel,
            angles,
            detector_spacing,
            detector_offset: 0.0,
            source_to_center: None,
            source_to_detector: None,
        }
    }

    pub fn fan(
        angles: Vec<f64>,
        detector_spacing: f64,
        source_to_center: f64,
        source_to_detector: f64,
    ) -> Self {
        Self {
            kind: GeometryKind::Fan,
            angles,
            detector_spacing,
            detector_offset: 0.0,
            source_to_center: Some(source_to_center),
            source_to_detector: Some(source_to_detector),
        }
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return Err(Error::Geometry(format!(
                "detector_spacing must be positive, got {}",
                self.detector_spacing
            )));
        }
        if !self.detector_offset.is_finite() {
            return Err(Error::Geometry("detector_offset must be finite".into()));
        }
        if self.angles.is_empty() {
            return Err(Error::Geometry("no view angles".into()));
        }
        for (i, &a) in self.angles.iter().enumerate() {
            if !(0.0..2.0 * PI).contains(&a) {
                return Err(Error::Geometry(format!("angle {i} = {a} outside [0, 2π)")));
            }
            if i > 0 && a <= self.angles[i - 1] {
                return Err(Error::Geometry(format!(
                    "angles must be strictly increasing (index {i})"
                )));
            }
        }
        if self.kind == GeometryKind::Fan {
            match (self.source_to_center, self.source_to_detector) {
                (Some(sc), Some(sd)) if 0.0 < sc && sc < sd && sd.is_finite() => {}
                (Some(sc), Some(sd)) => {
                    return Err(Error::Geometry(format!(
                        "fan geometry needs 0 < source_to_center < source_to_detector, got {sc} and {sd}"
                    )))
                }
                _ => {
                    return Err(Error::Geometry(
                        "fan geometry needs source_to_center and source_to_detector".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Detector coordinate of bin `bin` out of `num_bins`, in mm.
    pub fn bin_position(&self, bin: usize, num_bins: usize) -> f64 {
        (bin as f64 - (num_bins as f64 - 1.0) / 2.0) * self.detector_spacing + self.detector_offset
    }

    /// Ray of one (view, bin) pair as an origin, a unit direction and the
    /// admissible range of the line parameter.
    pub fn ray(&self, view: usize, bin: usize, num_bins: usize) -> Ray {
        let (sin, cos) = self.angles[view].sin_cos();
        let e_s = [cos, sin];
        let e_r = [-sin, cos];
        let u = self.bin_position(bin, num_bins);
        match self.kind {
            GeometryKind::Parallel => Ray {
                origin: [u * e_s[0], u * e_s[1]],
                dir: e_r,
                t_min: f64::NEG_INFINITY,
                t_max: f64::INFINITY,
            },
            GeometryKind::Fan => {
                let sc = self.source_to_center.unwrap_or_default();
                let sd = self.source_to_detector.unwrap_or_default();
                let src = [-sc * e_r[0], -sc * e_r[1]];
                let det = [
                    (sd - sc) * e_r[0] + u * e_s[0],
                    (sd - sc) * e_r[1] + u * e_s[1],
                ];
                let (dx, dy) = (det[0] - src[0], det[1] - src[1]);
                let len = dx.hypot(dy);
                Ray {
                    origin: src,
                    dir: [dx / len, dy / len],
                    t_min: 0.0,
                    t_max: len,
                }
            }
        }
    }
}

/// A straight ray `origin + t·dir`, `t ∈ [t_min, t_max]`, with `dir` of unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 2],
    pub dir: [f64; 2],
    pub t_min: f64,
    pub t_max: f64,
}

/// Projection data, views outer and detector bins inner.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    num_bins: usize,
    geometry: Geometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(num_bins: usize, geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if num_bins == 0 {
            return Err(Error::Shape("sinogram needs at least one bin".into()));
        }
        if data.len() != geometry.num_views() * num_bins {
            return Err(Error::Shape(format!(
                "sinogram {}x{num_bins} needs {} values, got {}",
                geometry.num_views(),
                geometry.num_views() * num_bins,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sinogram".into(),
                index,
            });
        }
        Ok(Self {
            num_bins,
            geometry,
            data,
        })
    }

    pub fn zeros(num_bins: usize, geometry: Geometry) -> Result<Self> {
        let n = geometry.num_views() * num_bins;
        Self::new(num_bins, geometry, vec![0.0; n])
    }

    pub fn num_views(&self) -> usize {
        self.geometry.num_views()
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn view(&self, view: usize) -> &[f64] {
        &self.data[view * self.num_bins..(view + 1) * self.num_bins]
    }

    /// Same geometry, values replaced.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Sinogram> {
        Sinogram::new(self.num_bins, self.geometry.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sinogram {
        Sinogram {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn congruent(&self, other: &Sinogram) -> bool {
        self.num_bins == other.num_bins && self.geometry == other.geometry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_bad_pixel_size() {
        assert!(Image2D::new(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(Image2D::new(2, 2, 0.0, vec![0.0; 4]).is_err());
        assert!(Image2D::new(1, 1, 1.0, vec![f64::NAN]).is_err());
    }

    #[test]
    fn pixel_centers_are_symmetric_about_origin() {
        let img = Image2D::zeros(4, 4, 0.5);
        assert_eq!(img.pixel_center(0, 0), (-0.75, 0.75));
        assert_eq!(img.pixel_center(3, 3), (0.75, -0.75));
    }

    #[test]
    fn geometry_validation() {
        assert!(Geometry::parallel(uniform_angles(4, false), 1.0)
            .validate()
            .is_ok());
        assert!(Geometry::parallel(vec![0.5, 0.1], 1.0).validate().is_err());
        assert!(Geometry::parallel(vec![0.0, 7.0], 1.0).validate().is_err());
        assert!(Geometry::parallel(vec![0.0], -1.0).validate().is_err());
        assert!(Geometry::fan(vec![0.0], 1.0, 10.0, 5.0).validate().is_err());
        assert!(Geometry::fan(vec![0.0], 1.0, 10.0, 20.0).validate().is_ok());
    }

    #[test]
    fn fan_central_ray_passes_through_origin() {
        let g = Geometry::fan(vec![0.3], 1.0, 100.0, 150.0);
        let r = g.ray(0, 2, 5);
        // origin + t·dir reaches (0,0) at t = source_to_center
        let p = [
            r.origin[0] + 100.0 * r.dir[0],
            r.origin[1] + 100.0 * r.dir[1],
        ];
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }
}
