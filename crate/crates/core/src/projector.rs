//! Exact ray-driven forward projection and its matched adjoint.
//!
//! Each detector bin is one ray; its intersection with the pixel grid is
//! traced with the incremental voxel walk of Amanatides and Woo, which yields
//! the exact chord length through every pixel the ray visits.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Geometry, Image2D, Ray, Sinogram};

/// Pixel grid description shared by projection routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

impl Grid {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("grid must have at least one pixel".into()));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(crate::error::invalid(
                "pixel_size",
                format!("must be positive, got {pixel_size}"),
            ));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
        })
    }

    pub fn of(image: &Image2D) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            pixel_size: image.pixel_size(),
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64) * self.pixel_size
    }
}

/// Number of detector bins that covers the grid diagonal at the given spacing.
pub fn default_num_bins(grid: &Grid, detector_spacing: f64) -> usize {
    (grid.diagonal() / detector_spacing).ceil() as usize + 2
}

/// Intersection of one ray with the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPath {
    pub t_enter: f64,
    pub t_exit: f64,
    /// `(pixel index, chord length in mm)`, in traversal order.
    pub segments: Vec<(usize, f64)>,
}

impl RayPath {
    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.1).sum()
    }
}

/// Visits every pixel crossed by `ray` with its chord length. Returns the
/// clipped parameter interval, or `None` when the ray misses the grid.
pub fn trace(ray: &Ray, grid: &Grid, mut visit: impl FnMut(usize, f64)) -> Option<(f64, f64)> {
    let h = grid.pixel_size;
    let half_w = grid.width as f64 * h / 2.0;
    let half_h = grid.height as f64 * h / 2.0;
    let [ox, oy] = ray.origin;
    let [dx, dy] = ray.dir;

    let mut t0 = ray.t_min;
    let mut t1 = ray.t_max;
    for (o, d, half) in [(ox, dx, half_w), (oy, dy, half_h)] {
        if d == 0.0 {
            if o < -half || o > half {
                return None;
            }
        } else {
            let a = (-half - o) / d;
            let b = (half - o) / d;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if !(t0 < t1) {
        return None;
    }

    let x_left = -half_w;
    let y_top = half_h;
    // Entry pixel; an entry point on a grid line at worst yields one zero-length step.
    let (px, py) = (ox + t0 * dx, oy + t0 * dy);
    let mut col = (((px - x_left) / h).floor() as isize).clamp(0, grid.width as isize - 1);
    let mut row = (((y_top - py) / h).floor() as isize).clamp(0, grid.height as isize - 1);

    let (step_c, mut t_next_x, dt_x) = if dx > 0.0 {
        (1, (x_left + (col + 1) as f64 * h - ox) / dx, h / dx)
    } else if dx < 0.0 {
        (-1, (x_left + col as f64 * h - ox) / dx, -h / dx)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    };
    // Rows grow downwards, i.e. against +y.
    let (step_r, mut t_next_y, dt_y) = if dy < 0.0 {
        (1, (y_top - (row + 1) as f64 * h - oy) / dy, -h / dy)
    } else if dy > 0.0 {
        (-1, (y_top - row as f64 * h - oy) / dy, h / dy)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    };

    let mut t = t0;
    while t < t1 {
        let t_next = t_next_x.min(t_next_y).min(t1);
        let len = t_next - t;
        if len > 0.0 {
            visit(row as usize * grid.width + col as usize, len);
        }
        t = t_next;
        if t >= t1 {
            break;
        }
        if t_next_x <= t_next_y {
            col += step_c;
            t_next_x += dt_x;
        } else {
            row += step_r;
            t_next_y += dt_y;
        }
        if col < 0 || row < 0 || col >= grid.width as isize || row >= grid.height as isize {
            break;
        }
    }
    Some((t0, t1))
}

/// Traced path of a single (view, bin) ray.
pub fn ray_path(
    geometry: &Geometry,
    num_bins: usize,
    view: usize,
    bin: usize,
    grid: &Grid,
) -> RayPath {
    let ray = geometry.ray(view, bin, num_bins);
    let mut segments = Vec::new();
    match trace(&ray, grid, |i, l| segments.push((i, l))) {
        Some((t_enter, t_exit)) => RayPath {
            t_enter,
            t_exit,
            segments,
        },
        None => RayPath {
            t_enter: 0.0,
            t_exit: 0.0,
            segments,
        },
    }
}

fn check(geometry: &Geometry, num_bins: usize) -> Result<()> {
    geometry.validate()?;
    if num_bins == 0 {
        return Err(Error::Geometry("num_bins must be positive".into()));
    }
    Ok(())
}

/// Line integrals of `image` along every ray of `geometry`.
pub fn forward_project(image: &Image2D, geometry: &Geometry, num_bins: usize) -> Result<Sinogram> {
    check(geometry, num_bins)?;
    let grid = Grid::of(image);
    let pixels = image.data();
    let mut data = vec![0.0; geometry.num_views() * num_bins];
    data.par_chunks_mut(num_bins)
        .enumerate()
        .for_each(|(view, row)| {
            for (bin, out) in row.iter_mut().enumerate() {
                let ray = geometry.ray(view, bin, num_bins);
                let mut acc = 0.0;
                trace(&ray, &grid, |i, l| acc += pixels[i] * l);
                *out = acc;
            }
        });
    Sinogram::new(num_bins, geometry.clone(), data)
}

/// Transpose of [`forward_project`] for the same discretization.
pub fn back_project(sino: &Sinogram, grid: &Grid) -> Result<Image2D> {
    let geometry = sino.geometry();
    let num_bins = sino.num_bins();
    check(geometry, num_bins)?;
    let mut out = vec![0.0; grid.len()];
    for view in 0..geometry.num_views() {
        for (bin, &value) in sino.view(view).iter().enumerate() {
            if value == 0.0 {
                continue;
            }
            let ray = geometry.ray(view, bin, num_bins);
            trace(&ray, grid, |i, l| out[i] += value * l);
        }
    }
    Image2D::new(grid.width, grid.height, grid.pixel_size, out)
}

/// Precomputed sparse projection matrix (CSR, one row per ray) for repeated
/// application inside iterative solvers.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    grid: Grid,
    geometry: Geometry,
    num_bins: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SystemMatrix {
    pub fn build(geometry: &Geometry, num_bins: usize, grid: Grid) -> Result<Self> {
        check(geometry, num_bins)?;
        let rows: Vec<Vec<(u32, f64)>> = (0..geometry.num_views() * num_bins)
            .into_par_iter()
            .map(|r| {
                let ray = geometry.ray(r / num_bins, r % num_bins, num_bins);
                let mut row = Vec::new();
                trace(&ray, &grid, |i, l| row.push((i as u32, l)));
                row
            })
            .collect();
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            grid,
            geometry: geometry.clone(),
            num_bins,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.grid.len());
        assert_eq!(y.len(), self.num_rows());
        y.par_iter_mut().enumerate().for_each(|(r, out)| {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *out = self.cols[a..b]
                .iter()
                .zip(&self.vals[a..b])
                .map(|(&c, &v)| v * x[c as usize])
                .sum();
        });
    }

    /// `x = Aᵀ y`, accumulated in row order.
    pub fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        assert_eq!(x.len(), self.grid.len());
        assert_eq!(y.len(), self.num_rows());
        x.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for (&c, &v) in self.cols[a..b].iter().zip(&self.vals[a..b]) {
                x[c as usize] += v * yr;
            }
        }
    }

    /// Sum of each row (ray length inside the grid).
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.num_rows())
            .map(|r| self.vals[self.row_ptr[r]..self.row_ptr[r + 1]].iter().sum())
            .collect()
    }

    /// Sum of each column (total ray length through each pixel).
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            out[c as usize] += v;
        }
        out
    }
}
