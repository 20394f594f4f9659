//! Synthetic single-material test objects.
//!
//! Phantoms are support maps in `[0, 1]` (fraction of each pixel covered by
//! material); attenuation is applied later by the beam-hardening model.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image2D;

/// Sub-samples per pixel side used for area-weighted anti-aliasing.
const SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    /// Thin rectangular plates sticking out of the base.
    Fins,
    /// Round bosses straddling the base outline.
    Rods,
    /// Rectangular cuts into the base outline.
    Notches,
}

fn default_pore_range() -> (f64, f64) {
    (0.2, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub pixel_size: f64,
    pub base_radius: f64,
    /// Monochromatic reference attenuation (mm⁻¹); a label only.
    #[serde(default)]
    pub mu_material: f64,
    #[serde(default)]
    pub num_pores: usize,
    #[serde(default = "default_pore_range")]
    pub pore_radius_range: (f64, f64),
    #[serde(default)]
    pub feature_set: Vec<Feature>,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    /// Plain centered disk: no pores, no outline features.
    pub fn disk(image_size: usize, pixel_size: f64, base_radius: f64) -> Self {
        Self {
            image_size,
            pixel_size,
            base_radius,
            mu_material: 0.0,
            num_pores: 0,
            pore_radius_range: default_pore_range(),
            feature_set: Vec::new(),
            seed: 0,
        }
    }

    pub fn half_extent(&self) -> f64 {
        self.image_size as f64 * self.pixel_size / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(invalid("image_size", "must be positive"));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(invalid(
                "pixel_size",
                format!("must be positive, got {}", self.pixel_size),
            ));
        }
        if !(self.base_radius >= 0.0 && self.base_radius < self.half_extent()) {
            return Err(invalid(
                "base_radius",
                format!(
                    "must lie in [0, {}) for a {}-pixel grid of {} mm pixels, got {}",
                    self.half_extent(),
                    self.image_size,
                    self.pixel_size,
                    self.base_radius
                ),
            ));
        }
        if self.num_pores > 0 {
            let (lo, hi) = self.pore_radius_range;
            if !(lo > 0.0 && lo <= hi && hi < self.base_radius / 4.0) {
                return Err(invalid(
                    "pore_radius_range",
                    format!(
                        "needs 0 < lo <= hi < base_radius/4 = {}, got ({lo}, {hi})",
                        self.base_radius / 4.0
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    /// Rectangle centered at `(cx, cy)` with half sizes `(a, b)` along the
    /// rotated axes `(cos θ, sin θ)` and `(−sin θ, cos θ)`.
    Rect {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect {
                cx,
                cy,
                a,
                b,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u.abs() <= a && v.abs() <= b
            }
        }
    }

    /// Rectangle running radially from radius `r0` to `r1` at angle `theta`.
    fn radial_rect(theta: f64, r0: f64, r1: f64, half_width: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        let rc = 0.5 * (r0 + r1);
        Shape::Rect {
            cx: rc * cos,
            cy: rc * sin,
            a: 0.5 * (r1 - r0),
            b: half_width,
            cos,
            sin,
        }
    }
}

struct Layout {
    solids: Vec<Shape>,
    voids: Vec<Shape>,
}

impl Layout {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.solids.iter().any(|s| s.contains(x, y)) && !self.voids.iter().any(|s| s.contains(x, y))
    }

    fn rasterize(&self, spec: &PhantomSpec) -> Image2D {
        let n = spec.image_size;
        let h = spec.pixel_size;
        let half = spec.half_extent();
        let sub = h / SUPERSAMPLE as f64;
        let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
            let y_top = half - row as f64 * h;
            for (col, px) in out.iter_mut().enumerate() {
                let x_left = -half + col as f64 * h;
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    let y = y_top - (sy as f64 + 0.5) * sub;
                    for sx in 0..SUPERSAMPLE {
                        let x = x_left + (sx as f64 + 0.5) * sub;
                        if self.contains(x, y) {
                            hits += 1;
                        }
                    }
                }
                *px = hits as f64 * weight;
            }
        });
        Image2D::new(n, n, h, data).expect("rasterized phantom is well-formed")
    }
}

/// Centered disk of radius `base_radius`, anti-aliased by pixel coverage.
pub fn gen_disk(spec: &PhantomSpec) -> Result<Image2D> {
    spec.validate()?;
    let layout = Layout {
        solids: vec![Shape::Disk {
            cx: 0.0,
            cy: 0.0,
            r: spec.base_radius,
        }],
        voids: Vec::new(),
    };
    Ok(layout.rasterize(spec))
}

/// Disk base with seeded fins, rods, notches and non-overlapping circular pores.
pub fn gen_component(spec: &PhantomSpec) -> Result<Image2D> {
    spec.validate()?;
    let r = spec.base_radius;
    let h = spec.pixel_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut solids = vec![Shape::Disk {
        cx: 0.0,
        cy: 0.0,
        r,
    }];
    let mut voids = Vec::new();
    // Room left between the base outline and the image border.
    let room = spec.half_extent() - r - 2.0 * h;

    let mut features = spec.feature_set.clone();
    features.sort_by_key(|f| *f as u8);
    features.dedup();
    // Outline features occupy distinct 30° slots so that no notch cuts a fin or rod.
    let mut slots: Vec<usize> = (0..12).collect();
    slots.shuffle(&mut rng);
    let offset = rng.gen_range(0.0..2.0 * PI);
    let mut next_angle = {
        let mut slots = slots.into_iter();
        move |rng: &mut ChaCha8Rng| {
            let k = slots.next().expect("at most 9 outline features");
            offset + PI / 6.0 * k as f64 + rng.gen_range(-0.08..0.08)
        }
    };
    for feature in features {
        match feature {
            Feature::Fins => {
                let length = (0.25 * r).min(room);
                if length > h {
                    for _ in 0..3 {
                        let theta = next_angle(&mut rng);
                        solids.push(Shape::radial_rect(theta, 0.9 * r, r + length, 0.06 * r));
                    }
                }
            }
            Feature::Rods => {
                let rod = (0.1 * r).min(room);
                if rod > h {
                    for _ in 0..4 {
                        let (sin, cos) = next_angle(&mut rng).sin_cos();
                        solids.push(Shape::Disk {
                            cx: r * cos,
                            cy: r * sin,
                            r: rod,
                        });
                    }
                }
            }
            Feature::Notches => {
                for _ in 0..2 {
                    let theta = next_angle(&mut rng);
                    voids.push(Shape::radial_rect(theta, 0.8 * r, 1.05 * r, 0.05 * r));
                }
            }
        }
    }

    // Pores live in the inner 70% of the base, clear of every outline feature.
    let budget = 100 * spec.num_pores;
    let gap = 2.0 * h;
    let (lo, hi) = spec.pore_radius_range;
    let mut pores: Vec<(f64, f64, f64)> = Vec::with_capacity(spec.num_pores);
    let mut attempts = 0;
    while pores.len() < spec.num_pores {
        if attempts == budget {
            return Err(Error::Placement { budget });
        }
        attempts += 1;
        let pr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let reach = 0.7 * r - pr - gap;
        if reach <= 0.0 {
            continue;
        }
        let rad = reach * rng.gen::<f64>().sqrt();
        let (sin, cos) = rng.gen_range(0.0..2.0 * PI).sin_cos();
        let (cx, cy) = (rad * cos, rad * sin);
        let clear = pores
            .iter()
            .all(|&(x, y, q)| (x - cx).hypot(y - cy) > pr + q + gap);
        if clear {
            pores.push((cx, cy, pr));
        }
    }
    voids.extend(
        pores
            .into_iter()
            .map(|(cx, cy, r)| Shape::Disk { cx, cy, r }),
    );

    Ok(Layout { solids, voids }.rasterize(spec))
}

/// Number of 4-connected regions of pixels below `level` that do not touch the
/// image border (holes enclosed by material).
pub fn count_enclosed_voids(image: &Image2D, level: f64) -> usize {
    let (w, h) = (image.width(), image.height());
    let data = image.data();
    let mut seen = vec![false; w * h];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || data[start] >= level {
            continue;
        }
        let mut touches_border = false;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                touches_border = true;
            }
            let mut push = |j: usize| {
                if !seen[j] && data[j] < level {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - w);
            }
            if r + 1 < h {
                push(i + w);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < w {
                push(i + 1);
            }
        }
        if !touches_border {
            count += 1;
        }
    }
    count
}
