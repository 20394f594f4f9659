//! Two-stage X-ray CT correction on synthetic single-material scans.
//!
//! The workflow mirrors an industrial inspection chain:
//!
//! 1. a small fully-connected network estimates the parameters of a two-energy
//!    beam-hardening model from `(projection, thickness)` pairs
//!    ([`bhcn`]), and the averaged parameters define a polynomial that
//!    linearizes the projections;
//! 2. the corrected sinogram is reconstructed by filtered backprojection
//!    ([`recon`]);
//! 3. a bias-free encoder–decoder network ([`denoiser`]) maps the sparse-view
//!    reconstruction toward a dense-view iterative reconstruction.
//!
//! Everything runs on 2D phantoms ([`phantom`]) simulated through an exact
//! ray-driven projector ([`projector`]) and the beam-hardening model in
//! [`physics`], so every intermediate quantity has ground truth. The guide in
//! `book/` walks through each stage.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bhcn;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod physics;
pub mod projector;
pub mod recon;
pub mod segment;

pub use error::{Error, Result};
pub use image::{uniform_angles, Geometry, GeometryKind, Image2D, Sinogram};
pub use physics::{BhParams, NoiseSpec};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantoms-and-scans.md")]
    mod phantoms_and_scans {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/beam-hardening.md")]
    mod beam_hardening {}
    #[doc = include_str!("../../../book/src/denoising.md")]
    mod denoising {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
