//! JSON config schemas, one per subcommand.
//!
//! Every config carries a `"version"` field. Relative paths inside a config
//! are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bhct::bhcn::{ParamRanges, TrainConfig};
use bhct::denoiser::{DenoiserConfig, PatchConfig};
use bhct::phantom::PhantomSpec;
use bhct::recon::FilterWindow;
use bhct::{uniform_angles, BhParams, Geometry, GeometryKind, NoiseSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Parses a config, reporting the JSON path of the offending field on error.
pub fn load<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let config: T = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        anyhow::anyhow!("{}: at `{}`: {}", path.display(), at, e.into_inner())
    })?;
    if config.version() != CONFIG_VERSION {
        bail!(
            "{}: unsupported config version {} (expected {CONFIG_VERSION})",
            path.display(),
            config.version()
        );
    }
    Ok(config)
}

pub trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u32 {
                self.version
            }
        })*
    };
}

versioned!(
    PhantomConfig,
    ScanConfig,
    BhcTrainConfig,
    BhcFitConfig,
    BhcApplyConfig,
    ReconConfig,
    DnTrainConfig,
    DnApplyConfig,
    PipelineConfig,
    EvalConfig
);

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Disk,
    Component,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub version: u32,
    pub kind: PhantomKind,
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub kind: GeometryKind,
    pub num_views: usize,
    /// Views over a full turn instead of a half turn.
    #[serde(default)]
    pub full_circle: bool,
    pub detector_spacing: f64,
    #[serde(default)]
    pub detector_offset: f64,
    #[serde(default)]
    pub source_to_center: Option<f64>,
    #[serde(default)]
    pub source_to_detector: Option<f64>,
    /// Defaults to enough bins to cover the image diagonal.
    #[serde(default)]
    pub num_bins: Option<usize>,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<Geometry> {
        let angles = uniform_angles(self.num_views, self.full_circle);
        let mut g = match self.kind {
            GeometryKind::Parallel => Geometry::parallel(angles, self.detector_spacing),
            GeometryKind::Fan => {
                let (Some(sc), Some(sd)) = (self.source_to_center, self.source_to_detector) else {
                    bail!("fan geometry needs `source_to_center` and `source_to_detector`");
                };
                Geometry::fan(angles, self.detector_spacing, sc, sd)
            }
        };
        g.detector_offset = self.detector_offset;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub version: u32,
    pub phantom: PathBuf,
    pub geometry: GeometryConfig,
    pub params: BhParams,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhcTrainConfig {
    pub version: u32,
    #[serde(default)]
    pub ranges: ParamRanges,
    pub samples: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhcFitConfig {
    pub version: u32,
    pub model: PathBuf,
    pub sinogram: PathBuf,
    pub recon_size: usize,
    pub pixel_size: f64,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub d_max: Option<f64>,
}

fn default_d_min() -> f64 {
    0.5
}

fn default_degree() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhcApplyConfig {
    pub version: u32,
    pub sinogram: PathBuf,
    /// A `bhc-fit` report holding the polynomial.
    pub fit: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMethod {
    Fbp,
    Sirt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub version: u32,
    pub sinogram: PathBuf,
    pub method: ReconMethod,
    pub size: usize,
    pub pixel_size: f64,
    #[serde(default)]
    pub window: FilterWindow,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "yes")]
    pub nonneg: bool,
    /// Keep every `sparse_factor`-th view before reconstructing.
    #[serde(default = "one")]
    pub sparse_factor: usize,
}

fn default_iters() -> usize {
    100
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnTrainConfig {
    pub version: u32,
    pub manifest: Vec<ManifestEntry>,
    pub patch: PatchConfig,
    #[serde(default)]
    pub train: DenoiserConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnApplyConfig {
    pub version: u32,
    pub model: PathBuf,
    pub image: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub version: u32,
    pub image: PathBuf,
    pub reference: PathBuf,
    /// Defaults to the reference's max − min.
    #[serde(default)]
    pub data_range: Option<f64>,
    #[serde(default)]
    pub profile_row: Option<usize>,
}

/// Where the pipeline's sinogram comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum PipelineInput {
    /// Simulate a scan of a generated phantom.
    Simulate {
        phantom: PhantomConfigBody,
        geometry: GeometryConfig,
        params: BhParams,
        #[serde(default)]
        noise: Option<NoiseSpec>,
    },
    /// Use a measured sinogram; no ground truth is available.
    Measured { sinogram: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfigBody {
    pub kind: PhantomKind,
    pub spec: PhantomSpec,
}

/// Projection-domain correction used by the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BhcMode {
    /// No correction.
    Off,
    /// Network estimate of the model parameters.
    Network {
        model: PathBuf,
        #[serde(default = "default_d_min")]
        d_min: f64,
        #[serde(default = "default_degree")]
        degree: usize,
    },
    /// Linearization from the simulation's own parameters (simulated input only).
    TrueParams {
        #[serde(default = "default_degree")]
        degree: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    /// Dense-view SIRT of the ideal (linear) sinogram.
    Sirt,
    /// The phantom scaled by the effective attenuation.
    Phantom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub input: PipelineInput,
    pub bhc: BhcMode,
    pub recon_size: usize,
    pub pixel_size: f64,
    #[serde(default)]
    pub window: FilterWindow,
    /// Keep every `sparse_factor`-th view for the analytic reconstruction.
    #[serde(default = "one")]
    pub sparse_factor: usize,
    #[serde(default)]
    pub denoiser: Option<PathBuf>,
    #[serde(default = "default_reference")]
    pub reference: ReferenceKind,
    #[serde(default = "default_iters")]
    pub reference_iters: usize,
    /// Row of the profile CSVs; defaults to the central row.
    #[serde(default)]
    pub profile_row: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_reference() -> ReferenceKind {
    ReferenceKind::Sirt
}

impl PipelineConfig {
    /// Applies a `--seed` override to every seeded component.
    pub fn override_seed(&mut self, seed: u64) {
        if let PipelineInput::Simulate { phantom, noise, .. } = &mut self.input {
            phantom.spec.seed = seed;
            if let Some(n) = noise {
                n.seed = seed;
            }
        }
    }
}
