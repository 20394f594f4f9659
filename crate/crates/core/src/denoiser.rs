//! Sparse-view artifact suppression.
//!
//! A bias-free U-Net is trained on paired patches cut from sparse-view FBP
//! reconstructions (inputs) and dense-view SIRT reconstructions (targets),
//! then applied to whole images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image2D;
use crate::nn::cnn::{Cnn, CnnGrads};
use crate::nn::Adam;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch: usize,
    pub stride: usize,
    /// Adds one randomly flipped or rotated copy of every grid pair.
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

impl PatchConfig {
    pub fn new(patch: usize, stride: usize) -> Self {
        Self {
            patch,
            stride,
            augment: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Index into [`PatchDataset::sources`].
    pub source: usize,
    pub row: usize,
    pub col: usize,
    /// Dihedral transform applied, 0 meaning none.
    pub transform: u8,
}

/// Square input/target patch pairs of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub patch: usize,
    pub sources: Vec<String>,
    pub pairs: Vec<PatchPair>,
}

impl PatchDataset {
    pub fn empty(patch: usize) -> Self {
        Self {
            patch,
            sources: Vec::new(),
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Appends the pairs of `other`, which must use the same patch size.
    pub fn extend(&mut self, other: PatchDataset) -> Result<()> {
        if other.patch != self.patch {
            return Err(Error::Shape(format!(
                "patch size {} does not match {}",
                other.patch, self.patch
            )));
        }
        let offset = self.sources.len();
        self.sources.extend(other.sources);
        self.pairs.extend(other.pairs.into_iter().map(|mut p| {
            p.source += offset;
            p
        }));
        Ok(())
    }
}

/// One of the eight symmetries of the square applied to a `n × n` patch.
fn dihedral(data: &[f64], n: usize, t: u8) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = match t {
                0 => (r, c),
                1 => (c, n - 1 - r),
                2 => (n - 1 - r, n - 1 - c),
                3 => (n - 1 - c, r),
                4 => (r, n - 1 - c),
                5 => (n - 1 - r, c),
                6 => (c, r),
                _ => (n - 1 - c, n - 1 - r),
            };
            out[r * n + c] = data[sr * n + sc];
        }
    }
    out
}

fn window(image: &Image2D, row: usize, col: usize, n: usize) -> Vec<f64> {
    let w = image.width();
    (row..row + n)
        .flat_map(|r| image.data()[r * w + col..r * w + col + n].iter().copied())
        .collect()
}

/// Cuts congruent patch pairs on a regular grid, optionally augmented.
pub fn extract_patch_pairs(
    input: &Image2D,
    target: &Image2D,
    config: &PatchConfig,
    source: &str,
) -> Result<PatchDataset> {
    if !input.same_shape(target) {
        return Err(Error::Shape(format!(
            "{source}: input is {}x{}, target is {}x{}",
            input.width(),
            input.height(),
            target.width(),
            target.height()
        )));
    }
    let n = config.patch;
    if n == 0 || n > input.width().min(input.height()) {
        return Err(invalid(
            "patch",
            format!(
                "must be in 1..={}, got {n}",
                input.width().min(input.height())
            ),
        ));
    }
    if config.stride == 0 {
        return Err(invalid("stride", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs = Vec::new();
    for row in (0..=input.height() - n).step_by(config.stride) {
        for col in (0..=input.width() - n).step_by(config.stride) {
            let a = window(input, row, col, n);
            let b = window(target, row, col, n);
            if config.augment {
                let t = rng.gen_range(1..8u8);
                pairs.push(PatchPair {
                    input: dihedral(&a, n, t),
                    target: dihedral(&b, n, t),
                    source: 0,
                    row,
                    col,
                    transform: t,
                });
            }
            pairs.push(PatchPair {
                input: a,
                target: b,
                source: 0,
                row,
                col,
                transform: 0,
            });
        }
    }
    // Keep grid pairs first so callers can index them by position.
    pairs.sort_by_key(|p| p.transform != 0);
    Ok(PatchDataset {
        patch: n,
        sources: vec![source.to_string()],
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            scales: 2,
            base_channels: 16,
            epochs: 20,
            batch: 8,
            learning_rate: 1e-3,
            seed: 0,
            residual: false,
            validation_fraction: default_val_fraction(),
        }
    }
}

/// Per-epoch mean squared errors in image units; entry 0 is the untrained network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for (i, (t, v)) in self.train.iter().zip(&self.validation).enumerate() {
            out.push_str(&format!("{i},{t},{v}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: Cnn,
    pub config: DenoiserConfig,
}

fn mean_loss(net: &Cnn, pairs: &[&PatchPair], n: usize) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            net.forward(&p.input, n, n)
                .iter()
                .zip(&p.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (n * n) as f64
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Mini-batch Adam on the patch mean squared error.
///
/// The returned network is the one with the lowest validation loss (training
/// loss when no validation split is held out).
pub fn train_denoiser(
    data: &PatchDataset,
    config: &DenoiserConfig,
) -> Result<(Denoiser, LossHistory)> {
    if data.is_empty() {
        return Err(invalid("dataset", "is empty"));
    }
    if config.batch == 0 {
        return Err(invalid("batch", "must be >= 1"));
    }
    if config.base_channels == 0 {
        return Err(invalid("base_channels", "must be >= 1"));
    }
    let n = data.patch;
    let g = 1usize << config.scales;
    if !n.is_multiple_of(g) {
        return Err(invalid(
            "patch",
            format!("{n} is not divisible by 2^scales = {g}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val =
        ((data.len() as f64 * config.validation_fraction).floor() as usize).min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&PatchPair> = train_idx.iter().map(|&i| &data.pairs[i]).collect();
    let val: Vec<&PatchPair> = val_idx.iter().map(|&i| &data.pairs[i]).collect();

    let mut net = Cnn::new(
        config.scales,
        config.base_channels,
        config.residual,
        &mut rng,
    );
    let rms = (train
        .iter()
        .flat_map(|p| p.input.iter())
        .map(|v| v * v)
        .sum::<f64>()
        / (train.len() * n * n) as f64)
        .sqrt();
    net.input_scale = if rms > 0.0 { rms } else { 1.0 };
    let s2 = net.input_scale * net.input_scale;
    let mut opt = Adam::new(config.learning_rate, &net.param_sizes());

    let score = |net: &Cnn, fallback: f64| {
        if val.is_empty() {
            fallback
        } else {
            mean_loss(net, &val, n)
        }
    };
    let initial = mean_loss(&net, &train, n);
    let mut history = LossHistory {
        train: vec![initial],
        validation: vec![score(&net, initial)],
    };
    let mut best = (history.validation[0], net.clone());
    let mut batch_order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        batch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in batch_order.chunks(config.batch) {
            let results: Vec<(f64, CnnGrads)> = chunk
                .par_iter()
                .map(|&i| net.loss_and_grad(&train[i].input, &train[i].target, n, n))
                .collect();
            let mut grads = CnnGrads::zeros_like(&net);
            let inv = 1.0 / chunk.len() as f64;
            for (loss, g) in &results {
                epoch_loss += loss * s2;
                grads.add_scaled(g, inv);
            }
            opt.update(&mut net.params_mut(), &grads.as_slices());
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let val_loss = score(&net, train_loss);
        history.train.push(train_loss);
        history.validation.push(val_loss);
        if val_loss <= best.0 {
            best = (val_loss, net.clone());
        }
    }
    Ok((
        Denoiser {
            net: best.1,
            config: config.clone(),
        },
        history,
    ))
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Whole-image forward pass; sides are reflect padded to the network granularity.
pub fn denoise(model: &Denoiser, image: &Image2D) -> Image2D {
    let g = model.net.granularity();
    let (w, h) = (image.width(), image.height());
    let (pw, ph) = (w.div_ceil(g) * g, h.div_ceil(g) * g);
    let mut padded = vec![0.0; pw * ph];
    for r in 0..ph {
        for c in 0..pw {
            padded[r * pw + c] = image.data()[reflect(r, h) * w + reflect(c, w)];
        }
    }
    let out = model.net.forward(&padded, ph, pw);
    let data = (0..h)
        .flat_map(|r| out[r * pw..r * pw + w].iter().copied())
        .collect();
    Image2D::new(w, h, image.pixel_size(), data).expect("same shape as input")
}

#[derive(Serialize, Deserialize)]
struct Kernel {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Kernel {
    fn of(a: &ndarray::Array2<f64>) -> Self {
        Self {
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self, expected: (usize, usize), name: &str) -> Result<ndarray::Array2<f64>> {
        if (self.shape[0], self.shape[1]) != expected {
            return Err(Error::Model(format!(
                "{name} has shape {:?}, expected {expected:?}",
                self.shape
            )));
        }
        ndarray::Array2::from_shape_vec(expected, self.data)
            .map_err(|e| Error::Model(format!("{name}: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct Topology {
    scales: usize,
    base_channels: usize,
    residual: bool,
    input_scale: f64,
    convolution: String,
    downsample: String,
    upsample: String,
    skip: String,
}

#[derive(Serialize, Deserialize)]
struct CnnFile {
    format: String,
    version: u32,
    topology: Topology,
    convs: Vec<Kernel>,
    ups: Vec<Kernel>,
    head: Kernel,
    config: DenoiserConfig,
}

impl Denoiser {
    pub fn to_json(&self) -> String {
        let net = &self.net;
        let file = CnnFile {
            format: "bias-free-unet".into(),
            version: MODEL_FORMAT_VERSION,
            topology: Topology {
                scales: net.scales,
                base_channels: net.base_channels,
                residual: net.residual,
                input_scale: net.input_scale,
                convolution: "3x3 zero-padded, no bias, relu".into(),
                downsample: "2x2 max-pool".into(),
                upsample: "2x2 stride-2 transposed convolution, no bias".into(),
                skip: "channel concatenation".into(),
            },
            convs: net.convs.iter().map(Kernel::of).collect(),
            ups: net.ups.iter().map(Kernel::of).collect(),
            head: Kernel::of(&net.head),
            config: self.config.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CnnFile = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let t = &file.topology;
        if t.base_channels == 0 || !(t.input_scale > 0.0) {
            return Err(Error::Model(
                "base_channels and input_scale must be positive".into(),
            ));
        }
        // Shapes come from a freshly built network of the same topology.
        let mut net = Cnn::new(
            t.scales,
            t.base_channels,
            t.residual,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        net.input_scale = t.input_scale;
        if file.convs.len() != net.convs.len() || file.ups.len() != net.ups.len() {
            return Err(Error::Model("layer count does not match topology".into()));
        }
        for (i, (k, slot)) in file.convs.into_iter().zip(net.convs.iter_mut()).enumerate() {
            *slot = k.into_array(slot.dim(), &format!("convs[{i}]"))?;
        }
        for (i, (k, slot)) in file.ups.into_iter().zip(net.ups.iter_mut()).enumerate() {
            *slot = k.into_array(slot.dim(), &format!("ups[{i}]"))?;
        }
        net.head = file.head.into_array(net.head.dim(), "head")?;
        Ok(Self {
            net,
            config: file.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image2D {
        Image2D::new(w, h, 1.0, (0..w * h).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let img = ramp(64, 64);
        let d = extract_patch_pairs(&img, &img, &PatchConfig::new(32, 32), "a").unwrap();
        assert_eq!(d.len(), 4);
        let d = extract_patch_pairs(&img, &img, &PatchConfig::new(64, 5), "a").unwrap();
        assert_eq!(d.len(), 1);
        let aug = PatchConfig {
            augment: true,
            ..PatchConfig::new(32, 32)
        };
        assert_eq!(extract_patch_pairs(&img, &img, &aug, "a").unwrap().len(), 8);
    }

    #[test]
    fn patches_are_congruent() {
        let a = ramp(20, 12);
        let b = a.map(|v| -v);
        let cfg = PatchConfig {
            augment: true,
            seed: 3,
            ..PatchConfig::new(8, 3)
        };
        let d = extract_patch_pairs(&a, &b, &cfg, "x").unwrap();
        for p in &d.pairs {
            assert!(p.input.iter().zip(&p.target).all(|(x, y)| *x == -y));
            if p.transform == 0 {
                assert_eq!(p.target, window(&b, p.row, p.col, 8));
            }
        }
        assert_eq!(d, extract_patch_pairs(&a, &b, &cfg, "x").unwrap());
    }

    #[test]
    fn shape_mismatch_and_oversized_patch() {
        let a = ramp(8, 8);
        assert!(extract_patch_pairs(&a, &ramp(8, 6), &PatchConfig::new(4, 4), "p").is_err());
        assert!(extract_patch_pairs(&a, &a, &PatchConfig::new(9, 4), "p").is_err());
    }

    #[test]
    fn dihedral_group_is_closed() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        for t in 0..8 {
            let y = dihedral(&x, 3, t);
            let mut sorted = y.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, x);
        }
        assert_eq!(dihedral(&dihedral(&x, 3, 1), 3, 3), x);
    }

    #[test]
    fn reflect_padding_indices() {
        let got: Vec<usize> = (0..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1]);
    }

    fn tiny_model() -> Denoiser {
        let img = ramp(16, 16).map(|v| (v * 0.37).sin());
        let d = extract_patch_pairs(&img, &img, &PatchConfig::new(8, 8), "t").unwrap();
        let cfg = DenoiserConfig {
            scales: 1,
            base_channels: 2,
            epochs: 2,
            batch: 2,
            ..Default::default()
        };
        train_denoiser(&d, &cfg).unwrap().0
    }

    #[test]
    fn denoise_keeps_shape_and_maps_zero_to_zero() {
        let model = tiny_model();
        let z = Image2D::zeros(13, 7, 0.5);
        let out = denoise(&model, &z);
        assert_eq!((out.width(), out.height(), out.pixel_size()), (13, 7, 0.5));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_file_round_trip() {
        let model = tiny_model();
        assert_eq!(Denoiser::from_json(&model.to_json()).unwrap(), model);
        assert!(Denoiser::from_json("{\"version\": 1}").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(tiny_model(), tiny_model());
    }
}
