//! Beam-hardening correction network.
//!
//! A fully-connected network maps one `(projection, thickness)` pair to the
//! three parameters of the two-energy model. It is trained only on synthetic
//! pairs drawn from [`ParamRanges`]. At inference time the thickness of every
//! ray is estimated by reconstructing, segmenting and re-projecting the scan;
//! the network runs on every ray crossing enough material, the predictions
//! are averaged, and the averaged parameters define a polynomial that maps
//! beam-hardened projections onto the linear model.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Sinogram;
use crate::nn::mlp::{Activation, Dense, FeedForward};
use crate::nn::{Adam, Standardizer};
use crate::physics::{bh_projection_unchecked, BhParams};
use crate::projector::forward_project;
use crate::recon::{fbp, FilterWindow};
use crate::segment::{binarize, otsu_threshold, DEFAULT_BINS};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Sampling box for synthetic training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    /// Thickness in mm.
    pub d: (f64, f64),
    pub alpha: (f64, f64),
    /// mm⁻¹.
    pub mu1: (f64, f64),
    /// mm⁻¹.
    pub mu2: (f64, f64),
    /// Upper bound on `mu1 / mu2`; samples beyond it are rejected.
    #[serde(default = "default_ratio")]
    pub max_mu_ratio: f64,
}

fn default_ratio() -> f64 {
    5.0
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            d: (0.0, 40.0),
            alpha: (0.1, 10.0),
            mu1: (0.01, 5.0),
            mu2: (0.01, 1.0),
            max_mu_ratio: 5.0,
        }
    }
}

impl ParamRanges {
    /// A single point: every sample is `(d, params)`.
    pub fn point(d: f64, params: BhParams) -> Self {
        Self {
            d: (d, d),
            alpha: (params.alpha, params.alpha),
            mu1: (params.mu1, params.mu1),
            mu2: (params.mu2, params.mu2),
            max_mu_ratio: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field: &'static str, (lo, hi): (f64, f64)| {
            if lo >= 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(invalid(
                    field,
                    format!("need 0 <= lo <= hi < inf, got ({lo}, {hi})"),
                ))
            }
        };
        check("d", self.d)?;
        check("alpha", self.alpha)?;
        check("mu1", self.mu1)?;
        check("mu2", self.mu2)?;
        if self.mu2.0 <= 0.0 {
            return Err(invalid("mu2", "lower bound must be positive"));
        }
        if self.mu1.1 < self.mu2.0 || !(self.max_mu_ratio >= 1.0) {
            return Err(invalid(
                "mu1",
                "no sample can satisfy mu2 <= mu1 <= max_mu_ratio·mu2",
            ));
        }
        Ok(())
    }

    fn contains(&self, p: &BhParams) -> bool {
        p.mu1 >= p.mu2 && p.mu1 <= self.max_mu_ratio * p.mu2
    }

    /// Uniform draw of `(d, params)` subject to the `mu1`/`mu2` constraints.
    pub fn sample(&self, rng: &mut impl Rng) -> (f64, BhParams) {
        let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        loop {
            let d = draw(rng, self.d);
            let p = BhParams {
                alpha: draw(rng, self.alpha),
                mu1: draw(rng, self.mu1),
                mu2: draw(rng, self.mu2),
            };
            if self.contains(&p) {
                return (d, p);
            }
        }
    }

    fn clamp(&self, raw: [f64; 3]) -> BhParams {
        let alpha = raw[0].clamp(self.alpha.0, self.alpha.1);
        let lo = self.mu1.0.min(self.mu2.0);
        let hi = self.mu1.1.max(self.mu2.1);
        let (mut mu1, mut mu2) = (raw[1].clamp(lo, hi), raw[2].clamp(lo, hi));
        if mu1 < mu2 {
            std::mem::swap(&mut mu1, &mut mu2);
        }
        BhParams { alpha, mu1, mu2 }
    }
}

/// Synthetic `(p, d) → (alpha, mu1, mu2)` pairs with their standardization.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Row-major `n × 2`: `(p, d)`.
    pub inputs: Vec<f64>,
    /// Row-major `n × 3`: `(alpha, mu1, mu2)`.
    pub targets: Vec<f64>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub ranges: ParamRanges,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn normalized_inputs(&self) -> Vec<f64> {
        self.input_norm.forward(&self.inputs)
    }

    pub fn normalized_targets(&self) -> Vec<f64> {
        self.output_norm.forward(&self.targets)
    }
}

/// Draws `n` training pairs; `p` follows the beam-hardening model exactly.
pub fn synth_training_set(ranges: &ParamRanges, n: usize, seed: u64) -> Result<TrainingSet> {
    ranges.validate()?;
    if n == 0 {
        return Err(invalid("n", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut targets = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let (d, params) = ranges.sample(&mut rng);
        inputs.extend([bh_projection_unchecked(d, &params), d]);
        targets.extend(params.as_array());
    }
    Ok(TrainingSet {
        input_norm: Standardizer::fit(&inputs, 2),
        output_norm: Standardizer::fit(&targets, 3),
        inputs,
        targets,
        ranges: *ranges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.05
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            epochs: 20,
            batch: 256,
            learning_rate: 1e-3,
            seed: 0,
            validation_fraction: default_val_fraction(),
        }
    }
}

/// Per-epoch losses on normalized targets. Entry 0 is the untrained network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

/// Trained parameter-estimation network with its normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub net: FeedForward,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub ranges: ParamRanges,
    pub config: TrainConfig,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn batch_loss(net: &FeedForward, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    // Chunked so the evaluation does not materialize a huge activation matrix.
    const CHUNK: usize = 8192;
    let n = x.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let y = net.forward(x.slice(s![start..end, ..]));
        total += (&y - &t.slice(s![start..end, ..]))
            .iter()
            .map(|d| d * d)
            .sum::<f64>();
        start = end;
    }
    total / (n * t.ncols()) as f64
}

/// Mini-batch Adam on the mean squared error of normalized targets.
///
/// After every epoch the loss over the whole training split is evaluated; if
/// it rose, the weights roll back to the best epoch and the learning rate is
/// halved, so the recorded training loss never increases.
pub fn train_bhcn(data: &TrainingSet, config: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    if data.is_empty() {
        return Err(invalid("dataset", "is empty"));
    }
    if config.batch == 0 {
        return Err(invalid("batch", "must be >= 1"));
    }
    let n = data.len();
    let n_val = ((n as f64 * config.validation_fraction).floor() as usize).min(n - 1);
    let n_train = n - n_val;
    let x_all = Array2::from_shape_vec((n, 2), data.normalized_inputs()).expect("n x 2");
    let t_all = Array2::from_shape_vec((n, 3), data.normalized_targets()).expect("n x 3");
    let (x_train, x_val) = (
        x_all.slice(s![..n_train, ..]),
        x_all.slice(s![n_train.., ..]),
    );
    let (t_train, t_val) = (
        t_all.slice(s![..n_train, ..]),
        t_all.slice(s![n_train.., ..]),
    );
    let (x_train, t_train) = (x_train.to_owned(), t_train.to_owned());
    let (x_val, t_val) = if n_val > 0 {
        (x_val.to_owned(), t_val.to_owned())
    } else {
        (x_train.clone(), t_train.clone())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![2];
    sizes.extend(&config.hidden);
    sizes.push(3);
    let mut net = FeedForward::new(&sizes, Activation::Relu, &mut rng);
    let mut opt = Adam::new(config.learning_rate, &net.param_sizes());

    let mut best_loss = batch_loss(&net, &x_train, &t_train);
    let mut best_net = net.clone();
    let mut history = TrainHistory {
        train_loss: vec![best_loss],
        val_loss: vec![batch_loss(&net, &x_val, &t_val)],
        learning_rate: vec![opt.lr],
    };
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut xb = Array2::zeros((config.batch, 2));
    let mut tb = Array2::zeros((config.batch, 3));
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            if chunk.len() != xb.nrows() {
                xb = Array2::zeros((chunk.len(), 2));
                tb = Array2::zeros((chunk.len(), 3));
            }
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&x_train.row(i));
                tb.row_mut(r).assign(&t_train.row(i));
            }
            let (_, grads) = net.loss_and_grad(xb.view(), tb.view());
            opt.update(&mut net.params_mut(), &grads.as_slices());
        }
        let loss = batch_loss(&net, &x_train, &t_train);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if loss <= best_loss {
            best_loss = loss;
            best_net = net.clone();
        } else {
            net = best_net.clone();
            opt.lr *= 0.5;
            opt.reset();
        }
        history.train_loss.push(best_loss);
        history.val_loss.push(batch_loss(&best_net, &x_val, &t_val));
        history.learning_rate.push(opt.lr);
    }
    let val_loss = *history.val_loss.last().expect("at least the initial entry");
    Ok((
        Mlp {
            net: best_net,
            input_norm: data.input_norm.clone(),
            output_norm: data.output_norm.clone(),
            ranges: data.ranges,
            config: config.clone(),
            train_loss: best_loss,
            val_loss,
        },
        history,
    ))
}

impl Mlp {
    /// Predictions for many `(p, d)` pairs at once.
    pub fn predict(&self, pairs: &[(f64, f64)]) -> Vec<BhParams> {
        pairs
            .par_chunks(4096)
            .flat_map_iter(|chunk| {
                let flat: Vec<f64> = chunk.iter().flat_map(|&(p, d)| [p, d]).collect();
                let x = Array2::from_shape_vec((chunk.len(), 2), self.input_norm.forward(&flat))
                    .expect("k x 2");
                let y = self.net.forward(x.view());
                let raw = self
                    .output_norm
                    .inverse(y.as_slice().expect("standard layout"));
                raw.chunks_exact(3)
                    .map(|r| self.ranges.clamp([r[0], r[1], r[2]]))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Parameters predicted for a single measurement.
pub fn mlp_forward(mlp: &Mlp, p: f64, d: f64) -> BhParams {
    mlp.predict(&[(p, d)])[0]
}

/// Path length (mm) of every ray through the segmented FBP reconstruction.
pub fn estimate_thickness(sino: &Sinogram, recon_size: usize, pixel_size: f64) -> Result<Sinogram> {
    let recon = fbp(
        sino,
        recon_size,
        recon_size,
        pixel_size,
        FilterWindow::Ramlak,
    )?;
    let threshold = otsu_threshold(&recon, DEFAULT_BINS)?;
    let mask = binarize(&recon, threshold);
    forward_project(&mask, sino.geometry(), sino.num_bins())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub params: BhParams,
    pub bins_used: usize,
}

/// Mean network prediction over all rays whose thickness exceeds `d_min`.
pub fn estimate_params(
    mlp: &Mlp,
    sino: &Sinogram,
    thickness: &Sinogram,
    d_min: f64,
) -> Result<ParamEstimate> {
    if sino.data().len() != thickness.data().len() || sino.num_bins() != thickness.num_bins() {
        return Err(Error::Shape(
            "sinogram and thickness are not congruent".into(),
        ));
    }
    let pairs: Vec<(f64, f64)> = sino
        .data()
        .iter()
        .zip(thickness.data())
        .filter(|(_, &d)| d > d_min)
        .map(|(&p, &d)| (p, d))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Degenerate(format!(
            "no ray has thickness above d_min = {d_min} mm"
        )));
    }
    let preds = mlp.predict(&pairs);
    let k = preds.len() as f64;
    let mean = |f: fn(&BhParams) -> f64| preds.iter().map(f).sum::<f64>() / k;
    Ok(ParamEstimate {
        params: BhParams {
            alpha: mean(|p| p.alpha),
            mu1: mean(|p| p.mu1),
            mu2: mean(|p| p.mu2),
        },
        bins_used: preds.len(),
    })
}

/// Polynomial `Σ c_k p^k`, `k = 1..=K`, mapping beam-hardened projections onto
/// the linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationPoly {
    /// `coeffs[k-1]` multiplies `p^k`.
    pub coeffs: Vec<f64>,
    /// Upper end of the fitted domain `[0, p_max]`.
    pub p_max: f64,
    /// Largest absolute fit error on the fitting grid.
    pub max_residual: f64,
}

impl LinearizationPoly {
    pub fn identity() -> Self {
        Self {
            coeffs: vec![1.0],
            p_max: f64::MAX,
            max_residual: 0.0,
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    pub fn eval(&self, p: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| (acc + c) * p)
    }

    pub fn derivative(&self, p: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (i, &c)| acc * p + (i + 1) as f64 * c)
    }

    /// Checks strict monotonicity on a dense grid over `[0, p_max]`.
    pub fn is_increasing(&self, samples: usize) -> bool {
        let top = if self.p_max < f64::MAX {
            self.p_max
        } else {
            1.0
        };
        let mut prev = self.eval(0.0);
        (1..=samples).all(|i| {
            let v = self.eval(top * i as f64 / samples as f64);
            let ok = v > prev;
            prev = v;
            ok
        })
    }
}

/// Number of thickness samples used by [`fit_linearization`].
pub const FIT_SAMPLES: usize = 1000;
/// Largest condition number accepted for the scaled normal equations.
pub const MAX_CONDITION: f64 = 1e13;

/// Least-squares fit of `p_bhc ≈ Σ c_k p_bh^k` over a uniform thickness grid
/// on `[0, d_max]`.
pub fn fit_linearization(
    params: &BhParams,
    d_max: f64,
    degree: usize,
) -> Result<LinearizationPoly> {
    params.validate()?;
    if degree == 0 {
        return Err(invalid("degree", "must be >= 1"));
    }
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(invalid("d_max", format!("must be positive, got {d_max}")));
    }
    let ds: Vec<f64> = (0..FIT_SAMPLES)
        .map(|i| d_max * i as f64 / (FIT_SAMPLES - 1) as f64)
        .collect();
    let x: Vec<f64> = ds
        .iter()
        .map(|&d| bh_projection_unchecked(d, params))
        .collect();
    let y: Vec<f64> = ds.iter().map(|&d| params.effective_mu() * d).collect();
    let p_max = x[FIT_SAMPLES - 1];

    // Powers of p / p_max keep the normal matrix well scaled.
    let design = DMatrix::from_fn(FIT_SAMPLES, degree, |r, c| {
        (x[r] / p_max).powi(c as i32 + 1)
    });
    let normal = design.transpose() * &design;
    let rhs = design.transpose() * DVector::from_vec(y.clone());
    let eig = normal.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::IllConditioned { degree });
    }
    let scaled = normal
        .cholesky()
        .ok_or(Error::IllConditioned { degree })?
        .solve(&rhs);
    let coeffs: Vec<f64> = scaled
        .iter()
        .enumerate()
        .map(|(k, &a)| a / p_max.powi(k as i32 + 1))
        .collect();
    let mut poly = LinearizationPoly {
        coeffs,
        p_max,
        max_residual: 0.0,
    };
    poly.max_residual = x
        .iter()
        .zip(&y)
        .map(|(&p, &t)| (poly.eval(p) - t).abs())
        .fold(0.0, f64::max);
    Ok(poly)
}

/// Corrected sinogram plus the number of bins evaluated beyond `p_max`.
#[derive(Debug, Clone)]
pub struct Corrected {
    pub sino: Sinogram,
    pub extrapolated_bins: usize,
}

/// Applies the linearization polynomial bin by bin.
pub fn apply_correction(sino: &Sinogram, poly: &LinearizationPoly) -> Corrected {
    let extrapolated_bins = sino.data().iter().filter(|&&p| p > poly.p_max).count();
    Corrected {
        sino: sino.map(|p| poly.eval(p)),
        extrapolated_bins,
    }
}

/// Everything produced by one run of the correction chain.
#[derive(Debug, Clone)]
pub struct BhcOutcome {
    pub thickness: Sinogram,
    pub estimate: ParamEstimate,
    pub poly: LinearizationPoly,
    pub corrected: Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BhcOptions {
    pub recon_size: usize,
    pub pixel_size: f64,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Fit domain upper end; defaults to 1.25 × the largest estimated thickness.
    #[serde(default)]
    pub d_max: Option<f64>,
}

fn default_d_min() -> f64 {
    0.5
}

fn default_degree() -> usize {
    5
}

impl BhcOptions {
    pub fn new(recon_size: usize, pixel_size: f64) -> Self {
        Self {
            recon_size,
            pixel_size,
            d_min: default_d_min(),
            degree: default_degree(),
            d_max: None,
        }
    }
}

/// Thickness estimation, parameter averaging, polynomial fit and correction.
pub fn correct_scan(mlp: &Mlp, sino: &Sinogram, options: &BhcOptions) -> Result<BhcOutcome> {
    let thickness = estimate_thickness(sino, options.recon_size, options.pixel_size)?;
    let estimate = estimate_params(mlp, sino, &thickness, options.d_min)?;
    let d_max = options
        .d_max
        .unwrap_or_else(|| 1.25 * thickness.data().iter().cloned().fold(0.0, f64::max));
    let poly = fit_linearization(&estimate.params, d_max, options.degree)?;
    let corrected = apply_correction(sino, &poly);
    Ok(BhcOutcome {
        thickness,
        estimate,
        poly,
        corrected,
    })
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerFile>,
    input_norm: Standardizer,
    output_norm: Standardizer,
    ranges: ParamRanges,
    config: TrainConfig,
    train_loss: f64,
    val_loss: f64,
}

impl Mlp {
    pub fn to_json(&self) -> String {
        let file = MlpFile {
            format: "bhcn-mlp".into(),
            version: MODEL_FORMAT_VERSION,
            layer_sizes: self.net.sizes(),
            activation: self.net.activation,
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
            ranges: self.ranges,
            config: self.config.clone(),
            train_loss: self.train_loss,
            val_loss: self.val_loss,
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let expected = (
                file.layer_sizes.get(i + 1).copied(),
                file.layer_sizes.get(i).copied(),
            );
            if expected != (Some(l.rows), Some(l.cols)) || l.bias.len() != l.rows {
                return Err(Error::Model(format!(
                    "layer {i} does not match layer_sizes"
                )));
            }
            layers.push(Dense {
                weight: Array2::from_shape_vec((l.rows, l.cols), l.weight)
                    .map_err(|e| Error::Model(e.to_string()))?,
                bias: l.bias.into(),
            });
        }
        if layers.is_empty()
            || file.input_norm.scale.len() != 2
            || file.output_norm.scale.len() != 3
        {
            return Err(Error::Model(
                "network must map 2 inputs to 3 outputs".into(),
            ));
        }
        if file
            .input_norm
            .scale
            .iter()
            .chain(&file.output_norm.scale)
            .any(|&s| !(s > 0.0))
        {
            return Err(Error::Model("normalization scales must be positive".into()));
        }
        Ok(Self {
            net: FeedForward {
                layers,
                activation: file.activation,
            },
            input_norm: file.input_norm,
            output_norm: file.output_norm,
            ranges: file.ranges,
            config: file.config,
            train_loss: file.train_loss,
            val_loss: file.val_loss,
        })
    }
}
