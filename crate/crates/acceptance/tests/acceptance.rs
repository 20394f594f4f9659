//! End-to-end acceptance checks, one line of output per criterion.
//!
//! `BHCT_CRITERIA=1,3,8` restricts the run to a subset. The process fails when
//! the set of failing criteria differs from `KNOWN_RED`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use bhct::bhcn::{
    apply_correction, correct_scan, fit_linearization, synth_training_set, train_bhcn, BhcOptions,
    Mlp, ParamRanges, TrainConfig,
};
use bhct::denoiser::{
    denoise, extract_patch_pairs, train_denoiser, Denoiser, DenoiserConfig, PatchConfig,
    PatchDataset,
};
use bhct::metrics::{cupping_index, data_range, mse, psnr, ssim, SsimParams};
use bhct::nn::mlp::{Activation, FeedForward};
use bhct::phantom::{gen_component, gen_disk, PhantomSpec};
use bhct::physics::{bh_projection, ideal_projection, simulate_scan};
use bhct::projector::{back_project, default_num_bins, forward_project, Grid};
use bhct::recon::{fbp, FilterWindow};
use bhct::{uniform_angles, BhParams, Geometry, Image2D, NoiseSpec};
use bhct_acceptance::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail; see the project notes for the analysis.
const KNOWN_RED: &[u32] = &[5, 6, 7];

const CANONICAL: BhParams = BhParams {
    alpha: 2.0,
    mu1: 0.35,
    mu2: 0.12,
};

type Outcome = Result<(bool, String), String>;
type Check = fn(&mut Shared) -> Outcome;

#[derive(Default)]
struct Shared {
    mlp: Option<Mlp>,
    denoiser: Option<(Denoiser, Image2D)>,
}

impl Shared {
    fn mlp(&mut self) -> Result<&Mlp, String> {
        if self.mlp.is_none() {
            let data = synth_training_set(&ParamRanges::default(), 1_000_000, 1).map_err(s)?;
            let config = TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            };
            let (mlp, _) = train_bhcn(&data, &config).map_err(s)?;
            self.mlp = Some(mlp);
        }
        Ok(self.mlp.as_ref().unwrap())
    }

    /// The trained denoiser and the held-out phantom's support.
    fn denoiser(&mut self) -> Result<&(Denoiser, Image2D), String> {
        if self.denoiser.is_none() {
            self.denoiser = Some(train_sparse_view_denoiser()?);
        }
        Ok(self.denoiser.as_ref().unwrap())
    }
}

fn s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn main() {
    let selected: BTreeSet<u32> = match std::env::var("BHCT_CRITERIA") {
        Ok(v) if !v.trim().is_empty() => v
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .expect("BHCT_CRITERIA holds comma-separated numbers")
            })
            .collect(),
        _ => (1..=10).collect(),
    };
    let checks: [(u32, &str, Check); 10] = [
        (1, "physics oracle", physics_oracle),
        (2, "projector adjointness", projector_adjointness),
        (3, "fbp correctness", fbp_correctness),
        (4, "beam hardening cups", beam_hardening_cups),
        (5, "bhcn trainer", bhcn_trainer),
        (6, "parameter recovery", parameter_recovery),
        (7, "cupping removal", cupping_removal),
        (8, "sparse-view suppression", sparse_view_suppression),
        (9, "bias-free homogeneity", homogeneity),
        (10, "pipeline determinism", pipeline_determinism),
    ];

    let mut shared = Shared::default();
    let mut failed = BTreeSet::new();
    for (id, name, check) in checks {
        if !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check(&mut shared) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict} {name}: {detail} ({:.1} s)",
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed.insert(id);
        }
    }

    let expected: BTreeSet<u32> = KNOWN_RED
        .iter()
        .copied()
        .filter(|c| selected.contains(c))
        .collect();
    if failed == expected {
        println!("failing set {failed:?} matches the known-red list");
    } else {
        println!("failing set {failed:?} differs from the known-red list {expected:?}");
        std::process::exit(1);
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

fn physics_oracle(_: &mut Shared) -> Outcome {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/projection_oracle.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut worst: f64 = 0.0;
    let mut draws = Vec::new();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .map(|t| t.parse().map_err(s))
            .collect::<Result<_, _>>()?;
        let params = BhParams {
            alpha: v[0],
            mu1: v[1],
            mu2: v[2],
        };
        worst = worst
            .max(rel_err(bh_projection(v[3], &params).map_err(s)?, v[4]))
            .max(rel_err(ideal_projection(v[3], &params).map_err(s)?, v[5]));
        draws.push(params);
    }
    if draws.len() != 1000 {
        return Err(format!("fixture holds {} rows, expected 1000", draws.len()));
    }

    let mut violations = 0usize;
    for params in &draws {
        let dmu = params.mu1 - params.mu2;
        let grid: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.01).collect();
        let p: Vec<f64> = grid
            .iter()
            .map(|&d| bh_projection(d, params).unwrap())
            .collect();
        for i in 1..p.len() {
            let d = grid[i];
            if p[i] <= p[i - 1] {
                violations += 1;
            }
            if i + 1 < p.len() && p[i + 1] - 2.0 * p[i] + p[i - 1] > 1e-12 * p[i].max(1.0) {
                violations += 1;
            }
            if p[i] > ideal_projection(d, params).unwrap() * (1.0 + 1e-12) {
                violations += 1;
            }
            let gap = (p[i] - params.mu2 * d - params.alpha.ln_1p()).abs();
            if gap > params.alpha * (-dmu * d).exp() + 1e-10 * p[i] {
                violations += 1;
            }
        }
    }
    Ok((
        worst <= 1e-10 && violations == 0,
        format!("max relative error {worst:.2e} (<= 1e-10), {violations} invariant violations on 1000 dense grids"),
    ))
}

fn projector_adjointness(_: &mut Shared) -> Outcome {
    let n = 128;
    let h = 0.1;
    let grid = Grid::new(n, n, h).map_err(s)?;
    let angles = uniform_angles(90, true);
    let geometries = [
        (
            "parallel",
            Geometry::parallel(angles.clone(), h),
            default_num_bins(&grid, h),
        ),
        (
            "fan",
            Geometry::fan(angles, 2.0 * h, 40.0, 80.0),
            default_num_bins(&grid, h),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for (_, geometry, bins) in &geometries {
        for _ in 0..20 {
            let x =
                Image2D::new(n, n, h, (0..n * n).map(|_| rng.gen::<f64>()).collect()).map_err(s)?;
            let ax = forward_project(&x, geometry, *bins).map_err(s)?;
            let y = ax
                .with_data((0..ax.data().len()).map(|_| rng.gen::<f64>()).collect())
                .map_err(s)?;
            let aty = back_project(&y, &grid).map_err(s)?;
            let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            worst = worst.max((lhs - rhs).abs() / (norm(ax.data()) * norm(y.data())));
        }
    }
    Ok((
        worst <= 1e-4,
        format!("worst normalized gap {worst:.2e} over 20 pairs x 2 geometries (<= 1e-4)"),
    ))
}

fn fbp_correctness(_: &mut Shared) -> Outcome {
    let (n, h) = (256, 0.08);
    let support = gen_disk(&PhantomSpec::disk(n, h, 7.5)).map_err(s)?;
    let geometry = parallel_geometry(720, h);
    let sino = forward_project(&support, &geometry, bins_for(&support, h)).map_err(s)?;
    let image = fbp(&sino, n, n, h, FilterWindow::Ramlak).map_err(s)?;
    let rmse = mse(&image, &support).map_err(s)?.sqrt();
    let cup = cupping_index(&image, &binary_mask(&support)).map_err(s)?;
    Ok((
        rmse < 0.05 && (0.98..=1.02).contains(&cup),
        format!("rmse {rmse:.4} (< 0.05), cupping {cup:.4} (in [0.98, 1.02])"),
    ))
}

/// FBP cupping of a scan, its support and the reconstruction grid.
fn cupping_of(sino: &bhct::Sinogram, support: &Image2D) -> Result<f64, String> {
    let n = support.width();
    let image = fbp(sino, n, n, support.pixel_size(), FilterWindow::Ramlak).map_err(s)?;
    cupping_index(&image, &binary_mask(support)).map_err(s)
}

fn canonical_disk() -> Result<Image2D, String> {
    gen_disk(&PhantomSpec::disk(256, 0.08, 7.5)).map_err(s)
}

fn beam_hardening_cups(_: &mut Shared) -> Outcome {
    let support = canonical_disk()?;
    let h = support.pixel_size();
    let scan = simulate_scan(
        &support,
        &parallel_geometry(360, h),
        bins_for(&support, h),
        &CANONICAL,
        None,
    )
    .map_err(s)?;
    let cup = cupping_of(&scan.bh, &support)?;
    Ok((
        cup > 1.05,
        format!("uncorrected cupping {cup:.4} (> 1.05) on a 15 mm disk"),
    ))
}

fn bhcn_trainer(shared: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = FeedForward::new(&[2, 16, 16, 3], Activation::Relu, &mut rng);
    let x = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
    let t = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
    let (_, grads) = net.loss_and_grad(x.view(), t.view());
    let analytic: Vec<Vec<f64>> = grads.as_slices().iter().map(|g| g.to_vec()).collect();
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        for (i, &want) in g.iter().enumerate() {
            let original = net.params_mut()[k][i];
            net.params_mut()[k][i] = original + step;
            let up = net.loss_and_grad(x.view(), t.view()).0;
            net.params_mut()[k][i] = original - step;
            let down = net.loss_and_grad(x.view(), t.view()).0;
            net.params_mut()[k][i] = original;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((numeric - want).abs() / want.abs().max(numeric.abs()).max(1e-7));
        }
    }
    let val = shared.mlp()?.val_loss;
    Ok((
        worst <= 1e-4 && val < 1e-3,
        format!("gradient check {worst:.1e} (<= 1e-4), normalized validation mse {val:.4} (< 1e-3) on 1e6 samples"),
    ))
}

fn parameter_recovery(shared: &mut Shared) -> Outcome {
    let mlp = shared.mlp()?;
    let ranges = ParamRanges::default();
    let (n, h) = (128, 0.25);
    let support = gen_disk(&PhantomSpec::disk(n, h, 12.0)).map_err(s)?;
    let geometry = parallel_geometry(180, h);
    let bins = bins_for(&support, h);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut errors = [Vec::new(), Vec::new(), Vec::new()];
    let mut worst_r2: f64 = 1.0;
    for _ in 0..20 {
        let (_, truth) = ranges.sample(&mut rng);
        let scan = simulate_scan(&support, &geometry, bins, &truth, None).map_err(s)?;
        let outcome = correct_scan(mlp, &scan.bh, &BhcOptions::new(n, h)).map_err(s)?;
        for (e, (got, want)) in errors.iter_mut().zip(
            outcome
                .estimate
                .params
                .as_array()
                .into_iter()
                .zip(truth.as_array()),
        ) {
            e.push(rel_err(got, want));
        }
        worst_r2 = worst_r2.min(r_squared(
            outcome.corrected.sino.data(),
            scan.thickness.data(),
        ));
    }
    let medians: Vec<f64> = errors.into_iter().map(median).collect();
    Ok((
        medians.iter().all(|&m| m <= 0.05) && worst_r2 >= 0.9999,
        format!(
            "median relative errors alpha {:.3} mu1 {:.3} mu2 {:.3} (<= 0.05), worst R^2 {worst_r2:.6} (>= 0.9999)",
            medians[0], medians[1], medians[2]
        ),
    ))
}

fn cupping_removal(shared: &mut Shared) -> Outcome {
    let mlp = shared.mlp()?;
    let h = 0.08;
    let phantoms = [
        ("disk", canonical_disk()?),
        (
            "component",
            gen_component(&component_spec(256, h, 11)).map_err(s)?,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, support) in &phantoms {
        let scan = simulate_scan(
            support,
            &parallel_geometry(360, h),
            bins_for(support, h),
            &CANONICAL,
            None,
        )
        .map_err(s)?;
        let before = cupping_of(&scan.bh, support)?;
        let outcome = correct_scan(mlp, &scan.bh, &BhcOptions::new(256, h)).map_err(s)?;
        let after = cupping_of(&outcome.corrected.sino, support)?;
        let ratio = (after - 1.0).abs() / (before - 1.0).abs();
        let poly =
            fit_linearization(&CANONICAL, 1.25 * max_value(&scan.thickness), 5).map_err(s)?;
        let oracle = cupping_of(&apply_correction(&scan.bh, &poly).sino, support)?;
        let oracle_ratio = (oracle - 1.0).abs() / (before - 1.0).abs();
        pass &= ratio <= 0.25;
        let a = outcome.estimate.params;
        parts.push(format!(
            "{name} {before:.4} -> {after:.4} ratio {ratio:.3} (<= 0.25; estimate {:.2}/{:.3}/{:.3}, true-parameter ratio {oracle_ratio:.4})",
            a.alpha, a.mu1, a.mu2
        ));
    }
    Ok((pass, parts.join("; ")))
}

const TRAIN_SEEDS: [u64; 4] = [21, 22, 23, 24];
const HELD_OUT_SEED: u64 = 25;
const NOISE_LEVELS: [f64; 2] = [2e4, 1e5];
const SIZE: usize = 128;
const PIXEL: f64 = 0.16;
const VIEWS: usize = 360;
const SIRT_ITERS: usize = 100;

fn corrected_noisy(
    support: &Image2D,
    params: &BhParams,
    i0: f64,
    seed: u64,
) -> Result<bhct::Sinogram, String> {
    truth_corrected_scan(support, VIEWS, params, Some(NoiseSpec { i0, seed })).map_err(s)
}

fn train_sparse_view_denoiser() -> Result<(Denoiser, Image2D), String> {
    let patches = PatchConfig {
        augment: true,
        ..PatchConfig::new(32, 16)
    };
    let mut data = PatchDataset::empty(patches.patch);
    for (k, &seed) in TRAIN_SEEDS.iter().enumerate() {
        let support = gen_component(&component_spec(SIZE, PIXEL, seed)).map_err(s)?;
        for (j, &i0) in NOISE_LEVELS.iter().enumerate() {
            let sino = corrected_noisy(&support, &CANONICAL, i0, 100 * seed + j as u64)?;
            let (inputs, target) =
                sparse_dense_set(&sino, SIZE, PIXEL, &[3, 4], SIRT_ITERS).map_err(s)?;
            for (f, input) in inputs {
                let config = PatchConfig {
                    seed: (k * 10 + j * 2 + f) as u64,
                    ..patches
                };
                let name = format!("phantom{seed}-i0{i0}-x{f}");
                data.extend(extract_patch_pairs(&input, &target, &config, &name).map_err(s)?)
                    .map_err(s)?;
            }
        }
    }
    let config = DenoiserConfig {
        epochs: 5,
        seed: 8,
        ..DenoiserConfig::default()
    };
    let (model, _) = train_denoiser(&data, &config).map_err(s)?;
    let held_out = gen_component(&component_spec(SIZE, PIXEL, HELD_OUT_SEED)).map_err(s)?;
    Ok((model, held_out))
}

/// PSNR and SSIM of the sparse-view input and of the denoised output against the dense SIRT target.
fn held_out_scores(
    model: &Denoiser,
    support: &Image2D,
    params: &BhParams,
    i0: f64,
) -> Result<[f64; 4], String> {
    let sino = corrected_noisy(support, params, i0, 9)?;
    let (inputs, target) = sparse_dense_set(&sino, SIZE, PIXEL, &[4], SIRT_ITERS).map_err(s)?;
    let input = &inputs[0].1;
    let output = denoise(model, input);
    let range = data_range(&target);
    let sp = SsimParams::with_range(range);
    Ok([
        psnr(input, &target, range).map_err(s)?,
        psnr(&output, &target, range).map_err(s)?,
        ssim(input, &target, &sp).map_err(s)?,
        ssim(&output, &target, &sp).map_err(s)?,
    ])
}

fn sparse_view_suppression(shared: &mut Shared) -> Outcome {
    let (model, held_out) = shared.denoiser()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for &i0 in &NOISE_LEVELS {
        let [p_in, p_out, s_in, s_out] = held_out_scores(model, held_out, &CANONICAL, i0)?;
        pass &= p_out - p_in >= 2.0 && s_out > s_in;
        parts.push(format!(
            "i0 {i0:.0}: psnr {p_in:.2} -> {p_out:.2} dB (gain >= 2), ssim {s_in:.3} -> {s_out:.3}"
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn homogeneity(shared: &mut Shared) -> Outcome {
    let (model, held_out) = shared.denoiser()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Image2D::new(
        64,
        64,
        PIXEL,
        (0..64 * 64).map(|_| rng.gen::<f64>()).collect(),
    )
    .map_err(s)?;
    let base = denoise(model, &x);
    let mut worst: f64 = 0.0;
    for a in [0.5, 2.0, 10.0] {
        let scaled = denoise(model, &x.map(|v| a * v));
        let peak = base.data().iter().fold(0.0f64, |m, v| m.max((a * v).abs()));
        let dev = scaled
            .data()
            .iter()
            .zip(base.data())
            .fold(0.0f64, |m, (y, b)| m.max((y - a * b).abs()));
        worst = worst.max(dev / peak);
    }
    let ood = BhParams {
        alpha: 1.3 * CANONICAL.alpha,
        mu1: 1.3 * CANONICAL.mu1,
        mu2: 1.3 * CANONICAL.mu2,
    };
    let [p_in, p_out, ..] = held_out_scores(model, held_out, &ood, NOISE_LEVELS[1])?;
    let gain = p_out - p_in;
    Ok((
        worst < 1e-5 && gain >= 1.0,
        format!("max relative deviation {worst:.1e} (< 1e-5), out-of-distribution psnr gain {gain:.2} dB (>= 1)"),
    ))
}

fn pipeline_determinism(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(s)?;
    let data = synth_training_set(&ParamRanges::default(), 20_000, 3).map_err(s)?;
    let (mlp, _) = train_bhcn(
        &data,
        &TrainConfig {
            hidden: vec![16, 16],
            epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        },
    )
    .map_err(s)?;
    std::fs::write(dir.path().join("bhcn.json"), mlp.to_json()).map_err(s)?;

    let support = gen_component(&component_spec(64, 0.16, 4)).map_err(s)?;
    let sino = corrected_noisy(&support, &CANONICAL, 1e5, 4)?;
    let (inputs, target) = sparse_dense_set(&sino, 64, 0.16, &[4], 20).map_err(s)?;
    let pairs = extract_patch_pairs(&inputs[0].1, &target, &PatchConfig::new(32, 16), "train")
        .map_err(s)?;
    let (dn, _) = train_denoiser(
        &pairs,
        &DenoiserConfig {
            base_channels: 4,
            epochs: 1,
            seed: 4,
            ..DenoiserConfig::default()
        },
    )
    .map_err(s)?;
    std::fs::write(dir.path().join("denoiser.json"), dn.to_json()).map_err(s)?;

    let config: bhct_cli::config::PipelineConfig = serde_json::from_value(serde_json::json!({
        "version": 1,
        "input": {
            "source": "simulate",
            "phantom": {"kind": "component", "spec": serde_json::to_value(component_spec(96, 0.16, 12)).map_err(s)?},
            "geometry": {"kind": "parallel", "num_views": 180, "detector_spacing": 0.16},
            "params": {"alpha": 2.0, "mu1": 0.35, "mu2": 0.12},
            "noise": {"i0": 1e5, "seed": 5}
        },
        "bhc": {"mode": "network", "model": "bhcn.json"},
        "recon_size": 96,
        "pixel_size": 0.16,
        "sparse_factor": 4,
        "denoiser": "denoiser.json",
        "reference_iters": 30
    }))
    .map_err(s)?;
    let mut reports = Vec::new();
    for run in ["first", "second"] {
        let out = dir.path().join(run);
        bhct_cli::pipeline::run_pipeline(&config, dir.path(), &out)
            .map_err(|e| format!("{e:#}"))?;
        reports.push(std::fs::read(out.join("report.json")).map_err(s)?);
    }
    let same = reports[0] == reports[1];
    Ok((
        same,
        format!(
            "report.json {} across two runs ({} bytes)",
            if same { "identical" } else { "differs" },
            reports[0].len()
        ),
    ))
}
