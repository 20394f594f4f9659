//! One function per subcommand. Each reads a config, writes into `out` and
//! returns nothing on success.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bhct::bhcn::{
    apply_correction, estimate_params, estimate_thickness, fit_linearization, synth_training_set,
    train_bhcn, LinearizationPoly, Mlp,
};
use bhct::denoiser::{denoise, extract_patch_pairs, train_denoiser, Denoiser, PatchDataset};
use bhct::io::{export_pgm, load_image, load_sinogram, save_image, save_sinogram_with_meta};
use bhct::metrics::{data_range, line_profile, profile_csv, psnr, ssim, SsimParams};
use bhct::phantom::{gen_component, gen_disk};
use bhct::physics::simulate_scan;
use bhct::projector::{default_num_bins, Grid};
use bhct::recon::{fbp, sirt, subsample_views};
use bhct::Image2D;
use serde_json::{json, Map, Value};

use crate::config::{self, resolve, PhantomKind, ReconMethod};

/// JSON number, or a string sentinel for infinities and NaN.
pub fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// PGM preview windowed to the image's own range.
pub fn preview(image: &Image2D, path: &Path) -> Result<()> {
    let (lo, hi) = image.min_max();
    let window = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    export_pgm(image, path, window)?;
    Ok(())
}

fn base_dir(config: &Path) -> &Path {
    config.parent().unwrap_or_else(|| Path::new("."))
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn generate_phantom(kind: PhantomKind, spec: &bhct::phantom::PhantomSpec) -> Result<Image2D> {
    Ok(match kind {
        PhantomKind::Disk => gen_disk(spec)?,
        PhantomKind::Component => gen_component(spec)?,
    })
}

pub fn phantom(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: config::PhantomConfig = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.spec.seed = s;
    }
    let image = generate_phantom(cfg.kind, &cfg.spec)?;
    prepare(out)?;
    save_image(out.join("phantom"), &image)?;
    export_pgm(&image, out.join("phantom.pgm"), (0.0, 1.0))?;
    Ok(())
}

pub fn scan(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: config::ScanConfig = config::load(config_path)?;
    if let (Some(s), Some(n)) = (seed, cfg.noise.as_mut()) {
        n.seed = s;
    }
    let support = load_image(resolve(base_dir(config_path), &cfg.phantom))?;
    let geometry = cfg.geometry.build()?;
    let num_bins = cfg
        .geometry
        .num_bins
        .unwrap_or_else(|| default_num_bins(&Grid::of(&support), geometry.detector_spacing));
    let s = simulate_scan(&support, &geometry, num_bins, &cfg.params, cfg.noise)?;
    prepare(out)?;
    let mut meta = Map::new();
    meta.insert("params".into(), serde_json::to_value(cfg.params)?);
    if let Some(n) = cfg.noise {
        meta.insert("noise".into(), serde_json::to_value(n)?);
    }
    save_sinogram_with_meta(out.join("bh"), &s.bh, meta.clone())?;
    save_sinogram_with_meta(out.join("ideal"), &s.ideal, meta)?;
    save_sinogram_with_meta(out.join("thickness"), &s.thickness, Map::new())?;
    Ok(())
}

pub fn bhc_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: config::BhcTrainConfig = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.data_seed = s;
        cfg.train.seed = s;
    }
    let data = synth_training_set(&cfg.ranges, cfg.samples, cfg.data_seed)?;
    let (mlp, history) = train_bhcn(&data, &cfg.train)?;
    prepare(out)?;
    fs::write(out.join("bhcn.json"), mlp.to_json())?;
    let mut csv = String::from("epoch,train_loss,val_loss,learning_rate\n");
    for (i, ((t, v), lr)) in history
        .train_loss
        .iter()
        .zip(&history.val_loss)
        .zip(&history.learning_rate)
        .enumerate()
    {
        csv.push_str(&format!("{i},{t},{v},{lr}\n"));
    }
    fs::write(out.join("history.csv"), csv)?;
    write_json(
        &out.join("train_report.json"),
        &json!({
            "samples": cfg.samples,
            "train_loss": number(mlp.train_loss),
            "val_loss": number(mlp.val_loss),
            "epochs": cfg.train.epochs,
        }),
    )
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    Mlp::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    Denoiser::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

pub fn bhc_fit(config_path: &Path, out: &Path, _seed: Option<u64>) -> Result<()> {
    let cfg: config::BhcFitConfig = config::load(config_path)?;
    let base = base_dir(config_path);
    let mlp = load_mlp(&resolve(base, &cfg.model))?;
    let sino = load_sinogram(resolve(base, &cfg.sinogram))?;
    let thickness = estimate_thickness(&sino, cfg.recon_size, cfg.pixel_size)
        .context("thickness estimation")?;
    let estimate = estimate_params(&mlp, &sino, &thickness, cfg.d_min)?;
    let d_max = cfg
        .d_max
        .unwrap_or_else(|| 1.25 * thickness.data().iter().cloned().fold(0.0, f64::max));
    let poly = fit_linearization(&estimate.params, d_max, cfg.degree)?;
    prepare(out)?;
    save_sinogram_with_meta(out.join("thickness"), &thickness, Map::new())?;
    write_json(
        &out.join("fit.json"),
        &json!({
            "params": estimate.params,
            "bins_used": estimate.bins_used,
            "d_min": cfg.d_min,
            "d_max": d_max,
            "degree": cfg.degree,
            "max_residual": poly.max_residual,
            "poly": poly,
        }),
    )
}

pub fn read_poly(path: &Path) -> Result<LinearizationPoly> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let poly = value
        .get("poly")
        .with_context(|| format!("{}: no `poly` field", path.display()))?;
    serde_json::from_value(poly.clone()).with_context(|| format!("{}: at `poly`", path.display()))
}

pub fn bhc_apply(config_path: &Path, out: &Path, _seed: Option<u64>) -> Result<()> {
    let cfg: config::BhcApplyConfig = config::load(config_path)?;
    let base = base_dir(config_path);
    let sino = load_sinogram(resolve(base, &cfg.sinogram))?;
    let poly = read_poly(&resolve(base, &cfg.fit))?;
    let corrected = apply_correction(&sino, &poly);
    if corrected.extrapolated_bins > 0 {
        eprintln!(
            "warning: {} bins lie above the fitted domain (p_max = {}) and were extrapolated",
            corrected.extrapolated_bins, poly.p_max
        );
    }
    prepare(out)?;
    let mut meta = Map::new();
    meta.insert(
        "extrapolated_bins".into(),
        json!(corrected.extrapolated_bins),
    );
    save_sinogram_with_meta(out.join("corrected"), &corrected.sino, meta)?;
    Ok(())
}

pub fn recon(config_path: &Path, out: &Path, _seed: Option<u64>) -> Result<()> {
    let cfg: config::ReconConfig = config::load(config_path)?;
    let sino = load_sinogram(resolve(base_dir(config_path), &cfg.sinogram))?;
    let sino = subsample_views(&sino, cfg.sparse_factor)?;
    prepare(out)?;
    let image = match cfg.method {
        ReconMethod::Fbp => fbp(&sino, cfg.size, cfg.size, cfg.pixel_size, cfg.window)?,
        ReconMethod::Sirt => {
            let run = sirt(
                &sino,
                cfg.size,
                cfg.size,
                cfg.pixel_size,
                cfg.iters,
                cfg.nonneg,
            )?;
            let mut csv = String::from("iteration,residual\n");
            for (i, r) in run.residuals.iter().enumerate() {
                csv.push_str(&format!("{},{r}\n", i + 1));
            }
            fs::write(out.join("residuals.csv"), csv)?;
            run.image
        }
    };
    save_image(out.join("image"), &image)?;
    preview(&image, &out.join("image.pgm"))
}

pub fn dn_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: config::DnTrainConfig = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.patch.seed = s;
        cfg.train.seed = s;
    }
    if cfg.manifest.is_empty() {
        bail!("manifest is empty");
    }
    let base = base_dir(config_path);
    let mut data = PatchDataset::empty(cfg.patch.patch);
    for (i, entry) in cfg.manifest.iter().enumerate() {
        let (ip, tp) = (resolve(base, &entry.input), resolve(base, &entry.target));
        let input = load_image(&ip)?;
        let target = load_image(&tp)?;
        let name = format!("manifest[{i}] ({} -> {})", ip.display(), tp.display());
        let mut patch = cfg.patch;
        patch.seed = cfg.patch.seed.wrapping_add(i as u64);
        let pairs =
            extract_patch_pairs(&input, &target, &patch, &name).with_context(|| name.clone())?;
        data.extend(pairs)?;
    }
    let (model, history) = train_denoiser(&data, &cfg.train)?;
    prepare(out)?;
    fs::write(out.join("denoiser.json"), model.to_json())?;
    fs::write(out.join("loss_history.csv"), history.to_csv())?;
    Ok(())
}

pub fn dn_apply(config_path: &Path, out: &Path, _seed: Option<u64>) -> Result<()> {
    let cfg: config::DnApplyConfig = config::load(config_path)?;
    let base = base_dir(config_path);
    let model = load_denoiser(&resolve(base, &cfg.model))?;
    let image = load_image(resolve(base, &cfg.image))?;
    let result = denoise(&model, &image);
    prepare(out)?;
    save_image(out.join("denoised"), &result)?;
    preview(&result, &out.join("denoised.pgm"))
}

pub fn eval(config_path: &Path, out: &Path, _seed: Option<u64>) -> Result<()> {
    let cfg: config::EvalConfig = config::load(config_path)?;
    let base = base_dir(config_path);
    let (ip, rp) = (resolve(base, &cfg.image), resolve(base, &cfg.reference));
    let image = load_image(&ip)?;
    let reference = load_image(&rp)?;
    let range = cfg.data_range.unwrap_or_else(|| data_range(&reference));
    let p = psnr(&image, &reference, range)?;
    let s = ssim(&image, &reference, &SsimParams::with_range(range))?;
    prepare(out)?;
    if let Some(row) = cfg.profile_row {
        fs::write(
            out.join("profile_image.csv"),
            profile_csv(&line_profile(&image, row)?),
        )?;
        fs::write(
            out.join("profile_reference.csv"),
            profile_csv(&line_profile(&reference, row)?),
        )?;
    }
    write_json(
        &out.join("eval.json"),
        &json!({
            "image": ip,
            "reference": rp,
            "data_range": range,
            "psnr_db": number(p),
            "ssim": number(s),
        }),
    )
}
