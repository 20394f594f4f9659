//! The full workflow: scan, projection-domain correction, sparse-view FBP,
//! denoising and evaluation, with every intermediate written to disk.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/inputs/   config echo, phantom
//! <out>/stages/   sinograms, reconstructions, previews, profile CSVs
//! <out>/report.json
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bhct::bhcn::{
    apply_correction, estimate_params, estimate_thickness, fit_linearization, LinearizationPoly,
};
use bhct::denoiser::denoise;
use bhct::io::{save_image, save_sinogram, save_sinogram_with_meta};
use bhct::metrics::{cupping_index, data_range, line_profile, profile_csv, psnr, ssim, SsimParams};
use bhct::physics::simulate_scan;
use bhct::projector::{default_num_bins, Grid};
use bhct::recon::{fbp, sirt, subsample_views};
use bhct::segment::{binarize, otsu_threshold, DEFAULT_BINS};
use bhct::{Image2D, Sinogram};
use serde_json::{json, Map, Value};

use crate::commands::{generate_phantom, load_denoiser, load_mlp, number, preview, write_json};
use crate::config::{resolve, BhcMode, PipelineConfig, PipelineInput, ReferenceKind};

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("stage `{name}` failed"))
}

struct Acquired {
    bh: Sinogram,
    ideal: Option<Sinogram>,
    support: Option<Image2D>,
    true_params: Option<bhct::BhParams>,
    true_thickness: Option<Sinogram>,
}

fn max_value(s: &Sinogram) -> f64 {
    s.data().iter().cloned().fold(0.0, f64::max)
}

/// Runs the pipeline and returns the report that was written to `report.json`.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<Value> {
    let inputs = out.join("inputs");
    let stages = out.join("stages");
    fs::create_dir_all(&inputs).with_context(|| format!("creating {}", inputs.display()))?;
    fs::create_dir_all(&stages).with_context(|| format!("creating {}", stages.display()))?;
    write_json(&inputs.join("config.json"), &serde_json::to_value(cfg)?)?;
    let (n, h) = (cfg.recon_size, cfg.pixel_size);

    let acq = stage("scan", || match &cfg.input {
        PipelineInput::Simulate {
            phantom,
            geometry,
            params,
            noise,
        } => {
            let support = generate_phantom(phantom.kind, &phantom.spec)?;
            save_image(inputs.join("phantom"), &support)?;
            let g = geometry.build()?;
            let bins = geometry
                .num_bins
                .unwrap_or_else(|| default_num_bins(&Grid::of(&support), g.detector_spacing));
            let s = simulate_scan(&support, &g, bins, params, *noise)?;
            save_sinogram(stages.join("scan_bh"), &s.bh)?;
            save_sinogram(stages.join("scan_ideal"), &s.ideal)?;
            save_sinogram(stages.join("scan_thickness"), &s.thickness)?;
            Ok(Acquired {
                bh: s.bh,
                ideal: Some(s.ideal),
                support: Some(support),
                true_params: Some(*params),
                true_thickness: Some(s.thickness),
            })
        }
        PipelineInput::Measured { sinogram } => Ok(Acquired {
            bh: bhct::io::load_sinogram(resolve(base, sinogram))?,
            ideal: None,
            support: None,
            true_params: None,
            true_thickness: None,
        }),
    })?;

    let mut bhc_report = Map::new();
    let poly = stage("bhc", || {
        let poly = match &cfg.bhc {
            BhcMode::Off => LinearizationPoly::identity(),
            BhcMode::Network {
                model,
                d_min,
                degree,
            } => {
                let mlp = load_mlp(&resolve(base, model))?;
                let thickness = estimate_thickness(&acq.bh, n, h)?;
                save_sinogram(stages.join("thickness_estimate"), &thickness)?;
                let est = estimate_params(&mlp, &acq.bh, &thickness, *d_min)?;
                bhc_report.insert("estimated_params".into(), serde_json::to_value(est.params)?);
                bhc_report.insert("bins_used".into(), json!(est.bins_used));
                fit_linearization(&est.params, 1.25 * max_value(&thickness), *degree)?
            }
            BhcMode::TrueParams { degree } => {
                let (Some(p), Some(t)) = (acq.true_params, acq.true_thickness.as_ref()) else {
                    bail!("`true-params` correction needs a simulated input");
                };
                fit_linearization(&p, 1.25 * max_value(t), *degree)?
            }
        };
        if let Some(p) = acq.true_params {
            bhc_report.insert("true_params".into(), serde_json::to_value(p)?);
        }
        bhc_report.insert("poly".into(), serde_json::to_value(&poly)?);
        Ok(poly)
    })?;
    let corrected = apply_correction(&acq.bh, &poly);
    bhc_report.insert(
        "extrapolated_bins".into(),
        json!(corrected.extrapolated_bins),
    );
    let mut meta = Map::new();
    meta.insert(
        "extrapolated_bins".into(),
        json!(corrected.extrapolated_bins),
    );
    save_sinogram_with_meta(stages.join("corrected"), &corrected.sino, meta)?;

    let (fbp_uncorrected, fbp_corrected) = stage("fbp", || {
        let sparse_bh = subsample_views(&acq.bh, cfg.sparse_factor)?;
        let sparse_corr = subsample_views(&corrected.sino, cfg.sparse_factor)?;
        Ok((
            fbp(&sparse_bh, n, n, h, cfg.window)?,
            fbp(&sparse_corr, n, n, h, cfg.window)?,
        ))
    })?;

    let denoised = stage("denoise", || {
        cfg.denoiser
            .as_ref()
            .map(|p| Ok(denoise(&load_denoiser(&resolve(base, p))?, &fbp_corrected)))
            .transpose()
    })?;

    let reference = stage("reference", || {
        Ok(match cfg.reference {
            ReferenceKind::Sirt => {
                let dense = acq.ideal.as_ref().unwrap_or(&corrected.sino);
                Some(sirt(dense, n, n, h, cfg.reference_iters, true)?.image)
            }
            ReferenceKind::Phantom => {
                let (Some(s), Some(p)) = (&acq.support, acq.true_params) else {
                    bail!("a phantom reference needs a simulated input");
                };
                if s.width() != n || s.height() != n {
                    bail!(
                        "phantom is {}x{}, reconstruction grid is {n}x{n}",
                        s.width(),
                        s.height()
                    );
                }
                Some(s.map(|v| v * p.effective_mu()))
            }
        })
    })?;

    let report = stage("eval", || {
        let mask = match &acq.support {
            Some(s) if s.width() == n && s.height() == n => {
                s.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
            }
            _ => {
                let t = otsu_threshold(&fbp_corrected, DEFAULT_BINS)?;
                binarize(&fbp_corrected, t)
            }
        };
        let row = cfg.profile_row.unwrap_or(n / 2);
        let range = reference.as_ref().map(data_range);
        let mut stage_metrics = Map::new();
        let mut images: Vec<(&str, &Image2D)> = vec![
            ("fbp_uncorrected", &fbp_uncorrected),
            ("fbp_corrected", &fbp_corrected),
        ];
        if let Some(d) = &denoised {
            images.push(("denoised", d));
        }
        if let Some(r) = &reference {
            images.push(("reference", r));
        }
        for (name, image) in &images {
            save_image(stages.join(name), image)?;
            preview(image, &stages.join(format!("{name}.pgm")))?;
            fs::write(
                stages.join(format!("profile_{name}.csv")),
                profile_csv(&line_profile(image, row)?),
            )?;
            let mut m = Map::new();
            m.insert("cupping_index".into(), number(cupping_index(image, &mask)?));
            if let (Some(r), Some(range)) = (&reference, range) {
                if *name != "reference" {
                    m.insert("psnr_db".into(), number(psnr(image, r, range)?));
                    m.insert(
                        "ssim".into(),
                        number(ssim(image, r, &SsimParams::with_range(range))?),
                    );
                }
            }
            stage_metrics.insert(name.to_string(), Value::Object(m));
        }
        let report = json!({
            "version": 1,
            "sparse_factor": cfg.sparse_factor,
            "data_range": range.map(number),
            "profile_row": row,
            "bhc": Value::Object(bhc_report.clone()),
            "stages": Value::Object(stage_metrics),
        });
        write_json(&out.join("report.json"), &report)?;
        Ok(report)
    })?;
    Ok(report)
}
