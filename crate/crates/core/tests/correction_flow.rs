use bhct::bhcn::{
    apply_correction, correct_scan, estimate_thickness, fit_linearization, synth_training_set,
    train_bhcn, BhcOptions, Mlp, ParamRanges, TrainConfig,
};
use bhct::io::{load_image, load_sinogram, save_image, save_sinogram};
use bhct::metrics::cupping_index;
use bhct::phantom::{gen_disk, PhantomSpec};
use bhct::physics::{add_noise, simulate_scan};
use bhct::recon::{fbp, FilterWindow};
use bhct::{uniform_angles, BhParams, Geometry};

const CANONICAL: BhParams = BhParams {
    alpha: 2.0,
    mu1: 0.35,
    mu2: 0.12,
};

fn disk_scan() -> (bhct::Image2D, bhct::physics::Scan) {
    let disk = gen_disk(&PhantomSpec::disk(96, 0.15, 5.5)).unwrap();
    let g = Geometry::parallel(uniform_angles(180, false), 0.15);
    let scan = simulate_scan(&disk, &g, 140, &CANONICAL, None).unwrap();
    (disk, scan)
}

fn cupping(sino: &bhct::Sinogram, support: &bhct::Image2D) -> f64 {
    let image = fbp(sino, 96, 96, 0.15, FilterWindow::Ramlak).unwrap();
    cupping_index(&image, &support.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })).unwrap()
}

#[test]
fn exact_parameters_remove_cupping() {
    let (disk, scan) = disk_scan();
    let before = cupping(&scan.bh, &disk);
    let poly = fit_linearization(&CANONICAL, 15.0, 5).unwrap();
    let corrected = apply_correction(&scan.bh, &poly);
    assert_eq!(corrected.extrapolated_bins, 0);
    let after = cupping(&corrected.sino, &disk);
    assert!(before > 1.05, "{before}");
    assert!(
        (after - 1.0).abs() < 0.05 * (before - 1.0),
        "{before} -> {after}"
    );
    for (c, i) in corrected.sino.data().iter().zip(scan.ideal.data()) {
        assert!((c - i).abs() < 1e-3 * i.max(1.0));
    }
}

#[test]
fn thickness_estimate_tracks_the_truth() {
    let (_, scan) = disk_scan();
    let est = estimate_thickness(&scan.bh, 96, 0.15).unwrap();
    let mean_err = est
        .data()
        .iter()
        .zip(scan.thickness.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / est.data().len() as f64;
    assert!(mean_err < 0.15, "{mean_err}");
}

#[test]
fn trained_network_runs_the_whole_chain() {
    let data = synth_training_set(&ParamRanges::default(), 4_000, 2).unwrap();
    let config = TrainConfig {
        hidden: vec![16, 16],
        epochs: 3,
        batch: 64,
        seed: 2,
        ..TrainConfig::default()
    };
    let (mlp, _) = train_bhcn(&data, &config).unwrap();
    let (_, scan) = disk_scan();
    let out = correct_scan(&mlp, &scan.bh, &BhcOptions::new(96, 0.15)).unwrap();
    assert!(out.estimate.bins_used > 0);
    assert!(out.estimate.params.validate().is_ok());
    assert!(out.poly.is_increasing(200));

    let again = Mlp::from_json(&mlp.to_json()).unwrap();
    assert_eq!(again, mlp);
}

#[test]
fn noise_is_unbiased_at_high_counts() {
    let (_, scan) = disk_scan();
    let noisy = add_noise(&scan.bh, 1e7, 5).unwrap();
    let diff: f64 = noisy
        .data()
        .iter()
        .zip(scan.bh.data())
        .map(|(a, b)| a - b)
        .sum::<f64>();
    assert!((diff / noisy.data().len() as f64).abs() < 1e-3);
    assert_ne!(noisy.data(), scan.bh.data());
}

#[test]
fn arrays_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (disk, scan) = disk_scan();
    save_image(dir.path().join("disk"), &disk).unwrap();
    save_sinogram(dir.path().join("bh"), &scan.bh).unwrap();
    let image = load_image(dir.path().join("disk")).unwrap();
    let sino = load_sinogram(dir.path().join("bh")).unwrap();
    assert_eq!(image.pixel_size(), disk.pixel_size());
    for (a, b) in image.data().iter().zip(disk.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!(sino.geometry(), scan.bh.geometry());
    assert!(sino.congruent(&scan.bh));
}
