use std::path::Path;
use std::process::{Command, Output};

use osdf_fed::director::{self, DirectorConfig};
use osdf_fed::origin::{self, OriginConfig};
use osdf_fed::GeoPoint;
use osdf_solar::fits::{read_fits, write_fits, Bitpix, FitsImage};
use serde_json::Value;

fn filament(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filament"))
        .args(args)
        .env_remove("FEDCTL_DIRECTOR")
        .output()
        .expect("filament runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> (String, Value) {
    let image = dir.join(name);
    let image = image.to_str().unwrap();
    let mut args = vec!["synth", "--out", image, "--noise", "0.02"];
    args.extend_from_slice(extra);
    stdout_json(&filament(&args));
    let truth = std::fs::read(dir.join(name).with_extension("truth.json")).unwrap();
    (image.to_owned(), serde_json::from_slice(&truth).unwrap())
}

#[test]
fn synth_then_run_locally() {
    let dir = tempfile::tempdir().unwrap();
    let (image, truth) = synth(dir.path(), "sun.fits", &["--seed", "4"]);
    let raw = read_fits(&std::fs::read(&image).unwrap()).unwrap();
    assert_eq!(raw.pixels.dim(), (256, 256));

    let out_dir = dir.path().join("products");
    let report = stdout_json(&filament(&["run", "--input", &image, "--output", out_dir.to_str().unwrap()]));
    assert_eq!(report["filaments"], 3);
    assert_eq!(report["products"].as_array().unwrap().len(), 3);

    let catalog: Value = serde_json::from_slice(&std::fs::read(out_dir.join("sun.catalog.json")).unwrap()).unwrap();
    assert_eq!(catalog["image"], "sun.fits");
    assert_eq!(catalog["config"]["threshold_method"], "mad");
    let entries = catalog["filaments"].as_array().unwrap();
    let want = truth["filaments"].as_array().unwrap();
    assert_eq!(entries.len(), want.len());
    for (got, want) in entries.iter().zip(want) {
        let (g, w) = (got["area_px"].as_f64().unwrap(), want["area_px"].as_f64().unwrap());
        assert!((g - w).abs() <= 0.15 * w, "{g} vs {w}");
    }

    let labels = read_fits(&std::fs::read(out_dir.join("sun.labels.fits")).unwrap()).unwrap();
    assert_eq!(labels.pixels.iter().cloned().fold(0.0, f64::max), 3.0);
    let diffused = read_fits(&std::fs::read(out_dir.join("sun.diffused.fits")).unwrap()).unwrap();
    assert!(diffused.pixels.iter().all(|v| (0.0..=1.0).contains(v)));

    let sigma_dir = dir.path().join("sigma");
    let args = ["run", "--input", &image, "--output", sigma_dir.to_str().unwrap(), "--threshold", "sigma", "--conduction", "rational"];
    let report = stdout_json(&filament(&args));
    assert_eq!(report["filaments"], 3);
    let catalog: Value = serde_json::from_slice(&std::fs::read(sigma_dir.join("sun.catalog.json")).unwrap()).unwrap();
    assert_eq!(catalog["config"]["threshold_method"], "sigma");
    assert_eq!(catalog["config"]["conduction"], "rational");
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (image, _) = synth(dir.path(), "sun.fits", &[]);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let bad = filament(&["run", "--input", &image, "--output", out, "--lambda", "0.5"]);
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));

    let dark = dir.path().join("dark.fits");
    let zeros = FitsImage::new(ndarray::Array2::zeros((32, 32)));
    std::fs::write(&dark, write_fits(&zeros, Bitpix::I16).unwrap()).unwrap();
    let bad = filament(&["run", "--input", dark.to_str().unwrap(), "--output", out]);
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));

    let missing = filament(&["run", "--input", "/no/such/sun.fits", "--output", out]);
    assert_eq!(missing.status.code(), Some(1));

    let junk = dir.path().join("junk.fits");
    std::fs::write(&junk, b"not a fits file").unwrap();
    let bad = filament(&["run", "--input", junk.to_str().unwrap(), "--output", out]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!Path::new(out).join("junk.catalog.json").exists());

    let nofed = filament(&["run", "--input", "fed:/bbso/raw/sun.fits", "--output", out]);
    assert_eq!(nofed.status.code(), Some(1));
}

#[tokio::test(flavor = "multi_thread")]
async fn federation_round_trip_matches_local_run() {
    let dir = tempfile::tempdir().unwrap();
    let (director, _state) = director::start(&DirectorConfig::local(Some(dir.path().join("director"))))
        .await
        .unwrap();
    let root = dir.path().join("origin");
    std::fs::create_dir_all(root.join("raw")).unwrap();
    let _origin = origin::start(&OriginConfig {
        name: "bbso-origin".into(),
        prefix: "/bbso".parse().unwrap(),
        root_dir: root.clone(),
        director_url: director.base_url(),
        listen_addr: "127.0.0.1:0".into(),
        location: GeoPoint::new(34.26, -116.92).unwrap(),
        heartbeat_s: 100,
        quota_bytes: None,
    })
    .await
    .unwrap();

    let (image, _) = synth(&root.join("raw"), "sun.fits", &["--seed", "11"]);
    let local = dir.path().join("local");
    let url = director.base_url();
    let (image2, local2) = (image.clone(), local.clone());
    let (fed_out, local_out) = tokio::task::spawn_blocking(move || {
        let fed = filament(&["run", "--input", "fed:/bbso/raw/sun.fits", "--output", "fed:/bbso/processed", "--director", &url]);
        let local = filament(&["run", "--input", &image2, "--output", local2.to_str().unwrap()]);
        (fed, local)
    })
    .await
    .unwrap();
    let report = stdout_json(&fed_out);
    stdout_json(&local_out);
    assert_eq!(report["products"][2], "fed:/bbso/processed/sun.catalog.json");
    for name in ["sun.diffused.fits", "sun.labels.fits", "sun.catalog.json"] {
        let stored = std::fs::read(root.join("processed").join(name)).unwrap();
        assert_eq!(stored, std::fs::read(local.join(name)).unwrap(), "{name}");
    }
}
