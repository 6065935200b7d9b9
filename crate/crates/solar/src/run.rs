//! End-to-end runs: fetch an image, detect filaments, write three products.
//!
//! Inputs and outputs are either local paths or federation paths written as
//! `fed:/namespace/...`. Products are rendered in memory before anything is
//! written, so a detection or encoding failure leaves nothing behind.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use osdf_fed::client::{ClientError, FedClient};
use osdf_fed::ObjectPath;
use serde::{Deserialize, Serialize};

use crate::fits::{read_fits, write_fits, Bitpix, Card, CardValue, FitsError, FitsImage};
use crate::pipeline::{detect, Detection, Filament, PipelineConfig, PipelineError};

pub const FED_SCHEME: &str = "fed:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Local(PathBuf),
    Federation(ObjectPath),
}

impl FromStr for Location {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_prefix(FED_SCHEME) {
            Some(path) => path.parse().map(Location::Federation).map_err(|e| format!("{e}")),
            None if s.is_empty() => Err("empty path".into()),
            None => Ok(Location::Local(PathBuf::from(s))),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Local(p) => write!(f, "{}", p.display()),
            Location::Federation(p) => write!(f, "{FED_SCHEME}{p}"),
        }
    }
}

impl Location {
    fn file_name(&self) -> Option<String> {
        match self {
            Location::Local(p) => p.file_name().map(|n| n.to_string_lossy().into_owned()),
            Location::Federation(p) => Some(p.file_name().to_owned()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("fetch {path}: {source}")]
    Fetch { path: String, source: ClientError },
    #[error("store {path}: {source}")]
    Store { path: String, source: ClientError },
    #[error("a federation path needs a director URL")]
    NoDirector,
    #[error("{0}: cannot derive a product name")]
    NoStem(String),
    #[error("decode: {0}")]
    Fits(#[from] FitsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Contents of `<stem>.catalog.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogFile {
    pub image: String,
    pub threshold: f64,
    pub config: PipelineConfig,
    pub filaments: Vec<Filament>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub fetch_ms: f64,
    pub detect_ms: f64,
    pub encode_ms: f64,
    pub write_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub input: String,
    pub products: Vec<String>,
    pub filaments: usize,
    pub threshold: f64,
    pub timings: Timings,
}

/// The three encoded products, named relative to the output prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Products {
    pub stem: String,
    pub files: Vec<(String, Vec<u8>)>,
}

/// Strips a `.fits`, `.fit` or `.fts` extension.
pub fn product_stem(file_name: &str) -> &str {
    for ext in [".fits", ".fit", ".fts"] {
        if let Some(stem) = file_name.strip_suffix(ext).filter(|s| !s.is_empty()) {
            return stem;
        }
    }
    file_name
}

fn config_cards(cfg: &PipelineConfig) -> Vec<Card> {
    vec![
        Card::new("KAPPA", CardValue::Real(cfg.kappa)).with_comment("conduction scale"),
        Card::new("LAMBDA", CardValue::Real(cfg.lam)).with_comment("diffusion step weight"),
        Card::new("NITER", CardValue::Integer(cfg.iterations as i64)),
    ]
}

pub fn render_products(image_name: &str, det: &Detection, cfg: &PipelineConfig) -> Result<Products, RunError> {
    let stem = product_stem(image_name).to_owned();

    let mut diffused = FitsImage::new(det.diffused.clone());
    diffused.header.cards.extend(config_cards(cfg));
    let diffused = write_fits(&diffused, Bitpix::F32)?;

    let label_values: Array2<f64> = det.catalog.label_map.mapv(f64::from);
    let mut labels = FitsImage::new(label_values);
    labels.header.cards.extend(config_cards(cfg));
    labels.header.push(Card::new("NLABELS", CardValue::Integer(det.catalog.entries.len() as i64)));
    labels.header.push(Card::new("THRESH", CardValue::Real(det.threshold)).with_comment("normalized units"));
    let labels = write_fits(&labels, Bitpix::I16)?;

    let catalog = CatalogFile {
        image: image_name.to_owned(),
        threshold: det.threshold,
        config: cfg.clone(),
        filaments: det.catalog.entries.clone(),
    };
    let mut catalog = serde_json::to_vec_pretty(&catalog).expect("catalog serializes");
    catalog.push(b'\n');

    Ok(Products {
        files: vec![
            (format!("{stem}.diffused.fits"), diffused),
            (format!("{stem}.labels.fits"), labels),
            (format!("{stem}.catalog.json"), catalog),
        ],
        stem,
    })
}

/// Decodes `bytes` as FITS, detects filaments and renders the products.
pub fn process_bytes(image_name: &str, bytes: &[u8], cfg: &PipelineConfig) -> Result<(Detection, Products), RunError> {
    let image = read_fits(bytes)?;
    let det = detect(&image, cfg)?;
    let products = render_products(image_name, &det, cfg)?;
    Ok((det, products))
}

async fn fetch(input: &Location, client: Option<&FedClient>) -> Result<Vec<u8>, RunError> {
    match input {
        Location::Local(p) => std::fs::read(p).map_err(|source| RunError::Io {
            path: p.display().to_string(),
            source,
        }),
        Location::Federation(path) => {
            let client = client.ok_or(RunError::NoDirector)?;
            let scratch = tempfile::tempdir().map_err(|source| RunError::Io {
                path: "tempdir".into(),
                source,
            })?;
            let dest = scratch.path().join("input.fits");
            client.fetch(path, &dest, false).await.map_err(|source| RunError::Fetch {
                path: path.to_string(),
                source,
            })?;
            std::fs::read(&dest).map_err(|source| RunError::Io {
                path: dest.display().to_string(),
                source,
            })
        }
    }
}

fn write_local(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>, RunError> {
    let io = |path: &Path, source| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, bytes) {
            for done in &written {
                let _ = std::fs::remove_file(done);
            }
            let _ = std::fs::remove_file(&path);
            return Err(io(&path, e));
        }
        written.push(path);
    }
    Ok(written)
}

/// Runs the whole chain. `client` is required when either side is a
/// federation path.
pub async fn run_pipeline(
    input: &Location,
    output: &Location,
    cfg: &PipelineConfig,
    client: Option<&FedClient>,
) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let image_name = input.file_name().ok_or_else(|| RunError::NoStem(input.to_string()))?;
    let mut timings = Timings::default();

    let started = Instant::now();
    let bytes = fetch(input, client).await?;
    timings.fetch_ms = ms(started);

    let started = Instant::now();
    let image = read_fits(&bytes)?;
    let det = detect(&image, cfg)?;
    timings.detect_ms = ms(started);

    let started = Instant::now();
    let products = render_products(&image_name, &det, cfg)?;
    timings.encode_ms = ms(started);

    let started = Instant::now();
    let paths = match output {
        Location::Local(dir) => write_local(dir, &products.files)?
            .into_iter()
            .map(|p| p.display().to_string())
            .collect(),
        Location::Federation(prefix) => {
            let client = client.ok_or(RunError::NoDirector)?;
            let mut stored = Vec::new();
            for (name, data) in &products.files {
                let path = prefix.join(name).expect("product names are valid segments");
                client.store_bytes(data.clone(), &path).await.map_err(|source| RunError::Store {
                    path: path.to_string(),
                    source,
                })?;
                stored.push(format!("{FED_SCHEME}{path}"));
            }
            stored
        }
    };
    timings.write_ms = ms(started);

    Ok(RunReport {
        input: input.to_string(),
        products: paths,
        filaments: det.catalog.entries.len(),
        threshold: det.threshold,
        timings,
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    #[test]
    fn locations_parse() {
        assert_eq!(
            "fed:/bbso/raw/a.fits".parse::<Location>().unwrap(),
            Location::Federation("/bbso/raw/a.fits".parse().unwrap())
        );
        assert_eq!("out/dir".parse::<Location>().unwrap(), Location::Local("out/dir".into()));
        assert!("fed:/a/../b".parse::<Location>().is_err());
        assert_eq!(product_stem("img1.fits"), "img1");
        assert_eq!(product_stem("img1.fts"), "img1");
        assert_eq!(product_stem(".fits"), ".fits");
        assert_eq!(product_stem("raw"), "raw");
    }

    #[tokio::test]
    async fn local_run_writes_three_products() {
        let dir = tempfile::tempdir().unwrap();
        let synth = generate(&SynthSpec::default());
        let input = dir.path().join("sun.fits");
        std::fs::write(&input, write_fits(&FitsImage::new(synth.image.clone()), Bitpix::F32).unwrap()).unwrap();
        let out = dir.path().join("processed");
        let report = run_pipeline(
            &Location::Local(input.clone()),
            &Location::Local(out.clone()),
            &PipelineConfig::default(),
            None,
        )
        .await
        .unwrap();
        assert_eq!(report.filaments, 3);
        assert_eq!(report.products.len(), 3);

        let labels = read_fits(&std::fs::read(out.join("sun.labels.fits")).unwrap()).unwrap();
        assert_eq!(labels.header.get("BITPIX"), Some(&CardValue::Integer(16)));
        assert_eq!(labels.pixels, synth.labels.mapv(f64::from));
        let diffused = read_fits(&std::fs::read(out.join("sun.diffused.fits")).unwrap()).unwrap();
        assert_eq!(diffused.header.get("BITPIX"), Some(&CardValue::Integer(-32)));
        let catalog: CatalogFile = serde_json::from_slice(&std::fs::read(out.join("sun.catalog.json")).unwrap()).unwrap();
        assert_eq!(catalog.image, "sun.fits");
        assert_eq!(catalog.filaments.len(), 3);
        assert_eq!(catalog.config, PipelineConfig::default());

        // the same bytes give the same products
        let (_, products) = process_bytes("sun.fits", &std::fs::read(&input).unwrap(), &PipelineConfig::default()).unwrap();
        for (name, bytes) in &products.files {
            assert_eq!(&std::fs::read(out.join(name)).unwrap(), bytes, "{name}");
        }
    }

    #[tokio::test]
    async fn failures_leave_no_products() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("dark.fits");
        std::fs::write(&input, write_fits(&FitsImage::new(Array2::zeros((16, 16))), Bitpix::U8).unwrap()).unwrap();
        let out = dir.path().join("processed");
        let err = run_pipeline(
            &Location::Local(input),
            &Location::Local(out.clone()),
            &PipelineConfig::default(),
            None,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, RunError::Pipeline(PipelineError::EmptyDisk)), "{err}");
        assert!(!out.exists());

        let err = run_pipeline(
            &"fed:/bbso/raw/x.fits".parse().unwrap(),
            &Location::Local(out),
            &PipelineConfig::default(),
            None,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, RunError::NoDirector));
    }
}
