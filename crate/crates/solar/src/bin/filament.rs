use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use osdf_fed::client::{FedClient, DIRECTOR_ENV};
use osdf_solar::fits::{write_fits, Bitpix, Card, CardValue, FitsImage};
use osdf_solar::pipeline::{Conduction, PipelineConfig, ThresholdMethod};
use osdf_solar::run::{run_pipeline, Location, RunError};
use osdf_solar::synth::{generate, SynthSpec};

/// Solar filament detection on FITS images, local or in the federation.
///
/// Paths starting with `fed:` are federation object paths, e.g.
/// `fed:/bbso/raw/halpha.fits`; anything else is a local file or directory.
#[derive(Debug, Parser)]
#[command(name = "filament", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect filaments and write diffused image, label map and catalog.
    Run {
        /// FITS image to process.
        #[arg(long)]
        input: Location,
        /// Output directory, or a federation prefix such as fed:/bbso/processed.
        #[arg(long)]
        output: Location,
        /// Edge scale of the conduction function [default: 0.1].
        #[arg(long)]
        kappa: Option<f64>,
        /// Diffusion step size, at most 0.25 [default: 0.2].
        #[arg(long)]
        lambda: Option<f64>,
        /// Diffusion iterations [default: 10].
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, value_enum)]
        conduction: Option<Conduction>,
        #[arg(long, value_enum)]
        threshold: Option<ThresholdMethod>,
        /// Threshold multiplier; defaults to 3.0 for mad and 2.5 for sigma.
        #[arg(long)]
        k: Option<f64>,
        /// Smallest component kept, in pixels [default: 50].
        #[arg(long)]
        min_area: Option<usize>,
        /// Fraction of the 99th percentile a pixel needs to count as disk [default: 0.15].
        #[arg(long)]
        disk_frac: Option<f64>,
        /// Director URL, needed for fed: paths.
        #[arg(long, env = DIRECTOR_ENV)]
        director: Option<String>,
        /// Client location "lat,lon" for cache selection.
        #[arg(long)]
        geo: Option<osdf_fed::GeoPoint>,
    },
    /// Write a synthetic full-disk image with known filaments.
    Synth {
        /// Image to write (BITPIX -32); ground truth goes to <out>.truth.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        filaments: usize,
        /// Standard deviation of Gaussian noise added to every pixel.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Disk radius in pixels.
        #[arg(long, default_value_t = 100.0)]
        radius: f64,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("filament: {msg}");
    ExitCode::FAILURE
}

#[tokio::main]
async fn main() -> ExitCode {
    osdf_fed::node::init_tracing();
    match Cli::parse().command {
        Command::Run {
            input,
            output,
            kappa,
            lambda,
            iters,
            conduction,
            threshold,
            k,
            min_area,
            disk_frac,
            director,
            geo,
        } => {
            let method = threshold.unwrap_or(ThresholdMethod::Mad);
            let defaults = PipelineConfig::with_method(method);
            let cfg = PipelineConfig {
                kappa: kappa.unwrap_or(defaults.kappa),
                lam: lambda.unwrap_or(defaults.lam),
                iterations: iters.unwrap_or(defaults.iterations),
                conduction: conduction.unwrap_or(defaults.conduction),
                k: k.unwrap_or(defaults.k),
                min_area: min_area.unwrap_or(defaults.min_area),
                disk_frac: disk_frac.unwrap_or(defaults.disk_frac),
                ..defaults
            };
            let client = director.map(|url| {
                let c = FedClient::new(&url).with_name("filament");
                match geo {
                    Some(g) => c.with_geo(g),
                    None => c,
                }
            });
            match run_pipeline(&input, &output, &cfg, client.as_ref()).await {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    ExitCode::SUCCESS
                }
                Err(e @ RunError::Pipeline(_)) => {
                    eprintln!("filament: {e}");
                    ExitCode::from(2)
                }
                Err(e) => fail(e),
            }
        }
        Command::Synth {
            out,
            filaments,
            noise,
            seed,
            size,
            radius,
        } => {
            let spec = SynthSpec {
                size,
                radius,
                filaments,
                noise,
                seed,
            };
            let synth = generate(&spec);
            let mut image = FitsImage::new(synth.image.clone());
            image.header.push(Card::new("OBJECT", CardValue::Text("synthetic sun".into())));
            image.header.push(Card::new("NFILAM", CardValue::Integer(filaments as i64)));
            let bytes = match write_fits(&image, Bitpix::F32) {
                Ok(b) => b,
                Err(e) => return fail(e),
            };
            if let Err(e) = std::fs::write(&out, bytes) {
                return fail(format!("{}: {e}", out.display()));
            }
            let truth_path = out.with_extension("truth.json");
            let truth = serde_json::to_string_pretty(&synth.truth(&spec)).expect("truth serializes");
            if let Err(e) = std::fs::write(&truth_path, truth) {
                return fail(format!("{}: {e}", truth_path.display()));
            }
            println!("{}", serde_json::json!({ "image": out, "truth": truth_path }));
            ExitCode::SUCCESS
        }
    }
}
