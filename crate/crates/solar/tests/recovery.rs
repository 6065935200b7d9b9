use osdf_solar::fits::{read_fits, write_fits, Bitpix, FitsImage};
use osdf_solar::pipeline::{detect, disk_mask, normalize, PipelineConfig, ThresholdMethod};
use osdf_solar::synth::{generate, SynthSpec};

fn through_fits(img: &ndarray::Array2<f64>) -> FitsImage {
    read_fits(&write_fits(&FitsImage::new(img.clone()), Bitpix::F32).unwrap()).unwrap()
}

#[test]
fn noiseless_disk_mask_is_exact() {
    for seed in 1..=5 {
        let synth = generate(&SynthSpec { seed, ..Default::default() });
        let mask = disk_mask(&normalize(&synth.image), &PipelineConfig::default()).unwrap();
        assert_eq!(mask, synth.disk, "seed {seed}");
    }
}

#[test]
fn noiseless_recovery_is_exact() {
    for seed in 1..=5 {
        let synth = generate(&SynthSpec { seed, ..Default::default() });
        let det = detect(&through_fits(&synth.image), &PipelineConfig::default()).unwrap();
        assert_eq!(det.catalog.label_map, synth.labels, "seed {seed}");
        let areas: Vec<usize> = det.catalog.entries.iter().map(|e| e.area_px).collect();
        let truth: Vec<usize> = synth.truth.iter().map(|e| e.area_px).collect();
        assert_eq!(areas, truth, "seed {seed}");
    }
}

#[test]
fn noisy_recovery_within_tolerance() {
    for method in [ThresholdMethod::Mad, ThresholdMethod::Sigma] {
        for seed in 1..=8 {
            let synth = generate(&SynthSpec {
                seed,
                noise: 0.02,
                ..Default::default()
            });
            let det = detect(&through_fits(&synth.image), &PipelineConfig::with_method(method)).unwrap();
            assert_eq!(det.catalog.entries.len(), 3, "{method:?} seed {seed}: {:?}", det.catalog.entries);
            for (got, want) in det.catalog.entries.iter().zip(&synth.truth) {
                let rel = (got.area_px as f64 - want.area_px as f64).abs() / want.area_px as f64;
                assert!(rel <= 0.15, "{method:?} seed {seed}: {} vs {}", got.area_px, want.area_px);
                assert!((got.centroid.0 - want.centroid.0).abs() < 2.0);
                assert!((got.centroid.1 - want.centroid.1).abs() < 2.0);
            }
        }
    }
}

#[test]
fn more_filaments_and_rational_conduction() {
    let synth = generate(&SynthSpec {
        filaments: 6,
        seed: 9,
        ..Default::default()
    });
    let cfg = PipelineConfig {
        conduction: osdf_solar::Conduction::Rational,
        ..Default::default()
    };
    let det = detect(&through_fits(&synth.image), &cfg).unwrap();
    assert_eq!(det.catalog.label_map, synth.labels);
}
