//! Synthetic full-disk images with known filaments.
//!
//! A bright disk with a gentle striped texture sits on a dark sky. Filaments
//! are thick line segments at a fixed darker level, placed well inside the limb
//! and never within two pixels of each other, so every one is a separate
//! 8-connected component. Optional Gaussian noise is added last.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pipeline::{catalog_from_labels, label_components, Filament};

pub const SKY: f64 = 0.05;
pub const DISK: f64 = 0.8;
pub const TEXTURE: f64 = 0.03;
pub const TEXTURE_PERIOD: f64 = 60.0;
pub const FILAMENT: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub radius: f64,
    pub filaments: usize,
    /// Standard deviation of additive Gaussian noise, in image units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 256,
            radius: 100.0,
            filaments: 3,
            noise: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub image: Array2<f64>,
    pub disk: Array2<bool>,
    /// Filament pixels labeled 1..K in raster order of first pixel.
    pub labels: Array2<u32>,
    pub truth: Vec<Filament>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SynthSpec,
    pub disk_area_px: usize,
    pub filaments: Vec<Filament>,
}

impl Synthetic {
    pub fn truth(&self, spec: &SynthSpec) -> Truth {
        Truth {
            spec: spec.clone(),
            disk_area_px: self.disk.iter().filter(|&&d| d).count(),
            filaments: self.truth.clone(),
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Generates the image and its ground truth.
///
/// # Panics
/// When the requested filaments cannot be placed, which only happens for
/// disks too small to hold them.
pub fn generate(spec: &SynthSpec) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let center = (n as f64 - 1.0) / 2.0;
    let disk = Array2::from_shape_fn((n, n), |(r, c)| {
        let (dr, dc) = (r as f64 - center, c as f64 - center);
        dr * dr + dc * dc <= spec.radius * spec.radius
    });

    let mut occupied = Array2::from_elem((n, n), false);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.filaments {
        attempts += 1;
        assert!(attempts < 10_000, "could not place {} filaments", spec.filaments);
        let length = rng.random_range(25.0..45.0);
        let half_width = rng.random_range(2.0..3.0);
        let reach = spec.radius - length / 2.0 - half_width - 6.0;
        assert!(reach > 0.0, "disk radius {} too small for filaments", spec.radius);
        let rho = reach * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let mid = (center + rho * phi.sin(), center + rho * phi.cos());
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (sr, sc) = (angle.sin() * length / 2.0, angle.cos() * length / 2.0);
        let a = (mid.0 - sr, mid.1 - sc);
        let b = (mid.0 + sr, mid.1 + sc);
        let pixels: Vec<(usize, usize)> = (0..n)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .filter(|&(r, c)| segment_distance((r as f64, c as f64), a, b) <= half_width)
            .collect();
        // keep a clear ring of two pixels around every earlier filament
        let crowded = pixels.iter().any(|&(r, c)| {
            (r.saturating_sub(2)..=(r + 2).min(n - 1)).any(|rr| (c.saturating_sub(2)..=(c + 2).min(n - 1)).any(|cc| occupied[[rr, cc]]))
        });
        if crowded || pixels.is_empty() {
            continue;
        }
        for p in pixels {
            occupied[p] = true;
        }
        placed += 1;
    }

    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let image = Array2::from_shape_fn((n, n), |(r, c)| {
        let base = if occupied[[r, c]] {
            FILAMENT
        } else if disk[[r, c]] {
            DISK + TEXTURE * (std::f64::consts::TAU * (r + c) as f64 / TEXTURE_PERIOD).sin()
        } else {
            SKY
        };
        if spec.noise > 0.0 {
            base + noise.sample(&mut rng)
        } else {
            base
        }
    });
    let (labels, count) = label_components(&occupied);
    assert_eq!(count, spec.filaments, "filaments merged during placement");
    let truth = catalog_from_labels(&labels, &crate::pipeline::normalize(&image), count);
    Synthetic {
        image,
        disk,
        labels,
        truth,
    }
}
