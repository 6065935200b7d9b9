//! Filament detection on full-disk H-alpha images.
//!
//! The chain is normalize, anisotropic diffusion, disk masking, a robust
//! on-disk threshold, and 8-connected labeling of the dark pixels that remain.
//! Every step is a pure function over `ndarray` matrices.

use std::collections::VecDeque;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::fits::FitsImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("no pixel is bright enough to belong to the solar disk")]
    EmptyDisk,
    #[error("on-disk spread is zero; a threshold cannot be placed")]
    DegenerateStatistics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Conduction {
    /// `g(x) = exp(-(x/kappa)^2)`
    Exp,
    /// `g(x) = 1 / (1 + (x/kappa)^2)`
    Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    /// median - k * 1.4826 * MAD
    Mad,
    /// mean - k * stddev
    Sigma,
}

impl ThresholdMethod {
    pub fn default_k(self) -> f64 {
        match self {
            ThresholdMethod::Mad => 3.0,
            ThresholdMethod::Sigma => 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Conduction scale in normalized intensity units.
    pub kappa: f64,
    /// Step weight of the explicit scheme.
    pub lam: f64,
    pub iterations: usize,
    pub conduction: Conduction,
    pub threshold_method: ThresholdMethod,
    pub k: f64,
    /// Fraction of the 99th percentile a pixel needs to count as on-disk.
    pub disk_frac: f64,
    pub min_area: usize,
    pub connectivity: u8,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            kappa: 0.1,
            lam: 0.2,
            iterations: 10,
            conduction: Conduction::Exp,
            threshold_method: ThresholdMethod::Mad,
            k: ThresholdMethod::Mad.default_k(),
            disk_frac: 0.15,
            min_area: 50,
            connectivity: 8,
        }
    }
}

impl PipelineConfig {
    /// Default config using `method` and its default multiplier.
    pub fn with_method(method: ThresholdMethod) -> Self {
        PipelineConfig {
            threshold_method: method,
            k: method.default_k(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_owned()));
        if !(self.lam > 0.0 && self.lam <= 0.25) {
            return bad("lambda must lie in (0, 0.25]");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        if !(self.disk_frac > 0.0 && self.disk_frac < 1.0) {
            return bad("disk_frac must lie in (0, 1)");
        }
        if self.min_area < 1 {
            return bad("min_area must be at least 1");
        }
        if !self.k.is_finite() {
            return bad("k must be finite");
        }
        if self.connectivity != 8 {
            return bad("only 8-connectivity is supported");
        }
        Ok(())
    }

    fn g(&self, x: f64) -> f64 {
        let r = x / self.kappa;
        match self.conduction {
            Conduction::Exp => (-r * r).exp(),
            Conduction::Rational => 1.0 / (1.0 + r * r),
        }
    }
}

/// Maps physical values linearly onto [0, 1]. Constant images, and non-finite
/// samples, map to zero.
pub fn normalize_image(img: &FitsImage) -> Array2<f64> {
    normalize(&img.pixels)
}

pub fn normalize(pixels: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = pixels
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Array2::zeros(pixels.dim());
    }
    let span = hi - lo;
    pixels.mapv(|v| if v.is_finite() { (v - lo) / span } else { 0.0 })
}

/// One explicit step in flux form: every neighbor pair exchanges
/// `lam * g(|d|) * d`, so what one pixel gains the other loses.
pub fn diffuse_step(img: &Array2<f64>, cfg: &PipelineConfig) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let mut out = img.clone();
    for r in 0..rows {
        for c in 0..cols {
            let here = img[[r, c]];
            if c + 1 < cols {
                let d = img[[r, c + 1]] - here;
                let flux = cfg.lam * cfg.g(d.abs()) * d;
                out[[r, c]] += flux;
                out[[r, c + 1]] -= flux;
            }
            if r + 1 < rows {
                let d = img[[r + 1, c]] - here;
                let flux = cfg.lam * cfg.g(d.abs()) * d;
                out[[r, c]] += flux;
                out[[r + 1, c]] -= flux;
            }
        }
    }
    out
}

/// `cfg.iterations` steps of four-neighbor anisotropic diffusion. Border
/// pixels see a replicated neighbor, whose difference is zero.
pub fn diffuse(img: &Array2<f64>, cfg: &PipelineConfig) -> Array2<f64> {
    let mut cur = img.clone();
    for _ in 0..cfg.iterations {
        cur = diffuse_step(&cur, cfg);
    }
    cur
}

/// Nearest-rank percentile of `values`, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const NEIGHBORS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbors(
    (r, c): (usize, usize),
    (rows, cols): (usize, usize),
    offsets: &'static [(isize, isize)],
) -> impl Iterator<Item = (usize, usize)> {
    offsets.iter().filter_map(move |&(dr, dc)| {
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        (nr < rows && nc < cols).then_some((nr, nc))
    })
}

/// Breadth-first components of the `true` pixels, in raster order of first pixel.
fn flood_components(set: &Array2<bool>, offsets: &'static [(isize, isize)]) -> Vec<Vec<(usize, usize)>> {
    let dim = set.dim();
    let mut seen = Array2::from_elem(dim, false);
    let mut components = Vec::new();
    for ((r, c), &on) in set.indexed_iter() {
        if !on || seen[[r, c]] {
            continue;
        }
        seen[[r, c]] = true;
        let mut queue = VecDeque::from([(r, c)]);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            for q in neighbors(p, dim, offsets) {
                if set[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        components.push(pixels);
    }
    components
}

/// Solar disk: the largest 4-connected set of bright pixels, holes filled.
///
/// A pixel is bright when it is positive and at least `disk_frac` times the
/// 99th percentile. Holes are the 8-connected pieces of the complement that do
/// not reach the image border.
pub fn disk_mask(img: &Array2<f64>, cfg: &PipelineConfig) -> Result<Array2<bool>, PipelineError> {
    let values: Vec<f64> = img.iter().copied().collect();
    let cut = cfg.disk_frac * percentile(&values, 0.99);
    let bright = img.mapv(|v| v > 0.0 && v >= cut);
    let largest = flood_components(&bright, &NEIGHBORS_4)
        .into_iter()
        .reduce(|best, c| if c.len() > best.len() { c } else { best })
        .ok_or(PipelineError::EmptyDisk)?;
    let (rows, cols) = img.dim();
    let mut mask = Array2::from_elem((rows, cols), false);
    for p in largest {
        mask[p] = true;
    }
    let outside = mask.mapv(|m| !m);
    for hole in flood_components(&outside, &NEIGHBORS_8) {
        let touches_border = hole.iter().any(|&(r, c)| r == 0 || c == 0 || r + 1 == rows || c + 1 == cols);
        if !touches_border {
            for p in hole {
                mask[p] = true;
            }
        }
    }
    Ok(mask)
}

/// Threshold below which on-disk pixels are filament candidates.
pub fn compute_threshold(diffused: &Array2<f64>, mask: &Array2<bool>, cfg: &PipelineConfig) -> Result<f64, PipelineError> {
    let values: Vec<f64> = Zip::from(diffused)
        .and(mask)
        .fold(Vec::new(), |mut acc, &v, &m| {
            if m {
                acc.push(v);
            }
            acc
        });
    if values.is_empty() {
        return Err(PipelineError::EmptyDisk);
    }
    threshold_of(&values, cfg.threshold_method, cfg.k)
}

pub fn threshold_of(values: &[f64], method: ThresholdMethod, k: f64) -> Result<f64, PipelineError> {
    match method {
        ThresholdMethod::Mad => {
            let med = median(values);
            let deviations: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
            let mad = median(&deviations);
            if mad == 0.0 {
                return Err(PipelineError::DegenerateStatistics);
            }
            Ok(med - k * 1.4826 * mad)
        }
        ThresholdMethod::Sigma => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var == 0.0 {
                return Err(PipelineError::DegenerateStatistics);
            }
            Ok(mean - k * var.sqrt())
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // the smaller index stays root so roots are first pixels in raster order
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Two-pass 8-connected labeling. Labels are 1..K in raster order of each
/// component's first pixel; 0 is background.
pub fn label_components(set: &Array2<bool>) -> (Array2<u32>, usize) {
    let (rows, cols) = set.dim();
    let idx = |r: usize, c: usize| r * cols + c;
    let mut uf = UnionFind::new(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if !set[[r, c]] {
                continue;
            }
            // already-visited neighbors: W, NW, N, NE
            for (dr, dc) in [(0isize, -1isize), (-1, -1), (-1, 0), (-1, 1)] {
                let (Some(nr), Some(nc)) = (r.checked_add_signed(dr), c.checked_add_signed(dc)) else {
                    continue;
                };
                if nc < cols && set[[nr, nc]] {
                    uf.union(idx(r, c), idx(nr, nc));
                }
            }
        }
    }
    let mut root_label = vec![0u32; rows * cols];
    let mut next = 0u32;
    let mut labels = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            if set[[r, c]] {
                let root = uf.find(idx(r, c));
                if root_label[root] == 0 {
                    next += 1;
                    root_label[root] = next;
                }
                labels[[r, c]] = root_label[root];
            }
        }
    }
    (labels, next as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filament {
    pub label: u32,
    pub area_px: usize,
    /// (row, col)
    pub centroid: (f64, f64),
    /// (min_row, min_col, max_row, max_col)
    pub bbox: (usize, usize, usize, usize),
    /// Mean of the pre-diffusion normalized image over the component.
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilamentCatalog {
    pub entries: Vec<Filament>,
    pub label_map: Array2<u32>,
}

/// Entries recomputed from a label map and an intensity image.
pub fn catalog_from_labels(label_map: &Array2<u32>, intensity: &Array2<f64>, count: usize) -> Vec<Filament> {
    struct Acc {
        area: usize,
        sum_r: f64,
        sum_c: f64,
        sum_i: f64,
        bbox: (usize, usize, usize, usize),
    }
    let mut accs: Vec<Option<Acc>> = (0..count).map(|_| None).collect();
    for ((r, c), &l) in label_map.indexed_iter() {
        if l == 0 {
            continue;
        }
        let slot = &mut accs[l as usize - 1];
        let acc = slot.get_or_insert(Acc {
            area: 0,
            sum_r: 0.0,
            sum_c: 0.0,
            sum_i: 0.0,
            bbox: (r, c, r, c),
        });
        acc.area += 1;
        acc.sum_r += r as f64;
        acc.sum_c += c as f64;
        acc.sum_i += intensity[[r, c]];
        acc.bbox = (acc.bbox.0.min(r), acc.bbox.1.min(c), acc.bbox.2.max(r), acc.bbox.3.max(c));
    }
    accs.into_iter()
        .enumerate()
        .filter_map(|(i, acc)| {
            let acc = acc?;
            let n = acc.area as f64;
            Some(Filament {
                label: i as u32 + 1,
                area_px: acc.area,
                centroid: (acc.sum_r / n, acc.sum_c / n),
                bbox: acc.bbox,
                mean_intensity: acc.sum_i / n,
            })
        })
        .collect()
}

/// Dark on-disk components of at least `min_area` pixels, relabeled 1..K.
pub fn extract_filaments(
    diffused: &Array2<f64>,
    original: &Array2<f64>,
    mask: &Array2<bool>,
    threshold: f64,
    cfg: &PipelineConfig,
) -> FilamentCatalog {
    let candidate = Zip::from(diffused).and(mask).map_collect(|&v, &m| m && v < threshold);
    let (raw, count) = label_components(&candidate);
    let mut areas = vec![0usize; count + 1];
    for &l in raw.iter() {
        areas[l as usize] += 1;
    }
    // raw labels are already in raster order, so keeping survivors in order preserves it
    let mut remap = vec![0u32; count + 1];
    let mut next = 0;
    for l in 1..=count {
        if areas[l] >= cfg.min_area {
            next += 1;
            remap[l] = next;
        }
    }
    let label_map = raw.mapv(|l| remap[l as usize]);
    let entries = catalog_from_labels(&label_map, original, next as usize);
    FilamentCatalog { entries, label_map }
}

/// Everything the pipeline computes for one image.
#[derive(Debug, Clone)]
pub struct Detection {
    pub normalized: Array2<f64>,
    pub diffused: Array2<f64>,
    pub mask: Array2<bool>,
    pub threshold: f64,
    pub catalog: FilamentCatalog,
}

pub fn detect(img: &FitsImage, cfg: &PipelineConfig) -> Result<Detection, PipelineError> {
    cfg.validate()?;
    let normalized = normalize_image(img);
    let diffused = diffuse(&normalized, cfg);
    let mask = disk_mask(&normalized, cfg)?;
    let threshold = compute_threshold(&diffused, &mask, cfg)?;
    let catalog = extract_filaments(&diffused, &normalized, &mask, threshold, cfg);
    Ok(Detection {
        normalized,
        diffused,
        mask,
        threshold,
        catalog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let img = FitsImage::new(array![[0.0, 50.0, 100.0]]);
        assert_eq!(normalize_image(&img), array![[0.0, 0.5, 1.0]]);
        assert_eq!(normalize(&Array2::from_elem((3, 3), 7.0)), Array2::<f64>::zeros((3, 3)));
        let unit = array![[0.0, 0.25], [1.0, 0.5]];
        assert_eq!(normalize(&unit), unit);
        assert_eq!(normalize(&array![[f64::NAN, 2.0, 4.0]]), array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn zero_iterations_and_uniform_images_are_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array2::from_shape_fn((9, 7), |_| rng.random::<f64>());
        let cfg = PipelineConfig {
            iterations: 0,
            ..Default::default()
        };
        assert_eq!(diffuse(&img, &cfg), img);
        let flat = Array2::from_elem((8, 8), 0.37);
        assert_eq!(diffuse(&flat, &PipelineConfig::default()), flat);
    }

    #[test]
    fn center_impulse_single_step() {
        let mut img = Array2::zeros((3, 3));
        img[[1, 1]] = 1.0;
        let cfg = PipelineConfig {
            kappa: 1.0,
            lam: 0.25,
            iterations: 1,
            ..Default::default()
        };
        let out = diffuse(&img, &cfg);
        let expected = 1.0 - (-1.0f64).exp();
        assert!(close(out[[1, 1]], expected, 1e-12), "{}", out[[1, 1]]);
        assert!(close(expected, 0.632_120_558_828_557_7, 1e-15));
        assert!(close(out[[0, 1]], 0.25 * (-1.0f64).exp(), 1e-15));
        assert_eq!(out[[0, 0]], 0.0);
    }

    #[test]
    fn rational_conduction_single_step() {
        let mut img = Array2::zeros((3, 3));
        img[[1, 1]] = 1.0;
        let cfg = PipelineConfig {
            kappa: 1.0,
            lam: 0.25,
            iterations: 1,
            conduction: Conduction::Rational,
            ..Default::default()
        };
        // g(1) = 1/2, four outflows of 0.25 * 0.5
        assert!(close(diffuse(&img, &cfg)[[1, 1]], 0.5, 1e-15));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        for cfg in [
            PipelineConfig { lam: 0.26, ..Default::default() },
            PipelineConfig { lam: 0.0, ..Default::default() },
            PipelineConfig { kappa: 0.0, ..Default::default() },
            PipelineConfig { disk_frac: 1.0, ..Default::default() },
            PipelineConfig { min_area: 0, ..Default::default() },
            PipelineConfig { connectivity: 4, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(PipelineError::InvalidConfig(_))), "{cfg:?}");
        }
        assert_eq!(PipelineConfig::with_method(ThresholdMethod::Sigma).k, 2.5);
    }

    #[test]
    fn threshold_examples() {
        let t = threshold_of(&[0.4, 0.5, 0.6], ThresholdMethod::Mad, 1.0).unwrap();
        assert!(close(t, 0.35174, 1e-12), "{t}");
        assert_eq!(
            threshold_of(&[0.5; 10], ThresholdMethod::Mad, 3.0),
            Err(PipelineError::DegenerateStatistics)
        );
        assert_eq!(
            threshold_of(&[0.5; 10], ThresholdMethod::Sigma, 3.0),
            Err(PipelineError::DegenerateStatistics)
        );
        // mean 0.5, population stddev 0.1
        let t = threshold_of(&[0.4, 0.6], ThresholdMethod::Sigma, 2.5).unwrap();
        assert!(close(t, 0.25, 1e-12), "{t}");
    }

    #[test]
    fn threshold_uses_only_disk_pixels() {
        let img = array![[0.4, 9.0], [0.5, 0.6]];
        let mask = array![[true, false], [true, true]];
        let t = compute_threshold(&img, &mask, &PipelineConfig { k: 1.0, ..Default::default() }).unwrap();
        assert!(close(t, 0.35174, 1e-12));
        let uniform = Array2::from_elem((4, 4), 0.5);
        let all = Array2::from_elem((4, 4), true);
        assert_eq!(
            compute_threshold(&uniform, &all, &PipelineConfig::default()),
            Err(PipelineError::DegenerateStatistics)
        );
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
        assert_eq!(percentile(&[3.0], 0.99), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    fn disk_image(n: usize, radius: f64) -> (Array2<f64>, Array2<bool>) {
        let c = (n as f64 - 1.0) / 2.0;
        let disk = Array2::from_shape_fn((n, n), |(r, col)| {
            let (dr, dc) = (r as f64 - c, col as f64 - c);
            dr * dr + dc * dc <= radius * radius
        });
        (disk.mapv(|d| if d { 0.9 } else { 0.0 }), disk)
    }

    #[test]
    fn disk_mask_fills_dark_interior() {
        let (mut img, disk) = disk_image(40, 15.0);
        for c in 12..28 {
            img[[20, c]] = 0.02;
            img[[21, c]] = 0.02;
        }
        let mask = disk_mask(&img, &PipelineConfig::default()).unwrap();
        assert_eq!(mask, disk);
        assert_eq!(
            disk_mask(&Array2::zeros((10, 10)), &PipelineConfig::default()),
            Err(PipelineError::EmptyDisk)
        );
    }

    #[test]
    fn disk_mask_keeps_largest_region_only() {
        let (mut img, disk) = disk_image(40, 12.0);
        img[[1, 1]] = 0.9;
        img[[1, 2]] = 0.9;
        assert_eq!(disk_mask(&img, &PipelineConfig::default()).unwrap(), disk);
    }

    #[test]
    fn two_blobs_label_in_raster_order() {
        let mut img = Array2::from_elem((30, 30), 0.9);
        let mask = Array2::from_elem((30, 30), true);
        // the lower-left blob starts later in raster order than the upper-right one
        for r in 2..10 {
            for c in 20..28 {
                img[[r, c]] = 0.1;
            }
        }
        for r in 15..25 {
            for c in 1..8 {
                img[[r, c]] = 0.1;
            }
        }
        let cfg = PipelineConfig { min_area: 50, ..Default::default() };
        let cat = extract_filaments(&img, &img, &mask, 0.5, &cfg);
        assert_eq!(cat.entries.len(), 2);
        assert_eq!((cat.entries[0].label, cat.entries[0].area_px), (1, 64));
        assert_eq!(cat.entries[0].bbox, (2, 20, 9, 27));
        assert_eq!(cat.entries[0].centroid, (5.5, 23.5));
        assert_eq!((cat.entries[1].label, cat.entries[1].area_px), (2, 70));
        assert!(close(cat.entries[1].mean_intensity, 0.1, 1e-12));
        assert_eq!(cat.label_map[[2, 20]], 1);
        assert_eq!(cat.label_map[[15, 1]], 2);
    }

    #[test]
    fn area_filter_boundary() {
        let mut img = Array2::from_elem((20, 20), 0.9);
        let mask = Array2::from_elem((20, 20), true);
        for c in 0..10 {
            img[[5, c]] = 0.1;
        }
        let at = |min_area| extract_filaments(&img, &img, &mask, 0.5, &PipelineConfig { min_area, ..Default::default() });
        assert!(at(11).entries.is_empty());
        assert!(at(11).label_map.iter().all(|&l| l == 0));
        assert_eq!(at(10).entries.len(), 1);
    }

    #[test]
    fn diagonal_pixels_join() {
        let set = array![[true, false, false], [false, true, false], [false, false, true]];
        let (labels, count) = label_components(&set);
        assert_eq!(count, 1);
        assert_eq!(labels[[2, 2]], 1);
        // a U shape whose arms only meet at the bottom
        let set = array![[true, false, true], [true, false, true], [true, true, true]];
        let (labels, count) = label_components(&set);
        assert_eq!(count, 1);
        assert_eq!(labels[[0, 2]], 1);
    }

    fn variance(a: &Array2<f64>) -> f64 {
        let n = a.len() as f64;
        let mean = a.sum() / n;
        a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn step_edge_homogenizes_but_keeps_its_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = rand_distr::Normal::new(0.0, 0.02).unwrap();
        let img = Array2::from_shape_fn((64, 64), |(_, c)| {
            let base = if c < 32 { 0.3 } else { 0.8 };
            base + rng.sample(noise)
        });
        let out = diffuse(&img, &PipelineConfig::default());
        let halves = |a: &Array2<f64>| {
            let left = a.slice(ndarray::s![.., ..32]).to_owned();
            let right = a.slice(ndarray::s![.., 32..]).to_owned();
            (left, right)
        };
        let (l0, r0) = halves(&img);
        let (l1, r1) = halves(&out);
        assert!(variance(&l1) < variance(&l0));
        assert!(variance(&r1) < variance(&r0));
        let gap0 = r0.mean().unwrap() - l0.mean().unwrap();
        let gap1 = r1.mean().unwrap() - l1.mean().unwrap();
        assert!(gap1 >= 0.8 * gap0, "{gap1} vs {gap0}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn diffusion_conserves_and_stays_in_range(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>(), iters in 0usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>());
            let cfg = PipelineConfig { iterations: iters, ..Default::default() };
            let out = diffuse(&img, &cfg);
            let (s0, s1) = (img.sum(), out.sum());
            prop_assert!((s1 - s0).abs() <= 1e-6 * s0.abs().max(f64::MIN_POSITIVE));
            let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn catalog_matches_label_map(seed in any::<u64>(), density in 0.2f64..0.7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array2::from_shape_fn((32, 32), |_| if rng.random_bool(density) { 0.1 } else { 0.9 });
            let mask = Array2::from_elem((32, 32), true);
            let cfg = PipelineConfig { min_area: 3, ..Default::default() };
            let cat = extract_filaments(&img, &img, &mask, 0.5, &cfg);
            let max = cat.label_map.iter().copied().max().unwrap_or(0) as usize;
            prop_assert_eq!(max, cat.entries.len());
            prop_assert_eq!(&catalog_from_labels(&cat.label_map, &img, max), &cat.entries);
            prop_assert!(cat.entries.iter().all(|e| e.area_px >= 3));
        }
    }
}
