//! FITS image I/O and solar filament detection.
//!
//! [`fits`] reads and writes the single-HDU 2-D subset used for full-disk
//! images, [`pipeline`] turns an image into a filament catalog and label map,
//! [`synth`] makes test images with known answers, and [`run`] wires it all to
//! local files or the federation.

pub mod fits;
pub mod pipeline;
pub mod run;
pub mod synth;

pub use fits::{header_get, read_fits, write_fits, Bitpix, Card, CardValue, FitsError, FitsHeader, FitsImage};
pub use pipeline::{
    compute_threshold, diffuse, disk_mask, extract_filaments, normalize_image, Conduction, Filament, FilamentCatalog,
    PipelineConfig, PipelineError, ThresholdMethod,
};
pub use run::{run_pipeline, CatalogFile, Location, RunError, RunReport};
