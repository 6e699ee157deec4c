//! Urban density mapping from 30 m multi-spectral image time series.
//!
//! The pipeline runs: seasonal filtering and rolling-median compositing
//! ([`composite`]), density labeling from building grids ([`labeler`]),
//! patch sampling ([`sampler`]), the texture random-forest baseline
//! ([`glcm_rf`]), temporal smoothing of class probabilities ([`timeseries`])
//! and accuracy assessment ([`eval`]). [`synthcity`] generates seeded
//! synthetic cities with known ground truth for end-to-end testing.

pub mod composite;
pub mod error;
pub mod eval;
pub mod glcm_rf;
pub mod labeler;
pub mod raster;
pub mod sampler;
pub mod synthcity;
pub mod timeseries;

pub use error::{Error, Result};
pub use raster::{read_raster, write_raster, MultiBandRaster};

/// Canonical reflective band order.
pub const BAND_NAMES: [&str; 6] = ["blue", "green", "red", "nir", "swir1", "swir2"];

pub fn band_names() -> Vec<String> {
    BAND_NAMES.iter().map(|s| s.to_string()).collect()
}
