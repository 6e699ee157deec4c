use crate::composite::median_in_place;
use crate::error::{Error, Result};
use crate::raster::{EdgePolicy, MultiBandRaster, RasterWindow};

use super::glcm::{glcm_features, GLCM_FEATURE_NAMES};

pub const N_FEATURES: usize = 38;
const STAT_NAMES: [&str; 5] = ["max", "min", "mean", "median", "std"];

/// Names of the 38 features in vector order: for each band `max, min, mean,
/// median, std`, then the eight GLCM statistics of the first principal component.
pub fn feature_names(band_names: &[String]) -> Vec<String> {
    let mut names: Vec<String> = band_names
        .iter()
        .flat_map(|b| STAT_NAMES.iter().map(move |s| format!("{b}_{s}")))
        .collect();
    names.extend(GLCM_FEATURE_NAMES.iter().map(|s| s.to_string()));
    names
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    pub window: usize,
    pub glcm_levels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 5,
            glcm_levels: 32,
        }
    }
}

/// Per band: max, min, mean, median and population std over the truncated window.
pub fn spectral_stats(composite: &MultiBandRaster, row: usize, col: usize, window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    let (rows, cols) =
        RasterWindow::new(row, col, window / 2, EdgePolicy::Truncate).bounds(composite.height(), composite.width())?;
    let mut out = Vec::with_capacity(composite.bands() * 5);
    let mut values = Vec::with_capacity(window * window);
    for b in 0..composite.bands() {
        let band = composite.band(b);
        values.clear();
        for r in rows.clone() {
            for c in cols.clone() {
                let v = band[r * composite.width() + c];
                if !v.is_nan() {
                    values.push(v);
                }
            }
        }
        if values.is_empty() {
            return Err(Error::InsufficientData(format!(
                "window at ({row}, {col}) has no valid samples in band {b}"
            )));
        }
        let n = values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let median = median_in_place(&mut values);
        out.extend_from_slice(&[max, min, mean, median, var.sqrt()]);
    }
    Ok(out)
}

/// Full 38-feature vector of one cell. `pc1` is the first principal component raster.
pub fn cell_features(
    composite: &MultiBandRaster,
    pc1: &MultiBandRaster,
    row: usize,
    col: usize,
    config: &FeatureConfig,
) -> Result<FeatureVector> {
    if composite.bands() * 5 + 8 != N_FEATURES {
        return Err(Error::invalid(format!(
            "texture features need 6 bands, composite has {}",
            composite.bands()
        )));
    }
    let stats = spectral_stats(composite, row, col, config.window)?;
    let texture = glcm_features(pc1, row, col, config.window, config.glcm_levels)?;
    let mut v = [0.0; N_FEATURES];
    v[..30].copy_from_slice(&stats);
    v[30..].copy_from_slice(&texture);
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InsufficientData(format!("feature {i} is not finite at ({row}, {col})")));
    }
    Ok(FeatureVector(v))
}

/// Features for every cell, row-major; `None` where the window lacks valid data.
pub fn grid_features(
    composite: &MultiBandRaster,
    pc1: &MultiBandRaster,
    config: &FeatureConfig,
) -> Vec<Option<FeatureVector>> {
    (0..composite.height())
        .flat_map(|r| (0..composite.width()).map(move |c| (r, c)))
        .map(|(r, c)| cell_features(composite, pc1, r, c, config).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_band(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> MultiBandRaster {
        let data = (0..6)
            .flat_map(|b| (0..h).flat_map(move |r| (0..w).map(move |c| (b, r, c))))
            .map(|(b, r, c)| f(b, r, c))
            .collect();
        MultiBandRaster::new(w, h, crate::band_names(), 30.0, (0.0, 0.0), data).unwrap()
    }

    #[test]
    fn constant_window_stats() {
        let r = six_band(5, 5, |_, _, _| 0.3);
        let s = spectral_stats(&r, 2, 2, 5).unwrap();
        assert_eq!(s.len(), 30);
        for b in 0..6 {
            assert_eq!([s[b * 5], s[b * 5 + 1], s[b * 5 + 3]], [0.3, 0.3, 0.3]);
            assert!((s[b * 5 + 2] - 0.3).abs() < 1e-15);
            assert!(s[b * 5 + 4].abs() < 1e-15);
        }
    }

    #[test]
    fn median_of_one_to_twenty_five() {
        let r = six_band(5, 5, |_, row, col| (row * 5 + col + 1) as f64);
        let s = spectral_stats(&r, 2, 2, 5).unwrap();
        assert_eq!(s[3], 13.0);
        assert_eq!(s[0], 25.0);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[2], 13.0);
        // Population std of 1..=25 is sqrt((25^2 - 1) / 12).
        assert!((s[4] - (624.0f64 / 12.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn all_nan_window_errors() {
        let r = six_band(3, 3, |_, _, _| f64::NAN);
        assert!(spectral_stats(&r, 1, 1, 3).is_err());
    }

    #[test]
    fn names_and_vector_length() {
        let names = feature_names(&crate::band_names());
        assert_eq!(names.len(), N_FEATURES);
        assert_eq!(names[0], "blue_max");
        assert_eq!(names[29], "swir2_std");
        assert_eq!(names[37], "glcm_correlation");

        let r = six_band(7, 7, |b, row, col| 0.1 * b as f64 + 0.01 * (row * 7 + col) as f64);
        let (pc1, _) = super::super::pca::pca_first_component(&r).unwrap();
        let f = cell_features(&r, &pc1, 3, 3, &FeatureConfig::default()).unwrap();
        assert!(f.0.iter().all(|v| v.is_finite()));
        assert_eq!(grid_features(&r, &pc1, &FeatureConfig::default()).len(), 49);
    }
}
