//! Gray-level co-occurrence matrices and Haralick-style statistics.

use crate::error::{Error, Result};
use crate::raster::{EdgePolicy, MultiBandRaster, RasterWindow};

/// Pixel-pair offsets `(d_row, d_col)` at distance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Deg0, Direction::Deg45, Direction::Deg90, Direction::Deg135];

    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::Deg0 => (0, 1),
            Direction::Deg45 => (-1, 1),
            Direction::Deg90 => (-1, 0),
            Direction::Deg135 => (-1, -1),
        }
    }
}

pub const GLCM_FEATURE_NAMES: [&str; 8] = [
    "glcm_mean",
    "glcm_variance",
    "glcm_homogeneity",
    "glcm_contrast",
    "glcm_dissimilarity",
    "glcm_entropy",
    "glcm_second_moment",
    "glcm_correlation",
];

/// Quantizes values to `levels` equal-width bins over their own min-max range.
/// NaN stays `None`; a constant input maps entirely to level 0.
pub fn quantize(values: &[f64], levels: usize) -> Vec<Option<usize>> {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                None
            } else if span > 0.0 {
                Some((((v - lo) / span * levels as f64) as usize).min(levels - 1))
            } else {
                Some(0)
            }
        })
        .collect()
}

/// Symmetric co-occurrence counts (`levels x levels`, row-major) of a
/// `height x width` grid of quantized levels, summed over `directions`.
pub fn cooccurrence_counts(
    grid: &[Option<usize>],
    width: usize,
    height: usize,
    levels: usize,
    directions: &[Direction],
) -> Vec<u64> {
    let mut counts = vec![0u64; levels * levels];
    for dir in directions {
        let (dr, dc) = dir.offset();
        for r in 0..height {
            for c in 0..width {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                    continue;
                }
                if let (Some(i), Some(j)) = (grid[r * width + c], grid[rr as usize * width + cc as usize]) {
                    counts[i * levels + j] += 1;
                    counts[j * levels + i] += 1;
                }
            }
        }
    }
    counts
}

/// The eight statistics of a normalized co-occurrence matrix, in
/// [`GLCM_FEATURE_NAMES`] order. Correlation is 1 when the marginal variance is 0.
pub fn haralick_statistics(counts: &[u64], levels: usize) -> Result<[f64; 8]> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InsufficientData("co-occurrence matrix is empty".into()));
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let (mut mean, mut homogeneity, mut contrast, mut dissimilarity, mut entropy, mut asm) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let pij = p[i * levels + j];
            if pij == 0.0 {
                continue;
            }
            let d = i as f64 - j as f64;
            mean += i as f64 * pij;
            homogeneity += pij / (1.0 + d * d);
            contrast += pij * d * d;
            dissimilarity += pij * d.abs();
            entropy -= pij * pij.ln();
            asm += pij * pij;
        }
    }
    let mut variance = 0.0;
    let mut covariance = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            let pij = p[i * levels + j];
            variance += (i as f64 - mean).powi(2) * pij;
            covariance += (i as f64 - mean) * (j as f64 - mean) * pij;
        }
    }
    // The matrix is symmetric, so both marginals share mean and variance.
    let correlation = if variance > 1e-15 { covariance / variance } else { 1.0 };
    Ok([mean, variance, homogeneity, contrast, dissimilarity, entropy, asm, correlation])
}

/// GLCM statistics of the edge-truncated `window x window` neighbourhood of a cell.
pub fn glcm_features(pc1: &MultiBandRaster, row: usize, col: usize, window: usize, levels: usize) -> Result<[f64; 8]> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    if levels < 2 {
        return Err(Error::invalid(format!("levels must be >= 2, got {levels}")));
    }
    let (rows, cols) = RasterWindow::new(row, col, window / 2, EdgePolicy::Truncate).bounds(pc1.height(), pc1.width())?;
    let (h, w) = (rows.len(), cols.len());
    let band = pc1.band(0);
    let mut values = Vec::with_capacity(h * w);
    for r in rows {
        for c in cols.clone() {
            values.push(band[r * pc1.width() + c]);
        }
    }
    if values.iter().filter(|v| v.is_finite()).count() < 2 {
        return Err(Error::InsufficientData(format!("GLCM window at ({row}, {col}) has fewer than 2 samples")));
    }
    let q = quantize(&values, levels);
    let counts = cooccurrence_counts(&q, w, h, levels, &Direction::ALL);
    haralick_statistics(&counts, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_raster(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> MultiBandRaster {
        let data = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        MultiBandRaster::new(w, h, vec!["pc1".into()], 30.0, (0.0, 0.0), data).unwrap()
    }

    #[test]
    fn constant_window() {
        let r = grid_raster(5, 5, |_, _| 0.7);
        let f = glcm_features(&r, 2, 2, 5, 32).unwrap();
        assert_eq!(f[2], 1.0); // homogeneity
        assert_eq!(f[3], 0.0); // contrast
        assert_eq!(f[4], 0.0); // dissimilarity
        assert_eq!(f[5], 0.0); // entropy
        assert_eq!(f[6], 1.0); // second moment
    }

    #[test]
    fn stripes_and_checkerboard_by_direction() {
        let stripes: Vec<Option<usize>> = (0..25).map(|i| Some((i / 5) % 2)).collect();
        let h = haralick_statistics(&cooccurrence_counts(&stripes, 5, 5, 2, &[Direction::Deg0]), 2).unwrap();
        assert_eq!(h[3], 0.0);

        let checker: Vec<Option<usize>> = (0..25).map(|i| Some((i / 5 + i % 5) % 2)).collect();
        let h = haralick_statistics(&cooccurrence_counts(&checker, 5, 5, 2, &[Direction::Deg0]), 2).unwrap();
        assert_eq!(h[3], 1.0);
        // Diagonal neighbours of a checkerboard share their level.
        let h = haralick_statistics(&cooccurrence_counts(&checker, 5, 5, 2, &[Direction::Deg45]), 2).unwrap();
        assert_eq!(h[3], 0.0);
    }

    #[test]
    fn window_errors() {
        let r = grid_raster(1, 1, |_, _| 0.5);
        assert!(glcm_features(&r, 0, 0, 5, 32).is_err());
        let r = grid_raster(5, 5, |r, c| (r + c) as f64);
        assert!(glcm_features(&r, 2, 2, 4, 32).is_err());
        assert!(glcm_features(&r, 2, 2, 5, 1).is_err());
    }

    #[test]
    fn quantization_bins() {
        let q = quantize(&[0.0, 0.5, 1.0, f64::NAN], 4);
        assert_eq!(q, vec![Some(0), Some(2), Some(3), None]);
    }

    /// Brute-force pair enumeration over all cell pairs at each offset.
    fn oracle_counts(grid: &[usize], w: usize, h: usize, levels: usize) -> Vec<u64> {
        let mut m = vec![0u64; levels * levels];
        for a in 0..w * h {
            for b in 0..w * h {
                let (ra, ca) = ((a / w) as isize, (a % w) as isize);
                let (rb, cb) = ((b / w) as isize, (b % w) as isize);
                let d = (rb - ra, cb - ca);
                if [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)].contains(&d) {
                    m[grid[a] * levels + grid[b]] += 1;
                }
            }
        }
        m
    }

    proptest! {
        #[test]
        fn counts_match_pair_enumeration(w in 1usize..8, h in 1usize..8, levels in 2usize..6, seed in proptest::collection::vec(0usize..100, 64)) {
            let grid: Vec<usize> = (0..w * h).map(|i| seed[i] % levels).collect();
            let q: Vec<Option<usize>> = grid.iter().map(|&g| Some(g)).collect();
            let counts = cooccurrence_counts(&q, w, h, levels, &Direction::ALL);
            prop_assert_eq!(&counts, &oracle_counts(&grid, w, h, levels));
            for i in 0..levels {
                for j in 0..levels {
                    prop_assert_eq!(counts[i * levels + j], counts[j * levels + i]);
                }
            }
            if counts.iter().sum::<u64>() > 0 {
                let total: u64 = counts.iter().sum();
                let psum: f64 = counts.iter().map(|&c| c as f64 / total as f64).sum();
                prop_assert!((psum - 1.0).abs() < 1e-12);
                let s = haralick_statistics(&counts, levels).unwrap();
                prop_assert!(s.iter().all(|v| v.is_finite()));
                prop_assert!(s[7] >= -1.0 - 1e-9 && s[7] <= 1.0 + 1e-9);
            }
        }
    }
}
