//! Savitzky-Golay smoothing of annual class-probability series.

use crate::error::{Error, Result};
use crate::labeler::{DensityLabelGrid, Dimension};
use crate::raster::MultiBandRaster;

/// Weights of the least-squares polynomial fit of degree `polyorder` over
/// `window` points, evaluated at the center point.
pub fn savgol_coefficients(window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(Error::invalid(format!("Savitzky-Golay window must be odd, got {window}")));
    }
    if polyorder >= window {
        return Err(Error::invalid(format!(
            "polyorder {polyorder} must be below the window {window}"
        )));
    }
    let half = (window / 2) as i64;
    let scale = half.max(1) as f64;
    // Orthonormal basis of the polynomial space on the window (Gram-Schmidt,
    // applied twice for stability); the weights are the center row of the
    // projection onto that space.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(polyorder + 1);
    for k in 0..=polyorder {
        let mut v: Vec<f64> = (-half..=half).map(|x| (x as f64 / scale).powi(k as i32)).collect();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let center = half as usize;
    Ok((0..window)
        .map(|j| basis.iter().map(|q| q[center] * q[j]).sum())
        .collect())
}

/// Annual class probabilities of one cell over contiguous years.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSeries {
    pub years: Vec<i32>,
    /// `probabilities[t][k]`: probability of class `k` in `years[t]`.
    pub probabilities: Vec<Vec<f64>>,
}

impl ClassSeries {
    pub fn new(years: Vec<i32>, probabilities: Vec<Vec<f64>>) -> Result<Self> {
        if years.len() != probabilities.len() {
            return Err(Error::invalid("years and probability rows differ in length"));
        }
        if years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::invalid("years must be strictly increasing and contiguous"));
        }
        if let Some(first) = probabilities.first() {
            if probabilities.iter().any(|p| p.len() != first.len()) {
                return Err(Error::invalid("every year needs the same class count"));
            }
        }
        Ok(Self { years, probabilities })
    }
}

/// Smoothed output for one cell: labels (`None` for the dropped edge years)
/// and the clamped, renormalized probabilities of labeled years.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSeries {
    pub years: Vec<i32>,
    pub labels: Vec<Option<u8>>,
    pub probabilities: Vec<Option<Vec<f64>>>,
}

fn argmax(values: &[f64]) -> u8 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u8
}

/// Raw (unclamped) filtered probabilities of the interior years.
pub fn filter_probabilities(series: &ClassSeries, coefficients: &[f64]) -> Result<Vec<Vec<f64>>> {
    let window = coefficients.len();
    let n = series.years.len();
    if n < window {
        return Err(Error::InsufficientData(format!(
            "series of {n} years is shorter than the window {window}"
        )));
    }
    let classes = series.probabilities[0].len();
    Ok((0..=n - window)
        .map(|start| {
            (0..classes)
                .map(|k| {
                    coefficients
                        .iter()
                        .enumerate()
                        .map(|(i, c)| c * series.probabilities[start + i][k])
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Filters each class track, clamps at zero, renormalizes and takes the argmax.
/// The first and last `window / 2` years carry no label.
pub fn smooth_class_series(series: &ClassSeries, window: usize, polyorder: usize) -> Result<SmoothedSeries> {
    let coefficients = savgol_coefficients(window, polyorder)?;
    let filtered = filter_probabilities(series, &coefficients)?;
    let half = window / 2;
    let n = series.years.len();
    let mut labels = vec![None; n];
    let mut probabilities = vec![None; n];
    for (offset, raw) in filtered.into_iter().enumerate() {
        let t = offset + half;
        let mut p: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let sum: f64 = p.iter().sum();
        if sum > 0.0 {
            p.iter_mut().for_each(|v| *v /= sum);
        } else {
            p = series.probabilities[t].clone();
        }
        labels[t] = Some(argmax(&p));
        probabilities[t] = Some(p);
    }
    Ok(SmoothedSeries {
        years: series.years.clone(),
        labels,
        probabilities,
    })
}

/// Smooths per-year probability rasters cell by cell. Returns one label grid
/// per interior year. Cells with a NaN probability in any year are unlabeled.
pub fn smooth_probability_rasters(
    dimension: Dimension,
    years: &[i32],
    rasters: &[MultiBandRaster],
    window: usize,
    polyorder: usize,
) -> Result<Vec<DensityLabelGrid>> {
    if years.len() != rasters.len() || rasters.is_empty() {
        return Err(Error::invalid("need one probability raster per year"));
    }
    ClassSeries::new(years.to_vec(), vec![Vec::new(); years.len()])?;
    let template = &rasters[0];
    for r in rasters {
        template.check_geometry(r, "probability series")?;
        if r.bands() != template.bands() {
            return Err(Error::Geometry("probability rasters differ in class count".into()));
        }
    }
    savgol_coefficients(window, polyorder)?;
    let half = window / 2;
    let n = years.len();
    if n < window {
        return Err(Error::InsufficientData(format!(
            "series of {n} years is shorter than the window {window}"
        )));
    }
    let classes = template.bands();
    let cells = template.cells();
    let mut grids: Vec<Vec<Option<u8>>> = vec![vec![None; cells]; n - 2 * half];
    let mut probs = vec![vec![0.0; classes]; n];
    for cell in 0..cells {
        let mut valid = true;
        for (t, r) in rasters.iter().enumerate() {
            for (k, p) in probs[t].iter_mut().enumerate() {
                *p = r.band(k)[cell];
                valid &= p.is_finite();
            }
        }
        if !valid {
            continue;
        }
        let series = ClassSeries {
            years: years.to_vec(),
            probabilities: probs.clone(),
        };
        let smoothed = smooth_class_series(&series, window, polyorder)?;
        for (g, grid) in grids.iter_mut().enumerate() {
            grid[cell] = smoothed.labels[g + half];
        }
    }
    grids
        .into_iter()
        .enumerate()
        .map(|(g, labels)| DensityLabelGrid::new(dimension, years[g + half], template, labels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Closed-form quadratic/cubic smoothing weights for a window of 2m + 1.
    fn quadratic_weights(m: i64) -> Vec<f64> {
        let denom = ((2 * m + 3) * (2 * m + 1) * (2 * m - 1)) as f64;
        (-m..=m)
            .map(|i| (3.0 * (3 * m * m + 3 * m - 1) as f64 - 15.0 * (i * i) as f64) / denom)
            .collect()
    }

    #[test]
    fn classic_tables() {
        let c = savgol_coefficients(5, 2).unwrap();
        let expected = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = savgol_coefficients(3, 1).unwrap();
        for a in c {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for m in 2..8 {
            let got = savgol_coefficients((2 * m + 1) as usize, 2).unwrap();
            for (a, b) in got.iter().zip(quadratic_weights(m)) {
                assert!((a - b).abs() < 1e-10, "m={m}");
            }
        }
        assert!(savgol_coefficients(4, 2).is_err());
        assert!(savgol_coefficients(5, 5).is_err());
    }

    #[test]
    fn symmetric_and_normalized() {
        for window in (1..16).step_by(2) {
            for order in 0..window {
                let c = savgol_coefficients(window, order).unwrap();
                assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-8, "{window},{order}");
                for i in 0..window {
                    assert!((c[i] - c[window - 1 - i]).abs() < 1e-8);
                }
            }
        }
    }

    fn series(rows: Vec<Vec<f64>>) -> ClassSeries {
        let years = (0..rows.len() as i32).map(|i| 1985 + i).collect();
        ClassSeries::new(years, rows).unwrap()
    }

    #[test]
    fn constant_series_keeps_labels() {
        let s = series(vec![vec![0.1, 0.7, 0.2]; 9]);
        let out = smooth_class_series(&s, 5, 2).unwrap();
        assert_eq!(out.labels[..2], [None, None]);
        assert_eq!(out.labels[7..], [None, None]);
        assert!(out.labels[2..7].iter().all(|l| *l == Some(1)));
    }

    #[test]
    fn impulse_response() {
        let mut rows = vec![vec![0.0, 1.0]; 9];
        rows[4] = vec![1.0, 0.0];
        let c = savgol_coefficients(5, 2).unwrap();
        let raw = filter_probabilities(&series(rows), &c).unwrap();
        // Interior index 4 corresponds to filtered row 2.
        assert!((raw[2][0] - 17.0 / 35.0).abs() < 1e-12);
    }

    #[test]
    fn thirty_four_years_keep_thirty() {
        let s = series(vec![vec![0.5, 0.5]; 34]);
        let out = smooth_class_series(&s, 5, 2).unwrap();
        assert_eq!(out.labels.iter().filter(|l| l.is_some()).count(), 30);
        assert!(smooth_class_series(&series(vec![vec![1.0]; 4]), 5, 2).is_err());
    }

    #[test]
    fn monotone_densification_does_not_oscillate() {
        // Probability mass moves steadily from class 0 to class 3.
        for speed in [0.05, 0.1, 0.2, 0.35] {
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|t| {
                    let x = (t as f64 * speed).min(3.0);
                    let mut p = vec![0.0; 4];
                    let lo = x.floor() as usize;
                    let frac = x - lo as f64;
                    p[lo.min(3)] += 1.0 - frac;
                    if lo < 3 {
                        p[lo + 1] += frac;
                    }
                    p
                })
                .collect();
            let out = smooth_class_series(&series(rows), 5, 2).unwrap();
            let labels: Vec<u8> = out.labels.iter().flatten().copied().collect();
            assert!(labels.windows(2).all(|w| w[0] <= w[1]), "speed {speed}: {labels:?}");
        }
    }

    proptest! {
        #[test]
        fn reproduces_low_degree_polynomials(a in -1.0f64..1.0, b in -0.5f64..0.5, c in -0.1f64..0.1, half in 1usize..5) {
            let window = 2 * half + 1;
            let coeffs = savgol_coefficients(window, 2).unwrap();
            for t0 in -3i64..3 {
                let y: Vec<f64> = (0..window as i64).map(|i| {
                    let x = (t0 + i) as f64;
                    a + b * x + c * x * x
                }).collect();
                let center = (t0 + half as i64) as f64;
                let expect = a + b * center + c * center * center;
                let got: f64 = coeffs.iter().zip(&y).map(|(w, v)| w * v).sum();
                prop_assert!((got - expect).abs() < 1e-9);
            }
        }

        #[test]
        fn smoothed_probabilities_are_distributions(raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 5..15)) {
            let rows: Vec<Vec<f64>> = raw.iter().map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-9;
                r.iter().map(|v| (v + 1e-9 / 3.0) / s).collect()
            }).collect();
            let out = smooth_class_series(&series(rows), 5, 2).unwrap();
            for p in out.probabilities.iter().flatten() {
                prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
