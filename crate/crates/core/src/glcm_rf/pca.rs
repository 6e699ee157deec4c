use crate::error::{Error, Result};
use crate::raster::MultiBandRaster;

/// Leading principal component of a raster's bands.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalComponent {
    /// Unit loadings; the largest-magnitude entry is positive.
    pub loadings: Vec<f64>,
    pub band_means: Vec<f64>,
    pub eigenvalue: f64,
    /// Share of total variance captured by this component.
    pub explained: f64,
}

impl PrincipalComponent {
    pub fn project(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.band_means)
            .zip(&self.loadings)
            .map(|((v, m), l)| (v - m) * l)
            .sum()
    }
}

/// Sample covariance (divide by n) of the cells where every band is finite.
pub fn band_covariance(raster: &MultiBandRaster) -> (Vec<f64>, Vec<Vec<f64>>, usize) {
    let bands = raster.bands();
    let finite: Vec<usize> = (0..raster.cells())
        .filter(|&i| (0..bands).all(|b| raster.band(b)[i].is_finite()))
        .collect();
    let n = finite.len();
    let mut means = vec![0.0; bands];
    for (b, m) in means.iter_mut().enumerate() {
        let band = raster.band(b);
        *m = finite.iter().map(|&i| band[i]).sum::<f64>() / n.max(1) as f64;
    }
    let mut cov = vec![vec![0.0; bands]; bands];
    for a in 0..bands {
        for b in a..bands {
            let (ba, bb) = (raster.band(a), raster.band(b));
            let s: f64 = finite.iter().map(|&i| (ba[i] - means[a]) * (bb[i] - means[b])).sum();
            cov[a][b] = s / n.max(1) as f64;
            cov[b][a] = cov[a][b];
        }
    }
    (means, cov, n)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors (as rows), unsorted.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

/// Leading eigenvector of the mean-centered band covariance over finite cells.
pub fn fit_first_component(raster: &MultiBandRaster) -> Result<PrincipalComponent> {
    let (means, cov, n) = band_covariance(raster);
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 finite cells, found {n}")));
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let total: f64 = values.iter().sum();
    // Rounding in the means leaves ~1e-33 of spurious variance on flat input.
    let magnitude: f64 = 1.0 + means.iter().map(|m| m * m).sum::<f64>();
    if !(total > 1e-24 * magnitude) {
        return Err(Error::InsufficientData("zero-variance input has no principal component".into()));
    }
    let best = (0..values.len())
        .max_by(|&i, &j| values[i].total_cmp(&values[j]).then(j.cmp(&i)))
        .expect("at least one band");
    let mut loadings = vectors[best].clone();
    let norm = loadings.iter().map(|x| x * x).sum::<f64>().sqrt();
    loadings.iter_mut().for_each(|x| *x /= norm);
    orient(&mut loadings);
    Ok(PrincipalComponent {
        loadings,
        band_means: means,
        eigenvalue: values[best],
        explained: values[best] / total,
    })
}

/// Flips the sign so the largest-magnitude loading is positive.
pub fn orient(loadings: &mut [f64]) {
    let pivot = loadings
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .map(|(_, v)| v)
        .unwrap_or(0.0);
    if pivot < 0.0 {
        loadings.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects every cell onto the first principal component. Cells with any NaN band stay NaN.
pub fn pca_first_component(raster: &MultiBandRaster) -> Result<(MultiBandRaster, PrincipalComponent)> {
    let pc = fit_first_component(raster)?;
    Ok((apply_component(raster, &pc)?, pc))
}

pub fn apply_component(raster: &MultiBandRaster, pc: &PrincipalComponent) -> Result<MultiBandRaster> {
    if pc.loadings.len() != raster.bands() {
        return Err(Error::invalid(format!(
            "component has {} loadings for {} bands",
            pc.loadings.len(),
            raster.bands()
        )));
    }
    let mut values = vec![0.0; raster.bands()];
    let data = (0..raster.cells())
        .map(|i| {
            for (b, v) in values.iter_mut().enumerate() {
                *v = raster.band(b)[i];
            }
            if values.iter().all(|v| v.is_finite()) {
                pc.project(&values)
            } else {
                f64::NAN
            }
        })
        .collect();
    MultiBandRaster::with_geometry_of(raster, vec!["pc1".into()], data)
}
