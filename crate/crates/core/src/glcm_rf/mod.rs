//! Texture random-forest baseline: 30 spectral window statistics plus eight
//! GLCM statistics of the first principal component, classified by a random forest.

pub mod features;
pub mod forest;
pub mod glcm;
pub mod pca;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use features::{cell_features, feature_names, grid_features, spectral_stats, FeatureConfig, FeatureVector, N_FEATURES};
pub use forest::{rf_predict, rf_train, DecisionTree, ForestModel, ForestParams, Node};
pub use glcm::{cooccurrence_counts, glcm_features, haralick_statistics, quantize, Direction};
pub use pca::{apply_component, fit_first_component, pca_first_component, PrincipalComponent};

use crate::error::{Error, Result};
use crate::labeler::{DensityLabelGrid, Dimension};
use crate::raster::MultiBandRaster;
use crate::sampler::SampleSite;

/// A trained texture forest together with the feature definition it was fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureForest {
    pub dimension: Dimension,
    pub features: FeatureConfig,
    /// Principal component fit on the training composite and reused for every year.
    pub component: PrincipalComponent,
    pub forest: ForestModel,
}

/// Fits PCA on `composite`, extracts features at `sites` and trains the forest.
/// Sites whose window has no valid data are skipped.
pub fn train_texture_forest(
    composite: &MultiBandRaster,
    sites: &[SampleSite],
    dimension: Dimension,
    features: FeatureConfig,
    params: &ForestParams,
) -> Result<TextureForest> {
    let (pc1, component) = pca_first_component(composite)?;
    let mut rows = Vec::with_capacity(sites.len());
    let mut labels = Vec::with_capacity(sites.len());
    for s in sites {
        if let Ok(f) = cell_features(composite, &pc1, s.row, s.col, &features) {
            rows.push(f.0);
            labels.push(s.label);
        }
    }
    let mut forest = rf_train(&rows, &labels, params)?;
    // Keep the class count of the scheme even when the top classes are absent.
    if forest.n_classes < dimension.n_classes() {
        widen_histograms(&mut forest, dimension.n_classes());
    }
    Ok(TextureForest {
        dimension,
        features,
        component,
        forest,
    })
}

fn widen_histograms(forest: &mut ForestModel, n_classes: usize) {
    for tree in &mut forest.trees {
        for node in &mut tree.nodes {
            if let Node::Leaf { histogram } = node {
                histogram.resize(n_classes, 0);
            }
        }
    }
    forest.n_classes = n_classes;
}

/// Classifies every cell; returns labels and a per-class vote-fraction raster.
pub fn predict_texture_map(model: &TextureForest, composite: &MultiBandRaster, epoch: i32) -> Result<(DensityLabelGrid, MultiBandRaster)> {
    let pc1 = apply_component(composite, &model.component)?;
    let n_classes = model.forest.n_classes;
    let cells = composite.cells();
    let mut probs = vec![f64::NAN; n_classes * cells];
    let mut labels = vec![None; cells];
    for (i, f) in grid_features(composite, &pc1, &model.features).into_iter().enumerate() {
        // NaN-input cells stay unlabeled even when their window has valid neighbours.
        if (0..composite.bands()).any(|b| composite.band(b)[i].is_nan()) {
            continue;
        }
        if let Some(f) = f {
            let (class, frac) = rf_predict(&model.forest, &f.0)?;
            labels[i] = Some(class);
            for (k, p) in frac.into_iter().enumerate() {
                probs[k * cells + i] = p;
            }
        }
    }
    let names = model.dimension.class_names().iter().map(|n| format!("p_{n}")).collect();
    Ok((
        DensityLabelGrid::new(model.dimension, epoch, composite, labels)?,
        MultiBandRaster::with_geometry_of(composite, names, probs)?,
    ))
}

impl TextureForest {
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "dimension={}", self.dimension).unwrap();
        writeln!(s, "window={}", self.features.window).unwrap();
        writeln!(s, "glcm_levels={}", self.features.glcm_levels).unwrap();
        writeln!(s, "pc_loadings={}", join(&self.component.loadings)).unwrap();
        writeln!(s, "pc_means={}", join(&self.component.band_means)).unwrap();
        writeln!(s, "pc_eigenvalue={:?}", self.component.eigenvalue).unwrap();
        writeln!(s, "pc_explained={:?}", self.component.explained).unwrap();
        s.push_str(&self.forest.to_text());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let start = text
            .find("forest ")
            .ok_or_else(|| Error::format(0, "texture model lacks a forest section"))?;
        let mut kv = std::collections::HashMap::new();
        for line in text[..start].lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(0, format!("bad header line {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::format(0, format!("missing {k}")));
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::format(0, format!("bad {k}"))))
                .collect()
        };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::format(0, format!("bad {k}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(0, format!("bad {k}"))) };
        Ok(Self {
            dimension: Dimension::parse(get("dimension")?)?,
            features: FeatureConfig {
                window: int("window")?,
                glcm_levels: int("glcm_levels")?,
            },
            component: PrincipalComponent {
                loadings: floats("pc_loadings")?,
                band_means: floats("pc_means")?,
                eigenvalue: float("pc_eigenvalue")?,
                explained: float("pc_explained")?,
            },
            forest: ForestModel::from_text(&text[start..])?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
