//! Library form of the full workflow on a synthetic city: render, composite,
//! standardize, label, sample, train the three classifiers and score them
//! on a spatially disjoint test area.
//!
//! The grid is split by rows: the upper half supplies training and
//! validation data, the lower half is held out. Every training input is cut
//! from the upper-half crop, so no test cell is ever seen during training.

use std::collections::BTreeMap;

use urbdense_core::composite::{compute_band_scales, rolling_median_composite, standardize, BandScales};
use urbdense_core::eval::{confusion_matrix, summary_metrics, MetricsReport};
use urbdense_core::glcm_rf::{predict_texture_map, train_texture_forest, FeatureConfig, ForestParams, TextureForest};
use urbdense_core::labeler::{DensityLabelGrid, DensityScheme, Dimension};
use urbdense_core::raster::MultiBandRaster;
use urbdense_core::sampler::{
    balance_classes, extract_patches, sites_from_labels, split_train_validation, thin_by_distance, PatchDataset, SampleSite,
};
use urbdense_core::synthcity::{generate_city_timeline, render_stack, CityScenario};
use urbdense_segnet::{predict_map, train_model, Architecture, ModelConfig, ModelParams, Result, TrainingLog};

/// Every knob of a synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub seed: u64,
    pub size: usize,
    pub years: Vec<i32>,
    pub train_year: i32,
    /// Per-band multiplicative drift of every non-training year; 0 disables it.
    pub drift_amplitude: f64,
    pub noise_std: f64,
    pub qa_dropout: f64,
    pub composite_window: u32,
    pub percentile: f64,
    pub scheme: DensityScheme,
    pub min_distance: f64,
    pub cap_ratio: f64,
    pub patch_size: usize,
    pub patch_step: usize,
    pub validation_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_trees: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            seed: 7,
            size: 256,
            years: (2013..=2015).collect(),
            train_year: 2014,
            drift_amplitude: 0.0,
            noise_std: 0.01,
            qa_dropout: 0.3,
            composite_window: 3,
            percentile: 0.995,
            scheme: DensityScheme::default(),
            min_distance: 150.0,
            cap_ratio: 5.0,
            patch_size: 48,
            patch_step: 24,
            validation_fraction: 0.2,
            epochs: 12,
            learning_rate: 2e-4,
            batch_size: 8,
            n_trees: 200,
        }
    }
}

impl ExperimentSettings {
    pub fn model_config(&self, architecture: Architecture, dimension: Dimension) -> ModelConfig {
        let mut c = ModelConfig::new(architecture, dimension.n_classes());
        c.patch_size = self.patch_size;
        c.epochs = self.epochs;
        c.learning_rate = self.learning_rate;
        c.batch_size = self.batch_size;
        c.seed = self.seed;
        c
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            features_per_split: None,
            seed: self.seed,
        }
    }

    /// Rows `[0, split)` train, rows `[split, size)` test.
    pub fn split_row(&self) -> usize {
        self.size / 2
    }
}

/// A rendered scenario with standardized composites of the requested years.
pub struct PreparedCity {
    pub scenario: CityScenario,
    pub scales: BandScales,
    pub composites: BTreeMap<i32, MultiBandRaster>,
}

/// Renders the city, composites `composite_years` and standardizes every
/// composite with the training year's band scales.
pub fn prepare_city(settings: &ExperimentSettings, composite_years: &[i32]) -> Result<PreparedCity> {
    let mut scenario = generate_city_timeline(settings.seed, &settings.years, settings.size)?;
    if settings.drift_amplitude > 0.0 {
        scenario.apply_random_drift(settings.drift_amplitude, settings.train_year)?;
    }
    let stack = render_stack(&scenario, &settings.years, settings.noise_std, settings.qa_dropout)?;
    let train_raw = rolling_median_composite(&stack, settings.train_year, settings.composite_window)?;
    let scales = compute_band_scales(&train_raw, settings.percentile, settings.train_year)?;
    let mut composites = BTreeMap::new();
    for &year in composite_years {
        let raw = if year == settings.train_year {
            train_raw.clone()
        } else {
            rolling_median_composite(&stack, year, settings.composite_window)?
        };
        composites.insert(year, standardize(&raw, &scales)?);
    }
    Ok(PreparedCity {
        scenario,
        scales,
        composites,
    })
}

pub fn crop_labels(grid: &DensityLabelGrid, row0: usize, rows: usize) -> Result<DensityLabelGrid> {
    let cropped = grid.to_raster().crop(row0, 0, rows, grid.width)?;
    Ok(DensityLabelGrid::from_raster(&cropped)?)
}

/// The reference grid of `dimension` in `year`.
pub fn reference_labels(city: &PreparedCity, settings: &ExperimentSettings, dimension: Dimension, year: i32) -> Result<DensityLabelGrid> {
    let (h, v) = city.scenario.labels(year, &settings.scheme)?;
    Ok(match dimension {
        Dimension::Horizontal => h,
        Dimension::Vertical => v,
    })
}

/// Training material cut from the upper half.
pub struct TrainingData {
    pub composite: MultiBandRaster,
    pub labels: DensityLabelGrid,
    pub sites: Vec<SampleSite>,
    pub train: PatchDataset,
    pub validation: PatchDataset,
}

/// Thins and balances the labeled cells of the training area and cuts them
/// into training and validation patches.
pub fn training_data(city: &PreparedCity, settings: &ExperimentSettings, dimension: Dimension) -> Result<TrainingData> {
    let rows = settings.split_row();
    let composite = city.composites[&settings.train_year].crop(0, 0, rows, settings.size)?;
    let labels = crop_labels(&reference_labels(city, settings, dimension, settings.train_year)?, 0, rows)?;
    let sites = sites_from_labels(&labels, None);
    let sites = thin_by_distance(&sites, settings.min_distance, composite.cell_size(), settings.seed);
    let sites = balance_classes(&sites, settings.cap_ratio, settings.seed)?;
    let patches = extract_patches(&composite, &labels, &sites, settings.patch_size, settings.patch_step)?;
    let (train, validation) = split_train_validation(&patches, settings.validation_fraction, settings.seed)?;
    Ok(TrainingData {
        composite,
        labels,
        sites,
        train,
        validation,
    })
}

pub fn train_network(
    settings: &ExperimentSettings,
    architecture: Architecture,
    data: &TrainingData,
) -> Result<(ModelConfig, ModelParams, TrainingLog)> {
    let config = settings.model_config(architecture, data.labels.dimension);
    let (params, log) = train_model(&config, &data.train, &data.validation)?;
    Ok((config, params, log))
}

/// The forest is trained on every retained site of the training area,
/// validation patches included, since it has no epoch selection.
pub fn train_forest(settings: &ExperimentSettings, data: &TrainingData) -> Result<TextureForest> {
    Ok(train_texture_forest(
        &data.composite,
        &data.sites,
        data.labels.dimension,
        FeatureConfig::default(),
        &settings.forest_params(),
    )?)
}

/// Lower-half crop of a full-grid raster.
pub fn test_crop(settings: &ExperimentSettings, raster: &MultiBandRaster) -> Result<MultiBandRaster> {
    let rows = settings.split_row();
    Ok(raster.crop(rows, 0, settings.size - rows, settings.size)?)
}

/// Accuracy of `predicted` against `reference` over cells labeled in both.
pub fn score(predicted: &DensityLabelGrid, reference: &DensityLabelGrid) -> Result<MetricsReport> {
    let names = reference.dimension.class_names();
    let cm = confusion_matrix(&predicted.labels, &reference.labels, names)?;
    Ok(summary_metrics(&cm)?)
}

/// A classifier trained on the upper half, ready to map any composite.
pub enum Classifier {
    Network { config: ModelConfig, params: ModelParams },
    Forest(TextureForest),
}

impl Classifier {
    pub fn name(&self) -> String {
        match self {
            Classifier::Network { config, .. } => config.architecture.to_string(),
            Classifier::Forest(_) => "rf".into(),
        }
    }

    pub fn map(&self, composite: &MultiBandRaster, dimension: Dimension, epoch: i32, step: usize) -> Result<DensityLabelGrid> {
        Ok(match self {
            Classifier::Network { config, params } => predict_map(config, params, composite, dimension, epoch, step)?.0,
            Classifier::Forest(forest) => predict_texture_map(forest, composite, epoch)?.0,
        })
    }

    /// Test-area accuracy on the composite of `year`.
    pub fn test_accuracy(&self, city: &PreparedCity, settings: &ExperimentSettings, dimension: Dimension, year: i32) -> Result<MetricsReport> {
        let composite = test_crop(settings, &city.composites[&year])?;
        let predicted = self.map(&composite, dimension, year, settings.patch_step)?;
        let rows = settings.split_row();
        let reference = crop_labels(&reference_labels(city, settings, dimension, year)?, rows, settings.size - rows)?;
        score(&predicted, &reference)
    }
}

/// Trains FCN, DeepLab and the texture forest for one dimension.
pub fn train_all(city: &PreparedCity, settings: &ExperimentSettings, dimension: Dimension) -> Result<Vec<(Classifier, Option<TrainingLog>)>> {
    let data = training_data(city, settings, dimension)?;
    log::info!(
        "{dimension}: {} sites, {} train / {} validation patches",
        data.sites.len(),
        data.train.len(),
        data.validation.len()
    );
    let mut out = Vec::new();
    for arch in [Architecture::Fcn, Architecture::DeepLab] {
        let (config, params, log) = train_network(settings, arch, &data)?;
        out.push((Classifier::Network { config, params }, Some(log)));
    }
    out.push((Classifier::Forest(train_forest(settings, &data)?), None));
    Ok(out)
}
