//! Whole-raster prediction from overlapping tiles.

use urbdense_core::labeler::{DensityLabelGrid, Dimension};
use urbdense_core::raster::MultiBandRaster;
use urbdense_core::sampler::tile_origins;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::softmax_channels;
use crate::model::{model_forward, Mode};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Tile origins along one axis, with a final tile clamped to the border.
pub fn covering_origins(extent: usize, size: usize, step: usize) -> Vec<usize> {
    let mut origins = tile_origins(extent, size, step);
    if let Some(&last) = origins.last() {
        if last + size < extent {
            origins.push(extent - size);
        }
    }
    origins
}

/// Labels every cell by averaging softmax probabilities over the tiles that
/// cover it. Cells with a non-finite band are fed to the network as zeros and
/// left unlabeled, with NaN probabilities. The second return value holds one
/// `p_<class>` band per class.
pub fn predict_map(
    config: &ModelConfig,
    params: &ModelParams,
    composite: &MultiBandRaster,
    dimension: Dimension,
    epoch: i32,
    step: usize,
) -> Result<(DensityLabelGrid, MultiBandRaster)> {
    config.validate()?;
    let (s, c) = (config.patch_size, config.n_classes);
    if dimension.n_classes() != c {
        return Err(Error::Config(format!("model has {c} classes but {dimension} needs {}", dimension.n_classes())));
    }
    if composite.bands() != config.in_bands {
        return Err(Error::shape(format!("raster has {} bands, model expects {}", composite.bands(), config.in_bands)));
    }
    let (h, w) = (composite.height(), composite.width());
    if h < s || w < s {
        return Err(Error::shape(format!("{h}x{w} raster is smaller than the {s}x{s} patch")));
    }
    if step == 0 || step > s {
        return Err(Error::Config(format!("step must be in 1..={s}, got {step}")));
    }
    let valid: Vec<bool> = (0..h * w)
        .map(|i| (0..composite.bands()).all(|b| composite.band(b)[i].is_finite()))
        .collect();
    let tiles: Vec<(usize, usize)> = covering_origins(h, s, step)
        .into_iter()
        .flat_map(|r| covering_origins(w, s, step).into_iter().map(move |col| (r, col)))
        .collect();
    let mut sum = vec![0.0; c * h * w];
    let mut hits = vec![0u32; h * w];
    for chunk in tiles.chunks(config.batch_size) {
        let mut input = Vec::with_capacity(chunk.len() * config.in_bands * s * s);
        for &(r0, c0) in chunk {
            for b in 0..config.in_bands {
                let band = composite.band(b);
                for r in r0..r0 + s {
                    for col in c0..c0 + s {
                        let i = r * w + col;
                        input.push(if valid[i] { band[i] } else { 0.0 });
                    }
                }
            }
        }
        let input = Tensor::new(vec![chunk.len(), config.in_bands, s, s], input)?;
        let scores = model_forward(config, params, &input, Mode::Eval)?;
        let probs = softmax_channels(scores.data(), (chunk.len(), c, s, s));
        for (t, &(r0, c0)) in chunk.iter().enumerate() {
            for r in 0..s {
                for col in 0..s {
                    let cell = (r0 + r) * w + c0 + col;
                    hits[cell] += 1;
                    for k in 0..c {
                        sum[k * h * w + cell] += probs[((t * c + k) * s + r) * s + col];
                    }
                }
            }
        }
    }
    let mut labels = vec![None; h * w];
    for cell in 0..h * w {
        if !valid[cell] || hits[cell] == 0 {
            for k in 0..c {
                sum[k * h * w + cell] = f64::NAN;
            }
            continue;
        }
        let n = f64::from(hits[cell]);
        let mut best = 0;
        for k in 0..c {
            sum[k * h * w + cell] /= n;
            if sum[k * h * w + cell] > sum[best * h * w + cell] {
                best = k;
            }
        }
        labels[cell] = Some(best as u8);
    }
    let names = dimension.class_names().iter().map(|n| format!("p_{n}")).collect();
    let probabilities = MultiBandRaster::with_geometry_of(composite, names, sum)?;
    let grid = DensityLabelGrid::new(dimension, epoch, composite, labels)?;
    Ok((grid, probabilities))
}

/// Number of tiles covering each cell, row-major.
pub fn tile_coverage(height: usize, width: usize, size: usize, step: usize) -> Vec<u32> {
    let mut hits = vec![0u32; height * width];
    for r0 in covering_origins(height, size, step) {
        for c0 in covering_origins(width, size, step) {
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    hits[r * width + c] += 1;
                }
            }
        }
    }
    hits
}
