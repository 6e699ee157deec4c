//! Adam training with per-epoch validation and best-epoch selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urbdense_core::eval::{confusion_matrix, summary_metrics};
use urbdense_core::sampler::PatchDataset;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{build_logits, init_params, model_forward, Builder, Mode};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Weight of the newest batch in the running batch-norm moments.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Self {
            learning_rate,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from per-parameter gradients (`None` for untouched entries).
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>]) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = params.entry_mut(i).tensor.data_mut();
            for j in 0..g.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                theta[j] -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPSILON);
            }
        }
    }
}

/// Stacks patches into an (n, bands, s, s) input plus flat targets and mask.
pub fn batch_tensors(ds: &PatchDataset, indices: &[usize]) -> Result<(Tensor, Vec<u8>, Vec<bool>)> {
    let s = ds.patch_size;
    let mut input = Vec::with_capacity(indices.len() * ds.bands * s * s);
    let mut targets = Vec::with_capacity(indices.len() * s * s);
    let mut mask = Vec::with_capacity(indices.len() * s * s);
    for &i in indices {
        let p = &ds.patches[i];
        input.extend_from_slice(&p.input);
        targets.extend_from_slice(&p.labels);
        mask.extend_from_slice(&p.loss_mask);
    }
    Ok((Tensor::new(vec![indices.len(), ds.bands, s, s], input)?, targets, mask))
}

/// Forward, backward and one Adam update; returns the batch loss.
pub fn train_step(
    config: &ModelConfig,
    params: &mut ModelParams,
    adam: &mut Adam,
    input: Tensor,
    targets: &[u8],
    mask: &[bool],
) -> Result<f64> {
    let (grads, moments, loss) = {
        let mut b = Builder::new(params, Mode::Train);
        let x = b.input(input);
        let logits = build_logits(&mut b, config, x)?;
        let loss_var = b.graph.softmax_cross_entropy(logits, targets, mask)?;
        let loss = b.graph.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Ok(loss);
        }
        b.graph.backward(loss_var)?;
        let grads = b.param_grads();
        (grads, std::mem::take(&mut b.bn_moments), loss)
    };
    adam.step(params, &grads);
    for (name, mean, var) in moments {
        for (suffix, batch) in [("mean", mean), ("var", var)] {
            let i = params
                .position(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::shape(format!("missing running moment {name}.{suffix}")))?;
            let running = params.entry_mut(i).tensor.data_mut();
            for (r, b) in running.iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(loss)
}

/// Per-cell argmax of inference-mode scores for every patch, `batch_size` at a time.
pub fn predict_patches(config: &ModelConfig, params: &ModelParams, ds: &PatchDataset) -> Result<Vec<Vec<u8>>> {
    let s = ds.patch_size;
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(config.batch_size) {
        let (input, _, _) = batch_tensors(ds, chunk)?;
        let scores = model_forward(config, params, &input, Mode::Eval)?;
        let c = config.n_classes;
        for b in 0..chunk.len() {
            let labels = (0..s * s)
                .map(|cell| {
                    let mut best = 0;
                    for k in 1..c {
                        if scores.data()[(b * c + k) * s * s + cell] > scores.data()[(b * c + best) * s * s + cell] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            out.push(labels);
        }
    }
    Ok(out)
}

/// (overall accuracy, average F1) over loss-mask cells of `ds`.
pub fn evaluate_dataset(config: &ModelConfig, params: &ModelParams, ds: &PatchDataset) -> Result<(f64, f64)> {
    let predictions = predict_patches(config, params, ds)?;
    let mut pred = Vec::new();
    let mut reference = Vec::new();
    for (p, labels) in ds.patches.iter().zip(&predictions) {
        for cell in 0..labels.len() {
            if p.loss_mask[cell] {
                pred.push(Some(labels[cell]));
                reference.push(Some(p.labels[cell]));
            }
        }
    }
    let names = ds.dimension.class_names();
    let cm = confusion_matrix(&pred, &reference, names)?;
    let report = summary_metrics(&cm)?;
    Ok((report.overall.value, report.average_f1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_oa: f64,
    pub val_avg_f1: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Index into `epochs` of the returned parameters.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_oa,val_avg_f1\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.val_oa, e.val_avg_f1).unwrap();
        }
        s
    }
}

fn check_dataset(config: &ModelConfig, ds: &PatchDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::NoLabels(format!("{what} dataset is empty")));
    }
    if ds.bands != config.in_bands {
        return Err(Error::shape(format!("{what} patches have {} bands, model expects {}", ds.bands, config.in_bands)));
    }
    if ds.patches.iter().all(|p| p.labeled_cells() == 0) {
        return Err(Error::NoLabels(format!("every {what} patch has an empty loss mask")));
    }
    for p in &ds.patches {
        if p.labels.iter().zip(&p.loss_mask).any(|(l, m)| *m && *l as usize >= config.n_classes) {
            return Err(Error::Config(format!("{what} labels exceed {} classes", config.n_classes)));
        }
    }
    Ok(())
}

/// Trains freshly initialized parameters; see [`train_from`].
pub fn train_model(config: &ModelConfig, train: &PatchDataset, validation: &PatchDataset) -> Result<(ModelParams, TrainingLog)> {
    train_from(config, init_params(config)?, train, validation)
}

/// Runs `config.epochs` epochs of shuffled mini-batches from `initial` and
/// returns the parameters of the epoch with the best validation average F1
/// (earliest on ties) together with the per-epoch log.
pub fn train_from(
    config: &ModelConfig,
    initial: ModelParams,
    train: &PatchDataset,
    validation: &PatchDataset,
) -> Result<(ModelParams, TrainingLog)> {
    config.validate()?;
    check_dataset(config, train, "training")?;
    check_dataset(config, validation, "validation")?;
    let usable: Vec<usize> = (0..train.len()).filter(|&i| train.patches[i].labeled_cells() > 0).collect();
    let mut params = initial;
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (input, targets, mask) = batch_tensors(train, batch)?;
            let loss = train_step(config, &mut params, &mut adam, input, &targets, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, step: step + 1 });
            }
            total += loss;
            steps += 1;
        }
        let (val_oa, val_avg_f1) = evaluate_dataset(config, &params, validation)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: total / steps.max(1) as f64,
            val_oa,
            val_avg_f1,
            steps: adam.steps,
        };
        log::info!(
            "epoch {} loss {:.4} val_oa {:.4} val_avg_f1 {:.4}",
            entry.epoch,
            entry.loss,
            entry.val_oa,
            entry.val_avg_f1
        );
        if best.as_ref().is_none_or(|(f1, _)| val_avg_f1 > *f1) {
            best = Some((val_avg_f1, params.clone()));
            log.best_epoch = log.epochs.len();
        }
        log.epochs.push(entry);
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Architecture, ChannelPlan};
    use urbdense_core::labeler::Dimension;
    use urbdense_core::sampler::Patch;

    fn toy(n: usize, size: usize) -> PatchDataset {
        let patches = (0..n)
            .map(|i| {
                let mut input = vec![0.0; 6 * size * size];
                let mut labels = vec![0u8; size * size];
                for r in 0..size {
                    for c in 0..size {
                        let class = u8::from((r + c + i) % 7 < 3);
                        labels[r * size + c] = class;
                        for b in 0..6 {
                            input[(b * size + r) * size + c] = f64::from(class) * (b as f64 * 0.1 + 0.5) - 0.3;
                        }
                    }
                }
                Patch {
                    origin: (0, i),
                    input,
                    labels,
                    loss_mask: (0..size * size).map(|c| c % 5 != 0).collect(),
                }
            })
            .collect();
        PatchDataset {
            patch_size: size,
            step: size / 2,
            bands: 6,
            dimension: Dimension::Vertical,
            epoch: 2014,
            patches,
        }
    }

    fn config(arch: Architecture) -> ModelConfig {
        let mut c = ModelConfig::new(arch, 3);
        c.channels = ChannelPlan::tiny();
        c.patch_size = 8;
        c.epochs = 3;
        c.batch_size = 2;
        c.learning_rate = 0.01;
        c.seed = 5;
        c
    }

    #[test]
    fn loss_decreases_and_training_is_deterministic() {
        for arch in [Architecture::Fcn, Architecture::DeepLab] {
            let c = config(arch);
            let ds = toy(4, 8);
            let (p1, log1) = train_model(&c, &ds, &ds).unwrap();
            let (p2, log2) = train_model(&c, &ds, &ds).unwrap();
            assert_eq!(log1, log2);
            assert_eq!(p1, p2);
            assert!(log1.epochs.last().unwrap().loss < log1.epochs[0].loss);
            let best = log1.epochs.iter().map(|e| e.val_avg_f1).fold(f64::MIN, f64::max);
            assert_eq!(log1.epochs[log1.best_epoch].val_avg_f1, best);
            assert_eq!(evaluate_dataset(&c, &p1, &ds).unwrap().1, best);
            assert!(log1.to_csv().starts_with("epoch,loss,val_oa,val_avg_f1\n"));
        }
    }

    #[test]
    fn rejects_unusable_data() {
        let c = config(Architecture::Fcn);
        let mut ds = toy(2, 8);
        for p in &mut ds.patches {
            p.loss_mask.fill(false);
        }
        assert!(matches!(train_model(&c, &ds, &ds), Err(Error::NoLabels(_))));
        let mut ds = toy(2, 8);
        ds.patches[0].labels[1] = 7;
        assert!(train_model(&c, &ds, &ds).is_err());
    }

    #[test]
    fn non_finite_input_reports_epoch_and_step() {
        let mut c = config(Architecture::Fcn);
        c.batch_size = 4;
        let mut ds = toy(4, 8);
        ds.patches[2].input[10] = f64::NAN;
        match train_model(&c, &ds, &ds) {
            Err(Error::NonFiniteLoss { epoch, step }) => assert_eq!((epoch, step), (1, 1)),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.1)),
        }
    }
}
