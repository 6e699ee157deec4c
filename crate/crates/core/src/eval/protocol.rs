//! Experiment harnesses: training-set size sensitivity and temporal transfer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::metrics::MetricsReport;

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.9, 0.7, 0.5, 0.3, 0.2];
pub const DEFAULT_FOLDS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub fraction: f64,
    pub subset_size: usize,
    pub mean_oa: f64,
    /// Sample standard deviation over folds; 0 for a single fold.
    pub std_oa: f64,
    pub fold_oa: Vec<f64>,
}

/// For every fraction, draws `folds` seeded random subsets of `0..n_items`
/// and calls `train_eval(subset, fold_seed)`, which trains a fresh model on
/// the subset and returns its validation OA.
pub fn sample_size_sensitivity<F>(
    n_items: usize,
    fractions: &[f64],
    folds: usize,
    seed: u64,
    mut train_eval: F,
) -> Result<Vec<SensitivityRow>>
where
    F: FnMut(&[usize], u64) -> Result<f64>,
{
    if folds == 0 {
        return Err(Error::invalid("folds must be positive"));
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for (fi, &fraction) in fractions.iter().enumerate() {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let size = (fraction * n_items as f64).round() as usize;
        if size == 0 {
            return Err(Error::InsufficientData(format!("fraction {fraction} of {n_items} items is an empty subset")));
        }
        let mut fold_oa = Vec::with_capacity(folds);
        for fold in 0..folds {
            let fold_seed = seed ^ ((fi as u64) << 32 | fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut idx: Vec<usize> = (0..n_items).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed));
            idx.truncate(size);
            idx.sort_unstable();
            fold_oa.push(train_eval(&idx, fold_seed)?);
        }
        let mean = fold_oa.iter().sum::<f64>() / folds as f64;
        let std = if folds > 1 {
            (fold_oa.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (folds - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(SensitivityRow {
            fraction,
            subset_size: size,
            mean_oa: mean,
            std_oa: std,
            fold_oa,
        });
    }
    Ok(rows)
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut s = String::from("fraction,subset_size,mean_oa,std_oa\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.fraction, r.subset_size, r.mean_oa, r.std_oa));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub epoch: i32,
    pub report: MetricsReport,
    /// OA at the training epoch minus OA at this epoch.
    pub oa_drop: f64,
}

/// Evaluates one trained model at its training epoch and at every other
/// epoch without retraining. `evaluate(epoch)` maps that epoch's imagery and
/// scores it against that epoch's reference.
pub fn temporal_transfer<F>(train_epoch: i32, epochs: &[i32], mut evaluate: F) -> Result<Vec<TransferRow>>
where
    F: FnMut(i32) -> Result<MetricsReport>,
{
    let base = evaluate(train_epoch)?;
    let base_oa = base.overall.value;
    let mut rows = vec![TransferRow {
        epoch: train_epoch,
        report: base,
        oa_drop: 0.0,
    }];
    for &epoch in epochs.iter().filter(|e| **e != train_epoch) {
        let report = evaluate(epoch)?;
        rows.push(TransferRow {
            epoch,
            oa_drop: base_oa - report.overall.value,
            report,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::summary_metrics;
    use crate::eval::confusion_matrix;
    use rand::Rng;

    // Two overlapping 1-D Gaussian classes scored by a nearest-class-mean rule.
    fn toy() -> (Vec<(f64, u8)>, Vec<(f64, u8)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = |n: usize| -> Vec<(f64, u8)> {
            (0..n)
                .map(|i| {
                    let c = (i % 2) as u8;
                    let x: f64 = rng.random::<f64>() * 2.0 - 1.0 + rng.random::<f64>() * 2.0 - 1.0;
                    (x + if c == 1 { 1.2 } else { 0.0 }, c)
                })
                .collect()
        };
        (draw(60), draw(400))
    }

    fn nearest_mean_oa(train: &[(f64, u8)], subset: &[usize], valid: &[(f64, u8)]) -> f64 {
        let mut sum = [0.0; 2];
        let mut n = [0.0; 2];
        for &i in subset {
            let (x, c) = train[i];
            sum[c as usize] += x;
            n[c as usize] += 1.0;
        }
        if n[0] == 0.0 || n[1] == 0.0 {
            return 0.5;
        }
        let (m0, m1) = (sum[0] / n[0], sum[1] / n[1]);
        let ok = valid
            .iter()
            .filter(|(x, c)| (((x - m1).abs() < (x - m0).abs()) as u8) == *c)
            .count();
        ok as f64 / valid.len() as f64
    }

    #[test]
    fn full_fraction_single_fold_is_baseline() {
        let (train, valid) = toy();
        let all: Vec<usize> = (0..train.len()).collect();
        let baseline = nearest_mean_oa(&train, &all, &valid);
        let rows = sample_size_sensitivity(train.len(), &[1.0], 1, 3, |s, _| Ok(nearest_mean_oa(&train, s, &valid))).unwrap();
        assert_eq!(rows[0].mean_oa, baseline);
        assert_eq!(rows[0].std_oa, 0.0);
    }

    #[test]
    fn accuracy_shrinks_with_training_size() {
        let (train, valid) = toy();
        let rows = sample_size_sensitivity(train.len(), &DEFAULT_FRACTIONS, DEFAULT_FOLDS, 11, |s, _| {
            Ok(nearest_mean_oa(&train, s, &valid))
        })
        .unwrap();
        for r in &rows {
            assert!(r.std_oa >= 0.0 && (0.0..=1.0).contains(&r.mean_oa));
        }
        for w in rows.windows(2) {
            assert!(w[1].mean_oa <= w[0].mean_oa + w[1].std_oa, "{:?}", sensitivity_csv(&rows));
        }
    }

    #[test]
    fn deterministic_and_rejects_empty_subset() {
        let f = |s: &[usize], seed: u64| Ok(s.iter().sum::<usize>() as f64 + (seed % 7) as f64);
        let a = sample_size_sensitivity(50, &[0.3], 4, 9, f).unwrap();
        let b = sample_size_sensitivity(50, &[0.3], 4, 9, f).unwrap();
        assert_eq!(a, b);
        assert!(sample_size_sensitivity(3, &[0.1], 2, 0, f).is_err());
    }

    #[test]
    fn transfer_drops_relative_to_training_epoch() {
        let reference = vec![Some(0u8), Some(1), Some(1), Some(0)];
        let rows = temporal_transfer(2014, &[2014, 2000, 1990], |epoch| {
            let mut pred = reference.clone();
            if epoch == 1990 {
                pred[0] = Some(1);
            }
            let cm = confusion_matrix(&pred, &reference, &["a", "b"])?;
            summary_metrics(&cm)
        })
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].oa_drop, 0.0);
        assert_eq!(rows[1].oa_drop, 0.0);
        assert!((rows[2].oa_drop - 0.25).abs() < 1e-12);
    }
}
