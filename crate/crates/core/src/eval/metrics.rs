use std::fmt::Write as _;

use crate::error::{Error, Result};

/// z-score of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Square count matrix; rows are map (predicted) classes, columns reference classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != classes.len() || counts.iter().any(|r| r.len() != classes.len()) {
            return Err(Error::invalid("confusion matrix must be square with one row per class"));
        }
        Ok(Self { classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("map\\reference");
        for c in &self.classes {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            s.push_str(name);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Counts `(prediction, reference)` pairs where both are labeled.
pub fn confusion_matrix(predictions: &[Option<u8>], references: &[Option<u8>], classes: &[&str]) -> Result<ConfusionMatrix> {
    if predictions.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    let mut any = false;
    for (p, r) in predictions.iter().zip(references) {
        if let (Some(p), Some(r)) = (p, r) {
            let (p, r) = (*p as usize, *r as usize);
            if p >= k || r >= k {
                return Err(Error::invalid(format!("label {} outside {k} classes", p.max(r))));
            }
            counts[p][r] += 1;
            any = true;
        }
    }
    if !any {
        return Err(Error::InsufficientData("predictions and references share no labeled cell".into()));
    }
    ConfusionMatrix::new(classes.iter().map(|s| s.to_string()).collect(), counts)
}

/// A rate with its Wald 95% half-width; `None` when the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub ci_half_width: f64,
    pub n: u64,
}

impl Rate {
    pub fn wald(successes: u64, n: u64) -> Option<Rate> {
        (n > 0).then(|| {
            let p = successes as f64 / n as f64;
            Rate {
                value: p,
                ci_half_width: Z95 * (p * (1.0 - p) / n as f64).sqrt(),
                n,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    /// User's accuracy: correct share of cells mapped as this class.
    pub users: Option<Rate>,
    /// Producer's accuracy: detected share of reference cells of this class.
    pub producers: Option<Rate>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall: Rate,
    pub kappa: f64,
    pub kappa_ci_half_width: f64,
    pub classes: Vec<ClassMetrics>,
    /// Unweighted mean of the defined per-class F1 scores.
    pub average_f1: f64,
    pub warnings: Vec<String>,
}

pub(crate) fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

pub fn summary_metrics(matrix: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::InsufficientData("confusion matrix is empty".into()));
    }
    let n = total as f64;
    let overall = Rate::wald(matrix.trace(), total).expect("total > 0");
    let chance: f64 = (0..matrix.n_classes())
        .map(|c| matrix.row_total(c) as f64 * matrix.col_total(c) as f64)
        .sum::<f64>()
        / (n * n);
    let (kappa, kappa_ci) = if chance < 1.0 {
        let k = (overall.value - chance) / (1.0 - chance);
        let se = (overall.value * (1.0 - overall.value) / (n * (1.0 - chance).powi(2))).sqrt();
        (k, Z95 * se)
    } else {
        // A single class in both map and reference: agreement is total.
        (1.0, 0.0)
    };
    let mut warnings = Vec::new();
    let mut classes = Vec::with_capacity(matrix.n_classes());
    for (c, name) in matrix.classes.iter().enumerate() {
        let diag = matrix.counts[c][c];
        let users = Rate::wald(diag, matrix.row_total(c));
        let producers = Rate::wald(diag, matrix.col_total(c));
        let f1 = match (users, producers) {
            (Some(u), Some(p)) => Some(harmonic(u.value, p.value)),
            _ => {
                let msg = format!(
                    "class {name}: {} undefined, excluded from average F1",
                    if users.is_none() { "user's accuracy" } else { "producer's accuracy" }
                );
                log::warn!("{msg}");
                warnings.push(msg);
                None
            }
        };
        classes.push(ClassMetrics {
            name: name.clone(),
            users,
            producers,
            f1,
        });
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.f1).collect();
    let average_f1 = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(MetricsReport {
        overall,
        kappa,
        kappa_ci_half_width: kappa_ci,
        classes,
        average_f1,
        warnings,
    })
}

impl MetricsReport {
    /// One row per metric: `metric,class,value,ci_half_width,n`. Undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value,ci_half_width,n\n");
        writeln!(s, "overall_accuracy,all,{},{},{}", self.overall.value, self.overall.ci_half_width, self.overall.n).unwrap();
        writeln!(s, "kappa,all,{},{},{}", self.kappa, self.kappa_ci_half_width, self.overall.n).unwrap();
        writeln!(s, "average_f1,all,{},,", self.average_f1).unwrap();
        let rate = |r: &Option<Rate>| match r {
            Some(r) => format!("{},{},{}", r.value, r.ci_half_width, r.n),
            None => ",,0".to_string(),
        };
        for c in &self.classes {
            writeln!(s, "users_accuracy,{},{}", c.name, rate(&c.users)).unwrap();
            writeln!(s, "producers_accuracy,{},{}", c.name, rate(&c.producers)).unwrap();
            writeln!(s, "f1,{},{},,", c.name, c.f1.map(|v| v.to_string()).unwrap_or_default()).unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut s = String::new();
        writeln!(
            s,
            "overall accuracy {}% (+/- {}), kappa {:.3} (+/- {:.3}), average F1 {:.3}, n = {}",
            pct(self.overall.value),
            pct(self.overall.ci_half_width),
            self.kappa,
            self.kappa_ci_half_width,
            self.average_f1,
            self.overall.n
        )
        .unwrap();
        writeln!(s, "{:<12} {:>14} {:>14} {:>7}", "class", "user's %", "producer's %", "F1").unwrap();
        for c in &self.classes {
            let r = |r: &Option<Rate>| {
                r.map(|r| format!("{} +/- {}", pct(r.value), pct(r.ci_half_width)))
                    .unwrap_or_else(|| "undefined".into())
            };
            writeln!(
                s,
                "{:<12} {:>14} {:>14} {:>7}",
                c.name,
                r(&c.users),
                r(&c.producers),
                c.f1.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
            )
            .unwrap();
        }
        for w in &self.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
        s
    }
}

/// Accuracy of the growth class in a binary growth map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthAccuracy {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    /// `None` when nothing was mapped as growth.
    pub users: Option<f64>,
    pub producers: f64,
    pub f1: Option<f64>,
}

pub fn evaluate_growth(predicted: &[Option<bool>], reference: &[Option<bool>]) -> Result<GrowthAccuracy> {
    if predicted.len() != reference.len() {
        return Err(Error::invalid("growth maps differ in length"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, r) in predicted.iter().zip(reference) {
        match (p, r) {
            (Some(true), Some(true)) => tp += 1,
            (Some(true), Some(false)) => fp += 1,
            (Some(false), Some(true)) => fn_ += 1,
            _ => {}
        }
    }
    growth_from_counts(tp, fp, fn_)
}

pub fn growth_from_counts(tp: u64, fp: u64, fn_: u64) -> Result<GrowthAccuracy> {
    if tp + fn_ == 0 {
        return Err(Error::InsufficientData("reference contains no growth cells".into()));
    }
    let producers = tp as f64 / (tp + fn_) as f64;
    let users = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    Ok(GrowthAccuracy {
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        users,
        producers,
        f1: users.map(|u| harmonic(u, producers)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_counted_matrix() {
        let p = [Some(0), Some(0), Some(1), Some(1), None];
        let r = [Some(0), Some(1), Some(1), Some(1), Some(0)];
        let m = confusion_matrix(&p, &r, &["a", "b"]).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 2]]);
        assert!(confusion_matrix(&[Some(0), None], &[None, Some(1)], &["a", "b"]).is_err());
        assert!(confusion_matrix(&[Some(3)], &[Some(0)], &["a", "b"]).is_err());
    }

    #[test]
    fn perfect_and_textbook_matrices() {
        let diag = ConfusionMatrix::new(names(3), vec![vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 2]]).unwrap();
        let r = summary_metrics(&diag).unwrap();
        assert_eq!(r.overall.value, 1.0);
        assert_eq!(r.kappa, 1.0);
        assert!(r.classes.iter().all(|c| c.f1 == Some(1.0)));

        let m = ConfusionMatrix::new(names(2), vec![vec![40, 10], vec![10, 40]]).unwrap();
        let r = summary_metrics(&m).unwrap();
        assert_eq!(r.overall.value, 0.8);
        assert!((r.kappa - 0.6).abs() < 1e-15);
    }

    #[test]
    fn wald_interval_scale() {
        let r = Rate::wald(8682, 9900).unwrap();
        assert!((r.value - 0.877).abs() < 1e-3);
        assert!((r.ci_half_width - 0.0065).abs() < 1e-4, "{}", r.ci_half_width);
    }

    #[test]
    fn undefined_rates_are_excluded() {
        // Class 2 never mapped and never referenced.
        let m = ConfusionMatrix::new(names(3), vec![vec![3, 1, 0], vec![1, 3, 0], vec![0, 0, 0]]).unwrap();
        let r = summary_metrics(&m).unwrap();
        assert!(r.classes[2].f1.is_none());
        assert_eq!(r.warnings.len(), 1);
        assert!((r.average_f1 - 0.75).abs() < 1e-12);
        assert!(r.to_csv().contains("users_accuracy,c2,,,0"));
    }

    #[test]
    fn growth_examples() {
        let g = growth_from_counts(60, 40, 25).unwrap();
        assert_eq!(g.users, Some(0.6));
        assert!((g.producers - 60.0 / 85.0).abs() < 1e-12);
        assert!((g.f1.unwrap() - 0.6486).abs() < 1e-4);

        let perfect = evaluate_growth(&[Some(true), Some(false)], &[Some(true), Some(false)]).unwrap();
        assert_eq!(perfect.f1, Some(1.0));

        let none = evaluate_growth(&[Some(false), Some(false)], &[Some(true), Some(false)]).unwrap();
        assert_eq!(none.users, None);
        assert_eq!(none.producers, 0.0);
        assert!(evaluate_growth(&[Some(true)], &[Some(false)]).is_err());
    }

    proptest! {
        #[test]
        fn metric_ranges_and_kappa_bounds(counts in proptest::collection::vec(0u64..50, 9)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let m = ConfusionMatrix::new(names(3), counts.chunks(3).map(|c| c.to_vec()).collect()).unwrap();
            let r = summary_metrics(&m).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.overall.value));
            prop_assert!((-1.0..=1.0).contains(&r.kappa));
            let chance: f64 = (0..3).map(|c| (m.row_total(c) * m.col_total(c)) as f64).sum::<f64>() / (m.total() as f64).powi(2);
            if chance > 0.0 {
                prop_assert!(r.kappa <= r.overall.value + 1e-12);
            }
            let diagonal = (0..3).all(|i| (0..3).all(|j| i == j || m.counts[i][j] == 0));
            prop_assert_eq!(diagonal, (r.kappa - 1.0).abs() < 1e-12);
            for c in &r.classes {
                for rate in [c.users, c.producers].iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&rate.value));
                }
            }
            let defined: Vec<f64> = r.classes.iter().filter_map(|c| c.f1).collect();
            if !defined.is_empty() {
                prop_assert!((r.average_f1 - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-12);
            }
        }
    }
}
