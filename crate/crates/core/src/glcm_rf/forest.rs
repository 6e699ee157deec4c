//! Random forest of Gini-split classification trees.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        histogram: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

fn argmax_lowest(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl DecisionTree {
    pub fn leaf_for(&self, x: &[f64]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { histogram } => return histogram,
            }
        }
    }

    /// Majority class of the leaf reached by `x`.
    pub fn predict(&self, x: &[f64]) -> u8 {
        argmax_lowest(self.leaf_for(x)) as u8
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; `None` uses `floor(sqrt(n_features))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            features_per_split: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub n_features: usize,
    pub features_per_split: usize,
    pub seed: u64,
    /// Out-of-bag accuracy measured during training, if any sample was out of bag.
    pub oob_accuracy: Option<f64>,
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a, X: AsRef<[f64]>> {
    features: &'a [X],
    labels: &'a [u8],
    n_classes: usize,
    mtry: usize,
}

impl<X: AsRef<[f64]>> Builder<'_, X> {
    fn histogram(&self, idx: &[usize]) -> Vec<u32> {
        let mut h = vec![0u32; self.n_classes];
        for &i in idx {
            h[self.labels[i] as usize] += 1;
        }
        h
    }

    /// Lowest weighted Gini split on one feature: `(impurity, threshold)`.
    fn best_on_feature(&self, idx: &[usize], feature: usize, pairs: &mut Vec<(f64, u8)>) -> Option<(f64, f64)> {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (self.features[i].as_ref()[feature], self.labels[i])));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if pairs[0].0 == pairs[pairs.len() - 1].0 {
            return None;
        }
        let n = pairs.len() as u32;
        let mut right = vec![0u32; self.n_classes];
        for p in pairs.iter() {
            right[p.1 as usize] += 1;
        }
        let mut left = vec![0u32; self.n_classes];
        let mut best: Option<(f64, f64)> = None;
        for k in 0..pairs.len() - 1 {
            let c = pairs[k].1 as usize;
            left[c] += 1;
            right[c] -= 1;
            let (a, b) = (pairs[k].0, pairs[k + 1].0);
            if a == b {
                continue;
            }
            let nl = k as u32 + 1;
            let nr = n - nl;
            let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            if best.is_none_or(|(bi, _)| impurity < bi) {
                let mid = a + (b - a) / 2.0;
                let threshold = if mid < b { mid } else { a };
                best = Some((impurity, threshold));
            }
        }
        best
    }

    fn grow(&self, sample: Vec<usize>, rng: &mut ChaCha8Rng) -> DecisionTree {
        let n_features = self.features[0].as_ref().len();
        let mut nodes = vec![Node::Leaf { histogram: Vec::new() }];
        let mut stack = vec![(0usize, sample)];
        let mut order: Vec<usize> = (0..n_features).collect();
        let mut pairs = Vec::new();
        while let Some((slot, idx)) = stack.pop() {
            let histogram = self.histogram(&idx);
            let pure = histogram.iter().filter(|&&c| c > 0).count() <= 1;
            let mut chosen: Option<(usize, f64, f64)> = None;
            if !pure {
                order.shuffle(rng);
                for (tried, &f) in order.iter().enumerate() {
                    if tried >= self.mtry && chosen.is_some() {
                        break;
                    }
                    if let Some((imp, thr)) = self.best_on_feature(&idx, f, &mut pairs) {
                        if chosen.is_none_or(|(_, _, best)| imp < best) {
                            chosen = Some((f, thr, imp));
                        }
                    }
                }
            }
            match chosen {
                Some((feature, threshold, _)) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        idx.iter().partition(|&&i| self.features[i].as_ref()[feature] <= threshold);
                    let left = nodes.len();
                    nodes.push(Node::Leaf { histogram: Vec::new() });
                    let right = nodes.len();
                    nodes.push(Node::Leaf { histogram: Vec::new() });
                    nodes[slot] = Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    };
                    stack.push((right, r));
                    stack.push((left, l));
                }
                None => nodes[slot] = Node::Leaf { histogram },
            }
        }
        DecisionTree { nodes }
    }
}

/// Fits `n_trees` trees, each on a bootstrap sample of all rows, with per-tree
/// generators seeded by `seed + tree index`.
pub fn rf_train<X: AsRef<[f64]>>(features: &[X], labels: &[u8], params: &ForestParams) -> Result<ForestModel> {
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let n_features = features[0].as_ref().len();
    if n_features == 0 || features.iter().any(|f| f.as_ref().len() != n_features) {
        return Err(Error::invalid("feature rows must share a non-zero length"));
    }
    if features.iter().any(|f| f.as_ref().iter().any(|v| v.is_nan())) {
        return Err(Error::invalid("training features contain NaN"));
    }
    let n_classes = *labels.iter().max().expect("non-empty") as usize + 1;
    let distinct = {
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::InsufficientData("training set holds a single class".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("n_trees must be > 0"));
    }
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
        .clamp(1, n_features);
    let builder = Builder {
        features,
        labels,
        n_classes,
        mtry,
    };
    let n = features.len();
    let mut oob_votes = vec![vec![0u32; n_classes]; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(t as u64));
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut in_bag = vec![false; n];
        sample.iter().for_each(|&i| in_bag[i] = true);
        let tree = builder.grow(sample, &mut rng);
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_votes[i][tree.predict(features[i].as_ref()) as usize] += 1;
        }
        trees.push(tree);
    }
    let (mut correct, mut counted) = (0usize, 0usize);
    for (votes, &label) in oob_votes.iter().zip(labels) {
        if votes.iter().any(|&v| v > 0) {
            counted += 1;
            correct += usize::from(argmax_lowest(votes) == label as usize);
        }
    }
    Ok(ForestModel {
        trees,
        n_classes,
        n_features,
        features_per_split: mtry,
        seed: params.seed,
        oob_accuracy: (counted > 0).then(|| correct as f64 / counted as f64),
    })
}

/// Majority vote across trees (ties to the lower class code) with per-class vote fractions.
pub fn rf_predict(model: &ForestModel, features: &[f64]) -> Result<(u8, Vec<f64>)> {
    if features.len() != model.n_features {
        return Err(Error::invalid(format!(
            "expected {} features, got {}",
            model.n_features,
            features.len()
        )));
    }
    let mut votes = vec![0u32; model.n_classes];
    for tree in &model.trees {
        votes[tree.predict(features) as usize] += 1;
    }
    let total = model.trees.len() as f64;
    Ok((
        argmax_lowest(&votes) as u8,
        votes.iter().map(|&v| v as f64 / total).collect(),
    ))
}

impl ForestModel {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "forest n_trees={} n_classes={} n_features={} features_per_split={} seed={}\n",
            self.trees.len(),
            self.n_classes,
            self.n_features,
            self.features_per_split,
            self.seed
        );
        for (t, tree) in self.trees.iter().enumerate() {
            for (i, node) in tree.nodes.iter().enumerate() {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => writeln!(s, "{t} {i} split {feature} {threshold:?} {left} {right}").unwrap(),
                    Node::Leaf { histogram } => {
                        let h: Vec<String> = histogram.iter().map(u32::to_string).collect();
                        writeln!(s, "{t} {i} leaf {}", h.join(" ")).unwrap();
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::format(0, "empty forest file"))?;
        let mut fields = std::collections::HashMap::new();
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("forest") {
            return Err(Error::format(0, "forest file must start with 'forest'"));
        }
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::format(0, format!("bad header token {tok:?}")))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(0, format!("forest header missing {k}")))
        };
        let n_trees = num("n_trees")? as usize;
        let n_classes = num("n_classes")? as usize;
        let n_features = num("n_features")? as usize;
        let features_per_split = num("features_per_split")? as usize;
        let seed = num("seed")?;
        let mut trees: Vec<DecisionTree> = (0..n_trees).map(|_| DecisionTree { nodes: Vec::new() }).collect();
        let mut offset = header.len() as u64 + 1;
        for (_, line) in lines {
            let here = offset;
            offset += line.len() as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(here, format!("bad node line {line:?}"));
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 3 {
                return Err(bad());
            }
            let t: usize = parts[0].parse().map_err(|_| bad())?;
            let i: usize = parts[1].parse().map_err(|_| bad())?;
            let tree = trees.get_mut(t).ok_or_else(bad)?;
            if i != tree.nodes.len() {
                return Err(bad());
            }
            let node = match parts[2] {
                "split" if parts.len() == 7 => Node::Split {
                    feature: parts[3].parse().map_err(|_| bad())?,
                    threshold: parts[4].parse().map_err(|_| bad())?,
                    left: parts[5].parse().map_err(|_| bad())?,
                    right: parts[6].parse().map_err(|_| bad())?,
                },
                "leaf" => Node::Leaf {
                    histogram: parts[3..].iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?,
                },
                _ => return Err(bad()),
            };
            tree.nodes.push(node);
        }
        for (t, tree) in trees.iter().enumerate() {
            let n = tree.nodes.len();
            let ok = n > 0
                && tree.nodes.iter().all(|node| match node {
                    Node::Split { feature, left, right, .. } => *feature < n_features && *left < n && *right < n,
                    Node::Leaf { histogram } => histogram.len() == n_classes && histogram.iter().any(|&c| c > 0),
                });
            if !ok {
                return Err(Error::format(0, format!("tree {t} is malformed")));
            }
        }
        Ok(ForestModel {
            trees,
            n_classes,
            n_features,
            features_per_split,
            seed,
            oob_accuracy: None,
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

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        while x.len() < n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let margin = a + 0.5 * b;
            if margin.abs() < 0.05 {
                continue;
            }
            x.push(vec![a, b, rng.random_range(-1.0..1.0)]);
            y.push(u8::from(margin > 0.0));
        }
        (x, y)
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(rf_train(&x, &[1, 1], &ForestParams::default()).is_err());
    }

    #[test]
    fn separable_toy_has_high_oob_accuracy() {
        let (x, y) = separable(200, 3);
        let model = rf_train(&x, &y, &ForestParams { n_trees: 100, features_per_split: None, seed: 9 }).unwrap();
        // Exhaustive single-split oracle: the best axis-aligned stump on this data.
        let mut best_stump = 0.0f64;
        for f in 0..3 {
            for t in x.iter().map(|r| r[f]) {
                let acc = x.iter().zip(&y).filter(|(r, &l)| u8::from(r[f] > t) == l).count() as f64 / 200.0;
                best_stump = best_stump.max(acc).max(1.0 - acc);
            }
        }
        let oob = model.oob_accuracy.unwrap();
        assert!(oob >= 0.95, "oob {oob}");
        assert!(oob >= best_stump - 0.02, "oob {oob} vs stump {best_stump}");
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = separable(120, 4);
        let p = ForestParams { n_trees: 20, features_per_split: Some(2), seed: 77 };
        assert_eq!(rf_train(&x, &y, &p).unwrap(), rf_train(&x, &y, &p).unwrap());
    }

    #[test]
    fn memorizes_dominant_pattern() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let y: Vec<u8> = (0..40).map(|i| u8::from(i >= 38)).collect();
        let m = rf_train(&x, &y, &ForestParams { n_trees: 25, ..Default::default() }).unwrap();
        let (class, frac) = rf_predict(&m, &x[5]).unwrap();
        assert_eq!(class, 0);
        assert_eq!(frac[0], 1.0);
        assert!(rf_predict(&m, &[1.0]).is_err());
    }

    #[test]
    fn vote_tie_goes_to_lower_code() {
        let leaf = |h: Vec<u32>| DecisionTree { nodes: vec![Node::Leaf { histogram: h }] };
        let mut trees = vec![leaf(vec![0, 3]); 100];
        trees.extend(vec![leaf(vec![3, 0]); 100]);
        let m = ForestModel { trees, n_classes: 2, n_features: 1, features_per_split: 1, seed: 0, oob_accuracy: None };
        let (class, frac) = rf_predict(&m, &[0.0]).unwrap();
        assert_eq!(class, 0);
        assert_eq!(frac, vec![0.5, 0.5]);
    }

    #[test]
    fn fractions_sum_to_one_and_text_roundtrip() {
        let (x, y) = separable(150, 5);
        let y: Vec<u8> = y.iter().zip(&x).map(|(&l, r)| if r[2] > 0.6 { 2 } else { l }).collect();
        let m = rf_train(&x, &y, &ForestParams { n_trees: 30, features_per_split: None, seed: 1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, frac) = rf_predict(&m, &q).unwrap();
            assert!((frac.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for tree in &m.trees {
            for node in &tree.nodes {
                if let Node::Leaf { histogram } = node {
                    assert!(histogram.iter().any(|&c| c > 0));
                }
            }
        }
        let back = ForestModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back.trees, m.trees);
        for r in &x {
            assert_eq!(rf_predict(&back, r).unwrap(), rf_predict(&m, r).unwrap());
        }
    }

    #[test]
    fn forest_beats_single_trees_on_training_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y: Vec<u8> = x
            .iter()
            .map(|r| {
                let noisy = r[0] + r[1] * r[2] + rng.random_range(-0.15..0.15);
                if noisy > 1.0 { 2 } else if noisy > 0.5 { 1 } else { 0 }
            })
            .collect();
        let m = rf_train(&x, &y, &ForestParams { n_trees: 25, features_per_split: Some(2), seed: 3 }).unwrap();
        let acc = |f: &dyn Fn(&[f64]) -> u8| x.iter().zip(&y).filter(|(r, &l)| f(r) == l).count() as f64 / x.len() as f64;
        let forest_acc = acc(&|r| rf_predict(&m, r).unwrap().0);
        for tree in &m.trees {
            assert!(forest_acc >= acc(&|r| tree.predict(r)));
        }
    }
}
