//! Training and validation patch construction.
//!
//! Sites are thinned to a minimum spacing, the dominant class is capped
//! relative to the runner-up, and patches are cut on a regular grid with a
//! loss mask marking the retained sites.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labeler::{DensityLabelGrid, Dimension};
use crate::raster::{read_raster, write_raster, MultiBandRaster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleSite {
    pub row: usize,
    pub col: usize,
    pub label: u8,
    pub epoch: i32,
}

/// Every labeled cell of `labels`, row-major, optionally restricted by `region`.
pub fn sites_from_labels(labels: &DensityLabelGrid, region: Option<&[bool]>) -> Vec<SampleSite> {
    labels
        .labels
        .iter()
        .enumerate()
        .filter(|(i, _)| region.is_none_or(|m| m[*i]))
        .filter_map(|(i, l)| {
            l.map(|label| SampleSite {
                row: i / labels.width,
                col: i % labels.width,
                label,
                epoch: labels.epoch,
            })
        })
        .collect()
}

/// Greedy thinning in seeded random order: a site is kept iff its center is at
/// least `min_distance` meters from every site kept before it.
pub fn thin_by_distance(sites: &[SampleSite], min_distance: f64, cell_size: f64, seed: u64) -> Vec<SampleSite> {
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let min_sq = min_distance * min_distance;
    let reach = (min_distance / cell_size).ceil().max(1.0) as i64;
    // Buckets of `reach` cells; a conflicting site is always in a neighbouring bucket.
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept = Vec::new();
    for i in order {
        let s = &sites[i];
        let key = (s.row as i64 / reach, s.col as i64 / reach);
        let conflict = (-1..=1).any(|dr| {
            (-1..=1).any(|dc| {
                buckets.get(&(key.0 + dr, key.1 + dc)).is_some_and(|members| {
                    members.iter().any(|&j| {
                        let o = &sites[j];
                        let dy = (s.row as f64 - o.row as f64) * cell_size;
                        let dx = (s.col as f64 - o.col as f64) * cell_size;
                        dx * dx + dy * dy < min_sq
                    })
                })
            })
        });
        if !conflict {
            buckets.entry(key).or_default().push(i);
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| sites[i]).collect()
}

/// Downsamples the most frequent class to at most `cap_ratio` times the second
/// most frequent. Other classes and the relative order of sites are untouched.
pub fn balance_classes(sites: &[SampleSite], cap_ratio: f64, seed: u64) -> Result<Vec<SampleSite>> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for s in sites {
        *counts.entry(s.label).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "class balancing needs at least 2 classes, found {}",
            counts.len()
        )));
    }
    let mut ranked: Vec<(u8, usize)> = counts.into_iter().collect();
    // Highest count first; ties go to the lower class code.
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let (dominant, dominant_count) = ranked[0];
    let cap = (cap_ratio * ranked[1].1 as f64).floor() as usize;
    if dominant_count <= cap {
        return Ok(sites.to_vec());
    }
    let mut members: Vec<usize> = sites
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == dominant)
        .map(|(i, _)| i)
        .collect();
    members.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = vec![true; sites.len()];
    for &i in &members[cap..] {
        keep[i] = false;
    }
    Ok(sites.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| *s).collect())
}

/// One training patch. `input` is band-sequential `bands x size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub input: Vec<f64>,
    /// Class codes; only meaningful where `loss_mask` is true.
    pub labels: Vec<u8>,
    pub loss_mask: Vec<bool>,
}

impl Patch {
    pub fn labeled_cells(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }

    pub fn built_cells(&self) -> usize {
        self.labels.iter().zip(&self.loss_mask).filter(|(l, m)| **m && **l != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub patch_size: usize,
    pub step: usize,
    pub bands: usize,
    pub dimension: Dimension,
    pub epoch: i32,
    pub patches: Vec<Patch>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.dimension.n_classes()
    }

    pub fn subset(&self, indices: &[usize]) -> PatchDataset {
        PatchDataset {
            patches: indices.iter().map(|&i| self.patches[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> PatchDataset {
        PatchDataset {
            patch_size: self.patch_size,
            step: self.step,
            bands: self.bands,
            dimension: self.dimension,
            epoch: self.epoch,
            patches: Vec::new(),
        }
    }

    /// Per-class count of masked cells.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for p in &self.patches {
            for (l, m) in p.labels.iter().zip(&p.loss_mask) {
                if *m {
                    counts[*l as usize] += 1;
                }
            }
        }
        counts
    }

    /// Writes `dataset.txt`, `manifest.csv` and three DMR1 files per patch.
    pub fn write(&self, dir: impl AsRef<Path>, template: &MultiBandRaster) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let info = format!(
            "patch_size={}\nstep={}\nbands={}\ndimension={}\nepoch={}\n",
            self.patch_size, self.step, self.bands, self.dimension, self.epoch
        );
        fs::write(dir.join("dataset.txt"), info).map_err(|e| Error::io(dir.join("dataset.txt"), e))?;
        let mut manifest = String::from("index,origin_row,origin_col,epoch,labeled,built\n");
        let cs = template.cell_size();
        let (ox, oy) = template.origin();
        for (i, p) in self.patches.iter().enumerate() {
            let origin = (ox + p.origin.1 as f64 * cs, oy - p.origin.0 as f64 * cs);
            let geom = |names: Vec<String>, data: Vec<f64>| {
                MultiBandRaster::new(self.patch_size, self.patch_size, names, cs, origin, data)
            };
            let band_names = if template.bands() == self.bands {
                template.band_names().to_vec()
            } else {
                (0..self.bands).map(|b| format!("b{b}")).collect()
            };
            write_raster(&geom(band_names, p.input.clone())?, dir.join(format!("patch_{i:05}_input.dmr")))?;
            write_raster(
                &geom(vec!["label".into()], p.labels.iter().map(|&l| f64::from(l)).collect())?,
                dir.join(format!("patch_{i:05}_labels.dmr")),
            )?;
            write_raster(
                &geom(vec!["loss_mask".into()], p.loss_mask.iter().map(|&m| f64::from(u8::from(m))).collect())?,
                dir.join(format!("patch_{i:05}_mask.dmr")),
            )?;
            writeln!(
                manifest,
                "{i},{},{},{},{},{}",
                p.origin.0,
                p.origin.1,
                self.epoch,
                p.labeled_cells(),
                p.built_cells()
            )
            .unwrap();
        }
        fs::write(dir.join("manifest.csv"), manifest).map_err(|e| Error::io(dir.join("manifest.csv"), e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let info_path = dir.join("dataset.txt");
        let info = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let mut kv = HashMap::new();
        for line in info.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(0, format!("bad dataset.txt line {line:?}")))?;
            kv.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(0, format!("dataset.txt missing {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(0, format!("dataset.txt bad {k}")))
        };
        let patch_size = num("patch_size")?;
        let step = num("step")?;
        let bands = num("bands")?;
        let dimension = Dimension::parse(get("dimension")?)?;
        let epoch = get("epoch")?
            .parse()
            .map_err(|_| Error::format(0, "dataset.txt bad epoch"))?;

        let manifest_path = dir.join("manifest.csv");
        let mut reader =
            csv::Reader::from_path(&manifest_path).map_err(|e| Error::io(&manifest_path, std::io::Error::other(e)))?;
        let mut patches = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::format(line as u64, e.to_string()))?;
            let field = |i: usize| -> Result<usize> {
                record
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(line as u64, format!("manifest row {line} column {i} invalid")))
            };
            let index = field(0)?;
            let origin = (field(1)?, field(2)?);
            let input = read_raster(dir.join(format!("patch_{index:05}_input.dmr")))?;
            let labels = read_raster(dir.join(format!("patch_{index:05}_labels.dmr")))?;
            let mask = read_raster(dir.join(format!("patch_{index:05}_mask.dmr")))?;
            patches.push(Patch {
                origin,
                input: input.into_data(),
                labels: labels.band(0).iter().map(|&v| v as u8).collect(),
                loss_mask: mask.band(0).iter().map(|&v| v > 0.5).collect(),
            });
        }
        Ok(PatchDataset {
            patch_size,
            step,
            bands,
            dimension,
            epoch,
            patches,
        })
    }
}

/// Top-left corners of `size` windows at `step` along an axis of `extent` cells.
pub fn tile_origins(extent: usize, size: usize, step: usize) -> Vec<usize> {
    if size > extent || step == 0 {
        return Vec::new();
    }
    (0..=(extent - size) / step).map(|i| i * step).collect()
}

/// Cuts patches on the `step` grid. A patch is kept when it contains at least
/// one site and at least one of its sites is built (label code != 0).
pub fn extract_patches(
    composite: &MultiBandRaster,
    labels: &DensityLabelGrid,
    sites: &[SampleSite],
    patch_size: usize,
    step: usize,
) -> Result<PatchDataset> {
    if !labels.matches_raster(composite) {
        return Err(Error::Geometry("label grid and composite differ in geometry".into()));
    }
    if patch_size == 0 || patch_size > composite.width() || patch_size > composite.height() {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {}x{} raster",
            composite.height(),
            composite.width()
        )));
    }
    if step == 0 || step > patch_size {
        return Err(Error::invalid(format!("step must be in 1..={patch_size}, got {step}")));
    }
    let width = composite.width();
    let mut site_label: Vec<Option<u8>> = vec![None; composite.cells()];
    for s in sites {
        if s.row >= composite.height() || s.col >= width {
            return Err(Error::OutOfBounds(format!("site ({}, {}) outside raster", s.row, s.col)));
        }
        site_label[s.row * width + s.col] = Some(s.label);
    }
    let bands = composite.bands();
    let n = patch_size * patch_size;
    let mut patches = Vec::new();
    for r0 in tile_origins(composite.height(), patch_size, step) {
        for c0 in tile_origins(width, patch_size, step) {
            let mut input = vec![0.0; bands * n];
            let mut patch_labels = vec![0u8; n];
            let mut mask = vec![false; n];
            let mut nodata = vec![false; n];
            for b in 0..bands {
                let band = composite.band(b);
                for r in 0..patch_size {
                    for c in 0..patch_size {
                        let v = band[(r0 + r) * width + c0 + c];
                        if v.is_nan() {
                            nodata[r * patch_size + c] = true;
                        } else {
                            input[b * n + r * patch_size + c] = v;
                        }
                    }
                }
            }
            for r in 0..patch_size {
                for c in 0..patch_size {
                    let i = r * patch_size + c;
                    if let Some(l) = site_label[(r0 + r) * width + c0 + c] {
                        if !nodata[i] {
                            patch_labels[i] = l;
                            mask[i] = true;
                        }
                    }
                }
            }
            let patch = Patch {
                origin: (r0, c0),
                input,
                labels: patch_labels,
                loss_mask: mask,
            };
            if patch.labeled_cells() > 0 && patch.built_cells() > 0 {
                patches.push(patch);
            }
        }
    }
    Ok(PatchDataset {
        patch_size,
        step,
        bands,
        dimension: labels.dimension,
        epoch: labels.epoch,
        patches,
    })
}

fn block_hash(block: (usize, usize), seed: u64) -> f64 {
    // splitmix64 over the block coordinates
    let mut z = seed
        ^ (block.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (block.1 as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Spatial block split. Cells are grouped into `patch_size` blocks, each block
/// is assigned to validation with probability `validation_fraction` by a
/// seeded hash, and a patch follows the block of its center cell. Loss-mask
/// cells whose block belongs to the other side are cleared, so no labeled cell
/// supervises both sides.
pub fn split_train_validation(
    dataset: &PatchDataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<(PatchDataset, PatchDataset)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let size = dataset.patch_size;
    let is_validation = |row: usize, col: usize| block_hash((row / size, col / size), seed) < validation_fraction;
    let mut train = dataset.empty_like();
    let mut validation = dataset.empty_like();
    for p in &dataset.patches {
        let center = (p.origin.0 + size / 2, p.origin.1 + size / 2);
        let side = is_validation(center.0, center.1);
        let mut patch = p.clone();
        for r in 0..size {
            for c in 0..size {
                let i = r * size + c;
                if patch.loss_mask[i] && is_validation(p.origin.0 + r, p.origin.1 + c) != side {
                    patch.loss_mask[i] = false;
                }
            }
        }
        if side {
            validation.patches.push(patch);
        } else {
            train.patches.push(patch);
        }
    }
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InsufficientData(format!(
            "split of {} patches at fraction {validation_fraction} leaves {} train / {} validation",
            dataset.len(),
            train.len(),
            validation.len()
        )));
    }
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn site(row: usize, col: usize, label: u8) -> SampleSite {
        SampleSite { row, col, label, epoch: 2014 }
    }

    #[test]
    fn thinning_examples() {
        // 4 cells = 120 m
        let close = [site(0, 0, 0), site(0, 4, 1)];
        assert_eq!(thin_by_distance(&close, 150.0, 30.0, 1).len(), 1);
        let exact = [site(0, 0, 0), site(3, 4, 1)];
        assert_eq!(thin_by_distance(&exact, 150.0, 30.0, 1).len(), 2);
        assert_eq!(thin_by_distance(&[site(2, 2, 0)], 150.0, 30.0, 9).len(), 1);
        assert!(thin_by_distance(&[], 150.0, 30.0, 9).is_empty());
    }

    fn with_counts(counts: &[(u8, usize)]) -> Vec<SampleSite> {
        let mut v = Vec::new();
        for &(label, n) in counts {
            for i in 0..n {
                v.push(site(i, label as usize, label));
            }
        }
        v
    }

    fn count(sites: &[SampleSite], label: u8) -> usize {
        sites.iter().filter(|s| s.label == label).count()
    }

    #[test]
    fn balancing_examples() {
        let sites = with_counts(&[(0, 1000), (1, 100), (2, 50)]);
        let out = balance_classes(&sites, 5.0, 3).unwrap();
        assert_eq!(count(&out, 0), 500);
        assert_eq!(count(&out, 1), 100);
        assert_eq!(count(&out, 2), 50);
        assert_eq!(out, balance_classes(&sites, 5.0, 3).unwrap());

        let under = with_counts(&[(0, 400), (1, 100)]);
        assert_eq!(balance_classes(&under, 5.0, 3).unwrap(), under);
        assert!(balance_classes(&with_counts(&[(2, 10)]), 5.0, 3).is_err());
    }

    fn labels_grid(w: usize, h: usize, code: impl Fn(usize, usize) -> u8) -> (MultiBandRaster, DensityLabelGrid) {
        let comp = MultiBandRaster::filled(w, h, (0..6).map(|b| format!("b{b}")).collect(), 0.5);
        let labels = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| Some(code(r, c))).collect();
        let grid = DensityLabelGrid::new(Dimension::Horizontal, 2014, &comp, labels).unwrap();
        (comp, grid)
    }

    #[test]
    fn patch_grid_and_drop_rule() {
        assert_eq!(tile_origins(96, 48, 24), vec![0, 24, 48]);
        let (comp, grid) = labels_grid(96, 96, |r, c| if r < 24 && c < 24 { 2 } else { 0 });
        let all = sites_from_labels(&grid, None);
        let ds = extract_patches(&comp, &grid, &all, 48, 24).unwrap();
        // Only the origin-(0, 0) patch sees built labels.
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.patches[0].origin, (0, 0));
        assert!(ds.patches.iter().all(|p| p.built_cells() > 0));

        let (comp, grid) = labels_grid(96, 96, |_, _| 1);
        let ds = extract_patches(&comp, &grid, &sites_from_labels(&grid, None), 48, 24).unwrap();
        assert_eq!(ds.len(), 9);

        assert!(extract_patches(&comp, &grid, &[], 128, 24).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (comp, grid) = labels_grid(264, 264, |r, c| ((r / 7 + c / 5) % 4) as u8);
        let sites = thin_by_distance(&sites_from_labels(&grid, None), 150.0, 30.0, 5);
        let ds = extract_patches(&comp, &grid, &sites, 24, 24).unwrap();
        assert_eq!(ds.len(), 121);
        let (train, val) = split_train_validation(&ds, 0.1, 42).unwrap();
        assert_eq!(train.len() + val.len(), ds.len());
        assert!(val.len() >= 3 && val.len() <= 30, "validation size {}", val.len());
        let cells = |d: &PatchDataset| -> HashSet<(usize, usize)> {
            d.patches
                .iter()
                .flat_map(|p| {
                    (0..d.patch_size * d.patch_size)
                        .filter(|i| p.loss_mask[*i])
                        .map(move |i| (p.origin.0 + i / d.patch_size, p.origin.1 + i % d.patch_size))
                })
                .collect()
        };
        assert!(cells(&train).is_disjoint(&cells(&val)));
        let (train2, val2) = split_train_validation(&ds, 0.1, 42).unwrap();
        assert_eq!((train, val), (train2, val2));

        let two = ds.subset(&[0, 1]);
        assert!(split_train_validation(&two, 0.999, 42).is_err());
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let (comp, grid) = labels_grid(48, 48, |r, _| (r % 3) as u8);
        let ds = extract_patches(&comp, &grid, &sites_from_labels(&grid, None), 24, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path(), &comp).unwrap();
        assert_eq!(PatchDataset::read(dir.path()).unwrap(), ds);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.starts_with("index,origin_row,origin_col,epoch,labeled,built\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn thinned_sites_respect_spacing(seed in 0u64..500, n in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sites: Vec<SampleSite> = (0..n).map(|_| site(rng.random_range(0..60), rng.random_range(0..60), 0)).collect();
            let kept = thin_by_distance(&sites, 150.0, 30.0, seed);
            prop_assert!(!kept.is_empty());
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    let dy = (a.row as f64 - b.row as f64) * 30.0;
                    let dx = (a.col as f64 - b.col as f64) * 30.0;
                    prop_assert!((dx * dx + dy * dy).sqrt() >= 150.0);
                }
            }
            // Maximality: every dropped site conflicts with some kept site.
            for s in &sites {
                let near = kept.iter().any(|k| {
                    let dy = (s.row as f64 - k.row as f64) * 30.0;
                    let dx = (s.col as f64 - k.col as f64) * 30.0;
                    dx * dx + dy * dy < 150.0 * 150.0
                });
                prop_assert!(near || kept.contains(s));
            }
        }

        #[test]
        fn balancing_only_touches_dominant(counts in proptest::collection::vec(1usize..200, 2..5), seed in 0u64..100) {
            let spec: Vec<(u8, usize)> = counts.iter().enumerate().map(|(i, &n)| (i as u8, n)).collect();
            let sites = with_counts(&spec);
            let out = balance_classes(&sites, 5.0, seed).unwrap();
            let mut sorted = counts.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            let dominant = spec.iter().filter(|(_, n)| *n == sorted[0]).map(|(l, _)| *l).min().unwrap();
            for &(label, n) in &spec {
                let got = count(&out, label);
                prop_assert!(got <= n);
                if label != dominant {
                    prop_assert_eq!(got, n);
                } else {
                    prop_assert!(got <= 5 * sorted[1]);
                }
            }
        }
    }
}
