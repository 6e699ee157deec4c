//! Horizontal and vertical density labels from building-area-ratio and height grids.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, EdgePolicy, MultiBandRaster, RasterWindow};

/// Class boundaries. Lower bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityScheme {
    pub compact_min: f64,
    pub open_min: f64,
    pub sparse_min: f64,
    /// Block ratio at which a block counts as built for the vertical axis.
    pub built_min: f64,
    /// Mean building height (m) at which a built block is high rise.
    pub high_rise_min: f64,
    /// Block half extent in cells; 2 gives the 5x5 block.
    pub half_extent: usize,
}

impl Default for DensityScheme {
    fn default() -> Self {
        Self {
            compact_min: 0.30,
            open_min: 0.15,
            sparse_min: 0.02,
            built_min: 0.02,
            high_rise_min: 10.0,
            half_extent: 2,
        }
    }
}

impl DensityScheme {
    pub fn validate(&self) -> Result<()> {
        if !(self.compact_min > self.open_min && self.open_min > self.sparse_min && self.sparse_min > 0.0) {
            return Err(Error::invalid(format!(
                "horizontal thresholds must strictly decrease to > 0: {} > {} > {}",
                self.compact_min, self.open_min, self.sparse_min
            )));
        }
        if !(self.built_min > 0.0 && self.high_rise_min > 0.0) {
            return Err(Error::invalid("vertical thresholds must be positive"));
        }
        Ok(())
    }

    /// Block area in hectares for the given cell size in meters.
    pub fn block_hectares(&self, cell_size: f64) -> f64 {
        let side = (2 * self.half_extent + 1) as f64 * cell_size;
        side * side / 10_000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Horizontal,
    Vertical,
}

impl Dimension {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Dimension::Horizontal => &["not_built", "sparse", "open", "compact"],
            Dimension::Vertical => &["not_built", "low", "high"],
        }
    }

    pub fn n_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Horizontal => "horizontal",
            Dimension::Vertical => "vertical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "horizontal" | "h" => Ok(Dimension::Horizontal),
            "vertical" | "v" => Ok(Dimension::Vertical),
            other => Err(Error::invalid(format!("unknown dimension {other:?}"))),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Horizontal classes; the discriminant is the on-disk code and density rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum HorizontalClass {
    NotBuilt = 0,
    Sparse = 1,
    Open = 2,
    Compact = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum VerticalClass {
    NotBuilt = 0,
    Low = 1,
    High = 2,
}

impl HorizontalClass {
    pub fn from_code(code: u8) -> Option<Self> {
        [Self::NotBuilt, Self::Sparse, Self::Open, Self::Compact].get(code as usize).copied()
    }
}

impl VerticalClass {
    pub fn from_code(code: u8) -> Option<Self> {
        [Self::NotBuilt, Self::Low, Self::High].get(code as usize).copied()
    }
}

pub fn classify_horizontal(block_bar: f64, scheme: &DensityScheme) -> HorizontalClass {
    if block_bar >= scheme.compact_min {
        HorizontalClass::Compact
    } else if block_bar >= scheme.open_min {
        HorizontalClass::Open
    } else if block_bar >= scheme.sparse_min {
        HorizontalClass::Sparse
    } else {
        HorizontalClass::NotBuilt
    }
}

pub fn classify_vertical(block_bar: f64, block_mean_height: f64, scheme: &DensityScheme) -> VerticalClass {
    if block_bar < scheme.built_min {
        VerticalClass::NotBuilt
    } else if block_mean_height >= scheme.high_rise_min {
        VerticalClass::High
    } else {
        VerticalClass::Low
    }
}

/// Block statistics around one cell: mean building-area ratio over the
/// edge-truncated block, and footprint-weighted mean height over built cells
/// (0 when the block has no buildings). NaN cells are skipped.
pub fn block_aggregate(
    bar_grid: &MultiBandRaster,
    height_grid: &MultiBandRaster,
    row: usize,
    col: usize,
    scheme: &DensityScheme,
) -> Result<(f64, f64)> {
    bar_grid.check_geometry(height_grid, "building-area ratio vs height grid")?;
    let (rows, cols) = RasterWindow::new(row, col, scheme.half_extent, EdgePolicy::Truncate)
        .bounds(bar_grid.height(), bar_grid.width())?;
    let width = bar_grid.width();
    let bars = bar_grid.band(0);
    let heights = height_grid.band(0);
    let (mut bar_sum, mut n) = (0.0, 0usize);
    let (mut weighted_height, mut weight) = (0.0, 0.0);
    for r in rows {
        for c in cols.clone() {
            let i = r * width + c;
            let ratio = bars[i];
            if ratio.is_nan() {
                continue;
            }
            bar_sum += ratio;
            n += 1;
            let h = heights[i];
            if ratio > 0.0 && !h.is_nan() {
                weighted_height += ratio * h;
                weight += ratio;
            }
        }
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let mean_height = if weight > 0.0 { weighted_height / weight } else { 0.0 };
    Ok((bar_sum / n as f64, mean_height))
}

/// Per-cell class codes for one dimension and epoch. `None` marks unlabeled cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityLabelGrid {
    pub dimension: Dimension,
    pub epoch: i32,
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin: (f64, f64),
    pub labels: Vec<Option<u8>>,
}

impl DensityLabelGrid {
    pub fn new(dimension: Dimension, epoch: i32, template: &MultiBandRaster, labels: Vec<Option<u8>>) -> Result<Self> {
        if labels.len() != template.cells() {
            return Err(Error::Geometry(format!(
                "{} labels for {} cells",
                labels.len(),
                template.cells()
            )));
        }
        let n = dimension.n_classes() as u8;
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= n) {
            return Err(Error::invalid(format!("class code {bad} out of range for {dimension}")));
        }
        Ok(Self {
            dimension,
            epoch,
            width: template.width(),
            height: template.height(),
            cell_size: template.cell_size(),
            origin: template.origin(),
            labels,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<u8> {
        self.labels[row * self.width + col]
    }

    pub fn same_geometry(&self, other: &DensityLabelGrid) -> bool {
        self.width == other.width && self.height == other.height && self.cell_size == other.cell_size && self.origin == other.origin
    }

    pub fn matches_raster(&self, raster: &MultiBandRaster) -> bool {
        self.width == raster.width()
            && self.height == raster.height()
            && self.cell_size == raster.cell_size()
            && self.origin == raster.origin()
    }

    /// Band name carrying dimension, epoch and the code table.
    pub fn band_name(&self) -> String {
        let table: Vec<String> = self
            .dimension
            .class_names()
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i}:{n}"))
            .collect();
        format!("{}@{}|{}", self.dimension, self.epoch, table.join("|"))
    }

    /// Single-band raster of class codes, NaN where unlabeled.
    pub fn to_raster(&self) -> MultiBandRaster {
        let data = self.labels.iter().map(|l| l.map_or(f64::NAN, f64::from)).collect();
        MultiBandRaster::new(self.width, self.height, vec![self.band_name()], self.cell_size, self.origin, data)
            .expect("label grid geometry is valid")
    }

    pub fn from_raster(raster: &MultiBandRaster) -> Result<Self> {
        if raster.bands() != 1 {
            return Err(Error::invalid(format!("label raster needs 1 band, has {}", raster.bands())));
        }
        let name = &raster.band_names()[0];
        let head = name.split('|').next().unwrap_or_default();
        let (dim, epoch) = head
            .split_once('@')
            .ok_or_else(|| Error::invalid(format!("band name {name:?} is not a label code table")))?;
        let dimension = Dimension::parse(dim)?;
        let epoch = epoch
            .parse()
            .map_err(|_| Error::invalid(format!("bad epoch in band name {name:?}")))?;
        let labels = raster
            .band(0)
            .iter()
            .map(|&v| {
                if v.is_nan() {
                    Ok(None)
                } else if v >= 0.0 && v.fract() == 0.0 && v < 256.0 {
                    Ok(Some(v as u8))
                } else {
                    Err(Error::invalid(format!("non-integer class code {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dimension, epoch, raster, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_raster(&self.to_raster(), path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raster(&read_raster(path)?)
    }

    /// Counts per class code over labeled cells.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.dimension.n_classes()];
        for c in self.labels.iter().flatten() {
            counts[*c as usize] += 1;
        }
        counts
    }
}

/// Labels every cell of both dimensions. Cells whose block has no finite ratio are unlabeled.
pub fn label_grids(
    bar_grid: &MultiBandRaster,
    height_grid: &MultiBandRaster,
    scheme: &DensityScheme,
    epoch: i32,
) -> Result<(DensityLabelGrid, DensityLabelGrid)> {
    scheme.validate()?;
    bar_grid.check_geometry(height_grid, "building-area ratio vs height grid")?;
    let mut horizontal = Vec::with_capacity(bar_grid.cells());
    let mut vertical = Vec::with_capacity(bar_grid.cells());
    for row in 0..bar_grid.height() {
        for col in 0..bar_grid.width() {
            let (bar, height) = block_aggregate(bar_grid, height_grid, row, col, scheme)?;
            if bar.is_nan() {
                horizontal.push(None);
                vertical.push(None);
            } else {
                horizontal.push(Some(classify_horizontal(bar, scheme) as u8));
                vertical.push(Some(classify_vertical(bar, height, scheme) as u8));
            }
        }
    }
    Ok((
        DensityLabelGrid::new(Dimension::Horizontal, epoch, bar_grid, horizontal)?,
        DensityLabelGrid::new(Dimension::Vertical, epoch, bar_grid, vertical)?,
    ))
}

/// `Some(true)` where the later label is strictly denser or higher, `None` where either is unlabeled.
pub fn derive_growth_labels(earlier: &DensityLabelGrid, later: &DensityLabelGrid) -> Result<Vec<Option<bool>>> {
    if earlier.dimension != later.dimension {
        return Err(Error::invalid(format!(
            "cannot compare {} with {} labels",
            earlier.dimension, later.dimension
        )));
    }
    if !earlier.same_geometry(later) {
        return Err(Error::Geometry("growth label grids differ in geometry".into()));
    }
    if earlier.epoch >= later.epoch {
        return Err(Error::invalid(format!(
            "earlier epoch {} must precede later epoch {}",
            earlier.epoch, later.epoch
        )));
    }
    Ok(earlier
        .labels
        .iter()
        .zip(&later.labels)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some(b > a),
            _ => None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize, values: Vec<f64>) -> MultiBandRaster {
        MultiBandRaster::new(w, h, vec!["v".into()], 30.0, (0.0, 0.0), values).unwrap()
    }

    #[test]
    fn scheme_defaults() {
        let s = DensityScheme::default();
        s.validate().unwrap();
        assert!((s.block_hectares(30.0) - 2.25).abs() < 1e-12);
        let bad = DensityScheme { open_min: 0.4, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn block_examples() {
        let s = DensityScheme::default();
        let bar = grid(5, 5, vec![0.4; 25]);
        let h = grid(5, 5, vec![3.0; 25]);
        let (b, _) = block_aggregate(&bar, &h, 2, 2, &s).unwrap();
        assert!((b - 0.4).abs() < 1e-15);

        let mut bars = vec![0.0; 25];
        let mut heights = vec![0.0; 25];
        bars[7] = 0.5;
        heights[7] = 20.0;
        let (b, mh) = block_aggregate(&grid(5, 5, bars), &grid(5, 5, heights), 2, 2, &s).unwrap();
        assert!((b - 0.02).abs() < 1e-15);
        assert_eq!(mh, 20.0);

        // Corner: only the 3x3 in-bounds cells count.
        let mut bars = vec![0.0; 25];
        for r in 0..3 {
            for c in 0..3 {
                bars[r * 5 + c] = 0.9;
            }
        }
        let (b, _) = block_aggregate(&grid(5, 5, bars), &grid(5, 5, vec![0.0; 25]), 0, 0, &s).unwrap();
        assert!((b - 0.9).abs() < 1e-15);

        let other = grid(4, 5, vec![0.0; 20]);
        assert!(matches!(block_aggregate(&bar, &other, 0, 0, &s), Err(Error::Geometry(_))));
    }

    #[test]
    fn thresholds() {
        let s = DensityScheme::default();
        assert_eq!(classify_horizontal(0.35, &s), HorizontalClass::Compact);
        assert_eq!(classify_horizontal(0.30, &s), HorizontalClass::Compact);
        assert_eq!(classify_horizontal(0.15, &s), HorizontalClass::Open);
        assert_eq!(classify_horizontal(0.02, &s), HorizontalClass::Sparse);
        assert_eq!(classify_horizontal(0.019, &s), HorizontalClass::NotBuilt);
        assert_eq!(classify_vertical(0.05, 12.0, &s), VerticalClass::High);
        assert_eq!(classify_vertical(0.05, 10.0, &s), VerticalClass::High);
        assert_eq!(classify_vertical(0.05, 9.9, &s), VerticalClass::Low);
        assert_eq!(classify_vertical(0.01, 50.0, &s), VerticalClass::NotBuilt);
    }

    fn one_cell(dim: Dimension, epoch: i32, code: u8) -> DensityLabelGrid {
        DensityLabelGrid::new(dim, epoch, &grid(1, 1, vec![0.0]), vec![Some(code)]).unwrap()
    }

    #[test]
    fn growth_examples() {
        let v = Dimension::Vertical;
        let h = Dimension::Horizontal;
        let g = |a: &DensityLabelGrid, b: &DensityLabelGrid| derive_growth_labels(a, b).unwrap()[0];
        assert_eq!(g(&one_cell(v, 2006, 0), &one_cell(v, 2014, 2)), Some(true));
        assert_eq!(g(&one_cell(v, 2006, 1), &one_cell(v, 2014, 2)), Some(true));
        assert_eq!(g(&one_cell(h, 2006, 3), &one_cell(h, 2014, 3)), Some(false));
        assert_eq!(g(&one_cell(h, 2006, 3), &one_cell(h, 2014, 2)), Some(false));
        assert!(derive_growth_labels(&one_cell(h, 2006, 0), &one_cell(v, 2014, 0)).is_err());
        assert!(derive_growth_labels(&one_cell(h, 2014, 0), &one_cell(h, 2006, 0)).is_err());
    }

    #[test]
    fn label_raster_roundtrip() {
        let g = DensityLabelGrid::new(
            Dimension::Horizontal,
            2014,
            &grid(3, 1, vec![0.0; 3]),
            vec![Some(3), None, Some(0)],
        )
        .unwrap();
        let back = DensityLabelGrid::from_raster(&g.to_raster()).unwrap();
        assert_eq!(back, g);
        assert!(DensityLabelGrid::new(Dimension::Vertical, 2014, &grid(1, 1, vec![0.0]), vec![Some(3)]).is_err());
    }

    /// Independent block scan with signed offsets.
    fn brute_labels(bar: &[f64], height: &[f64], w: usize, h: usize, s: &DensityScheme) -> (Vec<u8>, Vec<u8>) {
        let (mut hz, mut vt) = (Vec::new(), Vec::new());
        let k = s.half_extent as i64;
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let (mut sum, mut n, mut hw, mut wsum) = (0.0, 0.0, 0.0, 0.0);
                for dr in -k..=k {
                    for dc in -k..=k {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                            continue;
                        }
                        let i = (rr as usize) * w + cc as usize;
                        sum += bar[i];
                        n += 1.0;
                        if bar[i] > 0.0 {
                            hw += bar[i] * height[i];
                            wsum += bar[i];
                        }
                    }
                }
                let b = sum / n;
                let mh = if wsum > 0.0 { hw / wsum } else { 0.0 };
                hz.push(if b >= 0.3 { 3 } else if b >= 0.15 { 2 } else if b >= 0.02 { 1 } else { 0 });
                vt.push(if b < 0.02 { 0 } else if mh >= 10.0 { 2 } else { 1 });
            }
        }
        (hz, vt)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grid_labels_match_brute_force(seed in 0u64..1000, w in 1usize..65, h in 1usize..65) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bar: Vec<f64> = (0..w * h).map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..0.8) }).collect();
            let height: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..30.0)).collect();
            let s = DensityScheme::default();
            let (hz, vt) = label_grids(&grid(w, h, bar.clone()), &grid(w, h, height.clone()), &s, 2014).unwrap();
            let (bh, bv) = brute_labels(&bar, &height, w, h, &s);
            let hz: Vec<u8> = hz.labels.iter().map(|l| l.unwrap()).collect();
            let vt: Vec<u8> = vt.labels.iter().map(|l| l.unwrap()).collect();
            prop_assert_eq!(hz, bh);
            prop_assert_eq!(vt, bv);
        }

        #[test]
        fn horizontal_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = DensityScheme::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_horizontal(lo, &s) <= classify_horizontal(hi, &s));
        }

        #[test]
        fn growth_is_antisymmetric(codes in proptest::collection::vec((0u8..4, 0u8..4), 1..50)) {
            let t = grid(codes.len(), 1, vec![0.0; codes.len()]);
            let a = DensityLabelGrid::new(Dimension::Horizontal, 2006, &t, codes.iter().map(|c| Some(c.0)).collect()).unwrap();
            let b = DensityLabelGrid::new(Dimension::Horizontal, 2014, &t, codes.iter().map(|c| Some(c.1)).collect()).unwrap();
            let forward = derive_growth_labels(&a, &b).unwrap();
            let a_late = DensityLabelGrid { epoch: 2014, ..a.clone() };
            let b_early = DensityLabelGrid { epoch: 2006, ..b.clone() };
            let backward = derive_growth_labels(&b_early, &a_late).unwrap();
            for (f, r) in forward.iter().zip(&backward) {
                if *f == Some(true) {
                    prop_assert_eq!(*r, Some(false));
                }
            }
        }
    }
}
