use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labeler::{DensityLabelGrid, Dimension};

/// The seven combined urban-form classes, in output order.
pub const URBAN_FORMS: [&str; 7] = [
    "compact-high",
    "compact-low",
    "open-high",
    "open-low",
    "sparse-high",
    "sparse-low",
    "not-built",
];

/// Index into [`URBAN_FORMS`] for a (horizontal, vertical) code pair.
/// Either axis reporting not built gives `not-built`.
pub fn urban_form(horizontal: u8, vertical: u8) -> usize {
    match (horizontal, vertical) {
        (0, _) | (_, 0) => 6,
        (h, v) => {
            let density = (3 - h as usize).min(2);
            let height = if v == 2 { 0 } else { 1 };
            density * 2 + height
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub key: String,
    pub mask: Vec<bool>,
}

/// Population by `(region, year)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopulationTable(pub HashMap<(String, i32), f64>);

impl PopulationTable {
    /// Reads a `region,year,population` CSV with a header row.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut table = HashMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(i as u64, e.to_string()))?;
            let bad = || Error::format(i as u64, format!("bad population row {rec:?}"));
            let region = rec.get(0).ok_or_else(bad)?.trim().to_owned();
            let year: i32 = rec.get(1).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
            let pop: f64 = rec.get(2).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
            if table.insert((region.clone(), year), pop).is_some() {
                return Err(Error::invalid(format!("duplicate population key ({region}, {year})")));
            }
        }
        Ok(Self(table))
    }
}

/// One annual map: horizontal and vertical labels of the same year.
#[derive(Debug, Clone, Copy)]
pub struct AnnualMaps<'a> {
    pub year: i32,
    pub horizontal: &'a DensityLabelGrid,
    pub vertical: &'a DensityLabelGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub region: String,
    pub year: i32,
    /// `horizontal.<class>`, `vertical.<class>` or one of [`URBAN_FORMS`].
    pub class: String,
    pub hectares: f64,
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
    pub warnings: Vec<String>,
}

impl TrendReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,year,class,hectares,population\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.region,
                r.year,
                r.class,
                r.hectares,
                r.population.map(|p| p.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        s
    }
}

/// Area per class for every region and year. A cell covers `cell_size^2 / 10^4`
/// hectares; combined forms use cells labeled on both axes.
pub fn area_trends(maps: &[AnnualMaps<'_>], regions: &[Region], population: Option<&PopulationTable>) -> Result<TrendReport> {
    let Some(first) = maps.first() else {
        return Ok(TrendReport { rows: Vec::new(), warnings: Vec::new() });
    };
    let template = first.horizontal;
    for m in maps {
        if m.horizontal.dimension != Dimension::Horizontal || m.vertical.dimension != Dimension::Vertical {
            return Err(Error::invalid(format!("year {}: maps must be horizontal then vertical", m.year)));
        }
        if !template.same_geometry(m.horizontal) || !template.same_geometry(m.vertical) {
            return Err(Error::Geometry(format!("year {} maps differ in geometry", m.year)));
        }
    }
    let mut keys = HashSet::new();
    let mut claimed = vec![false; template.cells()];
    for r in regions {
        if !keys.insert(r.key.as_str()) {
            return Err(Error::invalid(format!("duplicate region key {:?}", r.key)));
        }
        if r.mask.len() != template.cells() {
            return Err(Error::Geometry(format!("region {:?} mask has wrong size", r.key)));
        }
        for (c, m) in claimed.iter_mut().zip(&r.mask) {
            if *m && *c {
                return Err(Error::invalid(format!("region {:?} overlaps another region", r.key)));
            }
            *c |= *m;
        }
    }
    let cell_ha = template.cell_size * template.cell_size / 10_000.0;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for r in regions {
        let n_cells = r.mask.iter().filter(|m| **m).count();
        if n_cells == 0 {
            let msg = format!("region {:?} covers zero cells", r.key);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        for m in maps {
            let mut hz = vec![0u64; Dimension::Horizontal.n_classes()];
            let mut vt = vec![0u64; Dimension::Vertical.n_classes()];
            let mut form = [0u64; 7];
            for (i, _) in r.mask.iter().enumerate().filter(|(_, m)| **m) {
                let h = m.horizontal.labels[i];
                let v = m.vertical.labels[i];
                if let Some(h) = h {
                    hz[h as usize] += 1;
                }
                if let Some(v) = v {
                    vt[v as usize] += 1;
                }
                if let (Some(h), Some(v)) = (h, v) {
                    form[urban_form(h, v)] += 1;
                }
            }
            let pop = population.and_then(|p| p.0.get(&(r.key.clone(), m.year)).copied());
            let mut push = |class: String, count: u64| {
                rows.push(TrendRow {
                    region: r.key.clone(),
                    year: m.year,
                    class,
                    hectares: count as f64 * cell_ha,
                    population: pop,
                })
            };
            for (name, &c) in Dimension::Horizontal.class_names().iter().zip(&hz) {
                push(format!("horizontal.{name}"), c);
            }
            for (name, &c) in Dimension::Vertical.class_names().iter().zip(&vt) {
                push(format!("vertical.{name}"), c);
            }
            for (name, &c) in URBAN_FORMS.iter().zip(&form) {
                push(name.to_string(), c);
            }
        }
    }
    Ok(TrendReport { rows, warnings })
}

/// Regions from an id raster band: every distinct non-negative integer id
/// becomes a region keyed by `names[id]` or `region_<id>`.
pub fn regions_from_ids(ids: &[f64], names: &BTreeMap<i64, String>) -> Result<Vec<Region>> {
    let mut distinct: Vec<i64> = ids
        .iter()
        .filter(|v| v.is_finite() && **v >= 0.0)
        .map(|v| *v as i64)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    distinct.extend(names.keys().copied());
    distinct.sort_unstable();
    distinct.dedup();
    Ok(distinct
        .into_iter()
        .map(|id| Region {
            key: names.get(&id).cloned().unwrap_or_else(|| format!("region_{id}")),
            mask: ids.iter().map(|v| v.is_finite() && *v as i64 == id && *v >= 0.0).collect(),
        })
        .collect())
}
