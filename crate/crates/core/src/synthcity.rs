//! Seeded synthetic cities with known building-area ratio and height.
//!
//! A city is a Voronoi mosaic of districts. Each district kind places
//! buildings on a jittered lattice with its own footprint size, spacing,
//! coverage and height range, so that height is only recoverable from the
//! spatial arrangement of footprints and never from a single pixel's
//! spectrum. A growth script then edits districts year by year.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::composite::{Observation, ObservationStack};
use crate::error::{Error, Result};
use crate::labeler::{label_grids, DensityLabelGrid, DensityScheme};
use crate::raster::{read_raster, write_raster, MultiBandRaster, DEFAULT_CELL_SIZE};

pub const MIN_SIZE: usize = 96;
pub const DEFAULT_OBSERVATIONS_PER_YEAR: usize = 6;
const DISTRICT_SPACING: f64 = 24.0;

/// Endmember reflectance of fully built cells, in `BAND_NAMES` order.
pub const BUILT_SPECTRUM: [f64; 6] = [0.12, 0.13, 0.15, 0.22, 0.27, 0.24];
/// Endmember reflectance of vegetation.
pub const VEGETATION_SPECTRUM: [f64; 6] = [0.03, 0.06, 0.04, 0.42, 0.21, 0.09];
/// Added to every band of a cloudy sample.
const CLOUD_BRIGHTENING: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistrictKind {
    /// Large tall blocks separated by narrow streets.
    Core,
    /// Dense small low buildings.
    OldTown,
    /// Very large low halls.
    Industrial,
    /// Tall towers spaced by green.
    Estate,
    Suburb,
    Villas,
    Rural,
    Park,
}

struct Layout {
    period: usize,
    footprint: usize,
    presence: f64,
    bar: (f64, f64),
    height: (f64, f64),
}

impl DistrictKind {
    pub const ALL: [DistrictKind; 8] = [
        DistrictKind::Core,
        DistrictKind::OldTown,
        DistrictKind::Industrial,
        DistrictKind::Estate,
        DistrictKind::Suburb,
        DistrictKind::Villas,
        DistrictKind::Rural,
        DistrictKind::Park,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistrictKind::Core => "core",
            DistrictKind::OldTown => "old_town",
            DistrictKind::Industrial => "industrial",
            DistrictKind::Estate => "estate",
            DistrictKind::Suburb => "suburb",
            DistrictKind::Villas => "villas",
            DistrictKind::Rural => "rural",
            DistrictKind::Park => "park",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown district kind {s:?}")))
    }

    fn layout(self) -> Layout {
        let l = |period, footprint, presence, bar, height| Layout {
            period,
            footprint,
            presence,
            bar,
            height,
        };
        match self {
            DistrictKind::Core => l(5, 4, 0.95, (0.85, 0.98), (25.0, 70.0)),
            DistrictKind::OldTown => l(3, 2, 0.95, (0.85, 0.98), (5.0, 9.0)),
            DistrictKind::Industrial => l(9, 7, 0.8, (0.9, 0.98), (7.0, 9.5)),
            DistrictKind::Estate => l(4, 2, 0.9, (0.8, 0.95), (25.0, 50.0)),
            DistrictKind::Suburb => l(2, 1, 0.85, (0.7, 0.95), (4.0, 8.0)),
            DistrictKind::Villas => l(3, 1, 0.55, (0.3, 0.6), (4.0, 8.0)),
            DistrictKind::Rural => l(8, 2, 0.12, (0.3, 0.6), (3.0, 7.0)),
            DistrictKind::Park => l(8, 1, 0.0, (0.0, 0.0), (0.0, 0.0)),
        }
    }

    /// Kind drawn for a district whose center lies at normalized distance
    /// `r` from the city center (1 at the grid edge).
    fn draw(r: f64, rng: &mut ChaCha8Rng) -> Self {
        use DistrictKind::*;
        let table: &[(DistrictKind, f64)] = if r < 0.22 {
            &[(Core, 0.55), (OldTown, 0.3), (Industrial, 0.15)]
        } else if r < 0.45 {
            &[(OldTown, 0.25), (Estate, 0.3), (Industrial, 0.2), (Suburb, 0.15), (Park, 0.1)]
        } else if r < 0.75 {
            &[(Suburb, 0.4), (Estate, 0.1), (Villas, 0.25), (Industrial, 0.1), (Park, 0.15)]
        } else {
            &[(Villas, 0.3), (Rural, 0.55), (Park, 0.15)]
        };
        let mut u: f64 = rng.random();
        for &(kind, p) in table {
            if u < p {
                return kind;
            }
            u -= p;
        }
        table[table.len() - 1].0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthAction {
    /// Builds on every empty lot.
    Infill,
    /// Raises every building to `1.5 h + 15` m.
    Highrise,
    /// Turns rural land or parkland into suburb.
    Sprawl,
    /// Removes about half of the buildings.
    Demolish,
}

impl GrowthAction {
    pub const ALL: [GrowthAction; 4] = [
        GrowthAction::Infill,
        GrowthAction::Highrise,
        GrowthAction::Sprawl,
        GrowthAction::Demolish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GrowthAction::Infill => "infill",
            GrowthAction::Highrise => "highrise",
            GrowthAction::Sprawl => "sprawl",
            GrowthAction::Demolish => "demolish",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown growth action {s:?}")))
    }

    fn applies_to(self, kind: DistrictKind) -> bool {
        use DistrictKind::*;
        match self {
            GrowthAction::Infill => matches!(kind, OldTown | Industrial | Suburb | Villas),
            GrowthAction::Highrise => matches!(kind, Core | OldTown | Estate | Industrial),
            GrowthAction::Sprawl => matches!(kind, Rural | Park),
            GrowthAction::Demolish => matches!(kind, OldTown | Industrial | Estate | Suburb),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptEntry {
    pub year: i32,
    /// District index.
    pub region: usize,
    pub action: GrowthAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityScenario {
    pub seed: u64,
    /// Grid is `size × size` cells.
    pub size: usize,
    pub cell_size: f64,
    /// Strictly increasing.
    pub years: Vec<i32>,
    /// District index per cell, row-major.
    pub districts: Vec<usize>,
    /// Kind of every district in the first year.
    pub district_kinds: Vec<DistrictKind>,
    /// Building-area ratio per year, row-major.
    pub bar: Vec<Vec<f64>>,
    /// Building height in metres per year, row-major.
    pub height: Vec<Vec<f64>>,
    pub script: Vec<ScriptEntry>,
    /// Multiplicative per-band bias per year.
    pub drift: Vec<[f64; 6]>,
    pub observations_per_year: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn year_key(year: i32) -> u64 {
    year as i64 as u64
}

struct Unit {
    district: usize,
    cells: Vec<usize>,
    present: bool,
    bar: f64,
    height: f64,
}

fn draw_building(layout: &Layout, rng: &mut ChaCha8Rng) -> (f64, f64) {
    (
        rng.random_range(layout.bar.0..=layout.bar.1),
        rng.random_range(layout.height.0..=layout.height.1),
    )
}

fn build_units(kind: DistrictKind, district: usize, cells: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let layout = kind.layout();
    let p = layout.period;
    let (off_r, off_c) = (rng.random_range(0..p), rng.random_range(0..p));
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut units: Vec<Unit> = Vec::new();
    for &cell in cells {
        let (r, c) = (cell / size + off_r, cell % size + off_c);
        if r % p >= layout.footprint || c % p >= layout.footprint {
            continue;
        }
        let i = *index.entry((r / p, c / p)).or_insert_with(|| {
            units.push(Unit {
                district,
                cells: Vec::new(),
                present: false,
                bar: 0.0,
                height: 0.0,
            });
            units.len() - 1
        });
        units[i].cells.push(cell);
    }
    for u in &mut units {
        u.present = rng.random_bool(layout.presence);
        let (bar, height) = draw_building(&layout, rng);
        u.bar = bar;
        u.height = height;
    }
    units
}

fn rasterize(units: &[Unit], cells: usize) -> (Vec<f64>, Vec<f64>) {
    let mut bar = vec![0.0; cells];
    let mut height = vec![0.0; cells];
    for u in units.iter().filter(|u| u.present) {
        for &c in &u.cells {
            bar[c] = u.bar;
            height[c] = u.height;
        }
    }
    (bar, height)
}

/// Generates a deterministic city of `size × size` 30 m cells over `years`.
pub fn generate_city_timeline(seed: u64, years: &[i32], size: usize) -> Result<CityScenario> {
    if size < MIN_SIZE {
        return Err(Error::invalid(format!("city size must be at least {MIN_SIZE} cells, got {size}")));
    }
    if years.is_empty() || years.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("years must be non-empty and strictly increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let n = (size as f64 / DISTRICT_SPACING).round().max(1.0) as usize;
    let spacing = size as f64 / n as f64;
    let half = size as f64 / 2.0;
    let mut centers = Vec::with_capacity(n * n);
    let mut kinds = Vec::with_capacity(n * n);
    for gi in 0..n {
        for gj in 0..n {
            let y = (gi as f64 + 0.5 + rng.random_range(-0.35..0.35)) * spacing;
            let x = (gj as f64 + 0.5 + rng.random_range(-0.35..0.35)) * spacing;
            let r = ((y - half).powi(2) + (x - half).powi(2)).sqrt() / half;
            centers.push((y, x));
            kinds.push(DistrictKind::draw(r, &mut rng));
        }
    }
    let cells = size * size;
    let mut districts = vec![0usize; cells];
    let mut members = vec![Vec::new(); centers.len()];
    for (cell, d) in districts.iter_mut().enumerate() {
        let (y, x) = ((cell / size) as f64 + 0.5, (cell % size) as f64 + 0.5);
        *d = (0..centers.len())
            .min_by(|&a, &b| {
                let da = (centers[a].0 - y).powi(2) + (centers[a].1 - x).powi(2);
                let db = (centers[b].0 - y).powi(2) + (centers[b].1 - x).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        members[*d].push(cell);
    }
    let mut units = Vec::new();
    for (d, &kind) in kinds.iter().enumerate() {
        let mut drng = ChaCha8Rng::seed_from_u64(mix(seed, 1000 + d as u64));
        units.extend(build_units(kind, d, &members[d], size, &mut drng));
    }

    let district_kinds = kinds.clone();
    let (b0, h0) = rasterize(&units, cells);
    let mut bar = vec![b0];
    let mut height = vec![h0];
    let mut script = Vec::new();
    for &year in &years[1..] {
        let mut yrng = ChaCha8Rng::seed_from_u64(mix(seed, year_key(year) ^ 0x5C21_7000));
        let n_actions = yrng.random_range(0..=2);
        let mut acted = Vec::new();
        for _ in 0..n_actions {
            let action = GrowthAction::ALL[yrng.random_range(0..GrowthAction::ALL.len())];
            let eligible: Vec<usize> = (0..kinds.len())
                .filter(|d| !acted.contains(d) && !members[*d].is_empty() && action.applies_to(kinds[*d]))
                .filter(|d| {
                    let mine = || units.iter().filter(|u| u.district == *d);
                    match action {
                        GrowthAction::Infill => mine().any(|u| !u.present),
                        GrowthAction::Highrise | GrowthAction::Demolish => mine().any(|u| u.present),
                        GrowthAction::Sprawl => true,
                    }
                })
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let d = eligible[yrng.random_range(0..eligible.len())];
            acted.push(d);
            apply_action(action, d, &mut units, &mut kinds, &members[d], size, &mut yrng);
            script.push(ScriptEntry { year, region: d, action });
        }
        let (b, h) = rasterize(&units, cells);
        bar.push(b);
        height.push(h);
    }

    Ok(CityScenario {
        seed,
        size,
        cell_size: DEFAULT_CELL_SIZE,
        years: years.to_vec(),
        districts,
        district_kinds,
        bar,
        height,
        script,
        drift: vec![[1.0; 6]; years.len()],
        observations_per_year: DEFAULT_OBSERVATIONS_PER_YEAR,
    })
}

fn apply_action(
    action: GrowthAction,
    d: usize,
    units: &mut Vec<Unit>,
    kinds: &mut [DistrictKind],
    cells: &[usize],
    size: usize,
    rng: &mut ChaCha8Rng,
) {
    let layout = kinds[d].layout();
    match action {
        GrowthAction::Infill => {
            for u in units.iter_mut().filter(|u| u.district == d && !u.present) {
                let (bar, height) = draw_building(&layout, rng);
                *u = Unit {
                    present: true,
                    bar,
                    height,
                    cells: std::mem::take(&mut u.cells),
                    district: d,
                };
            }
        }
        GrowthAction::Highrise => {
            for u in units.iter_mut().filter(|u| u.district == d && u.present) {
                u.height = u.height * 1.5 + 15.0;
            }
        }
        GrowthAction::Sprawl => {
            units.retain(|u| u.district != d);
            kinds[d] = DistrictKind::Suburb;
            units.extend(build_units(DistrictKind::Suburb, d, cells, size, rng));
        }
        GrowthAction::Demolish => {
            let mut removed = false;
            for u in units.iter_mut().filter(|u| u.district == d && u.present) {
                if rng.random_bool(0.5) {
                    u.present = false;
                    removed = true;
                }
            }
            if !removed {
                if let Some(u) = units.iter_mut().find(|u| u.district == d && u.present) {
                    u.present = false;
                }
            }
        }
    }
}

/// `bar · built + (1 − bar) · vegetation`, scaled per band by `drift`.
pub fn mixed_spectrum(bar: f64, drift: &[f64; 6]) -> [f64; 6] {
    std::array::from_fn(|b| (bar * BUILT_SPECTRUM[b] + (1.0 - bar) * VEGETATION_SPECTRUM[b]) * drift[b])
}

impl CityScenario {
    pub fn cells(&self) -> usize {
        self.size * self.size
    }

    pub fn year_index(&self, year: i32) -> Result<usize> {
        self.years
            .iter()
            .position(|y| *y == year)
            .ok_or_else(|| Error::OutOfBounds(format!("year {year} is not in the scenario timeline")))
    }

    fn grid(&self, name: &str, data: Vec<f64>) -> Result<MultiBandRaster> {
        MultiBandRaster::new(self.size, self.size, vec![name.into()], self.cell_size, (0.0, 0.0), data)
    }

    pub fn bar_raster(&self, year: i32) -> Result<MultiBandRaster> {
        self.grid("bar", self.bar[self.year_index(year)?].clone())
    }

    pub fn height_raster(&self, year: i32) -> Result<MultiBandRaster> {
        self.grid("height", self.height[self.year_index(year)?].clone())
    }

    /// Reference labels of `year` under `scheme`.
    pub fn labels(&self, year: i32, scheme: &DensityScheme) -> Result<(DensityLabelGrid, DensityLabelGrid)> {
        label_grids(&self.bar_raster(year)?, &self.height_raster(year)?, scheme, year)
    }

    pub fn region_mask(&self, region: usize) -> Vec<bool> {
        self.districts.iter().map(|d| *d == region).collect()
    }

    pub fn n_regions(&self) -> usize {
        self.district_kinds.len()
    }

    pub fn drift_for(&self, year: i32) -> Result<[f64; 6]> {
        Ok(self.drift[self.year_index(year)?])
    }

    pub fn set_drift(&mut self, year: i32, factors: [f64; 6]) -> Result<()> {
        if factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::invalid(format!("drift factors must be positive, got {factors:?}")));
        }
        let i = self.year_index(year)?;
        self.drift[i] = factors;
        Ok(())
    }

    /// Every year except `reference_year` gets each band scaled by
    /// `1 + amplitude` or `1 − amplitude`, the sign drawn per band.
    pub fn apply_random_drift(&mut self, amplitude: f64, reference_year: i32) -> Result<()> {
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::invalid(format!("drift amplitude must be in [0, 1), got {amplitude}")));
        }
        let reference = self.year_index(reference_year)?;
        for (i, &year) in self.years.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, year_key(year) ^ 0xD71F_7000));
            self.drift[i] = if i == reference {
                [1.0; 6]
            } else {
                std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 + amplitude } else { 1.0 - amplitude })
            };
        }
        Ok(())
    }

    /// Noise-free reflectance of `year` as a 6-band raster.
    pub fn mixed_raster(&self, year: i32) -> Result<MultiBandRaster> {
        let i = self.year_index(year)?;
        let cells = self.cells();
        let mut data = vec![0.0; 6 * cells];
        for (cell, &bar) in self.bar[i].iter().enumerate() {
            for (b, v) in mixed_spectrum(bar, &self.drift[i]).into_iter().enumerate() {
                data[b * cells + cell] = v;
            }
        }
        MultiBandRaster::new(self.size, self.size, crate::band_names(), self.cell_size, (0.0, 0.0), data)
    }

    /// Writes `scenario.txt`, `districts.dmr`, one `grids_<year>.dmr`
    /// (bands `bar`, `height`) per year and `script.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = String::new();
        writeln!(meta, "seed={}", self.seed).unwrap();
        writeln!(meta, "size={}", self.size).unwrap();
        writeln!(meta, "cell_size={:?}", self.cell_size).unwrap();
        writeln!(meta, "observations_per_year={}", self.observations_per_year).unwrap();
        let years: Vec<String> = self.years.iter().map(|y| y.to_string()).collect();
        writeln!(meta, "years={}", years.join(",")).unwrap();
        let kinds: Vec<&str> = self.district_kinds.iter().map(|k| k.name()).collect();
        writeln!(meta, "district_kinds={}", kinds.join(",")).unwrap();
        for (year, d) in self.years.iter().zip(&self.drift) {
            let f: Vec<String> = d.iter().map(|x| format!("{x:?}")).collect();
            writeln!(meta, "drift.{year}={}", f.join(",")).unwrap();
        }
        let path = dir.join("scenario.txt");
        fs::write(&path, meta).map_err(|e| Error::io(path, e))?;

        let ids = self.grid("district", self.districts.iter().map(|d| *d as f64).collect())?;
        write_raster(&ids, dir.join("districts.dmr"))?;
        for (i, year) in self.years.iter().enumerate() {
            let mut data = self.bar[i].clone();
            data.extend_from_slice(&self.height[i]);
            let r = MultiBandRaster::new(self.size, self.size, vec!["bar".into(), "height".into()], self.cell_size, (0.0, 0.0), data)?;
            write_raster(&r, dir.join(format!("grids_{year}.dmr")))?;
        }
        let mut csv = String::from("year,region,action\n");
        for e in &self.script {
            writeln!(csv, "{},{},{}", e.year, e.region, e.action.name()).unwrap();
        }
        let path = dir.join("script.csv");
        fs::write(&path, csv).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("scenario.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kv = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(i as u64, format!("bad scenario line {line:?}")))?;
            kv.insert(k.to_owned(), v.to_owned());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::format(0, format!("scenario.txt lacks {k}")));
        let parse_err = |k: &str| Error::format(0, format!("bad value for {k}"));
        let seed: u64 = get("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let size: usize = get("size")?.parse().map_err(|_| parse_err("size"))?;
        let cell_size: f64 = get("cell_size")?.parse().map_err(|_| parse_err("cell_size"))?;
        let observations_per_year: usize = get("observations_per_year")?
            .parse()
            .map_err(|_| parse_err("observations_per_year"))?;
        let years: Vec<i32> = get("years")?
            .split(',')
            .map(|y| y.parse().map_err(|_| parse_err("years")))
            .collect::<Result<_>>()?;
        let district_kinds: Vec<DistrictKind> = get("district_kinds")?
            .split(',')
            .map(DistrictKind::parse)
            .collect::<Result<_>>()?;
        let mut drift = Vec::with_capacity(years.len());
        for y in &years {
            let key = format!("drift.{y}");
            let f: Vec<f64> = get(&key)?
                .split(',')
                .map(|x| x.parse().map_err(|_| parse_err(&key)))
                .collect::<Result<_>>()?;
            drift.push(<[f64; 6]>::try_from(f).map_err(|_| parse_err(&key))?);
        }
        let ids = read_raster(dir.join("districts.dmr"))?;
        if ids.width() != size || ids.height() != size {
            return Err(Error::Geometry(format!("districts.dmr is not {size}x{size}")));
        }
        let districts = ids.band(0).iter().map(|v| *v as usize).collect();
        let (mut bar, mut height) = (Vec::new(), Vec::new());
        for y in &years {
            let r = read_raster(dir.join(format!("grids_{y}.dmr")))?;
            ids.check_geometry(&r, "scenario grids")?;
            if r.bands() != 2 {
                return Err(Error::format(0, format!("grids_{y}.dmr needs bar and height bands")));
            }
            bar.push(r.band(0).to_vec());
            height.push(r.band(1).to_vec());
        }
        let path = dir.join("script.csv");
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        let mut script = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(i as u64, e.to_string()))?;
            let bad = || Error::format(i as u64, "script rows need year,region,action");
            script.push(ScriptEntry {
                year: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
                region: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
                action: GrowthAction::parse(rec.get(2).ok_or_else(bad)?)?,
            });
        }
        Ok(Self {
            seed,
            size,
            cell_size,
            years,
            districts,
            district_kinds,
            bar,
            height,
            script,
            drift,
            observations_per_year,
        })
    }
}

/// Renders `observations_per_year` dated acquisitions of `year` spread over
/// May to August. Each sample is the drifted mixed spectrum plus seeded
/// Gaussian noise; a `qa_dropout` share of cells per acquisition is cloudy,
/// flagged unusable and brightened.
pub fn render_reflectance(scenario: &CityScenario, year: i32, noise_std: f64, qa_dropout: f64) -> Result<ObservationStack> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
    }
    if !(0.0..=1.0).contains(&qa_dropout) {
        return Err(Error::invalid(format!("qa_dropout must be in [0, 1], got {qa_dropout}")));
    }
    let clean = scenario.mixed_raster(year)?;
    let n = scenario.observations_per_year.max(1);
    let season_start = NaiveDate::from_ymd_opt(year, 5, 1).ok_or_else(|| Error::invalid(format!("bad year {year}")))?;
    let cells = clean.cells();
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut observations = Vec::with_capacity(n);
    for o in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(scenario.seed, year_key(year)), o as u64));
        let date = season_start + chrono::Days::new(((o as f64 + 0.5) * 123.0 / n as f64) as u64);
        let qa: Vec<bool> = (0..cells).map(|_| !rng.random_bool(qa_dropout)).collect();
        let mut data = clean.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            if noise_std > 0.0 {
                *v += normal.sample(&mut rng);
            }
            if !qa[i % cells] {
                *v += CLOUD_BRIGHTENING;
            }
        }
        let raster = MultiBandRaster::with_geometry_of(&clean, clean.band_names().to_vec(), data)?;
        observations.push(Observation::new(date, raster, qa)?);
    }
    ObservationStack::new(observations)
}

/// Concatenated renderings of several years.
pub fn render_stack(scenario: &CityScenario, years: &[i32], noise_std: f64, qa_dropout: f64) -> Result<ObservationStack> {
    let mut all = Vec::new();
    for &y in years {
        all.extend(render_reflectance(scenario, y, noise_std, qa_dropout)?.observations);
    }
    ObservationStack::new(all)
}
