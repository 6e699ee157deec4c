//! Seasonal filtering, rolling-median compositing and band standardization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, MultiBandRaster};

/// One dated acquisition with its per-cell quality flags (`true` = usable).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub date: NaiveDate,
    pub raster: MultiBandRaster,
    pub qa: Vec<bool>,
}

impl Observation {
    pub fn new(date: NaiveDate, raster: MultiBandRaster, qa: Vec<bool>) -> Result<Self> {
        if qa.len() != raster.cells() {
            return Err(Error::Geometry(format!(
                "qa grid has {} cells, raster has {}",
                qa.len(),
                raster.cells()
            )));
        }
        Ok(Self { date, raster, qa })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationStack {
    pub observations: Vec<Observation>,
}

impl ObservationStack {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let stack = Self { observations };
        stack.check_consistent()?;
        Ok(stack)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn check_consistent(&self) -> Result<()> {
        let Some(first) = self.observations.first() else {
            return Ok(());
        };
        for obs in &self.observations {
            first.raster.check_geometry(&obs.raster, "observation stack")?;
            if obs.raster.band_names() != first.raster.band_names() {
                return Err(Error::Geometry(format!(
                    "band list {:?} differs from {:?} ({})",
                    obs.raster.band_names(),
                    first.raster.band_names(),
                    obs.date
                )));
            }
            if obs.qa.len() != obs.raster.cells() {
                return Err(Error::Geometry(format!("qa grid size mismatch on {}", obs.date)));
            }
        }
        Ok(())
    }
}

/// Inclusive month/day window within each year.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Season {
    pub start: (u32, u32),
    pub end: (u32, u32),
}

impl Default for Season {
    /// May 1 through August 31.
    fn default() -> Self {
        Self {
            start: (5, 1),
            end: (8, 31),
        }
    }
}

impl Season {
    pub fn contains(&self, date: NaiveDate) -> bool {
        let md = (date.month(), date.day());
        if self.start <= self.end {
            self.start <= md && md <= self.end
        } else {
            md >= self.start || md <= self.end
        }
    }
}

/// Keeps observations whose month-day falls inside `season`, in original order.
pub fn filter_observations(stack: &ObservationStack, season: Season) -> ObservationStack {
    ObservationStack {
        observations: stack
            .observations
            .iter()
            .filter(|o| season.contains(o.date))
            .cloned()
            .collect(),
    }
}

/// Median of a scratch buffer; mean of the two middle values for even counts.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sort_unstable_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-cell, per-band median of usable samples from `target_year ± window_years/2`.
///
/// Cells with no usable sample are NaN.
pub fn rolling_median_composite(
    stack: &ObservationStack,
    target_year: i32,
    window_years: u32,
) -> Result<MultiBandRaster> {
    if window_years % 2 == 0 {
        return Err(Error::invalid(format!("window_years must be odd, got {window_years}")));
    }
    stack.check_consistent()?;
    let half = (window_years / 2) as i32;
    let members: Vec<&Observation> = stack
        .observations
        .iter()
        .filter(|o| (o.date.year() - target_year).abs() <= half)
        .collect();
    let Some(template) = stack.observations.first().map(|o| &o.raster) else {
        return Err(Error::InsufficientData("empty observation stack".into()));
    };
    let cells = template.cells();
    let bands = template.bands();
    let mut data = vec![f64::NAN; cells * bands];
    let mut scratch = Vec::with_capacity(members.len());
    for b in 0..bands {
        for cell in 0..cells {
            scratch.clear();
            for obs in &members {
                let v = obs.raster.band(b)[cell];
                if obs.qa[cell] && !v.is_nan() {
                    scratch.push(v);
                }
            }
            data[b * cells + cell] = median_in_place(&mut scratch);
        }
    }
    MultiBandRaster::with_geometry_of(template, template.band_names().to_vec(), data)
}

/// Per-band divisors used to bring every year onto the training year's range.
#[derive(Debug, Clone, PartialEq)]
pub struct BandScales {
    pub band_names: Vec<String>,
    pub divisors: Vec<f64>,
    pub source_year: i32,
    pub percentile: f64,
}

impl BandScales {
    pub fn new(band_names: Vec<String>, divisors: Vec<f64>, source_year: i32, percentile: f64) -> Result<Self> {
        if band_names.len() != divisors.len() {
            return Err(Error::invalid("band name and divisor counts differ"));
        }
        if let Some((name, d)) = band_names.iter().zip(&divisors).find(|(_, d)| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(format!("scale for band {name} must be > 0, got {d}")));
        }
        Ok(Self {
            band_names,
            divisors,
            source_year,
            percentile,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "source_year={}", self.source_year).unwrap();
        writeln!(s, "percentile={}", self.percentile).unwrap();
        for (name, d) in self.band_names.iter().zip(&self.divisors) {
            writeln!(s, "{name}={d}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut source_year = None;
        let mut percentile = None;
        let mut names = Vec::new();
        let mut divisors = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(here, format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::format(here, format!("bad number {v:?}")));
            match k {
                "source_year" => {
                    source_year = Some(v.parse::<i32>().map_err(|_| Error::format(here, format!("bad year {v:?}")))?)
                }
                "percentile" => percentile = Some(num(v)?),
                band => {
                    names.push(band.to_owned());
                    divisors.push(num(v)?);
                }
            }
        }
        Self::new(
            names,
            divisors,
            source_year.ok_or_else(|| Error::format(0, "missing source_year"))?,
            percentile.ok_or_else(|| Error::format(0, "missing percentile"))?,
        )
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

/// Nearest-rank percentile: the smallest sample with at least `p * n` samples at or below it.
pub fn nearest_rank_percentile(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    let rank = (p * values.len() as f64).ceil().max(1.0) as usize;
    Some(values[rank.min(values.len()) - 1])
}

/// Per-band nearest-rank percentile of finite samples.
pub fn compute_band_scales(composite: &MultiBandRaster, percentile: f64, source_year: i32) -> Result<BandScales> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::invalid(format!("percentile must be in (0, 1], got {percentile}")));
    }
    let mut divisors = Vec::with_capacity(composite.bands());
    for (b, name) in composite.band_names().iter().enumerate() {
        let mut finite: Vec<f64> = composite.band(b).iter().copied().filter(|v| v.is_finite()).collect();
        let value = nearest_rank_percentile(&mut finite, percentile)
            .ok_or_else(|| Error::InsufficientData(format!("band {name} has no finite samples")))?;
        divisors.push(value);
    }
    BandScales::new(composite.band_names().to_vec(), divisors, source_year, percentile)
}

fn check_scales(composite: &MultiBandRaster, scales: &BandScales) -> Result<()> {
    if scales.divisors.len() != composite.bands() {
        return Err(Error::invalid(format!(
            "{} scales for {} bands",
            scales.divisors.len(),
            composite.bands()
        )));
    }
    if let Some(d) = scales.divisors.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid(format!("non-positive scale {d}")));
    }
    Ok(())
}

/// Divides every sample by its band's scale. No clipping; NaN passes through.
pub fn standardize(composite: &MultiBandRaster, scales: &BandScales) -> Result<MultiBandRaster> {
    check_scales(composite, scales)?;
    let mut out = composite.clone();
    for (b, &d) in scales.divisors.iter().enumerate() {
        out.band_mut(b).iter_mut().for_each(|v| *v /= d);
    }
    Ok(out)
}

/// Inverse of [`standardize`].
pub fn destandardize(standardized: &MultiBandRaster, scales: &BandScales) -> Result<MultiBandRaster> {
    check_scales(standardized, scales)?;
    let mut out = standardized.clone();
    for (b, &d) in scales.divisors.iter().enumerate() {
        out.band_mut(b).iter_mut().for_each(|v| *v *= d);
    }
    Ok(out)
}

/// Writes `stack.csv` (`date,raster,qa`) plus one DMR1 pair per observation.
pub fn write_stack(stack: &ObservationStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("date,raster,qa\n");
    for (i, obs) in stack.observations.iter().enumerate() {
        let raster_name = format!("obs_{i:04}_{}.dmr", obs.date.format("%Y%m%d"));
        let qa_name = format!("qa_{i:04}_{}.dmr", obs.date.format("%Y%m%d"));
        write_raster(&obs.raster, dir.join(&raster_name))?;
        let qa = MultiBandRaster::with_geometry_of(
            &obs.raster,
            vec!["qa_good".into()],
            obs.qa.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect(),
        )?;
        write_raster(&qa, dir.join(&qa_name))?;
        writeln!(index, "{},{raster_name},{qa_name}", obs.date).unwrap();
    }
    let path = dir.join("stack.csv");
    fs::write(&path, index).map_err(|e| Error::io(path, e))
}

pub fn read_stack(dir: impl AsRef<Path>) -> Result<ObservationStack> {
    let dir = dir.as_ref();
    let path = dir.join("stack.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let mut observations = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(i as u64, e.to_string()))?;
        if record.len() != 3 {
            return Err(Error::format(i as u64, "stack.csv rows need date,raster,qa"));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| Error::format(i as u64, format!("bad date {:?}: {e}", &record[0])))?;
        let raster = read_raster(dir.join(&record[1]))?;
        let qa_raster = read_raster(dir.join(&record[2]))?;
        raster.check_geometry(&qa_raster, "qa grid")?;
        let qa = qa_raster.band(0).iter().map(|&v| v > 0.5).collect();
        observations.push(Observation::new(date, raster, qa)?);
    }
    ObservationStack::new(observations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn single(value: f64) -> MultiBandRaster {
        MultiBandRaster::filled(1, 1, vec!["b".into()], value)
    }

    fn obs(d: NaiveDate, v: f64, good: bool) -> Observation {
        Observation::new(d, single(v), vec![good]).unwrap()
    }

    #[test]
    fn season_boundaries() {
        let stack = ObservationStack::new(vec![
            obs(date(1994, 5, 1), 0.1, true),
            obs(date(1994, 9, 2), 0.2, true),
            obs(date(1994, 8, 31), 0.3, true),
            obs(date(1994, 4, 30), 0.4, true),
        ])
        .unwrap();
        let kept = filter_observations(&stack, Season::default());
        let dates: Vec<_> = kept.observations.iter().map(|o| o.date).collect();
        assert_eq!(dates, vec![date(1994, 5, 1), date(1994, 8, 31)]);
        assert!(filter_observations(&ObservationStack::default(), Season::default()).is_empty());
    }

    #[test]
    fn medians_odd_even_and_empty() {
        let odd = ObservationStack::new(vec![
            obs(date(2013, 6, 1), 0.1, true),
            obs(date(2014, 6, 1), 0.3, true),
            obs(date(2015, 6, 1), 0.2, true),
            obs(date(2017, 6, 1), 9.0, true),
        ])
        .unwrap();
        assert_eq!(rolling_median_composite(&odd, 2014, 3).unwrap().get(0, 0, 0), 0.2);

        let even = ObservationStack::new(
            [0.1, 0.2, 0.3, 0.4]
                .iter()
                .map(|&v| obs(date(2014, 7, 1), v, true))
                .collect(),
        )
        .unwrap();
        let m = rolling_median_composite(&even, 2014, 3).unwrap().get(0, 0, 0);
        assert_eq!(m, 0.5 * (0.2 + 0.3));

        let bad = ObservationStack::new(vec![obs(date(2014, 6, 1), 0.1, false), obs(date(2014, 7, 1), 0.2, false)]).unwrap();
        assert!(rolling_median_composite(&bad, 2014, 3).unwrap().get(0, 0, 0).is_nan());
        assert!(rolling_median_composite(&bad, 2014, 2).is_err());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let a = obs(date(2014, 6, 1), 0.1, true);
        let b = Observation::new(date(2014, 6, 2), MultiBandRaster::filled(2, 1, vec!["b".into()], 0.0), vec![true; 2]).unwrap();
        let stack = ObservationStack { observations: vec![a, b] };
        assert!(matches!(rolling_median_composite(&stack, 2014, 3), Err(Error::Geometry(_))));
    }

    #[test]
    fn percentile_scales() {
        let constant = MultiBandRaster::filled(10, 10, vec!["b".into()], 0.2);
        assert_eq!(compute_band_scales(&constant, 0.995, 2014).unwrap().divisors, vec![0.2]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let r = MultiBandRaster::new(1000, 1, vec!["b".into()], 30.0, (0.0, 0.0), values.clone()).unwrap();
        let got = compute_band_scales(&r, 0.995, 2014).unwrap().divisors[0];
        // Sort-and-index oracle: rank ceil(0.995 * 1000) = 995.
        let mut sorted = values;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, sorted[994]);
        assert!((got - 0.995).abs() <= 0.02);

        let empty = MultiBandRaster::filled(3, 3, vec!["b".into()], f64::NAN);
        assert!(compute_band_scales(&empty, 0.995, 2014).is_err());
    }

    #[test]
    fn standardize_examples() {
        let names: Vec<String> = ["blue", "green", "red", "nir", "swir1", "swir2"].iter().map(|s| s.to_string()).collect();
        let divisors = vec![0.1024, 0.1374, 0.1532, 0.4679, 0.2872, 0.2207];
        let scales = BandScales::new(names.clone(), divisors.clone(), 2014, 0.995).unwrap();
        let mut r = MultiBandRaster::filled(2, 1, names, 0.0);
        r.set(0, 0, 0, 0.1024);
        r.set(0, 0, 1, 0.2048);
        r.set(3, 0, 0, f64::NAN);
        let s = standardize(&r, &scales).unwrap();
        assert_eq!(s.get(0, 0, 0), 1.0);
        assert_eq!(s.get(0, 0, 1), 2.0);
        assert!(s.get(3, 0, 0).is_nan());

        let zero = BandScales {
            divisors: vec![0.0; 6],
            ..scales.clone()
        };
        assert!(standardize(&r, &zero).is_err());
        assert!(BandScales::new(vec!["a".into()], vec![-1.0], 2014, 0.995).is_err());

        let back = BandScales::from_text(&scales.to_text()).unwrap();
        assert_eq!(back, scales);
    }

    #[test]
    fn stack_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ObservationStack::new(vec![obs(date(2014, 6, 1), 0.25, true), obs(date(2015, 7, 3), 0.5, false)]).unwrap();
        write_stack(&stack, dir.path()).unwrap();
        assert_eq!(read_stack(dir.path()).unwrap(), stack);
    }

    proptest! {
        #[test]
        fn median_matches_sort_oracle(seed in 0u64..10_000, n_obs in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (4, 3);
            let observations: Vec<Observation> = (0..n_obs)
                .map(|i| {
                    let data: Vec<f64> = (0..w * h * 2)
                        .map(|_| if rng.random_bool(0.1) { f64::NAN } else { rng.random_range(0.0..1.0) })
                        .collect();
                    let r = MultiBandRaster::new(w, h, vec!["a".into(), "b".into()], 30.0, (0.0, 0.0), data).unwrap();
                    let qa = (0..w * h).map(|_| rng.random_bool(0.7)).collect();
                    Observation::new(date(2013 + (i % 3) as i32, 6, 1 + i as u32), r, qa).unwrap()
                })
                .collect();
            let stack = ObservationStack::new(observations.clone()).unwrap();
            let comp = rolling_median_composite(&stack, 2014, 3).unwrap();
            for b in 0..2 {
                for cell in 0..w * h {
                    let mut good: Vec<f64> = observations
                        .iter()
                        .filter(|o| o.qa[cell] && !o.raster.band(b)[cell].is_nan())
                        .map(|o| o.raster.band(b)[cell])
                        .collect();
                    good.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    let expected = match good.len() {
                        0 => f64::NAN,
                        n if n % 2 == 1 => good[n / 2],
                        n => (good[n / 2 - 1] + good[n / 2]) / 2.0,
                    };
                    let got = comp.band(b)[cell];
                    prop_assert!((got.is_nan() && expected.is_nan()) || got == expected);
                }
            }
        }

        #[test]
        fn standardize_inverse_and_ratio(v1 in 1e-3f64..3.0, v2 in 1e-3f64..3.0, d in 1e-2f64..1.0) {
            let scales = BandScales::new(vec!["b".into()], vec![d], 2014, 0.995).unwrap();
            let year_a = single(v1);
            let year_b = single(v2);
            let sa = standardize(&year_a, &scales).unwrap();
            let sb = standardize(&year_b, &scales).unwrap();
            let back = destandardize(&sa, &scales).unwrap().get(0, 0, 0);
            let ulp = f64::EPSILON * v1.abs();
            prop_assert!((back - v1).abs() <= ulp);
            let ratio_raw = v1 / v2;
            let ratio_std = sa.get(0, 0, 0) / sb.get(0, 0, 0);
            prop_assert!((ratio_raw - ratio_std).abs() <= 4.0 * f64::EPSILON * ratio_raw);
        }
    }
}
