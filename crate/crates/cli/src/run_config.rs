//! `key = value` run configuration shared by every subcommand.
//!
//! Resolution order: built-in defaults, then the `--config` file, then
//! `--set` overrides and dedicated flags such as `--seed`. Unknown keys are
//! rejected so that a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use urbdense_core::composite::Season;
use urbdense_core::labeler::DensityScheme;
use urbdense_segnet::{Architecture, ModelConfig};

use crate::CliError;

pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    ("synth.size", "256"),
    ("synth.first_year", "2013"),
    ("synth.last_year", "2018"),
    ("synth.reference_year", "2014"),
    ("synth.drift_amplitude", "0"),
    ("synth.noise_std", "0.01"),
    ("synth.qa_dropout", "0.3"),
    ("season.start", "05-01"),
    ("season.end", "08-31"),
    ("composite.window", "3"),
    ("composite.percentile", "0.995"),
    ("scheme.compact_min", "0.30"),
    ("scheme.open_min", "0.15"),
    ("scheme.sparse_min", "0.02"),
    ("scheme.built_min", "0.02"),
    ("scheme.high_rise_min", "10"),
    ("scheme.half_extent", "2"),
    ("sample.min_distance", "150"),
    ("sample.cap_ratio", "5"),
    ("sample.patch_size", "48"),
    ("sample.patch_step", "24"),
    ("sample.validation_fraction", "0.2"),
    ("train.epochs", "12"),
    ("train.learning_rate", "0.0002"),
    ("train.batch_size", "8"),
    ("rf.n_trees", "200"),
    ("rf.features_per_split", "auto"),
    ("rf.glcm_window", "5"),
    ("rf.glcm_levels", "32"),
    ("predict.step", "24"),
    ("smooth.window", "5"),
    ("smooth.polyorder", "2"),
    ("gradcheck.tolerance", "1e-5"),
];

/// Prefix of free-form network settings forwarded to [`ModelConfig::set`].
pub const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key after checking that it exists and, for `model.*`, that
    /// the network configuration accepts it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (key, value) = (key.trim(), value.trim());
        if let Some(model_key) = key.strip_prefix(MODEL_PREFIX) {
            ModelConfig::new(Architecture::Fcn, 4)
                .set(model_key, value)
                .map_err(|e| CliError::Usage(e.to_string()))?;
        } else if !self.values.contains_key(key) {
            return Err(CliError::Usage(format!("unknown configuration key {key:?}")));
        }
        self.values.insert(key.to_owned(), value.to_owned());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Applies a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::Usage(format!("config line {}: {}", i + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no default for {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("bad value {raw:?} for {key}")))
    }

    /// `model.*` settings in key order, prefix stripped.
    pub fn model_overrides(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(MODEL_PREFIX).map(|m| (m, v.as_str())))
    }

    pub fn season(&self) -> Result<Season, CliError> {
        let md = |key: &str| -> Result<(u32, u32), CliError> {
            let raw = self.raw(key);
            let bad = || CliError::Usage(format!("{key} must be MM-DD, got {raw:?}"));
            let (m, d) = raw.split_once('-').ok_or_else(bad)?;
            let (m, d): (u32, u32) = (m.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?);
            if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
                return Err(bad());
            }
            Ok((m, d))
        };
        Ok(Season {
            start: md("season.start")?,
            end: md("season.end")?,
        })
    }

    pub fn scheme(&self) -> Result<DensityScheme, CliError> {
        let scheme = DensityScheme {
            compact_min: self.get("scheme.compact_min")?,
            open_min: self.get("scheme.open_min")?,
            sparse_min: self.get("scheme.sparse_min")?,
            built_min: self.get("scheme.built_min")?,
            high_rise_min: self.get("scheme.high_rise_min")?,
            half_extent: self.get("scheme.half_extent")?,
        };
        scheme.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(scheme)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Writes the resolved configuration to `dir/run_config.txt`.
    pub fn echo(&self, command: &str, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("run_config.txt");
        let text = format!("# urbdense {command}\n{}", self.to_text());
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
