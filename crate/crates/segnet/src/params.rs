//! Named model parameters and their on-disk form.
//!
//! A model directory holds `manifest.txt` (format line, the `config.*`
//! settings, then one `param <name> <kind> <shape>` line per tensor) and
//! `params.bin`, the tensors as little-endian `f32` in manifest order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MANIFEST_HEADER: &str = "urbdense-model 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::BnRunningMean => "bn_mean",
            ParamKind::BnRunningVar => "bn_var",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            ParamKind::Weight,
            ParamKind::Bias,
            ParamKind::BnGamma,
            ParamKind::BnBeta,
            ParamKind::BnRunningMean,
            ParamKind::BnRunningVar,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Parameters in creation order, addressable by unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_owned(),
            kind,
            tensor,
        });
        self.index.insert(name.to_owned(), self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    pub fn write(&self, config: &ModelConfig, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        if !self.is_finite() {
            return Err(Error::Config("refusing to save non-finite parameters".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{MANIFEST_HEADER}\n");
        for line in config.to_text().lines() {
            writeln!(manifest, "config.{line}").unwrap();
        }
        let mut payload = Vec::new();
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "param {} {} {}", e.name, e.kind.name(), shape.join("x")).unwrap();
            for v in e.tensor.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))?;
        let path = dir.join("params.bin");
        fs::write(&path, payload).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("params.bin");
        let payload = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format {
                offset: 0,
                message: format!("manifest does not start with {MANIFEST_HEADER:?}"),
            });
        }
        let mut config_text = String::new();
        let mut params = ModelParams::new();
        let mut cursor = 0usize;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if let Some(setting) = line.strip_prefix("config.") {
                config_text.push_str(setting);
                config_text.push('\n');
                continue;
            }
            let bad = |m: &str| Error::Format {
                offset: cursor as u64,
                message: format!("{m}: {line:?}"),
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(bad("expected `param <name> <kind> <shape>`"));
            }
            let kind = ParamKind::parse(parts[2]).ok_or_else(|| bad("unknown parameter kind"))?;
            let shape: Vec<usize> = parts[3]
                .split('x')
                .map(|d| d.parse().map_err(|_| bad("bad shape")))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let bytes = payload.get(cursor..cursor + 4 * n).ok_or_else(|| bad("payload too short"))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            cursor += 4 * n;
            params.insert(parts[1], kind, Tensor::new(shape, data)?)?;
        }
        if cursor != payload.len() {
            return Err(Error::Format {
                offset: cursor as u64,
                message: format!("{} trailing payload bytes", payload.len() - cursor),
            });
        }
        if !params.is_finite() {
            return Err(Error::Format {
                offset: 0,
                message: "non-finite parameter values".into(),
            });
        }
        Ok((ModelConfig::from_text(&config_text)?, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Architecture;

    #[test]
    fn unique_names_and_round_trip() {
        let mut p = ModelParams::new();
        p.insert("a.weight", ParamKind::Weight, Tensor::new(vec![2, 1, 1, 1], vec![0.5, -1.25]).unwrap()).unwrap();
        p.insert("a.bn.mean", ParamKind::BnRunningMean, Tensor::new(vec![2], vec![0.0, 3.0]).unwrap()).unwrap();
        assert!(p.insert("a.weight", ParamKind::Weight, Tensor::zeros(&[1])).is_err());
        assert_eq!(p.trainable_scalars(), 2);
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig::new(Architecture::Fcn, 3);
        p.write(&config, dir.path()).unwrap();
        let (c, q) = ModelParams::read(dir.path()).unwrap();
        assert_eq!(c, config);
        assert_eq!(q, p);
        fs::write(dir.path().join("params.bin"), [0u8; 8]).unwrap();
        assert!(ModelParams::read(dir.path()).is_err());
    }
}
