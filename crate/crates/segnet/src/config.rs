use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Fcn,
    DeepLab,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Fcn => "fcn",
            Architecture::DeepLab => "deeplab",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fcn" => Ok(Architecture::Fcn),
            "deeplab" => Ok(Architecture::DeepLab),
            other => Err(Error::Config(format!("unknown architecture {other:?} (expected fcn or deeplab)"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer widths of both architectures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    /// Output widths of the three entry blocks.
    pub entry: [usize; 3],
    pub middle_blocks: usize,
    pub exit: usize,
    /// Width of each ASPP branch and of the fused ASPP output.
    pub aspp: usize,
    /// Width of the projected low-level decoder feature.
    pub low_level: usize,
    /// FCN widths before the pooling stage.
    pub fcn_early: [usize; 4],
    /// FCN width of the four convolutions after pooling.
    pub fcn_late: usize,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            entry: [32, 64, 128],
            middle_blocks: 3,
            exit: 256,
            aspp: 64,
            low_level: 32,
            fcn_early: [32, 32, 64, 64],
            fcn_late: 96,
        }
    }
}

impl ChannelPlan {
    /// A narrow plan with the same topology, for fast tests.
    pub fn tiny() -> Self {
        Self {
            entry: [4, 6, 8],
            middle_blocks: 1,
            exit: 8,
            aspp: 4,
            low_level: 3,
            fcn_early: [4, 4, 6, 6],
            fcn_late: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub in_bands: usize,
    pub n_classes: usize,
    pub patch_size: usize,
    pub atrous_rates: [usize; 3],
    pub channels: ChannelPlan,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, n_classes: usize) -> Self {
        Self {
            architecture,
            in_bands: 6,
            n_classes,
            patch_size: 48,
            atrous_rates: [1, 2, 4],
            channels: ChannelPlan::default(),
            learning_rate: 2e-4,
            epochs: 12,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.atrous_rates[0] < 1 || self.atrous_rates.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("atrous rates {:?} must be >= 1 and strictly increasing", self.atrous_rates));
        }
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return bad(format!("patch size {} must be even", self.patch_size));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.in_bands == 0 || self.batch_size == 0 {
            return bad("in_bands and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        let c = &self.channels;
        if c.entry.contains(&0) || c.exit == 0 || c.aspp == 0 || c.low_level == 0 || c.fcn_early.contains(&0) || c.fcn_late == 0 {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let c = &self.channels;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "architecture={}", self.architecture).unwrap();
        writeln!(s, "in_bands={}", self.in_bands).unwrap();
        writeln!(s, "n_classes={}", self.n_classes).unwrap();
        writeln!(s, "patch_size={}", self.patch_size).unwrap();
        writeln!(s, "atrous_rates={}", list(&self.atrous_rates)).unwrap();
        writeln!(s, "entry_channels={}", list(&c.entry)).unwrap();
        writeln!(s, "middle_blocks={}", c.middle_blocks).unwrap();
        writeln!(s, "exit_channels={}", c.exit).unwrap();
        writeln!(s, "aspp_channels={}", c.aspp).unwrap();
        writeln!(s, "low_level_channels={}", c.low_level).unwrap();
        writeln!(s, "fcn_early_channels={}", list(&c.fcn_early)).unwrap();
        writeln!(s, "fcn_late_channels={}", c.fcn_late).unwrap();
        writeln!(s, "learning_rate={:?}", self.learning_rate).unwrap();
        writeln!(s, "epochs={}", self.epochs).unwrap();
        writeln!(s, "batch_size={}", self.batch_size).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        s
    }

    /// Applies one `key=value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
            let parts: Vec<usize> = v.split(',').map(|p| num(key, p)).collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::Config(format!("{key} needs {N} comma-separated values")))
        }
        match key.trim() {
            "architecture" => self.architecture = Architecture::parse(value)?,
            "in_bands" => self.in_bands = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "atrous_rates" => self.atrous_rates = list(key, value)?,
            "entry_channels" => self.channels.entry = list(key, value)?,
            "middle_blocks" => self.channels.middle_blocks = num(key, value)?,
            "exit_channels" => self.channels.exit = num(key, value)?,
            "aspp_channels" => self.channels.aspp = num(key, value)?,
            "low_level_channels" => self.channels.low_level = num(key, value)?,
            "fcn_early_channels" => self.channels.fcn_early = list(key, value)?,
            "fcn_late_channels" => self.channels.fcn_late = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown model setting {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = ModelConfig::new(Architecture::DeepLab, 4);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }
}
