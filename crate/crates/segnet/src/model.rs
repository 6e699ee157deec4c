//! The two segmentation architectures, built on a [`Graph`].
//!
//! DeepLab: three separable entry blocks (the last one at stride 2), residual
//! separable middle blocks, a separable exit block, ASPP and a decoder that
//! fuses the ASPP output with a projected entry-flow feature. FCN: four 3×3
//! convolutions, parallel 2×2 max and average pooling concatenated along
//! channels, four more 3×3 convolutions. Both end in a 1×1 class
//! convolution and an align-corners bilinear upsample to the input size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Architecture, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvSpec};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::Tensor;

/// Batch normalization uses batch statistics in `Train` and the running
/// moments in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Builds a forward graph while resolving layer names to parameters.
/// In initializing mode missing parameters are created (He-normal weights,
/// zero biases, unit scales).
pub struct Builder<'a> {
    pub graph: Graph,
    params: &'a mut ModelParams,
    mode: Mode,
    init: Option<ChaCha8Rng>,
    /// (parameter position, leaf) of every trainable parameter used.
    pub leaves: Vec<(usize, Var)>,
    /// Batch-norm layer name with the batch mean and unbiased variance it saw.
    pub bn_moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ModelParams, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            params,
            mode,
            init: None,
            leaves: Vec::new(),
            bn_moments: Vec::new(),
        }
    }

    pub fn initializing(params: &'a mut ModelParams, seed: u64) -> Self {
        let mut b = Self::new(params, Mode::Train);
        b.init = Some(ChaCha8Rng::seed_from_u64(seed));
        b
    }

    fn resolve(&mut self, name: &str, kind: ParamKind, shape: &[usize], fan_in: usize) -> Result<usize> {
        if let Some(i) = self.params.position(name) {
            let t = &self.params.entries()[i].tensor;
            if t.shape() != shape {
                return Err(Error::shape(format!("parameter {name} has shape {:?}, layer needs {shape:?}", t.shape())));
            }
            return Ok(i);
        }
        let Some(rng) = self.init.as_mut() else {
            return Err(Error::shape(format!("missing parameter {name}")));
        };
        let n: usize = shape.iter().product();
        let data = match kind {
            ParamKind::Weight => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => vec![1.0; n],
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => vec![0.0; n],
        };
        self.params.insert(name, kind, Tensor::new(shape.to_vec(), data)?)
    }

    fn trainable(&mut self, name: &str, kind: ParamKind, shape: &[usize], fan_in: usize) -> Result<Var> {
        let i = self.resolve(name, kind, shape, fan_in)?;
        let v = self.graph.leaf(self.params.entries()[i].tensor.clone());
        self.leaves.push((i, v));
        Ok(v)
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.graph.leaf(x)
    }

    fn channels(&self, x: Var) -> usize {
        self.graph.value(x).dims4().1
    }

    pub fn conv(&mut self, name: &str, x: Var, c_out: usize, k: usize, spec: ConvSpec, bias: bool) -> Result<Var> {
        let c_in = self.channels(x);
        if c_in % spec.groups != 0 {
            return Err(Error::shape(format!("{name}: {c_in} channels in {} groups", spec.groups)));
        }
        let cg = c_in / spec.groups;
        let w = self.trainable(&format!("{name}.weight"), ParamKind::Weight, &[c_out, cg, k, k], cg * k * k)?;
        let b = if bias {
            Some(self.trainable(&format!("{name}.bias"), ParamKind::Bias, &[c_out], 0)?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, spec)
    }

    /// Depthwise 3×3 then pointwise 1×1, both without bias.
    pub fn separable(&mut self, name: &str, x: Var, c_out: usize, stride: usize, dilation: usize) -> Result<Var> {
        let c_in = self.channels(x);
        let dw_spec = ConvSpec {
            stride,
            dilation,
            groups: c_in,
            ..Default::default()
        };
        let d = self.conv(&format!("{name}.dw"), x, c_in, 3, dw_spec, false)?;
        self.conv(&format!("{name}.pw"), d, c_out, 1, ConvSpec::default(), false)
    }

    pub fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let c = self.channels(x);
        let gamma = self.trainable(&format!("{name}.gamma"), ParamKind::BnGamma, &[c], 0)?;
        let beta = self.trainable(&format!("{name}.beta"), ParamKind::BnBeta, &[c], 0)?;
        let mean_i = self.resolve(&format!("{name}.mean"), ParamKind::BnRunningMean, &[c], 0)?;
        let var_i = self.resolve(&format!("{name}.var"), ParamKind::BnRunningVar, &[c], 0)?;
        match self.mode {
            Mode::Train => {
                let xv = self.graph.value(x);
                let d = xv.dims4();
                let (mean, var) = kernels::channel_moments(xv.data(), d);
                let m = (d.0 * d.2 * d.3) as f64;
                let unbiased = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
                self.bn_moments.push((name.to_owned(), mean, unbiased));
                self.graph.batch_norm(x, gamma, beta, None)
            }
            Mode::Eval => {
                let mean = self.params.entries()[mean_i].tensor.data().to_vec();
                let var = self.params.entries()[var_i].tensor.data().to_vec();
                self.graph.batch_norm(x, gamma, beta, Some((&mean, &var)))
            }
        }
    }

    /// Gradients of the last backward pass, indexed by parameter position.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        leaf_grads(&self.graph, &self.leaves)
    }

    pub fn conv_bn_relu(&mut self, name: &str, x: Var, c_out: usize, k: usize, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(name, x, c_out, k, spec, false)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        Ok(self.graph.relu(y))
    }
}

/// Sums leaf gradients per parameter position.
pub(crate) fn leaf_grads(graph: &Graph, leaves: &[(usize, Var)]) -> Vec<Option<Vec<f64>>> {
    let n = leaves.iter().map(|(i, _)| i + 1).max().unwrap_or(0);
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    for &(i, v) in leaves {
        if let Some(g) = graph.grad(v) {
            match &mut grads[i] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.to_vec()),
            }
        }
    }
    grads
}

/// Groups a parameter into the layer type it belongs to.
pub fn layer_type(name: &str, kind: ParamKind) -> String {
    if matches!(
        kind,
        ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::BnRunningMean | ParamKind::BnRunningVar
    ) {
        return "batch_norm".into();
    }
    if name.contains(".dw.") || name.contains(".pw.") {
        return "separable_conv".into();
    }
    if let Some(rest) = name.split("atrous_r").nth(1) {
        let rate: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        return format!("atrous_conv_r{rate}");
    }
    if name.starts_with("aspp.") {
        return "aspp".into();
    }
    if name.starts_with("classifier") {
        return "classifier".into();
    }
    "conv".into()
}

fn entry_block(b: &mut Builder<'_>, name: &str, x: Var, c_out: usize, stride: usize) -> Result<Var> {
    let s = b.separable(&format!("{name}.sep1"), x, c_out, stride, 1)?;
    let s = b.bn(&format!("{name}.sep1.bn"), s)?;
    let s = b.graph.relu(s);
    let s = b.separable(&format!("{name}.sep2"), s, c_out, 1, 1)?;
    let s = b.bn(&format!("{name}.sep2.bn"), s)?;
    let spec = ConvSpec {
        stride,
        ..Default::default()
    };
    let sc = b.conv(&format!("{name}.shortcut"), x, c_out, 1, spec, false)?;
    let sc = b.bn(&format!("{name}.shortcut.bn"), sc)?;
    let sum = b.graph.add(s, sc)?;
    Ok(b.graph.relu(sum))
}

fn middle_block(b: &mut Builder<'_>, name: &str, x: Var) -> Result<Var> {
    let c = b.channels(x);
    let s = b.separable(&format!("{name}.sep1"), x, c, 1, 1)?;
    let s = b.bn(&format!("{name}.sep1.bn"), s)?;
    let s = b.graph.relu(s);
    let s = b.separable(&format!("{name}.sep2"), s, c, 1, 1)?;
    let s = b.bn(&format!("{name}.sep2.bn"), s)?;
    let sum = b.graph.add(x, s)?;
    Ok(b.graph.relu(sum))
}

/// Atrous spatial pyramid pooling: a 1×1 branch, one 3×3 branch per
/// rate and an image-level branch, concatenated and fused by a 1×1
/// convolution with batch norm and ReLU. Spatial dims are preserved.
pub fn aspp_forward(b: &mut Builder<'_>, name: &str, x: Var, rates: &[usize], branch_channels: usize) -> Result<Var> {
    if rates.iter().any(|r| *r < 1) {
        return Err(Error::Config(format!("atrous rates must be >= 1, got {rates:?}")));
    }
    let (_, _, h, w) = b.graph.value(x).dims4();
    let mut branches = vec![b.conv_bn_relu(&format!("{name}.conv1x1"), x, branch_channels, 1, ConvSpec::default())?];
    for &r in rates {
        let spec = ConvSpec {
            dilation: r,
            ..Default::default()
        };
        branches.push(b.conv_bn_relu(&format!("{name}.atrous_r{r}"), x, branch_channels, 3, spec)?);
    }
    // Batch norm over a 1×1 map of a single sample is degenerate, so the
    // image-level branch uses a bias instead.
    let pooled = b.graph.global_avg_pool(x)?;
    let pooled = b.conv(&format!("{name}.pool"), pooled, branch_channels, 1, ConvSpec::default(), true)?;
    let pooled = b.graph.relu(pooled);
    branches.push(b.graph.upsample(pooled, h, w)?);
    let cat = b.graph.concat(&branches)?;
    b.conv_bn_relu(&format!("{name}.fuse"), cat, branch_channels, 1, ConvSpec::default())
}

fn deeplab(b: &mut Builder<'_>, config: &ModelConfig, x: Var) -> Result<Var> {
    let c = &config.channels;
    let e1 = entry_block(b, "entry1", x, c.entry[0], 1)?;
    let e2 = entry_block(b, "entry2", e1, c.entry[1], 1)?;
    let e3 = entry_block(b, "entry3", e2, c.entry[2], 2)?;
    let mut m = e3;
    for i in 0..c.middle_blocks {
        m = middle_block(b, &format!("middle{}", i + 1), m)?;
    }
    let ex = b.separable("exit.sep", m, c.exit, 1, 1)?;
    let ex = b.bn("exit.sep.bn", ex)?;
    let ex = b.graph.relu(ex);
    let aspp = aspp_forward(b, "aspp", ex, &config.atrous_rates, c.aspp)?;
    let low = b.conv_bn_relu("decoder.low_level", e3, c.low_level, 1, ConvSpec::default())?;
    let d = b.graph.concat(&[aspp, low])?;
    let d = b.conv_bn_relu("decoder.conv1", d, c.aspp, 3, ConvSpec::default())?;
    let d = b.conv_bn_relu("decoder.conv2", d, c.aspp, 3, ConvSpec::default())?;
    b.conv("classifier", d, config.n_classes, 1, ConvSpec::default(), true)
}

fn fcn(b: &mut Builder<'_>, config: &ModelConfig, x: Var) -> Result<Var> {
    let c = &config.channels;
    let mut y = x;
    for (i, &width) in c.fcn_early.iter().enumerate() {
        y = b.conv_bn_relu(&format!("fcn.conv{}", i + 1), y, width, 3, ConvSpec::default())?;
    }
    let mp = b.graph.max_pool2(y)?;
    let ap = b.graph.avg_pool2(y)?;
    y = b.graph.concat(&[mp, ap])?;
    for i in 0..4 {
        y = b.conv_bn_relu(&format!("fcn.conv{}", i + 5), y, c.fcn_late, 3, ConvSpec::default())?;
    }
    b.conv("classifier", y, config.n_classes, 1, ConvSpec::default(), true)
}

/// Adds the network to `b.graph` and returns the full-resolution class scores.
pub fn build_logits(b: &mut Builder<'_>, config: &ModelConfig, x: Var) -> Result<Var> {
    let (_, c, h, w) = b.graph.value(x).dims4();
    if b.graph.value(x).shape().len() != 4 {
        return Err(Error::shape("input must be (batch, bands, height, width)"));
    }
    if c != config.in_bands {
        return Err(Error::shape(format!("input has {c} bands, model expects {}", config.in_bands)));
    }
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("input {h}x{w} must have even, non-zero sides")));
    }
    let scores = match config.architecture {
        Architecture::DeepLab => deeplab(b, config, x)?,
        Architecture::Fcn => fcn(b, config, x)?,
    };
    b.graph.upsample(scores, h, w)
}

/// Fresh parameters for `config`, seeded by `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::new();
    let mut b = Builder::initializing(&mut params, config.seed);
    let x = b.input(Tensor::zeros(&[1, config.in_bands, config.patch_size, config.patch_size]));
    build_logits(&mut b, config, x)?;
    Ok(params)
}

/// Per-class scores (n, n_classes, h, w) for an (n, in_bands, h, w) input.
pub fn model_forward(config: &ModelConfig, params: &ModelParams, input: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut params = params.clone();
    let mut b = Builder::new(&mut params, mode);
    let x = b.input(input.clone());
    let logits = build_logits(&mut b, config, x)?;
    let mut out = b.graph.value(logits).clone();
    out.grad = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ChannelPlan;

    fn tiny(arch: Architecture, classes: usize) -> ModelConfig {
        let mut c = ModelConfig::new(arch, classes);
        c.channels = ChannelPlan::tiny();
        c.patch_size = 16;
        c
    }

    #[test]
    fn shapes_and_parameter_groups() {
        for arch in [Architecture::DeepLab, Architecture::Fcn] {
            let config = tiny(arch, 4);
            let params = init_params(&config).unwrap();
            for size in [8, 16, 20] {
                let out = model_forward(&config, &params, &Tensor::zeros(&[2, 6, size, size]), Mode::Eval).unwrap();
                assert_eq!(out.shape(), &[2, 4, size, size]);
            }
            assert!(model_forward(&config, &params, &Tensor::zeros(&[1, 5, 16, 16]), Mode::Eval).is_err());
            assert!(model_forward(&config, &params, &Tensor::zeros(&[1, 6, 15, 15]), Mode::Eval).is_err());
        }
        let params = init_params(&tiny(Architecture::DeepLab, 4)).unwrap();
        let groups: std::collections::BTreeSet<String> =
            params.entries().iter().map(|e| layer_type(&e.name, e.kind)).collect();
        for g in ["batch_norm", "separable_conv", "atrous_conv_r1", "atrous_conv_r2", "atrous_conv_r4", "aspp", "classifier", "conv"] {
            assert!(groups.contains(g), "missing {g}");
        }
    }

    #[test]
    fn initialization_is_seeded() {
        let mut config = tiny(Architecture::Fcn, 3);
        let a = init_params(&config).unwrap();
        assert_eq!(a, init_params(&config).unwrap());
        config.seed = 1;
        assert_ne!(a, init_params(&config).unwrap());
    }

    #[test]
    fn zero_fusion_silences_aspp() {
        let mut params = ModelParams::new();
        let mut input = Tensor::zeros(&[1, 5, 6, 6]);
        input.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        {
            let mut b = Builder::initializing(&mut params, 3);
            let x = b.input(input.clone());
            aspp_forward(&mut b, "aspp", x, &[1, 2, 4], 4).unwrap();
        }
        let concat_channels = params.get("aspp.fuse.weight").unwrap().shape()[1];
        assert_eq!(concat_channels, 5 * 4);
        let fuse = params.position("aspp.fuse.weight").unwrap();
        params.entry_mut(fuse).tensor.data_mut().fill(0.0);
        let mut b = Builder::new(&mut params, Mode::Train);
        let x = b.input(input);
        let y = aspp_forward(&mut b, "aspp", x, &[1, 2, 4], 4).unwrap();
        assert_eq!(b.graph.value(y).shape(), &[1, 4, 6, 6]);
        assert!(b.graph.value(y).data().iter().all(|v| *v == 0.0));
        assert!(aspp_forward(&mut b, "aspp", x, &[0, 2, 4], 4).is_err());
    }
}
