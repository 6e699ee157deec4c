//! Central-difference checks of every backward pass.
//!
//! Each check perturbs sampled scalars by ±h, compares `(f(θ+h) − f(θ−h)) / 2h`
//! with the analytic gradient and reports the worst relative error per layer
//! type. Perturbations that change a ReLU sign or a max-pool winner cross a
//! kink of the piecewise-linear function, where the two sides disagree by
//! construction, so they are skipped and counted instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Architecture, ChannelPlan, ModelConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::model::{aspp_forward, build_logits, init_params, layer_type, leaf_grads, Builder, Mode};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Scalars sampled per layer type (all of them when there are fewer).
pub const SAMPLES_PER_LAYER: usize = 200;
/// Lower bound on the relative-error denominator, per unit of loss. A
/// central difference of a float64 loss L carries roundoff of roughly
/// ε·|L|/h ≈ 2e-11·|L| (times a modest accumulation factor), so
/// gradient entries below 1e-4·|L| are compared on that absolute scale
/// instead of against their own vanishing magnitude.
pub const FLOOR_PER_UNIT_LOSS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.layers.is_empty() && self.layers.iter().all(|l| l.passed)
    }

    pub fn extend(&mut self, other: GradcheckReport) {
        self.layers.extend(other.layers);
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<34} {:>7} {:>7} {:>12} {:>12}  result\n", "layer", "checked", "kinks", "max_rel", "max_abs");
        for l in &self.layers {
            writeln!(
                s,
                "{:<34} {:>7} {:>7} {:>12.3e} {:>12.3e}  {}",
                l.layer,
                l.checked,
                l.skipped_kinks,
                l.max_rel_error,
                l.max_abs_error,
                if l.passed { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        s
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss, kink signature and per-entry gradients at one parameter setting.
struct Evaluation {
    loss: f64,
    signature: u64,
    grads: Vec<Option<Vec<f64>>>,
}

/// Checks sampled scalars of `params`, grouped by `group(entry index)`.
fn check_groups(
    params: &ModelParams,
    objective: &dyn Fn(&ModelParams, bool) -> Result<Evaluation>,
    group: &dyn Fn(usize) -> Option<String>,
    tolerance: f64,
    seed: u64,
    prefix: &str,
) -> Result<GradcheckReport> {
    let base = objective(params, true)?;
    let floor = FLOOR_PER_UNIT_LOSS * base.loss.abs().max(1.0);
    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, e) in params.entries().iter().enumerate() {
        if let Some(g) = group(i) {
            groups.entry(g).or_default().extend((0..e.tensor.len()).map(|j| (i, j)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut work = params.clone();
    for (name, mut candidates) in groups {
        candidates.shuffle(&mut rng);
        let mut check = LayerCheck {
            layer: format!("{prefix}{name}"),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            passed: false,
        };
        for (i, j) in candidates {
            if check.checked >= SAMPLES_PER_LAYER {
                break;
            }
            let original = work.entries()[i].tensor.data()[j];
            work.entry_mut(i).tensor.data_mut()[j] = original + STEP;
            let plus = objective(&work, false)?;
            work.entry_mut(i).tensor.data_mut()[j] = original - STEP;
            let minus = objective(&work, false)?;
            work.entry_mut(i).tensor.data_mut()[j] = original;
            if plus.signature != base.signature || minus.signature != base.signature {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * STEP);
            let analytic = base.grads.get(i).and_then(|g| g.as_ref()).map_or(0.0, |g| g[j]);
            // NaN must not vanish in the running maximum.
            let rel = relative_error(analytic, numeric, floor);
            let abs = (analytic - numeric).abs();
            check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { check.max_rel_error.max(rel) };
            check.max_abs_error = if abs.is_nan() { f64::INFINITY } else { check.max_abs_error.max(abs) };
            check.checked += 1;
        }
        check.passed = check.checked > 0 && check.max_rel_error < tolerance;
        layers.push(check);
    }
    Ok(GradcheckReport { tolerance, layers })
}

/// Pseudo-random targets for a probe of `cells` cells.
fn probe_targets(cells: usize, classes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cells).map(|_| (rand::Rng::random_range(&mut rng, 0..classes)) as u8).collect()
}

/// Checks the masked cross-entropy of the full network on `probe` against
/// every trainable parameter group (see [`layer_type`]). Batch norm runs on
/// batch statistics so that its backward pass is exercised.
pub fn finite_difference_check(config: &ModelConfig, params: &ModelParams, probe: &Tensor, tolerance: f64) -> Result<GradcheckReport> {
    let (n, _, h, w) = probe.dims4();
    let targets = probe_targets(n * h * w, config.n_classes, config.seed ^ 0x7a11);
    let mask = vec![true; n * h * w];
    let objective = |p: &ModelParams, with_grads: bool| -> Result<Evaluation> {
        let mut p = p.clone();
        let mut b = Builder::new(&mut p, Mode::Train);
        let x = b.input(probe.clone());
        let logits = build_logits(&mut b, config, x)?;
        let loss = b.graph.softmax_cross_entropy(logits, &targets, &mask)?;
        let mut grads = Vec::new();
        if with_grads {
            b.graph.backward(loss)?;
            grads = b.param_grads();
        }
        Ok(Evaluation {
            loss: b.graph.value(loss).data()[0],
            signature: b.graph.kink_signature(),
            grads,
        })
    };
    let entries = params.entries();
    let group = |i: usize| {
        let e = &entries[i];
        e.kind.trainable().then(|| layer_type(&e.name, e.kind))
    };
    check_groups(params, &objective, &group, tolerance, config.seed, &format!("{}_loss.", config.architecture))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("consistent shape")
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Checks one operation: every input tensor is a leaf and the output is
/// reduced by a fixed random linear probe.
fn check_op(layer: &str, inputs: Vec<Tensor>, build: &Build<'_>, tolerance: f64, seed: u64) -> Result<LayerCheck> {
    let mut params = ModelParams::new();
    for (k, t) in inputs.into_iter().enumerate() {
        params.insert(&format!("input{k}"), ParamKind::Weight, t)?;
    }
    let forward = |p: &ModelParams| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = p.entries().iter().map(|e| g.leaf(e.tensor.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok((g, leaves, out))
    };
    let probe_len = {
        let (g, _, out) = forward(&params)?;
        g.value(out).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = random_tensor(&[probe_len], &mut rng).into_data();
    let objective = |p: &ModelParams, with_grads: bool| -> Result<Evaluation> {
        let (mut g, leaves, out) = forward(p)?;
        let loss = g.dot(out, probe.clone())?;
        let mut grads = Vec::new();
        if with_grads {
            g.backward(loss)?;
            let pairs: Vec<(usize, Var)> = leaves.iter().copied().enumerate().collect();
            grads = leaf_grads(&g, &pairs);
        }
        Ok(Evaluation {
            loss: g.value(loss).data()[0],
            signature: g.kink_signature(),
            grads,
        })
    };
    let report = check_groups(&params, &objective, &|_| Some(layer.to_owned()), tolerance, seed, "")?;
    Ok(report.layers.into_iter().next().expect("one group"))
}

/// Isolated checks of every layer type on small random tensors.
pub fn layer_suite(tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let targets: Vec<u8> = (0..2 * 5 * 4).map(|i| (i * 7 % 3) as u8).collect();
    let mask: Vec<bool> = (0..2 * 5 * 4).map(|i| i % 4 != 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut r = |shape: &[usize]| random_tensor(shape, &mut rng);
    let conv = |spec: ConvSpec| move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), spec);

    let mut push = |layer: &str, inputs: Vec<Tensor>, build: &Build<'_>| -> Result<()> {
        let s = seed.wrapping_add(layers.len() as u64 + 1);
        layers.push(check_op(layer, inputs, build, tolerance, s)?);
        Ok(())
    };

    push("conv", vec![r(&[2, 3, 7, 6]), r(&[4, 3, 3, 3]), r(&[4])], &conv(ConvSpec::default()))?;
    push(
        "conv_stride2_valid",
        vec![r(&[1, 2, 9, 8]), r(&[3, 2, 3, 3]), r(&[3])],
        &conv(ConvSpec {
            stride: 2,
            padding: crate::kernels::Padding::Valid,
            ..Default::default()
        }),
    )?;
    for rate in [1, 2, 4] {
        push(
            &format!("atrous_conv_r{rate}"),
            vec![r(&[1, 3, 11, 10]), r(&[2, 3, 3, 3]), r(&[2])],
            &conv(ConvSpec {
                dilation: rate,
                ..Default::default()
            }),
        )?;
    }
    push(
        "separable_conv",
        vec![r(&[2, 3, 8, 8]), r(&[3, 1, 3, 3]), r(&[4, 3, 1, 1])],
        &|g: &mut Graph, v: &[Var]| {
            let spec = ConvSpec {
                groups: 3,
                stride: 2,
                ..Default::default()
            };
            let d = g.conv2d(v[0], v[1], None, spec)?;
            g.conv2d(d, v[2], None, ConvSpec::default())
        },
    )?;
    push("max_pool", vec![r(&[2, 3, 6, 8])], &|g: &mut Graph, v: &[Var]| g.max_pool2(v[0]))?;
    push("avg_pool", vec![r(&[2, 3, 6, 8])], &|g: &mut Graph, v: &[Var]| g.avg_pool2(v[0]))?;
    push("bilinear_upsample", vec![r(&[2, 2, 4, 5])], &|g: &mut Graph, v: &[Var]| g.upsample(v[0], 9, 11))?;
    push("batch_norm", vec![r(&[3, 4, 5, 5]), r(&[4]), r(&[4])], &|g: &mut Graph, v: &[Var]| {
        g.batch_norm(v[0], v[1], v[2], None)
    })?;
    push(
        "batch_norm_inference",
        vec![r(&[2, 3, 4, 4]), r(&[3]), r(&[3])],
        &|g: &mut Graph, v: &[Var]| g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]))),
    )?;
    push("relu_add", vec![r(&[1, 2, 5, 5]), r(&[1, 2, 5, 5])], &|g: &mut Graph, v: &[Var]| {
        let s = g.add(v[0], v[1])?;
        Ok(g.relu(s))
    })?;
    push(
        "global_pool_concat",
        vec![r(&[2, 3, 4, 6]), r(&[2, 2, 4, 6])],
        &|g: &mut Graph, v: &[Var]| {
            let p = g.global_avg_pool(v[0])?;
            let u = g.upsample(p, 4, 6)?;
            g.concat(&[u, v[1], v[0]])
        },
    )?;
    push("softmax_cross_entropy", vec![r(&[2, 3, 5, 4])], &|g: &mut Graph, v: &[Var]| {
        g.softmax_cross_entropy(v[0], &targets, &mask)
    })?;
    let mut report = GradcheckReport { tolerance, layers };
    report.extend(aspp_check(tolerance, seed)?);
    Ok(report)
}

/// ASPP at rates 1, 2, 4 on a small feature map, including its image-level branch.
fn aspp_check(tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    let input = random_tensor(&[2, 5, 9, 9], &mut rng);
    let mut params = ModelParams::new();
    {
        let mut b = Builder::initializing(&mut params, seed);
        let x = b.input(input.clone());
        aspp_forward(&mut b, "aspp", x, &[1, 2, 4], 3)?;
    }
    // Random biases and affine terms keep every branch away from trivial zeros.
    for i in 0..params.len() {
        let e = params.entry_mut(i);
        if matches!(e.kind, ParamKind::Bias | ParamKind::BnBeta) {
            for v in e.tensor.data_mut() {
                *v = Normal::new(0.0, 0.5).expect("finite").sample(&mut rng);
            }
        }
    }
    let probe = random_tensor(&[2 * 3 * 9 * 9], &mut rng).into_data();
    let objective = |p: &ModelParams, with_grads: bool| -> Result<Evaluation> {
        let mut p = p.clone();
        let mut b = Builder::new(&mut p, Mode::Train);
        let x = b.input(input.clone());
        let out = aspp_forward(&mut b, "aspp", x, &[1, 2, 4], 3)?;
        let loss = b.graph.dot(out, probe.clone())?;
        let mut grads = Vec::new();
        if with_grads {
            b.graph.backward(loss)?;
            grads = b.param_grads();
        }
        Ok(Evaluation {
            loss: b.graph.value(loss).data()[0],
            signature: b.graph.kink_signature(),
            grads,
        })
    };
    let entries = params.entries();
    let group = |i: usize| {
        let e = &entries[i];
        e.kind.trainable().then(|| {
            let t = layer_type(&e.name, e.kind);
            if e.name.starts_with("aspp.pool") {
                "aspp_image_pool".into()
            } else {
                t
            }
        })
    };
    check_groups(&params, &objective, &group, tolerance, seed, "aspp.")
}

/// Small-but-complete networks for the full-loss checks.
pub fn check_config(architecture: Architecture, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::new(architecture, 4);
    c.channels = ChannelPlan {
        entry: [8, 12, 16],
        middle_blocks: 2,
        exit: 20,
        aspp: 8,
        low_level: 6,
        fcn_early: [8, 8, 12, 12],
        fcn_late: 12,
    };
    c.patch_size = 16;
    c.seed = seed;
    c
}

/// The layer suite plus full-loss checks of both architectures on a
/// 1×6×16×16 probe.
pub fn full_suite(tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let mut report = layer_suite(tolerance, seed)?;
    for arch in [Architecture::Fcn, Architecture::DeepLab] {
        report.extend(architecture_check(arch, tolerance, seed)?);
    }
    Ok(report)
}

pub fn architecture_check(architecture: Architecture, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let config = check_config(architecture, seed);
    let params = init_params(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9b);
    let probe = random_tensor(&[1, 6, 16, 16], &mut rng);
    finite_difference_check(&config, &params, &probe, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(2.0, 1.0, 1e-4), 0.5);
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn layer_suite_passes() {
        let report = layer_suite(1e-5, 3).unwrap();
        eprintln!("{}", report.to_text());
        assert!(report.passed());
        // Central differences of linear operations are exact up to roundoff
        // of order ε·|L|/h.
        for l in &report.layers {
            let linear = ["conv", "conv_stride2_valid", "avg_pool", "bilinear_upsample", "global_pool_concat"];
            if linear.contains(&l.layer.as_str()) || l.layer.starts_with("atrous") {
                assert!(l.max_rel_error < 1e-7, "{}: {}", l.layer, l.max_rel_error);
            }
        }
    }

    #[test]
    #[ignore = "slow; covered by the acceptance suite"]
    fn architecture_checks() {
        for arch in [Architecture::Fcn, Architecture::DeepLab] {
            let report = architecture_check(arch, 1e-5, 3).unwrap();
            eprintln!("{}", report.to_text());
            assert!(report.passed());
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A deliberately wrong analytic gradient must be reported.
        let params = {
            let mut p = ModelParams::new();
            p.insert("x", ParamKind::Weight, Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()).unwrap();
            p
        };
        let objective = |p: &ModelParams, _: bool| -> Result<Evaluation> {
            let x = p.entries()[0].tensor.data();
            Ok(Evaluation {
                loss: x[0] * x[0] + x[1],
                signature: 0,
                grads: vec![Some(vec![2.0 * x[0], 1.5])],
            })
        };
        let report = check_groups(&params, &objective, &|_| Some("toy".into()), 1e-5, 0, "").unwrap();
        assert!(!report.passed());
        assert!((report.layers[0].max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }
}
