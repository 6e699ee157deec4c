//! Define-by-run computation graph with reverse-mode differentiation.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, ConvSpec};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geometry: ConvGeometry,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Upsample {
        x: usize,
    },
    Dot {
        x: usize,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<u8>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::shape(format!("expected an (n, c, h, w) tensor, got {:?}", t.shape())));
    }
    Ok(t.dims4())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 4 {
            return Err(Error::shape(format!("conv weight must be 4-D, got {:?}", wv.shape())));
        }
        let geometry = ConvGeometry::new(dims(xv)?, wv.dims4(), spec)?;
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != geometry.c_out {
                    return Err(Error::shape(format!("bias has {} values for {} channels", bv.len(), geometry.c_out)));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bias, &geometry);
        let shape = vec![geometry.n, geometry.c_out, geometry.ho, geometry.wo];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geometry,
            },
        ))
    }

    /// Batch normalization. With `moments = None` the batch's own statistics
    /// are used; otherwise the given (mean, variance) are treated as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, moments: Option<(&[f64], &[f64])>) -> Result<Var> {
        let xv = self.value(x);
        let d = dims(xv)?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d.1 || bv.len() != d.1 {
            return Err(Error::shape(format!("batch norm over {} channels got {} / {} parameters", d.1, gv.len(), bv.len())));
        }
        let batch_stats = moments.is_none();
        let (mean, var) = match moments {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => kernels::channel_moments(xv.data(), d),
        };
        let (out, xhat, inv_std) = kernels::batch_norm_forward(xv.data(), d, gv.data(), bv.data(), &mean, &var);
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        // Written so that NaN propagates instead of being clamped to zero.
        let out: Vec<f64> = xv.data().iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Relu { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("cannot add {:?} and {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let d = dims(self.value(x))?;
        let (out, argmax) = kernels::max_pool2_forward(self.value(x).data(), d);
        let t = Tensor::new(vec![d.0, d.1, d.2 / 2, d.3 / 2], out)?;
        Ok(self.push(t, Op::MaxPool { x: x.0, argmax }))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let d = dims(self.value(x))?;
        let out = kernels::avg_pool2_forward(self.value(x).data(), d);
        let t = Tensor::new(vec![d.0, d.1, d.2 / 2, d.3 / 2], out)?;
        Ok(self.push(t, Op::AvgPool { x: x.0 }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = dims(self.value(xs[0]))?;
        let mut channels = 0;
        for &x in xs {
            let d = dims(self.value(x))?;
            if (d.0, d.2, d.3) != (first.0, first.2, first.3) {
                return Err(Error::shape(format!("cannot concatenate {:?} with {:?}", d, first)));
            }
            channels += d.1;
        }
        let (n, h, w) = (first.0, first.2, first.3);
        let mut out = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &x in xs {
                let c = self.value(x).dims4().1;
                out.extend_from_slice(&self.value(x).data()[b * c * h * w..][..c * h * w]);
            }
        }
        let t = Tensor::new(vec![n, channels, h, w], out)?;
        Ok(self.push(t, Op::Concat { xs: xs.iter().map(|v| v.0).collect() }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims(self.value(x))?;
        let data = self.value(x).data();
        let out = (0..n * c).map(|p| data[p * h * w..][..h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let t = Tensor::new(vec![n, c, 1, 1], out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x: x.0 }))
    }

    /// Bilinear align-corners resize to `h × w`.
    pub fn upsample(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let d = dims(self.value(x))?;
        if d.2 == 0 || d.3 == 0 {
            return Err(Error::shape("cannot upsample an empty grid"));
        }
        if h < d.2 || w < d.3 {
            return Err(Error::shape(format!("upsample target {h}x{w} is smaller than {}x{}", d.2, d.3)));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), d, h, w);
        let t = Tensor::new(vec![d.0, d.1, h, w], out)?;
        Ok(self.push(t, Op::Upsample { x: x.0 }))
    }

    /// Scalar `Σ weights ⊙ x`; a linear probe for gradient checks.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape(format!("dot of {} values with {} weights", xv.len(), weights.len())));
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x: x.0, weights }))
    }

    /// Mean cross-entropy of the channel softmax over cells with `mask`
    /// set. `targets` and `mask` are indexed (n, h, w).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u8], mask: &[bool]) -> Result<Var> {
        let d = dims(self.value(logits))?;
        let (n, c, h, w) = d;
        if targets.len() != n * h * w || mask.len() != n * h * w {
            return Err(Error::shape(format!("targets/mask need {} cells", n * h * w)));
        }
        let probs = kernels::softmax_channels(self.value(logits).data(), d);
        let hw = h * w;
        let mut loss = 0.0;
        let mut count = 0;
        for b in 0..n {
            for cell in 0..hw {
                let i = b * hw + cell;
                if !mask[i] {
                    continue;
                }
                let t = targets[i] as usize;
                if t >= c {
                    return Err(Error::shape(format!("target class {t} with only {c} outputs")));
                }
                let p = probs[(b * c + t) * hw + cell];
                loss -= if p < f64::MIN_POSITIVE { f64::MIN_POSITIVE } else { p }.ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::NoLabels("loss mask selects no cell".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Backpropagates from the scalar `target`, replacing every node's gradient.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(Error::shape("backward needs a scalar target"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(vec![1.0]);
        for i in (0..=target.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geometry } => {
                    let (dx, dw, db) = kernels::conv2d_backward(self.nodes[*x].value.data(), self.nodes[*w].value.data(), &g, geometry);
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *w, &dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let d = node.value.dims4();
                    let (dx, dg, db) =
                        kernels::batch_norm_backward(&g, xhat, inv_std, self.nodes[*gamma].value.data(), d, *batch_stats);
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gamma, &dg);
                    accumulate(&mut grads, *beta, &db);
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool2_backward(argmax, &g, self.nodes[*x].value.len());
                    accumulate(&mut grads, *x, &dx);
                }
                Op::AvgPool { x } => {
                    let dx = kernels::avg_pool2_backward(&g, self.nodes[*x].value.dims4());
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Concat { xs } => {
                    let (n, c_total, h, w) = node.value.dims4();
                    let hw = h * w;
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.nodes[x].value.dims4().1;
                        let mut dx = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            dx.extend_from_slice(&g[(b * c_total + offset) * hw..][..c * hw]);
                        }
                        accumulate(&mut grads, x, &dx);
                        offset += c;
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let (n, c, h, w) = self.nodes[*x].value.dims4();
                    let hw = h * w;
                    let mut dx = vec![0.0; n * c * hw];
                    for p in 0..n * c {
                        dx[p * hw..][..hw].fill(g[p] / hw as f64);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Upsample { x } => {
                    let (_, _, ho, wo) = node.value.dims4();
                    let dx = kernels::bilinear_backward(&g, self.nodes[*x].value.dims4(), ho, wo);
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Dot { x, weights } => {
                    let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                    mask,
                    count,
                } => {
                    let (n, c, h, w) = self.nodes[*logits].value.dims4();
                    let hw = h * w;
                    let scale = g[0] / *count as f64;
                    let mut dx = vec![0.0; probs.len()];
                    for b in 0..n {
                        for cell in 0..hw {
                            if !mask[b * hw + cell] {
                                continue;
                            }
                            for k in 0..c {
                                let j = (b * c + k) * hw + cell;
                                let onehot = if targets[b * hw + cell] as usize == k { 1.0 } else { 0.0 };
                                dx[j] = (probs[j] - onehot) * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, &dx);
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = g;
        }
        Ok(())
    }

    /// Hash of every piecewise-linear branch taken in the forward pass
    /// (ReLU signs and max-pool winners). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for chunk in self.nodes[*x].value.data().chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (u64::from(*v > 0.0) << i));
                        feed(bits);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|a| feed(*a as u64)),
                _ => {}
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 1, 2], vec![2.0, -1.0]).unwrap());
        let r = g.relu(x);
        let s = g.add(r, x).unwrap();
        let y = g.dot(s, vec![3.0, 5.0]).unwrap();
        g.backward(y).unwrap();
        // d/dx (relu(x) + x) = 2 for positive, 1 for negative entries.
        assert_eq!(g.grad(x).unwrap(), &[6.0, 5.0]);
    }

    #[test]
    fn masked_cells_do_not_matter() {
        let logits = Tensor::new(vec![1, 3, 1, 2], vec![0.1, 0.5, -0.2, 0.3, 0.9, 0.0]).unwrap();
        let loss_for = |targets: &[u8]| {
            let mut g = Graph::new();
            let l = g.leaf(logits.clone());
            let v = g.softmax_cross_entropy(l, targets, &[true, false]).unwrap();
            g.value(v).data()[0]
        };
        assert_eq!(loss_for(&[1, 0]), loss_for(&[1, 2]));
        let mut g = Graph::new();
        let l = g.leaf(logits);
        assert!(g.softmax_cross_entropy(l, &[0, 0], &[false, false]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::filled(&[3, 2, 3, 3], 0.2));
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = g.conv2d(x, w, Some(b), ConvSpec::default()).unwrap();
        let s = g.dot(y, (0..48).map(|i| i as f64).collect()).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|v| *v == 0.0));
    }
}
