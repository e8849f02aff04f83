use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{BlockSpec, NetworkSpec};
use super::ModelError;
use crate::tensor::{BnMode, Graph, PoolMode, Real, RunningStats, Tensor, Var, BN_EPS};

/// Graph handles for every parameter, keyed by name.
pub type ParamVars = BTreeMap<String, Var>;
/// Batchnorm running statistics keyed by layer name (e.g. `dense1.layer0.bn`).
pub type StatsMap<F> = BTreeMap<String, RunningStats<F>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// When false, each dense layer sees only its immediate predecessor's
    /// features; earlier slots of the concatenation are zero-filled so
    /// shapes are unchanged.
    pub dense_concat: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { dense_concat: true }
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Pre-sigmoid scores, shape `N`.
    pub logits: Var,
    /// Probability of the positive class, shape `N`.
    pub probs: Var,
    /// Every block output by block name, plus the pre-gate depthwise
    /// features of MBConv blocks under `<block>.dw`.
    pub activations: BTreeMap<String, Var>,
}

/// Values from an inference pass, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub activations: BTreeMap<String, Tensor<f32>>,
}

struct Ctx<'a, F: Real> {
    g: &'a mut Graph<F>,
    params: &'a ParamVars,
    stats: &'a mut StatsMap<F>,
    mode: BnMode,
}

impl<F: Real> Ctx<'_, F> {
    fn p(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::ParamMismatch { name: name.to_string(), detail: "missing".into() })
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let stats = self
            .stats
            .get_mut(prefix)
            .ok_or_else(|| ModelError::ParamMismatch { name: prefix.to_string(), detail: "no running stats".into() })?;
        Ok(self.g.batchnorm2d(x, gamma, beta, stats, self.mode, F::from_f64(BN_EPS))?)
    }

    fn conv(&mut self, x: Var, weight: &str, stride: usize, pad: usize, groups: usize) -> Result<Var, ModelError> {
        let k = self.p(weight)?;
        Ok(self.g.conv2d(x, k, None, stride, pad, groups)?)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var, ModelError> {
        Ok(if parts.len() == 1 { parts[0] } else { self.g.concat_channels(parts)? })
    }

    fn block(
        &mut self,
        block: &BlockSpec,
        name: &str,
        x: Var,
        opts: ForwardOptions,
        taps: &mut BTreeMap<String, Var>,
    ) -> Result<Var, ModelError> {
        match *block {
            BlockSpec::Conv { kernel, stride, .. } => {
                let y = self.conv(x, &format!("{name}.conv.weight"), stride, (kernel - stride) / 2, 1)?;
                let y = self.bn(y, &format!("{name}.bn"))?;
                Ok(self.g.relu(y)?)
            }
            BlockSpec::Dense { num_layers, .. } => {
                let mut feats = vec![x];
                for l in 0..num_layers {
                    let input = if opts.dense_concat {
                        self.concat(&feats)?
                    } else {
                        let mut parts: Vec<Var> = feats[..feats.len() - 1]
                            .iter()
                            .map(|&v| {
                                let zeros = Tensor::zeros(self.g.value(v).shape().to_vec());
                                self.g.constant(zeros)
                            })
                            .collect();
                        parts.push(*feats.last().expect("nonempty"));
                        self.concat(&parts)?
                    };
                    let y = self.bn(input, &format!("{name}.layer{l}.bn"))?;
                    let y = self.g.relu(y)?;
                    let y = self.conv(y, &format!("{name}.layer{l}.conv.weight"), 1, 1, 1)?;
                    feats.push(y);
                }
                self.concat(&feats)
            }
            BlockSpec::Transition { .. } => {
                let y = self.bn(x, &format!("{name}.bn"))?;
                let y = self.conv(y, &format!("{name}.conv.weight"), 1, 0, 1)?;
                Ok(self.g.pool2d(y, PoolMode::Avg, 2, 2)?)
            }
            BlockSpec::MbConv { in_channels, out_channels, stride, .. } => {
                let e = block.expanded();
                let y = self.conv(x, &format!("{name}.expand.conv.weight"), 1, 0, 1)?;
                let y = self.bn(y, &format!("{name}.expand.bn"))?;
                let y = self.g.relu(y)?;
                let y = self.conv(y, &format!("{name}.dw.conv.weight"), stride, 1, e)?;
                let y = self.bn(y, &format!("{name}.dw.bn"))?;
                let y = self.g.relu(y)?;
                taps.insert(format!("{name}.dw"), y);

                let n = self.g.value(y).shape()[0];
                let s = self.g.pool2d(y, PoolMode::GlobalAvg, 1, 1)?;
                let s = self.g.reshape(s, &[n, e])?;
                let (rw, rb) =
                    (self.p(&format!("{name}.se.reduce.weight"))?, self.p(&format!("{name}.se.reduce.bias"))?);
                let s = self.g.dense(s, rw, rb)?;
                let s = self.g.relu(s)?;
                let (ew, eb) =
                    (self.p(&format!("{name}.se.expand.weight"))?, self.p(&format!("{name}.se.expand.bias"))?);
                let s = self.g.dense(s, ew, eb)?;
                let gates = self.g.sigmoid(s)?;
                let y = self.g.scale_channels(y, gates)?;

                let y = self.conv(y, &format!("{name}.project.conv.weight"), 1, 0, 1)?;
                let y = self.bn(y, &format!("{name}.project.bn"))?;
                if stride == 1 && in_channels == out_channels {
                    Ok(self.g.add(y, x)?)
                } else {
                    Ok(y)
                }
            }
        }
    }
}

/// Runs `spec` on `input` (`N x C x H x W`) at any precision, given graph
/// handles for every parameter. Train mode updates `stats` in place.
pub fn forward<F: Real>(
    spec: &NetworkSpec,
    g: &mut Graph<F>,
    input: Var,
    params: &ParamVars,
    stats: &mut StatsMap<F>,
    mode: BnMode,
    opts: ForwardOptions,
) -> Result<Trace, ModelError> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1..] != spec.input_shape {
        let mut expected = vec![shape.first().copied().unwrap_or(1)];
        expected.extend(spec.input_shape);
        return Err(ModelError::InputShape { found: shape, expected });
    }
    let n = shape[0];
    let mut ctx = Ctx { g, params, stats, mode };
    let mut activations = BTreeMap::new();
    let mut x = input;
    for (block, name) in spec.blocks.iter().zip(spec.block_names()) {
        x = ctx.block(block, &name, x, opts, &mut activations)?;
        activations.insert(name, x);
    }
    let pooled = ctx.g.pool2d(x, PoolMode::GlobalAvg, 1, 1)?;
    let pooled = ctx.g.reshape(pooled, &[n, spec.head.in_channels])?;
    let (w, b) = (ctx.p("head.weight")?, ctx.p("head.bias")?);
    let logits = ctx.g.dense(pooled, w, b)?;
    let logits = ctx.g.reshape(logits, &[n])?;
    let probs = ctx.g.sigmoid(logits)?;
    Ok(Trace { logits, probs, activations })
}

/// A network with concrete single-precision weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: BTreeMap<String, Tensor<f32>>,
    stats: StatsMap<f32>,
    activations: BTreeMap<String, Tensor<f32>>,
}

impl Network {
    /// He-initialized conv and dense weights (normal, std `sqrt(2 / fan_in)`),
    /// zero biases, batchnorm gamma 1 and beta 0, running mean 0 and var 1.
    pub fn build<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self, ModelError> {
        let layout = spec.param_layout()?;
        let mut params = BTreeMap::new();
        for (name, shape) in layout {
            let t = if name.ends_with(".gamma") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
            };
            params.insert(name, t);
        }
        let stats = spec.batchnorm_layout()?.into_iter().map(|(n, c)| (n, RunningStats::new(c))).collect();
        Ok(Self { spec, params, stats, activations: BTreeMap::new() })
    }

    pub fn from_seed(spec: NetworkSpec, seed: u64) -> Result<Self, ModelError> {
        Self::build(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Assembles a network from stored tensors, checking every name and
    /// shape against the spec. The first discrepancy (in name order) is reported.
    pub fn from_parts(
        spec: NetworkSpec,
        params: BTreeMap<String, Tensor<f32>>,
        stats: StatsMap<f32>,
    ) -> Result<Self, ModelError> {
        let expected: BTreeMap<String, Vec<usize>> = spec.param_layout()?.into_iter().collect();
        let mismatch = |name: &str, detail: String| ModelError::ParamMismatch { name: name.to_string(), detail };
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(mismatch(name, "missing from the stored parameters".into())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(mismatch(name, format!("stored shape {:?}, spec expects {shape:?}", t.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(mismatch(extra, "not part of the spec".into()));
        }
        let bn: BTreeMap<String, usize> = spec.batchnorm_layout()?.into_iter().collect();
        for (name, &c) in &bn {
            match stats.get(name) {
                Some(s) if s.mean.len() == c && s.var.len() == c => {}
                Some(_) => return Err(mismatch(name, format!("running stats not sized for {c} channels"))),
                None => return Err(mismatch(name, "running stats missing".into())),
            }
        }
        if let Some(extra) = stats.keys().find(|k| !bn.contains_key(*k)) {
            return Err(mismatch(extra, "running stats not part of the spec".into()));
        }
        Ok(Self { spec, params, stats, activations: BTreeMap::new() })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    /// Replaces one parameter; the shape must match the existing tensor.
    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<(), ModelError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::ParamMismatch { name: name.into(), detail: "no such parameter".into() })?;
        if slot.shape() != value.shape() {
            return Err(ModelError::ParamMismatch {
                name: name.into(),
                detail: format!("shape {:?}, expected {:?}", value.shape(), slot.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn running_stats(&self) -> &StatsMap<f32> {
        &self.stats
    }

    pub fn set_running_stats(&mut self, stats: StatsMap<f32>) {
        self.stats = stats;
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Block outputs cached by the last [`Network::predict`] call.
    pub fn activations(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.activations
    }

    /// Places every parameter in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> ParamVars {
        self.params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable))).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        input: Var,
        params: &ParamVars,
        stats: &mut StatsMap<f32>,
        mode: BnMode,
        opts: ForwardOptions,
    ) -> Result<Trace, ModelError> {
        forward(&self.spec, g, input, params, stats, mode, opts)
    }

    /// Eval-mode pass that leaves the network untouched; safe to call from
    /// several threads at once.
    pub fn infer(&self, images: &Tensor<f32>, opts: ForwardOptions) -> Result<Inference, ModelError> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let input = g.constant(images.clone());
        let mut stats = self.stats.clone();
        let trace = self.forward(&mut g, input, &params, &mut stats, BnMode::Eval, opts)?;
        Ok(Inference {
            logits: g.value(trace.logits).data().to_vec(),
            probs: g.value(trace.probs).data().to_vec(),
            activations: trace.activations.iter().map(|(k, &v)| (k.clone(), g.value(v).clone())).collect(),
        })
    }

    /// Eval-mode probabilities; caches the block activations.
    pub fn predict(&mut self, images: &Tensor<f32>) -> Result<Vec<f32>, ModelError> {
        let out = self.infer(images, ForwardOptions::default())?;
        self.activations = out.activations;
        Ok(out.probs)
    }
}
