//! Random small instances of every differentiable operator.
#![allow(dead_code)]

use lungscope::tensor::{BnMode, Graph, PoolMode, Real, RunningStats, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{distinct_tensor, kink_free_tensor, random_tensor, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv,
    DepthwiseConv,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Dense,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sigmoid,
    Concat,
    ScaleChannels,
    Add,
    Bce,
    /// conv -> relu -> dense -> sigmoid -> bce
    Composite,
}

pub const ALL_OPS: [OpKind; 15] = [
    OpKind::Conv,
    OpKind::DepthwiseConv,
    OpKind::MaxPool,
    OpKind::AvgPool,
    OpKind::GlobalAvgPool,
    OpKind::Dense,
    OpKind::BatchNormTrain,
    OpKind::BatchNormEval,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Concat,
    OpKind::ScaleChannels,
    OpKind::Add,
    OpKind::Bce,
    OpKind::Composite,
];

pub struct OpCase {
    pub kind: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    /// Fixed weights turning the op output into a scalar.
    pub proj: Option<Tensor<f64>>,
    pub labels: Option<Tensor<f64>>,
    pub stride: usize,
    pub pad: usize,
    pub window: usize,
    pub groups: usize,
    pub stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn ext(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

impl OpCase {
    fn base(kind: OpKind, inputs: Vec<Tensor<f64>>) -> Self {
        Self { kind, inputs, proj: None, labels: None, stride: 1, pad: 0, window: 1, groups: 1, stats: None }
    }

    pub fn random(kind: OpKind, rng: &mut ChaCha8Rng) -> Self {
        let n = ext(rng, 1, 3);
        let c = ext(rng, 1, 4);
        let h = ext(rng, 2, 6);
        let w = ext(rng, 2, 6);
        match kind {
            OpKind::Conv | OpKind::DepthwiseConv => {
                let depthwise = kind == OpKind::DepthwiseConv;
                let c = if depthwise { ext(rng, 2, 4) } else { c };
                let o = if depthwise { c } else { ext(rng, 1, 4) };
                let groups = if depthwise { c } else { 1 };
                let kh = ext(rng, 1, 3.min(h));
                let kw = ext(rng, 1, 3.min(w));
                let pad = ext(rng, 0, 1);
                // pick a stride that divides evenly
                let stride = if (h + 2 * pad - kh).is_multiple_of(2)
                    && (w + 2 * pad - kw).is_multiple_of(2)
                    && rng.gen_bool(0.5)
                {
                    2
                } else {
                    1
                };
                let x = random_tensor(rng, &[n, c, h, w], 1.0);
                let k = random_tensor(rng, &[o, c / groups, kh, kw], 0.5);
                let b = random_tensor(rng, &[o], 0.5);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let mut case = Self::base(kind, vec![x, k, b]);
                case.proj = Some(random_tensor(rng, &[n, o, oh, ow], 1.0));
                case.stride = stride;
                case.pad = pad;
                case.groups = groups;
                case
            }
            OpKind::MaxPool | OpKind::AvgPool => {
                let window = ext(rng, 1, h.min(w).min(3));
                let stride = ext(rng, 1, 2);
                let x = if kind == OpKind::MaxPool {
                    distinct_tensor(rng, &[n, c, h, w])
                } else {
                    random_tensor(rng, &[n, c, h, w], 1.0)
                };
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut case = Self::base(kind, vec![x]);
                case.proj = Some(random_tensor(rng, &[n, c, oh, ow], 1.0));
                case.window = window;
                case.stride = stride;
                case
            }
            OpKind::GlobalAvgPool => {
                let mut case = Self::base(kind, vec![random_tensor(rng, &[n, c, h, w], 1.0)]);
                case.proj = Some(random_tensor(rng, &[n, c, 1, 1], 1.0));
                case
            }
            OpKind::Dense => {
                let f = ext(rng, 1, 6);
                let k = ext(rng, 1, 6);
                let mut case = Self::base(
                    kind,
                    vec![
                        random_tensor(rng, &[n, f], 1.0),
                        random_tensor(rng, &[f, k], 1.0),
                        random_tensor(rng, &[k], 1.0),
                    ],
                );
                case.proj = Some(random_tensor(rng, &[n, k], 1.0));
                case
            }
            OpKind::BatchNormTrain | OpKind::BatchNormEval => {
                let n = ext(rng, 2, 3);
                let x = random_tensor(rng, &[n, c, h, w], 2.0);
                let gamma = random_tensor(rng, &[c], 1.5);
                let beta = random_tensor(rng, &[c], 1.0);
                let mut case = Self::base(kind, vec![x, gamma, beta]);
                case.proj = Some(random_tensor(rng, &[n, c, h, w], 1.0));
                if kind == OpKind::BatchNormEval {
                    let mean = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
                    case.stats = Some((mean, var));
                }
                case
            }
            OpKind::Relu | OpKind::Sigmoid => {
                let x = if kind == OpKind::Relu {
                    kink_free_tensor(rng, &[n, c, h, w])
                } else {
                    random_tensor(rng, &[n, c, h, w], 3.0)
                };
                let mut case = Self::base(kind, vec![x]);
                case.proj = Some(random_tensor(rng, &[n, c, h, w], 1.0));
                case
            }
            OpKind::Concat => {
                let parts = ext(rng, 1, 3);
                let mut inputs = Vec::new();
                let mut total = 0;
                for _ in 0..parts {
                    let ci = ext(rng, 1, 4);
                    total += ci;
                    inputs.push(random_tensor(rng, &[n, ci, h, w], 1.0));
                }
                let mut case = Self::base(kind, inputs);
                case.proj = Some(random_tensor(rng, &[n, total, h, w], 1.0));
                case
            }
            OpKind::ScaleChannels => {
                let mut case =
                    Self::base(kind, vec![random_tensor(rng, &[n, c, h, w], 1.0), random_tensor(rng, &[n, c], 1.0)]);
                case.proj = Some(random_tensor(rng, &[n, c, h, w], 1.0));
                case
            }
            OpKind::Add => {
                let mut case = Self::base(
                    kind,
                    vec![random_tensor(rng, &[n, c, h, w], 1.0), random_tensor(rng, &[n, c, h, w], 1.0)],
                );
                case.proj = Some(random_tensor(rng, &[n, c, h, w], 1.0));
                case
            }
            OpKind::Bce => {
                let m = ext(rng, 1, 6);
                let p = Tensor::from_fn(vec![m], |_| rng.gen_range(0.05..0.95));
                let mut case = Self::base(kind, vec![p]);
                case.labels = Some(Tensor::from_fn(vec![m], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }));
                case
            }
            OpKind::Composite => {
                let o = ext(rng, 1, 3);
                let x = random_tensor(rng, &[n, c, h, w], 1.0);
                let k = random_tensor(rng, &[o, c, 2.min(h), 2.min(w)], 0.5);
                let b = random_tensor(rng, &[o], 0.2);
                let oh = h - 2.min(h) + 1;
                let ow = w - 2.min(w) + 1;
                let f = o * oh * ow;
                let dw = random_tensor(rng, &[f, 1], 0.5);
                let db = random_tensor(rng, &[1], 0.2);
                let mut case = Self::base(kind, vec![x, k, b, dw, db]);
                case.labels = Some(Tensor::from_fn(vec![n], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }));
                case
            }
        }
    }
}

fn cast<F: Real>(t: &Tensor<f64>) -> Tensor<F> {
    t.cast::<F>()
}

impl Objective for OpCase {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.inputs.clone()
    }

    fn build<F: Real>(&self, g: &mut Graph<F>, v: &[Var]) -> Result<Var, TensorError> {
        let out = match self.kind {
            OpKind::Conv | OpKind::DepthwiseConv => {
                g.conv2d(v[0], v[1], Some(v[2]), self.stride, self.pad, self.groups)?
            }
            OpKind::MaxPool => g.pool2d(v[0], PoolMode::Max, self.window, self.stride)?,
            OpKind::AvgPool => g.pool2d(v[0], PoolMode::Avg, self.window, self.stride)?,
            OpKind::GlobalAvgPool => g.pool2d(v[0], PoolMode::GlobalAvg, 0, 0)?,
            OpKind::Dense => g.dense(v[0], v[1], v[2])?,
            OpKind::BatchNormTrain => {
                let c = self.inputs[1].numel();
                let mut stats = RunningStats::new(c);
                g.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train, F::from_f64(1e-5))?
            }
            OpKind::BatchNormEval => {
                let (mean, var) = self.stats.clone().unwrap();
                let mut stats = RunningStats { mean, var }.cast::<F>();
                g.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Eval, F::from_f64(1e-5))?
            }
            OpKind::Relu => g.relu(v[0])?,
            OpKind::Sigmoid => g.sigmoid(v[0])?,
            OpKind::Concat => g.concat_channels(v)?,
            OpKind::ScaleChannels => g.scale_channels(v[0], v[1])?,
            OpKind::Add => g.add(v[0], v[1])?,
            OpKind::Bce => return g.bce_loss(v[0], &cast(self.labels.as_ref().unwrap())),
            OpKind::Composite => {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1)?;
                let r = g.relu(y)?;
                let shape = g.value(r).shape().to_vec();
                let flat = g.reshape(r, &[shape[0], shape[1] * shape[2] * shape[3]])?;
                let z = g.dense(flat, v[3], v[4])?;
                let p = g.sigmoid(z)?;
                return g.bce_loss(p, &cast(self.labels.as_ref().unwrap()));
            }
        };
        g.dot_const(out, &cast(self.proj.as_ref().unwrap()))
    }
}
