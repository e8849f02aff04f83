//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod net;
pub mod ops;
pub mod oracles;

use lungscope::tensor::{Graph, Real, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A scalar function of several tensors, expressible at any precision.
pub trait Objective {
    fn inputs(&self) -> Vec<Tensor<f64>>;
    fn build<F: Real>(&self, g: &mut Graph<F>, leaves: &[Var]) -> Result<Var, TensorError>;
}

pub struct GradCheck {
    /// Central-difference step (5-point stencil, so the sampled span is ±2·step).
    pub step: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-3, max_coords: None, seed: 0 }
    }
}

fn eval_f64<O: Objective>(obj: &O, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = obj.build(&mut g, &leaves).expect("objective forward");
    g.value(out).item()
}

fn analytic<O: Objective, F: Real>(obj: &O, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::<F>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.cast::<F>())).collect();
    let out = obj.build(&mut g, &leaves).expect("objective forward");
    g.backward(out).expect("backward");
    leaves.iter().map(|&v| g.grad(v).expect("leaf grad").iter().map(|x| x.to_f64()).collect()).collect()
}

/// Gradient norms below this are compared absolutely: a dead path has an
/// exactly-zero analytic gradient while its finite difference is roundoff.
pub const NORM_FLOOR: f64 = 1e-4;

/// Normwise relative error `|a - b| / max(|a|, |b|, NORM_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

impl GradCheck {
    /// Worst relative error over all inputs between backward at precision
    /// `F` and central differences of the f64 forward pass. The base point
    /// is first rounded to `F` so both sides see identical inputs.
    pub fn run<O: Objective, F: Real>(&self, obj: &O) -> f64 {
        self.run_each::<O, F>(obj).into_iter().fold(0.0, f64::max)
    }

    /// Relative error per input tensor.
    pub fn run_each<O: Objective, F: Real>(&self, obj: &O) -> Vec<f64> {
        self.compare::<O, F>(obj).iter().map(|(an, fd)| rel_err(an, fd)).collect()
    }

    /// Normwise relative error of the whole gradient, every sampled
    /// coordinate of every input stacked into one vector.
    pub fn run_global<O: Objective, F: Real>(&self, obj: &O) -> f64 {
        let (an, fd): (Vec<Vec<f64>>, Vec<Vec<f64>>) = self.compare::<O, F>(obj).into_iter().unzip();
        rel_err(&an.concat(), &fd.concat())
    }

    /// (analytic, finite-difference) values at the sampled coordinates of
    /// each input.
    fn compare<O: Objective, F: Real>(&self, obj: &O) -> Vec<(Vec<f64>, Vec<f64>)> {
        let base: Vec<Tensor<f64>> = obj.inputs().iter().map(|t| t.cast::<F>().cast::<f64>()).collect();
        let grads = analytic::<O, F>(obj, &base);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(base.len());
        for (li, t) in base.iter().enumerate() {
            let n = t.numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            let mut fd = Vec::with_capacity(coords.len());
            let mut an = Vec::with_capacity(coords.len());
            for &c in &coords {
                let mut inputs = base.clone();
                let orig = inputs[li].data()[c];
                let mut at = |offset: f64| {
                    inputs[li].data_mut()[c] = orig + offset;
                    eval_f64(obj, &inputs)
                };
                let h = self.step;
                // fourth-order central stencil
                let d = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                fd.push(d);
                an.push(grads[li][c]);
            }
            out.push((an, fd));
        }
        out
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Values bounded away from zero so relu kinks are never straddled by the
/// finite-difference step.
pub fn kink_free_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Values whose pairwise gaps exceed the finite-difference step, so the
/// max-pooling winner never changes under perturbation.
pub fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.01 - n as f64 * 0.005)
}
