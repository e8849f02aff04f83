//! Whole-network objectives for finite-difference checks.
#![allow(dead_code)]

use lungscope::model::{forward, ForwardOptions, Network, NetworkSpec, ParamVars, StatsMap};
use lungscope::tensor::{BnMode, Graph, Real, RunningStats, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use super::{random_tensor, Objective};

/// BCE of a network's predictions, differentiated with respect to the input
/// batch (index 0) and every parameter (in name order after it).
pub struct NetObjective {
    pub spec: NetworkSpec,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f64>>,
    pub labels: Tensor<f64>,
    pub mode: BnMode,
}

impl NetObjective {
    pub fn new(net: &Network, images: Tensor<f64>, labels: Tensor<f64>, mode: BnMode) -> Self {
        let mut names = Vec::new();
        let mut tensors = vec![images];
        for (name, t) in net.params() {
            names.push(name.clone());
            tensors.push(t.cast::<f64>());
        }
        Self { spec: net.spec().clone(), names, tensors, labels, mode }
    }

    /// A seeded network on a random batch of `n` images with alternating labels.
    /// Biases and batchnorm affine terms are randomized so no path starts
    /// from an exactly-symmetric point.
    pub fn random(spec: NetworkSpec, n: usize, rng: &mut ChaCha8Rng, seed: u64) -> Self {
        let mut net = Network::from_seed(spec.clone(), seed).expect("preset builds");
        let names: Vec<String> = net.params().keys().cloned().collect();
        for name in names {
            let shape = net.param(&name).unwrap().shape().to_vec();
            let jitter = random_tensor(rng, &shape, 0.2).cast::<f32>();
            if name.ends_with(".gamma") {
                let t = Tensor::from_fn(shape, |i| 1.0 + jitter.data()[i]);
                net.set_param(&name, t).unwrap();
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                net.set_param(&name, jitter).unwrap();
            }
        }
        let [c, h, w] = spec.input_shape;
        let images = random_tensor(rng, &[n, c, h, w], 1.0);
        let labels = Tensor::from_fn(vec![n], |i| (i % 2) as f64);
        Self::new(&net, images, labels, BnMode::Train)
    }
}

impl Objective for NetObjective {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.tensors.clone()
    }

    fn build<F: Real>(&self, g: &mut Graph<F>, leaves: &[Var]) -> Result<Var, TensorError> {
        let params: ParamVars = self.names.iter().cloned().zip(leaves[1..].iter().copied()).collect();
        let mut stats: StatsMap<F> = self
            .spec
            .batchnorm_layout()
            .expect("valid spec")
            .into_iter()
            .map(|(n, c)| (n, RunningStats::new(c)))
            .collect();
        let trace = forward(&self.spec, g, leaves[0], &params, &mut stats, self.mode, ForwardOptions::default())
            .expect("network forward");
        g.bce_loss(trace.probs, &self.labels.cast::<F>())
    }
}
