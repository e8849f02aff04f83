use std::collections::BTreeMap;

use super::{TrainConfig, TrainError};
use crate::tensor::Tensor;

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &BTreeMap<String, Tensor<f32>>) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update over every parameter that has a gradient.
///
/// Gradients are checked before anything is touched, so a non-finite or
/// misshapen gradient leaves parameters and state unchanged.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return Err(TrainError::GradientShape { param: name.clone(), detail: "no such parameter".into() });
        };
        if p.numel() != g.len() {
            return Err(TrainError::GradientShape {
                param: name.clone(),
                detail: format!("{} gradient values for {} parameters", g.len(), p.numel()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above").data_mut();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p[i] = (p[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![w]).unwrap())])
    }

    #[test]
    fn one_step_on_square_loss() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        let g = BTreeMap::from([("w".to_string(), vec![2.0f32])]);
        adam_step(&mut p, &g, &mut s, 1e-4, &TrainConfig::default()).unwrap();
        let want = 1.0 - 1e-4 * (2.0 / (2.0 + 1e-8));
        assert!((p["w"].data()[0] as f64 - want).abs() < 1e-7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_and_zero_lr() {
        let cfg = TrainConfig::default();
        let mut p = scalar(0.25);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &BTreeMap::from([("w".to_string(), vec![0.0])]), &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(p["w"].data()[0], 0.25);
        assert_eq!(s.t, 1);

        adam_step(&mut p, &BTreeMap::from([("w".to_string(), vec![3.0])]), &mut s, 0.0, &cfg).unwrap();
        assert_eq!(p["w"].data()[0], 0.25);
        assert!(s.m["w"][0] > 0.0 && s.v["w"][0] > 0.0);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        let g = BTreeMap::from([("w".to_string(), vec![f32::NAN])]);
        match adam_step(&mut p, &g, &mut s, 1e-3, &TrainConfig::default()) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.t, 0);
        assert_eq!(p["w"].data()[0], 1.0);
    }
}
