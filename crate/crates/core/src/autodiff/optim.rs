use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, Graph, Tensor, Var};

/// Named parameter tensors. Ordered, so iteration and serialization are
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"));
    }

    /// Places every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), graph.leaf(t.clone())))
            .collect()
    }

    /// Collects the gradient of each bound parameter; parameters off the loss
    /// path get zeros.
    pub fn collect_grads(
        &self,
        vars: &BTreeMap<String, Var>,
        grads: &Gradients,
    ) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let g = vars
                    .get(k)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), AutodiffError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| AutodiffError::ShapeMismatch(format!("unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "{name}: parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grad(1.0)).unwrap();
        let want = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("w").unwrap().item() - want).abs() < 1e-18);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.25);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut p = single(0.3);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01));
            for i in 0..50 {
                adam.step(&mut p, &grad((i as f64 * 0.7).sin())).unwrap();
            }
            p.get("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam.step(&mut p, &bad).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
