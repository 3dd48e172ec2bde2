use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateRule {
    /// `p -= lr * g`
    Plain,
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state over the trainable parameters of one store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub rule: UpdateRule,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    step: u64,
}

impl Optimizer {
    pub fn new(learning_rate: f64, rule: UpdateRule) -> Self {
        Self {
            learning_rate,
            rule,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(learning_rate, UpdateRule::default())
    }

    pub fn plain(learning_rate: f64) -> Self {
        Self::new(learning_rate, UpdateRule::Plain)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears all
    /// gradient accumulators.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let trainable = store.trainable_ids();
        if let Some(&missing) = trainable.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::MissingGrad(store.get(missing).name.clone()));
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let lr = self.learning_rate;
        for id in trainable {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            match self.rule {
                UpdateRule::Plain => {
                    values.iter_mut().zip(&grad).for_each(|(v, g)| *v -= lr * g);
                }
                UpdateRule::Adam { beta1, beta2, eps } => {
                    let m = self.first[id.index()].get_or_insert_with(|| vec![0.0; grad.len()]);
                    let v = self.second[id.index()].get_or_insert_with(|| vec![0.0; grad.len()]);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for i in 0..grad.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        values[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn plain_step_matches_hand_value() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0]), true).unwrap();
        store.accumulate_grad(id, &[2.0]);
        let mut opt = Optimizer::plain(0.1);
        opt.step(&mut store).unwrap();
        assert!((store.value(id).data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps)
        for &g in &[3.0, -0.25, 1e-3] {
            let mut store = ParamStore::new();
            let id = store.add("p", Tensor::vector(vec![0.0]), true).unwrap();
            store.accumulate_grad(id, &[g]);
            let mut opt = Optimizer::adam(1e-3);
            opt.step(&mut store).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_param_untouched() {
        let mut store = ParamStore::new();
        let frozen = store.add("f", Tensor::vector(vec![0.3, -0.7]), false).unwrap();
        let live = store.add("t", Tensor::vector(vec![0.0]), true).unwrap();
        let before = store.value(frozen).clone();
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..100 {
            store.accumulate_grad(frozen, &[5.0, 5.0]);
            store.accumulate_grad(live, &[1.0]);
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(frozen).data(), before.data());
        assert_eq!(opt.steps(), 100);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::new();
        store.add("t", Tensor::vector(vec![0.0]), true).unwrap();
        let err = Optimizer::plain(0.1).step(&mut store).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(name) if name == "t"));
    }
}
