use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with bias correction and linear learning-rate warmup.
#[derive(Clone, Debug)]
pub struct Adam {
    pub base_lr: f64,
    pub warmup_steps: u64,
    step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, base_lr: f64, warmup_steps: u64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { base_lr, warmup_steps: warmup_steps.max(1), step_count: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Learning rate for the given (1-based) step.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first[id.index()]
    }

    /// Applies one update. `grads` must hold an entry for every parameter
    /// of `store`, indexed by [`ParamId`].
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for id in store.ids() {
            if grads[id.index()].is_none() {
                return Err(Error::Invalid(format!("missing gradient for parameter {:?}", store.name(id))));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let lr = self.lr_at(self.step_count);
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for id in store.ids() {
            let g = grads[id.index()].as_ref().unwrap();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g.data()[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g.data()[k] * g.data()[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Grads { slots: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            match &mut self.slots[id.index()] {
                Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (slot, g) in self.slots.iter_mut().zip(other.slots) {
            if let Some(g) = g {
                match slot {
                    Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Zero-fills parameters that received no gradient (e.g. frozen branches).
    pub fn into_complete(mut self, store: &ParamStore) -> Vec<Option<Tensor>> {
        for id in store.ids() {
            if self.slots[id.index()].is_none() {
                self.slots[id.index()] = Some(Tensor::zeros(store.value(id).shape()));
            }
        }
        self.slots
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.index()].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(vec![0.3, -1.2]);
        let before = s.clone();
        let mut adam = Adam::new(&s, 1e-3, 10);
        for _ in 0..5 {
            adam.step(&mut s, &[Some(Tensor::zeros(&[2]))]).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn warmup_first_step() {
        let adam = Adam::new(&store(vec![0.0]), 0.001, 100);
        assert!((adam.lr_at(1) - 0.001 / 100.0).abs() < 1e-18);
        assert_eq!(adam.lr_at(100), 0.001);
        assert_eq!(adam.lr_at(1000), 0.001);
    }

    #[test]
    fn first_step_moves_by_warmup_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        let mut s = store(vec![1.0]);
        let mut adam = Adam::new(&s, 0.001, 100);
        adam.step(&mut s, &[Some(Tensor::vector(vec![2.0]))]).unwrap();
        let moved = 1.0 - s.value(ParamId::first()).data()[0];
        assert!((moved - 1e-5 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let mut s = store(vec![0.0, 0.0]);
        let mut adam = Adam::new(&s, 0.01, 1);
        let g = Tensor::vector(vec![0.37, -4.0]);
        let mut last = s.value(ParamId::first()).clone();
        let mut delta = vec![0.0; 2];
        for _ in 0..2000 {
            adam.step(&mut s, &[Some(g.clone())]).unwrap();
            let now = s.value(ParamId::first()).clone();
            delta = now.data().iter().zip(last.data()).map(|(a, b)| a - b).collect();
            last = now;
        }
        assert!((delta[0] + 0.01).abs() < 1e-8, "{delta:?}");
        assert!((delta[1] - 0.01).abs() < 1e-8, "{delta:?}");
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store(vec![1.0]);
        let mut adam = Adam::new(&s, 1e-3, 1);
        let err = adam.step(&mut s, &[None]).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }
}
