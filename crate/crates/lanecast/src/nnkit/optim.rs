//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::store::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers, allocated lazily per parameter.
#[derive(Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl AdamW {
    /// One update over every trainable parameter. A parameter without a
    /// gradient entry is treated as having a zero gradient: its moments decay
    /// and weight decay still applies. Frozen parameters are never touched.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) {
        state.step += 1;
        let t = state.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let shape = store.tensor(&name).expect("listed above").shape().to_vec();
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(&name);
            let p = store.tensor_mut(&name).expect("listed above");
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                let update = self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64);
                let decayed = p.data()[i] as f64 * (1.0 - self.lr as f64 * self.weight_decay as f64);
                p.data_mut()[i] = (decayed - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: Vec<f32>, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(vals), trainable).unwrap();
        s
    }

    #[test]
    fn hand_computed_first_step() {
        // p = 1, g = 1, lr = 0.1, no decay: mhat = vhat = 1 after bias
        // correction, so p' = 1 - 0.1 / (1 + 1e-8).
        let mut store = store_with("p", vec![1.0], true);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::from_vec(vec![1.0]));
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::new();
        opt.step(&mut store, &grads, &mut state);
        let got = store.tensor("p").unwrap().data()[0];
        let want = 1.0 - 0.1f64 / (1.0 + 1e-8);
        // moments are stored in f32, so agreement is to f32 rounding
        assert!((got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn zero_gradient_still_applies_decoupled_decay() {
        let mut store = store_with("p", vec![2.0], true);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        let mut state = AdamState::new();
        opt.step(&mut store, &Gradients::new(), &mut state);
        let got = store.tensor("p").unwrap().data()[0];
        assert_eq!(got, 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = store_with("p", vec![1.0], false);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::from_vec(vec![5.0]));
        let opt = AdamW::default();
        let mut state = AdamState::new();
        for _ in 0..3 {
            opt.step(&mut store, &grads, &mut state);
        }
        assert_eq!(store.tensor("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn moments_persist_across_steps() {
        // Two steps with the same gradient move farther than one: momentum
        // accumulates rather than resetting.
        let mut store = store_with("p", vec![0.0], true);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::from_vec(vec![1.0]));
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::new();
        opt.step(&mut store, &grads, &mut state);
        let after_one = store.tensor("p").unwrap().data()[0];
        opt.step(&mut store, &grads, &mut state);
        let after_two = store.tensor("p").unwrap().data()[0];
        assert!(after_two < after_one && after_one < 0.0);
        assert_eq!(state.step_count(), 2);
    }
}
