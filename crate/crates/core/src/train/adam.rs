//! Adam with coupled L2 weight decay (the decay is added to the gradient
//! before the moment updates, matching the common deep-learning default).

use ndarray::ArrayD;

use crate::model::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, step: 0 }
    }
}

/// One optimizer step. Parameters with no gradient or excluded by
/// `trainable` are untouched, including their moment buffers.
pub fn adam_step(
    cfg: &AdamConfig,
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &[Option<ArrayD<f32>>],
    trainable: impl Fn(&str) -> bool,
) {
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (lr, eps, wd) = (cfg.lr as f32, cfg.eps as f32, cfg.weight_decay as f32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for id in 0..grads.len() {
        let Some(grad) = &grads[id] else { continue };
        if !trainable(store.name(id)) {
            continue;
        }
        let param = store.value_mut(id);
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn store_with(names: &[(&str, f32)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, val) in names {
            store.insert(name, ArrayD::from_elem(IxDyn(&[2, 2]), *val));
        }
        store
    }

    #[test]
    fn frozen_params_and_moments_are_bit_identical() {
        let mut store = store_with(&[("g_theta.w", 1.0), ("g_omega.w", 1.0)]);
        let mut state = AdamState::zeros_like(&store);
        let cfg = AdamConfig::new(1e-2, 1e-4);
        let grads = vec![
            Some(ArrayD::from_elem(IxDyn(&[2, 2]), 0.5f32)),
            Some(ArrayD::from_elem(IxDyn(&[2, 2]), 0.5f32)),
        ];
        let before = store.value(0).clone();
        for _ in 0..10 {
            adam_step(&cfg, &mut store, &mut state, &grads, |n| {
                !n.starts_with("g_theta.")
            });
        }
        for (a, b) in before.iter().zip(store.value(0).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(state.m[0].iter().all(|&x| x == 0.0));
        assert!(state.v[0].iter().all(|&x| x == 0.0));
        // The trainable parameter moved.
        assert!(store.value(1).iter().all(|&x| x != 1.0));
        assert!(state.m[1].iter().all(|&x| x != 0.0));
    }

    #[test]
    fn adam_descends_a_quadratic()
    {
        // Minimize (p - 3)^2 / 2 with gradient p - 3.
        let mut store = store_with(&[("p", 0.0)]);
        let mut state = AdamState::zeros_like(&store);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::new(0.1, 0.0)
        };
        for _ in 0..500 {
            let grad = store.value(0).mapv(|p| p - 3.0);
            adam_step(&cfg, &mut store, &mut state, &[Some(grad)], |_| true);
        }
        for &p in store.value(0).iter() {
            assert!((p - 3.0).abs() < 1e-2, "{p}");
        }
    }
}
