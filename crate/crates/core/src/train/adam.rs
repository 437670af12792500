use std::collections::BTreeMap;

use segsr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    /// Number of steps taken.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self { hyper, ..Default::default() }
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step<'g>(
        &mut self,
        params: &mut ParamStore,
        grads: impl IntoIterator<Item = (&'g str, &'g Tensor)>,
        lr: f64,
    ) {
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            if !params.param(name).kind.trainable() {
                continue;
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = params.get_mut(name);
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", &[3], ParamKind::Weight { fan_in: 1, fan_out: 1 });
        s.register("rm", &[3], ParamKind::RunningMean);
        s.set("w", Tensor::new([3], vec![1.0, -2.0, 0.5])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::default();
        adam.step(&mut s, [("w", &Tensor::zeros([3]))], 1e-3);
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let mut adam = Adam::default();
        adam.step(&mut s, [("w", &Tensor::new([3], vec![0.3, -4.0, 1e-3]))], 0.01);
        let got = s.get("w").data();
        let want = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (g, w) in got.iter().zip(want) {
            // m̂ / sqrt(v̂) = g / |g| on the first step, up to eps
            assert!((g - w).abs() < 1e-7, "{got:?}");
        }
    }

    #[test]
    fn matches_hand_rolled_two_steps() {
        let mut s = store();
        let mut adam = Adam::default();
        let (g1, g2) = (0.2, -0.1);
        adam.step(&mut s, [("w", &Tensor::full([3], g1))], 0.1);
        adam.step(&mut s, [("w", &Tensor::full([3], g2))], 0.1);
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let p1 = 1.0 - 0.1 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let p2 = p1 - 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((s.get("w").data()[0] - p2).abs() < 1e-12);
    }

    #[test]
    fn running_statistics_are_not_optimized() {
        let mut s = store();
        let mut adam = Adam::default();
        adam.step(&mut s, [("rm", &Tensor::ones([3]))], 0.1);
        assert_eq!(s.get("rm"), &Tensor::zeros([3]));
        assert!(adam.m.is_empty());
    }
}
