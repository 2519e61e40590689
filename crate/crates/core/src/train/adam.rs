//! Adam over the flat parameter list in visit order. Frozen parameters get
//! no moment state at all, so freezing is inert by construction.

use std::collections::BTreeSet;

use crate::model::{ModelParams, ParamGroup};
use crate::tensor::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.98;
pub const EPS: f32 = 1e-9;

pub struct Adam {
    /// One slot per parameter in visit order; None for frozen parameters.
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &ModelParams<Tensor<f32>>, frozen: &BTreeSet<ParamGroup>) -> Self {
        let mut moments = Vec::new();
        params.visit(&mut |_, group, t| {
            moments.push(if frozen.contains(&group) {
                None
            } else {
                Some((vec![0.0; t.len()], vec![0.0; t.len()]))
            });
        });
        Adam { moments, steps: 0 }
    }

    /// Apply one update. `grads` must be the leaf gradients in visit order;
    /// frozen slots are skipped without touching parameter bytes.
    pub fn step(&mut self, params: &mut ModelParams<Tensor<f32>>, grads: &[Vec<f32>], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = lr as f32;
        let mut i = 0usize;
        params.visit_mut(&mut |_, _, tensor| {
            if let Some((m, v)) = &mut self.moments[i] {
                let g = &grads[i];
                debug_assert_eq!(g.len(), tensor.len());
                let data = tensor.data_mut();
                for j in 0..data.len() {
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= lr * mhat / (vhat.sqrt() + EPS);
                }
            }
            i += 1;
        });
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn frozen_groups_have_no_state_and_never_move() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::<Tensor<f32>>::init(&cfg, 1);
        let before = params.named_leaves().iter().map(|(_, _, t)| (*t).clone()).collect::<Vec<_>>();

        let frozen: BTreeSet<ParamGroup> =
            [ParamGroup::Decoder, ParamGroup::DecoderCrossAttn].into_iter().collect();
        let mut adam = Adam::new(&params, &frozen);
        let none_for_frozen = {
            let mut i = 0;
            let mut ok = true;
            params.visit(&mut |_, g, _| {
                let has_state = adam.moments[i].is_some();
                if frozen.contains(&g) && has_state {
                    ok = false;
                }
                if !frozen.contains(&g) && !has_state {
                    ok = false;
                }
                i += 1;
            });
            ok
        };
        assert!(none_for_frozen);

        let grads: Vec<Vec<f32>> = params
            .named_leaves()
            .iter()
            .map(|(_, _, t)| vec![0.5; t.len()])
            .collect();
        adam.step(&mut params, &grads, 1e-2);

        let mut i = 0;
        params.visit(&mut |name, g, t| {
            let same = t.data() == before[i].data();
            if frozen.contains(&g) {
                assert!(same, "frozen {name} moved");
            } else {
                assert!(!same, "unfrozen {name} did not move");
            }
            i += 1;
        });
    }
}
