//! Adam with two learning-rate groups (encoder vs. everything else).

use crate::graph::{GradStore, ParamGroup, ParamStore};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        Adam {
            m: store.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect(),
            v: store.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect(),
            t: 0,
        }
    }

    /// One update over every parameter that accumulated a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradStore,
        lr_encoder: f64,
        lr_rest: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.group)).collect();
        for (id, group) in ids {
            let Some(grad) = grads.get(id) else { continue };
            let lr = match group {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::Renderer => lr_rest,
            };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ParamGroup, Shape, Tensor};

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add(
            "w",
            Tensor::new(Shape::d1(3), vec![1.0, -2.0, 3.0]),
            ParamGroup::Renderer,
        );
        let mut grads = GradStore::new(&store);
        grads.accumulate(id, &[0.5, 0.5, 0.5]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, 0.0, 0.0);
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut store = ParamStore::new();
        let enc = store.add("e", Tensor::new(Shape::d1(1), vec![0.0]), ParamGroup::Encoder);
        let ren = store.add("r", Tensor::new(Shape::d1(1), vec![0.0]), ParamGroup::Renderer);
        let mut grads = GradStore::new(&store);
        grads.accumulate(enc, &[1.0]);
        grads.accumulate(ren, &[1.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, 0.01, 0.001);
        // First Adam step moves by ~lr regardless of gradient magnitude.
        assert!((store.value(enc).data()[0] + 0.01).abs() < 1e-6);
        assert!((store.value(ren).data()[0] + 0.001).abs() < 1e-6);
    }
}
