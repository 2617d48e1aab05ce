//! Parameterized building blocks: linear layers, layer norm, feed-forward,
//! and multi-head attention, all recorded on a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::graph::{ParamGroup, ParamId, ParamStore, Shape, Tape, Var};

/// Dense layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = store.add_uniform(
            format!("{name}.w"),
            Shape::d2(in_dim, out_dim),
            in_dim,
            group,
            rng,
        );
        let b = store.add_zeros(format!("{name}.b"), Shape::d1(out_dim), group);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> LayerNorm {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), Shape::d1(dim), 1.0, group),
            bias: store.add_zeros(format!("{name}.bias"), Shape::d1(dim), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let gain = tape.param(store, self.gain);
        let bias = tape.param(store, self.bias);
        tape.layer_norm(x, gain, bias, 1e-6)
    }
}

/// Activation used inside a two-layer MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

/// Two dense layers with an activation between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        Mlp {
            l1: Linear::init(store, &format!("{name}.l1"), in_dim, hidden, group, rng),
            l2: Linear::init(store, &format!("{name}.l2"), hidden, out_dim, group, rng),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = match self.activation {
            Activation::Silu => tape.silu(h),
            Activation::Relu => tape.relu(h),
        };
        self.l2.forward(tape, store, h)
    }
}

/// Multi-head attention with separate query and key/value input widths,
/// projections included. A `false` mask entry removes that key everywhere.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Attention {
        assert!(dim % heads == 0, "attention dim must divide by heads");
        Attention {
            wq: Linear::init(store, &format!("{name}.wq"), q_in, dim, group, rng),
            wk: Linear::init(store, &format!("{name}.wk"), kv_in, dim, group, rng),
            wv: Linear::init(store, &format!("{name}.wv"), kv_in, dim, group, rng),
            wo: Linear::init(store, &format!("{name}.wo"), dim, dim, group, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mask: Option<Vec<bool>>,
    ) -> Var {
        let q = self.wq.forward(tape, store, q_in);
        let k = self.wk.forward(tape, store, kv_in);
        let v = self.wv.forward(tape, store, kv_in);
        let attended = tape.mha(q, k, v, self.heads, mask);
        self.wo.forward(tape, store, attended)
    }
}

/// Sinusoidal positional features of a slice of coordinates.
pub fn positional_encoding(values: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 2 * freqs);
    for &v in values {
        let mut angle = v * std::f64::consts::PI;
        for _ in 0..freqs {
            out.push(angle.sin());
            out.push(angle.cos());
            angle *= 2.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GradStore, Tensor};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn linear_applies_weights_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "lin", 2, 3, ParamGroup::Renderer, &mut rng);
        let mut tape = Tape::new(false);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let y = lin.forward(&mut tape, &store, x);
        let w = store.value(lin.w).data().to_vec();
        let expect: Vec<f64> = (0..3).map(|j| w[j] + 2.0 * w[3 + j]).collect();
        for (a, e) in tape.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_over_single_key_returns_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = Attention::init(&mut store, "a", 4, 4, 4, 2, ParamGroup::Renderer, &mut rng);
        let kv_data: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q_data: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new(false);
        let q = tape.leaf(Tensor::matrix(1, 4, q_data));
        let kv = tape.leaf(Tensor::matrix(1, 4, kv_data.clone()));
        let out = attn.forward(&mut tape, &store, q, kv, None);

        // Softmax over one token is 1, so the output is wo(wv(kv)).
        let mut tape2 = Tape::new(false);
        let kv2 = tape2.leaf(Tensor::matrix(1, 4, kv_data));
        let v = attn.wv.forward(&mut tape2, &store, kv2);
        let expect = attn.wo.forward(&mut tape2, &store, v);
        for (a, e) in tape.value(out).data().iter().zip(tape2.value(expect).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_gradcheck_through_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(
            &mut store,
            "m",
            3,
            4,
            2,
            Activation::Silu,
            ParamGroup::Renderer,
            &mut rng,
        );
        let x = Tensor::matrix(2, 3, (0..6).map(|i| 0.3 * i as f64 - 0.7).collect());

        let run = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new(false);
            let xv = tape.leaf(x.clone());
            let y = mlp.forward(&mut tape, store, xv);
            let sq = tape.mul(y, y);
            let loss = tape.sum_all(sq);
            tape.value(loss).item()
        };

        let mut grads = GradStore::new(&store);
        let mut tape = Tape::new(true);
        let xv = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, &store, xv);
        let sq = tape.mul(y, y);
        let loss = tape.sum_all(sq);
        tape.backward(&[(loss, vec![1.0])], &mut grads);

        let eps = 1e-5;
        for (pid, entry) in store.clone().iter() {
            let analytic = grads.get(pid).unwrap().to_vec();
            for i in 0..entry.value.len() {
                let mut perturbed = store.clone();
                perturbed.value_mut(pid).data_mut()[i] += eps;
                let plus = run(&perturbed);
                perturbed.value_mut(pid).data_mut()[i] -= 2.0 * eps;
                let minus = run(&perturbed);
                let numeric = (plus - minus) / (2.0 * eps);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-6,
                    "param {} entry {i}",
                    entry.name
                );
            }
        }
    }

    #[test]
    fn positional_encoding_dims_and_values() {
        let enc = positional_encoding(&[0.5], 3);
        assert_eq!(enc.len(), 6);
        let half_pi = std::f64::consts::FRAC_PI_2;
        assert!((enc[0] - half_pi.sin()).abs() < 1e-12);
        assert!((enc[1] - half_pi.cos()).abs() < 1e-12);
        assert!((enc[2] - (2.0 * half_pi).sin()).abs() < 1e-12);
    }
}
