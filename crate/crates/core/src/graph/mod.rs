//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Small by design: only the ops the rendering pipeline needs, each with a
//! hand-written adjoint, validated against central finite differences in
//! the test suite.

mod params;
mod tape;
mod tensor;

pub use params::{GradStore, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tape::{NodeGrads, Precision, Tape, Var};
pub use tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Shape, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check: builds the graph twice per perturbed entry.
    /// `f` must map a fresh tape plus the leaf input var to a scalar var.
    fn check_input_grad<F>(input: Tensor, f: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let store = ParamStore::new();
        let mut grads = GradStore::new(&store);
        let mut tape = Tape::new(true);
        let x = tape.input(input.clone());
        let y = f(&mut tape, x);
        assert_eq!(tape.value(y).len(), 1, "loss must be scalar");
        let mut node_grads = tape.backward(&[(y, vec![1.0])], &mut grads);
        let analytic = node_grads.take(x, input.len());

        let eps = 1e-5;
        for i in 0..input.len() {
            let mut eval = |delta: f64| {
                let mut data = input.to_vec();
                data[i] += delta;
                let mut t = Tape::new(false);
                let xv = t.input(Tensor::new(input.shape(), data));
                let yv = f(&mut t, xv);
                t.value(yv).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel < tol,
                "entry {i}: analytic {} vs numeric {} (rel {rel:.3e})",
                analytic[i],
                numeric
            );
        }
    }

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(Shape::d2(3, 4), &mut rng);
        let b = rand_tensor(Shape::d2(4, 2), &mut rng);
        check_input_grad(a.clone(), |t, x| {
            let bv = t.leaf(b.clone());
            let y = t.matmul(x, bv);
            t.mean_all(y)
        }, 1e-6);
        let a2 = a.clone();
        check_input_grad(b, |t, x| {
            let av = t.leaf(a2.clone());
            let y = t.matmul(av, x);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn elementwise_and_activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(Shape::d2(2, 5), &mut rng);
        let w = rand_tensor(Shape::d2(2, 5), &mut rng);
        let wc = w.clone();
        check_input_grad(x.clone(), move |t, v| {
            let wv = t.leaf(wc.clone());
            let s = t.silu(v);
            let m = t.mul(s, wv);
            let sg = t.sigmoid(m);
            let ab = t.abs(sg);
            t.mean_all(ab)
        }, 1e-5);
        check_input_grad(x, |t, v| {
            let a = t.affine(v, -1.7, 0.3);
            let r = t.relu(a);
            t.sum_all(r)
        }, 1e-5);
    }

    #[test]
    fn softmax_layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(Shape::d2(3, 4), &mut rng);
        let gain = rand_tensor(Shape::d1(4), &mut rng);
        let bias = rand_tensor(Shape::d1(4), &mut rng);
        let (g2, b2) = (gain.clone(), bias.clone());
        check_input_grad(x.clone(), move |t, v| {
            let s = t.softmax_rows(v);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-6);
        check_input_grad(x.clone(), move |t, v| {
            let gv = t.leaf(g2.clone());
            let bv = t.leaf(b2.clone());
            let y = t.layer_norm(v, gv, bv, 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
        let xc = x.clone();
        check_input_grad(gain, move |t, v| {
            let xv = t.leaf(xc.clone());
            let bv = t.leaf(bias.clone());
            let y = t.layer_norm(xv, v, bv, 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn mha_grads_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(Shape::d2(2, 6), &mut rng);
        let k = rand_tensor(Shape::d2(4, 6), &mut rng);
        let v = rand_tensor(Shape::d2(4, 6), &mut rng);
        let mask = Some(vec![true, false, true, true]);
        let (kc, vc, mc) = (k.clone(), v.clone(), mask.clone());
        check_input_grad(q.clone(), move |t, x| {
            let kv = t.leaf(kc.clone());
            let vv = t.leaf(vc.clone());
            let o = t.mha(x, kv, vv, 2, mc.clone());
            let sq = t.mul(o, o);
            t.sum_all(sq)
        }, 1e-5);
        let (qc, vc2, mc2) = (q.clone(), v.clone(), mask.clone());
        check_input_grad(k.clone(), move |t, x| {
            let qv = t.leaf(qc.clone());
            let vv = t.leaf(vc2.clone());
            let o = t.mha(qv, x, vv, 2, mc2.clone());
            let sq = t.mul(o, o);
            t.sum_all(sq)
        }, 1e-5);
        let qc2 = q.clone();
        check_input_grad(v, move |t, x| {
            let qv = t.leaf(qc2.clone());
            let kv = t.leaf(k.clone());
            let o = t.mha(qv, kv, x, 2, mask.clone());
            let sq = t.mul(o, o);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn conv_pad_pool_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(Shape::d3(2, 5, 6), &mut rng);
        let w = rand_tensor(Shape::d4(3, 2, 3, 3), &mut rng);
        let b = rand_tensor(Shape::d1(3), &mut rng);
        let (wc, bc) = (w.clone(), b.clone());
        check_input_grad(x.clone(), move |t, v| {
            let wv = t.leaf(wc.clone());
            let bv = t.leaf(bc.clone());
            let p = t.pad_reflect(v, 1);
            let c = t.conv2d(p, wv, bv, 2);
            let m = t.channel_mean(c);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        }, 1e-5);
        let xc = x.clone();
        check_input_grad(w, move |t, v| {
            let xv = t.leaf(xc.clone());
            let bv = t.leaf(b.clone());
            let p = t.pad_reflect(xv, 1);
            let c = t.conv2d(p, v, bv, 1);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(Shape::d2(4, 3), &mut rng);
        check_input_grad(x.clone(), |t, v| {
            let a = t.slice_rows(v, 1, 2);
            let b = t.slice_cols(a, 0, 2);
            let c = t.transpose(b);
            let d = t.concat_cols(&[c, c]);
            let e = t.concat_rows(&[d, d]);
            let m = t.mean_rows(e);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        }, 1e-6);
        check_input_grad(x.clone(), |t, v| {
            let row = t.slice_rows(v, 0, 1);
            let rep = t.repeat_rows(row, 5);
            let sq = t.mul(rep, rep);
            t.mean_all(sq)
        }, 1e-6);
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        check_input_grad(rand_tensor(Shape::d1(6), &mut rng), move |t, v| {
            let r = t.rot3_blocks(v, rot);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn gather_scatter_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fmap = rand_tensor(Shape::d3(3, 4, 5), &mut rng);
        let pts = vec![(1.3, 2.7, true), (0.0, 0.0, true), (2.0, 1.5, false)];
        check_input_grad(fmap, move |t, v| {
            let s = t.bilinear_gather(v, pts.clone());
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-6);

        let x = rand_tensor(Shape::d2(3, 2), &mut rng);
        let base = rand_tensor(Shape::d2(6, 2), &mut rng);
        check_input_grad(x, move |t, v| {
            let scattered = t.scatter_rows_into(v, base.clone(), vec![4, 0, 2]);
            let picked = t.gather_rows(scattered, vec![0, 2, 3, 4]);
            let sq = t.mul(picked, picked);
            t.sum_all(sq)
        }, 1e-6);

        let rows = rand_tensor(Shape::d2(12, 3), &mut rng);
        check_input_grad(rows, move |t, v| {
            let chw = t.chw_from_rows(v, 3, 4);
            let m = t.channel_mean(chw);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grouped_mha_matches_per_group_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (groups, n, d, heads) = (3usize, 2usize, 4usize, 2usize);
        let q = rand_tensor(Shape::d2(groups, d), &mut rng);
        let k = rand_tensor(Shape::d2(groups * n, d), &mut rng);
        let v = rand_tensor(Shape::d2(groups * n, d), &mut rng);
        let mask = vec![true, false, true, true, true, true];

        // Value parity: each group equals a standalone masked attention.
        let mut tape = Tape::new(false);
        let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
        let grouped = tape.grouped_mha(qv, kv, vv, heads, mask.clone());
        for i in 0..groups {
            let mut t = Tape::new(false);
            let qi = t.leaf(Tensor::matrix(1, d, q.data()[i * d..(i + 1) * d].to_vec()));
            let rows: Vec<f64> = (0..n)
                .flat_map(|j| k.data()[(j * groups + i) * d..(j * groups + i + 1) * d].to_vec())
                .collect();
            let ki = t.leaf(Tensor::matrix(n, d, rows));
            let rows: Vec<f64> = (0..n)
                .flat_map(|j| v.data()[(j * groups + i) * d..(j * groups + i + 1) * d].to_vec())
                .collect();
            let vi = t.leaf(Tensor::matrix(n, d, rows));
            let gmask: Vec<bool> = (0..n).map(|j| mask[j * groups + i]).collect();
            let single = t.mha(qi, ki, vi, heads, Some(gmask));
            for c in 0..d {
                let a = tape.value(grouped).data()[i * d + c];
                let b = t.value(single).data()[c];
                assert!((a - b).abs() < 1e-12, "group {i} col {c}: {a} vs {b}");
            }
        }

        // Gradients against finite differences, all three inputs.
        let (kc, vc, mc) = (k.clone(), v.clone(), mask.clone());
        check_input_grad(q.clone(), move |t, x| {
            let kv = t.leaf(kc.clone());
            let vv = t.leaf(vc.clone());
            let o = t.grouped_mha(x, kv, vv, heads, mc.clone());
            let sq = t.mul(o, o);
            t.sum_all(sq)
        }, 1e-5);
        let (qc, vc2, mc2) = (q.clone(), v.clone(), mask.clone());
        check_input_grad(k, move |t, x| {
            let qv = t.leaf(qc.clone());
            let vv = t.leaf(vc2.clone());
            let o = t.grouped_mha(qv, x, vv, heads, mc2.clone());
            let sq = t.mul(o, o);
            t.sum_all(sq)
        }, 1e-5);
        check_input_grad(v, move |t, x| {
            let qv = t.leaf(q.clone());
            let kv = t.leaf(Tensor::matrix(groups * n, d, vec![0.3; groups * n * d]));
            let o = t.grouped_mha(qv, kv, x, heads, mask.clone());
            let sq = t.mul(o, o);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn param_grads_accumulate_across_tapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let w = store.add_uniform("w", Shape::d2(3, 3), 3, ParamGroup::Renderer, &mut rng);
        let mut grads = GradStore::new(&store);
        for i in 0..4 {
            let mut tape = Tape::new(true);
            let wv = tape.param(&store, w);
            let x = tape.leaf(Tensor::matrix(1, 3, vec![i as f64, 1.0, -1.0]));
            let y = tape.matmul(x, wv);
            let loss = tape.sum_all(y);
            tape.backward(&[(loss, vec![1.0])], &mut grads);
        }
        // d/dW of sum(x·W) accumulated over the four x rows.
        let g = grads.get(w).unwrap();
        let expect_col0 = 0.0 + 1.0 + 2.0 + 3.0;
        assert_eq!(g[0], expect_col0);
        assert_eq!(g[3], 4.0);
        assert_eq!(g[6], -4.0);
    }

    #[test]
    fn scatter_keeps_base_rows_out_of_gradient() {
        let store = ParamStore::new();
        let mut grads = GradStore::new(&store);
        let mut tape = Tape::new(true);
        let pred = tape.input(Tensor::matrix(1, 2, vec![0.3, 0.4]));
        let base = Tensor::matrix(3, 2, vec![1.0; 6]);
        let scattered = tape.scatter_rows_into(pred, base, vec![1]);
        let loss = tape.sum_all(scattered);
        let mut node_grads = tape.backward(&[(loss, vec![1.0])], &mut grads);
        assert_eq!(node_grads.take(pred, 2), vec![1.0, 1.0]);
    }
}
