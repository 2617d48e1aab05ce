//! Scene-level semantic calibration and refinement: flatten/unflatten,
//! rotation calibration of semantic vectors, aggregation, global-local
//! concatenation, residual cross-attention refinement, and the central loss.

use crate::geometry::RotationMatrix;
use crate::graph::{ParamStore, Tape, Tensor, Var};
use crate::nn::Attention;
use crate::{Error, Result};

/// Reshapes a length-C vector into the columns of a 3 x (C/3) matrix:
/// column `j` is the consecutive triplet `(s[3j], s[3j+1], s[3j+2])`.
pub fn unflatten(s: &[f64]) -> Result<Vec<[f64; 3]>> {
    if s.len() % 3 != 0 || s.is_empty() {
        return Err(Error::argument(format!(
            "semantic length {} is not divisible by 3",
            s.len()
        )));
    }
    Ok(s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Exact inverse of [`unflatten`].
pub fn flatten(columns: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(columns.len() * 3);
    for c in columns {
        out.extend_from_slice(c);
    }
    out
}

/// Rotates every unflattened column by `t`: `flatten(T · unflatten(s))`.
/// Orthogonality of `t` preserves the Euclidean norm of `s`.
pub fn calibrate(s: &[f64], t: &RotationMatrix) -> Result<Vec<f64>> {
    if s.len() % 3 != 0 || s.is_empty() {
        return Err(Error::argument(format!(
            "semantic length {} is not divisible by 3",
            s.len()
        )));
    }
    let m = t.matrix();
    let mut out = vec![0.0; s.len()];
    for j in 0..s.len() / 3 {
        for r in 0..3 {
            out[3 * j + r] = m[(r, 0)] * s[3 * j]
                + m[(r, 1)] * s[3 * j + 1]
                + m[(r, 2)] * s[3 * j + 2];
        }
    }
    Ok(out)
}

/// Tape version of [`calibrate`] for the differentiable pipeline.
pub fn calibrate_graph(tape: &mut Tape, s: Var, t: &RotationMatrix) -> Var {
    let m = t.matrix();
    let rows = [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ];
    tape.rot3_blocks(s, rows)
}

fn mean_of(per_view: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = per_view.len();
    if n == 0 {
        return Err(Error::argument("cannot aggregate zero semantic vectors"));
    }
    let dim = per_view[0].len();
    if per_view.iter().any(|v| v.len() != dim) {
        return Err(Error::argument("semantic vectors differ in length"));
    }
    let mut out = vec![0.0; dim];
    for v in per_view {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// Arithmetic mean of calibrated per-view semantics.
pub fn aggregate_calibrated(per_view: &[Vec<f64>]) -> Result<Vec<f64>> {
    mean_of(per_view)
}

/// Arithmetic mean of raw per-view semantics (the no-calibration path).
pub fn aggregate_uncalibrated(per_view: &[Vec<f64>]) -> Result<Vec<f64>> {
    mean_of(per_view)
}

/// Concatenation with the pixel part first: indices `[0, L)` hold the fused
/// pixel feature, `[L, L+C)` the semantic vector.
pub fn concat_global_local(fused_pixel: &[f64], semantic: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(fused_pixel.len() + semantic.len());
    out.extend_from_slice(fused_pixel);
    out.extend_from_slice(semantic);
    out
}

/// Mean L1 distance of each per-view vector to the aggregate. Zero exactly
/// when all per-view vectors are equal.
pub fn central_loss(per_view: &[Vec<f64>], aggregate: &[f64]) -> Result<f64> {
    if per_view.is_empty() {
        return Err(Error::argument("central loss needs at least one view"));
    }
    if per_view.iter().any(|v| v.len() != aggregate.len()) {
        return Err(Error::argument("central loss dimension mismatch"));
    }
    let mut total = 0.0;
    for v in per_view {
        total += v
            .iter()
            .zip(aggregate)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total / per_view.len() as f64)
}

/// Calibrated per-view semantics with their mean, kept consistent by
/// construction.
#[derive(Debug, Clone)]
pub struct CalibratedSemantic {
    per_view: Vec<Vec<f64>>,
    aggregate: Vec<f64>,
}

impl CalibratedSemantic {
    pub fn new(per_view: Vec<Vec<f64>>) -> Result<CalibratedSemantic> {
        let aggregate = aggregate_calibrated(&per_view)?;
        Ok(CalibratedSemantic {
            per_view,
            aggregate,
        })
    }

    pub fn per_view(&self) -> &[Vec<f64>] {
        &self.per_view
    }

    pub fn aggregate(&self) -> &[f64] {
        &self.aggregate
    }

    pub fn central_loss(&self) -> f64 {
        central_loss(&self.per_view, &self.aggregate).expect("consistent by construction")
    }
}

/// One residual refinement block: cross-attention from the running scene
/// vector into the uncalibrated per-view semantics, plus output projection.
#[derive(Debug, Clone, Copy)]
pub struct RefineBlock {
    pub attn: Attention,
}

impl RefineBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: crate::graph::ParamGroup,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> RefineBlock {
        RefineBlock {
            attn: Attention::init(store, name, dim, dim, dim, heads, group, rng),
        }
    }

    /// Residual update on the tape: `current + W_o · MHA(current, originals)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        current: Var,
        originals: Var,
    ) -> Var {
        let delta = self.attn.forward(tape, store, current, originals, None);
        tape.add(current, delta)
    }
}

/// The per-stage refinement chain: `stages - 1` independent blocks.
#[derive(Debug, Clone)]
pub struct RefinementBlocks {
    pub blocks: Vec<RefineBlock>,
    pub dim: usize,
}

impl RefinementBlocks {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        stages: usize,
        group: crate::graph::ParamGroup,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> RefinementBlocks {
        let blocks = (0..stages.saturating_sub(1))
            .map(|k| RefineBlock::init(store, &format!("{name}.block{k}"), dim, heads, group, rng))
            .collect();
        RefinementBlocks { blocks, dim }
    }

    /// Emits the per-stage semantic vars `[S^(0), S^(1), ..., S^(stages-1)]`
    /// on the tape, chaining the residual blocks.
    pub fn forward_chain(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        initial: Var,
        originals: Var,
        stages: usize,
    ) -> Vec<Var> {
        assert!(stages >= 1 && stages <= self.blocks.len() + 1);
        let mut out = Vec::with_capacity(stages);
        let mut current = initial;
        out.push(current);
        for block in self.blocks.iter().take(stages - 1) {
            current = block.forward(tape, store, current, originals);
            out.push(current);
        }
        out
    }
}

/// Refinement progress: the running scene vector at stage `k` together
/// with the immutable per-view originals.
#[derive(Debug, Clone)]
pub struct RefinementState<'a> {
    pub stage: usize,
    pub current: Vec<f64>,
    pub originals: &'a [Vec<f64>],
    blocks: &'a RefinementBlocks,
    store: &'a ParamStore,
}

impl<'a> RefinementState<'a> {
    pub fn new(
        initial: Vec<f64>,
        originals: &'a [Vec<f64>],
        blocks: &'a RefinementBlocks,
        store: &'a ParamStore,
    ) -> Result<RefinementState<'a>> {
        if originals.is_empty() {
            return Err(Error::argument("refinement needs at least one view"));
        }
        if initial.len() != blocks.dim || originals.iter().any(|v| v.len() != blocks.dim) {
            return Err(Error::argument("refinement dimension mismatch"));
        }
        if !initial.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("refinement state is non-finite"));
        }
        Ok(RefinementState {
            stage: 0,
            current: initial,
            originals,
            blocks,
            store,
        })
    }
}

/// Advances one refinement stage. Errors with a state error once all
/// blocks are consumed.
pub fn refine_step(state: RefinementState) -> Result<RefinementState> {
    let k = state.stage;
    if k >= state.blocks.blocks.len() {
        return Err(Error::state(format!(
            "refinement stage overflow: stage {k} has no block (only {} stages of refinement)",
            state.blocks.blocks.len()
        )));
    }
    let mut tape = Tape::new(false);
    let current = tape.input(Tensor::matrix(1, state.blocks.dim, state.current.clone()));
    let origin_rows: Vec<f64> = state.originals.iter().flatten().copied().collect();
    let originals = tape.leaf(Tensor::matrix(
        state.originals.len(),
        state.blocks.dim,
        origin_rows,
    ));
    let next = state.blocks.blocks[k].forward(&mut tape, state.store, current, originals);
    let current = tape.value(next).to_vec();
    if !current.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite semantic after refinement stage {k}"
        )));
    }
    Ok(RefinementState {
        stage: k + 1,
        current,
        originals: state.originals,
        blocks: state.blocks,
        store: state.store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamGroup;
    use crate::testing::random_rotation;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn unflatten_forms_columns_from_triplets() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let cols = unflatten(&s).unwrap();
        assert_eq!(cols, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(flatten(&cols), s.to_vec());
    }

    #[test]
    fn unflatten_rejects_non_multiple_of_three() {
        assert!(matches!(unflatten(&[0.0; 7]), Err(Error::Argument(_))));
        assert!(matches!(calibrate(&[0.0; 7], &RotationMatrix::identity()), Err(Error::Argument(_))));
    }

    #[test]
    fn flatten_unflatten_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(flatten(&unflatten(&s).unwrap()), s);
        }
    }

    #[test]
    fn identity_calibration_is_identity() {
        let s = [0.3, -0.7, 1.1, 0.0, 2.0, -3.0];
        let out = calibrate(&s, &RotationMatrix::identity()).unwrap();
        assert_eq!(out, s.to_vec());
    }

    #[test]
    fn quarter_turn_rotates_basis_triplets() {
        let s = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let out = calibrate(&s, &RotationMatrix::rot_z(FRAC_PI_2)).unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, e) in out.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn calibration_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = random_rotation(&mut rng);
            let out = calibrate(&s, &t).unwrap();
            let n0: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-6);
        }
    }

    #[test]
    fn calibration_composes_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t1 = random_rotation(&mut rng);
            let t2 = random_rotation(&mut rng);
            let twice = calibrate(&calibrate(&s, &t1).unwrap(), &t2).unwrap();
            let once = calibrate(&s, &t2.compose(&t1)).unwrap();
            for (a, b) in twice.iter().zip(&once) {
                assert!((a - b).abs() < 1e-6);
            }
            let back = calibrate(&calibrate(&s, &t1).unwrap(), &t1.transpose()).unwrap();
            for (a, b) in back.iter().zip(&s) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn aggregation_examples_and_permutation_invariance() {
        let single = vec![vec![1.0, 2.0]];
        assert_eq!(aggregate_calibrated(&single).unwrap(), vec![1.0, 2.0]);
        let pair = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        assert_eq!(aggregate_calibrated(&pair).unwrap(), vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let views: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut shuffled = views.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        assert_eq!(
            aggregate_uncalibrated(&views).unwrap(),
            aggregate_uncalibrated(&shuffled).unwrap()
        );
        assert!(aggregate_calibrated(&[]).is_err());
    }

    #[test]
    fn concat_layout_and_length() {
        assert_eq!(
            concat_global_local(&[1.0, 2.0], &[3.0, 4.0, 5.0]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
        let tail = concat_global_local(&[1.0; 4], &[0.0; 3]);
        assert!(tail[4..].iter().all(|&v| v == 0.0));
        assert_eq!(concat_global_local(&[0.0; 64], &[0.0; 96]).len(), 160);
    }

    #[test]
    fn central_loss_examples() {
        assert_eq!(
            central_loss(&[vec![0.4, 0.5]], &[0.4, 0.5]).unwrap(),
            0.0
        );
        let loss = central_loss(&[vec![1.0, 1.0], vec![3.0, 3.0]], &[2.0, 2.0]).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
        let same = vec![vec![0.2, -0.1]; 5];
        let cs = CalibratedSemantic::new(same).unwrap();
        assert_eq!(cs.central_loss(), 0.0);
        assert!(central_loss(&[], &[]).is_err());
    }

    #[test]
    fn central_loss_zero_iff_all_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let base: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut views = vec![base.clone(); 3];
            let cs = CalibratedSemantic::new(views.clone()).unwrap();
            assert_eq!(cs.central_loss(), 0.0);
            // Perturb one entry: loss must become strictly positive.
            views[1][2] += 0.5;
            let cs = CalibratedSemantic::new(views).unwrap();
            assert!(cs.central_loss() > 0.0);
        }
    }

    fn refinement_fixture(
        dim: usize,
        heads: usize,
        stages: usize,
        seed: u64,
    ) -> (ParamStore, RefinementBlocks) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks = RefinementBlocks::init(
            &mut store,
            "refine",
            dim,
            heads,
            stages,
            ParamGroup::Renderer,
            &mut rng,
        );
        (store, blocks)
    }

    #[test]
    fn zero_output_projection_freezes_refinement() {
        let (mut store, blocks) = refinement_fixture(6, 2, 3, 10);
        let wo = blocks.blocks[0].attn.wo.w;
        for v in store.value_mut(wo).data_mut() {
            *v = 0.0;
        }
        let originals = vec![vec![0.5; 6], vec![-0.25; 6]];
        let initial = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let state = RefinementState::new(initial.clone(), &originals, &blocks, &store).unwrap();
        let next = refine_step(state).unwrap();
        assert_eq!(next.stage, 1);
        assert_eq!(next.current, initial);
        assert_eq!(next.originals, &originals[..]);
    }

    #[test]
    fn single_view_identity_value_path_adds_original() {
        let (mut store, blocks) = refinement_fixture(6, 2, 2, 11);
        let block = &blocks.blocks[0];
        // Identity-equivalent value and output projections, zero biases.
        for (pid, eye) in [(block.attn.wv.w, true), (block.attn.wo.w, true)] {
            let data = store.value_mut(pid).data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                let (r, c) = (i / 6, i % 6);
                *v = if eye && r == c { 1.0 } else { 0.0 };
            }
        }
        let originals = vec![vec![0.9, -0.3, 0.1, 0.4, 0.0, -1.2]];
        let initial = vec![0.05; 6];
        let state = RefinementState::new(initial.clone(), &originals, &blocks, &store).unwrap();
        let next = refine_step(state).unwrap();
        for i in 0..6 {
            assert!((next.current[i] - (initial[i] + originals[0][i])).abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_overflow_is_a_state_error() {
        let (store, blocks) = refinement_fixture(6, 2, 2, 12);
        let originals = vec![vec![0.0; 6]];
        let state = RefinementState::new(vec![0.0; 6], &originals, &blocks, &store).unwrap();
        let state = refine_step(state).unwrap();
        assert!(matches!(refine_step(state), Err(Error::State(_))));
    }

    #[test]
    fn refine_step_is_deterministic() {
        let (store, blocks) = refinement_fixture(9, 3, 4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let originals: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let initial: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut state =
                RefinementState::new(initial.clone(), &originals, &blocks, &store).unwrap();
            for _ in 0..3 {
                state = refine_step(state).unwrap();
            }
            state.current
        };
        assert_eq!(run(), run());
    }
}
