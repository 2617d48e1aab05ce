//! Photometric, central, and point-wise perceptual losses with their
//! weighted total.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Shape, Tape, Tensor, Var};
use crate::scene::Image;
use crate::{Error, Result};

/// Mean squared error over a batch of RGB triples.
pub fn mse_loss(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::argument(format!(
            "mse shapes differ: {} vs {} pixels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for c in 0..3 {
            let d = p[c] - t[c];
            total += d * d;
        }
    }
    Ok(total / (pred.len() * 3) as f64)
}

/// Gradient of [`mse_loss`] with respect to the predictions.
pub fn mse_grad(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let scale = 2.0 / (pred.len().max(1) * 3) as f64;
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            [
                scale * (p[0] - t[0]),
                scale * (p[1] - t[1]),
                scale * (p[2] - t[2]),
            ]
        })
        .collect()
}

/// Per-step loss components; `total` always satisfies the weighted-sum
/// identity by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub central: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub fn total_loss(
    mse: f64,
    central: f64,
    perceptual: f64,
    lambda_central: f64,
    lambda_perceptual: f64,
) -> LossBreakdown {
    LossBreakdown {
        mse,
        central,
        perceptual,
        total: mse + lambda_central * central + lambda_perceptual * perceptual,
    }
}

struct FeatureConv {
    w: Tensor,
    b: Tensor,
    stride: usize,
}

/// Fixed, seeded three-level convolutional pyramid used as the perceptual
/// feature extractor. Never trained; deterministic from its seed.
pub struct FeatureNet {
    layers: Vec<FeatureConv>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> FeatureNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(3usize, 8usize, 1usize), (8, 16, 2), (16, 16, 2)];
        let layers = dims
            .iter()
            .map(|&(ci, co, stride)| {
                let fan_in = ci * 9;
                let a = (3.0 / fan_in as f64).sqrt();
                let w = Tensor::new(
                    Shape::d4(co, ci, 3, 3),
                    (0..co * ci * 9).map(|_| rng.gen_range(-a..a)).collect(),
                );
                let b = Tensor::new(
                    Shape::d1(co),
                    (0..co).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                );
                FeatureConv { w, b, stride }
            })
            .collect();
        FeatureNet { layers }
    }

    /// Activations after every level for a `[3,H,W]` input var.
    pub fn forward_graph(&self, tape: &mut Tape, x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(self.layers.len());
        let mut x = x;
        for layer in &self.layers {
            let w = tape.leaf(layer.w.clone());
            let b = tape.leaf(layer.b.clone());
            let padded = tape.pad_reflect(x, 1);
            let conv = tape.conv2d(padded, w, b, layer.stride);
            x = tape.silu(conv);
            levels.push(x);
        }
        levels
    }
}

fn image_rows(image: &Image) -> Tensor {
    Tensor::matrix(image.width * image.height, 3, image.data().to_vec())
}

fn check_positions(positions: &[(usize, usize)], image: &Image) -> Result<Vec<usize>> {
    positions
        .iter()
        .map(|&(u, v)| {
            if u >= image.width || v >= image.height {
                Err(Error::argument(format!(
                    "perceptual position ({u}, {v}) outside {}x{} image",
                    image.width, image.height
                )))
            } else {
                Ok(v * image.width + u)
            }
        })
        .collect()
}

/// Records the point-wise perceptual loss on a tape: the ground-truth
/// image with `pred` in-painted at `positions` is compared to the original
/// across all pyramid levels. Gradients reach only the predictions.
pub fn perceptual_loss_graph(
    tape: &mut Tape,
    pred: Var,
    positions: &[(usize, usize)],
    truth: &Image,
    net: &FeatureNet,
) -> Result<Var> {
    let rows = check_positions(positions, truth)?;
    let base = image_rows(truth);
    let inpainted = tape.scatter_rows_into(pred, base.clone(), rows);
    let inpaint_chw = tape.chw_from_rows(inpainted, truth.height, truth.width);
    let truth_leaf = tape.leaf(base);
    let truth_chw = tape.chw_from_rows(truth_leaf, truth.height, truth.width);
    let levels_pred = net.forward_graph(tape, inpaint_chw);
    let levels_truth = net.forward_graph(tape, truth_chw);
    let mut acc: Option<Var> = None;
    let count = levels_pred.len();
    for (a, b) in levels_pred.into_iter().zip(levels_truth) {
        let diff = tape.sub(a, b);
        let sq = tape.mul(diff, diff);
        let mean = tape.mean_all(sq);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, mean),
            None => mean,
        });
    }
    let total = acc.expect("feature net has levels");
    Ok(tape.affine(total, 1.0 / count as f64, 0.0))
}

/// Inference-mode perceptual loss.
pub fn perceptual_loss(
    pred: &[[f64; 3]],
    positions: &[(usize, usize)],
    truth: &Image,
    net: &FeatureNet,
) -> Result<f64> {
    if pred.len() != positions.len() {
        return Err(Error::argument("one prediction per position required"));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new(false);
    let pred_var = tape.leaf(Tensor::matrix(
        pred.len(),
        3,
        pred.iter().flatten().copied().collect(),
    ));
    let loss = perceptual_loss_graph(&mut tape, pred_var, positions, truth, net)?;
    Ok(tape.value(loss).item())
}

/// Perceptual loss plus its gradient with respect to the predictions.
pub fn perceptual_loss_and_grad(
    pred: &[[f64; 3]],
    positions: &[(usize, usize)],
    truth: &Image,
    net: &FeatureNet,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.len() != positions.len() {
        return Err(Error::argument("one prediction per position required"));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let store = crate::graph::ParamStore::new();
    let mut grads = crate::graph::GradStore::new(&store);
    let mut tape = Tape::new(true);
    let pred_var = tape.input(Tensor::matrix(
        pred.len(),
        3,
        pred.iter().flatten().copied().collect(),
    ));
    let loss = perceptual_loss_graph(&mut tape, pred_var, positions, truth, net)?;
    let value = tape.value(loss).item();
    let mut node_grads = tape.backward(&[(loss, vec![1.0])], &mut grads);
    let flat = node_grads.take(pred_var, pred.len() * 3);
    let grad = flat
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GradStore, ParamStore};

    fn test_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Image::new(w, h);
        for v in image.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        image
    }

    #[test]
    fn mse_examples() {
        let a = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]).collect();
        assert!((mse_loss(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
        assert!(mse_loss(&a, &b[..1].to_vec()).is_err());
    }

    #[test]
    fn total_loss_identity_and_defaults() {
        let b = total_loss(0.5, 0.0, 0.0, 1.0, 0.001);
        assert_eq!(b.total, 0.5);
        let b = total_loss(0.5, 0.25, 100.0, 1.0, 0.001);
        assert!((b.total - (0.5 + 0.25 + 0.1)).abs() < 1e-12);
        let b = total_loss(0.5, 0.25, 100.0, 0.0, 0.0);
        assert_eq!(b.total, 0.5);
    }

    #[test]
    fn perfect_predictions_give_zero_perceptual_loss() {
        let image = test_image(1, 12, 10);
        let net = FeatureNet::new(7);
        let positions = vec![(3, 4), (0, 0), (11, 9)];
        let pred: Vec<[f64; 3]> = positions.iter().map(|&(u, v)| image.pixel(u, v)).collect();
        let loss = perceptual_loss(&pred, &positions, &image, &net).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, grad) = perceptual_loss_and_grad(&pred, &positions, &image, &net).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.len(), 3);
    }

    #[test]
    fn empty_batch_is_zero() {
        let image = test_image(2, 8, 8);
        let net = FeatureNet::new(7);
        assert_eq!(perceptual_loss(&[], &[], &image, &net).unwrap(), 0.0);
    }

    #[test]
    fn out_of_bounds_position_is_an_argument_error() {
        let image = test_image(3, 8, 8);
        let net = FeatureNet::new(7);
        assert!(matches!(
            perceptual_loss(&[[0.0; 3]], &[(8, 0)], &image, &net),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gradient_is_zero_exactly_at_unrendered_pixels() {
        // Probe: expose every pixel as a differentiable input, in-paint only
        // a subset, and check the loss gradient is supported on the subset.
        let image = test_image(4, 9, 7);
        let net = FeatureNet::new(9);
        let positions = vec![(2, 3), (5, 5), (8, 0)];
        let rendered: Vec<usize> = positions.iter().map(|&(u, v)| v * 9 + u).collect();

        let store = ParamStore::new();
        let mut grads = GradStore::new(&store);
        let mut tape = Tape::new(true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let all_pixels = Tensor::matrix(
            63,
            3,
            (0..63 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let all_var = tape.input(all_pixels);
        let picked = tape.gather_rows(all_var, rendered.clone());
        let loss = perceptual_loss_graph(&mut tape, picked, &positions, &image, &net).unwrap();
        let mut node_grads = tape.backward(&[(loss, vec![1.0])], &mut grads);
        let g = node_grads.take(all_var, 63 * 3);
        for p in 0..63 {
            let in_batch = rendered.contains(&p);
            let triple = &g[p * 3..p * 3 + 3];
            if in_batch {
                assert!(
                    triple.iter().any(|v| v.abs() > 0.0),
                    "rendered pixel {p} has all-zero gradient"
                );
            } else {
                assert!(
                    triple.iter().all(|v| *v == 0.0),
                    "unrendered pixel {p} leaked gradient {triple:?}"
                );
            }
        }
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let image = test_image(5, 8, 6);
        let net = FeatureNet::new(13);
        let positions = vec![(1, 1), (6, 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pred: Vec<[f64; 3]> = (0..2)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let (_, analytic) = perceptual_loss_and_grad(&pred, &positions, &image, &net).unwrap();
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..pred.len() {
            for c in 0..3 {
                let mut plus = pred.clone();
                plus[i][c] += eps;
                let mut minus = pred.clone();
                minus[i][c] -= eps;
                let fp = perceptual_loss(&plus, &positions, &image, &net).unwrap();
                let fm = perceptual_loss(&minus, &positions, &image, &net).unwrap();
                let numeric = (fp - fm) / (2.0 * eps);
                let denom = analytic[i][c].abs().max(numeric.abs()).max(1e-4);
                max_rel = max_rel.max((analytic[i][c] - numeric).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel:.3e}");
    }
}
