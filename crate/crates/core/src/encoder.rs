//! Shared convolutional encoder: per-view pixel feature maps at a fixed
//! stride plus a global semantic vector from pooled bottleneck features,
//! with continuous bilinear feature lookup.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{ParamGroup, ParamId, ParamStore, Shape, Tape, Tensor, Var};
use crate::nn::Linear;
use crate::scene::Image;
use crate::{Error, Result};

/// Encoder hyperparameters. `semantic_dim` must be divisible by 3 whenever
/// the rotation-calibration path is active (the unflattened matrix has
/// three rows); `validate` takes that requirement as a flag so ablation
/// variants without calibration may use other lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub pixel_feature_dim: usize,
    pub semantic_dim: usize,
    pub downsample_stages: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            pixel_feature_dim: 64,
            semantic_dim: 96,
            downsample_stages: 3,
            base_channels: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Construction-time validation; requires the calibration-ready
    /// divisibility constraint.
    pub fn new(
        pixel_feature_dim: usize,
        semantic_dim: usize,
        downsample_stages: usize,
        base_channels: usize,
        seed: u64,
    ) -> Result<EncoderConfig> {
        let config = EncoderConfig {
            pixel_feature_dim,
            semantic_dim,
            downsample_stages,
            base_channels,
            seed,
        };
        config.validate(true)?;
        Ok(config)
    }

    pub fn validate(&self, requires_calibration: bool) -> Result<()> {
        if self.pixel_feature_dim == 0 {
            return Err(Error::config("pixel feature dim must be at least 1"));
        }
        if self.semantic_dim == 0 {
            return Err(Error::config("semantic dim must be at least 1"));
        }
        if self.downsample_stages == 0 {
            return Err(Error::config("need at least one downsample stage"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base channels must be at least 1"));
        }
        if requires_calibration && self.semantic_dim % 3 != 0 {
            return Err(Error::config(format!(
                "semantic dim {} must be divisible by 3 for rotation calibration",
                self.semantic_dim
            )));
        }
        Ok(())
    }

    /// Feature-grid stride relative to image pixels.
    pub fn stride(&self) -> usize {
        1 << self.downsample_stages
    }
}

/// Strided grid of per-pixel features, stored `[L, H', W']`.
#[derive(Debug, Clone)]
pub struct PixelFeatureMap {
    pub grid: Tensor,
    pub stride: usize,
}

impl PixelFeatureMap {
    pub fn channels(&self) -> usize {
        self.grid.shape().dim(0)
    }
    pub fn grid_height(&self) -> usize {
        self.grid.shape().dim(1)
    }
    pub fn grid_width(&self) -> usize {
        self.grid.shape().dim(2)
    }

    /// Image pixel coordinates to feature-grid coordinates plus the
    /// in-grid validity flag.
    pub fn feature_coords(&self, u: f64, v: f64) -> (f64, f64, bool) {
        let x = u / self.stride as f64;
        let y = v / self.stride as f64;
        let valid = x >= 0.0
            && y >= 0.0
            && x <= (self.grid_width() - 1) as f64
            && y <= (self.grid_height() - 1) as f64;
        (x, y, valid)
    }
}

/// Length-C global semantic descriptor of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    pub values: Vec<f64>,
}

/// Channelwise arithmetic mean over all spatial positions of a `[D,H,W]`
/// grid.
pub fn global_average_pool(grid: &Tensor) -> Result<Vec<f64>> {
    if grid.shape().ndim() != 3 {
        return Err(Error::argument("global_average_pool expects a [D,H,W] grid"));
    }
    let (d, h, w) = (
        grid.shape().dim(0),
        grid.shape().dim(1),
        grid.shape().dim(2),
    );
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::argument("global_average_pool on an empty grid"));
    }
    let hw = h * w;
    Ok((0..d)
        .map(|c| grid.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

/// Bilinear feature lookup at continuous image coordinates. Returns a zero
/// vector with `valid = false` outside the feature grid.
pub fn sample_pixel_feature(fmap: &PixelFeatureMap, u: f64, v: f64) -> (Vec<f64>, bool) {
    let (x, y, valid) = fmap.feature_coords(u, v);
    let l = fmap.channels();
    if !valid {
        return (vec![0.0; l], false);
    }
    let mut tape = Tape::new(false);
    let grid = tape.leaf(fmap.grid.clone());
    let out = tape.bilinear_gather(grid, vec![(x, y, true)]);
    (tape.value(out).to_vec(), true)
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvLayer {
    fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvLayer {
        let w = store.add_uniform(
            format!("{name}.w"),
            Shape::d4(c_out, c_in, kernel, kernel),
            c_in * kernel * kernel,
            ParamGroup::Encoder,
            rng,
        );
        let b = store.add_zeros(format!("{name}.b"), Shape::d1(c_out), ParamGroup::Encoder);
        ConvLayer { w, b, stride }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, pad: usize) -> Var {
        let x = if pad > 0 { tape.pad_reflect(x, pad) } else { x };
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride)
    }
}

/// Tape handles produced by one encoder pass.
pub struct EncodeVars {
    /// `[L, H', W']` pixel feature grid.
    pub fmap: Var,
    /// `[C_bottleneck, H', W']` grid feeding the pooled semantic path.
    pub bottleneck: Var,
    /// `[1, C]` semantic vector.
    pub semantic: Var,
}

/// The shared CNN encoder; parameters live in the crate-wide store under
/// the encoder learning-rate group.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    blocks: Vec<(ConvLayer, ConvLayer)>,
    pixel_proj: ConvLayer,
    fc: Linear,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, config: EncoderConfig) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.downsample_stages);
        let mut c_in = 3;
        for i in 0..config.downsample_stages {
            let c_out = config.base_channels << i;
            let conv1 = ConvLayer::init(
                store,
                &format!("encoder.block{i}.conv1"),
                c_in,
                c_out,
                3,
                1,
                &mut rng,
            );
            let conv2 = ConvLayer::init(
                store,
                &format!("encoder.block{i}.conv2"),
                c_out,
                c_out,
                3,
                2,
                &mut rng,
            );
            blocks.push((conv1, conv2));
            c_in = c_out;
        }
        let pixel_proj = ConvLayer::init(
            store,
            "encoder.pixel_proj",
            c_in,
            config.pixel_feature_dim,
            1,
            1,
            &mut rng,
        );
        let fc = Linear::init(
            store,
            "encoder.fc",
            c_in,
            config.semantic_dim,
            ParamGroup::Encoder,
            &mut rng,
        );
        Encoder {
            config,
            blocks,
            pixel_proj,
            fc,
        }
    }

    /// Records the encoder forward pass for an image already on the tape
    /// as a `[3,H,W]` var.
    pub fn encode_graph(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> EncodeVars {
        let mut x = image;
        for (conv1, conv2) in &self.blocks {
            x = conv1.forward(tape, store, x, 1);
            x = tape.silu(x);
            x = conv2.forward(tape, store, x, 1);
            x = tape.silu(x);
        }
        let bottleneck = x;
        let fmap = self.pixel_proj.forward(tape, store, bottleneck, 0);
        let pooled = tape.channel_mean(bottleneck);
        let semantic = self.fc.forward(tape, store, pooled);
        EncodeVars {
            fmap,
            bottleneck,
            semantic,
        }
    }

    /// Loads an image onto the tape as a constant `[3,H,W]` var.
    pub fn image_leaf(tape: &mut Tape, image: &Image) -> Var {
        let (w, h) = (image.width, image.height);
        let mut chw = vec![0.0; 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                chw[c * w * h + p] = image.data()[p * 3 + c];
            }
        }
        tape.leaf(Tensor::new(Shape::d3(3, h, w), chw))
    }

    /// Inference-mode encoding of one image.
    pub fn encode(
        &self,
        store: &ParamStore,
        image: &Image,
    ) -> Result<(PixelFeatureMap, SemanticVector)> {
        if !image.data().iter().all(|v| v.is_finite()) {
            return Err(Error::argument("image has non-finite values"));
        }
        let mut tape = Tape::new(false);
        let leaf = Self::image_leaf(&mut tape, image);
        let vars = self.encode_graph(&mut tape, store, leaf);
        let fmap = PixelFeatureMap {
            grid: tape.value(vars.fmap).clone(),
            stride: self.config.stride(),
        };
        let semantic = SemanticVector {
            values: tape.value(vars.semantic).to_vec(),
        };
        Ok((fmap, semantic))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GradStore;
    use rand::Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            pixel_feature_dim: 3,
            semantic_dim: 6,
            downsample_stages: 2,
            base_channels: 2,
            seed: 7,
        }
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Image::new(w, h);
        for v in image.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        image
    }

    #[test]
    fn config_enforces_divisibility_only_for_calibration() {
        assert!(EncoderConfig::new(8, 32, 2, 4, 0).is_err());
        let config = EncoderConfig {
            semantic_dim: 32,
            ..EncoderConfig::default()
        };
        assert!(config.validate(false).is_ok());
        assert!(config.validate(true).is_err());
        assert!(EncoderConfig::new(8, 33, 2, 4, 0).is_ok());
    }

    #[test]
    fn default_semantic_length_is_96_and_grid_is_ceil_divided() {
        let config = EncoderConfig::default();
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, config);
        let image = noise_image(37, 21, 1);
        let (fmap, semantic) = encoder.encode(&store, &image).unwrap();
        assert_eq!(semantic.values.len(), 96);
        assert_eq!(fmap.stride, 8);
        assert_eq!(fmap.grid_width(), 37usize.div_ceil(8));
        assert_eq!(fmap.grid_height(), 21usize.div_ceil(8));
        assert_eq!(fmap.channels(), 64);
        assert!(fmap.grid.all_finite());
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, tiny_config());
        let image = noise_image(12, 9, 2);
        let (fa, sa) = encoder.encode(&store, &image).unwrap();
        let (fb, sb) = encoder.encode(&store, &image).unwrap();
        assert_eq!(fa.grid.data(), fb.grid.data());
        assert_eq!(sa.values, sb.values);
    }

    #[test]
    fn constant_image_gives_constant_grid_and_gap_equals_interior_cell() {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, tiny_config());
        let mut image = Image::new(16, 16);
        image.data_mut().iter_mut().for_each(|v| *v = 0.37);

        let mut tape = Tape::new(false);
        let leaf = Encoder::image_leaf(&mut tape, &image);
        let vars = encoder.encode_graph(&mut tape, &store, leaf);

        let fmap = tape.value(vars.fmap);
        let (l, h, w) = (
            fmap.shape().dim(0),
            fmap.shape().dim(1),
            fmap.shape().dim(2),
        );
        for c in 0..l {
            let first = fmap.data()[c * h * w];
            for &v in &fmap.data()[c * h * w..(c + 1) * h * w] {
                assert!((v - first).abs() < 1e-12, "channel {c} not constant");
            }
        }
        let bottleneck = tape.value(vars.bottleneck);
        let gap = global_average_pool(bottleneck).unwrap();
        let (bh, bw) = (bottleneck.shape().dim(1), bottleneck.shape().dim(2));
        let interior = (bh / 2) * bw + bw / 2;
        for (c, &g) in gap.iter().enumerate() {
            let cell = bottleneck.data()[c * bh * bw + interior];
            assert!((g - cell).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_examples() {
        let grid = Tensor::new(Shape::d3(1, 2, 1), vec![1.0, 3.0]);
        assert_eq!(global_average_pool(&grid).unwrap(), vec![2.0]);
        let constant = Tensor::new(Shape::d3(2, 3, 3), vec![0.25; 18]);
        assert_eq!(global_average_pool(&constant).unwrap(), vec![0.25, 0.25]);
        // Permuting spatial positions leaves the mean unchanged.
        let grid = Tensor::new(Shape::d3(1, 1, 4), vec![1.0, 5.0, 2.0, 0.0]);
        let perm = Tensor::new(Shape::d3(1, 1, 4), vec![5.0, 0.0, 1.0, 2.0]);
        assert_eq!(
            global_average_pool(&grid).unwrap(),
            global_average_pool(&perm).unwrap()
        );
    }

    #[test]
    fn non_finite_image_is_an_argument_error() {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, tiny_config());
        let mut image = Image::new(8, 8);
        image.data_mut()[5] = f64::NAN;
        assert!(matches!(
            encoder.encode(&store, &image),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn feature_sampling_grid_points_midpoints_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = 4;
        let (h, w) = (3, 5);
        let grid = Tensor::new(
            Shape::d3(l, h, w),
            (0..l * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let fmap = PixelFeatureMap { grid, stride: 4 };

        // Exactly at grid point (2, 1) in feature coords = pixel (8, 4).
        let (at, ok) = sample_pixel_feature(&fmap, 8.0, 4.0);
        assert!(ok);
        for c in 0..l {
            assert!((at[c] - fmap.grid.data()[c * h * w + w + 2]).abs() < 1e-12);
        }

        // Midpoint between (2,1) and (3,1) = pixel (10, 4).
        let (mid, ok) = sample_pixel_feature(&fmap, 10.0, 4.0);
        assert!(ok);
        for c in 0..l {
            let a = fmap.grid.data()[c * h * w + w + 2];
            let b = fmap.grid.data()[c * h * w + w + 3];
            assert!((mid[c] - 0.5 * (a + b)).abs() < 1e-12);
        }

        let (zero, ok) = sample_pixel_feature(&fmap, -5.0, 0.0);
        assert!(!ok);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_sampling_is_lipschitz_in_the_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, h, w) = (3, 4, 4);
        let grid = Tensor::new(
            Shape::d3(l, h, w),
            (0..l * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let fmap = PixelFeatureMap { grid, stride: 2 };
        let max_adjacent = {
            let d = fmap.grid.data();
            let mut m: f64 = 0.0;
            for c in 0..l {
                for y in 0..h {
                    for x in 0..w {
                        let v = d[(c * h + y) * w + x];
                        if x + 1 < w {
                            m = m.max((v - d[(c * h + y) * w + x + 1]).abs());
                        }
                        if y + 1 < h {
                            m = m.max((v - d[(c * h + y + 1) * w + x]).abs());
                        }
                    }
                }
            }
            m
        };
        let eps = 1e-3;
        for _ in 0..50 {
            let u = rng.gen_range(0.0..(w - 1) as f64 * 2.0 - eps);
            let v = rng.gen_range(0.0..(h - 1) as f64 * 2.0 - eps);
            let (a, _) = sample_pixel_feature(&fmap, u, v);
            let (b, _) = sample_pixel_feature(&fmap, u + eps, v);
            for c in 0..l {
                // Bilinear slope along one axis is bounded by the largest
                // adjacent-cell difference over the feature-grid step.
                assert!((a[c] - b[c]).abs() <= eps / 2.0 * (2.0 * max_adjacent) + 1e-12);
            }
        }
    }

    #[test]
    fn encode_gradcheck_on_tiny_image() {
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, tiny_config());
        let image = noise_image(8, 8, 5);
        // Random positive scalarization keeps gradients O(1).
        let mut rng = ChaCha8Rng::seed_from_u64(6);

        let eval = |store: &ParamStore, image: &Image, coeffs: (&[f64], &[f64])| -> f64 {
            let mut tape = Tape::new(false);
            let leaf = Encoder::image_leaf(&mut tape, image);
            let vars = encoder.encode_graph(&mut tape, store, leaf);
            let f = tape.value(vars.fmap);
            let s = tape.value(vars.semantic);
            f.data()
                .iter()
                .zip(coeffs.0)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + s.data()
                    .iter()
                    .zip(coeffs.1)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        };

        // Analytic gradients via one tape.
        let mut tape = Tape::new(true);
        let leaf = Encoder::image_leaf(&mut tape, &image);
        let vars = encoder.encode_graph(&mut tape, &store, leaf);
        let cf: Vec<f64> = (0..tape.value(vars.fmap).len())
            .map(|_| rng.gen_range(0.2..1.0))
            .collect();
        let cs: Vec<f64> = (0..tape.value(vars.semantic).len())
            .map(|_| rng.gen_range(0.2..1.0))
            .collect();
        let mut grads = GradStore::new(&store);
        tape.backward(&[(vars.fmap, cf.clone()), (vars.semantic, cs.clone())], &mut grads);

        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for (pid, entry) in store.clone().iter() {
            let analytic = grads.get(pid).unwrap().to_vec();
            // Check a spread of entries per parameter to bound runtime.
            let step = (entry.value.len() / 8).max(1);
            for i in (0..entry.value.len()).step_by(step) {
                let mut p = store.clone();
                p.value_mut(pid).data_mut()[i] += eps;
                let plus = eval(&p, &image, (&cf, &cs));
                p.value_mut(pid).data_mut()[i] -= 2.0 * eps;
                let minus = eval(&p, &image, (&cf, &cs));
                let numeric = (plus - minus) / (2.0 * eps);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
                max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel:.3e}");
    }
}
