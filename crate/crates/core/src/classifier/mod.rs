//! Single- and two-branch convolutional classifiers.
//!
//! A two-branch model holds two independently initialised branches that share
//! nothing; they are coupled only through the feature-orthogonal loss during
//! training. Single-branch models are used for hierarchy construction and for
//! ablations without the orthogonal module.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{Checkpoint, LevelMeta};
pub use loss::{
    bce_with_logits, bce_with_logits_grad, orthogonal_loss, orthogonal_loss_grad, sigmoid,
    total_loss, total_loss_grads, FeaturePair, LossBreakdown, TotalLossGrads,
};
pub use train::{
    accuracy, train, train_single_branch, EpochLog, PlateauSchedule, TrainConfig, TrainingSet,
};

use ndarray::{Array2, Array4, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{Backbone, Branch, Conv2d, Head};
use crate::seed::derive_seed;

/// One conv + ReLU block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Backbone architecture. The final block's post-ReLU output is the feature
/// tensor; its channel count is `n_k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<ConvBlockSpec>,
}

impl BackboneSpec {
    /// Four stride-2 blocks with 32-64-128-128 channels: a 14×14×128 feature
    /// grid for 224×224 inputs.
    pub fn standard() -> Self {
        Self {
            name: "cnn4-standard".into(),
            input_channels: 3,
            input_size: 224,
            blocks: [32, 64, 128, 128]
                .into_iter()
                .map(|c| ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
        }
    }

    /// Small backbone for desk-scale runs: three blocks (stride 1, 2, 2), so
    /// the feature grid is a quarter of the input side.
    pub fn compact(input_size: usize) -> Self {
        let block = |out_channels, stride| ConvBlockSpec {
            out_channels,
            kernel: 3,
            stride,
        };
        Self {
            name: "cnn3-compact".into(),
            input_channels: 3,
            input_size,
            blocks: vec![block(12, 1), block(24, 2), block(32, 2)],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Spatial size `(h, w)` of the feature grid.
    pub fn feature_spatial(&self) -> (usize, usize) {
        let mut s = self.input_size;
        for b in &self.blocks {
            s = (s + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
        }
        (s, s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("backbone input must be nonempty".into()));
        }
        if self
            .blocks
            .iter()
            .any(|b| b.out_channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0)
        {
            return Err(Error::Config(
                "blocks need positive channels, odd kernels and positive strides".into(),
            ));
        }
        Ok(())
    }

    fn build_branch(&self, n_labels: usize, seed: u64) -> Branch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = self.input_channels;
        let layers = self
            .blocks
            .iter()
            .map(|b| {
                let conv = Conv2d::new(in_c, b.out_channels, b.kernel, b.stride, &mut rng);
                in_c = b.out_channels;
                conv
            })
            .collect();
        Branch {
            backbone: Backbone { layers },
            head: Head::new(in_c, n_labels, &mut rng),
        }
    }
}

/// A classifier with one or two unshared branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: BackboneSpec,
    pub branches: Vec<Branch>,
}

/// Logits and features of every branch for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Array2<f64>>,
    pub features: Vec<Array4<f64>>,
}

impl ForwardOutput {
    /// `(f1, f2)` for a two-branch forward pass.
    pub fn feature_pair(&self) -> Result<FeaturePair<'_>> {
        match self.features.as_slice() {
            [f1, f2] => FeaturePair::new(f1.view().into_dyn(), f2.view().into_dyn()),
            _ => Err(Error::Contract(
                "feature pair needs exactly two branches".into(),
            )),
        }
    }
}

/// Builds a two-branch model. Branch `i` is seeded from `(seed, i)`, so branch
/// 0 is identical to the branch of a single-branch model with the same seed.
pub fn build_model(n_labels: usize, backbone: &BackboneSpec, seed: u64) -> Result<Classifier> {
    Classifier::new(n_labels, backbone, seed, 2)
}

impl Classifier {
    pub fn new(
        n_labels: usize,
        backbone: &BackboneSpec,
        seed: u64,
        n_branches: usize,
    ) -> Result<Self> {
        if n_labels < 1 {
            return Err(Error::Config(
                "a classifier needs at least one output node".into(),
            ));
        }
        if !(1..=2).contains(&n_branches) {
            return Err(Error::Config(format!(
                "{n_branches} branches requested; use 1 or 2"
            )));
        }
        backbone.validate()?;
        Ok(Self {
            backbone: backbone.clone(),
            branches: (0..n_branches)
                .map(|i| backbone.build_branch(n_labels, derive_seed(seed, i as u64)))
                .collect(),
        })
    }

    pub fn single_branch(n_labels: usize, backbone: &BackboneSpec, seed: u64) -> Result<Self> {
        Self::new(n_labels, backbone, seed, 1)
    }

    pub fn is_two_branch(&self) -> bool {
        self.branches.len() == 2
    }

    pub fn n_labels(&self) -> usize {
        self.branches[0].n_labels()
    }

    pub fn check_input(&self, images: &ArrayView4<'_, f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        let s = self.backbone.input_size;
        if c != self.backbone.input_channels || h != s || w != s {
            return Err(Error::Contract(format!(
                "expected {}x{s}x{s} images, got {c}x{h}x{w}",
                self.backbone.input_channels
            )));
        }
        Ok(())
    }

    /// Inference pass over a `(N, C, H, W)` batch.
    pub fn forward(&self, images: ArrayView4<'_, f64>) -> Result<ForwardOutput> {
        self.check_input(&images)?;
        let mut out = ForwardOutput {
            logits: Vec::with_capacity(self.branches.len()),
            features: Vec::with_capacity(self.branches.len()),
        };
        for b in &self.branches {
            let trace = b.backbone.forward(images.view());
            let (_, logits) = b.head.forward(trace.features().view());
            out.logits.push(logits);
            out.features.push(trace.features().clone());
        }
        Ok(out)
    }

    /// Sigmoid probabilities averaged over branches.
    pub fn predict_proba(&self, images: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
        let out = self.forward(images)?;
        let n = out.logits.len() as f64;
        let mut acc = Array2::zeros(out.logits[0].dim());
        for l in &out.logits {
            acc += &l.mapv(sigmoid);
        }
        Ok(acc / n)
    }
}

/// Head weight rows of branch 0: row `i` is the feature of output node `i`.
pub fn extract_category_features(model: &Classifier) -> Array2<f64> {
    model.branches[0].head.weight.clone()
}

/// Pixels enter the network as `(v - PIXEL_MEAN) / PIXEL_STD`. Centred
/// inputs train several times faster from random initialisation.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[inline]
pub fn standardize(v: f64) -> f64 {
    (v - PIXEL_MEAN) / PIXEL_STD
}

/// Stacks `(H, W, 3)` images into a standardised `(N, 3, H, W)` batch.
pub fn images_to_batch<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Array4<f64> {
    let samples: Vec<&ImageSample> = samples.into_iter().collect();
    let (h, w) = samples.first().map_or((0, 0), |s| (s.height(), s.width()));
    let mut batch = Array4::zeros((samples.len(), 3, h, w));
    for (i, s) in samples.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    batch[[i, c, y, x]] = standardize(s.image[[y, x, c]]);
                }
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn standard_backbone_has_14x14x128_features() {
        let spec = BackboneSpec::standard();
        assert_eq!(spec.feature_channels(), 128);
        assert_eq!(spec.feature_spatial(), (14, 14));
        assert_eq!(BackboneSpec::compact(32).feature_spatial(), (8, 8));
    }

    #[test]
    fn heads_have_label_by_feature_shape() {
        let m = build_model(20, &BackboneSpec::compact(16), 0).unwrap();
        assert_eq!(m.branches.len(), 2);
        for b in &m.branches {
            assert_eq!(b.head.weight.dim(), (20, 32));
        }
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let spec = BackboneSpec::compact(16);
        let a = build_model(5, &spec, 0).unwrap();
        let b = build_model(5, &spec, 0).unwrap();
        let c = build_model(5, &spec, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.branches[0], a.branches[1]);
    }

    #[test]
    fn zero_labels_is_a_config_error() {
        assert!(matches!(
            build_model(0, &BackboneSpec::compact(16), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_shapes_and_purity() {
        let m = build_model(4, &BackboneSpec::compact(16), 3).unwrap();
        let one = Array4::from_shape_fn((1, 3, 16, 16), |(_, c, y, x)| {
            ((c + y * x) % 7) as f64 / 7.0
        });
        let out = m.forward(one.view()).unwrap();
        assert_eq!(out.logits[0].dim(), (1, 4));
        assert_eq!(out.logits[1].dim(), (1, 4));
        let pair = out.feature_pair().unwrap();
        assert!(pair.f1.iter().all(|&v| v >= 0.0));

        let mut two = Array4::zeros((2, 3, 16, 16));
        two.slice_mut(ndarray::s![0..1, .., .., ..]).assign(&one);
        two.slice_mut(ndarray::s![1..2, .., .., ..]).assign(&one);
        let out2 = m.forward(two.view()).unwrap();
        for l in &out2.logits {
            assert_eq!(l.row(0), l.row(1));
        }
    }

    #[test]
    fn wrong_image_size_is_a_contract_error() {
        let m = build_model(4, &BackboneSpec::compact(16), 3).unwrap();
        let x = Array4::zeros((1, 3, 20, 16));
        assert!(matches!(m.forward(x.view()), Err(Error::Contract(_))));
    }

    #[test]
    fn category_features_are_read_only() {
        let m = Classifier::single_branch(5, &BackboneSpec::compact(16), 9).unwrap();
        let a = extract_category_features(&m);
        let b = extract_category_features(&m);
        assert_eq!(a.dim(), (5, 32));
        assert_eq!(a, b);
    }
}
