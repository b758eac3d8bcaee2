//! Grad-CAM per branch, branch averaging, and cross-level fusion.

use ndarray::{Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::classifier::{sigmoid, standardize, Classifier};
use crate::container::{Container, DType};
use crate::error::{Error, Result};
use crate::hierarchy::CategoryHierarchy;
use crate::nn::Branch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    FeatureGrid,
    ImageGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapNormalization {
    Raw,
    MinMax,
}

/// Dense 2-D score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub values: Array2<f64>,
    pub resolution: Resolution,
    pub normalization: MapNormalization,
    /// Set when min-max scaling was skipped because the map is identically zero.
    pub degenerate: bool,
}

impl ActivationMap {
    pub fn raw(values: Array2<f64>, resolution: Resolution) -> Self {
        Self {
            values,
            resolution,
            normalization: MapNormalization::Raw,
            degenerate: false,
        }
    }

    pub fn zeros(dim: (usize, usize), resolution: Resolution) -> Self {
        Self {
            values: Array2::zeros(dim),
            resolution,
            normalization: MapNormalization::Raw,
            degenerate: true,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `(v - min) / (max - min)`. An all-zero map is returned unchanged and
    /// flagged degenerate; a constant positive map becomes all ones.
    pub fn minmax(self) -> Self {
        let max = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) && !(min < 0.0) {
            return Self {
                values: self.values.mapv(|_| 0.0),
                normalization: MapNormalization::Raw,
                degenerate: true,
                ..self
            };
        }
        let values = if max > min {
            self.values.mapv(|v| (v - min) / (max - min))
        } else {
            self.values.mapv(|_| 1.0)
        };
        Self {
            values,
            normalization: MapNormalization::MinMax,
            degenerate: false,
            ..self
        }
    }

    /// Index of the maximum value in row-major order (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((y, x), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (y, x);
            }
        }
        best
    }
}

fn image_batch(image: ArrayView3<'_, f64>) -> Array4<f64> {
    // (H, W, 3) -> (1, 3, H, W)
    let (h, w, c) = image.dim();
    Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| standardize(image[[y, x, ch]]))
}

/// Bilinear upsampling that puts feature cell `i` on the centre of its
/// receptive field, input pixel `offset + jump * i`; pixels beyond the outer
/// cell centres take the edge value.
fn upsample_aligned(
    src: &Array2<f64>,
    (out_h, out_w): (usize, usize),
    (jump, offset): (f64, f64),
) -> Array2<f64> {
    let (h, w) = src.dim();
    let axis = |dst: usize, len: usize| {
        let c = ((dst as f64 - offset) / jump).clamp(0.0, (len - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(len - 1), c - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Grad-CAM ingredients for one image and one branch.
#[derive(Debug, Clone)]
pub struct BranchCam {
    /// `(n_k, h, w)` final features.
    pub features: ndarray::Array3<f64>,
    pub logits: ndarray::Array1<f64>,
    image_dim: (usize, usize),
    geometry: (f64, f64),
    branch_index: usize,
}

impl BranchCam {
    pub fn new(branch: &Branch, image: ArrayView3<'_, f64>) -> Self {
        let (h, w, _) = image.dim();
        let batch = image_batch(image);
        let trace = branch.backbone.forward(batch.view());
        let (_, logits) = branch.head.forward(trace.features().view());
        Self {
            features: trace.features().index_axis(Axis(0), 0).to_owned(),
            logits: logits.row(0).to_owned(),
            image_dim: (h, w),
            geometry: branch.backbone.grid_geometry(),
            branch_index: 0,
        }
    }

    /// Spatially averaged gradient of the `target` logit w.r.t. each feature channel.
    pub fn channel_weights(&self, branch: &Branch, target: usize) -> Result<ndarray::Array1<f64>> {
        let n = branch.n_labels();
        if target >= n {
            return Err(Error::Lookup(format!(
                "target {target} out of range 0..{n}"
            )));
        }
        let (c, h, w) = self.features.dim();
        let pooled = self
            .features
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("nonempty")
            .insert_axis(Axis(0));
        let mut upstream = Array2::zeros((1, n));
        upstream[[0, target]] = 1.0;
        let grads = branch.head.backward(&pooled, (1, c, h, w), &upstream);
        let g = grads.features.index_axis(Axis(0), 0).to_owned();
        Ok(g.into_shape_with_order((c, h * w))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("nonempty"))
    }

    /// Rectified channel-weighted feature sum at feature resolution.
    pub fn feature_map(&self, branch: &Branch, target: usize) -> Result<Array2<f64>> {
        let alpha = self.channel_weights(branch, target)?;
        let (_, h, w) = self.features.dim();
        let mut map = Array2::zeros((h, w));
        for (a, f) in alpha.iter().zip(self.features.outer_iter()) {
            map.scaled_add(*a, &f);
        }
        map.mapv_inplace(|v| v.max(0.0));
        Ok(map)
    }

    /// Feature map upsampled to the image and min-max normalised.
    pub fn map(&self, branch: &Branch, target: usize) -> Result<ActivationMap> {
        let raw = self.feature_map(branch, target)?;
        let (h, w) = self.image_dim;
        let up = upsample_aligned(&raw, (h, w), self.geometry);
        Ok(ActivationMap::raw(up, Resolution::ImageGrid).minmax())
    }
}

/// Grad-CAM of `target` for one branch, at image resolution.
pub fn grad_cam(
    branch: &Branch,
    image: ArrayView3<'_, f64>,
    target: usize,
) -> Result<ActivationMap> {
    if target >= branch.n_labels() {
        return Err(Error::Lookup(format!(
            "target {target} out of range 0..{}",
            branch.n_labels()
        )));
    }
    BranchCam::new(branch, image).map(branch, target)
}

/// Elementwise mean of two maps.
pub fn combine_branches(m1: &ActivationMap, m2: &ActivationMap) -> Result<ActivationMap> {
    if m1.dim() != m2.dim() {
        return Err(Error::Contract(format!(
            "cannot combine maps of shape {:?} and {:?}",
            m1.dim(),
            m2.dim()
        )));
    }
    let mut values = &m1.values + &m2.values;
    values /= 2.0;
    Ok(ActivationMap {
        values,
        resolution: m1.resolution,
        normalization: MapNormalization::Raw,
        degenerate: m1.degenerate && m2.degenerate,
    })
}

/// Per-image CAM extraction for every branch of a model: one forward pass,
/// any number of targets.
#[derive(Debug, Clone)]
pub struct ModelCam<'m> {
    model: &'m Classifier,
    branches: Vec<BranchCam>,
}

impl<'m> ModelCam<'m> {
    pub fn new(model: &'m Classifier, image: ArrayView3<'_, f64>) -> Result<Self> {
        let (h, w, c) = image.dim();
        let s = model.backbone.input_size;
        if h != s || w != s || c != model.backbone.input_channels {
            return Err(Error::Contract(format!(
                "expected {s}x{s}x{} image, got {h}x{w}x{c}",
                model.backbone.input_channels
            )));
        }
        let branches = model
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| BranchCam {
                branch_index: i,
                ..BranchCam::new(b, image.view())
            })
            .collect();
        Ok(Self { model, branches })
    }

    /// Sigmoid probabilities averaged over branches.
    pub fn probabilities(&self) -> ndarray::Array1<f64> {
        let n = self.branches.len() as f64;
        let mut p = ndarray::Array1::zeros(self.model.n_labels());
        for b in &self.branches {
            p += &b.logits.mapv(sigmoid);
        }
        p / n
    }

    /// Grad-CAM of each branch, in branch order.
    pub fn branch_maps(&self, target: usize) -> Result<Vec<ActivationMap>> {
        self.branches
            .iter()
            .map(|b| b.map(&self.model.branches[b.branch_index], target))
            .collect()
    }

    /// Branch maps averaged (two-branch models) and min-max normalised.
    pub fn map(&self, target: usize) -> Result<ActivationMap> {
        let maps = self.branch_maps(target)?;
        let combined = match maps.as_slice() {
            [single] => single.clone(),
            [a, b] => combine_branches(a, b)?,
            _ => return Err(Error::State("model has no branches".into())),
        };
        Ok(combined.minmax())
    }
}

/// The level-`level` map of the cluster containing `category`.
/// `models[l]` is the classifier trained on level-`l` labels.
pub fn level_cam(
    hierarchy: &CategoryHierarchy,
    models: &[Classifier],
    level: usize,
    image: ArrayView3<'_, f64>,
    category: usize,
) -> Result<ActivationMap> {
    let target = hierarchy.cluster_of(level, category)?;
    let model = models
        .get(level)
        .ok_or_else(|| Error::State(format!("no trained model for level {level}")))?;
    ModelCam::new(model, image)?.map(target)
}

/// How the maps of the other present categories are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestAggregation {
    #[default]
    Max,
    Mean,
}

/// Which categories count as "present" for the rest-classes map.
#[derive(Debug, Clone, Copy)]
pub enum Presence<'a> {
    /// Categories with predicted probability above 0.5.
    Predicted,
    /// Image-level ground-truth labels.
    GroundTruth(&'a [bool]),
}

/// Aggregate level-0 map of every present category other than `category`,
/// min-max normalised; zero when no other category is present.
pub fn rest_classes_cam(
    level0: &ModelCam<'_>,
    category: usize,
    presence: Presence<'_>,
    aggregation: RestAggregation,
) -> Result<ActivationMap> {
    let present: Vec<usize> = match presence {
        Presence::Predicted => level0
            .probabilities()
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| (p > 0.5).then_some(i))
            .collect(),
        Presence::GroundTruth(labels) => labels
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
            .collect(),
    };
    let (h, w) = level0.branches[0].image_dim;
    let others: Vec<usize> = present.into_iter().filter(|&c| c != category).collect();
    if others.is_empty() {
        return Ok(ActivationMap::zeros((h, w), Resolution::ImageGrid));
    }
    let maps = others
        .iter()
        .map(|&c| level0.map(c))
        .collect::<Result<Vec<_>>>()?;
    let values = match aggregation {
        RestAggregation::Max => fold_max(&maps),
        RestAggregation::Mean => {
            let mut acc = Array2::zeros((h, w));
            for m in &maps {
                acc += &m.values;
            }
            acc / maps.len() as f64
        }
    };
    Ok(ActivationMap::raw(values, Resolution::ImageGrid).minmax())
}

fn fold_max(maps: &[ActivationMap]) -> Array2<f64> {
    let mut acc = maps[0].values.clone();
    for m in &maps[1..] {
        acc.zip_mut_with(&m.values, |a, &b| *a = a.max(b));
    }
    acc
}

/// Terms of the multi-level fusion for one image and category.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    /// Identity-level map of the category.
    pub m0: ActivationMap,
    /// Map of the containing cluster at each clustered level `1..=k`.
    pub level_maps: Vec<ActivationMap>,
    /// Rest-classes map.
    pub m0_rest: ActivationMap,
}

impl FusionInputs {
    pub fn k(&self) -> usize {
        self.level_maps.len()
    }

    fn validate(&self) -> Result<()> {
        if self.level_maps.is_empty() {
            return Err(Error::Config(
                "fusion needs at least one clustered level (k >= 1)".into(),
            ));
        }
        let dim = self.m0.dim();
        if self.m0_rest.dim() != dim || self.level_maps.iter().any(|m| m.dim() != dim) {
            return Err(Error::Contract("fusion maps differ in shape".into()));
        }
        Ok(())
    }
}

/// `m0 + (1/k) Σ level_maps - m0_rest` before clamping.
pub fn fuse_levels_raw(inputs: &FusionInputs) -> Result<Array2<f64>> {
    inputs.validate()?;
    let k = inputs.k() as f64;
    let mut mean = Array2::zeros(inputs.m0.dim());
    for m in &inputs.level_maps {
        mean += &m.values;
    }
    mean /= k;
    Ok(&inputs.m0.values + &mean - &inputs.m0_rest.values)
}

/// [`fuse_levels_raw`] clamped at zero and min-max normalised.
pub fn fuse_levels(inputs: &FusionInputs) -> Result<ActivationMap> {
    let raw = fuse_levels_raw(inputs)?.mapv(|v| v.max(0.0));
    Ok(ActivationMap::raw(raw, inputs.m0.resolution).minmax())
}

/// Header stored next to a persisted map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapHeader {
    pub kind: String,
    pub shape: [usize; 2],
    pub resolution: Resolution,
    pub normalization: MapNormalization,
    pub degenerate: bool,
    pub level: usize,
    pub target_cluster: usize,
}

/// Writes `map` as a 32-bit container.
pub fn save_map(
    path: &Path,
    map: &ActivationMap,
    level: usize,
    target_cluster: usize,
) -> Result<()> {
    let (h, w) = map.dim();
    let header = MapHeader {
        kind: "activation_map".into(),
        shape: [h, w],
        resolution: map.resolution,
        normalization: map.normalization,
        degenerate: map.degenerate,
        level,
        target_cluster,
    };
    let mut c = Container::new(serde_json::to_value(&header)?);
    c.push("values", map.values.view().into_dyn());
    c.write(path, DType::F32)
}

pub fn load_map(path: &Path) -> Result<(ActivationMap, MapHeader)> {
    let c = Container::read(path)?;
    let header: MapHeader = serde_json::from_value(c.meta.clone())?;
    if header.kind != "activation_map" {
        return Err(Error::Format(format!(
            "{} is not an activation map",
            path.display()
        )));
    }
    let values = c
        .get("values")?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if values.dim() != (header.shape[0], header.shape[1]) {
        return Err(Error::Format(format!(
            "{}: header shape disagrees with payload",
            path.display()
        )));
    }
    let map = ActivationMap {
        values,
        resolution: header.resolution,
        normalization: header.normalization,
        degenerate: header.degenerate,
    };
    Ok((map, header))
}

/// Blue-to-red colour ramp for a value in `[0, 1]`.
pub fn heat_colour(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// 8-bit heatmap of a `[0, 1]` map.
pub fn heatmap_image(values: &Array2<f64>) -> image::RgbImage {
    let (h, w) = values.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(heat_colour(values[[y as usize, x as usize]]))
    })
}

pub fn save_heatmap_png(path: &Path, map: &ActivationMap) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    heatmap_image(&map.values)
        .save(path)
        .map_err(|e| Error::image(path, e))
}
