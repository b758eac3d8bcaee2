use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cam::RestAggregation;
use crate::classifier::{BackboneSpec, TrainConfig};
use crate::dataset::{Dataset, NormalizationSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::hierarchy::{validate_level_sizes, KMeansConfig};

/// Shapes x textures grid of synthetic categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub shapes: usize,
    pub textures: usize,
    pub train_per_category: usize,
    pub eval_per_category: usize,
    pub image_size: usize,
    pub objects_per_image: (usize, usize),
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            shapes: 4,
            textures: 3,
            train_per_category: 40,
            eval_per_category: 15,
            image_size: 48,
            objects_per_image: (1, 2),
        }
    }
}

impl SyntheticSource {
    pub fn spec(&self, samples_per_category: usize, seed: u64) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::grid(
            self.shapes,
            self.textures,
            samples_per_category,
            self.image_size,
            seed,
        )?;
        spec.objects_per_image = self.objects_per_image;
        spec.validate()?;
        Ok(spec)
    }
}

/// A dataset already on disk in the `labels.json` + `images/` + `masks/` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocSource {
    pub root: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
    #[serde(default)]
    pub normalization: Option<NormalizationSpec>,
}

fn default_train_split() -> String {
    "train".into()
}

fn default_eval_split() -> String {
    "val".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Voc(VocSource),
}

/// Where "present" comes from for the rest-classes map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresenceSource {
    #[default]
    Predicted,
    GroundTruth,
}

/// Everything a run needs. Defaults are the desk-scale profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// `None`: `[n, ceil(0.6n), ceil(0.4n), ceil(0.25n)]` with repeats dropped.
    pub level_sizes: Option<Vec<usize>>,
    /// `None`: the compact backbone sized to the data.
    pub backbone: Option<BackboneSpec>,
    pub train: TrainConfig,
    pub kmeans: KMeansConfig,
    pub eval: EvalConfig,
    pub rest_aggregation: RestAggregation,
    pub rest_presence: PresenceSource,
    pub use_clustering: bool,
    pub use_orthogonal: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Shared artifact cache; `None` means `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Also score the training split.
    pub eval_train_split: bool,
    /// Heatmap panels written by the report.
    pub panels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSource::default()),
            level_sizes: Some(vec![12, 6, 3]),
            backbone: None,
            train: desk_train_config(),
            kmeans: KMeansConfig::default(),
            eval: EvalConfig::default(),
            rest_aggregation: RestAggregation::Max,
            rest_presence: PresenceSource::Predicted,
            use_clustering: true,
            use_orthogonal: true,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            cache_dir: None,
            eval_train_split: true,
            panels: 4,
        }
    }
}

/// Training settings that converge from random initialisation in a few
/// minutes on one CPU core.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        initial_lr: 0.2,
        batch_size: 16,
        max_epochs: 30,
        ..TrainConfig::default()
    }
}

/// `[n, ceil(0.6n), ceil(0.4n), ceil(0.25n)]`, strictly decreasing.
pub fn default_level_sizes(n: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    for f in [1.0, 0.6, 0.4, 0.25] {
        let s = ((n as f64) * f).ceil() as usize;
        if s > 0 && sizes.last().is_none_or(|&l| s < l) {
            sizes.push(s);
        }
    }
    sizes
}

impl RunConfig {
    /// Reference-sized synthetic data at 224 pixels with the standard backbone
    /// and the reference training schedule.
    pub fn full_scale() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSource {
                train_per_category: 150,
                eval_per_category: 50,
                image_size: 224,
                ..SyntheticSource::default()
            }),
            backbone: Some(BackboneSpec::standard()),
            train: TrainConfig::default(),
            ..Self::default()
        }
    }

    /// `train` with the run seed.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn resolved_level_sizes(&self, n_categories: usize) -> Vec<usize> {
        self.level_sizes
            .clone()
            .unwrap_or_else(|| default_level_sizes(n_categories))
    }

    pub fn resolved_backbone(&self, data: &Dataset) -> Result<BackboneSpec> {
        let first = data
            .samples
            .first()
            .ok_or_else(|| Error::Config("dataset is empty".into()))?;
        let (h, w) = (first.height(), first.width());
        if h != w
            || data
                .samples
                .iter()
                .any(|s| s.height() != h || s.width() != w)
        {
            return Err(Error::Config(
                "all images must share one square size; set a normalization".into(),
            ));
        }
        let spec = self
            .backbone
            .clone()
            .unwrap_or_else(|| BackboneSpec::compact(h));
        if spec.input_size != h {
            return Err(Error::Config(format!(
                "backbone expects {0}x{0} inputs, data is {h}x{h}",
                spec.input_size
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(b) = &self.backbone {
            b.validate()?;
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.spec(s.train_per_category, 0)?;
                if s.train_per_category == 0 || s.eval_per_category == 0 {
                    return Err(Error::Config("both splits need samples".into()));
                }
                if let Some(sizes) = &self.level_sizes {
                    validate_level_sizes(sizes, s.shapes * s.textures)?;
                }
            }
            DatasetSource::Voc(v) => {
                if let Some(n) = &v.normalization {
                    n.validate()?;
                }
            }
        }
        if self.kmeans.restarts == 0 || self.kmeans.max_iters == 0 {
            return Err(Error::Config(
                "k-means needs restarts and iterations".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_levels_follow_the_fractions() {
        assert_eq!(default_level_sizes(20), vec![20, 12, 8, 5]);
        assert_eq!(default_level_sizes(12), vec![12, 8, 5, 3]);
        assert_eq!(default_level_sizes(2), vec![2, 1]);
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train, cfg.train);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn level_sizes_must_match_the_category_count() {
        let cfg = RunConfig {
            level_sizes: Some(vec![10, 6, 3]),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
