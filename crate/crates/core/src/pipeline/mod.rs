//! End-to-end runs: dataset, hierarchy, per-level models, maps, fusion,
//! evaluation and report.
//!
//! Every stage is keyed by a hash of its config subtree and its upstream
//! keys. Dataset, hierarchy and model artifacts live in a shared cache
//! directory addressed by key, so runs that differ only in later stages
//! (for example the four ablation configurations) reuse them. Run-local
//! stages write a `stage.json` marker last; a stage is skipped on resume when
//! its marker carries the current key and every listed artifact exists.

mod config;
mod report;

pub use config::{
    default_level_sizes, desk_train_config, DatasetSource, PresenceSource, RunConfig,
    SyntheticSource, VocSource,
};
pub use report::{emit_ablation_report, emit_report, AblationRow, ReportRow};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cam::{
    fuse_levels, load_map, rest_classes_cam, save_map, ActivationMap, FusionInputs, ModelCam,
    Presence,
};
use crate::classifier::{
    build_model, train, train_single_branch, BackboneSpec, Checkpoint, Classifier, EpochLog,
    LevelMeta, TrainConfig, TrainingSet,
};
use crate::dataset::{export_voc_style, generate_synthetic, load_voc_style, Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::hierarchy::{build_hierarchy_with, level_seed, CategoryHierarchy};
use crate::seed::derive_seed;

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const STAGES: [&str; 7] = [
    "dataset",
    "hierarchy",
    "train",
    "cam",
    "fuse",
    "eval",
    "report",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    /// Computed in this invocation.
    Done,
    /// Found complete on disk with a matching key.
    Reused,
    Failed,
    /// Not attempted because an upstream stage failed.
    Skipped,
}

impl StageStatus {
    pub fn is_complete(self) -> bool {
        matches!(self, StageStatus::Done | StageStatus::Reused)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub status: StageStatus,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self) -> Result<()> {
        write_json(&Self::path(&self.run_dir), self)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn is_complete(&self) -> bool {
        STAGES
            .iter()
            .all(|n| self.stage(n).is_some_and(|s| s.status.is_complete()))
    }

    /// First artifact of `stage` whose file name is `file`.
    pub fn artifact(&self, stage: &str, file: &str) -> Result<PathBuf> {
        let rec = self
            .stage(stage)
            .filter(|s| s.status.is_complete())
            .ok_or_else(|| Error::State(format!("stage {stage} has not completed")))?;
        rec.artifacts
            .iter()
            .find(|p| p.file_name().is_some_and(|f| f == file))
            .cloned()
            .ok_or_else(|| Error::State(format!("stage {stage} has no artifact {file}")))
    }
}

/// Short hex digest of a canonical JSON rendering of `value`.
pub fn content_key<T: Serialize>(tag: &str, value: &T) -> Result<String> {
    // Value maps are sorted, so field order does not leak into the key.
    let canonical = serde_json::to_vec(&serde_json::to_value(value)?)?;
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(&canonical);
    Ok(hex::encode(&h.finalize()[..10]))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageMarker {
    key: String,
    artifacts: Vec<PathBuf>,
}

fn marker_path(dir: &Path) -> PathBuf {
    dir.join("stage.json")
}

/// Artifacts of a finished stage in `dir`, if its marker matches `key`.
fn completed(dir: &Path, key: &str) -> Option<Vec<PathBuf>> {
    let marker: StageMarker = read_json(&marker_path(dir)).ok()?;
    (marker.key == key && marker.artifacts.iter().all(|p| p.exists())).then_some(marker.artifacts)
}

fn finish(dir: &Path, key: &str, artifacts: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    write_json(
        &marker_path(dir),
        &StageMarker {
            key: key.to_string(),
            artifacts: artifacts.clone(),
        },
    )?;
    Ok(artifacts)
}

/// Train and eval splits of a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub dir: PathBuf,
}

/// Train and eval splits of a synthetic source, seeded from the run seed.
pub fn synthetic_splits(source: &SyntheticSource, seed: u64) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_synthetic(&source.spec(source.train_per_category, derive_seed(seed, 0xDA7A))?)?,
        generate_synthetic(&source.spec(source.eval_per_category, derive_seed(seed, 0xDA7B))?)?,
    ))
}

/// Generates or imports the data and stores both splits under the cache.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<(String, Splits)> {
    let key = match &cfg.dataset {
        DatasetSource::Synthetic(s) => content_key("dataset", &(s, cfg.seed))?,
        DatasetSource::Voc(v) => {
            let mut digests = Vec::new();
            for split in [&v.train_split, &v.eval_split] {
                let p = crate::dataset::split_dir(&v.root, split).join("labels.json");
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                digests.push(hex::encode(Sha256::digest(&bytes)));
            }
            content_key("dataset", &(v, digests))?
        }
    };
    let dir = cfg.cache_dir().join("dataset").join(&key);
    if completed(&dir, &key).is_none() {
        let (train, eval) = match &cfg.dataset {
            DatasetSource::Synthetic(s) => synthetic_splits(s, cfg.seed)?,
            DatasetSource::Voc(v) => {
                let load = |split: &str| -> Result<Dataset> {
                    let d = load_voc_style(&v.root, split)?;
                    match &v.normalization {
                        Some(n) => d.normalized(n),
                        None => Ok(d),
                    }
                };
                (load(&v.train_split)?, load(&v.eval_split)?)
            }
        };
        export_voc_style(&train, &dir, "train")?;
        export_voc_style(&eval, &dir, "eval")?;
        finish(
            &dir,
            &key,
            vec![dir.join("train/labels.json"), dir.join("eval/labels.json")],
        )?;
    }
    let splits = load_splits(&dir)?;
    Ok((key, splits))
}

/// Reads the `train` and `eval` splits written by [`prepare_dataset`].
pub fn load_splits(dir: &Path) -> Result<Splits> {
    let train = load_voc_style(dir, "train")?;
    let eval = load_voc_style(dir, "eval")?;
    if train.categories != eval.categories {
        return Err(Error::Format(
            "train and eval splits disagree on categories".into(),
        ));
    }
    Ok(Splits {
        train,
        eval,
        dir: dir.to_path_buf(),
    })
}

/// Model cache keyed by training data, label folding, architecture and seed.
pub struct ModelCache {
    dir: PathBuf,
}

#[derive(Serialize)]
struct ModelKey<'a> {
    dataset: &'a str,
    assignment: &'a [usize],
    n_labels: usize,
    n_branches: usize,
    backbone: &'a BackboneSpec,
    train: &'a TrainConfig,
}

impl ModelCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    /// Loads the model for this level, training it first when absent.
    #[allow(clippy::too_many_arguments)]
    pub fn get_or_train(
        &self,
        dataset_key: &str,
        dataset: &Dataset,
        level: usize,
        assignment: &[usize],
        n_labels: usize,
        n_branches: usize,
        backbone: &BackboneSpec,
        cfg: &TrainConfig,
    ) -> Result<(Checkpoint, PathBuf)> {
        let mut train_cfg = cfg.clone();
        if n_branches == 1 {
            train_cfg.lambda_orth = 0.0;
        }
        let key = content_key(
            "model",
            &ModelKey {
                dataset: dataset_key,
                assignment,
                n_labels,
                n_branches,
                backbone,
                train: &train_cfg,
            },
        )?;
        let path = self.dir.join(format!("{key}.bin"));
        if path.exists() {
            return Ok((Checkpoint::load(&path)?, path));
        }
        let set = TrainingSet::new(dataset, Some((assignment, n_labels)))?;
        let (model, history) = train_level(&set, level, n_branches, backbone, &train_cfg)?;
        let ck = Checkpoint {
            model,
            train_config: train_cfg,
            level: LevelMeta {
                level,
                n_clusters: n_labels,
                category_to_cluster: assignment.to_vec(),
            },
            history,
        };
        ck.save(&path)?;
        Ok((ck, path))
    }
}

/// Trains a fresh one- or two-branch model for `level`, seeded from `cfg.seed`.
pub fn train_level(
    set: &TrainingSet,
    level: usize,
    n_branches: usize,
    backbone: &BackboneSpec,
    cfg: &TrainConfig,
) -> Result<(Classifier, Vec<EpochLog>)> {
    let cfg = TrainConfig {
        seed: level_seed(cfg.seed, level),
        ..cfg.clone()
    };
    log::info!(
        "training level {level} ({n_branches} branch, {} labels)",
        set.n_labels()
    );
    match n_branches {
        1 => train_single_branch(backbone, set, &cfg),
        2 => {
            let mut model = build_model(set.n_labels(), backbone, cfg.seed)?;
            let history = train(&mut model, set, &cfg)?;
            Ok((model, history))
        }
        n => Err(Error::Config(format!(
            "models have one or two branches, not {n}"
        ))),
    }
}

/// Builds (or loads) the category hierarchy for `level_sizes`.
pub fn prepare_hierarchy(
    cfg: &RunConfig,
    dataset_key: &str,
    train_set: &Dataset,
    level_sizes: &[usize],
    backbone: &BackboneSpec,
) -> Result<(String, CategoryHierarchy, PathBuf)> {
    let mut tcfg = cfg.effective_train();
    tcfg.lambda_orth = 0.0;
    let key = content_key(
        "hierarchy",
        &(
            dataset_key,
            level_sizes,
            backbone,
            &tcfg,
            &cfg.kmeans,
            cfg.seed,
        ),
    )?;
    let dir = cfg.cache_dir().join("hierarchy").join(&key);
    let path = dir.join("hierarchy.json");
    if completed(&dir, &key).is_some() {
        return Ok((key, CategoryHierarchy::load(&path)?, path));
    }
    let cache = ModelCache::new(cfg.cache_dir().join("models"));
    let mut checkpoints = Vec::new();
    let build = build_hierarchy_with(
        train_set,
        level_sizes,
        &cfg.kmeans,
        cfg.seed,
        |level, assignment, set| {
            let (ck, p) = cache.get_or_train(
                dataset_key,
                train_set,
                level,
                assignment,
                set.n_labels(),
                1,
                backbone,
                &tcfg,
            )?;
            checkpoints.push(p.display().to_string());
            Ok((ck.model, ck.history))
        },
    )?;
    let mut hierarchy = build.hierarchy;
    hierarchy.checkpoints = (0..hierarchy.levels.len())
        .map(|l| checkpoints.get(l).cloned())
        .collect();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    hierarchy.save(&path)?;
    finish(&dir, &key, vec![path.clone()])?;
    Ok((key, hierarchy, path))
}

/// Maps of one (image, category) pair, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapEntry {
    /// Level `l` map of the category's cluster, `l = 0..=k`.
    pub levels: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest: Option<PathBuf>,
}

/// split -> image id -> category name -> entry
pub type MapIndex = BTreeMap<String, BTreeMap<String, BTreeMap<String, MapEntry>>>;

/// split -> image id -> category name -> fused map path
pub type FusedIndex = BTreeMap<String, BTreeMap<String, BTreeMap<String, PathBuf>>>;

fn scored_pairs(sample: &ImageSample) -> impl Iterator<Item = usize> + '_ {
    sample
        .masks
        .keys()
        .copied()
        .filter(|&c| sample.labels.get(c).copied().unwrap_or(false))
}

fn presence<'a>(cfg: &RunConfig, sample: &'a ImageSample) -> Presence<'a> {
    match cfg.rest_presence {
        PresenceSource::Predicted => Presence::Predicted,
        PresenceSource::GroundTruth => Presence::GroundTruth(&sample.labels),
    }
}

/// Computes and stores every map the later stages need for `dataset`.
pub fn extract_maps(
    cfg: &RunConfig,
    run_dir: &Path,
    split: &str,
    dataset: &Dataset,
    hierarchy: &CategoryHierarchy,
    models: &[Classifier],
) -> Result<BTreeMap<String, BTreeMap<String, MapEntry>>> {
    let k = models.len() - 1;
    let mut out = BTreeMap::new();
    let mut samples: Vec<&ImageSample> = dataset.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    for sample in samples {
        let cats: Vec<usize> = scored_pairs(sample).collect();
        if cats.is_empty() {
            continue;
        }
        let cams = models
            .iter()
            .map(|m| ModelCam::new(m, sample.image.view()))
            .collect::<Result<Vec<_>>>()?;
        let rel_dir = PathBuf::from("maps").join(split).join(&sample.id);
        let mut per_cat = BTreeMap::new();
        for cat in cats {
            let mut levels = Vec::with_capacity(k + 1);
            for (level, cam) in cams.iter().enumerate() {
                let cluster = hierarchy.cluster_of(level, cat)?;
                let rel = rel_dir.join(format!("L{level}_k{cluster}.bin"));
                let abs = run_dir.join(&rel);
                if !abs.exists() {
                    save_map(&abs, &cam.map(cluster)?, level, cluster)?;
                }
                levels.push(rel);
            }
            let rest = if k > 0 {
                let rel = rel_dir.join(format!("rest_{cat}.bin"));
                let m =
                    rest_classes_cam(&cams[0], cat, presence(cfg, sample), cfg.rest_aggregation)?;
                save_map(&run_dir.join(&rel), &m, 0, cat)?;
                Some(rel)
            } else {
                None
            };
            per_cat.insert(dataset.categories[cat].clone(), MapEntry { levels, rest });
        }
        out.insert(sample.id.clone(), per_cat);
    }
    Ok(out)
}

fn load_rel(run_dir: &Path, rel: &Path) -> Result<ActivationMap> {
    Ok(load_map(&run_dir.join(rel))?.0)
}

/// Fuses the level-0 map with levels `1..=depth` (clamped to what exists).
/// Depth 0 returns the level-0 map unchanged.
pub fn fuse_entry(run_dir: &Path, entry: &MapEntry, depth: usize) -> Result<ActivationMap> {
    let m0 = load_rel(run_dir, &entry.levels[0])?;
    let depth = depth.min(entry.levels.len() - 1);
    if depth == 0 {
        return Ok(m0);
    }
    let level_maps = entry.levels[1..=depth]
        .iter()
        .map(|p| load_rel(run_dir, p))
        .collect::<Result<Vec<_>>>()?;
    let rest = entry
        .rest
        .as_ref()
        .ok_or_else(|| Error::State("fusion needs the rest-classes map".into()))?;
    fuse_levels(&FusionInputs {
        m0,
        level_maps,
        m0_rest: load_rel(run_dir, rest)?,
    })
}

/// Evaluates `dataset` with the map chosen by `pick(entry)`.
pub fn evaluate_from_index<F>(
    cfg: &RunConfig,
    dataset: &Dataset,
    entries: &BTreeMap<String, BTreeMap<String, MapEntry>>,
    mut pick: F,
) -> Result<EvalReport>
where
    F: FnMut(&MapEntry) -> Result<ActivationMap>,
{
    evaluate(dataset, &cfg.eval, |sample, cat| {
        let entry = entries
            .get(&sample.id)
            .and_then(|m| m.get(&dataset.categories[cat]))
            .ok_or_else(|| {
                Error::State(format!(
                    "no map for image {} category {}",
                    sample.id, dataset.categories[cat]
                ))
            })?;
        pick(entry)
    })
}

/// Reports of one split: `depth[d]` fuses levels `0..=d`; `depth[0]` is the
/// level-0 baseline and the last entry is the full fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReports {
    pub baseline: EvalReport,
    pub fused: EvalReport,
    pub depth: Vec<EvalReport>,
}

struct Ctx {
    manifest: RunManifest,
    previous: Option<RunManifest>,
}

impl Ctx {
    /// Runs `body` unless the previous manifest already holds this stage
    /// complete with the same key and all artifacts on disk.
    fn stage<T, F>(
        &mut self,
        name: &str,
        key: &str,
        reuse: impl FnOnce() -> Result<T>,
        body: F,
    ) -> Result<T>
    where
        F: FnOnce() -> Result<(T, Vec<PathBuf>)>,
    {
        let start = Instant::now();
        let prev = self
            .previous
            .as_ref()
            .and_then(|m| m.stage(name))
            .filter(|r| {
                r.key == key && r.status.is_complete() && r.artifacts.iter().all(|p| p.exists())
            })
            .cloned();
        if let Some(rec) = prev {
            if let Ok(v) = reuse() {
                self.record(name, key, StageStatus::Reused, rec.artifacts, start, None)?;
                return Ok(v);
            }
        }
        match body() {
            Ok((v, artifacts)) => {
                self.record(name, key, StageStatus::Done, artifacts, start, None)?;
                Ok(v)
            }
            Err(e) => {
                self.record(
                    name,
                    key,
                    StageStatus::Failed,
                    Vec::new(),
                    start,
                    Some(e.to_string()),
                )?;
                let done: Vec<String> = self
                    .manifest
                    .stages
                    .iter()
                    .map(|s| s.name.clone())
                    .collect();
                for later in STAGES.iter().filter(|s| !done.iter().any(|d| d == *s)) {
                    self.manifest.stages.push(StageRecord {
                        name: later.to_string(),
                        key: String::new(),
                        status: StageStatus::Skipped,
                        artifacts: Vec::new(),
                        wall_clock_s: 0.0,
                        cause: Some(format!("upstream stage {name} failed")),
                    });
                }
                self.manifest.save()?;
                Err(Error::State(format!("stage {name} failed: {e}")))
            }
        }
    }

    fn record(
        &mut self,
        name: &str,
        key: &str,
        status: StageStatus,
        artifacts: Vec<PathBuf>,
        start: Instant,
        cause: Option<String>,
    ) -> Result<()> {
        log::info!(
            "stage {name}: {status:?} in {:.1}s",
            start.elapsed().as_secs_f64()
        );
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            key: key.to_string(),
            status,
            artifacts,
            wall_clock_s: start.elapsed().as_secs_f64(),
            cause,
        });
        self.manifest.save()
    }
}

fn reports_path(run_dir: &Path, split: &str, what: &str) -> PathBuf {
    run_dir.join("eval").join(format!("{split}_{what}.json"))
}

/// Runs (or resumes) the whole pipeline in `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let previous = RunManifest::load(&run_dir).ok();
    let mut ctx = Ctx {
        manifest: RunManifest {
            software_version: SOFTWARE_VERSION.to_string(),
            config: cfg.clone(),
            run_dir: run_dir.clone(),
            stages: Vec::new(),
        },
        previous,
    };

    // dataset
    let data_key = match &cfg.dataset {
        DatasetSource::Synthetic(s) => content_key("dataset", &(s, cfg.seed))?,
        DatasetSource::Voc(v) => content_key("dataset", &(v, cfg.seed))?,
    };
    let load_dataset = || prepare_dataset(cfg);
    let (dataset_key, splits) = ctx.stage("dataset", &data_key, load_dataset, || {
        let (key, splits) = load_dataset()?;
        let artifacts = vec![
            splits.dir.join("train/labels.json"),
            splits.dir.join("eval/labels.json"),
        ];
        Ok(((key, splits), artifacts))
    })?;

    // hierarchy
    let n_c = splits.train.n_categories();
    let level_sizes = if cfg.use_clustering {
        cfg.resolved_level_sizes(n_c)
    } else {
        vec![n_c]
    };
    let backbone = cfg.resolved_backbone(&splits.train)?;
    let hier_key = content_key("hierarchy-stage", &(&dataset_key, &level_sizes, &backbone))?;
    let load_hierarchy =
        || prepare_hierarchy(cfg, &dataset_key, &splits.train, &level_sizes, &backbone);
    let (hierarchy_key, hierarchy) = ctx.stage(
        "hierarchy",
        &hier_key,
        || load_hierarchy().map(|(k, h, _)| (k, h)),
        || {
            let (key, h, path) = load_hierarchy()?;
            Ok(((key, h), vec![path]))
        },
    )?;

    // train
    let n_branches = if cfg.use_orthogonal { 2 } else { 1 };
    let train_key = content_key(
        "train",
        &(
            &hierarchy_key,
            n_branches,
            &cfg.effective_train(),
            &backbone,
        ),
    )?;
    let cache = ModelCache::new(cfg.cache_dir().join("models"));
    let load_models = || -> Result<(Vec<Classifier>, Vec<PathBuf>)> {
        let mut models = Vec::new();
        let mut paths = Vec::new();
        for level in 0..hierarchy.levels.len() {
            let assignment = hierarchy.composed(level)?;
            let (ck, p) = cache.get_or_train(
                &dataset_key,
                &splits.train,
                level,
                &assignment,
                hierarchy.levels[level].n_clusters,
                n_branches,
                &backbone,
                &cfg.effective_train(),
            )?;
            models.push(ck.model);
            paths.push(p);
        }
        Ok((models, paths))
    };
    let models: Vec<Classifier> = ctx.stage(
        "train",
        &train_key,
        || load_models().map(|(m, _)| m),
        load_models,
    )?;

    let mut split_names = vec!["eval"];
    if cfg.eval_train_split {
        split_names.push("train");
    }
    let split_data = |name: &str| {
        if name == "eval" {
            &splits.eval
        } else {
            &splits.train
        }
    };

    // cam
    let cam_key = content_key(
        "cam",
        &(
            &train_key,
            cfg.rest_aggregation,
            cfg.rest_presence,
            &split_names,
        ),
    )?;
    let map_index_path = run_dir.join("maps").join("index.json");
    let map_index: MapIndex = ctx.stage(
        "cam",
        &cam_key,
        || read_json(&map_index_path),
        || {
            let maps_dir = run_dir.join("maps");
            if maps_dir.exists() {
                fs::remove_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
            }
            let mut index = MapIndex::new();
            for name in &split_names {
                index.insert(
                    name.to_string(),
                    extract_maps(cfg, &run_dir, name, split_data(name), &hierarchy, &models)?,
                );
            }
            write_json(&map_index_path, &index)?;
            Ok((index, vec![map_index_path.clone()]))
        },
    )?;

    // fuse
    let depth = hierarchy.depth();
    let fuse_key = content_key("fuse", &(&cam_key, depth))?;
    let fused_index_path = run_dir.join("fused").join("index.json");
    let _fused: FusedIndex = ctx.stage(
        "fuse",
        &fuse_key,
        || read_json(&fused_index_path),
        || {
            let mut index = FusedIndex::new();
            for (split, images) in &map_index {
                for (id, cats) in images {
                    for (cat, entry) in cats {
                        let rel = PathBuf::from("fused")
                            .join(split)
                            .join(id)
                            .join(format!("{cat}.bin"));
                        let fused = fuse_entry(&run_dir, entry, depth)?;
                        let c = hierarchy
                            .categories
                            .iter()
                            .position(|n| n == cat)
                            .ok_or_else(|| Error::Lookup(cat.clone()))?;
                        save_map(&run_dir.join(&rel), &fused, depth, c)?;
                        index
                            .entry(split.clone())
                            .or_default()
                            .entry(id.clone())
                            .or_default()
                            .insert(cat.clone(), rel);
                    }
                }
            }
            write_json(&fused_index_path, &index)?;
            Ok((index, vec![fused_index_path.clone()]))
        },
    )?;

    // eval
    let eval_key = content_key("eval", &(&fuse_key, &cfg.eval))?;
    ctx.stage(
        "eval",
        &eval_key,
        || Ok(()),
        || {
            let fused_index: FusedIndex = read_json(&fused_index_path)?;
            let mut artifacts = Vec::new();
            for name in &split_names {
                let data = split_data(name);
                let entries = &map_index[*name];
                let mut depth_reports = Vec::new();
                for d in 0..=depth {
                    depth_reports.push(evaluate_from_index(cfg, data, entries, |e| {
                        fuse_entry(&run_dir, e, d)
                    })?);
                }
                let fused_paths = &fused_index[*name];
                let fused = evaluate(data, &cfg.eval, |s, c| {
                    let rel = fused_paths
                        .get(&s.id)
                        .and_then(|m| m.get(&data.categories[c]))
                        .ok_or_else(|| Error::State(format!("no fused map for {}", s.id)))?;
                    load_rel(&run_dir, rel)
                })?;
                let reports = SplitReports {
                    baseline: depth_reports[0].clone(),
                    fused,
                    depth: depth_reports,
                };
                for (what, r) in [("baseline", &reports.baseline), ("fused", &reports.fused)] {
                    let p = reports_path(&run_dir, name, what);
                    write_json(&p, r)?;
                    artifacts.push(p);
                }
                let p = reports_path(&run_dir, name, "depth");
                write_json(&p, &reports.depth)?;
                artifacts.push(p);
            }
            Ok(((), artifacts))
        },
    )?;

    // report
    let report_key = content_key("report", &(&eval_key, cfg.panels))?;
    let manifest_so_far = ctx.manifest.clone();
    ctx.stage(
        "report",
        &report_key,
        || Ok(()),
        || {
            let artifacts = emit_report(&manifest_so_far)?;
            Ok(((), artifacts))
        },
    )?;
    Ok(ctx.manifest)
}

/// The four on/off combinations of the two switches, in table order.
pub const ABLATION_GRID: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("clustering", true, false),
    ("orthogonal", false, true),
    ("both", true, true),
];

/// Runs every ablation configuration under `cfg.output_dir/<name>` with a
/// shared cache, then writes the combined table.
pub fn run_ablation_grid(cfg: &RunConfig) -> Result<(Vec<RunManifest>, Vec<PathBuf>)> {
    let cache = cfg.cache_dir();
    let mut manifests = Vec::new();
    for (name, clustering, orthogonal) in ABLATION_GRID {
        let run = RunConfig {
            use_clustering: clustering,
            use_orthogonal: orthogonal,
            output_dir: cfg.output_dir.join(name),
            cache_dir: Some(cache.clone()),
            ..cfg.clone()
        };
        log::info!("ablation run {name}");
        manifests.push(run_pipeline(&run)?);
    }
    let files = emit_ablation_report(&manifests, &cfg.output_dir)?;
    Ok((manifests, files))
}
