use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use classgroup_cam::cam::RestAggregation;
use classgroup_cam::classifier::{Checkpoint, LevelMeta, TrainingSet};
use classgroup_cam::dataset::{export_voc_style, load_voc_style, Dataset, NormalizationSpec};
use classgroup_cam::eval::evaluate;
use classgroup_cam::hierarchy::{build_hierarchy_with, CategoryHierarchy};
use classgroup_cam::pipeline::{
    emit_report, evaluate_from_index, extract_maps, fuse_entry, run_ablation_grid, run_pipeline,
    synthetic_splits, train_level, DatasetSource, FusedIndex, MapIndex, PresenceSource, RunConfig,
    RunManifest, VocSource,
};

#[derive(Parser)]
#[command(name = "cgcam", version, about = "Multi-level class-grouping CAMs")]
struct Cli {
    /// JSON run config. Missing fields keep their defaults; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config field by dotted path, e.g. `--set train.momentum=0.8`.
    #[arg(long = "set", global = true, value_name = "PATH=JSON")]
    sets: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or import a dataset with `train` and `eval` splits.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Category hierarchy construction.
    Hierarchy {
        #[command(subcommand)]
        cmd: HierarchyCmd,
    },
    /// Train one level's classifier.
    Train(TrainCmd),
    /// Activation map extraction.
    Cam {
        #[command(subcommand)]
        cmd: CamCmd,
    },
    /// Fuse extracted level maps.
    Fuse(FuseCmd),
    /// Score maps against ground-truth masks.
    Eval(EvalCmd),
    /// Re-emit tables and panels of a finished run.
    Report(ReportCmd),
    /// Run every stage, resuming where a previous run stopped.
    RunAll(RunAllCmd),
    /// Run the four on/off combinations of clustering and the orthogonal loss.
    AblationGrid(GridCmd),
    /// Print the resolved config as JSON.
    ShowConfig(RunArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    Import {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Subcommand)]
enum HierarchyCmd {
    Build {
        /// Directory holding the `train` split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long, default_value_t = 0)]
    level: usize,
    /// 1 or 2; defaults to 2 unless the orthogonal module is off.
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Subcommand)]
enum CamCmd {
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        hierarchy: PathBuf,
        /// Checkpoints for levels 0, 1, ... in order.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Run directory receiving `maps/`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cam: CamArgs,
    },
}

#[derive(Args)]
struct FuseCmd {
    /// Run directory with `maps/index.json`.
    #[arg(long)]
    run: PathBuf,
    /// Levels fused on top of level 0; all available by default.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Score the stored fused maps instead of level 0.
    #[arg(long)]
    fused: bool,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct RunAllCmd {
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GridCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Default)]
struct DataArgs {
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    textures: Option<usize>,
    #[arg(long)]
    train_per_category: Option<usize>,
    #[arg(long)]
    eval_per_category: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    objects_min: Option<usize>,
    #[arg(long)]
    objects_max: Option<usize>,
    /// Use a dataset on disk instead of synthetic data.
    #[arg(long)]
    voc_root: Option<PathBuf>,
    #[arg(long)]
    train_split: Option<String>,
    #[arg(long)]
    eval_split: Option<String>,
    /// Resize the short side to this many pixels (requires --crop-size).
    #[arg(long, requires = "crop_size")]
    short_side: Option<usize>,
    #[arg(long, requires = "short_side")]
    crop_size: Option<usize>,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    initial_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    plateau_window: Option<usize>,
    #[arg(long)]
    plateau_threshold: Option<f64>,
    #[arg(long)]
    lr_decay_ratio: Option<f64>,
    #[arg(long)]
    lambda_orth: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Comma-separated cluster counts, starting with the category count.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    kmeans_max_iters: Option<usize>,
    /// Cluster L2-normalised head weights.
    #[arg(long)]
    kmeans_normalize: bool,
    #[arg(long)]
    no_orthogonal: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    Max,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresenceArg {
    Predicted,
    GroundTruth,
}

#[derive(Args, Default)]
struct CamArgs {
    #[arg(long, value_enum)]
    rest_aggregation: Option<Aggregation>,
    /// Which other categories count as present for the rest-classes map.
    #[arg(long, value_enum)]
    presence: Option<PresenceArg>,
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_clustering: bool,
    #[arg(long)]
    threshold: Option<f64>,
    /// Skip scoring the training split.
    #[arg(long)]
    no_train_eval: bool,
    #[arg(long)]
    panels: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    cam: CamArgs,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("--set expects PATH=VALUE, got {assignment:?}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        let obj = slot
            .as_object_mut()
            .with_context(|| format!("--set {path}: {key:?} is not inside an object"))?;
        slot = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &cli.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, file);
    }
    for s in &cli.sets {
        apply_set(&mut value, s)?;
    }
    serde_json::from_value(value).context("invalid run config")
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(root) = &a.voc_root {
        let mut voc = VocSource {
            root: root.clone(),
            train_split: "train".into(),
            eval_split: "val".into(),
            normalization: None,
        };
        if let DatasetSource::Voc(existing) = &cfg.dataset {
            voc = VocSource {
                root: root.clone(),
                ..existing.clone()
            };
        }
        cfg.dataset = DatasetSource::Voc(voc);
    }
    match &mut cfg.dataset {
        DatasetSource::Synthetic(s) => {
            set(&mut s.shapes, a.shapes);
            set(&mut s.textures, a.textures);
            set(&mut s.train_per_category, a.train_per_category);
            set(&mut s.eval_per_category, a.eval_per_category);
            set(&mut s.image_size, a.image_size);
            set(&mut s.objects_per_image.0, a.objects_min);
            set(&mut s.objects_per_image.1, a.objects_max);
        }
        DatasetSource::Voc(v) => {
            set(&mut v.train_split, a.train_split.clone());
            set(&mut v.eval_split, a.eval_split.clone());
            if let (Some(short), Some(crop)) = (a.short_side, a.crop_size) {
                v.normalization = Some(NormalizationSpec {
                    target_short_side: short,
                    crop_size: crop,
                });
            }
        }
    }
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) {
    if let Some(levels) = &a.levels {
        cfg.level_sizes = Some(levels.clone());
    }
    set(&mut cfg.kmeans.restarts, a.kmeans_restarts);
    set(&mut cfg.kmeans.max_iters, a.kmeans_max_iters);
    if a.kmeans_normalize {
        cfg.kmeans.normalize = true;
    }
    if a.no_orthogonal {
        cfg.use_orthogonal = false;
    }
    let t = &a.train;
    let c = &mut cfg.train;
    set(&mut c.initial_lr, t.initial_lr);
    set(&mut c.batch_size, t.batch_size);
    set(&mut c.max_epochs, t.max_epochs);
    set(&mut c.plateau_window, t.plateau_window);
    set(&mut c.plateau_threshold, t.plateau_threshold);
    set(&mut c.lr_decay_ratio, t.lr_decay_ratio);
    set(&mut c.lambda_orth, t.lambda_orth);
    set(&mut c.momentum, t.momentum);
}

fn apply_cam(cfg: &mut RunConfig, a: &CamArgs) {
    if let Some(agg) = a.rest_aggregation {
        cfg.rest_aggregation = match agg {
            Aggregation::Max => RestAggregation::Max,
            Aggregation::Mean => RestAggregation::Mean,
        };
    }
    if let Some(p) = a.presence {
        cfg.rest_presence = match p {
            PresenceArg::Predicted => PresenceSource::Predicted,
            PresenceArg::GroundTruth => PresenceSource::GroundTruth,
        };
    }
}

fn apply_run(cfg: &mut RunConfig, a: &RunArgs) {
    set(&mut cfg.output_dir, a.out.clone());
    if let Some(c) = &a.cache {
        cfg.cache_dir = Some(c.clone());
    }
    if a.no_clustering {
        cfg.use_clustering = false;
    }
    set(&mut cfg.eval.threshold, a.threshold);
    if a.no_train_eval {
        cfg.eval_train_split = false;
    }
    set(&mut cfg.panels, a.panels);
    apply_data(cfg, &a.data);
    apply_model(cfg, &a.model);
    apply_cam(cfg, &a.cam);
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn print_summary(m: &RunManifest) -> Result<()> {
    let base: classgroup_cam::eval::EvalReport =
        read_json(&m.artifact("eval", "eval_baseline.json")?)?;
    let fused: classgroup_cam::eval::EvalReport =
        read_json(&m.artifact("eval", "eval_fused.json")?)?;
    println!(
        "{}: baseline mIoU {:.2} mLEV {:.2} | fused mIoU {:.2} mLEV {:.2}",
        m.run_dir.display(),
        100.0 * base.miou,
        100.0 * base.mlev,
        100.0 * fused.miou,
        100.0 * fused.mlev
    );
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(data: &Path, split: &str) -> Result<Dataset> {
    load_voc_style(data, split)
        .with_context(|| format!("loading split {split:?} of {}", data.display()))
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<classgroup_cam::classifier::Classifier>> {
    paths
        .iter()
        .map(|p| {
            Checkpoint::load(p)
                .map(|c| c.model)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Dataset { cmd } => match cmd {
            DatasetCmd::Generate { out, seed, data } => {
                set(&mut cfg.seed, seed);
                apply_data(&mut cfg, &data);
                let DatasetSource::Synthetic(source) = &cfg.dataset else {
                    bail!("dataset generate needs a synthetic source");
                };
                let (train, eval) = synthetic_splits(source, cfg.seed)?;
                export_voc_style(&train, &out, "train")?;
                export_voc_style(&eval, &out, "eval")?;
                println!(
                    "wrote {} train and {} eval images to {}",
                    train.len(),
                    eval.len(),
                    out.display()
                );
            }
            DatasetCmd::Import { out, data } => {
                if data.voc_root.is_none() && !matches!(cfg.dataset, DatasetSource::Voc(_)) {
                    bail!("dataset import needs --voc-root");
                }
                apply_data(&mut cfg, &data);
                let DatasetSource::Voc(v) = &cfg.dataset else {
                    unreachable!("voc source set above");
                };
                for (from, to) in [(&v.train_split, "train"), (&v.eval_split, "eval")] {
                    let mut d = load_split(&v.root, from)?;
                    if let Some(n) = &v.normalization {
                        d = d.normalized(n)?;
                    }
                    export_voc_style(&d, &out, to)?;
                    println!("{from}: {} images -> {}", d.len(), out.join(to).display());
                }
            }
        },
        Command::Hierarchy {
            cmd:
                HierarchyCmd::Build {
                    data,
                    out,
                    seed,
                    model,
                },
        } => {
            set(&mut cfg.seed, seed);
            apply_model(&mut cfg, &model);
            let train_set = load_split(&data, "train")?;
            let sizes = cfg.resolved_level_sizes(train_set.n_categories());
            let backbone = cfg.resolved_backbone(&train_set)?;
            let tcfg = cfg.effective_train();
            let mut checkpoints = Vec::new();
            let build = build_hierarchy_with(
                &train_set,
                &sizes,
                &cfg.kmeans,
                cfg.seed,
                |level, assignment, set| {
                    let (model, history) = train_level(set, level, 1, &backbone, &tcfg)?;
                    let path = out.join(format!("level{level}.bin"));
                    let ck = Checkpoint {
                        model,
                        train_config: tcfg.clone(),
                        level: LevelMeta {
                            level,
                            n_clusters: set.n_labels(),
                            category_to_cluster: assignment.to_vec(),
                        },
                        history,
                    };
                    ck.save(&path)?;
                    checkpoints.push(Some(path.display().to_string()));
                    Ok((ck.model, ck.history))
                },
            )?;
            let mut h = build.hierarchy;
            checkpoints.resize(h.levels.len(), None);
            h.checkpoints = checkpoints;
            let path = out.join("hierarchy.json");
            h.save(&path)?;
            for l in 1..h.levels.len() {
                println!("level {l}: {:?}", h.groups(l)?);
            }
            println!("wrote {}", path.display());
        }
        Command::Train(t) => {
            set(&mut cfg.seed, t.seed);
            apply_model(&mut cfg, &t.model);
            let data = load_split(&t.data, "train")?;
            let h = CategoryHierarchy::load(&t.hierarchy)?;
            let assignment = h.composed(t.level)?;
            let n_labels = h.levels[t.level].n_clusters;
            let branches = t.branches.unwrap_or(if cfg.use_orthogonal { 2 } else { 1 });
            let backbone = cfg.resolved_backbone(&data)?;
            let set = TrainingSet::new(&data, Some((&assignment, n_labels)))?;
            let mut tcfg = cfg.effective_train();
            if branches == 1 {
                tcfg.lambda_orth = 0.0;
            }
            let (model, history) = train_level(&set, t.level, branches, &backbone, &tcfg)?;
            if let Some(last) = history.last() {
                println!("epoch {} loss {:.5}", last.epoch, last.loss.l_all);
            }
            Checkpoint {
                model,
                train_config: tcfg,
                level: LevelMeta {
                    level: t.level,
                    n_clusters: n_labels,
                    category_to_cluster: assignment,
                },
                history,
            }
            .save(&t.out)?;
            println!("wrote {}", t.out.display());
        }
        Command::Cam {
            cmd:
                CamCmd::Extract {
                    data,
                    split,
                    hierarchy,
                    models,
                    out,
                    cam,
                },
        } => {
            apply_cam(&mut cfg, &cam);
            let dataset = load_split(&data, &split)?;
            let h = CategoryHierarchy::load(&hierarchy)?;
            if models.len() > h.levels.len() {
                bail!(
                    "{} models given for a {}-level hierarchy",
                    models.len(),
                    h.levels.len()
                );
            }
            let models = load_models(&models)?;
            let entries = extract_maps(&cfg, &out, &split, &dataset, &h, &models)?;
            let index_path = out.join("maps").join("index.json");
            let mut index: MapIndex = if index_path.exists() {
                read_json(&index_path)?
            } else {
                MapIndex::new()
            };
            let pairs: usize = entries.values().map(|m| m.len()).sum();
            index.insert(split.clone(), entries);
            write_json(&index_path, &index)?;
            println!(
                "{pairs} (image, category) pairs of {split} -> {}",
                index_path.display()
            );
        }
        Command::Fuse(f) => {
            let index: MapIndex = read_json(&f.run.join("maps").join("index.json"))?;
            let mut fused = FusedIndex::new();
            for (split, images) in &index {
                for (id, cats) in images {
                    for (cat, entry) in cats {
                        let depth = f.depth.unwrap_or(entry.levels.len() - 1);
                        let map = fuse_entry(&f.run, entry, depth)?;
                        let rel = PathBuf::from("fused")
                            .join(split)
                            .join(id)
                            .join(format!("{cat}.bin"));
                        classgroup_cam::cam::save_map(&f.run.join(&rel), &map, depth, 0)?;
                        fused
                            .entry(split.clone())
                            .or_default()
                            .entry(id.clone())
                            .or_default()
                            .insert(cat.clone(), rel);
                    }
                }
            }
            let path = f.run.join("fused").join("index.json");
            write_json(&path, &fused)?;
            println!("wrote {}", path.display());
        }
        Command::Eval(e) => {
            set(&mut cfg.eval.threshold, e.threshold);
            let dataset = load_split(&e.data, &e.split)?;
            let report = if e.fused {
                let index: FusedIndex = read_json(&e.run.join("fused").join("index.json"))?;
                let paths = index
                    .get(&e.split)
                    .with_context(|| format!("no fused maps for split {}", e.split))?;
                evaluate(&dataset, &cfg.eval, |s, c| {
                    let rel = paths
                        .get(&s.id)
                        .and_then(|m| m.get(&dataset.categories[c]))
                        .ok_or_else(|| {
                            classgroup_cam::Error::State(format!("no fused map for {}", s.id))
                        })?;
                    Ok(classgroup_cam::cam::load_map(&e.run.join(rel))?.0)
                })?
            } else {
                let index: MapIndex = read_json(&e.run.join("maps").join("index.json"))?;
                let entries = index
                    .get(&e.split)
                    .with_context(|| format!("no maps for split {}", e.split))?;
                evaluate_from_index(&cfg, &dataset, entries, |entry| {
                    fuse_entry(&e.run, entry, 0)
                })?
            };
            println!("mIoU {:.4}  mLEV {:.4}", report.miou, report.mlev);
            if let Some(out) = &e.out {
                write_json(out, &report)?;
            }
        }
        Command::Report(r) => {
            let manifest = RunManifest::load(&r.run)?;
            for f in emit_report(&manifest)? {
                println!("{}", f.display());
            }
        }
        Command::RunAll(r) => {
            cfg.seed = r.seed;
            apply_run(&mut cfg, &r.run);
            let manifest = run_pipeline(&cfg)?;
            print_summary(&manifest)?;
        }
        Command::AblationGrid(g) => {
            set(&mut cfg.seed, g.seed);
            apply_run(&mut cfg, &g.run);
            let (manifests, files) = run_ablation_grid(&cfg)?;
            for m in &manifests {
                print_summary(m)?;
            }
            if let Some(table) = files.first() {
                print!("{}", std::fs::read_to_string(table)?);
            }
        }
        Command::ShowConfig(r) => {
            apply_run(&mut cfg, &r);
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
