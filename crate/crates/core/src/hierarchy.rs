//! Category hierarchy from K-means over classifier head weights.
//!
//! Level 0 is the identity over the base categories. Level `l` clusters the
//! output nodes of a classifier trained on level `l-1` labels, so every level
//! is a partition of the previous level's nodes and, by composition, of the
//! base categories.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    extract_category_features, train_single_branch, BackboneSpec, Classifier, EpochLog,
    TrainConfig, TrainingSet,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// K-means settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub restarts: usize,
    /// L2-normalise feature rows first (cosine geometry).
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            restarts: 10,
            normalize: false,
        }
    }
}

/// One K-means partition of the previous level's nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub level_index: usize,
    pub n_clusters: usize,
    /// Node of the previous level to cluster id in `0..n_clusters`.
    pub assignment: Vec<usize>,
    /// `(n_clusters, n_k)` cluster means.
    pub centers: Array2<f64>,
    /// Sum of squared distances of members to their centres.
    pub objective: f64,
    /// Objective after every Lloyd update, one trace per restart.
    #[serde(default)]
    pub restart_traces: Vec<Vec<f64>>,
}

impl Clustering {
    pub fn identity(n: usize) -> Self {
        Self {
            level_index: 0,
            n_clusters: n,
            assignment: (0..n).collect(),
            centers: Array2::zeros((n, 0)),
            objective: 0.0,
            restart_traces: Vec::new(),
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances of every row to its assigned centre.
pub fn kmeans_objective(
    points: ArrayView2<'_, f64>,
    assignment: &[usize],
    centers: ArrayView2<'_, f64>,
) -> f64 {
    points
        .outer_iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, centers.row(a)))
        .sum()
}

fn nearest(points: ArrayView2<'_, f64>, centers: &Array2<f64>) -> Vec<usize> {
    points
        .outer_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.outer_iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn means(points: ArrayView2<'_, f64>, assignment: &[usize], k: usize) -> Array2<f64> {
    let mut centers = Array2::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &a) in points.outer_iter().zip(assignment) {
        let mut row = centers.row_mut(a);
        row += &p;
        counts[a] += 1;
    }
    for (mut row, &n) in centers.outer_iter_mut().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }
    centers
}

/// Moves the point farthest from its centre (taken from a cluster with more
/// than one member) into each empty cluster.
fn fill_empty(points: ArrayView2<'_, f64>, assignment: &mut [usize], centers: &mut Array2<f64>) {
    let k = centers.nrows();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.outer_iter().enumerate() {
            if counts[assignment[i]] > 1 {
                let d = sq_dist(p, centers.row(assignment[i]));
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let Some(i) = far else { return };
        assignment[i] = empty;
        centers.row_mut(empty).assign(&points.row(i));
    }
}

fn plus_plus_init(points: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            if d2[pick] <= 0.0 {
                d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

struct Run {
    assignment: Vec<usize>,
    centers: Array2<f64>,
    objective: f64,
    trace: Vec<f64>,
}

fn lloyd(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, rng: &mut impl Rng) -> Run {
    let mut centers = plus_plus_init(points, k, rng);
    let mut assignment = nearest(points, &centers);
    fill_empty(points, &mut assignment, &mut centers);
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        centers = means(points, &assignment, k);
        trace.push(kmeans_objective(points, &assignment, centers.view()));
        let mut next = nearest(points, &centers);
        fill_empty(points, &mut next, &mut centers);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    centers = means(points, &assignment, k);
    let objective = kmeans_objective(points, &assignment, centers.view());
    if trace.last() != Some(&objective) {
        trace.push(objective);
    }
    Run {
        assignment,
        centers,
        objective,
        trace,
    }
}

/// Relabels clusters in order of first appearance.
fn canonicalize(run: &mut Run) {
    let k = run.centers.nrows();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &a in &run.assignment {
        if map[a] == usize::MAX {
            map[a] = next;
            next += 1;
        }
    }
    let mut centers = Array2::zeros(run.centers.dim());
    for (old, &new) in map.iter().enumerate() {
        if new != usize::MAX {
            centers.row_mut(new).assign(&run.centers.row(old));
        }
    }
    for a in &mut run.assignment {
        *a = map[*a];
    }
    run.centers = centers;
}

/// Lloyd's algorithm with k-means++ seeding; the best of `cfg.restarts` runs
/// by objective. Rows of `features` are the items to cluster.
pub fn kmeans(
    features: ArrayView2<'_, f64>,
    n_clusters: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Clustering> {
    let n = features.nrows();
    if n_clusters < 1 {
        return Err(Error::Config("K-means needs at least one cluster".into()));
    }
    if n_clusters > n {
        return Err(Error::Config(format!(
            "{n_clusters} clusters requested for {n} features"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite category feature".into()));
    }
    let points = if cfg.normalize {
        let mut p = features.to_owned();
        for mut row in p.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        p
    } else {
        features.to_owned()
    };

    let mut best: Option<Run> = None;
    let mut traces = Vec::with_capacity(cfg.restarts.max(1));
    for r in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let run = lloyd(points.view(), n_clusters, cfg.max_iters.max(1), &mut rng);
        traces.push(run.trace.clone());
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    canonicalize(&mut best);
    Ok(Clustering {
        level_index: 0,
        n_clusters,
        assignment: best.assignment,
        centers: best.centers,
        objective: best.objective,
        restart_traces: traces,
    })
}

/// OR-folds a multi-hot vector over the previous level's nodes into clusters.
pub fn remap_labels(labels: &[bool], clustering: &Clustering) -> Result<Vec<bool>> {
    if labels.len() != clustering.assignment.len() {
        return Err(Error::Contract(format!(
            "{} labels for a clustering over {} nodes",
            labels.len(),
            clustering.assignment.len()
        )));
    }
    let mut out = vec![false; clustering.n_clusters];
    for (&on, &c) in labels.iter().zip(&clustering.assignment) {
        out[c] |= on;
    }
    Ok(out)
}

/// Ordered clusterings from the identity level down to the coarsest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryHierarchy {
    pub categories: Vec<String>,
    pub levels: Vec<Clustering>,
    /// Checkpoint of the classifier trained on each level's labels, when persisted.
    #[serde(default)]
    pub checkpoints: Vec<Option<String>>,
}

impl CategoryHierarchy {
    pub fn identity(categories: Vec<String>) -> Self {
        let n = categories.len();
        Self {
            categories,
            levels: vec![Clustering::identity(n)],
            checkpoints: vec![None],
        }
    }

    /// Number of clustering applications.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.n_clusters).collect()
    }

    /// Base category to cluster at `level`.
    pub fn composed(&self, level: usize) -> Result<Vec<usize>> {
        if level >= self.levels.len() {
            return Err(Error::Lookup(format!(
                "level {level} out of range 0..={}",
                self.depth()
            )));
        }
        let mut map: Vec<usize> = (0..self.categories.len()).collect();
        for l in &self.levels[1..=level] {
            for m in &mut map {
                *m = l.assignment[*m];
            }
        }
        Ok(map)
    }

    pub fn cluster_of(&self, level: usize, category: usize) -> Result<usize> {
        if category >= self.categories.len() {
            return Err(Error::Lookup(format!("unknown category {category}")));
        }
        Ok(self.composed(level)?[category])
    }

    pub fn cluster_of_name(&self, level: usize, name: &str) -> Result<usize> {
        let idx = self
            .categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Lookup(format!("unknown category {name:?}")))?;
        self.cluster_of(level, idx)
    }

    /// Members (base category names) of each cluster at `level`.
    pub fn groups(&self, level: usize) -> Result<Vec<Vec<String>>> {
        let map = self.composed(level)?;
        let mut groups = vec![Vec::new(); self.levels[level].n_clusters];
        for (c, &g) in map.iter().enumerate() {
            groups[g].push(self.categories[c].clone());
        }
        Ok(groups)
    }

    pub fn to_file(&self) -> Result<HierarchyFile> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for (i, l) in self.levels.iter().enumerate() {
            let composed = self.composed(i)?;
            levels.push(HierarchyLevelFile {
                n_clusters: l.n_clusters,
                assignment: self.categories.iter().cloned().zip(composed).collect(),
                node_assignment: l.assignment.clone(),
                objective: l.objective,
                checkpoint: self.checkpoints.get(i).cloned().flatten(),
            });
        }
        Ok(HierarchyFile {
            categories: self.categories.clone(),
            level_sizes: self.level_sizes(),
            levels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()?)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads the JSON form. Cluster centres are not stored there and come back empty.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: HierarchyFile = serde_json::from_str(&text)?;
        let mut levels = Vec::with_capacity(file.levels.len());
        let mut checkpoints = Vec::with_capacity(file.levels.len());
        for (i, l) in file.levels.into_iter().enumerate() {
            levels.push(Clustering {
                level_index: i,
                n_clusters: l.n_clusters,
                assignment: l.node_assignment,
                centers: Array2::zeros((l.n_clusters, 0)),
                objective: l.objective,
                restart_traces: Vec::new(),
            });
            checkpoints.push(l.checkpoint);
        }
        let h = Self {
            categories: file.categories,
            levels,
            checkpoints,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .levels
            .first()
            .ok_or_else(|| Error::Format("hierarchy has no levels".into()))?;
        if first.assignment != (0..self.categories.len()).collect::<Vec<_>>() {
            return Err(Error::Format("level 0 is not the identity".into()));
        }
        for w in self.levels.windows(2) {
            if w[1].n_clusters >= w[0].n_clusters {
                return Err(Error::Format("level sizes must strictly decrease".into()));
            }
            if w[1].assignment.len() != w[0].n_clusters
                || w[1].assignment.iter().any(|&a| a >= w[1].n_clusters)
                || w[1].cluster_sizes().contains(&0)
            {
                return Err(Error::Format("inconsistent level assignment".into()));
            }
        }
        Ok(())
    }
}

/// JSON layout of a persisted hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyFile {
    pub categories: Vec<String>,
    pub level_sizes: Vec<usize>,
    pub levels: Vec<HierarchyLevelFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyLevelFile {
    pub n_clusters: usize,
    /// Base category name to cluster index at this level.
    pub assignment: BTreeMap<String, usize>,
    /// Previous-level node to cluster index.
    pub node_assignment: Vec<usize>,
    pub objective: f64,
    pub checkpoint: Option<String>,
}

/// A hierarchy together with the single-branch classifiers trained per level.
#[derive(Debug, Clone)]
pub struct HierarchyBuild {
    pub hierarchy: CategoryHierarchy,
    /// `models[l]` was trained on level-`l` labels; the coarsest level has none.
    pub models: Vec<(Classifier, Vec<EpochLog>)>,
}

pub fn validate_level_sizes(level_sizes: &[usize], n_categories: usize) -> Result<()> {
    match level_sizes.first() {
        Some(&n) if n == n_categories => {}
        _ => {
            return Err(Error::Config(format!(
                "level sizes must start with the category count {n_categories}"
            )))
        }
    }
    if level_sizes.windows(2).any(|w| w[1] >= w[0] || w[1] == 0) {
        return Err(Error::Config(format!(
            "level sizes {level_sizes:?} must be positive and strictly decreasing"
        )));
    }
    Ok(())
}

/// Builds the hierarchy with a caller-supplied trainer
/// `(level, category_to_node, set) -> model`.
pub fn build_hierarchy_with<F>(
    dataset: &Dataset,
    level_sizes: &[usize],
    kmeans_cfg: &KMeansConfig,
    seed: u64,
    mut trainer: F,
) -> Result<HierarchyBuild>
where
    F: FnMut(usize, &[usize], &TrainingSet) -> Result<(Classifier, Vec<EpochLog>)>,
{
    validate_level_sizes(level_sizes, dataset.n_categories())?;
    let mut hierarchy = CategoryHierarchy::identity(dataset.categories.clone());
    let mut models = Vec::new();
    for (level, &n_clusters) in level_sizes.iter().enumerate().skip(1) {
        let prev = level - 1;
        let composed = hierarchy.composed(prev)?;
        let n_prev = hierarchy.levels[prev].n_clusters;
        let set = TrainingSet::new(dataset, Some((&composed, n_prev)))?;
        let (model, history) = trainer(prev, &composed, &set)?;
        let features = extract_category_features(&model);
        let mut clustering = kmeans(
            features.view(),
            n_clusters,
            derive_seed(seed, 0xC1u64 + level as u64),
            kmeans_cfg,
        )?;
        clustering.level_index = level;
        log::info!(
            "level {level}: {n_clusters} clusters, objective {:.4}",
            clustering.objective
        );
        hierarchy.levels.push(clustering);
        hierarchy.checkpoints.push(None);
        models.push((model, history));
    }
    Ok(HierarchyBuild { hierarchy, models })
}

/// Seed used for the level-`level` classifier of a run seeded with `seed`.
pub fn level_seed(seed: u64, level: usize) -> u64 {
    derive_seed(seed, level as u64)
}

/// Trains a single-branch classifier per level and clusters its head weights.
pub fn build_hierarchy(
    dataset: &Dataset,
    level_sizes: &[usize],
    backbone: &BackboneSpec,
    cfg: &TrainConfig,
    kmeans_cfg: &KMeansConfig,
) -> Result<HierarchyBuild> {
    build_hierarchy_with(
        dataset,
        level_sizes,
        kmeans_cfg,
        cfg.seed,
        |level, _, set| {
            let cfg = TrainConfig {
                seed: level_seed(cfg.seed, level),
                ..cfg.clone()
            };
            train_single_branch(backbone, set, &cfg)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distinct_vectors_as_clusters_fit_exactly() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [5.0, 5.0]];
        let c = kmeans(x.view(), 4, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(c.objective, 0.0);
        assert_eq!(c.assignment[2], c.assignment[3]);
        assert_eq!(c.cluster_sizes().iter().filter(|&&s| s > 0).count(), 4);
    }

    #[test]
    fn single_cluster_centre_is_the_mean() {
        let x = array![[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]];
        let c = kmeans(x.view(), 1, 4, &KMeansConfig::default()).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!((c.centers.row(0).to_owned() - &mean)
            .iter()
            .all(|d| d.abs() < 1e-12));
        let var: f64 = x.outer_iter().map(|r| sq_dist(r, mean.view())).sum();
        assert!((c.objective - var).abs() < 1e-12);
    }

    #[test]
    fn invalid_cluster_counts_are_config_errors() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(
            kmeans(x.view(), 0, 0, &KMeansConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            kmeans(x.view(), 3, 0, &KMeansConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // duplicates force k-means++ to fall back and clusters to be refilled
        let x = array![[0.0], [0.0], [0.0], [1.0]];
        let c = kmeans(x.view(), 3, 1, &KMeansConfig::default()).unwrap();
        assert!(c.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn remap_singleton_and_or_semantics() {
        let clustering = Clustering {
            level_index: 1,
            n_clusters: 2,
            assignment: vec![0, 0, 1, 1],
            centers: Array2::zeros((2, 0)),
            objective: 0.0,
            restart_traces: vec![],
        };
        assert_eq!(
            remap_labels(&[false, false, false, true], &clustering).unwrap(),
            vec![false, true]
        );
        assert_eq!(
            remap_labels(&[true, true, false, false], &clustering).unwrap(),
            vec![true, false]
        );
        assert!(matches!(
            remap_labels(&[true], &clustering),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_hierarchy_lookup() {
        let h = CategoryHierarchy::identity(vec!["a".into(), "b".into()]);
        assert_eq!(h.depth(), 0);
        assert_eq!(h.cluster_of(0, 1).unwrap(), 1);
        assert!(matches!(h.cluster_of(0, 5), Err(Error::Lookup(_))));
        assert!(matches!(h.cluster_of(1, 0), Err(Error::Lookup(_))));
    }

    #[test]
    fn level_size_validation() {
        assert!(validate_level_sizes(&[4, 2], 4).is_ok());
        assert!(validate_level_sizes(&[4, 4], 4).is_err());
        assert!(validate_level_sizes(&[3, 2], 4).is_err());
        assert!(validate_level_sizes(&[4, 5], 4).is_err());
    }
}
