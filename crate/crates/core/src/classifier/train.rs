use ndarray::{Array2, Array4, Axis, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    bce_with_logits, bce_with_logits_grad, sigmoid, total_loss, total_loss_grads, FeaturePair,
    LossBreakdown,
};
use super::{images_to_batch, BackboneSpec, Classifier};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BranchGrads, Sgd};
use crate::seed::derive_seed;

/// Optimisation settings. Defaults follow the reference training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs over which the relative loss decrease is measured.
    pub plateau_window: usize,
    /// Minimum relative decrease of the epoch loss over `plateau_window`
    /// epochs; below it the learning rate decays.
    pub plateau_threshold: f64,
    pub lr_decay_ratio: f64,
    /// Weight of the feature-orthogonal loss.
    pub lambda_orth: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            batch_size: 20,
            max_epochs: 100,
            plateau_window: 5,
            plateau_threshold: 1e-3,
            lr_decay_ratio: 0.5,
            lambda_orth: 1e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be positive and finite");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_window == 0 {
            return bad("batch_size, max_epochs and plateau_window must be positive");
        }
        if !(self.plateau_threshold > 0.0) {
            return bad("plateau_threshold must be positive");
        }
        if !(self.lr_decay_ratio > 0.0 && self.lr_decay_ratio < 1.0) {
            return bad("lr_decay_ratio must lie in (0, 1)");
        }
        if !(self.lambda_orth >= 0.0) || !self.lambda_orth.is_finite() {
            return bad("lambda_orth must be nonnegative and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate rule.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    window: usize,
    threshold: f64,
    ratio: f64,
    since_change: usize,
    decays: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.initial_lr,
            window: cfg.plateau_window,
            threshold: cfg.plateau_threshold,
            ratio: cfg.lr_decay_ratio,
            since_change: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Records the loss of the epoch that just finished. `losses` holds every
    /// epoch loss so far, including this one.
    pub fn observe(&mut self, losses: &[f64]) {
        self.since_change += 1;
        if self.since_change < self.window || losses.len() <= self.window {
            return;
        }
        let now = losses[losses.len() - 1];
        let before = losses[losses.len() - 1 - self.window];
        let rel = (before - now) / before.abs().max(f64::MIN_POSITIVE);
        if !(rel >= self.threshold) {
            self.lr *= self.ratio;
            self.decays += 1;
            self.since_change = 0;
        }
    }
}

/// Epoch-mean losses and the learning rate used during the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Image tensor plus target matrix for one hierarchy level.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Array4<f64>,
    pub targets: Array2<f64>,
}

impl TrainingSet {
    /// Uses each sample's labels folded through `assignment` (category to
    /// node), or the raw labels when `assignment` is `None`.
    pub fn new(dataset: &Dataset, assignment: Option<(&[usize], usize)>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let n_labels = assignment.map_or(dataset.n_categories(), |(_, n)| n);
        let mut targets = Array2::zeros((dataset.len(), n_labels));
        for (i, s) in dataset.samples.iter().enumerate() {
            for c in s.present() {
                let node = match assignment {
                    Some((map, _)) => *map.get(c).ok_or_else(|| {
                        Error::Contract(format!("category {c} missing from assignment"))
                    })?,
                    None => c,
                };
                targets[[i, node]] = 1.0;
            }
        }
        Ok(Self {
            inputs: images_to_batch(&dataset.samples),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_labels(&self) -> usize {
        self.targets.ncols()
    }

    fn batch(&self, idx: &[usize]) -> (Array4<f64>, Array2<f64>) {
        (
            self.inputs.select(Axis(0), idx),
            self.targets.select(Axis(0), idx),
        )
    }
}

fn to_4d(a: ndarray::ArrayD<f64>) -> Array4<f64> {
    a.into_dimensionality::<Ix4>().expect("4-d features")
}

/// Minibatch SGD on BCE (plus `λ·L_o` when the model has two branches).
pub fn train(
    model: &mut Classifier,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if set.n_labels() != model.n_labels() {
        return Err(Error::Contract(format!(
            "targets have {} labels, model has {}",
            set.n_labels(),
            model.n_labels()
        )));
    }
    model.check_input(&set.inputs.view())?;

    let two = model.is_two_branch();
    let mut opts: Vec<Sgd> = model
        .branches
        .iter()
        .map(|b| Sgd::new(b, cfg.momentum))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut schedule = PlateauSchedule::new(cfg);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut epoch_losses = Vec::with_capacity(cfg.max_epochs);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = schedule.lr();
        let mut sum = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = set.batch(idx);
            let traces: Vec<_> = model
                .branches
                .iter()
                .map(|b| b.backbone.forward(x.view()))
                .collect();
            let heads: Vec<_> = model
                .branches
                .iter()
                .zip(&traces)
                .map(|(b, t)| b.head.forward(t.features().view()))
                .collect();

            let (breakdown, grad_logits, grad_feats) = if two {
                let pair = FeaturePair::new(
                    traces[0].features().view().into_dyn(),
                    traces[1].features().view().into_dyn(),
                )?;
                let bd = total_loss(
                    heads[0].1.view(),
                    heads[1].1.view(),
                    y.view(),
                    &pair,
                    cfg.lambda_orth,
                )?;
                let g = total_loss_grads(
                    heads[0].1.view(),
                    heads[1].1.view(),
                    y.view(),
                    &pair,
                    cfg.lambda_orth,
                )?;
                (
                    bd,
                    vec![g.logits1, g.logits2],
                    vec![Some(to_4d(g.f1)), Some(to_4d(g.f2))],
                )
            } else {
                let l = bce_with_logits(heads[0].1.view(), y.view())?;
                let bd = LossBreakdown {
                    l_c1: l,
                    l_c2: 0.0,
                    l_o: 0.0,
                    l_all: l,
                };
                (
                    bd,
                    vec![bce_with_logits_grad(heads[0].1.view(), y.view())],
                    vec![None],
                )
            };
            if !breakdown.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss {breakdown:?}"),
                });
            }

            for (i, branch) in model.branches.iter_mut().enumerate() {
                let trace = &traces[i];
                let hg = branch
                    .head
                    .backward(&heads[i].0, trace.features().dim(), &grad_logits[i]);
                let mut dfeat = hg.features;
                if let Some(extra) = &grad_feats[i] {
                    dfeat += extra;
                }
                let convs = branch.backbone.backward(trace, dfeat);
                let grads = BranchGrads {
                    convs,
                    head_weight: hg.weight,
                    head_bias: hg.bias,
                };
                opts[i].step(branch, &grads, lr);
            }

            let w = idx.len() as f64;
            sum.l_c1 += breakdown.l_c1 * w;
            sum.l_c2 += breakdown.l_c2 * w;
            sum.l_o += breakdown.l_o * w;
            sum.l_all += breakdown.l_all * w;
        }
        let n = set.len() as f64;
        let mean = LossBreakdown {
            l_c1: sum.l_c1 / n,
            l_c2: sum.l_c2 / n,
            l_o: sum.l_o / n,
            l_all: sum.l_all / n,
        };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {:.5}", mean.l_all);
        history.push(EpochLog {
            epoch,
            lr,
            loss: mean,
        });
        epoch_losses.push(mean.l_all);
        schedule.observe(&epoch_losses);
    }
    Ok(history)
}

/// Builds and trains a one-branch model; `λ` plays no role.
pub fn train_single_branch(
    backbone: &BackboneSpec,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(Classifier, Vec<EpochLog>)> {
    let mut model = Classifier::single_branch(set.n_labels(), backbone, cfg.seed)?;
    let history = train(&mut model, set, cfg)?;
    Ok((model, history))
}

/// Fraction of label entries where `p > 0.5` agrees with the target.
pub fn accuracy(model: &Classifier, set: &TrainingSet) -> Result<f64> {
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(set.len())).collect();
        let (x, y) = set.batch(&idx);
        let out = model.forward(x.view())?;
        let n = out.logits.len() as f64;
        let mut p = Array2::<f64>::zeros(y.dim());
        for l in &out.logits {
            p += &l.mapv(sigmoid);
        }
        p /= n;
        correct += p
            .iter()
            .zip(y.iter())
            .filter(|(&p, &t)| (p > 0.5) == (t == 1.0))
            .count();
    }
    Ok(correct as f64 / set.targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_threshold_decays_every_window() {
        let cfg = TrainConfig {
            plateau_threshold: f64::INFINITY,
            plateau_window: 3,
            ..TrainConfig::default()
        };
        let mut s = PlateauSchedule::new(&cfg);
        let mut losses = Vec::new();
        let mut lrs = Vec::new();
        for e in 0..10 {
            lrs.push(s.lr());
            losses.push(10.0 - e as f64);
            s.observe(&losses);
        }
        // first check possible after window+1 epochs
        assert_eq!(lrs[..4], [1e-4; 4]);
        assert_eq!(lrs[4..7], [5e-5; 3]);
        assert_eq!(lrs[7..10], [2.5e-5; 3]);
    }

    #[test]
    fn steady_decrease_keeps_lr() {
        let cfg = TrainConfig::default();
        let mut s = PlateauSchedule::new(&cfg);
        let mut losses = Vec::new();
        for e in 0..20 {
            losses.push(1.0 * 0.9f64.powi(e));
            s.observe(&losses);
        }
        assert_eq!(s.decays(), 0);
        assert_eq!(s.lr(), cfg.initial_lr);
    }

    #[test]
    fn flat_loss_decays_and_lr_is_geometric() {
        let cfg = TrainConfig::default();
        let mut s = PlateauSchedule::new(&cfg);
        let mut losses = Vec::new();
        let mut prev = s.lr();
        for _ in 0..40 {
            losses.push(1.0);
            s.observe(&losses);
            assert!(s.lr() <= prev);
            prev = s.lr();
            let expect = cfg.initial_lr * cfg.lr_decay_ratio.powi(s.decays() as i32);
            assert_eq!(s.lr(), expect);
        }
        assert!(s.decays() >= 6);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            lr_decay_ratio: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
