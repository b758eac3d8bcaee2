//! Model checkpoints stored in the array container (f64 payload).

use std::path::Path;

use ndarray::{ArrayD, Dimension};
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, Classifier, EpochLog, TrainConfig};
use crate::container::{Container, DType};
use crate::error::{Error, Result};

/// Which hierarchy level a model was trained for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMeta {
    pub level: usize,
    pub n_clusters: usize,
    /// Cluster index of every base category at this level.
    pub category_to_cluster: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    n_branches: usize,
    n_labels: usize,
    backbone: BackboneSpec,
    train_config: TrainConfig,
    level: LevelMeta,
    history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Classifier,
    pub train_config: TrainConfig,
    pub level: LevelMeta,
    pub history: Vec<EpochLog>,
}

fn array_names(model: &Classifier) -> Vec<String> {
    let mut names = Vec::new();
    for (b, branch) in model.branches.iter().enumerate() {
        for l in 0..branch.backbone.layers.len() {
            names.push(format!("branch{b}.conv{l}.weight"));
            names.push(format!("branch{b}.conv{l}.bias"));
        }
        names.push(format!("branch{b}.head.weight"));
        names.push(format!("branch{b}.head.bias"));
    }
    names
}

fn arrays(model: &Classifier) -> Vec<ArrayD<f64>> {
    let mut out = Vec::new();
    for branch in &model.branches {
        for conv in &branch.backbone.layers {
            out.push(conv.weight.clone().into_dyn());
            out.push(conv.bias.clone().into_dyn());
        }
        out.push(branch.head.weight.clone().into_dyn());
        out.push(branch.head.bias.clone().into_dyn());
    }
    out
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            kind: "model".into(),
            n_branches: self.model.branches.len(),
            n_labels: self.model.n_labels(),
            backbone: self.model.backbone.clone(),
            train_config: self.train_config.clone(),
            level: self.level.clone(),
            history: self.history.clone(),
        };
        let mut c = Container::new(serde_json::to_value(&meta)?);
        for (name, a) in array_names(&self.model)
            .into_iter()
            .zip(arrays(&self.model))
        {
            c.push(name, a.view());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != "model" {
            return Err(Error::Format(format!(
                "expected a model checkpoint, found {:?}",
                meta.kind
            )));
        }
        let mut model = Classifier::new(meta.n_labels, &meta.backbone, 0, meta.n_branches)?;
        let names = array_names(&model);
        let mut slots: Vec<&mut [f64]> = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        for branch in &mut model.branches {
            for conv in &mut branch.backbone.layers {
                shapes.push(conv.weight.shape().to_vec());
                slots.push(conv.weight.as_slice_mut().expect("standard layout"));
                shapes.push(conv.bias.shape().to_vec());
                slots.push(conv.bias.as_slice_mut().expect("standard layout"));
            }
            shapes.push(branch.head.weight.shape().to_vec());
            slots.push(branch.head.weight.as_slice_mut().expect("standard layout"));
            shapes.push(branch.head.bias.shape().to_vec());
            slots.push(branch.head.bias.as_slice_mut().expect("standard layout"));
        }
        for ((name, slot), shape) in names.iter().zip(slots).zip(shapes) {
            let a = c.get(name)?;
            if a.raw_dim().slice() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, model expects {shape:?}",
                    a.shape()
                )));
            }
            for (dst, src) in slot.iter_mut().zip(a.iter()) {
                *dst = *src;
            }
        }
        Ok(Self {
            model,
            train_config: meta.train_config,
            level: meta.level,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path, DType::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
