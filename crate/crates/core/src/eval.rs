//! Threshold binarisation, IoU, peak-in-mask localisation error and the
//! per-category report built from them.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cam::ActivationMap;
use crate::dataset::{Dataset, ImageSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizationRule {
    /// Correct when the map's argmax lies inside the ground-truth mask.
    #[default]
    PeakInMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub localization: LocalizationRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            localization: LocalizationRule::PeakInMask,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// `pixel = value > threshold`. The map must already lie in `[0, 1]`.
pub fn binarize(map: &ActivationMap, threshold: f64) -> Result<Array2<bool>> {
    if map.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(
            "binarize expects a min-max normalised map in [0, 1]".into(),
        ));
    }
    Ok(map.values.mapv(|v| v > threshold))
}

/// Intersection and union pixel counts.
pub fn overlap_counts(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<(usize, usize)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Contract(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`; 1 when both are empty.
pub fn iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    let (inter, union) = overlap_counts(pred, gt)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// 0 when the map's peak (first in row-major order on ties) lies in `gt`,
/// 1 otherwise; `None` when `gt` is empty and the sample must be skipped.
pub fn localization_error(map: &ActivationMap, gt: &Array2<bool>) -> Result<Option<u8>> {
    if map.dim() != gt.dim() {
        return Err(Error::Contract(format!(
            "map {:?} and mask {:?} differ in shape",
            map.dim(),
            gt.dim()
        )));
    }
    if !gt.iter().any(|&g| g) {
        return Ok(None);
    }
    Ok(Some(if gt[map.argmax()] { 0 } else { 1 }))
}

/// Per-category IoU and localisation error plus their unweighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub per_category_loc_error: BTreeMap<String, f64>,
    pub mlev: f64,
    /// Samples contributing at least one (category, mask) pair.
    pub sample_count: usize,
    /// (category, mask) pairs scored.
    pub pair_count: usize,
    pub config: EvalConfig,
}

#[derive(Default)]
struct Accum {
    iou_sum: f64,
    loc_sum: f64,
    loc_n: usize,
    n: usize,
}

/// Scores `cam(sample, category)` against every ground-truth mask. The result
/// does not depend on sample order: per-category sums are accumulated over
/// samples sorted by id.
pub fn evaluate<F>(dataset: &Dataset, cfg: &EvalConfig, mut cam: F) -> Result<EvalReport>
where
    F: FnMut(&ImageSample, usize) -> Result<ActivationMap>,
{
    cfg.validate()?;
    let mut order: Vec<&ImageSample> = dataset.samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut acc: BTreeMap<usize, Accum> = BTreeMap::new();
    let mut sample_count = 0;
    let mut pair_count = 0;
    for sample in order {
        let mut used = false;
        for (&cat, gt) in &sample.masks {
            if !sample.labels.get(cat).copied().unwrap_or(false) {
                continue;
            }
            let map = cam(sample, cat)?;
            let pred = binarize(&map, cfg.threshold)?;
            let score = iou(&pred, gt)?;
            let a = acc.entry(cat).or_default();
            a.iou_sum += score;
            a.n += 1;
            if let Some(err) = localization_error(&map, gt)? {
                a.loc_sum += err as f64;
                a.loc_n += 1;
            }
            used = true;
            pair_count += 1;
        }
        sample_count += used as usize;
    }
    if acc.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut per_category_iou = BTreeMap::new();
    let mut per_category_loc_error = BTreeMap::new();
    for (cat, a) in &acc {
        let name = dataset.categories[*cat].clone();
        per_category_iou.insert(name.clone(), a.iou_sum / a.n as f64);
        if a.loc_n > 0 {
            per_category_loc_error.insert(name, a.loc_sum / a.loc_n as f64);
        }
    }
    let miou = mean(per_category_iou.values());
    let mlev = mean(per_category_loc_error.values());
    Ok(EvalReport {
        per_category_iou,
        miou,
        per_category_loc_error,
        mlev,
        sample_count,
        pair_count,
        config: *cfg,
    })
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::Resolution;
    use ndarray::{array, Array3};

    fn m(values: Array2<f64>) -> ActivationMap {
        ActivationMap::raw(values, Resolution::ImageGrid)
    }

    #[test]
    fn binarize_is_strict() {
        let z = binarize(&m(Array2::zeros((2, 2))), 0.15).unwrap();
        assert!(z.iter().all(|&v| !v));
        let b = binarize(&m(array![[0.1, 0.2]]), 0.15).unwrap();
        assert_eq!(b, array![[false, true]]);
        assert_eq!(binarize(&m(array![[0.15]]), 0.15).unwrap(), array![[false]]);
        assert!(matches!(
            binarize(&m(array![[1.5]]), 0.15),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn iou_edge_cases() {
        let a = array![[true, false], [true, false]];
        let b = array![[false, true], [false, true]];
        let e = Array2::from_elem((2, 2), false);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&a, &e).unwrap(), 0.0);
        assert!(iou(&a, &Array2::from_elem((3, 2), false)).is_err());
    }

    #[test]
    fn iou_hand_count() {
        // pred covers 4 pixels, gt covers 4, overlap 2, union 6
        let mut pred = Array2::from_elem((4, 4), false);
        let mut gt = Array2::from_elem((4, 4), false);
        for x in 0..4 {
            pred[[0, x]] = true;
        }
        gt[[0, 0]] = true;
        gt[[0, 1]] = true;
        gt[[1, 0]] = true;
        gt[[1, 1]] = true;
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn localization_peak_and_ties() {
        let gt = array![[false, true], [false, false]];
        assert_eq!(
            localization_error(&m(array![[0.0, 1.0], [0.2, 0.1]]), &gt).unwrap(),
            Some(0)
        );
        assert_eq!(
            localization_error(&m(array![[0.0, 0.5], [0.9, 0.1]]), &gt).unwrap(),
            Some(1)
        );
        // constant map -> (0, 0)
        let c = m(Array2::from_elem((2, 2), 0.3));
        assert_eq!(localization_error(&c, &gt).unwrap(), Some(1));
        let gt00 = array![[true, false], [false, false]];
        assert_eq!(localization_error(&c, &gt00).unwrap(), Some(0));
        assert_eq!(
            localization_error(&c, &Array2::from_elem((2, 2), false)).unwrap(),
            None
        );
    }

    fn one_sample_dataset() -> Dataset {
        let mask = array![
            [true, true, false],
            [false, true, false],
            [false, false, false]
        ];
        let mut masks = BTreeMap::new();
        masks.insert(1, mask);
        Dataset {
            categories: vec!["a".into(), "b".into()],
            samples: vec![ImageSample {
                id: "s0".into(),
                image: Array3::zeros((3, 3, 3)),
                labels: vec![false, true],
                masks,
            }],
        }
    }

    #[test]
    fn perfect_cam_scores_perfectly() {
        let ds = one_sample_dataset();
        let r = evaluate(&ds, &EvalConfig::default(), |s, c| {
            Ok(m(s.masks[&c].mapv(|v| if v { 1.0 } else { 0.0 })))
        })
        .unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.mlev, 0.0);
        assert_eq!(r.sample_count, 1);
    }

    #[test]
    fn no_masks_is_an_empty_evaluation() {
        let mut ds = one_sample_dataset();
        ds.samples[0].masks.clear();
        assert!(matches!(
            evaluate(&ds, &EvalConfig::default(), |_, _| unreachable!()),
            Err(Error::EmptyEvaluation)
        ));
    }
}
