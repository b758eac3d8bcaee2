use classgroup_cam::cam::{
    fuse_levels, fuse_levels_raw, ActivationMap, FusionInputs, MapNormalization, Resolution,
};
use classgroup_cam::classifier::{orthogonal_loss, FeaturePair};
use classgroup_cam::eval::{binarize, iou};
use classgroup_cam::hierarchy::{
    kmeans, kmeans_objective, remap_labels, CategoryHierarchy, Clustering, KMeansConfig,
};
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;

fn unit_map(values: Vec<f64>, h: usize, w: usize) -> ActivationMap {
    ActivationMap {
        values: Array2::from_shape_vec((h, w), values).unwrap(),
        resolution: Resolution::ImageGrid,
        normalization: MapNormalization::MinMax,
        degenerate: false,
    }
}

fn maps(h: usize, w: usize, n: usize) -> impl Strategy<Value = Vec<ActivationMap>> {
    prop::collection::vec(prop::collection::vec(0.0..=1.0f64, h * w), n)
        .prop_map(move |vs| vs.into_iter().map(|v| unit_map(v, h, w)).collect())
}

proptest! {
    #[test]
    fn orthogonal_loss_is_zero_on_disjoint_supports(
        a in prop::collection::vec(0.0..5.0f64, 2 * 3 * 4),
        b in prop::collection::vec(0.0..5.0f64, 2 * 3 * 4),
        split in prop::collection::vec(any::<bool>(), 2 * 3 * 4),
    ) {
        let shape = IxDyn(&[2, 3, 2, 2]);
        let f1 = ArrayD::from_shape_vec(shape.clone(), a.clone()).unwrap();
        let f2 = ArrayD::from_shape_vec(shape.clone(), b.clone()).unwrap();
        prop_assert!(orthogonal_loss(&FeaturePair::new(f1.view(), f2.view()).unwrap()) >= 0.0);

        let g1: Vec<f64> = a.iter().zip(&split).map(|(v, &s)| if s { *v } else { 0.0 }).collect();
        let g2: Vec<f64> = b.iter().zip(&split).map(|(v, &s)| if s { 0.0 } else { *v }).collect();
        let g1 = ArrayD::from_shape_vec(shape.clone(), g1).unwrap();
        let g2 = ArrayD::from_shape_vec(shape, g2).unwrap();
        prop_assert_eq!(orthogonal_loss(&FeaturePair::new(g1.view(), g2.view()).unwrap()), 0.0);
    }

    #[test]
    fn fused_maps_are_clamped_and_normalised(ms in maps(3, 4, 4)) {
        let inputs = FusionInputs {
            m0: ms[0].clone(),
            level_maps: ms[1..3].to_vec(),
            m0_rest: ms[3].clone(),
        };
        let raw = fuse_levels_raw(&inputs).unwrap();
        let fused = fuse_levels(&inputs).unwrap();
        prop_assert!(fused.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let positive = raw.iter().any(|&v| v > 0.0);
        prop_assert_eq!(fused.degenerate, !positive);
        if positive {
            // the peak survives clamping and lands on 1
            let peak = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (idx, _) = raw.indexed_iter().find(|(_, &v)| v == peak).unwrap();
            prop_assert_eq!(fused.values[idx], 1.0);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(ms in maps(4, 4, 2), t in 0.05..0.95f64) {
        let a = binarize(&ms[0], t).unwrap();
        let b = binarize(&ms[1], t).unwrap();
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn kmeans_returns_a_consistent_partition(
        rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2..12),
        k in 1usize..5,
        seed in 0u64..1000,
    ) {
        let n = rows.len();
        let k = k.min(n);
        let pts = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
        let c = kmeans(pts.view(), k, seed, &KMeansConfig::default()).unwrap();
        prop_assert_eq!(c.assignment.len(), n);
        prop_assert!(c.cluster_sizes().iter().all(|&s| s > 0));
        let obj = kmeans_objective(pts.view(), &c.assignment, c.centers.view());
        prop_assert!((obj - c.objective).abs() <= 1e-9 * obj.max(1.0));
        prop_assert_eq!(c, kmeans(pts.view(), k, seed, &KMeansConfig::default()).unwrap());
    }
}

fn clustering(level: usize, assignment: Vec<usize>) -> Clustering {
    let k = assignment.iter().max().unwrap() + 1;
    Clustering {
        level_index: level,
        n_clusters: k,
        assignment,
        centers: Array2::zeros((k, 1)),
        objective: 0.0,
        restart_traces: Vec::new(),
    }
}

#[test]
fn hierarchy_levels_compose() {
    let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
    let mut h = CategoryHierarchy::identity(names);
    h.levels.push(clustering(1, vec![0, 0, 1, 2, 2, 1]));
    h.levels.push(clustering(2, vec![1, 0, 1]));
    h.checkpoints = vec![None; 3];
    h.validate().unwrap();

    assert_eq!(h.composed(0).unwrap(), vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(h.composed(1).unwrap(), vec![0, 0, 1, 2, 2, 1]);
    assert_eq!(h.composed(2).unwrap(), vec![1, 1, 0, 1, 1, 0]);
    assert_eq!(
        h.groups(2).unwrap(),
        vec![vec!["c2", "c5"], vec!["c0", "c1", "c3", "c4"]]
    );
    assert!(h.composed(3).is_err());

    // OR-folding labels level by level equals folding with the composed map
    let labels = vec![false, true, false, false, false, true];
    let l1 = remap_labels(&labels, &h.levels[1]).unwrap();
    let l2 = remap_labels(&l1, &h.levels[2]).unwrap();
    assert_eq!(l1, vec![true, true, false]);
    assert_eq!(l2, vec![true, true]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.json");
    h.save(&path).unwrap();
    assert_eq!(
        CategoryHierarchy::load(&path).unwrap().composed(2).unwrap(),
        h.composed(2).unwrap()
    );
}
