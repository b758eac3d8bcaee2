use std::fs;

use classgroup_cam::dataset::{
    export_voc_style, generate_synthetic, load_voc_style, SyntheticSpec,
};
use classgroup_cam::Error;

fn small() -> classgroup_cam::dataset::Dataset {
    generate_synthetic(&SyntheticSpec::grid(2, 2, 3, 16, 4).unwrap()).unwrap()
}

#[test]
fn export_then_load_round_trips() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    export_voc_style(&data, dir.path(), "val").unwrap();
    let back = load_voc_style(dir.path(), "val").unwrap();
    assert_eq!(back.categories, data.categories);
    assert_eq!(back.len(), data.len());
    let mut original = data.samples.clone();
    original.sort_by(|a, b| a.id.cmp(&b.id));
    let mut loaded = back.samples.clone();
    loaded.sort_by(|a, b| a.id.cmp(&b.id));
    for (a, b) in original.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.masks, b.masks);
        // pixels are already on the 8-bit grid
        let worst = a
            .image
            .iter()
            .zip(b.image.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "pixel drift {worst}");
    }
}

#[test]
fn missing_image_is_an_io_error() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    export_voc_style(&data, dir.path(), "train").unwrap();
    let victim = dir
        .path()
        .join("train/images")
        .join(format!("{}.png", data.samples[0].id));
    fs::remove_file(&victim).unwrap();
    match load_voc_style(dir.path(), "train") {
        Err(Error::Io { path, .. }) => {
            assert!(path.ends_with(format!("{}.png", data.samples[0].id)))
        }
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn unknown_category_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let split = dir.path().join("train");
    fs::create_dir_all(split.join("images")).unwrap();
    fs::write(
        split.join("labels.json"),
        r#"{"categories": ["a"], "labels": {"x": ["b"]}}"#,
    )
    .unwrap();
    assert!(matches!(
        load_voc_style(dir.path(), "train"),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        load_voc_style(dir.path(), "nope"),
        Err(Error::Io { .. })
    ));
}
