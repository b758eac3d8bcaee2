use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_rel, read_json, write_json, FusedIndex, MapIndex, RunManifest};
use crate::cam::heatmap_image;
use crate::dataset::load_voc_style;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::hierarchy::CategoryHierarchy;

/// One table row; scores are fractions, printed as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub configuration: String,
    pub miou_val: f64,
    pub miou_train: Option<f64>,
    pub mlev_val: f64,
    pub mlev_train: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_clustering: bool,
    pub use_orthogonal: bool,
    #[serde(flatten)]
    pub scores: ReportRow,
}

#[derive(Serialize)]
struct Summary<'a> {
    level_sizes: Vec<usize>,
    groups: Vec<Vec<Vec<String>>>,
    depth_rows: &'a [ReportRow],
    baseline: &'a ReportRow,
    fused: &'a ReportRow,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), pct)
}

fn text_table(title: &str, head: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(head.to_vec()));
    let _ = writeln!(
        out,
        "{}",
        "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
    );
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn score_cells(r: &ReportRow) -> Vec<String> {
    vec![
        pct(r.miou_val),
        opt_pct(r.miou_train),
        pct(r.mlev_val),
        opt_pct(r.mlev_train),
    ]
}

const SCORE_HEAD: [&str; 4] = ["mIoU val", "mIoU train", "mLEV val", "mLEV train"];

fn row(configuration: String, val: &EvalReport, train: Option<&EvalReport>) -> ReportRow {
    ReportRow {
        configuration,
        miou_val: val.miou,
        miou_train: train.map(|r| r.miou),
        mlev_val: val.mlev,
        mlev_train: train.map(|r| r.mlev),
    }
}

fn level_label(sizes: &[usize]) -> String {
    let inner: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
    format!("N={{{}}}", inner.join(","))
}

fn optional<T: for<'de> Deserialize<'de>>(
    manifest: &RunManifest,
    stage: &str,
    file: &str,
) -> Result<Option<T>> {
    match manifest.artifact(stage, file) {
        Ok(p) => Ok(Some(read_json(&p)?)),
        Err(_) => Ok(None),
    }
}

/// Writes the depth table, CSV, JSON summary and heatmap panels of a
/// completed run into `<run_dir>/report`. Output depends only on the
/// manifest's artifacts, so re-emission is byte-identical.
pub fn emit_report(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let eval_depth: Vec<EvalReport> = read_json(&manifest.artifact("eval", "eval_depth.json")?)?;
    let train_depth: Option<Vec<EvalReport>> = optional(manifest, "eval", "train_depth.json")?;
    let eval_fused: EvalReport = read_json(&manifest.artifact("eval", "eval_fused.json")?)?;
    let train_fused: Option<EvalReport> = optional(manifest, "eval", "train_fused.json")?;
    let hierarchy = CategoryHierarchy::load(&manifest.artifact("hierarchy", "hierarchy.json")?)?;
    let sizes = hierarchy.level_sizes();

    let depth_rows: Vec<ReportRow> = eval_depth
        .iter()
        .enumerate()
        .map(|(d, r)| {
            row(
                level_label(&sizes[..=d]),
                r,
                train_depth.as_ref().and_then(|t| t.get(d)),
            )
        })
        .collect();
    let fused = row("fused".into(), &eval_fused, train_fused.as_ref());

    let dir = manifest.run_dir.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();

    let mut head = vec!["levels"];
    head.extend(SCORE_HEAD);
    let cells: Vec<Vec<String>> = depth_rows
        .iter()
        .map(|r| {
            let mut c = vec![r.configuration.clone()];
            c.extend(score_cells(r));
            c
        })
        .collect();
    let mut text = text_table("Fused CAM by clustering depth (%)", &head, &cells);
    text.push('\n');
    for (l, groups) in (1..sizes.len()).map(|l| (l, hierarchy.groups(l))) {
        let _ = writeln!(text, "level {l} groups:");
        for (g, members) in groups?.iter().enumerate() {
            let _ = writeln!(text, "  {g}: {}", members.join(" "));
        }
    }
    let p = dir.join("tables.txt");
    fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    files.push(p);

    let mut csv = String::from("configuration,miou_val,miou_train,mlev_val,mlev_train\n");
    for r in &depth_rows {
        csv_row(&mut csv, r);
    }
    let p = dir.join("results.csv");
    fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
    files.push(p);

    let groups = (0..sizes.len())
        .map(|l| hierarchy.groups(l))
        .collect::<Result<Vec<_>>>()?;
    let p = dir.join("summary.json");
    write_json(
        &p,
        &Summary {
            level_sizes: sizes.clone(),
            groups,
            depth_rows: &depth_rows,
            baseline: &depth_rows[0],
            fused: &fused,
        },
    )?;
    files.push(p);

    files.extend(write_panels(manifest, &dir.join("panels"))?);
    Ok(files)
}

fn csv_row(out: &mut String, r: &ReportRow) {
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let _ = writeln!(
        out,
        "{},{},{},{},{}",
        r.configuration,
        f(Some(r.miou_val)),
        f(r.miou_train),
        f(Some(r.mlev_val)),
        f(r.mlev_train)
    );
}

const TILE_GAP: u32 = 2;

/// One PNG per image: input, level maps `0..=k`, fused map, ground truth.
fn write_panels(manifest: &RunManifest, dir: &Path) -> Result<Vec<PathBuf>> {
    let n = manifest.config.panels;
    if n == 0 {
        return Ok(Vec::new());
    }
    let data_dir = manifest
        .artifact("dataset", "labels.json")?
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .ok_or_else(|| Error::State("dataset artifact has no parent directory".into()))?;
    let eval = load_voc_style(&data_dir, "eval")?;
    let maps: MapIndex = read_json(&manifest.artifact("cam", "index.json")?)?;
    let fused: FusedIndex = read_json(&manifest.artifact("fuse", "index.json")?)?;
    let (Some(maps), Some(fused)) = (maps.get("eval"), fused.get("eval")) else {
        return Err(Error::State("no eval maps to draw".into()));
    };
    let mut samples: Vec<_> = eval.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let run_dir = &manifest.run_dir;
    let mut files = Vec::new();
    for sample in samples {
        if files.len() == n {
            break;
        }
        let Some((cat, entry)) = maps.get(&sample.id).and_then(|m| m.iter().next()) else {
            continue;
        };
        let c = eval
            .category_index(cat)
            .ok_or_else(|| Error::Lookup(cat.clone()))?;
        let (h, w) = (sample.height() as u32, sample.width() as u32);
        let mut tiles: Vec<image::RgbImage> = Vec::new();
        tiles.push(image::RgbImage::from_fn(w, h, |x, y| {
            let px = |ch| (sample.image[[y as usize, x as usize, ch]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        }));
        for rel in &entry.levels {
            tiles.push(heatmap_image(&load_rel(run_dir, rel)?.values));
        }
        let fused_rel = fused
            .get(&sample.id)
            .and_then(|m| m.get(cat))
            .ok_or_else(|| Error::State(format!("no fused map for {}", sample.id)))?;
        tiles.push(heatmap_image(&load_rel(run_dir, fused_rel)?.values));
        let gt = &sample.masks[&c];
        tiles.push(image::RgbImage::from_fn(w, h, |x, y| {
            let v = if gt[[y as usize, x as usize]] { 255 } else { 0 };
            image::Rgb([v, v, v])
        }));
        let width = tiles.len() as u32 * (w + TILE_GAP) - TILE_GAP;
        let mut panel = image::RgbImage::from_pixel(width, h, image::Rgb([255, 255, 255]));
        for (i, t) in tiles.iter().enumerate() {
            image::imageops::replace(&mut panel, t, (i as u32 * (w + TILE_GAP)) as i64, 0);
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(format!("{}_{cat}.png", sample.id));
        panel.save(&p).map_err(|e| Error::image(&p, e))?;
        files.push(p);
    }
    Ok(files)
}

/// Four-row table of the ablation grid (fused scores of each run).
pub fn emit_ablation_report(manifests: &[RunManifest], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for m in manifests {
        let val: EvalReport = read_json(&m.artifact("eval", "eval_fused.json")?)?;
        let train: Option<EvalReport> = optional(m, "eval", "train_fused.json")?;
        let name = m
            .run_dir
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push(AblationRow {
            use_clustering: m.config.use_clustering,
            use_orthogonal: m.config.use_orthogonal,
            scores: row(name, &val, train.as_ref()),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
    let mut head = vec!["run", "clustering", "orthogonal"];
    head.extend(SCORE_HEAD);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![
                r.scores.configuration.clone(),
                mark(r.use_clustering),
                mark(r.use_orthogonal),
            ];
            c.extend(score_cells(&r.scores));
            c
        })
        .collect();
    let mut files = Vec::new();
    let p = dir.join("ablation.txt");
    fs::write(
        &p,
        text_table("Ablation of the two modules (%)", &head, &cells),
    )
    .map_err(|e| Error::io(&p, e))?;
    files.push(p);
    let mut csv = String::from("configuration,miou_val,miou_train,mlev_val,mlev_train\n");
    for r in &rows {
        csv_row(&mut csv, &r.scores);
    }
    let p = dir.join("ablation.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    files.push(p);
    let p = dir.join("ablation.json");
    write_json(&p, &rows)?;
    files.push(p);
    Ok(files)
}
