//! Image samples with multi-hot labels and per-category masks.
//!
//! Two sources are supported: a deterministic synthetic shape renderer and a
//! VOC-style directory layout:
//!
//! ```text
//! <root>/<split>/labels.json        {"categories": [...], "labels": {"<id>": ["<category>", ...]}}
//! <root>/<split>/images/<id>.png    (or .jpg)
//! <root>/<split>/masks/<id>/<category>.png   optional, 0/255 binary
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image with its multi-hot labels and optional ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `(H, W, 3)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// Multi-hot over the dataset's categories.
    pub labels: Vec<bool>,
    /// Category index to binary `(H, W)` mask.
    pub masks: BTreeMap<usize, Array2<bool>>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
    }

    pub fn validate(&self, n_categories: usize) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Format(format!(
                "sample {}: image shape {h}x{w}x{c} is not HxWx3 with H,W >= 1",
                self.id
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!(
                "sample {}: pixel outside [0, 1]",
                self.id
            )));
        }
        if self.labels.len() != n_categories {
            return Err(Error::Format(format!(
                "sample {}: {} labels for {n_categories} categories",
                self.id,
                self.labels.len()
            )));
        }
        if !self.labels.iter().any(|&l| l) {
            return Err(Error::Format(format!(
                "sample {}: no positive label",
                self.id
            )));
        }
        for (&cat, mask) in &self.masks {
            if !self.labels.get(cat).copied().unwrap_or(false) {
                return Err(Error::Format(format!(
                    "sample {}: mask for category {cat} which is not labelled",
                    self.id
                )));
            }
            if mask.dim() != (h, w) {
                return Err(Error::Format(format!(
                    "sample {}: mask for category {cat} has shape {:?}, image is {h}x{w}",
                    self.id,
                    mask.dim()
                )));
            }
        }
        Ok(())
    }
}

/// A list of samples sharing one category vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        self.samples
            .iter()
            .try_for_each(|s| s.validate(self.n_categories()))
    }

    /// Applies [`normalize`] to every sample.
    pub fn normalized(&self, spec: &NormalizationSpec) -> Result<Dataset> {
        Ok(Dataset {
            categories: self.categories.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| normalize(s, spec))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Solid,
    Stripes,
    Checker,
    Dots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFamily {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => {
                // apex up, base at dy = 0.8r
                let top = -r;
                let base = 0.8 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half_width = (dy - top) / (base - top) * r;
                dx.abs() <= half_width
            }
            ShapeKind::Cross => {
                let arm = 0.38 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
        }
    }
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Dots,
        TextureKind::Solid,
    ];

    /// Intensity multiplier at absolute pixel `(x, y)`.
    fn modulation(self, x: usize, y: usize) -> f64 {
        match self {
            TextureKind::Solid => 1.0,
            TextureKind::Stripes => {
                if (x / 2) % 2 == 0 {
                    1.0
                } else {
                    0.35
                }
            }
            TextureKind::Checker => {
                if (x / 2 + y / 2) % 2 == 0 {
                    1.0
                } else {
                    0.35
                }
            }
            TextureKind::Dots => {
                if x % 3 == 1 && y % 3 == 1 {
                    0.2
                } else {
                    1.0
                }
            }
        }
    }
}

impl ColorFamily {
    pub const ALL: [ColorFamily; 6] = [
        ColorFamily::Red,
        ColorFamily::Green,
        ColorFamily::Blue,
        ColorFamily::Yellow,
        ColorFamily::Magenta,
        ColorFamily::Cyan,
    ];

    fn base_rgb(self) -> [f64; 3] {
        match self {
            ColorFamily::Red => [0.85, 0.2, 0.15],
            ColorFamily::Green => [0.2, 0.8, 0.25],
            ColorFamily::Blue => [0.2, 0.3, 0.9],
            ColorFamily::Yellow => [0.9, 0.85, 0.2],
            ColorFamily::Magenta => [0.85, 0.2, 0.8],
            ColorFamily::Cyan => [0.2, 0.85, 0.85],
        }
    }
}

/// Attributes of one synthetic category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDescriptor {
    pub name: String,
    pub shape: ShapeKind,
    pub texture: TextureKind,
    /// Body colour, shared by the categories of one shape kind.
    pub color: ColorFamily,
    /// Colour of the category's local patch.
    pub patch_color: [f64; 3],
}

/// Parameters of the synthetic shape dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub category_descriptors: Vec<CategoryDescriptor>,
    pub samples_per_category: usize,
    pub image_size: usize,
    /// Inclusive range of objects drawn per image.
    pub objects_per_image: (usize, usize),
    pub seed: u64,
}

impl SyntheticSpec {
    /// `shapes x textures` categories. Categories sharing a shape also share
    /// a colour family, so shape groups are the natural similarity clusters.
    pub fn grid(
        shapes: usize,
        textures: usize,
        samples_per_category: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if shapes == 0 || shapes > ShapeKind::ALL.len() {
            return Err(Error::Config(format!(
                "shape count must be in 1..={}",
                ShapeKind::ALL.len()
            )));
        }
        if textures == 0 || textures > TextureKind::ALL.len() {
            return Err(Error::Config(format!(
                "texture count must be in 1..={}",
                TextureKind::ALL.len()
            )));
        }
        let mut descriptors = Vec::with_capacity(shapes * textures);
        for s in 0..shapes {
            for t in 0..textures {
                let shape = ShapeKind::ALL[s];
                let texture = TextureKind::ALL[t];
                descriptors.push(CategoryDescriptor {
                    name: format!("{}_{}", snake(shape), snake(texture)),
                    shape,
                    texture,
                    color: ColorFamily::ALL[s],
                    // siblings get patch hues a third of the wheel apart
                    patch_color: hue_rgb((s + shapes * t) as f64 / (shapes * textures) as f64),
                });
            }
        }
        Ok(Self {
            n_categories: descriptors.len(),
            category_descriptors: descriptors,
            samples_per_category,
            image_size,
            objects_per_image: (1, 2),
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 {
            return Err(Error::Config("synthetic spec has zero categories".into()));
        }
        if self.category_descriptors.len() != self.n_categories {
            return Err(Error::Config(format!(
                "{} descriptors for {} categories",
                self.category_descriptors.len(),
                self.n_categories
            )));
        }
        if self.samples_per_category == 0 {
            return Err(Error::Config(
                "samples_per_category must be positive".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi || hi > 4 {
            return Err(Error::Config(format!(
                "objects_per_image range [{lo}, {hi}] must satisfy 1 <= lo <= hi <= 4"
            )));
        }
        if self.n_categories >= 2 {
            let shared = self.category_descriptors.iter().enumerate().any(|(i, a)| {
                self.category_descriptors[i + 1..]
                    .iter()
                    .any(|b| a.shape == b.shape)
            });
            if !shared {
                return Err(Error::Config(
                    "no two categories share a shape kind; similarity structure is trivial".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fully saturated colour at `hue` turns around the wheel.
fn hue_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b]
}

fn snake<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    category: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    /// Centre of the textured patch; the rest of the body is plain colour.
    px: f64,
    py: f64,
}

impl Placement {
    fn in_patch(&self, x: f64, y: f64) -> bool {
        let half = 0.5 * self.radius;
        (x - self.px).abs() <= half && (y - self.py).abs() <= half
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Draws object placements for one image. Objects never overlap, so every
/// rendered pixel belongs to at most one object.
fn draw_placements(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, primary: usize) -> Vec<Placement> {
    let size = spec.image_size as f64;
    let (lo, hi) = spec.objects_per_image;
    let count = rng.random_range(lo..=hi);
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    for k in 0..count {
        let category = if k == 0 {
            primary
        } else {
            rng.random_range(0..spec.n_categories)
        };
        let mut scale = 1.0;
        'attempts: loop {
            for _ in 0..64 {
                let (ra, rb) = (0.18, 0.28);
                let radius = size * rng.random_range(ra..rb) * scale;
                let lo_c = radius + 1.0;
                let hi_c = size - radius - 1.0;
                let (cx, cy) = if hi_c > lo_c {
                    (rng.random_range(lo_c..hi_c), rng.random_range(lo_c..hi_c))
                } else {
                    (size / 2.0, size / 2.0)
                };
                let clear = placed.iter().all(|p| {
                    let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                    d > p.radius + radius + 1.5
                });
                if clear {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    placed.push(Placement {
                        category,
                        cx,
                        cy,
                        radius,
                        px: cx + 0.4 * radius * angle.cos(),
                        py: cy + 0.4 * radius * angle.sin(),
                    });
                    break 'attempts;
                }
            }
            scale *= 0.8;
            if scale < 0.2 {
                break;
            }
        }
    }
    placed
}

/// Renders `n_categories x samples_per_category` images. Each category is the
/// primary object of exactly `samples_per_category` images; further objects
/// are drawn uniformly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let mut samples = Vec::with_capacity(spec.n_categories * spec.samples_per_category);
    for primary in 0..spec.n_categories {
        for j in 0..spec.samples_per_category {
            let idx = primary * spec.samples_per_category + j;
            let placements = draw_placements(&mut rng, spec, primary);
            let bg_level = rng.random_range(0.3..0.55);
            let mut image = Array3::from_shape_fn((size, size, 3), |_| {
                quantize(bg_level + rng.random_range(-0.08..0.08))
            });
            let mut labels = vec![false; spec.n_categories];
            let mut masks: BTreeMap<usize, Array2<bool>> = BTreeMap::new();
            for p in &placements {
                let desc = &spec.category_descriptors[p.category];
                let base = desc.color.base_rgb();
                let jitter = rng.random_range(-0.06..0.06);
                let mask = masks
                    .entry(p.category)
                    .or_insert_with(|| Array2::from_elem((size, size), false));
                let mut drawn = false;
                for y in 0..size {
                    for x in 0..size {
                        let dx = x as f64 + 0.5 - p.cx;
                        let dy = y as f64 + 0.5 - p.cy;
                        if !desc.shape.contains(dx, dy, p.radius) {
                            continue;
                        }
                        let in_patch = p.in_patch(x as f64 + 0.5, y as f64 + 0.5);
                        for ch in 0..3 {
                            image[[y, x, ch]] = quantize(if in_patch {
                                desc.patch_color[ch] * desc.texture.modulation(x, y)
                            } else {
                                base[ch] + jitter
                            });
                        }
                        mask[[y, x]] = true;
                        drawn = true;
                    }
                }
                if drawn {
                    labels[p.category] = true;
                }
            }
            masks.retain(|_, m| m.iter().any(|&v| v));
            samples.push(ImageSample {
                id: format!("syn{}_{idx:05}", spec.seed),
                image,
                labels,
                masks,
            });
        }
    }
    let dataset = Dataset {
        categories: spec
            .category_descriptors
            .iter()
            .map(|d| d.name.clone())
            .collect(),
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Resize-then-centre-crop geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub target_short_side: usize,
    pub crop_size: usize,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            target_short_side: 224,
            crop_size: 224,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.target_short_side {
            return Err(Error::Config(format!(
                "crop_size {} must be in 1..={}",
                self.crop_size, self.target_short_side
            )));
        }
        Ok(())
    }

    /// Size after the short-side resize, before cropping.
    pub fn resized_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let t = self.target_short_side;
        if h <= w {
            (
                t,
                ((w as f64) * t as f64 / h as f64).round().max(t as f64) as usize,
            )
        } else {
            (
                ((h as f64) * t as f64 / w as f64).round().max(t as f64) as usize,
                t,
            )
        }
    }
}

/// Source coordinate of a destination pixel centre (half-pixel convention).
pub(crate) fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Bilinear resize of a 2-D grid; identity when sizes match.
pub(crate) fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let axis = |dst: usize, in_len: usize, out_len: usize| {
        let c = source_coord(dst, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, c - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    let c = (dst as f64 + 0.5) * in_len as f64 / out_len as f64;
    (c.floor() as usize).min(in_len - 1)
}

/// Short-side resize (bilinear for pixels, nearest for masks) followed by a
/// centre crop. Labels are untouched.
pub fn normalize(sample: &ImageSample, spec: &NormalizationSpec) -> Result<ImageSample> {
    spec.validate()?;
    let (h, w, _) = sample.image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Format(format!("sample {}: empty image", sample.id)));
    }
    let (rh, rw) = spec.resized_dims(h, w);
    let c = spec.crop_size;
    let top = (rh - c) / 2;
    let left = (rw - c) / 2;

    let mut image = Array3::zeros((c, c, 3));
    for ch in 0..3 {
        let plane = sample.image.index_axis(ndarray::Axis(2), ch).to_owned();
        let resized = resize_bilinear(&plane, rh, rw);
        for y in 0..c {
            for x in 0..c {
                image[[y, x, ch]] = resized[[top + y, left + x]].clamp(0.0, 1.0);
            }
        }
    }
    let masks = sample
        .masks
        .iter()
        .map(|(&cat, m)| {
            let out = Array2::from_shape_fn((c, c), |(y, x)| {
                let sy = nearest_index(top + y, h, rh);
                let sx = nearest_index(left + x, w, rw);
                m[[sy, sx]]
            });
            (cat, out)
        })
        .collect();
    Ok(ImageSample {
        id: sample.id.clone(),
        image,
        labels: sample.labels.clone(),
        masks,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelIndex {
    categories: Vec<String>,
    labels: BTreeMap<String, Vec<String>>,
}

pub(crate) fn split_dir(root: &Path, split: &str) -> PathBuf {
    if split.is_empty() {
        root.to_path_buf()
    } else {
        root.join(split)
    }
}

fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// Reads `<root>/<split>` (or `<root>` when `split` is empty).
pub fn load_voc_style(root: &Path, split: &str) -> Result<Dataset> {
    let dir = split_dir(root, split);
    let index_path = dir.join("labels.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: LabelIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", index_path.display())))?;
    let lookup: BTreeMap<&str, usize> = index
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut samples = Vec::with_capacity(index.labels.len());
    for (id, names) in &index.labels {
        let mut labels = vec![false; index.categories.len()];
        for name in names {
            let &cat = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("image {id}: unknown category {name:?}")))?;
            labels[cat] = true;
        }
        let image_path = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| dir.join("images").join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::io(
                    dir.join("images").join(format!("{id}.png")),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
                )
            })?;
        let image = load_rgb(&image_path)?;
        let mut masks = BTreeMap::new();
        let mask_dir = dir.join("masks").join(id);
        for (cat, name) in index.categories.iter().enumerate() {
            let p = mask_dir.join(format!("{name}.png"));
            if p.exists() {
                if !labels[cat] {
                    return Err(Error::Format(format!(
                        "image {id}: mask for unlabelled category {name:?}"
                    )));
                }
                masks.insert(cat, load_mask(&p)?);
            }
        }
        let sample = ImageSample {
            id: id.clone(),
            image,
            labels,
            masks,
        };
        sample.validate(index.categories.len())?;
        samples.push(sample);
    }
    Ok(Dataset {
        categories: index.categories,
        samples,
    })
}

fn write_png(path: &Path, img: image::DynamicImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Writes a dataset in the layout read by [`load_voc_style`]. Pixel values
/// are quantised to 8 bits.
pub fn export_voc_style(dataset: &Dataset, root: &Path, split: &str) -> Result<()> {
    let dir = split_dir(root, split);
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut labels = BTreeMap::new();
    for s in &dataset.samples {
        let (h, w, _) = s.image.dim();
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (s.image[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        write_png(
            &images_dir.join(format!("{}.png", s.id)),
            image::DynamicImage::ImageRgb8(rgb),
        )?;
        if !s.masks.is_empty() {
            let mask_dir = dir.join("masks").join(&s.id);
            fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            for (&cat, m) in &s.masks {
                let (mh, mw) = m.dim();
                let gray = image::GrayImage::from_fn(mw as u32, mh as u32, |x, y| {
                    image::Luma([if m[[y as usize, x as usize]] { 255 } else { 0 }])
                });
                write_png(
                    &mask_dir.join(format!("{}.png", dataset.categories[cat])),
                    image::DynamicImage::ImageLuma8(gray),
                )?;
            }
        }
        labels.insert(
            s.id.clone(),
            s.present().map(|c| dataset.categories[c].clone()).collect(),
        );
    }
    let index = LabelIndex {
        categories: dataset.categories.clone(),
        labels,
    };
    let index_path = dir.join("labels.json");
    fs::write(&index_path, serde_json::to_string_pretty(&index)?)
        .map_err(|e| Error::io(&index_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec::grid(2, 1, 1, 32, seed)
            .map(|mut s| {
                // two categories sharing a shape kind
                s.category_descriptors[1] = CategoryDescriptor {
                    name: "disk_stripes".into(),
                    shape: ShapeKind::Disk,
                    texture: TextureKind::Stripes,
                    color: ColorFamily::Red,
                    patch_color: [0.0, 0.0, 1.0],
                };
                s
            })
            .unwrap()
    }

    #[test]
    fn two_categories_one_sample_each() {
        let ds = generate_synthetic(&tiny_spec(7)).unwrap();
        assert_eq!(ds.len(), 2);
        for s in &ds.samples {
            assert!(s.labels.iter().any(|&l| l));
            assert!(!s.masks.is_empty());
            for (&c, m) in &s.masks {
                assert!(s.labels[c]);
                assert_eq!(m.dim(), (32, 32));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&tiny_spec(7)).unwrap();
        let b = generate_synthetic(&tiny_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&tiny_spec(8)).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn two_objects_give_one_or_two_labels() {
        let mut spec = SyntheticSpec::grid(3, 2, 10, 32, 0).unwrap();
        spec.objects_per_image = (2, 2);
        let ds = generate_synthetic(&spec).unwrap();
        for s in &ds.samples {
            let n = s.labels.iter().filter(|&&l| l).count();
            assert!(n == 1 || n == 2, "{} labels", n);
            assert_eq!(n, s.masks.len());
        }
        // at least some images draw two distinct categories
        assert!(ds
            .samples
            .iter()
            .any(|s| s.labels.iter().filter(|&&l| l).count() == 2));
    }

    #[test]
    fn masks_cover_exactly_the_recoloured_pixels() {
        let spec = SyntheticSpec::grid(4, 3, 2, 32, 5).unwrap();
        let ds = generate_synthetic(&spec).unwrap();
        for s in &ds.samples {
            for (&c, m) in &s.masks {
                let rgb = spec.category_descriptors[c].color.base_rgb();
                // background is grey (equal channels up to noise); objects are saturated
                for ((y, x), &inside) in m.indexed_iter() {
                    if inside {
                        let px = s.image.slice(ndarray::s![y, x, ..]);
                        let spread = px.iter().cloned().fold(f64::MIN, f64::max)
                            - px.iter().cloned().fold(f64::MAX, f64::min);
                        assert!(spread > 0.1 || rgb.iter().all(|v| *v < 0.3));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_categories_is_a_config_error() {
        let mut spec = SyntheticSpec::grid(2, 2, 1, 32, 0).unwrap();
        spec.n_categories = 0;
        spec.category_descriptors.clear();
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    fn sample_with(h: usize, w: usize) -> ImageSample {
        let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 256) as f64 / 255.0
        });
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            y > h / 4 && y < 3 * h / 4 && x > w / 3 && x < w / 2 + 40
        });
        let mut masks = BTreeMap::new();
        masks.insert(0, mask);
        ImageSample {
            id: "t".into(),
            image,
            labels: vec![true, false],
            masks,
        }
    }

    #[test]
    fn normalize_wide_image_crops_horizontal_centre() {
        let s = sample_with(224, 448);
        let n = normalize(&s, &NormalizationSpec::default()).unwrap();
        assert_eq!(n.image.dim(), (224, 224, 3));
        for y in [0, 100, 223] {
            for x in [0, 50, 223] {
                for c in 0..3 {
                    assert_eq!(n.image[[y, x, c]], s.image[[y, x + 112, c]]);
                }
            }
        }
        assert_eq!(n.labels, s.labels);
    }

    #[test]
    fn normalize_is_identity_at_target_size() {
        let s = sample_with(224, 224);
        let n = normalize(&s, &NormalizationSpec::default()).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn normalized_mask_matches_per_pixel_preimage() {
        let s = sample_with(300, 500);
        let spec = NormalizationSpec::default();
        let n = normalize(&s, &spec).unwrap();
        // independent oracle: map each output pixel back through crop and scale
        let scale = 300.0 / 224.0;
        let rw = (500.0f64 * 224.0 / 300.0).round();
        let left = ((rw as usize) - 224) / 2;
        let sx_scale = 500.0 / rw;
        let src = &s.masks[&0];
        let mut oracle_area = 0usize;
        for y in 0..224 {
            for x in 0..224 {
                let sy = (((y as f64) + 0.5) * scale).floor() as usize;
                let sx = ((((x + left) as f64) + 0.5) * sx_scale).floor() as usize;
                if src[[sy.min(299), sx.min(499)]] {
                    oracle_area += 1;
                }
            }
        }
        let area = n.masks[&0].iter().filter(|&&v| v).count();
        assert_eq!(area, oracle_area);
        assert!(area > 0);
    }
}
