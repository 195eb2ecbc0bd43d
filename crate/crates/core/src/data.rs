//! Dataset loading, augmentation, normalization and batching.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain, Rng};

/// An `H×W×C` image. Raw images hold values in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug)]
pub struct Record {
    pub path: Option<PathBuf>,
    pub image: Arc<Image>,
    pub label: Option<usize>,
    /// Object box `(x_min, y_min, x_max, y_max)` in pixels, when known.
    pub bbox: Option<[f64; 4]>,
}

/// An immutable, ordered list of decoded images.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.class_count > 0 && self.records.iter().all(|r| r.label.is_some())
    }

    /// Labels of every record; errors if any is missing.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| r.label.ok_or_else(|| Error::Data(format!("record {i} has no label"))))
            .collect()
    }

    /// The first `n` records (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        Self {
            records: self.records.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if let Some(l) = r.label {
                if l >= self.class_count {
                    return Err(Error::Data(format!("record {i} label {l} outside [0, {})", self.class_count)));
                }
            }
        }
        Ok(())
    }
}

/// Generator settings for the synthetic glyphs corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub classes: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    32
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// Class-per-directory tree; files directly under the root are unlabeled.
    Directory(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Load and decode a dataset.
///
/// Directory roots yield classes from subdirectory names in lexicographic
/// order and files sorted by name. PNG and binary PNM are supported.
pub fn load_dataset(source: &DatasetSource, split: Split) -> Result<DatasetManifest> {
    let manifest = match source {
        DatasetSource::Directory(root) => load_directory(root, split)?,
        DatasetSource::Synthetic(spec) => synthetic_dataset(spec, split)?,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm" | "pam")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Decode an image file to RGB values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb32f();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw().into_iter().map(f64::from).collect())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Encode an image with values in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, image: ArrayView3<'_, f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Data(format!("expected 3 channels, got {c}")));
    }
    let bytes: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_directory(root: &Path, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let entries = sorted_entries(root)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut records = Vec::new();
    let mut class_names = Vec::new();
    if class_dirs.is_empty() {
        for p in entries.iter().filter(|p| is_image(p)) {
            records.push(Record {
                path: Some(p.clone()),
                image: Arc::new(read_image(p)?),
                label: None,
                bbox: None,
            });
        }
    } else {
        for (label, dir) in class_dirs.iter().enumerate() {
            class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            for p in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
                records.push(Record {
                    image: Arc::new(read_image(&p)?),
                    path: Some(p),
                    label: Some(label),
                    bbox: None,
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no images under {}", root.display())));
    }
    Ok(DatasetManifest {
        records,
        class_count: class_names.len(),
        class_names,
        split,
    })
}

/// The synthetic glyphs: 4×4 cell masks, `#` marking foreground cells.
pub const GLYPHS: [(&str, [&str; 4]); 10] = [
    ("band", ["....", "####", "####", "...."]),
    ("pillar", [".##.", ".##.", ".##.", ".##."]),
    ("cross", [".##.", "####", "####", ".##."]),
    ("diagonal", ["#...", ".#..", "..#.", "...#"]),
    ("antidiagonal", ["...#", "..#.", ".#..", "#..."]),
    ("frame", ["####", "#..#", "#..#", "####"]),
    ("corner", ["##..", "##..", "....", "...."]),
    ("ell", ["#...", "#...", "#...", "####"]),
    ("tee", ["####", ".##.", ".##.", ".##."]),
    ("checker", ["##..", "##..", "..##", "..##"]),
];

fn glyph_cell(class: usize, u: usize, v: usize) -> bool {
    GLYPHS[class % GLYPHS.len()].1[v].as_bytes()[u] == b'#'
}

/// Render one synthetic image of the given class and its object box
/// `(x_min, y_min, x_max, y_max)` in pixels.
///
/// The class glyph is drawn light on dark at a random scale between 0.4 and
/// 1 of the image side and a random offset, with pixel noise on top. The box
/// is the extent of the glyph's foreground cells.
pub fn render_glyph(class: usize, size: usize, rng: &mut Rng) -> (Image, [f64; 4]) {
    const FG: f64 = 0.8;
    const BG: f64 = 0.2;
    let s = size as f64;
    let side = rng.gen_range(0.4..=1.0) * s;
    let ox = rng.gen_range(0.0..=s - side);
    let oy = rng.gen_range(0.0..=s - side);
    let cell = side / 4.0;
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let mut img = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 + 0.5 - ox) / cell).floor();
            let v = ((y as f64 + 0.5 - oy) / cell).floor();
            let on = (0.0..4.0).contains(&u) && (0.0..4.0).contains(&v) && glyph_cell(class, u as usize, v as usize);
            for c in 0..3 {
                img[[y, x, c]] = (if on { FG } else { BG } + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    let cells = (0..4).flat_map(|v| (0..4).map(move |u| (u, v)));
    let on: Vec<(usize, usize)> = cells.filter(|&(u, v)| glyph_cell(class, u, v)).collect();
    let lo = |f: fn(&(usize, usize)) -> usize| on.iter().map(f).min().unwrap_or(0) as f64;
    let hi = |f: fn(&(usize, usize)) -> usize| on.iter().map(f).max().unwrap_or(3) as f64 + 1.0;
    let bbox = [
        ox + lo(|c| c.0) * cell,
        oy + lo(|c| c.1) * cell,
        ox + hi(|c| c.0) * cell,
        oy + hi(|c| c.1) * cell,
    ];
    (img, bbox)
}

/// The synthetic glyphs corpus. Labels cycle through the classes so every
/// class is equally represented; train and val draw from distinct streams.
pub fn synthetic_dataset(spec: &SyntheticSpec, split: Split) -> Result<DatasetManifest> {
    if spec.n_images == 0 || spec.classes == 0 {
        return Err(Error::Data("synthetic spec needs images and classes".into()));
    }
    if spec.classes > GLYPHS.len() {
        return Err(Error::Data(format!("at most {} synthetic classes", GLYPHS.len())));
    }
    let split_key = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    let records = (0..spec.n_images)
        .map(|i| {
            let label = i % spec.classes;
            let mut r = rng::stream(spec.seed, &[domain::SYNTHETIC, split_key, i as u64]);
            let (image, bbox) = render_glyph(label, spec.image_size, &mut r);
            Record {
                path: None,
                image: Arc::new(image),
                label: Some(label),
                bbox: Some(bbox),
            }
        })
        .collect();
    Ok(DatasetManifest {
        records,
        class_count: spec.classes,
        class_names: GLYPHS[..spec.classes].iter().map(|g| g.0.to_string()).collect(),
        split,
    })
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn half() -> Self {
        Self {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }

    pub fn apply(&self, image: &mut Image) {
        for (c, mut plane) in image.axis_iter_mut(ndarray::Axis(2)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
    }

    pub fn invert(&self, image: &mut Image) {
        for (c, mut plane) in image.axis_iter_mut(ndarray::Axis(2)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| v * s + m);
        }
    }
}

/// Training-time augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the crop's area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub aspect_ratio: (f64, f64),
    pub flip_prob: f64,
    pub output_size: usize,
    pub normalize: Normalization,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            output_size: 32,
            normalize: Normalization::half(),
        }
    }
}

impl AugmentConfig {
    /// No cropping or flipping: just resize and normalize.
    pub fn identity(output_size: usize, normalize: Normalization) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            output_size,
            normalize,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_scale == (1.0, 1.0) && self.flip_prob == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < low ≤ high ≤ 1")));
        }
        let (a, b) = self.aspect_ratio;
        if !(a > 0.0 && a <= b) {
            return Err(Error::Config(format!("aspect_ratio ({a}, {b}) invalid")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output_size must be positive".into()));
        }
        if self.normalize.mean.len() != self.normalize.std.len() || self.normalize.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization needs matching positive per-channel stats".into()));
        }
        Ok(())
    }
}

/// Crop rectangle in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

/// Draw a crop whose area fraction is uniform on `crop_scale`.
///
/// The log aspect ratio is uniform on `aspect_ratio` restricted to the ratios
/// for which a crop of that area fits inside the image, so no draw is ever
/// rejected and the area distribution stays exactly uniform.
pub fn sample_crop(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut Rng) -> CropBox {
    let (h, w) = (height as f64, width as f64);
    let (lo, hi) = cfg.crop_scale;
    let frac = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let area = frac * h * w;
    let r_lo = cfg.aspect_ratio.0.max(area / (h * h));
    let r_hi = cfg.aspect_ratio.1.min(w * w / area);
    let ratio = if r_lo < r_hi {
        (rng.gen_range(r_lo.ln()..=r_hi.ln())).exp()
    } else {
        r_lo.min(w * w / area).max(area / (h * h))
    };
    let cw = (area * ratio).sqrt().min(w);
    let ch = (area / ratio).sqrt().min(h);
    let x0 = if w > cw { rng.gen_range(0.0..=w - cw) } else { 0.0 };
    let y0 = if h > ch { rng.gen_range(0.0..=h - ch) } else { 0.0 };
    CropBox {
        x0,
        y0,
        width: cw,
        height: ch,
    }
}

/// Bilinearly resample `crop` of `image` to `size × size`.
pub fn resample(image: ArrayView3<'_, f64>, crop: CropBox, size: usize) -> Image {
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((size, size, c));
    let sy = crop.height / size as f64;
    let sx = crop.width / size as f64;
    for i in 0..size {
        let y = (crop.y0 + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..size {
            let x = (crop.x0 + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for k in 0..c {
                let top = image[[y0, x0, k]] * (1.0 - fx) + image[[y0, x1, k]] * fx;
                let bottom = image[[y1, x0, k]] * (1.0 - fx) + image[[y1, x1, k]] * fx;
                out[[i, j, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Random crop of uniform area fraction, resized to `output_size`.
pub fn random_resized_crop(image: ArrayView3<'_, f64>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Data(format!("degenerate image {h}×{w}×{c}")));
    }
    let crop = sample_crop(h, w, cfg, rng);
    Ok(resample(image, crop, cfg.output_size))
}

/// Full augmentation of one raw image: crop, flip, normalize.
pub fn augment(image: ArrayView3<'_, f64>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    let mut out = random_resized_crop(image, cfg, rng)?;
    if cfg.flip_prob > 0.0 && rng.gen::<f64>() < cfg.flip_prob {
        out = out.slice(s![.., ..;-1, ..]).to_owned();
    }
    cfg.normalize.apply(&mut out);
    Ok(out)
}

/// Deterministic evaluation transform: whole-image resize and normalize.
pub fn eval_transform(image: ArrayView3<'_, f64>, cfg: &AugmentConfig) -> Image {
    let (h, w, _) = image.dim();
    let mut out = if h == cfg.output_size && w == cfg.output_size {
        image.to_owned()
    } else {
        let full = CropBox {
            x0: 0.0,
            y0: 0.0,
            width: w as f64,
            height: h as f64,
        };
        resample(image, full, cfg.output_size)
    };
    cfg.normalize.apply(&mut out);
    out
}

/// One mini-batch of augmented, normalized images.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Record indices into the manifest.
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub labels: Vec<Option<usize>>,
}

/// Iterator over the batches of one epoch.
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    augment: &'a AugmentConfig,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    seed: u64,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.next * self.batch_size;
        if start + self.batch_size > self.order.len() {
            return None;
        }
        let indices = self.order[start..start + self.batch_size].to_vec();
        let images = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut r = rng::stream(self.seed, &[domain::AUGMENT, (start + k) as u64]);
                augment(self.manifest.records[i].image.view(), self.augment, &mut r)
                    .expect("images validated when the iterator was built")
            })
            .collect();
        let labels = indices.iter().map(|&i| self.manifest.records[i].label).collect();
        self.next += 1;
        Some(Batch { indices, images, labels })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.order.len() / self.batch_size - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Shuffle the manifest with a stream keyed by `seed` and cut it into full
/// batches; the last partial batch is dropped.
pub fn make_batches<'a>(
    manifest: &'a DatasetManifest,
    batch_size: usize,
    augment: &'a AugmentConfig,
    seed: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if batch_size > manifest.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} exceeds dataset size {}",
            manifest.len()
        )));
    }
    augment.validate()?;
    if let Some(r) = manifest.records.iter().find(|r| r.image.is_empty()) {
        return Err(Error::Data(format!("degenerate image {:?}", r.path)));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[domain::SHUFFLE]));
    Ok(BatchIter {
        manifest,
        augment,
        order,
        batch_size,
        next: 0,
        seed,
    })
}
