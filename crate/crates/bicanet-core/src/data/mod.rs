//! Synthetic segmentation data, augmentation, and dataset storage.

pub mod pnm;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng64};
use crate::tensor::{Shape, Tensor};

pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel integer class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn distinct_values(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::shape("sample image", "1x3xHxW", s.to_string()));
        }
        if (s.h, s.w) != (labels.h, labels.w) {
            return Err(Error::shape(
                "sample label map",
                format!("{}x{}", s.h, s.w),
                format!("{}x{}", labels.h, labels.w),
            ));
        }
        if labels.data.iter().all(|&v| v == IGNORE_LABEL) {
            return Err(Error::Data("sample has no non-ignored pixel".into()));
        }
        Ok(SegSample { image, labels })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.labels.h, self.labels.w)
    }
}

/// Recipe for the synthetic shape dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Class count L: background 0 plus L - 1 primitive kinds.
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub canvas: usize,
    /// Amplitude of the per-shape color offset; larger values make color a
    /// weaker class cue.
    pub color_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 5,
            shapes_min: 2,
            shapes_max: 5,
            canvas: 64,
            color_jitter: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(
                "synthetic spec needs background plus at least one foreground class".into(),
            ));
        }
        if self.classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "class count {} collides with the ignore label",
                self.classes
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        if self.canvas < 8 {
            return Err(Error::Config("canvas too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Primitive {
    Rectangle,
    Disk,
    Triangle,
    Ring,
}

impl Primitive {
    fn for_class(class: u8) -> Self {
        match (class as usize - 1) % 4 {
            0 => Primitive::Rectangle,
            1 => Primitive::Disk,
            2 => Primitive::Triangle,
            _ => Primitive::Ring,
        }
    }

    fn contains(&self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Primitive::Rectangle => dy.abs() <= r * 0.9 && dx.abs() <= r * 0.9,
            Primitive::Disk => dy * dy + dx * dx <= r * r,
            Primitive::Triangle => {
                // Up-pointing isoceles triangle, slightly enlarged so its
                // area stays comparable to the other primitives.
                let rr = r * 1.3;
                dy >= -rr && dy <= rr && dx.abs() <= (dy + rr) / 2.0
            }
            Primitive::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
            }
        }
    }
}

/// Base color per class, pulled from the prediction palette so classes are
/// nominally separated in color space (the jitter erodes that separation).
fn base_color(class: u8) -> [f32; 3] {
    let entry = pnm::palette()[class as usize];
    [
        entry[0] as f32 / 255.0,
        entry[1] as f32 / 255.0,
        entry[2] as f32 / 255.0,
    ]
}

/// Deterministically generate sample `index` of the dataset described by
/// `spec`: randomly placed overlapping primitives, one kind per foreground
/// class, painted with jittered class colors plus pixel noise; labels trace
/// the painted regions exactly, later shapes occluding earlier ones.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> Result<SegSample> {
    spec.validate()?;
    let mut rng = Rng64::new(derive_seed(spec.seed, index));
    let s = spec.canvas;
    let noise = 0.03f64;

    let bg = base_color(0);
    let bg_jitter: Vec<f64> = (0..3)
        .map(|_| rng.uniform_in(-0.5, 0.5) * spec.color_jitter as f64)
        .collect();
    let mut image = Tensor::zeros(Shape::new(1, 3, s, s));
    let mut labels = LabelMap::filled(s, s, 0);
    let img_shape = image.shape();
    {
        let data = image.data_mut();
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let v = 0.35 + bg[c] as f64 * 0.3 + bg_jitter[c]
                        + rng.uniform_in(-noise, noise);
                    data[img_shape.at(0, c, y, x)] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let count = rng.range_inclusive(spec.shapes_min, spec.shapes_max);
    for _ in 0..count {
        let class = 1 + rng.below(spec.classes - 1) as u8;
        let kind = Primitive::for_class(class);
        // Beyond the four base kinds, classes reuse a primitive at a larger,
        // disjoint size band, so identity requires judging extent and not
        // just local boundary shape.
        let r = match (class as usize - 1) / 4 {
            0 => rng.uniform_in(s as f64 / 8.0, s as f64 / 4.0),
            _ => rng.uniform_in(s as f64 / 3.5, s as f64 / 2.8),
        };
        let cy = rng.uniform_in(0.0, s as f64);
        let cx = rng.uniform_in(0.0, s as f64);
        let base = base_color(class);
        let offset: Vec<f64> = (0..3)
            .map(|_| rng.uniform_in(-1.0, 1.0) * spec.color_jitter as f64)
            .collect();
        let data = image.data_mut();
        for y in 0..s {
            for x in 0..s {
                if kind.contains(y as f64 - cy, x as f64 - cx, r) {
                    labels.set(y, x, class);
                    for c in 0..3 {
                        let v = base[c] as f64 + offset[c] + rng.uniform_in(-noise, noise);
                        data[img_shape.at(0, c, y, x)] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    SegSample::new(image, labels)
}

pub fn generate_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Vec<SegSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
    }
    (0..count as u64).map(|i| generate_sample(spec, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_range: (f32, f32),
    pub aspect_range: (f32, f32),
    pub hflip: bool,
    /// Off by default; gated separately because vertical flips are rarely
    /// label-preserving for natural scenes.
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: 64,
            scale_range: (0.5, 2.0),
            aspect_range: (0.7, 1.5),
            hflip: true,
            vflip: false,
        }
    }
}

/// Arbitrary-ratio bilinear resize with half-pixel-center alignment.
pub fn resize_bilinear(image: &Tensor, th: usize, tw: usize) -> Tensor {
    let s = image.shape();
    let sy = s.h as f64 / th as f64;
    let sx = s.w as f64 / tw as f64;
    Tensor::from_fn(Shape::new(s.n, s.c, th, tw), |n, c, y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (s.h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (s.w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(s.h - 1);
        let x1 = (x0 + 1).min(s.w - 1);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let v = |yy: usize, xx: usize| image.at(n, c, yy, xx) as f64;
        let top = v(y0, x0) + (v(y0, x1) - v(y0, x0)) * tx;
        let bot = v(y1, x0) + (v(y1, x1) - v(y1, x0)) * tx;
        (top + (bot - top) * ty) as f32
    })
}

/// Nearest-neighbor label resize; introduces no new label values.
pub fn resize_nearest(labels: &LabelMap, th: usize, tw: usize) -> LabelMap {
    let sy = labels.h as f64 / th as f64;
    let sx = labels.w as f64 / tw as f64;
    let mut out = LabelMap::filled(th, tw, 0);
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).round().clamp(0.0, (labels.h - 1) as f64);
        for x in 0..tw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).round().clamp(0.0, (labels.w - 1) as f64);
            out.set(y, x, labels.at(fy as usize, fx as usize));
        }
    }
    out
}

pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    let s = sample.image.shape();
    let image = Tensor::from_fn(s, |n, c, y, x| sample.image.at(n, c, y, s.w - 1 - x));
    let mut labels = LabelMap::filled(s.h, s.w, 0);
    for y in 0..s.h {
        for x in 0..s.w {
            labels.set(y, x, sample.labels.at(y, s.w - 1 - x));
        }
    }
    SegSample { image, labels }
}

pub fn flip_vertical(sample: &SegSample) -> SegSample {
    let s = sample.image.shape();
    let image = Tensor::from_fn(s, |n, c, y, x| sample.image.at(n, c, s.h - 1 - y, x));
    let mut labels = LabelMap::filled(s.h, s.w, 0);
    for y in 0..s.h {
        for x in 0..s.w {
            labels.set(y, x, sample.labels.at(s.h - 1 - y, x));
        }
    }
    SegSample { image, labels }
}

/// Scale, reshape, flip, and crop one sample. The image is interpolated
/// bilinearly, labels by nearest neighbor; when the scaled sample is smaller
/// than the crop the remainder is padded with zero image and ignore labels.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut Rng64) -> SegSample {
    let (h, w) = sample.size();
    let scale = rng.uniform_in(cfg.scale_range.0 as f64, cfg.scale_range.1 as f64);
    let aspect = rng.uniform_in(cfg.aspect_range.0 as f64, cfg.aspect_range.1 as f64);
    let th = ((h as f64 * scale).round() as usize).max(1);
    let tw = ((w as f64 * scale * aspect).round() as usize).max(1);

    let mut cur = SegSample {
        image: resize_bilinear(&sample.image, th, tw),
        labels: resize_nearest(&sample.labels, th, tw),
    };
    if cfg.hflip && rng.coin() {
        cur = flip_horizontal(&cur);
    }
    if cfg.vflip && rng.coin() {
        cur = flip_vertical(&cur);
    }

    let crop = cfg.crop;
    // Source offset when the scaled sample is larger than the crop, or
    // destination offset when it is smaller.
    let (src_y, dst_y) = random_offset(th, crop, rng);
    let (src_x, dst_x) = random_offset(tw, crop, rng);

    let mut image = Tensor::zeros(Shape::new(1, 3, crop, crop));
    let mut labels = LabelMap::filled(crop, crop, IGNORE_LABEL);
    let copy_h = th.min(crop);
    let copy_w = tw.min(crop);
    let ishape = image.shape();
    let data = image.data_mut();
    for c in 0..3 {
        for y in 0..copy_h {
            for x in 0..copy_w {
                data[ishape.at(0, c, dst_y + y, dst_x + x)] =
                    cur.image.at(0, c, src_y + y, src_x + x);
            }
        }
    }
    for y in 0..copy_h {
        for x in 0..copy_w {
            labels.set(dst_y + y, dst_x + x, cur.labels.at(src_y + y, src_x + x));
        }
    }
    SegSample { image, labels }
}

fn random_offset(extent: usize, crop: usize, rng: &mut Rng64) -> (usize, usize) {
    if extent >= crop {
        (rng.below(extent - crop + 1), 0)
    } else {
        (0, rng.below(crop - extent + 1))
    }
}

// --- raster conversions -----------------------------------------------------

pub fn image_to_rgb(image: &Tensor) -> pnm::Rgb {
    let s = image.shape();
    let mut data = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = (image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                data.push(v);
            }
        }
    }
    pnm::Rgb {
        w: s.w,
        h: s.h,
        data,
    }
}

pub fn rgb_to_image(rgb: &pnm::Rgb) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, rgb.h, rgb.w), |_, c, y, x| {
        rgb.data[(y * rgb.w + x) * 3 + c] as f32 / 255.0
    })
}

pub fn labels_to_gray(labels: &LabelMap) -> pnm::Gray {
    pnm::Gray {
        w: labels.w,
        h: labels.h,
        data: labels.data.clone(),
    }
}

/// Read a label raster, validating values against the class count.
pub fn gray_to_labels(gray: &pnm::Gray, classes: usize) -> Result<LabelMap> {
    for (p, &v) in gray.data.iter().enumerate() {
        if v != IGNORE_LABEL && (v as usize) >= classes {
            return Err(Error::Data(format!(
                "label {v} at pixel {p} out of range for {classes} classes"
            )));
        }
    }
    Ok(LabelMap {
        h: gray.h,
        w: gray.w,
        data: gray.data.clone(),
    })
}

// --- dataset directory layout -------------------------------------------------

/// Split membership for a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Write `images/NNNN.ppm`, `labels/NNNN.pgm`, and `manifest.json`.
pub fn save_dataset(dir: &Path, train: &[SegSample], val: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = Manifest::default();
    for (i, sample) in train.iter().chain(val).enumerate() {
        let id = format!("{i:04}");
        pnm::write_ppm(
            &dir.join("images").join(format!("{id}.ppm")),
            &image_to_rgb(&sample.image),
        )?;
        pnm::write_pgm(
            &dir.join("labels").join(format!("{id}.pgm")),
            &labels_to_gray(&sample.labels),
        )?;
        if i < train.len() {
            manifest.train.push(id);
        } else {
            manifest.val.push(id);
        }
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_split(dir: &Path, split: &str, classes: usize) -> Result<Vec<SegSample>> {
    let manifest = load_manifest(dir)?;
    let ids = match split {
        "train" => &manifest.train,
        "val" => &manifest.val,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train or val)"
            )))
        }
    };
    ids.iter()
        .map(|id| {
            let rgb = pnm::read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
            let gray = pnm::read_pgm(&dir.join("labels").join(format!("{id}.pgm")))?;
            SegSample::new(rgb_to_image(&rgb), gray_to_labels(&gray, classes)?)
        })
        .collect()
}
