//! Annotation parsing, image I/O, square rescaling and the synthetic toy set.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{BoundingBox, BoxRole, BoxSet};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, Tensor3};

pub const DEFAULT_TARGET_SIZE: usize = 512;
const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "jpeg", "png", "ppm", "pnm"];

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage<S> {
    pub id: String,
    pub image: ImageTensor<S>,
    pub boxes: BoxSet,
    /// `(width, height)` before rescaling.
    pub original_dims: (usize, usize),
}

impl<S: Scalar> AnnotatedImage<S> {
    pub fn hboxes(&self) -> Vec<BoundingBox> {
        self.boxes.with_role(BoxRole::Hbox)
    }

    pub fn vboxes(&self) -> Vec<BoundingBox> {
        self.boxes.with_role(BoxRole::Vbox)
    }
}

/// Annotation record before any image is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub boxes: BoxSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IgnorePolicy {
    /// Drop entries flagged ignore (a flagged head drops only the hbox).
    #[default]
    Drop,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub annotations: PathBuf,
    pub image_dir: PathBuf,
    pub target_size: usize,
    #[serde(default)]
    pub ignore_policy: IgnorePolicy,
}

impl DatasetManifest {
    pub fn new(annotations: impl Into<PathBuf>, image_dir: impl Into<PathBuf>) -> Self {
        Self {
            annotations: annotations.into(),
            image_dir: image_dir.into(),
            target_size: DEFAULT_TARGET_SIZE,
            ignore_policy: IgnorePolicy::Drop,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.latent_shape(self.target_size, self.target_size).map(|_| ())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct OdgtRecord {
    #[serde(rename = "ID")]
    id: String,
    #[serde(default)]
    gtboxes: Vec<OdgtBox>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct OdgtBox {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_attr: Option<IgnoreFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<IgnoreFlag>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct IgnoreFlag {
    #[serde(default)]
    ignore: i64,
}

fn flagged(flag: &Option<IgnoreFlag>) -> bool {
    flag.as_ref().is_some_and(|f| f.ignore != 0)
}

fn record_boxes(rec: &OdgtRecord, policy: IgnorePolicy) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    for entry in &rec.gtboxes {
        let drop_all = policy == IgnorePolicy::Drop && flagged(&entry.extra);
        if drop_all {
            continue;
        }
        let drop_head = policy == IgnorePolicy::Drop && flagged(&entry.head_attr);
        if let (Some([x, y, w, h]), false) = (entry.hbox, drop_head) {
            out.push(BoundingBox::new(x, y, w, h, BoxRole::Hbox));
        }
        if let Some([x, y, w, h]) = entry.vbox {
            out.push(BoundingBox::new(x, y, w, h, BoxRole::Vbox));
        }
    }
    out
}

/// Parse an ODGT-style annotation file, one JSON record per line.
///
/// Blank lines are skipped. Any malformed line fails the whole load.
pub fn parse_annotations(path: &Path, policy: IgnorePolicy) -> Result<Vec<RawRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OdgtRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let boxes = record_boxes(&rec, policy);
        records.push(RawRecord {
            id: rec.id,
            boxes: BoxSet::new(boxes),
        });
    }
    Ok(records)
}

/// One annotation line for `boxes`. The i-th hbox and i-th vbox share an entry.
pub fn annotation_line(id: &str, boxes: &BoxSet) -> String {
    let heads = boxes.with_role(BoxRole::Hbox);
    let bodies = boxes.with_role(BoxRole::Vbox);
    let arr = |b: &BoundingBox| [b.x, b.y, b.w, b.h];
    let gtboxes = (0..heads.len().max(bodies.len()))
        .map(|i| OdgtBox {
            tag: Some("person".into()),
            hbox: heads.get(i).map(arr),
            vbox: bodies.get(i).map(arr),
            ..OdgtBox::default()
        })
        .collect();
    serde_json::to_string(&OdgtRecord {
        id: id.to_string(),
        gtboxes,
    })
    .expect("annotation records always serialize")
}

pub fn write_annotations<S: Scalar>(path: &Path, images: &[AnnotatedImage<S>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for img in images {
        writeln!(f, "{}", annotation_line(&img.id, &img.boxes))?;
    }
    f.flush()?;
    Ok(())
}

/// Load an 8-bit RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image<S: Scalar>(path: &Path) -> Result<ImageTensor<S>> {
    let rgb = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor<S: Scalar>(rgb: &RgbImage) -> ImageTensor<S> {
    let (w, h) = rgb.dimensions();
    Tensor3::from_fn(3, h as usize, w as usize, |c, y, x| {
        S::lit(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// Convert to 8-bit RGB, clamping to `[0, 1]` and rounding.
pub fn tensor_to_rgb<S: Scalar>(t: &ImageTensor<S>) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {}", t.channels())));
    }
    Ok(RgbImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let px = |c| (t.get(c, y as usize, x as usize).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Save as 8-bit RGB; the format follows the file extension.
pub fn save_image<S: Scalar>(t: &ImageTensor<S>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save(path)?;
    Ok(())
}

fn resize_bilinear<S: Scalar>(img: &ImageTensor<S>, width: usize, height: usize) -> ImageTensor<S> {
    let src = Rgb32FImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let px = |c| img.get(c, y as usize, x as usize).as_f64() as f32;
        image::Rgb([px(0), px(1), px(2)])
    });
    let dst = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
    Tensor3::from_fn(3, height, width, |c, y, x| {
        S::lit((dst.get_pixel(x as u32, y as u32)[c] as f64).clamp(0.0, 1.0))
    })
}

/// Map one box through the anisotropic scaling and clamp it to the target
/// square. `None` if it ends up smaller than one pixel in either direction.
pub fn rescale_box(b: &BoundingBox, sx: f64, sy: f64, target: usize) -> Option<BoundingBox> {
    let t = target as f64;
    let x0 = (b.x * sx).clamp(0.0, t);
    let y0 = (b.y * sy).clamp(0.0, t);
    let x1 = ((b.x + b.w) * sx).clamp(0.0, t);
    let y1 = ((b.y + b.h) * sy).clamp(0.0, t);
    let (w, h) = (x1 - x0, y1 - y0);
    (w >= 1.0 && h >= 1.0).then(|| BoundingBox::new(x0, y0, w, h, b.role))
}

/// Resize to `target x target` (bilinear, aspect not preserved) and adjust boxes.
pub fn rescale<S: Scalar>(
    id: &str,
    image: &ImageTensor<S>,
    boxes: &BoxSet,
    target: usize,
) -> Result<AnnotatedImage<S>> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || image.channels() != 3 {
        return Err(Error::Input(format!("cannot rescale image `{id}` of shape {:?}", image.shape())));
    }
    if target == 0 {
        return Err(Error::Input("rescale target must be positive".into()));
    }
    let (sx, sy) = (target as f64 / w as f64, target as f64 / h as f64);
    let resized = if w == target && h == target {
        image.clone()
    } else {
        resize_bilinear(image, target, target)
    };
    let boxes = boxes
        .iter()
        .filter_map(|b| rescale_box(b, sx, sy, target))
        .collect();
    Ok(AnnotatedImage {
        id: id.to_string(),
        image: resized,
        boxes: BoxSet::new(boxes),
        original_dims: (w, h),
    })
}

fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Input(format!("no image for `{id}` in {}", dir.display())))
}

/// Load every annotated image of a manifest, rescaled to its target size.
pub fn load_dataset<S: Scalar>(manifest: &DatasetManifest) -> Result<Vec<AnnotatedImage<S>>> {
    let records = parse_annotations(&manifest.annotations, manifest.ignore_policy)?;
    records
        .par_iter()
        .map(|rec| {
            let path = find_image(&manifest.image_dir, &rec.id)?;
            let image = load_image::<S>(&path)?;
            rescale(&rec.id, &image, &rec.boxes, manifest.target_size)
        })
        .collect()
}

/// Write images as PNG plus an annotation file; returns the manifest that reloads them.
pub fn write_dataset<S: Scalar>(dir: &Path, images: &[AnnotatedImage<S>]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    for img in images {
        save_image(&img.image, &dir.join(format!("{}.png", img.id)))?;
    }
    let annotations = dir.join("annotations.odgt");
    write_annotations(&annotations, images)?;
    let size = images.first().map_or(DEFAULT_TARGET_SIZE, |i| i.image.width());
    Ok(DatasetManifest {
        annotations,
        image_dir: dir.to_path_buf(),
        target_size: size,
        ignore_policy: IgnorePolicy::Drop,
    })
}

fn synthetic_image<S: Scalar>(index: usize, rng: &mut ChaCha8Rng, size: usize) -> AnnotatedImage<S> {
    let s = size as f64;
    // smooth two-tone background with a low-frequency wave
    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let tilt: [f64; 3] = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let (fx, fy, phase) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..std::f64::consts::TAU));
    let amp = rng.gen_range(0.03..0.08);

    let body_w = (rng.gen_range(0.25..0.4) * s).round().max(4.0);
    let body_h = (rng.gen_range(0.45..0.7) * s).round().max(6.0);
    let body_x = rng.gen_range(0.0..=(s - body_w)).round();
    let body_y = rng.gen_range(0.0..=(s - body_h)).round();
    let body_color: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];

    let head = (body_w * rng.gen_range(0.5..0.8)).round().clamp(2.0, body_h / 2.0).floor();
    let head_x = (body_x + rng.gen_range(0.0..=(body_w - head))).round();
    let head_y = (body_y + rng.gen_range(0.0..=(body_h * 0.25).min(body_h - head))).round();
    let cell = (head / 4.0).max(1.0);
    let dark = rng.gen_range(0.0..0.15);
    let light = rng.gen_range(0.85..1.0);

    let hbox = BoundingBox::new(head_x, head_y, head, head, BoxRole::Hbox);
    let vbox = BoundingBox::new(body_x, body_y, body_w, body_h, BoxRole::Vbox);
    let inside = |b: &BoundingBox, x: f64, y: f64| x >= b.x && x < b.right() && y >= b.y && y < b.bottom();

    let image = Tensor3::from_fn(3, size, size, |c, yi, xi| {
        let (x, y) = (xi as f64, yi as f64);
        let v = if inside(&hbox, x, y) {
            let cx = ((x - hbox.x) / cell).floor() as i64;
            let cy = ((y - hbox.y) / cell).floor() as i64;
            if (cx + cy) % 2 == 0 {
                light
            } else {
                dark
            }
        } else if inside(&vbox, x, y) {
            body_color[c] + 0.05 * ((y - vbox.y) / vbox.h - 0.5)
        } else {
            let wave = amp * (std::f64::consts::TAU * (fx * x / s + fy * y / s) + phase).sin();
            base[c] + tilt[c] * (x / s - 0.5) + tilt[(c + 1) % 3] * (y / s - 0.5) + wave
        };
        S::lit(v.clamp(0.0, 1.0))
    });
    AnnotatedImage {
        id: format!("synth_{index:05}"),
        image,
        boxes: BoxSet::new(vec![hbox, vbox]),
        original_dims: (size, size),
    }
}

/// Toy dataset: textured background, one body (vbox) with a checkerboard head
/// (hbox) in its top region. Box coordinates are whole pixels.
pub fn make_synthetic_dataset<S: Scalar>(n: usize, seed: u64, size: usize) -> Result<Vec<AnnotatedImage<S>>> {
    if n == 0 {
        return Err(Error::Input("synthetic dataset needs at least one image".into()));
    }
    if size < 8 {
        return Err(Error::Input(format!("synthetic image size {size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| synthetic_image(i, &mut rng, size)).collect())
}
