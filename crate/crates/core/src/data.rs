//! Dataset types, manifest ingestion and labeled/unlabeled splitting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated point in image pixels (origin top-left, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, visible: true }
    }

    pub fn hidden() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            visible: false,
        }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn in_frame(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Pose { keypoints }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn visible_mask(&self) -> Vec<bool> {
        self.keypoints.iter().map(|k| k.visible).collect()
    }
}

/// Planar image, channel-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Image::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                *out.at_mut(c, y as usize, x as usize) = px[c] as f32 / 255.0;
            }
        }
        out
    }

    /// Quantizes to 8-bit RGB. Single-channel images are replicated.
    pub fn to_rgb(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let src = c.min(self.channels - 1);
                    *v = (self.at(src, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Arc<Image>,
    pub pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub image_size: usize,
    pub flip_pairs: Vec<[usize; 2]>,
    pub pck_reference_pair: [usize; 2],
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Schema {
            context: "spec".into(),
            reason,
        };
        if self.k == 0 {
            return Err(bad("K must be positive".into()));
        }
        let mut seen = HashSet::new();
        for &[i, j] in &self.flip_pairs {
            if i == j || i >= self.k || j >= self.k {
                return Err(bad(format!("flip pair [{i}, {j}] invalid for K={}", self.k)));
            }
            if !seen.insert(i) || !seen.insert(j) {
                return Err(bad(format!("keypoint repeated in flip pairs at [{i}, {j}]")));
            }
        }
        let [a, b] = self.pck_reference_pair;
        if a == b || a >= self.k || b >= self.k {
            return Err(bad(format!(
                "pck_reference_pair [{a}, {b}] invalid for K={}",
                self.k
            )));
        }
        Ok(())
    }

    /// Channel permutation applied under a horizontal flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.k).collect();
        for &[i, j] in &self.flip_pairs {
            perm.swap(i, j);
        }
        perm
    }
}

/// Ground truth of nominally unlabeled samples. Only diagnostics read it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeldBackLabels {
    poses: BTreeMap<String, Pose>,
}

impl HeldBackLabels {
    pub fn new(poses: BTreeMap<String, Pose>) -> Self {
        HeldBackLabels { poses }
    }

    pub fn get(&self, id: &str) -> Option<&Pose> {
        self.poses.get(id)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Pose)> {
        self.poses.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: BTreeMap<&String, Vec<[f64; 3]>> = self
            .poses
            .iter()
            .map(|(id, p)| (id, pose_to_rows(p)))
            .collect();
        let text = serde_json::to_string_pretty(&rows)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: BTreeMap<String, Vec<[f64; 3]>> = serde_json::from_str(&text)?;
        Ok(HeldBackLabels {
            poses: rows
                .into_iter()
                .map(|(id, r)| (id, pose_from_rows(&r)))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub spec: DatasetSpec,
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Present only for diagnostic splits.
    pub held_back: Option<HeldBackLabels>,
}

impl DatasetSplit {
    pub fn is_diagnostic(&self) -> bool {
        self.held_back.is_some()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    samples: Vec<ManifestRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    image: String,
    keypoints: Option<Vec<[f64; 3]>>,
}

fn pose_to_rows(p: &Pose) -> Vec<[f64; 3]> {
    p.keypoints
        .iter()
        .map(|k| [k.x, k.y, if k.visible { 1.0 } else { 0.0 }])
        .collect()
}

fn pose_from_rows(rows: &[[f64; 3]]) -> Pose {
    Pose::new(
        rows.iter()
            .map(|r| Keypoint {
                x: r[0],
                y: r[1],
                visible: r[2] != 0.0,
            })
            .collect(),
    )
}

/// Reads a manifest and every image it references. Rows with keypoints
/// become labeled samples, rows with `null` keypoints unlabeled ones.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        context: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    manifest.spec.validate()?;
    let spec = manifest.spec;
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    let mut ids = HashSet::new();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for row in manifest.samples {
        if !ids.insert(row.id.clone()) {
            return Err(Error::Schema {
                context: format!("sample `{}`", row.id),
                reason: "duplicate id".into(),
            });
        }
        if let Some(kps) = &row.keypoints {
            if kps.len() != spec.k {
                return Err(Error::Schema {
                    context: format!("sample `{}`", row.id),
                    reason: format!("{} keypoints, expected K={}", kps.len(), spec.k),
                });
            }
        }
        let path = root.join(&row.image);
        let (image, sx, sy) = read_resized(&path, spec.image_size).map_err(|reason| Error::Load {
            id: row.id.clone(),
            path: path.clone(),
            reason,
        })?;
        let pose = row.keypoints.as_deref().map(|kps| {
            let mut pose = pose_from_rows(kps);
            for kp in &mut pose.keypoints {
                kp.x = rescale_coord(kp.x, sx);
                kp.y = rescale_coord(kp.y, sy);
                if kp.visible && !kp.in_frame(spec.image_size, spec.image_size) {
                    log::warn!("sample `{}`: keypoint outside the frame, marked invisible", row.id);
                    kp.visible = false;
                }
            }
            pose
        });
        let sample = ImageSample {
            id: row.id,
            image: Arc::new(image),
            pose,
        };
        if sample.pose.is_some() {
            labeled.push(sample);
        } else {
            unlabeled.push(sample);
        }
    }
    Ok(DatasetSplit {
        spec,
        labeled,
        unlabeled,
        test: Vec::new(),
        held_back: None,
    })
}

// Pixel-center aligned scaling, identical to what the resampler does.
fn rescale_coord(v: f64, s: f64) -> f64 {
    if s == 1.0 {
        v
    } else {
        (v + 0.5) * s - 0.5
    }
}

fn read_resized(path: &Path, size: usize) -> std::result::Result<(Image, f64, f64), String> {
    if !path.exists() {
        return Err("file not found".into());
    }
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = img.dimensions();
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    let img = if w as usize == size && h as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok((Image::from_rgb(&img), sx, sy))
}

/// Writes PNG images and a manifest for `samples` into `dir`. Images are
/// stored under `images/` relative to the manifest.
pub fn write_manifest(
    dir: &Path,
    manifest_name: &str,
    spec: &DatasetSpec,
    samples: &[ImageSample],
) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        let path = dir.join(&rel);
        s.image.to_rgb().save(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?;
        rows.push(ManifestRow {
            id: s.id.clone(),
            image: rel,
            keypoints: s.pose.as_ref().map(pose_to_rows),
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        samples: rows,
    };
    let path = dir.join(manifest_name);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Result of hiding the labels of a subset of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSplit {
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub held_back: HeldBackLabels,
}

/// Keeps `floor(fraction * N)` samples labeled, chosen by a seeded shuffle;
/// the rest lose their pose, which moves to the held-back store. Both parts
/// keep the input order.
pub fn split_labeled_unlabeled(
    samples: &[ImageSample],
    labeled_fraction: f64,
    seed: u64,
) -> Result<LabelSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "labeled fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.pose.is_none()) {
        return Err(Error::Argument(format!("sample `{}` has no pose", s.id)));
    }
    let n = samples.len();
    let n_labeled = ((labeled_fraction * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_labeled = vec![false; n];
    for &i in &order[..n_labeled.min(n)] {
        is_labeled[i] = true;
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n - n_labeled);
    let mut held = BTreeMap::new();
    for (s, keep) in samples.iter().zip(is_labeled) {
        if keep {
            labeled.push(s.clone());
        } else {
            held.insert(s.id.clone(), s.pose.clone().expect("checked above"));
            unlabeled.push(ImageSample {
                pose: None,
                ..s.clone()
            });
        }
    }
    Ok(LabelSplit {
        labeled,
        unlabeled,
        held_back: HeldBackLabels::new(held),
    })
}
