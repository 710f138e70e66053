//! Invertible geometric augmentation: rotation and scaling about a center,
//! followed by an optional horizontal mirror.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Keypoint, Pose};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Degrees; rotations are drawn from `[-rotation_max, rotation_max]`.
    pub rotation_max: f64,
    pub scale_range: [f64; 2],
    pub flip_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation_max: 30.0,
            scale_range: [0.75, 1.25],
            flip_probability: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            rotation_max: 0.0,
            scale_range: [1.0, 1.0],
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.rotation_max >= 0.0) {
            return Err(Error::config(format!("{field}.rotation_max"), "must be >= 0"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(
                format!("{field}.scale_range"),
                "need 0 < min <= max",
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config(
                format!("{field}.flip_probability"),
                "must be in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationTransform {
    pub rotation: f64,
    pub scale: f64,
    pub flip: bool,
    pub center: (f64, f64),
}

impl AugmentationTransform {
    pub fn identity(image_size: usize) -> Self {
        AugmentationTransform {
            rotation: 0.0,
            scale: 1.0,
            flip: false,
            center: default_center(image_size),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && !self.flip
    }

    /// Raw frame to augmented frame. The mirror maps `x` to `2*cx - 1 - x`,
    /// i.e. `W - 1 - x` for a centered transform.
    pub fn apply_point(&self, (x, y): (f64, f64)) -> (f64, f64) {
        if self.is_identity() {
            return (x, y);
        }
        let (cx, cy) = self.center;
        let (s, c) = self.rotation.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let mut ox = cx + self.scale * (c * dx - s * dy);
        let oy = cy + self.scale * (s * dx + c * dy);
        if self.flip {
            ox = 2.0 * cx - 1.0 - ox;
        }
        (ox, oy)
    }

    fn invert_point_unchecked(&self, (x, y): (f64, f64)) -> (f64, f64) {
        if self.is_identity() {
            return (x, y);
        }
        let (cx, cy) = self.center;
        let x = if self.flip { 2.0 * cx - 1.0 - x } else { x };
        let (s, c) = self.rotation.to_radians().sin_cos();
        let (dx, dy) = ((x - cx) / self.scale, (y - cy) / self.scale);
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    }
}

pub fn default_center(image_size: usize) -> (f64, f64) {
    let c = image_size as f64 / 2.0;
    (c, c)
}

/// Draws rotation, scale and flip independently from the configured ranges.
pub fn sample_transform<R: Rng + ?Sized>(
    config: &AugmentationConfig,
    image_size: usize,
    rng: &mut R,
) -> AugmentationTransform {
    let rotation = if config.rotation_max > 0.0 {
        rng.random_range(-config.rotation_max..=config.rotation_max)
    } else {
        0.0
    };
    let [lo, hi] = config.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let flip = config.flip_probability > 0.0 && rng.random_bool(config.flip_probability);
    AugmentationTransform {
        rotation,
        scale,
        flip,
        center: default_center(image_size),
    }
}

/// Maps augmented-frame points back to the raw frame. Channel permutation
/// under flips is the caller's job.
pub fn invert_points(
    points: &[(f64, f64)],
    transform: &AugmentationTransform,
) -> Result<Vec<(f64, f64)>> {
    if transform.scale == 0.0 || !transform.scale.is_finite() {
        return Err(Error::Argument(format!(
            "singular transform (scale {})",
            transform.scale
        )));
    }
    Ok(points
        .iter()
        .map(|&p| transform.invert_point_unchecked(p))
        .collect())
}

/// Maps a pose into the augmented frame. Under a flip, output keypoint `k`
/// is input keypoint `flip_perm[k]`. Points leaving the frame turn invisible.
pub fn transform_pose(
    pose: &Pose,
    transform: &AugmentationTransform,
    flip_perm: &[usize],
    width: usize,
    height: usize,
) -> Pose {
    let mapped: Vec<Keypoint> = pose
        .keypoints
        .iter()
        .map(|kp| {
            if !kp.visible {
                return Keypoint::hidden();
            }
            let (x, y) = transform.apply_point((kp.x, kp.y));
            let out = Keypoint::new(x, y);
            if out.in_frame(width, height) {
                out
            } else {
                Keypoint { visible: false, ..out }
            }
        })
        .collect();
    if transform.flip {
        Pose::new(flip_perm.iter().map(|&src| mapped[src]).collect())
    } else {
        Pose::new(mapped)
    }
}

/// Bilinear warp with zero padding; pixel `(row, col)` sits at coordinate
/// `(x = col, y = row)`.
pub fn warp_image(image: &Image, transform: &AugmentationTransform) -> Image {
    if transform.is_identity() {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let mut out = Image::zeros(image.channels, h, w);
    let plane = w * h;
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = transform.invert_point_unchecked((ox as f64, oy as f64));
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for (tx, ty, wt) in taps {
                if wt == 0.0 || tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                    continue;
                }
                let src = ty as usize * w + tx as usize;
                let dst = oy * w + ox;
                for c in 0..image.channels {
                    out.data[c * plane + dst] += wt * image.data[c * plane + src];
                }
            }
        }
    }
    out
}

/// Warps the image and maps the pose with the same transform.
pub fn apply(
    image: &Image,
    pose: &Pose,
    transform: &AugmentationTransform,
    flip_perm: &[usize],
) -> (Image, Pose) {
    let warped = warp_image(image, transform);
    let pose = transform_pose(pose, transform, flip_perm, image.width, image.height);
    (warped, pose)
}
