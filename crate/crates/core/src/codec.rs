//! Gaussian heatmap encoding of keypoints and argmax decoding.
//!
//! Heatmap cell `(row, col)` covers image pixels
//! `[col * stride, (col + 1) * stride) x [row * stride, (row + 1) * stride)`.
//! Encoding places an unnormalized Gaussian (peak exactly 1.0) on the cell
//! containing the keypoint; decoding returns the center of the argmax cell.

use serde::{Deserialize, Serialize};

use crate::data::{Keypoint, Pose};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub heatmap_size: usize,
    pub sigma: f64,
    pub image_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            heatmap_size: 64,
            sigma: 1.5,
            image_size: 256,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heatmap_size == 0 || self.image_size % self.heatmap_size != 0 {
            return Err(Error::config(
                "codec.heatmap_size",
                format!(
                    "{} must divide image_size {}",
                    self.heatmap_size, self.image_size
                ),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("codec.sigma", "must be positive"));
        }
        Ok(())
    }

    pub fn stride(&self) -> f64 {
        (self.image_size / self.heatmap_size) as f64
    }

    fn cells(&self) -> usize {
        self.heatmap_size * self.heatmap_size
    }

    /// Cell containing an image-frame point, if it lies on the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = self.stride();
        let (u, v) = ((x / s).floor(), (y / s).floor());
        let n = self.heatmap_size as f64;
        if u >= 0.0 && v >= 0.0 && u < n && v < n {
            Some((v as usize, u as usize))
        } else {
            None
        }
    }

    /// Image-frame pixel at the center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride();
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

/// K channels of `heatmap_size x heatmap_size` values, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub k: usize,
    pub config: CodecConfig,
}

impl Heatmap {
    pub fn zeros(k: usize, config: CodecConfig) -> Self {
        Heatmap {
            values: vec![0.0; k * config.cells()],
            k,
            config,
        }
    }

    /// Wraps raw model output for one sample (`k * S * S` values).
    pub fn from_values(values: Vec<f64>, k: usize, config: CodecConfig) -> Result<Self> {
        if values.len() != k * config.cells() {
            return Err(Error::Shape(format!(
                "heatmap expects {} values, got {}",
                k * config.cells(),
                values.len()
            )));
        }
        Ok(Heatmap { values, k, config })
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.config.cells();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.config.cells();
        &mut self.values[k * n..(k + 1) * n]
    }
}

/// Writes a Gaussian for `kp` into `out` (one channel). Returns false and
/// leaves the channel zeroed when the keypoint is invisible or off-grid.
pub fn encode_channel(kp: &Keypoint, config: &CodecConfig, out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|v| *v = 0.0);
    if !kp.visible {
        return false;
    }
    let Some((cr, cc)) = config.cell_of(kp.x, kp.y) else {
        return false;
    };
    let s = config.heatmap_size;
    let denom = 2.0 * config.sigma * config.sigma;
    // Beyond ~6 sigma the Gaussian underflows to nothing meaningful.
    let radius = (6.0 * config.sigma).ceil() as isize;
    let (cr, cc) = (cr as isize, cc as isize);
    for r in (cr - radius).max(0)..=(cr + radius).min(s as isize - 1) {
        let dr = (r - cr) as f64;
        for c in (cc - radius).max(0)..=(cc + radius).min(s as isize - 1) {
            let dc = (c - cc) as f64;
            out[r as usize * s + c as usize] = (-(dr * dr + dc * dc) / denom).exp();
        }
    }
    true
}

pub fn encode(pose: &Pose, config: &CodecConfig) -> (Heatmap, Vec<bool>) {
    let mut hm = Heatmap::zeros(pose.len(), *config);
    let mask = pose
        .keypoints
        .iter()
        .enumerate()
        .map(|(k, kp)| encode_channel(kp, config, hm.channel_mut(k)))
        .collect();
    (hm, mask)
}

/// Argmax of one channel with lowest-index tie-breaking; returns
/// `(row, col, max)`.
pub fn argmax_channel(values: &[f64], size: usize) -> (usize, usize, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    (best / size, best % size, best_v)
}

/// Decodes one channel to an image-frame point and its confidence.
pub fn decode_channel(values: &[f64], config: &CodecConfig) -> ((f64, f64), f64) {
    let (r, c, v) = argmax_channel(values, config.heatmap_size);
    (config.cell_center(r, c), v)
}

/// Per-channel argmax decode. Every keypoint is returned visible; a
/// confidence of 0 means the channel carried no signal.
pub fn decode(heatmap: &Heatmap) -> (Pose, Vec<f64>) {
    let mut kps = Vec::with_capacity(heatmap.k);
    let mut conf = Vec::with_capacity(heatmap.k);
    for k in 0..heatmap.k {
        let ((x, y), v) = decode_channel(heatmap.channel(k), &heatmap.config);
        kps.push(Keypoint::new(x, y));
        conf.push(v);
    }
    (Pose::new(kps), conf)
}

pub fn confidence_of(heatmap: &Heatmap, k: usize) -> Result<f64> {
    if k >= heatmap.k {
        return Err(Error::Argument(format!(
            "keypoint index {k} out of range for K={}",
            heatmap.k
        )));
    }
    Ok(heatmap
        .channel(k)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}
