//! Triplet uncertainty of a keypoint pseudo-label and its temporal
//! smoothing. All points are raw-frame pixels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};

pub type Point = (f64, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub sample_id: String,
    pub keypoint_index: usize,
    pub raw_pred_t1: Point,
    pub raw_pred_t2: Point,
    pub aug_preds_t1: Vec<Point>,
    pub aug_preds_t2: Vec<Point>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletUncertainty {
    pub unc_int_aug: f64,
    pub unc_ext_aug: f64,
    pub unc_ext: f64,
}

impl TripletUncertainty {
    pub fn new(unc_int_aug: f64, unc_ext_aug: f64, unc_ext: f64) -> Self {
        TripletUncertainty {
            unc_int_aug,
            unc_ext_aug,
            unc_ext,
        }
    }

    pub fn sum(&self) -> f64 {
        self.unc_int_aug + self.unc_ext_aug + self.unc_ext
    }

    pub fn all_below(&self, epsilon: f64) -> bool {
        self.unc_int_aug < epsilon && self.unc_ext_aug < epsilon && self.unc_ext < epsilon
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Augmented copies per unlabeled sample.
    #[serde(rename = "M")]
    pub m: usize,
    pub smoothing_beta: f64,
    /// Gate on smoothed values; when false the instantaneous ones are used.
    #[serde(default = "default_true")]
    pub smoothing: bool,
    /// Transforms drawn for the augmented copies.
    #[serde(default = "default_uncertainty_aug")]
    pub augmentation: AugmentationConfig,
}

fn default_true() -> bool {
    true
}

fn default_uncertainty_aug() -> AugmentationConfig {
    AugmentationConfig {
        flip_probability: 0.0,
        ..AugmentationConfig::default()
    }
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            m: 5,
            smoothing_beta: 0.7,
            smoothing: true,
            augmentation: default_uncertainty_aug(),
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::config("uncertainty.M", "need at least 2 augmented copies"));
        }
        if !(0.0..1.0).contains(&self.smoothing_beta) {
            return Err(Error::config("uncertainty.smoothing_beta", "must be in [0, 1)"));
        }
        self.augmentation.validate("uncertainty.augmentation")
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
    (sx / n, sy / n)
}

/// Mean Euclidean distance over all unordered pairs of predictions.
pub fn internal_aug_uncertainty(points: &[Point]) -> Result<f64> {
    let m = points.len();
    if m < 2 {
        return Err(Error::Argument(format!(
            "internal uncertainty needs at least 2 points, got {m}"
        )));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += dist(points[i], points[j]);
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// Distance between the two teachers' mean augmented predictions.
pub fn external_aug_uncertainty(mean_t1: Point, mean_t2: Point) -> f64 {
    dist(mean_t1, mean_t2)
}

/// Distance between the two teachers' raw-sample predictions.
pub fn external_raw_uncertainty(p_t1: Point, p_t2: Point) -> f64 {
    dist(p_t1, p_t2)
}

/// The internal term takes the larger of the two teachers' values, so a
/// label passes only when both teachers are self-consistent.
pub fn triplet(ps: &PredictionSet) -> Result<TripletUncertainty> {
    if ps.aug_preds_t1.len() != ps.aug_preds_t2.len() {
        return Err(Error::Argument(format!(
            "teachers have {} and {} augmented predictions",
            ps.aug_preds_t1.len(),
            ps.aug_preds_t2.len()
        )));
    }
    let int1 = internal_aug_uncertainty(&ps.aug_preds_t1)?;
    let int2 = internal_aug_uncertainty(&ps.aug_preds_t2)?;
    Ok(TripletUncertainty {
        unc_int_aug: int1.max(int2),
        unc_ext_aug: external_aug_uncertainty(centroid(&ps.aug_preds_t1), centroid(&ps.aug_preds_t2)),
        unc_ext: external_raw_uncertainty(ps.raw_pred_t1, ps.raw_pred_t2),
    })
}

/// Component-wise `beta * previous + (1 - beta) * current`.
pub fn smooth(
    previous: Option<&TripletUncertainty>,
    current: &TripletUncertainty,
    beta: f64,
) -> TripletUncertainty {
    match previous {
        None => *current,
        Some(p) => {
            let mix = |a: f64, b: f64| beta * a + (1.0 - beta) * b;
            TripletUncertainty {
                unc_int_aug: mix(p.unc_int_aug, current.unc_int_aug),
                unc_ext_aug: mix(p.unc_ext_aug, current.unc_ext_aug),
                unc_ext: mix(p.unc_ext, current.unc_ext),
            }
        }
    }
}

/// Smoothed uncertainty per (sample id, keypoint), persisted across epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmoothingStore {
    entries: BTreeMap<(String, usize), TripletUncertainty>,
}

#[derive(Serialize, Deserialize)]
struct StoreRow {
    sample_id: String,
    keypoint_index: usize,
    value: TripletUncertainty,
}

impl SmoothingStore {
    pub fn get(&self, sample_id: &str, k: usize) -> Option<&TripletUncertainty> {
        self.entries.get(&(sample_id.to_string(), k))
    }

    /// Smooths `current` against the stored value, stores and returns it.
    pub fn update(
        &mut self,
        sample_id: &str,
        k: usize,
        current: &TripletUncertainty,
        beta: f64,
    ) -> TripletUncertainty {
        let key = (sample_id.to_string(), k);
        let s = smooth(self.entries.get(&key), current, beta);
        self.entries.insert(key, s);
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<StoreRow> = self
            .entries
            .iter()
            .map(|((id, k), v)| StoreRow {
                sample_id: id.clone(),
                keypoint_index: *k,
                value: *v,
            })
            .collect();
        serde_json::to_value(rows).expect("plain data")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let rows: Vec<StoreRow> = serde_json::from_value(v.clone())?;
        Ok(SmoothingStore {
            entries: rows
                .into_iter()
                .map(|r| ((r.sample_id, r.keypoint_index), r.value))
                .collect(),
        })
    }
}
