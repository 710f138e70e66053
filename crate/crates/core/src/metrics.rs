//! Keypoint accuracy metrics and the pseudo-label diagnostics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{HeldBackLabels, Pose};
use crate::error::{Error, Result};
use crate::logs::{SelectionRow, UncertaintyRow};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PckConfig {
    pub threshold: f64,
    pub reference_pair: [usize; 2],
}

impl PckConfig {
    pub fn new(reference_pair: [usize; 2]) -> Self {
        PckConfig {
            threshold: 0.2,
            reference_pair,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::config("pck.threshold", "must be positive"));
        }
        if self.reference_pair[0] == self.reference_pair[1] {
            return Err(Error::config("pck.reference_pair", "indices must differ"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    /// `correct / total`; 0 when nothing was scored.
    pub pck: f64,
    pub correct: usize,
    pub total: usize,
    /// Samples dropped for a zero-length (or invisible) reference pair.
    pub skipped: usize,
}

/// Per-sample reference scale, or `None` when it is unusable.
pub fn reference_scale(gt: &Pose, pair: [usize; 2]) -> Option<f64> {
    let (a, b) = (gt.keypoints.get(pair[0])?, gt.keypoints.get(pair[1])?);
    let s = a.distance(b);
    (a.visible && b.visible && s > 0.0).then_some(s)
}

fn check_lengths(pred: &[Pose], gt: &[Pose]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(i) = (0..pred.len()).find(|&i| pred[i].len() != gt[i].len()) {
        return Err(Error::Argument(format!("pose {i} has mismatched keypoint count")));
    }
    Ok(())
}

/// A visible keypoint counts as correct when its error is below
/// `threshold * scale`, the scale being the ground-truth distance between the
/// reference pair.
pub fn pck(pred: &[Pose], gt: &[Pose], config: &PckConfig) -> Result<PckResult> {
    check_lengths(pred, gt)?;
    let (mut correct, mut total, mut skipped) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        let Some(scale) = reference_scale(g, config.reference_pair) else {
            skipped += 1;
            continue;
        };
        let bound = config.threshold * scale;
        for (a, b) in p.keypoints.iter().zip(&g.keypoints) {
            if !b.visible {
                continue;
            }
            total += 1;
            if a.distance(b) < bound {
                correct += 1;
            }
        }
    }
    Ok(PckResult {
        pck: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        skipped,
    })
}

/// Mean Euclidean error over visible ground-truth keypoints; NaN when
/// nothing is visible.
pub fn mean_pixel_error(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.keypoints.iter().zip(&g.keypoints) {
            if b.visible {
                sum += a.distance(b);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either series has zero variance or fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Error and PCK of a set of pseudo-labels against held-back truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetQuality {
    pub count: usize,
    pub mean_error: Option<f64>,
    pub pck: Option<f64>,
}

/// Per-epoch quality of accepted vs rejected candidates, and of the three
/// gating policies at equal set size: the triplet gate, the same number of
/// highest-confidence candidates, and their intersection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoQualityRow {
    pub epoch: usize,
    pub all: SetQuality,
    pub accepted: SetQuality,
    pub rejected: SetQuality,
    pub confidence_only: SetQuality,
    pub both: SetQuality,
    pub test_error: Option<f64>,
    pub test_pck: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoQualityReport {
    pub rows: Vec<PseudoQualityRow>,
    /// Candidates whose sample had no held-back label.
    pub unmatched: usize,
}

impl PseudoQualityReport {
    /// Candidate-weighted mean error of one policy across the given epochs.
    pub fn pooled_error(&self, epochs: &BTreeSet<usize>, pick: impl Fn(&PseudoQualityRow) -> SetQuality) -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for r in self.rows.iter().filter(|r| epochs.contains(&r.epoch)) {
            let q = pick(r);
            if let Some(e) = q.mean_error {
                s += e * q.count as f64;
                n += q.count;
            }
        }
        (n > 0).then(|| s / n as f64)
    }
}

struct Scored {
    error: f64,
    correct: Option<bool>,
    confidence: f64,
    accepted: bool,
}

fn quality<'a>(items: impl Iterator<Item = &'a Scored>) -> SetQuality {
    let (mut n, mut err, mut scored, mut correct) = (0usize, 0.0, 0usize, 0usize);
    for s in items {
        n += 1;
        err += s.error;
        if let Some(c) = s.correct {
            scored += 1;
            correct += c as usize;
        }
    }
    SetQuality {
        count: n,
        mean_error: (n > 0).then(|| err / n as f64),
        pck: (scored > 0).then(|| correct as f64 / scored as f64),
    }
}

/// `test` maps epoch to (test error, test PCK) when available.
pub fn pseudo_quality_report(
    selection: &[SelectionRow],
    held_back: &HeldBackLabels,
    pck: &PckConfig,
    test: &BTreeMap<usize, (f64, f64)>,
) -> Result<PseudoQualityReport> {
    if held_back.is_empty() {
        return Err(Error::Argument("no held-back labels to score pseudo-labels against".into()));
    }
    let mut by_epoch: BTreeMap<usize, Vec<Scored>> = BTreeMap::new();
    let mut unmatched = 0;
    for r in selection {
        let Some(gt) = held_back.get(&r.sample_id) else {
            unmatched += 1;
            continue;
        };
        let Some(kp) = gt.keypoints.get(r.keypoint_index).filter(|k| k.visible) else {
            unmatched += 1;
            continue;
        };
        let error = (r.pseudo_truth_x - kp.x).hypot(r.pseudo_truth_y - kp.y);
        let correct = reference_scale(gt, pck.reference_pair).map(|s| error < pck.threshold * s);
        by_epoch.entry(r.epoch).or_default().push(Scored {
            error,
            correct,
            confidence: r.confidence,
            accepted: r.accepted,
        });
    }
    let rows = by_epoch
        .into_iter()
        .map(|(epoch, items)| {
            let n_acc = items.iter().filter(|s| s.accepted).count();
            // stable: equal confidences keep log order
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.sort_by(|&a, &b| items[b].confidence.total_cmp(&items[a].confidence));
            let top: BTreeSet<usize> = order[..n_acc].iter().copied().collect();
            PseudoQualityRow {
                epoch,
                all: quality(items.iter()),
                accepted: quality(items.iter().filter(|s| s.accepted)),
                rejected: quality(items.iter().filter(|s| !s.accepted)),
                confidence_only: quality(top.iter().map(|&i| &items[i])),
                both: quality(top.iter().map(|&i| &items[i]).filter(|s| s.accepted)),
                test_error: test.get(&epoch).map(|v| v.0),
                test_pck: test.get(&epoch).map(|v| v.1),
            }
        })
        .collect();
    Ok(PseudoQualityReport { rows, unmatched })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub epoch: usize,
    pub confidence: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyTrack {
    pub sample_id: String,
    pub keypoint_index: usize,
    pub series: Vec<TrackPoint>,
    /// Spearman correlation of confidence and error; `None` when undefined.
    pub rank_correlation: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTrack {
    pub tracks: Vec<KeyTrack>,
    pub warnings: Vec<String>,
}

/// Per requested key: T1's raw-sample confidence and pixel error over
/// epochs. Keys absent from the dump or the labels are skipped with a
/// warning.
pub fn confidence_error_track(
    dump: &[UncertaintyRow],
    held_back: &HeldBackLabels,
    keys: &[(String, usize)],
) -> ConfidenceTrack {
    let mut out = ConfidenceTrack::default();
    for (id, k) in keys {
        let Some(gt) = held_back.get(id).and_then(|p| p.keypoints.get(*k)) else {
            out.warnings.push(format!("no held-back label for {id}_{k}"));
            continue;
        };
        let mut series: Vec<TrackPoint> = dump
            .iter()
            .filter(|r| &r.sample_id == id && r.keypoint_index == *k)
            .map(|r| TrackPoint {
                epoch: r.epoch,
                confidence: r.confidence_t1,
                error: (r.pred_t1_x - gt.x).hypot(r.pred_t1_y - gt.y),
            })
            .collect();
        if series.is_empty() {
            out.warnings.push(format!("key {id}_{k} not in the uncertainty dump"));
            continue;
        }
        series.sort_by_key(|p| p.epoch);
        let c: Vec<f64> = series.iter().map(|p| p.confidence).collect();
        let e: Vec<f64> = series.iter().map(|p| p.error).collect();
        out.tracks.push(KeyTrack {
            sample_id: id.clone(),
            keypoint_index: *k,
            rank_correlation: spearman(&c, &e),
            n: series.len(),
            series,
        });
    }
    out
}
