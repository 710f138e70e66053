//! Pseudo-label candidates from the two teachers, the uncertainty gate and
//! the per-epoch expanded training set.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{invert_points, sample_transform, warp_image, AugmentationTransform};
use crate::codec::{decode_channel, CodecConfig};
use crate::data::{Image, ImageSample, Keypoint, Pose};
use crate::error::{Error, Result};
use crate::nn::{Mode, PoseNetwork, Tensor};
use crate::uncertainty::{triplet, Point, PredictionSet, SmoothingStore, TripletUncertainty, UncertaintyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Teacher {
    T1,
    T2,
}

impl Teacher {
    pub fn index(self) -> usize {
        match self {
            Teacher::T1 => 0,
            Teacher::T2 => 1,
        }
    }

    /// The student this teacher's labels supervise: pairs cross over.
    pub fn target_student(self) -> usize {
        1 - self.index()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Teacher::T1 => "T1",
            Teacher::T2 => "T2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_id: String,
    pub keypoint_index: usize,
    pub pseudo_truth: Point,
    pub source_teacher: Teacher,
    /// The value the gate sees (smoothed unless smoothing is off).
    pub uncertainty: TripletUncertainty,
    pub epoch: usize,
    pub accepted: bool,
    /// Peak heatmap value of the source teacher on the raw sample.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    /// Keep accepted labels across epochs, refreshed when re-accepted.
    #[serde(default)]
    pub accumulate: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            epsilon: 3.0,
            top_k: None,
            accumulate: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("selection.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Everything known about one (sample, keypoint) in one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointRecord {
    pub predictions: PredictionSet,
    pub instant: TripletUncertainty,
    pub smoothed: TripletUncertainty,
    /// Raw-sample confidence of T1 and T2.
    pub confidence: [f64; 2],
}

/// Records plus two labels per record: `labels[2 i]` from T1 and
/// `labels[2 i + 1]` from T2 both belong to `records[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Candidates {
    pub records: Vec<KeypointRecord>,
    pub labels: Vec<PseudoLabel>,
}

/// Mixes a base seed with coordinates into an independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Decodes the final-stack channels of batch item `n` into `(point, confidence)`.
fn decode_item(out: &Tensor, n: usize, codec: &CodecConfig) -> Vec<(Point, f64)> {
    let [_, k, h, w] = out.shape;
    let item = out.item(n);
    (0..k)
        .map(|c| decode_channel(&item[c * h * w..(c + 1) * h * w], codec))
        .collect()
}

struct TeacherView {
    raw: Vec<(Point, f64)>,
    /// `aug[k]` holds the M raw-frame points for keypoint `k`.
    aug: Vec<Vec<Point>>,
}

fn teacher_view(
    net: &PoseNetwork,
    batch: &Tensor,
    transforms: &[AugmentationTransform],
    flip_perm: &[usize],
    codec: &CodecConfig,
) -> Result<TeacherView> {
    let fwd = net.forward(batch, Mode::Eval)?;
    let out = fwd.last();
    let raw = decode_item(out, 0, codec);
    let k = raw.len();
    let mut aug = vec![Vec::with_capacity(transforms.len()); k];
    for (m, t) in transforms.iter().enumerate() {
        let dec = decode_item(out, m + 1, codec);
        // Under a flip, channel c of the augmented copy is raw keypoint flip_perm[c].
        let pts: Vec<Point> = dec.iter().map(|d| d.0).collect();
        let back = invert_points(&pts, t)?;
        for (c, p) in back.into_iter().enumerate() {
            let kp = if t.flip { flip_perm[c] } else { c };
            aug[kp].push(p);
        }
    }
    Ok(TeacherView { raw, aug })
}

fn sample_records(
    teachers: [&PoseNetwork; 2],
    sample: &ImageSample,
    config: &UncertaintyConfig,
    codec: &CodecConfig,
    flip_perm: &[usize],
    seed: u64,
) -> Result<Vec<KeypointRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = sample.image.width;
    let transforms: Vec<AugmentationTransform> = (0..config.m)
        .map(|_| sample_transform(&config.augmentation, size, &mut rng))
        .collect();
    let warped: Vec<Image> = transforms.iter().map(|t| warp_image(&sample.image, t)).collect();
    let mut refs: Vec<&Image> = vec![&sample.image];
    refs.extend(warped.iter());
    let batch = Tensor::from_images(&refs);
    let v1 = teacher_view(teachers[0], &batch, &transforms, flip_perm, codec)?;
    let v2 = teacher_view(teachers[1], &batch, &transforms, flip_perm, codec)?;
    let mut out = Vec::with_capacity(v1.raw.len());
    for k in 0..v1.raw.len() {
        let predictions = PredictionSet {
            sample_id: sample.id.clone(),
            keypoint_index: k,
            raw_pred_t1: v1.raw[k].0,
            raw_pred_t2: v2.raw[k].0,
            aug_preds_t1: v1.aug[k].clone(),
            aug_preds_t2: v2.aug[k].clone(),
        };
        let instant = triplet(&predictions)?;
        out.push(KeypointRecord {
            predictions,
            instant,
            smoothed: instant,
            confidence: [v1.raw[k].1, v2.raw[k].1],
        });
    }
    Ok(out)
}

/// Runs both teachers on every unlabeled sample and on `M` augmented copies
/// of it, and emits one label per (keypoint, teacher). Only images are read;
/// any pose attached to an unlabeled sample is ignored. Each sample draws its
/// transforms from a stream derived from `(seed, sample index)`, so the
/// result does not depend on the thread count.
pub fn generate_candidates(
    teachers: [&PoseNetwork; 2],
    unlabeled: &[ImageSample],
    config: &UncertaintyConfig,
    codec: &CodecConfig,
    flip_perm: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<Candidates> {
    if config.m < 2 {
        return Err(Error::Argument(format!("M must be at least 2, got {}", config.m)));
    }
    let per_sample: Vec<Result<Vec<KeypointRecord>>> = unlabeled
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            sample_records(teachers, s, config, codec, flip_perm, derive_seed(seed, &[i as u64]))
        })
        .collect();
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }
    let labels = labels_for(&records, epoch);
    Ok(Candidates { records, labels })
}

fn labels_for(records: &[KeypointRecord], epoch: usize) -> Vec<PseudoLabel> {
    let mut labels = Vec::with_capacity(records.len() * 2);
    for r in records {
        let p = &r.predictions;
        for (teacher, truth) in [(Teacher::T1, p.raw_pred_t1), (Teacher::T2, p.raw_pred_t2)] {
            labels.push(PseudoLabel {
                sample_id: p.sample_id.clone(),
                keypoint_index: p.keypoint_index,
                pseudo_truth: truth,
                source_teacher: teacher,
                uncertainty: r.smoothed,
                epoch,
                accepted: false,
                confidence: r.confidence[teacher.index()],
            });
        }
    }
    labels
}

/// Smooths every record against the store (updating it) and sets the gate
/// value of both labels. With smoothing off the store is left untouched and
/// the instantaneous values are used.
pub fn smooth_candidates(candidates: &mut Candidates, store: &mut SmoothingStore, config: &UncertaintyConfig) {
    for (i, r) in candidates.records.iter_mut().enumerate() {
        r.smoothed = if config.smoothing {
            store.update(
                &r.predictions.sample_id,
                r.predictions.keypoint_index,
                &r.instant,
                config.smoothing_beta,
            )
        } else {
            r.instant
        };
        for l in &mut candidates.labels[2 * i..2 * i + 2] {
            l.uncertainty = r.smoothed;
        }
    }
}

fn label_order(a: &PseudoLabel, b: &PseudoLabel) -> std::cmp::Ordering {
    a.uncertainty
        .sum()
        .total_cmp(&b.uncertainty.sum())
        .then_with(|| a.sample_id.cmp(&b.sample_id))
        .then_with(|| a.keypoint_index.cmp(&b.keypoint_index))
        .then_with(|| a.source_teacher.cmp(&b.source_teacher))
}

/// Marks the labels whose three uncertainties are all strictly below
/// epsilon (then the `top_k` smallest sums, if set) and returns them in
/// ascending order of summed uncertainty.
pub fn select(labels: &mut [PseudoLabel], config: &SelectionConfig) -> Vec<PseudoLabel> {
    let mut passing: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i].uncertainty.all_below(config.epsilon))
        .collect();
    passing.sort_by(|&a, &b| label_order(&labels[a], &labels[b]));
    if let Some(k) = config.top_k {
        passing.truncate(k);
    }
    for l in labels.iter_mut() {
        l.accepted = false;
    }
    for &i in &passing {
        labels[i].accepted = true;
    }
    passing.iter().map(|&i| labels[i].clone()).collect()
}

/// One entry of an epoch's training set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochItem {
    pub id: String,
    pub image: Arc<Image>,
    /// Ground truth of labeled samples.
    pub labeled: Option<Pose>,
    /// Pseudo targets per student; invisible keypoints carry no supervision.
    pub pseudo: [Pose; 2],
}

impl EpochItem {
    pub fn pseudo_mask(&self, student: usize) -> Vec<bool> {
        self.pseudo[student].visible_mask()
    }
}

/// Labeled samples, followed by the unlabeled samples that received at
/// least one accepted label, both in input order. A label from teacher Ti
/// lands in the pseudo pose of the other pair's student.
pub fn expand_training_set(
    labeled: &[ImageSample],
    unlabeled: &[ImageSample],
    accepted: &[PseudoLabel],
    k: usize,
) -> Result<Vec<EpochItem>> {
    let empty = || Pose::new(vec![Keypoint::hidden(); k]);
    let mut items: Vec<EpochItem> = labeled
        .iter()
        .map(|s| EpochItem {
            id: s.id.clone(),
            image: s.image.clone(),
            labeled: s.pose.clone(),
            pseudo: [empty(), empty()],
        })
        .collect();

    let index: HashMap<&str, usize> = unlabeled.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut pseudo: Vec<Option<[Pose; 2]>> = vec![None; unlabeled.len()];
    for l in accepted.iter().filter(|l| l.accepted) {
        let &i = index.get(l.sample_id.as_str()).ok_or_else(|| {
            Error::Argument(format!("pseudo-label for unknown unlabeled sample `{}`", l.sample_id))
        })?;
        if l.keypoint_index >= k {
            return Err(Error::Argument(format!(
                "keypoint index {} out of range for K={k}",
                l.keypoint_index
            )));
        }
        let slot = pseudo[i].get_or_insert_with(|| [empty(), empty()]);
        let (x, y) = l.pseudo_truth;
        slot[l.source_teacher.target_student()].keypoints[l.keypoint_index] = Keypoint::new(x, y);
    }
    for (s, p) in unlabeled.iter().zip(pseudo) {
        if let Some(p) = p {
            items.push(EpochItem {
                id: s.id.clone(),
                image: s.image.clone(),
                labeled: None,
                pseudo: p,
            });
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationConfig;
    use crate::codec::{decode, encode};
    use crate::nn::ModelConfig;

    fn tiny_net(seed: u64) -> PoseNetwork {
        PoseNetwork::build(ModelConfig {
            stacks: 1,
            base_channels: 4,
            k: 2,
            heatmap_size: 8,
            seed,
            image_size: 16,
            in_channels: 3,
            depth: 1,
            batch_norm: false,
        })
        .unwrap()
    }

    fn codec() -> CodecConfig {
        CodecConfig {
            heatmap_size: 8,
            sigma: 1.0,
            image_size: 16,
        }
    }

    fn sample(id: &str, seed: u32) -> ImageSample {
        let mut im = Image::zeros(3, 16, 16);
        for (i, v) in im.data.iter_mut().enumerate() {
            *v = (((i as u32).wrapping_mul(2654435761).wrapping_add(seed)) % 97) as f32 / 97.0;
        }
        ImageSample {
            id: id.into(),
            image: Arc::new(im),
            pose: None,
        }
    }

    fn label(id: &str, k: usize, t: Teacher, u: (f64, f64, f64)) -> PseudoLabel {
        PseudoLabel {
            sample_id: id.into(),
            keypoint_index: k,
            pseudo_truth: (1.0, 2.0),
            source_teacher: t,
            uncertainty: TripletUncertainty::new(u.0, u.1, u.2),
            epoch: 0,
            accepted: false,
            confidence: 0.5,
        }
    }

    #[test]
    fn candidate_counts() {
        let (t1, t2) = (tiny_net(1), tiny_net(2));
        let cfg = UncertaintyConfig::default();
        let c = generate_candidates([&t1, &t2], &[sample("a", 1)], &cfg, &codec(), &[1, 0], 9, 0).unwrap();
        assert_eq!(c.labels.len(), 4);
        assert_eq!(c.records.len(), 2);
        for r in &c.records {
            assert_eq!(r.predictions.aug_preds_t1.len(), 5);
            assert_eq!(r.predictions.aug_preds_t2.len(), 5);
        }
        assert_eq!(c.labels[0].source_teacher, Teacher::T1);
        assert_eq!(c.labels[1].pseudo_truth, c.records[0].predictions.raw_pred_t2);
    }

    #[test]
    fn identical_teachers_agree_on_raw() {
        let t = tiny_net(3);
        let c = generate_candidates(
            [&t, &t],
            &[sample("a", 1), sample("b", 2)],
            &UncertaintyConfig::default(),
            &codec(),
            &[1, 0],
            4,
            0,
        )
        .unwrap();
        assert!(c.records.iter().all(|r| r.instant.unc_ext == 0.0 && r.instant.unc_ext_aug == 0.0));
    }

    #[test]
    fn identity_augmentation_gives_zero_internal() {
        let t = tiny_net(3);
        let cfg = UncertaintyConfig {
            augmentation: AugmentationConfig::identity(),
            ..UncertaintyConfig::default()
        };
        let c = generate_candidates([&t, &tiny_net(4)], &[sample("a", 1)], &cfg, &codec(), &[1, 0], 4, 0).unwrap();
        assert!(c.records.iter().all(|r| r.instant.unc_int_aug == 0.0));
    }

    #[test]
    fn deterministic_and_pose_blind() {
        let (t1, t2) = (tiny_net(1), tiny_net(2));
        let cfg = UncertaintyConfig::default();
        let clean = vec![sample("a", 1), sample("b", 2)];
        // Poison: absurd poses attached to unlabeled samples must not matter.
        let poisoned: Vec<ImageSample> = clean
            .iter()
            .map(|s| ImageSample {
                pose: Some(Pose::new(vec![Keypoint::new(-1e9, 1e9); 2])),
                ..s.clone()
            })
            .collect();
        let a = generate_candidates([&t1, &t2], &clean, &cfg, &codec(), &[1, 0], 5, 3).unwrap();
        let b = generate_candidates([&t1, &t2], &clean, &cfg, &codec(), &[1, 0], 5, 3).unwrap();
        let p = generate_candidates([&t1, &t2], &poisoned, &cfg, &codec(), &[1, 0], 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, p);
        let mut la = a.labels.clone();
        let mut lp = p.labels.clone();
        let sel = SelectionConfig { epsilon: 1e9, ..Default::default() };
        assert_eq!(select(&mut la, &sel), select(&mut lp, &sel));
        let ea = expand_training_set(&[], &clean, &la, 2).unwrap();
        let ep = expand_training_set(&[], &poisoned, &lp, 2).unwrap();
        assert_eq!(ea, ep);
        assert!(ep.iter().all(|i| i.labeled.is_none()));
    }

    #[test]
    fn flipped_copies_map_back_through_the_permutation() {
        // A constant-output teacher: every channel peaks at one fixed cell,
        // so only the inverse mapping decides where points land.
        let t = tiny_net(7);
        let cfg = UncertaintyConfig {
            m: 2,
            augmentation: AugmentationConfig {
                rotation_max: 0.0,
                scale_range: [1.0, 1.0],
                flip_probability: 1.0,
            },
            ..UncertaintyConfig::default()
        };
        let c = generate_candidates([&t, &t], &[sample("a", 1)], &cfg, &codec(), &[1, 0], 1, 0).unwrap();
        assert_eq!(c.records.len(), 2);
        for r in &c.records {
            for p in &r.predictions.aug_preds_t1 {
                assert!(p.0 >= -1.0 && p.0 <= 16.0);
            }
        }
    }

    #[test]
    fn gate_examples() {
        let sel = SelectionConfig::default();
        let mut ls = vec![
            label("a", 0, Teacher::T1, (2.9, 2.9, 2.9)),
            label("a", 1, Teacher::T1, (3.1, 0.0, 0.0)),
            label("a", 2, Teacher::T1, (3.0, 0.0, 0.0)),
        ];
        let acc = select(&mut ls, &sel);
        assert_eq!(acc.len(), 1);
        assert!(ls[0].accepted && !ls[1].accepted && !ls[2].accepted);
    }

    #[test]
    fn top_k_keeps_smallest_sums_with_stable_ties() {
        let mut ls = vec![
            label("c", 0, Teacher::T1, (1.0, 1.0, 1.0)),
            label("b", 0, Teacher::T1, (0.5, 0.5, 0.0)),
            label("a", 0, Teacher::T1, (1.0, 0.5, 0.5)),
            label("a", 1, Teacher::T2, (1.0, 0.5, 0.5)),
        ];
        let sel = SelectionConfig {
            top_k: Some(2),
            ..Default::default()
        };
        let acc = select(&mut ls, &sel);
        assert_eq!(acc.len(), 2);
        assert_eq!((acc[0].sample_id.as_str(), acc[1].sample_id.as_str()), ("b", "a"));
        assert_eq!(acc[1].keypoint_index, 0);
    }

    #[test]
    fn expansion_routes_across_pairs() {
        let u = vec![sample("u0", 1), sample("u1", 2)];
        let l = vec![ImageSample {
            pose: Some(Pose::new(vec![Keypoint::new(3.0, 3.0); 4])),
            ..sample("l0", 3)
        }];
        assert_eq!(expand_training_set(&l, &u, &[], 4).unwrap().len(), 1);

        let mut acc = label("u1", 2, Teacher::T2, (0.0, 0.0, 0.0));
        acc.accepted = true;
        acc.pseudo_truth = (5.5, 9.25);
        let items = expand_training_set(&l, &u, &[acc.clone()], 4).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].id, "u1");
        assert_eq!(items[1].pseudo_mask(0), vec![false, false, true, false]);
        assert_eq!(items[1].pseudo_mask(1), vec![false; 4]);

        // the re-encoded target decodes to within the codec quantization
        let cfg = codec();
        let (hm, mask) = encode(&items[1].pseudo[0], &cfg);
        assert!(mask[2]);
        let (dec, _) = decode(&hm);
        let kp = dec.keypoints[2];
        assert!((kp.x - 5.5).abs() <= cfg.stride() && (kp.y - 9.25).abs() <= cfg.stride());

        acc.sample_id = "nope".into();
        assert!(expand_training_set(&l, &u, &[acc], 4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn lowering_epsilon_shrinks_acceptance(
            us in proptest::collection::vec((0.0f64..6.0, 0.0f64..6.0, 0.0f64..6.0), 1..40),
            e1 in 0.1f64..6.0, e2 in 0.1f64..6.0,
        ) {
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            let base: Vec<PseudoLabel> = us.iter().enumerate()
                .map(|(i, &u)| label(&format!("s{i:03}"), 0, Teacher::T1, u)).collect();
            let mut a = base.clone();
            let mut b = base.clone();
            select(&mut a, &SelectionConfig { epsilon: lo, ..Default::default() });
            select(&mut b, &SelectionConfig { epsilon: hi, ..Default::default() });
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!(!x.accepted || y.accepted);
            }
            for x in &b {
                proptest::prop_assert_eq!(x.accepted, x.uncertainty.all_below(hi));
            }
        }
    }
}
