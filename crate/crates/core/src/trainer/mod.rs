//! Training loops for the supervised baseline, the single-pair mean
//! teacher, and the dual-pair method with uncertainty-gated pseudo-labels.

mod checkpoint;
mod config;
mod run_dir;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_transform, transform_pose, warp_image};
use crate::codec::{decode_channel, encode, CodecConfig};
use crate::data::{DatasetSplit, Image, ImageSample, Keypoint, Pose};
use crate::ema::ema_update;
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, parameter_adversarial_loss, student_pose_loss, total_loss, LossComponents};
use crate::metrics::{mean_pixel_error, pck, PckConfig};
use crate::nn::{Adam, Mode, ModelParameters, PoseNetwork, Tensor};
use crate::pseudo::{
    derive_seed, expand_training_set, generate_candidates, select, smooth_candidates, Candidates, EpochItem,
    PseudoLabel, Teacher,
};
use crate::uncertainty::SmoothingStore;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{load_training_data, DataConfig, EvalNetwork, Method, TrainerConfig};
pub use run_dir::{RunFileNames, RunFiles, RUN_FILES};

/// One row of `epochs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_pose_s1: f64,
    pub loss_pose_s2: Option<f64>,
    pub loss_adversarial: Option<f64>,
    pub loss_consistency: Option<f64>,
    pub lambda_p: f64,
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub n_candidates: usize,
    pub n_accepted: usize,
    pub n_train_items: usize,
    /// Mean Euclidean pixel error on the test set.
    pub test_error: Option<f64>,
    pub test_pck: Option<f64>,
    pub test_heatmap_mse: Option<f64>,
    /// Cosine similarity of the two students' flattened parameters.
    pub student_cosine: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_pixel_error: f64,
    pub pck: f64,
    pub pck_skipped: usize,
    /// Per-cell squared error against encoded ground truth, visible channels.
    pub heatmap_mse: f64,
}

/// Networks and optimizer state between epochs.
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub students: Vec<PoseNetwork>,
    pub teachers: Vec<PoseNetwork>,
    pub optimizers: Vec<Adam>,
    pub rng: ChaCha8Rng,
    pub store: SmoothingStore,
    /// Accumulated labels keyed by (sample, keypoint, teacher).
    pub pool: BTreeMap<(String, usize, Teacher), PseudoLabel>,
    pub reports: Vec<EpochReport>,
}

pub struct TrainOutcome {
    pub students: Vec<PoseNetwork>,
    pub teachers: Vec<PoseNetwork>,
    pub reports: Vec<EpochReport>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// The network the config designates for evaluation.
    pub fn eval_networks(&self, which: EvalNetwork) -> Vec<&PoseNetwork> {
        pick_eval(&self.students, &self.teachers, which)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Writes logs, checkpoints and reports here when set.
    pub run_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

fn pairs(method: Method) -> (usize, usize) {
    match method {
        Method::Supervised => (1, 0),
        Method::MeanTeacher => (1, 1),
        Method::Mdss => (2, 2),
    }
}

fn pick_eval<'a>(students: &'a [PoseNetwork], teachers: &'a [PoseNetwork], which: EvalNetwork) -> Vec<&'a PoseNetwork> {
    if teachers.is_empty() {
        return vec![&students[0]];
    }
    match which {
        EvalNetwork::T1 => vec![&teachers[0]],
        EvalNetwork::T2 => vec![teachers.get(1).unwrap_or(&teachers[0])],
        EvalNetwork::Student => vec![&students[0]],
        EvalNetwork::Average => teachers.iter().collect(),
    }
}

impl TrainState {
    pub fn new(config: &TrainerConfig) -> Result<Self> {
        let (n_students, n_teachers) = pairs(config.method);
        let students = (0..n_students)
            .map(|i| {
                PoseNetwork::build(crate::nn::ModelConfig {
                    seed: config.model.seed.wrapping_add(i as u64),
                    ..config.model
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let teachers = students[..n_teachers].to_vec();
        let optimizers = students
            .iter()
            .map(|s| Adam::new(config.optimizer.clone(), s.num_params()))
            .collect();
        Ok(TrainState {
            epoch: 0,
            students,
            teachers,
            optimizers,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: SmoothingStore::default(),
            pool: BTreeMap::new(),
            reports: Vec::new(),
        })
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Trains without writing anything to disk.
pub fn train(config: &TrainerConfig, data: &DatasetSplit) -> Result<TrainOutcome> {
    train_with(config, data, &TrainOptions::default())
}

pub fn train_with(config: &TrainerConfig, data: &DatasetSplit, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_spec(&data.spec)?;
    let mut state = match &options.resume_from {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if !checkpoint::compatible(&ck.config, config) {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different config",
                    p.display()
                )));
            }
            ck.into_state()?
        }
        None => TrainState::new(config)?,
    };
    let files = match &options.run_dir {
        Some(dir) => Some(RunFiles::open(dir, config, data, state.epoch)?),
        None => None,
    };
    let mut checkpoints = Vec::new();
    let flip_perm = data.spec.flip_permutation();
    let pck_cfg = PckConfig {
        threshold: config.pck_threshold,
        reference_pair: data.spec.pck_reference_pair,
    };

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let selection = run_selection(config, data, &mut state, &flip_perm, epoch)?;
        let items = epoch_items(config, data, &state, &selection)?;
        let losses = run_epoch(config, &mut state, &items, &flip_perm, epoch)?;

        let eval = if data.test.is_empty() {
            None
        } else {
            let nets = pick_eval(&state.students, &state.teachers, config.eval_network);
            Some(evaluate_ensemble(&nets, &data.test, &config.codec, &pck_cfg)?)
        };
        let (lp, la, lc) = config.weights.at(epoch);
        let two = state.students.len() == 2;
        let report = EpochReport {
            epoch,
            loss_total: losses.total,
            loss_pose_s1: losses.components.pose_s1,
            loss_pose_s2: two.then_some(losses.components.pose_s2),
            loss_adversarial: two.then_some(losses.components.adversarial),
            loss_consistency: (!state.teachers.is_empty()).then_some(losses.components.consistency),
            lambda_p: lp,
            lambda_a: la,
            lambda_c: lc,
            n_candidates: selection.as_ref().map_or(0, |s| s.candidates.labels.len()),
            n_accepted: selection.as_ref().map_or(0, |s| s.accepted.len()),
            n_train_items: items.len(),
            test_error: eval.as_ref().map(|e| e.mean_pixel_error),
            test_pck: eval.as_ref().map(|e| e.pck),
            test_heatmap_mse: eval.as_ref().map(|e| e.heatmap_mse),
            student_cosine: two.then(|| cosine_similarity(&state.students[0].params, &state.students[1].params)),
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} accepted {}/{} test pck {:?}",
            report.loss_total,
            report.n_accepted,
            report.n_candidates,
            report.test_pck
        );
        state.reports.push(report);
        state.epoch += 1;

        if let Some(f) = &files {
            f.append_epoch(state.reports.last().expect("just pushed"))?;
            if let Some(sel) = &selection {
                f.append_selection(epoch, &sel.candidates, data.held_back.as_ref())?;
            }
            if state.epoch % config.checkpoint_every == 0 || state.epoch == config.epochs {
                let path = f.checkpoint_path(epoch);
                save_checkpoint(&path, config, &state)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(f) = &files {
        f.write_report(config, &state)?;
    }
    Ok(TrainOutcome {
        students: state.students,
        teachers: state.teachers,
        reports: state.reports,
        checkpoints,
    })
}

struct Selection {
    candidates: Candidates,
    accepted: Vec<PseudoLabel>,
}

fn run_selection(
    config: &TrainerConfig,
    data: &DatasetSplit,
    state: &mut TrainState,
    flip_perm: &[usize],
    epoch: usize,
) -> Result<Option<Selection>> {
    if config.method != Method::Mdss || data.unlabeled.is_empty() {
        return Ok(None);
    }
    let mut candidates = generate_candidates(
        [&state.teachers[0], &state.teachers[1]],
        &data.unlabeled,
        &config.uncertainty,
        &config.codec,
        flip_perm,
        derive_seed(config.seed, &[epoch as u64]),
        epoch,
    )?;
    smooth_candidates(&mut candidates, &mut state.store, &config.uncertainty);
    let accepted = select(&mut candidates.labels, &config.selection);
    if config.selection.accumulate {
        for l in &accepted {
            state
                .pool
                .insert((l.sample_id.clone(), l.keypoint_index, l.source_teacher), l.clone());
        }
    }
    Ok(Some(Selection { candidates, accepted }))
}

fn epoch_items(
    config: &TrainerConfig,
    data: &DatasetSplit,
    state: &TrainState,
    selection: &Option<Selection>,
) -> Result<Vec<EpochItem>> {
    let k = data.spec.k;
    match config.method {
        Method::Supervised => expand_training_set(&data.labeled, &[], &[], k),
        Method::MeanTeacher => {
            let mut items = expand_training_set(&data.labeled, &[], &[], k)?;
            items.extend(data.unlabeled.iter().map(|s| EpochItem {
                id: s.id.clone(),
                image: s.image.clone(),
                labeled: None,
                pseudo: [Pose::new(vec![Keypoint::hidden(); k]), Pose::new(vec![Keypoint::hidden(); k])],
            }));
            Ok(items)
        }
        Method::Mdss => {
            let accepted: Vec<PseudoLabel> = if config.selection.accumulate {
                state.pool.values().cloned().collect()
            } else {
                selection.as_ref().map(|s| s.accepted.clone()).unwrap_or_default()
            };
            expand_training_set(&data.labeled, &data.unlabeled, &accepted, k)
        }
    }
}

struct Batch {
    images: Tensor,
    labeled_target: Tensor,
    labeled_mask: Vec<Vec<bool>>,
    pseudo_target: [Tensor; 2],
    pseudo_mask: [Vec<Vec<bool>>; 2],
    /// Items without ground truth; the consistency term covers these.
    unlabeled: Vec<usize>,
}

fn encode_target(pose: Option<&Pose>, k: usize, codec: &CodecConfig) -> (Vec<f64>, Vec<bool>) {
    match pose {
        Some(p) => {
            let (hm, mask) = encode(p, codec);
            (hm.values, mask)
        }
        None => (vec![0.0; k * codec.heatmap_size * codec.heatmap_size], vec![false; k]),
    }
}

fn make_batch(
    items: &[&EpochItem],
    config: &TrainerConfig,
    flip_perm: &[usize],
    rng: &mut ChaCha8Rng,
) -> Batch {
    let k = config.model.k;
    let s = config.codec.heatmap_size;
    let mut images: Vec<Image> = Vec::with_capacity(items.len());
    let mut lab = (Vec::new(), Vec::new());
    let mut ps = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    let mut unlabeled = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let t = sample_transform(&config.augmentation, it.image.width, rng);
        let (w, h) = (it.image.width, it.image.height);
        images.push(warp_image(&it.image, &t));
        let mapped = it.labeled.as_ref().map(|p| transform_pose(p, &t, flip_perm, w, h));
        let (v, m) = encode_target(mapped.as_ref(), k, &config.codec);
        lab.0.extend(v);
        lab.1.push(m);
        for (st, slot) in ps.iter_mut().enumerate() {
            let p = transform_pose(&it.pseudo[st], &t, flip_perm, w, h);
            let (v, m) = encode_target(Some(&p), k, &config.codec);
            slot.0.extend(v);
            slot.1.push(m);
        }
        if it.labeled.is_none() {
            unlabeled.push(i);
        }
    }
    let refs: Vec<&Image> = images.iter().collect();
    let n = items.len();
    let shape = [n, k, s, s];
    let [p0, p1] = ps;
    Batch {
        images: Tensor::from_images(&refs),
        labeled_target: Tensor { shape, data: lab.0 },
        labeled_mask: lab.1,
        pseudo_target: [Tensor { shape, data: p0.0 }, Tensor { shape, data: p1.0 }],
        pseudo_mask: [p0.1, p1.1],
        unlabeled,
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let items: Vec<&[f64]> = idx.iter().map(|&i| t.item(i)).collect();
    Tensor::stack(&items, [t.shape[1], t.shape[2], t.shape[3]])
}

fn scatter_add(dst: &mut Tensor, src: &Tensor, idx: &[usize], scale: f64) {
    for (j, &i) in idx.iter().enumerate() {
        for (d, s) in dst.item_mut(i).iter_mut().zip(src.item(j)) {
            *d += scale * s;
        }
    }
}

struct EpochLosses {
    total: f64,
    components: LossComponents,
}

fn run_epoch(
    config: &TrainerConfig,
    state: &mut TrainState,
    items: &[EpochItem],
    flip_perm: &[usize],
    epoch: usize,
) -> Result<EpochLosses> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut state.rng);
    let (lp, la, lc) = config.weights.at(epoch);
    let mut sum = LossComponents::default();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let batch_items: Vec<&EpochItem> = chunk.iter().map(|&i| &items[i]).collect();
        let batch = make_batch(&batch_items, config, flip_perm, &mut state.rng);
        let c = train_step(config, state, &batch, (lp, la, lc), epoch)?;
        total += total_loss(&c, &config.weights, epoch)?;
        sum.pose_s1 += c.pose_s1;
        sum.pose_s2 += c.pose_s2;
        sum.adversarial += c.adversarial;
        sum.consistency += c.consistency;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(EpochLosses {
        total: total / n,
        components: LossComponents {
            pose_s1: sum.pose_s1 / n,
            pose_s2: sum.pose_s2 / n,
            adversarial: sum.adversarial / n,
            consistency: sum.consistency / n,
        },
    })
}

/// One joint optimizer step over every student, followed by the EMA
/// update of every teacher.
fn train_step(
    config: &TrainerConfig,
    state: &mut TrainState,
    batch: &Batch,
    (lp, la, lc): (f64, f64, f64),
    epoch: usize,
) -> Result<LossComponents> {
    let n_students = state.students.len();
    let fwds = state
        .students
        .iter()
        .map(|s| s.forward(&batch.images, Mode::Train))
        .collect::<Result<Vec<_>>>()?;

    let mut comps = LossComponents::default();
    let mut out_grads: Vec<Vec<Tensor>> = Vec::with_capacity(n_students);
    for (i, f) in fwds.iter().enumerate() {
        let pose = student_pose_loss(
            &f.outputs,
            &batch.labeled_target,
            &batch.labeled_mask,
            &batch.pseudo_target[i],
            &batch.pseudo_mask[i],
        )?;
        if i == 0 {
            comps.pose_s1 = pose.value;
        } else {
            comps.pose_s2 = pose.value;
        }
        out_grads.push(
            pose.grads
                .into_iter()
                .map(|mut g| {
                    g.data.iter_mut().for_each(|v| *v *= lp);
                    g
                })
                .collect(),
        );
    }

    if lc != 0.0 && !state.teachers.is_empty() && !batch.unlabeled.is_empty() {
        let idx = &batch.unlabeled;
        let sub_images = gather(&batch.images, idx);
        let teacher_out = state
            .teachers
            .iter()
            .map(|t| t.forward(&sub_images, Mode::Eval).map(|f| f.last().clone()))
            .collect::<Result<Vec<_>>>()?;
        let student_out: Vec<Tensor> = fwds.iter().map(|f| gather(f.last(), idx)).collect();
        let cons = consistency_loss(
            &student_out.iter().collect::<Vec<_>>(),
            &teacher_out.iter().collect::<Vec<_>>(),
        )?;
        comps.consistency = cons.value;
        for (g_out, g) in out_grads.iter_mut().zip(&cons.grads) {
            let last = g_out.last_mut().expect("at least one stack");
            scatter_add(last, g, idx, lc);
        }
    }

    let adversarial = if la != 0.0 && n_students == 2 {
        let adv = parameter_adversarial_loss(
            &ModelParameters(state.students[0].params.clone()),
            &ModelParameters(state.students[1].params.clone()),
        )?;
        comps.adversarial = adv.value;
        Some(adv)
    } else {
        None
    };

    // Validates every component before any weight moves.
    total_loss(&comps, &config.weights, epoch)?;

    for (i, f) in fwds.iter().enumerate() {
        let mut grads = vec![0.0; state.students[i].num_params()];
        state.students[i].backward(f, &out_grads[i], &mut grads)?;
        if let Some(adv) = &adversarial {
            let g = if i == 0 { &adv.grad1 } else { &adv.grad2 };
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += la * b);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("gradient of student {}", i + 1),
                epoch,
            });
        }
        let student = &mut state.students[i];
        state.optimizers[i].step(&mut student.params, &grads);
        student.update_running_stats(f);
    }
    for (t, s) in state.teachers.iter_mut().zip(&state.students) {
        ema_update(t, s, config.ema.alpha)?;
    }
    Ok(comps)
}

/// Scores one network on labeled samples.
pub fn evaluate(net: &PoseNetwork, test: &[ImageSample], codec: &CodecConfig, pck_config: &PckConfig) -> Result<EvalResult> {
    evaluate_ensemble(&[net], test, codec, pck_config)
}

/// Decoded final-stack predictions, averaging heatmaps over `nets`.
pub fn predict(nets: &[&PoseNetwork], samples: &[ImageSample], codec: &CodecConfig) -> Result<Vec<(Pose, Vec<f64>)>> {
    Ok(predict_heatmaps(nets, samples)?
        .into_iter()
        .map(|hm| decode_item(&hm, codec))
        .collect())
}

fn decode_item(values: &[f64], codec: &CodecConfig) -> (Pose, Vec<f64>) {
    let cells = codec.heatmap_size * codec.heatmap_size;
    let (kps, conf) = values
        .chunks(cells)
        .map(|ch| {
            let ((x, y), c) = decode_channel(ch, codec);
            (Keypoint::new(x, y), c)
        })
        .unzip();
    (Pose::new(kps), conf)
}

const EVAL_BATCH: usize = 16;

fn predict_heatmaps(nets: &[&PoseNetwork], samples: &[ImageSample]) -> Result<Vec<Vec<f64>>> {
    if nets.is_empty() {
        return Err(Error::Argument("no network to evaluate".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Image> = chunk.iter().map(|s| s.image.as_ref()).collect();
        let images = Tensor::from_images(&refs);
        let mut acc: Option<Tensor> = None;
        for net in nets {
            let f = net.forward(&images, Mode::Eval)?;
            let last = f.last().clone();
            acc = Some(match acc {
                None => last,
                Some(mut a) => {
                    a.data.iter_mut().zip(&last.data).for_each(|(x, y)| *x += y);
                    a
                }
            });
        }
        let mut acc = acc.expect("non-empty");
        if nets.len() > 1 {
            let inv = 1.0 / nets.len() as f64;
            acc.data.iter_mut().for_each(|v| *v *= inv);
        }
        for i in 0..chunk.len() {
            out.push(acc.item(i).to_vec());
        }
    }
    Ok(out)
}

pub fn evaluate_ensemble(
    nets: &[&PoseNetwork],
    test: &[ImageSample],
    codec: &CodecConfig,
    pck_config: &PckConfig,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let gts: Vec<Pose> = test
        .iter()
        .map(|s| {
            s.pose
                .clone()
                .ok_or_else(|| Error::Argument(format!("test sample `{}` has no pose", s.id)))
        })
        .collect::<Result<_>>()?;
    let heatmaps = predict_heatmaps(nets, test)?;
    let preds: Vec<Pose> = heatmaps.iter().map(|h| decode_item(h, codec).0).collect();
    let (mut se, mut cells) = (0.0, 0usize);
    for (h, g) in heatmaps.iter().zip(&gts) {
        let (target, mask) = encode(g, codec);
        let n = codec.heatmap_size * codec.heatmap_size;
        for (k, &on) in mask.iter().enumerate() {
            if on {
                for (a, b) in h[k * n..(k + 1) * n].iter().zip(target.channel(k)) {
                    se += (a - b) * (a - b);
                }
                cells += n;
            }
        }
    }
    let p = pck(&preds, &gts, pck_config)?;
    Ok(EvalResult {
        mean_pixel_error: mean_pixel_error(&preds, &gts)?,
        pck: p.pck,
        pck_skipped: p.skipped,
        heatmap_mse: if cells == 0 { f64::NAN } else { se / cells as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda_a: f64,
    pub pck: Option<f64>,
    pub test_error: Option<f64>,
    pub student_cosine: Option<f64>,
}

/// One dual-pair run per adversarial weight, everything else fixed. Run
/// directories, when `base_dir` is set, are named `pal_<weight>`.
pub fn run_ablation(
    config: &TrainerConfig,
    data: &DatasetSplit,
    pal_weights: &[f64],
    base_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    pal_weights
        .iter()
        .map(|&w| {
            let mut cfg = config.clone();
            cfg.method = Method::Mdss;
            cfg.weights.lambda_a = crate::losses::WeightSchedule::constant(w);
            let opts = TrainOptions {
                run_dir: base_dir.map(|b| b.join(format!("pal_{w}"))),
                resume_from: None,
            };
            let out = train_with(&cfg, data, &opts)?;
            let last = out.reports.last().expect("epochs >= 1");
            Ok(AblationRow {
                lambda_a: w,
                pck: last.test_pck,
                test_error: last.test_error,
                student_cosine: last.student_cosine,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
