use super::*;
use crate::data::{split_labeled_unlabeled, DatasetSpec};
use crate::losses::WeightSchedule;
use crate::nn::ModelConfig;
use crate::synth::generate_synthetic_dataset;

fn spec() -> DatasetSpec {
    DatasetSpec {
        k: 2,
        image_size: 32,
        flip_pairs: vec![[0, 1]],
        pck_reference_pair: [0, 1],
    }
}

fn tiny_config(method: Method) -> TrainerConfig {
    let mut c = TrainerConfig {
        method,
        epochs: 2,
        batch_size: 2,
        seed: 5,
        model: ModelConfig {
            stacks: 1,
            base_channels: 4,
            k: 2,
            heatmap_size: 8,
            seed: 11,
            image_size: 32,
            in_channels: 3,
            depth: 1,
            batch_norm: false,
        },
        ..TrainerConfig::default()
    };
    c.codec = CodecConfig {
        heatmap_size: 8,
        sigma: 1.0,
        image_size: 32,
    };
    c.uncertainty.m = 2;
    c
}

fn split(n_train: usize, fraction: f64) -> DatasetSplit {
    let d = generate_synthetic_dataset(&spec(), n_train, 3, 1).unwrap();
    let s = split_labeled_unlabeled(&d.labeled, fraction, 2).unwrap();
    DatasetSplit {
        spec: d.spec,
        labeled: s.labeled,
        unlabeled: s.unlabeled,
        test: d.test,
        held_back: Some(s.held_back),
    }
}

fn strip_time(r: &[EpochReport]) -> Vec<EpochReport> {
    r.iter().map(|r| EpochReport { wall_time: 0.0, ..r.clone() }).collect()
}

#[test]
fn smoke_mdss_one_epoch() {
    let mut c = tiny_config(Method::Mdss);
    c.epochs = 1;
    let out = train(&c, &split(4, 0.5)).unwrap();
    let r = &out.reports[0];
    assert_eq!(r.n_candidates, 2 * 2 * 2);
    assert!(r.n_accepted <= r.n_candidates);
    assert!(r.loss_total.is_finite() && r.loss_pose_s1.is_finite());
    assert!(r.loss_pose_s2.unwrap().is_finite() && r.loss_adversarial.unwrap().is_finite());
    let p = r.test_pck.unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(r.test_error.unwrap().is_finite());
}

#[test]
fn zero_alpha_teachers_track_students() {
    let mut c = tiny_config(Method::Mdss);
    c.epochs = 1;
    c.ema.alpha = 0.0;
    let out = train(&c, &split(4, 0.5)).unwrap();
    for (t, s) in out.teachers.iter().zip(&out.students) {
        assert_eq!(t.params, s.params);
    }
}

#[test]
fn teachers_move_only_through_ema() {
    let mut c = tiny_config(Method::Mdss);
    c.ema.alpha = 1.0;
    let data = split(4, 0.5);
    let init = TrainState::new(&c).unwrap();
    let out = train(&c, &data).unwrap();
    for (t, t0) in out.teachers.iter().zip(&init.teachers) {
        assert_eq!(t.params, t0.params);
    }
    assert_ne!(out.students[0].params, init.students[0].params);
}

#[test]
fn reruns_are_identical() {
    let c = tiny_config(Method::Mdss);
    let data = split(6, 0.5);
    let a = train(&c, &data).unwrap();
    let b = train(&c, &data).unwrap();
    assert_eq!(strip_time(&a.reports), strip_time(&b.reports));
}

#[test]
fn reduces_to_two_supervised_runs() {
    let mut c = tiny_config(Method::Mdss);
    c.epochs = 3;
    c.weights.lambda_a = WeightSchedule::constant(0.0);
    c.weights.lambda_c = WeightSchedule::constant(0.0);
    let mut data = split(6, 1.0);
    data.unlabeled.clear();
    let dual = train(&c, &data).unwrap();

    let mut sup = c.clone();
    sup.method = Method::Supervised;
    let a = train(&sup, &data).unwrap();
    sup.model.seed += 1;
    let b = train(&sup, &data).unwrap();
    for e in 0..3 {
        let d = &dual.reports[e];
        assert!((d.loss_pose_s1 - a.reports[e].loss_pose_s1).abs() < 1e-6);
        assert!((d.loss_pose_s2.unwrap() - b.reports[e].loss_pose_s1).abs() < 1e-6);
    }
    assert_eq!(dual.students[0].params, a.students[0].params);
    assert_eq!(dual.students[1].params, b.students[0].params);
}

#[test]
fn mean_teacher_runs() {
    let c = tiny_config(Method::MeanTeacher);
    let out = train(&c, &split(6, 0.5)).unwrap();
    assert_eq!(out.students.len(), 1);
    assert_eq!(out.teachers.len(), 1);
    assert!(out.reports.iter().all(|r| r.loss_consistency.unwrap().is_finite()));
    assert!(out.reports.iter().all(|r| r.n_train_items == 6));
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(Method::Mdss);
    let data = split(6, 0.5);
    let full = train_with(
        &c,
        &data,
        &TrainOptions {
            run_dir: Some(dir.path().join("full")),
            resume_from: None,
        },
    )
    .unwrap();
    assert_eq!(full.checkpoints.len(), 2);
    let resumed = train_with(
        &c,
        &data,
        &TrainOptions {
            run_dir: Some(dir.path().join("full")),
            resume_from: Some(full.checkpoints[0].clone()),
        },
    )
    .unwrap();
    assert_eq!(strip_time(&resumed.reports), strip_time(&full.reports));
    assert_eq!(resumed.students[1].params, full.students[1].params);
    assert_eq!(resumed.teachers[0].params, full.teachers[0].params);
    let rows: Vec<EpochReport> = crate::logs::read_csv(&dir.path().join("full/epochs.csv")).unwrap();
    assert_eq!(rows.len(), 2);

    let mut other = c.clone();
    other.seed += 1;
    assert!(matches!(
        train_with(&other, &data, &TrainOptions { run_dir: None, resume_from: Some(full.checkpoints[0].clone()) }),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(Method::Mdss);
    train_with(&c, &split(6, 0.5), &TrainOptions { run_dir: Some(dir.path().into()), resume_from: None }).unwrap();
    for f in ["config.json", "epochs.csv", "selection.csv", "uncertainty.csv", "report.json", "heldback.json", "dataset.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(dir.path().join("checkpoints/epoch_1.ckpt").is_file());
    let back = TrainerConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(back, c);
    let unc: Vec<crate::logs::UncertaintyRow> = crate::logs::read_csv(&dir.path().join("uncertainty.csv")).unwrap();
    assert!(unc.iter().all(|r| r.error_t1.is_some()));
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(Method::Supervised);
    c.epochs = 3;
    let mut data = split(4, 1.0);
    let opts = TrainOptions { run_dir: Some(dir.path().into()), resume_from: None };
    train_with(&TrainerConfig { epochs: 1, ..c.clone() }, &data, &opts).unwrap();
    let mut bad = (*data.labeled[0].image).clone();
    bad.data[0] = f32::NAN;
    data.labeled[0].image = std::sync::Arc::new(bad);
    c.batch_size = 4;
    let Err(err) = train_with(&c, &data, &opts) else { panic!("training should fail") };
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(!err.is_usage());
    assert!(dir.path().join("checkpoints/epoch_0.ckpt").is_file());
}

#[test]
fn evaluation_contracts() {
    let data = split(4, 1.0);
    let net = PoseNetwork::build(tiny_config(Method::Supervised).model).unwrap();
    let pc = PckConfig::new([0, 1]);
    let codec = tiny_config(Method::Supervised).codec;
    let r = evaluate(&net, &data.test, &codec, &pc).unwrap();
    assert!((0.0..=1.0).contains(&r.pck) && r.mean_pixel_error.is_finite());
    assert!(evaluate(&net, &[], &codec, &pc).is_err());
}

#[test]
fn ablation_rows_follow_weights() {
    let c = TrainerConfig { epochs: 1, ..tiny_config(Method::Mdss) };
    let rows = run_ablation(&c, &split(4, 0.5), &[0.0, 0.005], None).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].lambda_a, 0.0);
    assert!(rows.iter().all(|r| r.pck.is_some()));
}

#[test]
fn config_must_match_dataset() {
    let mut c = tiny_config(Method::Supervised);
    c.model.k = 3;
    assert!(matches!(train(&c, &split(4, 1.0)), Err(Error::Config { .. })));
}
