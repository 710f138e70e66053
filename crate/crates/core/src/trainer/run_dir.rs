use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{EpochReport, TrainState, TrainerConfig};
use crate::data::{DatasetSplit, HeldBackLabels};
use crate::error::{Error, Result};
use crate::logs::{append_csv, read_csv, write_csv, SelectionRow, UncertaintyRow};
use crate::pseudo::Candidates;

/// File names inside a run directory.
pub struct RunFileNames {
    pub config: &'static str,
    pub epochs: &'static str,
    pub selection: &'static str,
    pub uncertainty: &'static str,
    pub report: &'static str,
    pub held_back: &'static str,
    pub dataset: &'static str,
    pub checkpoints: &'static str,
}

pub const RUN_FILES: RunFileNames = RunFileNames {
    config: "config.json",
    epochs: "epochs.csv",
    selection: "selection.csv",
    uncertainty: "uncertainty.csv",
    report: "report.json",
    held_back: "heldback.json",
    dataset: "dataset.json",
    checkpoints: "checkpoints",
};

pub struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    /// Prepares `dir`. A fresh run (`start_epoch == 0`) clears old logs; a
    /// resumed run drops log rows from epochs at or after `start_epoch`.
    pub fn open(dir: &Path, config: &TrainerConfig, data: &DatasetSplit, start_epoch: usize) -> Result<Self> {
        let ck = dir.join(RUN_FILES.checkpoints);
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let f = RunFiles { dir: dir.to_path_buf() };
        let cfg_path = f.path(RUN_FILES.config);
        fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
        let spec_path = f.path(RUN_FILES.dataset);
        fs::write(&spec_path, serde_json::to_string_pretty(&data.spec)?).map_err(|e| Error::io(&spec_path, e))?;
        if let Some(hb) = &data.held_back {
            hb.save(&f.path(RUN_FILES.held_back))?;
        }
        if start_epoch == 0 {
            for name in [RUN_FILES.epochs, RUN_FILES.selection, RUN_FILES.uncertainty] {
                let p = f.path(name);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        } else {
            f.truncate::<EpochReport>(RUN_FILES.epochs, start_epoch, |r| r.epoch)?;
            f.truncate::<SelectionRow>(RUN_FILES.selection, start_epoch, |r| r.epoch)?;
            f.truncate::<UncertaintyRow>(RUN_FILES.uncertainty, start_epoch, |r| r.epoch)?;
        }
        Ok(f)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn truncate<T: serde::Serialize + serde::de::DeserializeOwned>(
        &self,
        name: &str,
        before: usize,
        epoch: impl Fn(&T) -> usize,
    ) -> Result<()> {
        let p = self.path(name);
        if !p.exists() {
            return Ok(());
        }
        let rows: Vec<T> = read_csv(&p)?;
        let kept: Vec<T> = rows.into_iter().filter(|r| epoch(r) < before).collect();
        write_csv(&p, &kept)
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(RUN_FILES.checkpoints).join(format!("epoch_{epoch}.ckpt"))
    }

    pub fn append_epoch(&self, report: &EpochReport) -> Result<()> {
        append_csv(&self.path(RUN_FILES.epochs), std::slice::from_ref(report))
    }

    /// Appends every candidate to the selection log and every record to
    /// the uncertainty dump. Held-back labels only fill diagnostic columns.
    pub fn append_selection(&self, epoch: usize, c: &Candidates, held_back: Option<&HeldBackLabels>) -> Result<()> {
        let sel: Vec<SelectionRow> = c
            .labels
            .iter()
            .map(|l| SelectionRow {
                epoch,
                sample_id: l.sample_id.clone(),
                keypoint_index: l.keypoint_index,
                source_teacher: l.source_teacher.as_str().into(),
                unc_int_aug: l.uncertainty.unc_int_aug,
                unc_ext_aug: l.uncertainty.unc_ext_aug,
                unc_ext: l.uncertainty.unc_ext,
                accepted: l.accepted,
                pseudo_truth_x: l.pseudo_truth.0,
                pseudo_truth_y: l.pseudo_truth.1,
                confidence: l.confidence,
            })
            .collect();
        append_csv(&self.path(RUN_FILES.selection), &sel)?;
        let unc: Vec<UncertaintyRow> = c
            .records
            .iter()
            .map(|r| {
                let p = &r.predictions;
                let truth = held_back
                    .and_then(|h| h.get(&p.sample_id))
                    .and_then(|pose| pose.keypoints.get(p.keypoint_index))
                    .filter(|k| k.visible);
                let err = |q: (f64, f64)| truth.map(|t| (q.0 - t.x).hypot(q.1 - t.y));
                UncertaintyRow {
                    epoch,
                    sample_id: p.sample_id.clone(),
                    keypoint_index: p.keypoint_index,
                    unc_int_aug: r.instant.unc_int_aug,
                    unc_ext_aug: r.instant.unc_ext_aug,
                    unc_ext: r.instant.unc_ext,
                    smoothed_int_aug: r.smoothed.unc_int_aug,
                    smoothed_ext_aug: r.smoothed.unc_ext_aug,
                    smoothed_ext: r.smoothed.unc_ext,
                    confidence_t1: r.confidence[0],
                    confidence_t2: r.confidence[1],
                    pred_t1_x: p.raw_pred_t1.0,
                    pred_t1_y: p.raw_pred_t1.1,
                    pred_t2_x: p.raw_pred_t2.0,
                    pred_t2_y: p.raw_pred_t2.1,
                    error_t1: err(p.raw_pred_t1),
                    error_t2: err(p.raw_pred_t2),
                }
            })
            .collect();
        append_csv(&self.path(RUN_FILES.uncertainty), &unc)
    }

    pub fn write_report(&self, config: &TrainerConfig, state: &TrainState) -> Result<()> {
        let last = state.reports.last();
        let best = state
            .reports
            .iter()
            .filter_map(|r| r.test_pck.map(|p| (r.epoch, p)))
            .fold(None, |acc: Option<(usize, f64)>, (e, p)| match acc {
                Some((_, bp)) if bp >= p => acc,
                _ => Some((e, p)),
            });
        let report = json!({
            "method": config.method,
            "epochs": state.epoch,
            "eval_network": config.eval_network,
            "num_params": state.students[0].num_params(),
            "final": last,
            "best_test_pck": best.map(|(e, p)| json!({"epoch": e, "pck": p})),
        });
        let p = self.path(RUN_FILES.report);
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))
    }
}
