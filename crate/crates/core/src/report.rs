//! Post-hoc reports over one or more run directories: summary CSV/JSON plus
//! `<kind>_<metric>.png` plots. Series in a plot appear in the same order as
//! the rows of the summary written beside it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, HeldBackLabels};
use crate::error::{Error, Result};
use crate::logs::{read_csv, write_csv, SelectionRow, UncertaintyRow};
use crate::metrics::{confidence_error_track, pseudo_quality_report, PckConfig, PseudoQualityReport};
use crate::plot::{save_line_plot, Series};
use crate::trainer::{EpochReport, Method, TrainerConfig, RUN_FILES};

/// Keys plotted by the confidence track when none are requested.
pub const DEFAULT_TRACK_KEYS: usize = 8;
/// Trailing window used by the pseudo-label quality summary.
pub const QUALITY_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Curves,
    PseudoQuality,
    ConfidenceTrack,
    Ablation,
}

impl ReportKind {
    pub const ALL: [ReportKind; 4] = [
        ReportKind::Curves,
        ReportKind::PseudoQuality,
        ReportKind::ConfidenceTrack,
        ReportKind::Ablation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::Curves => "curves",
            ReportKind::PseudoQuality => "pseudo_quality",
            ReportKind::ConfidenceTrack => "confidence_track",
            ReportKind::Ablation => "ablation",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown report kind `{s}`")))
    }
}

/// A run directory with its resolved config.
struct Run {
    name: String,
    dir: PathBuf,
    config: TrainerConfig,
}

impl Run {
    fn open(dir: &Path) -> Result<Self> {
        let cfg = dir.join(RUN_FILES.config);
        if !cfg.is_file() {
            return Err(Error::MissingLog(cfg));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Run {
            name,
            dir: dir.to_path_buf(),
            config: TrainerConfig::load(&cfg)?,
        })
    }

    fn epochs(&self) -> Result<Vec<EpochReport>> {
        read_csv(&self.dir.join(RUN_FILES.epochs))
    }

    fn held_back(&self) -> Result<HeldBackLabels> {
        let p = self.dir.join(RUN_FILES.held_back);
        if !p.is_file() {
            return Err(Error::NoDiagnosticLabels(self.dir.clone()));
        }
        let hb = HeldBackLabels::load(&p)?;
        if hb.is_empty() {
            return Err(Error::NoDiagnosticLabels(self.dir.clone()));
        }
        Ok(hb)
    }
}

/// Writes the report of `kind` for `run_dirs` into `out` and returns the
/// files written.
pub fn write_report(kind: ReportKind, run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Argument("at least one run directory is required".into()));
    }
    let runs = run_dirs.iter().map(|d| Run::open(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match kind {
        ReportKind::Curves => curves(&runs, out),
        ReportKind::PseudoQuality => pseudo_quality(&runs, out),
        ReportKind::ConfidenceTrack => confidence_track(&runs, out, None),
        ReportKind::Ablation => ablation(&runs, out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub run: String,
    pub method: Method,
    pub epochs: usize,
    pub final_pck: Option<f64>,
    pub final_error: Option<f64>,
    pub best_pck: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn curves(runs: &[Run], out: &Path) -> Result<Vec<PathBuf>> {
    let mut pck = Vec::new();
    let mut err = Vec::new();
    let mut rows = Vec::new();
    for run in runs {
        let epochs = run.epochs()?;
        let pts = |f: fn(&EpochReport) -> Option<f64>| -> Vec<(f64, f64)> {
            epochs.iter().map(|r| (r.epoch as f64, f(r).unwrap_or(f64::NAN))).collect()
        };
        let label = format!("{} ({:?})", run.name, run.config.method);
        pck.push(Series::new(label.clone(), pts(|r| r.test_pck)));
        err.push(Series::new(label, pts(|r| r.test_error)));
        let best = epochs
            .iter()
            .filter_map(|r| r.test_pck.map(|p| (r.epoch, p)))
            .fold(None, |acc: Option<(usize, f64)>, (e, p)| match acc {
                Some((_, bp)) if bp >= p => acc,
                _ => Some((e, p)),
            });
        let last = epochs.last();
        rows.push(CurveSummary {
            run: run.name.clone(),
            method: run.config.method,
            epochs: epochs.len(),
            final_pck: last.and_then(|r| r.test_pck),
            final_error: last.and_then(|r| r.test_error),
            best_pck: best.map(|b| b.1),
            best_epoch: best.map(|b| b.0),
        });
    }
    let files = [out.join("curves.csv"), out.join("curves_pck.png"), out.join("curves_error.png")];
    write_csv(&files[0], &rows)?;
    save_line_plot(&files[1], &pck)?;
    save_line_plot(&files[2], &err)?;
    Ok(files.to_vec())
}

/// Trailing-window view of a pseudo-label quality report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub run: String,
    pub window: Vec<usize>,
    /// Window epochs where both sets are non-empty and the accepted mean
    /// error does not exceed the rejected one.
    pub accepted_not_worse: usize,
    pub fraction_accepted_not_worse: f64,
    pub pooled_accepted_error: Option<f64>,
    pub pooled_rejected_error: Option<f64>,
    pub pooled_confidence_only_error: Option<f64>,
    pub unmatched: usize,
}

/// Summarises the last `window` epochs of `report`. The fraction is taken
/// over the whole window, so epochs without accepted or rejected candidates
/// count against it.
pub fn summarise_quality(run: &str, report: &PseudoQualityReport, window: usize) -> QualitySummary {
    let epochs: Vec<usize> = report.rows.iter().map(|r| r.epoch).collect();
    let win: BTreeSet<usize> = epochs.iter().rev().take(window).copied().collect();
    let good = report
        .rows
        .iter()
        .filter(|r| win.contains(&r.epoch))
        .filter(|r| matches!((r.accepted.mean_error, r.rejected.mean_error), (Some(a), Some(b)) if a <= b))
        .count();
    QualitySummary {
        run: run.into(),
        window: win.iter().copied().collect(),
        accepted_not_worse: good,
        fraction_accepted_not_worse: if win.is_empty() { 0.0 } else { good as f64 / win.len() as f64 },
        pooled_accepted_error: report.pooled_error(&win, |r| r.accepted),
        pooled_rejected_error: report.pooled_error(&win, |r| r.rejected),
        pooled_confidence_only_error: report.pooled_error(&win, |r| r.confidence_only),
        unmatched: report.unmatched,
    }
}

/// Builds the quality report of one run directory from its logs.
pub fn run_quality_report(dir: &Path) -> Result<PseudoQualityReport> {
    let run = Run::open(dir)?;
    quality_for(&run)
}

fn quality_for(run: &Run) -> Result<PseudoQualityReport> {
    let held_back = run.held_back()?;
    let selection: Vec<SelectionRow> = read_csv(&run.dir.join(RUN_FILES.selection))?;
    let test: BTreeMap<usize, (f64, f64)> = run
        .epochs()?
        .iter()
        .filter_map(|r| Some((r.epoch, (r.test_error?, r.test_pck?))))
        .collect();
    let pck = PckConfig {
        threshold: run.config.pck_threshold,
        reference_pair: pck_pair(run)?,
    };
    pseudo_quality_report(&selection, &held_back, &pck, &test)
}

fn pck_pair(run: &Run) -> Result<[usize; 2]> {
    let p = run.dir.join(RUN_FILES.dataset);
    let text = fs::read_to_string(&p).map_err(|_| Error::MissingLog(p.clone()))?;
    let spec: DatasetSpec = serde_json::from_str(&text)?;
    Ok(spec.pck_reference_pair)
}

#[derive(Serialize)]
struct QualityCsvRow {
    run: String,
    epoch: usize,
    n_all: usize,
    n_accepted: usize,
    n_rejected: usize,
    error_all: Option<f64>,
    error_accepted: Option<f64>,
    error_rejected: Option<f64>,
    error_confidence_only: Option<f64>,
    error_both: Option<f64>,
    pck_accepted: Option<f64>,
    pck_rejected: Option<f64>,
    test_error: Option<f64>,
    test_pck: Option<f64>,
}

fn pseudo_quality(runs: &[Run], out: &Path) -> Result<Vec<PathBuf>> {
    let mut csv_rows = Vec::new();
    let mut summaries = Vec::new();
    let mut err = Vec::new();
    let mut count = Vec::new();
    for run in runs {
        let rep = quality_for(run)?;
        let series = |name: &str, f: &dyn Fn(&crate::metrics::PseudoQualityRow) -> Option<f64>| {
            Series::new(
                format!("{} {name}", run.name),
                rep.rows.iter().map(|r| (r.epoch as f64, f(r).unwrap_or(f64::NAN))).collect(),
            )
        };
        err.push(series("accepted", &|r| r.accepted.mean_error));
        err.push(series("rejected", &|r| r.rejected.mean_error));
        err.push(series("confidence_only", &|r| r.confidence_only.mean_error));
        count.push(series("accepted", &|r| Some(r.accepted.count as f64)));
        for r in &rep.rows {
            csv_rows.push(QualityCsvRow {
                run: run.name.clone(),
                epoch: r.epoch,
                n_all: r.all.count,
                n_accepted: r.accepted.count,
                n_rejected: r.rejected.count,
                error_all: r.all.mean_error,
                error_accepted: r.accepted.mean_error,
                error_rejected: r.rejected.mean_error,
                error_confidence_only: r.confidence_only.mean_error,
                error_both: r.both.mean_error,
                pck_accepted: r.accepted.pck,
                pck_rejected: r.rejected.pck,
                test_error: r.test_error,
                test_pck: r.test_pck,
            });
        }
        summaries.push(summarise_quality(&run.name, &rep, QUALITY_WINDOW));
    }
    let files = [
        out.join("pseudo_quality.csv"),
        out.join("pseudo_quality_summary.json"),
        out.join("pseudo_quality_error.png"),
        out.join("pseudo_quality_count.png"),
    ];
    write_csv(&files[0], &csv_rows)?;
    write_json(&files[1], &summaries)?;
    save_line_plot(&files[2], &err)?;
    save_line_plot(&files[3], &count)?;
    Ok(files.to_vec())
}

#[derive(Serialize)]
struct TrackCsvRow {
    run: String,
    sample_id: String,
    keypoint_index: usize,
    epoch: usize,
    confidence: f64,
    error: f64,
}

/// `keys` defaults to the first [`DEFAULT_TRACK_KEYS`] (sample, keypoint)
/// pairs of the dump in sorted order.
pub fn confidence_track_report(run_dirs: &[PathBuf], out: &Path, keys: Option<&[(String, usize)]>) -> Result<Vec<PathBuf>> {
    let runs = run_dirs.iter().map(|d| Run::open(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    confidence_track(&runs, out, keys)
}

fn confidence_track(runs: &[Run], out: &Path, keys: Option<&[(String, usize)]>) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut conf = Vec::new();
    let mut err = Vec::new();
    for run in runs {
        let held_back = run.held_back()?;
        let dump: Vec<UncertaintyRow> = read_csv(&run.dir.join(RUN_FILES.uncertainty))?;
        let keys: Vec<(String, usize)> = match keys {
            Some(k) => k.to_vec(),
            None => dump
                .iter()
                .map(|r| (r.sample_id.clone(), r.keypoint_index))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .take(DEFAULT_TRACK_KEYS)
                .collect(),
        };
        let track = confidence_error_track(&dump, &held_back, &keys);
        for w in &track.warnings {
            log::warn!("{}: {w}", run.name);
        }
        for t in &track.tracks {
            let label = format!("{} {}_{}", run.name, t.sample_id, t.keypoint_index);
            conf.push(Series::new(label.clone(), t.series.iter().map(|p| (p.epoch as f64, p.confidence)).collect()));
            err.push(Series::new(label, t.series.iter().map(|p| (p.epoch as f64, p.error)).collect()));
            rows.extend(t.series.iter().map(|p| TrackCsvRow {
                run: run.name.clone(),
                sample_id: t.sample_id.clone(),
                keypoint_index: t.keypoint_index,
                epoch: p.epoch,
                confidence: p.confidence,
                error: p.error,
            }));
        }
        summary.push(serde_json::json!({ "run": run.name, "tracks": track.tracks.iter().map(|t| serde_json::json!({
            "sample_id": t.sample_id,
            "keypoint_index": t.keypoint_index,
            "n": t.n,
            "rank_correlation": t.rank_correlation,
        })).collect::<Vec<_>>(), "warnings": track.warnings }));
    }
    let files = [
        out.join("confidence_track.csv"),
        out.join("confidence_track_summary.json"),
        out.join("confidence_track_confidence.png"),
        out.join("confidence_track_error.png"),
    ];
    write_csv(&files[0], &rows)?;
    write_json(&files[1], &summary)?;
    save_line_plot(&files[2], &conf)?;
    save_line_plot(&files[3], &err)?;
    Ok(files.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub run: String,
    pub lambda_a: f64,
    pub pck: Option<f64>,
    pub test_error: Option<f64>,
    pub student_cosine: Option<f64>,
}

fn ablation(runs: &[Run], out: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for run in runs {
        let epochs = run.epochs()?;
        let last = epochs
            .last()
            .ok_or_else(|| Error::Argument(format!("{} has no epochs logged", run.dir.display())))?;
        rows.push(AblationCsvRow {
            run: run.name.clone(),
            lambda_a: last.lambda_a,
            pck: last.test_pck,
            test_error: last.test_error,
            student_cosine: last.student_cosine,
        });
    }
    rows.sort_by(|a, b| a.lambda_a.total_cmp(&b.lambda_a));
    let pts = |f: fn(&AblationCsvRow) -> Option<f64>| -> Vec<Series> {
        vec![Series::new("", rows.iter().map(|r| (r.lambda_a, f(r).unwrap_or(f64::NAN))).collect())]
    };
    let files = [out.join("ablation.csv"), out.join("ablation_pck.png"), out.join("ablation_cosine.png")];
    write_csv(&files[0], &rows)?;
    save_line_plot(&files[1], &pts(|r| r.pck))?;
    save_line_plot(&files[2], &pts(|r| r.student_cosine))?;
    Ok(files.to_vec())
}
