//! Row types of the run-directory CSV logs and helpers to read and write
//! them.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate pseudo-label as the gate saw it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub epoch: usize,
    pub sample_id: String,
    pub keypoint_index: usize,
    pub source_teacher: String,
    pub unc_int_aug: f64,
    pub unc_ext_aug: f64,
    pub unc_ext: f64,
    pub accepted: bool,
    pub pseudo_truth_x: f64,
    pub pseudo_truth_y: f64,
    pub confidence: f64,
}

/// Instantaneous and smoothed uncertainty of one (sample, keypoint).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub epoch: usize,
    pub sample_id: String,
    pub keypoint_index: usize,
    pub unc_int_aug: f64,
    pub unc_ext_aug: f64,
    pub unc_ext: f64,
    pub smoothed_int_aug: f64,
    pub smoothed_ext_aug: f64,
    pub smoothed_ext: f64,
    pub confidence_t1: f64,
    pub confidence_t2: f64,
    pub pred_t1_x: f64,
    pub pred_t1_y: f64,
    pub pred_t2_x: f64,
    pub pred_t2_y: f64,
    /// Pixel error of T1's raw prediction when held-back labels exist.
    pub error_t1: Option<f64>,
    pub error_t2: Option<f64>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| wrap(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a log, reporting a missing file as [`Error::MissingLog`].
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::MissingLog(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| wrap(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn wrap(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema {
            context: path.display().to_string(),
            reason: format!("{other:?}"),
        },
    }
}
