//! Binary checkpoints: magic, version, a JSON header, then little-endian
//! `f64` blobs in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochReport, TrainState, TrainerConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, ModelConfig, PoseNetwork};
use crate::pseudo::PseudoLabel;
use crate::uncertainty::SmoothingStore;

const MAGIC: &[u8; 8] = b"MDSSCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainerConfig,
    epoch: usize,
    students: usize,
    teachers: usize,
    adam_steps: Vec<u64>,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// u128 as a decimal string; JSON numbers stop at 64 bits.
    rng_word_pos: String,
    store: serde_json::Value,
    pool: Vec<PseudoLabel>,
    reports: Vec<EpochReport>,
    blobs: Vec<(String, usize)>,
}

/// A decoded checkpoint.
pub struct Checkpoint {
    pub config: TrainerConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub reports: Vec<EpochReport>,
    header: Header,
    blobs: BTreeMap<String, Vec<f64>>,
}

/// Configs that may continue each other's runs: everything but the epoch
/// budget, checkpoint cadence and data locations must match.
pub(super) fn compatible(a: &TrainerConfig, b: &TrainerConfig) -> bool {
    let strip = |c: &TrainerConfig| TrainerConfig {
        epochs: 0,
        checkpoint_every: 1,
        data: Default::default(),
        ..c.clone()
    };
    strip(a) == strip(b)
}

fn net_config(config: &TrainerConfig, i: usize) -> ModelConfig {
    ModelConfig {
        seed: config.model.seed.wrapping_add(i as u64),
        ..config.model
    }
}

pub fn save_checkpoint(path: &Path, config: &TrainerConfig, state: &TrainState) -> Result<()> {
    let mut blobs: Vec<(String, &[f64])> = Vec::new();
    for (i, s) in state.students.iter().enumerate() {
        blobs.push((format!("student{i}/params"), &s.params));
        blobs.push((format!("student{i}/buffers"), &s.buffers));
    }
    for (i, t) in state.teachers.iter().enumerate() {
        blobs.push((format!("teacher{i}/params"), &t.params));
        blobs.push((format!("teacher{i}/buffers"), &t.buffers));
    }
    for (i, o) in state.optimizers.iter().enumerate() {
        blobs.push((format!("adam{i}/m"), &o.m));
        blobs.push((format!("adam{i}/v"), &o.v));
    }
    let header = Header {
        config: config.clone(),
        epoch: state.epoch,
        students: state.students.len(),
        teachers: state.teachers.len(),
        adam_steps: state.optimizers.iter().map(|o| o.step).collect(),
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        store: state.store.to_json(),
        pool: state.pool.values().cloned().collect(),
        reports: state.reports.clone(),
        blobs: blobs.iter().map(|(n, b)| (n.clone(), b.len())).collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(head.len() + 16 + blobs.iter().map(|b| b.1.len() * 8).sum::<usize>());
    buf.write_all(MAGIC).expect("vec write");
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    buf.write_u64::<LittleEndian>(head.len() as u64).expect("vec write");
    buf.write_all(&head).expect("vec write");
    for (_, b) in &blobs {
        for &v in b.iter() {
            buf.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }
    // Write-then-rename so a crash never leaves a torn checkpoint behind.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let mut head = vec![0u8; len];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&head).map_err(|e| bad(&e.to_string()))?;
    let mut blobs = BTreeMap::new();
    for (name, n) in &header.blobs {
        let mut v = vec![0.0; *n];
        r.read_f64_into::<LittleEndian>(&mut v)
            .map_err(|_| bad(&format!("truncated blob {name}")))?;
        blobs.insert(name.clone(), v);
    }
    Ok(Checkpoint {
        config: header.config.clone(),
        epoch: header.epoch,
        reports: header.reports.clone(),
        header,
        blobs,
    })
}

impl Checkpoint {
    fn blob(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = self
            .blobs
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("blob {name} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn network(&mut self, prefix: &str, cfg: ModelConfig) -> Result<PoseNetwork> {
        let mut net = PoseNetwork::build(cfg)?;
        net.params = self.blob(&format!("{prefix}/params"), net.params.len())?;
        net.buffers = self.blob(&format!("{prefix}/buffers"), net.buffers.len())?;
        Ok(net)
    }

    pub fn into_state(mut self) -> Result<TrainState> {
        let cfg = self.config.clone();
        let students = (0..self.header.students)
            .map(|i| self.network(&format!("student{i}"), net_config(&cfg, i)))
            .collect::<Result<Vec<_>>>()?;
        let teachers = (0..self.header.teachers)
            .map(|i| self.network(&format!("teacher{i}"), net_config(&cfg, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut optimizers = Vec::new();
        for (i, s) in students.iter().enumerate() {
            let mut o = Adam::new(cfg.optimizer.clone(), s.num_params());
            o.m = self.blob(&format!("adam{i}/m"), s.num_params())?;
            o.v = self.blob(&format!("adam{i}/v"), s.num_params())?;
            o.step = *self
                .header
                .adam_steps
                .get(i)
                .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
            optimizers.push(o);
        }
        let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(self.header.rng_seed);
        rng.set_stream(self.header.rng_stream);
        let pos: u128 = self
            .header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
        rng.set_word_pos(pos);
        let pool = self
            .header
            .pool
            .drain(..)
            .map(|l| ((l.sample_id.clone(), l.keypoint_index, l.source_teacher), l))
            .collect();
        Ok(TrainState {
            epoch: self.epoch,
            students,
            teachers,
            optimizers,
            rng,
            store: SmoothingStore::from_json(&self.header.store)?,
            pool,
            reports: self.reports,
        })
    }
}
