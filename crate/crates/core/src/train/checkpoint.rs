//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `SSARCKPT` magic (8 bytes), u32 version, u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//! u8 rank, rank x u64 dims, raw element data; a CRC32 over every
//! preceding byte closes the file.
//!
//! Everything a checkpoint carries is a named tensor: model parameters and
//! running statistics under their layer paths, the config fingerprint and
//! training-progress values under `meta.*` (strings stored as byte values),
//! and optimizer moments under `optim.*`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamBlock, SsarModel};
use crate::nn::{AdamSlot, AdamState};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"SSARCKPT";
pub const VERSION: u32 = 1;

pub const META_CONFIG: &str = "meta.config";
pub const META_STAGE: &str = "meta.stage";
pub const META_TRAIN_STATE: &str = "meta.train_state";
const OPTIM_STEP: &str = "optim.t";

/// Raw tensor payload inside a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub bytes: Vec<u8>,
}

/// In-memory checkpoint; entries are kept sorted by name so that
/// save -> load -> save is byte-identical.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub entries: Vec<TensorEntry>,
}

/// Training-loop progress persisted for resumption.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: u64,
    pub best_val: f64,
    pub since_best: u64,
    pub lr_current: f64,
    pub lr_dropped: bool,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { entries: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn insert_values<T: Scalar>(&mut self, name: &str, dims: &[usize], values: &[T]) {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_bytes());
        for &v in values {
            v.write_le(&mut bytes);
        }
        self.entries.retain(|e| e.name != name);
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: dims.iter().map(|&d| d as u64).collect(),
            bytes,
        });
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) {
        self.insert_values(name, tensor.shape(), tensor.data());
    }

    /// Stores a string as a rank-1 f32 tensor of byte values.
    pub fn insert_string(&mut self, name: &str, value: &str) {
        let vals: Vec<f32> = value.bytes().map(|b| b as f32).collect();
        self.insert_values(name, &[vals.len()], &vals);
    }

    pub fn get_string(&self, name: &str) -> Result<String> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))?;
        let values: Vec<f32> = entry.decode()?;
        let bytes: Vec<u8> = values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Checkpoint(format!("entry '{name}' is not a string")))
                }
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes)
            .map_err(|_| Error::Checkpoint(format!("entry '{name}' is not valid UTF-8")))
    }

    pub fn decode_named<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))?;
        Ok((entry.dims.iter().map(|&d| d as usize).collect(), entry.decode()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sorted: Vec<&TensorEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));

        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&VERSION.to_le_bytes());
        body.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
        for entry in sorted {
            let name_bytes = entry.name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("name too long: '{}'", entry.name)));
            }
            body.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            body.extend_from_slice(name_bytes);
            body.push(entry.dtype.tag());
            if entry.dims.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("rank too high: '{}'", entry.name)));
            }
            body.push(entry.dims.len() as u8);
            for &d in &entry.dims {
                body.extend_from_slice(&d.to_le_bytes());
            }
            body.extend_from_slice(&entry.bytes);
        }
        let crc = crc32fast::hash(&body);
        let mut writer = BufWriter::new(File::create(path)?);
        writer.write_all(&body)?;
        writer.write_all(&crc.to_le_bytes())?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut raw = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
        if raw.len() < MAGIC.len() + 4 + 4 + 4 {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let (body, crc_bytes) = raw.split_at(raw.len() - 4);
        let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {computed:08x}"
            )));
        }
        let mut cursor = Cursor { buf: body, pos: 0 };
        let magic = cursor.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = cursor.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cursor.u16()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let dtype = Dtype::from_tag(cursor.u8()?)?;
            let rank = cursor.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cursor.u64()?);
            }
            let numel: u64 = dims.iter().product();
            let byte_len = (numel as usize) * dtype.size_bytes();
            let bytes = cursor.take(byte_len)?.to_vec();
            entries.push(TensorEntry { name, dtype, dims, bytes });
        }
        if cursor.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { entries })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

impl TensorEntry {
    pub fn decode<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "entry '{}' is {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let width = self.dtype.size_bytes();
        Ok(self.bytes.chunks_exact(width).map(T::read_le).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let dims: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        Tensor::from_vec(&dims, self.decode()?)
    }
}

// ---------------------------------------------------------------------------
// Model and optimizer packing

fn insert_adam<T: Scalar>(ckpt: &mut Checkpoint, state: &AdamState<T>) {
    ckpt.insert_values(OPTIM_STEP, &[1], &[state.step as f64]);
    for (path, slot) in &state.slots {
        ckpt.insert_values(&format!("optim.m.{path}"), &[slot.m.len()], &slot.m);
        ckpt.insert_values(&format!("optim.v.{path}"), &[slot.v.len()], &slot.v);
    }
}

/// Rebuilds optimizer state if the checkpoint carries any.
pub fn adam_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<Option<AdamState<T>>> {
    if ckpt.get(OPTIM_STEP).is_none() {
        return Ok(None);
    }
    let (_, step) = ckpt.decode_named::<f64>(OPTIM_STEP)?;
    let mut state = AdamState::new();
    state.step = step[0] as u64;
    for entry in &ckpt.entries {
        if let Some(path) = entry.name.strip_prefix("optim.m.") {
            let m: Vec<T> = entry.decode()?;
            let v: Vec<T> = ckpt
                .get(&format!("optim.v.{path}"))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer entry for '{path}' missing second moment"))
                })?
                .decode()?;
            state.slots.insert(path.to_string(), AdamSlot { m, v });
        }
    }
    Ok(Some(state))
}

fn insert_train_state(ckpt: &mut Checkpoint, ts: &TrainState) {
    ckpt.insert_values(
        META_TRAIN_STATE,
        &[5],
        &[
            ts.epochs_done as f64,
            ts.best_val,
            ts.since_best as f64,
            ts.lr_current,
            if ts.lr_dropped { 1.0 } else { 0.0 },
        ],
    );
}

pub fn train_state_from(ckpt: &Checkpoint) -> Result<Option<TrainState>> {
    if ckpt.get(META_TRAIN_STATE).is_none() {
        return Ok(None);
    }
    let (_, v) = ckpt.decode_named::<f64>(META_TRAIN_STATE)?;
    if v.len() != 5 {
        return Err(Error::Checkpoint("malformed training-state entry".into()));
    }
    Ok(Some(TrainState {
        epochs_done: v[0] as u64,
        best_val: v[1],
        since_best: v[2] as u64,
        lr_current: v[3],
        lr_dropped: v[4] != 0.0,
    }))
}

pub fn stage_from(ckpt: &Checkpoint) -> Result<u8> {
    let (_, v) = ckpt.decode_named::<f64>(META_STAGE)?;
    Ok(v[0] as u8)
}

fn pack_named<T: Scalar>(
    config: &ModelConfig,
    stage: u8,
    tensors: &[(String, Tensor<T>)],
    optimizer: Option<&AdamState<T>>,
    train_state: Option<&TrainState>,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.insert_string(META_CONFIG, &config.fingerprint());
    ckpt.insert_values(META_STAGE, &[1], &[stage as f64]);
    for (name, tensor) in tensors {
        ckpt.insert_tensor(name, tensor);
    }
    if let Some(opt) = optimizer {
        insert_adam(&mut ckpt, opt);
    }
    if let Some(ts) = train_state {
        insert_train_state(&mut ckpt, ts);
    }
    ckpt
}

/// Packs the full model (parameters + running statistics).
pub fn checkpoint_from_model<T: Scalar>(
    model: &SsarModel<T>,
    stage: u8,
    optimizer: Option<&AdamState<T>>,
    train_state: Option<&TrainState>,
) -> Checkpoint {
    let mut tensors = model.named_params();
    tensors.extend(model.named_buffers());
    pack_named(&model.config, stage, &tensors, optimizer, train_state)
}

/// Packs only the classifier (paths under `lstm.`).
pub fn checkpoint_from_classifier<T: Scalar>(
    config: &ModelConfig,
    classifier: &crate::model::LstmClassifier<T>,
    stage: u8,
    optimizer: Option<&AdamState<T>>,
    train_state: Option<&TrainState>,
) -> Checkpoint {
    let mut tensors = Vec::new();
    classifier.collect_params("lstm", &mut tensors);
    pack_named(config, stage, &tensors, optimizer, train_state)
}

/// Validates the fingerprint and loads tensors into the model.
///
/// With `prefixes`, only paths under one of the given prefixes load (used
/// to overlay the classifier from a stage-2 checkpoint). Every selected
/// model path must exist in the checkpoint and every selected checkpoint
/// path must exist in the model.
pub fn apply_to_model<T: Scalar>(
    ckpt: &Checkpoint,
    model: &mut SsarModel<T>,
    prefixes: Option<&[&str]>,
) -> Result<()> {
    check_fingerprint(ckpt, &model.config)?;
    let selected = |name: &str| match prefixes {
        None => true,
        Some(list) => list.iter().any(|p| name.starts_with(p)),
    };

    let mut expected = model.named_params();
    expected.extend(model.named_buffers());
    let expected_names: std::collections::BTreeSet<String> = expected
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| selected(n))
        .collect();

    for name in &expected_names {
        let entry = ckpt
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor '{name}'")))?;
        model.set_tensor(name, entry.to_tensor()?)?;
    }
    for entry in &ckpt.entries {
        if entry.name.starts_with("meta.") || entry.name.starts_with("optim.") {
            continue;
        }
        if selected(&entry.name) && !expected_names.contains(&entry.name) {
            return Err(Error::Checkpoint(format!(
                "unknown tensor path '{}' for this model",
                entry.name
            )));
        }
    }
    Ok(())
}

/// Loads a classifier-only checkpoint.
pub fn apply_to_classifier<T: Scalar>(
    ckpt: &Checkpoint,
    config: &ModelConfig,
    classifier: &mut crate::model::LstmClassifier<T>,
) -> Result<()> {
    check_fingerprint(ckpt, config)?;
    let mut expected = Vec::new();
    classifier.collect_params("lstm", &mut expected);
    for (name, _) in &expected {
        let entry = ckpt
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor '{name}'")))?;
        let rel = name.strip_prefix("lstm.").unwrap();
        classifier.set_tensor(rel, entry.to_tensor()?)?;
    }
    Ok(())
}

pub fn check_fingerprint(ckpt: &Checkpoint, config: &ModelConfig) -> Result<()> {
    let stored = ckpt.get_string(META_CONFIG)?;
    let current = config.fingerprint();
    if stored != current {
        return Err(Error::Checkpoint(format!(
            "config fingerprint mismatch:\n  checkpoint: {stored}\n  current:    {current}"
        )));
    }
    Ok(())
}
