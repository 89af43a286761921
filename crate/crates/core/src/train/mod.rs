//! The three-stage training procedure.
//!
//! Stage 1 trains encoder, decoder, and embedding head on shuffled single
//! frames with the segmentation loss and the frame-label loss summed at
//! equal weight. Stage 2 trains the LSTM classifier alone on stored
//! embedding sequences. Stage 3 fine-tunes the whole network end-to-end,
//! one sequence per batch.

pub mod checkpoint;
pub mod embeddings;
pub mod metrics;

pub use checkpoint::{
    adam_from_checkpoint, apply_to_classifier, apply_to_model, check_fingerprint,
    checkpoint_from_classifier, checkpoint_from_model, stage_from, train_state_from, Checkpoint,
    TensorEntry, TrainState,
};
pub use embeddings::{EmbeddingArchive, EmbeddingSequence};
pub use metrics::{MetricsRecord, MetricsSink};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    load_sequence, pad_and_batch, FrameSplit, Manifest, Scenario, SequenceItem, Split,
};
use crate::error::{Error, Result};
use crate::model::{LstmClassifier, ModelConfig, ParamBlock, SsarModel};
use crate::nn::{adam_step, pixelwise_cross_entropy, softmax_cross_entropy, AdamState, BnMode};
use crate::tensor::{backward, ops, Scalar, Tensor};

/// Per-stage optimization settings.
#[derive(Clone, Debug)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    /// Stage 2: learning rate after the divergence-triggered drop.
    pub lr_after_divergence: f64,
    /// Stage 2: optional explicit epoch at which to drop the rate.
    pub lr_drop_epoch: Option<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub seg_weight: f64,
    pub label_weight: f64,
    /// Steps per moving-average window for divergence detection.
    pub divergence_window: usize,
    /// Consecutive rising windows that count as divergence.
    pub divergence_windows_needed: usize,
}

impl StageConfig {
    /// Defaults per stage. The full-scale rates follow the published
    /// procedure (1e-6, then 1e-2 dropping to 1e-3, then 1e-3); the tiny
    /// preset uses rates sized for minutes-long desk runs.
    pub fn defaults(stage: u8, tiny: bool) -> Self {
        let (lr, lr_after, batch) = match (stage, tiny) {
            (1, false) => (1e-6, 1e-6, 100),
            (1, true) => (1e-3, 1e-3, 32),
            (2, false) => (1e-2, 1e-3, 100),
            (2, true) => (1e-2, 1e-3, 16),
            (3, false) => (1e-3, 1e-3, 1),
            _ => (3e-4, 3e-4, 1),
        };
        StageConfig {
            stage,
            lr,
            lr_after_divergence: lr_after,
            lr_drop_epoch: None,
            batch_size: batch,
            max_epochs: if tiny { 30 } else { 1000 },
            patience: 5,
            seed: 7,
            seg_weight: 1.0,
            label_weight: 1.0,
            divergence_window: 200,
            divergence_windows_needed: 3,
        }
    }
}

/// Result of one training stage. The model holds the best-validation
/// parameters when the stage returns.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutcome {
    pub best_val_accuracy: f64,
    pub epochs_run: u64,
    pub final_step: u64,
}

fn epoch_rng(seed: u64, stage: u8, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ ((stage as u64) << 56) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
    )
}

// ---------------------------------------------------------------------------
// In-memory datasets (frames kept as bytes, converted per batch)

/// One frame with its mask, decoded once and held as bytes.
pub struct FrameEntry {
    pub seq_id: String,
    pub frame_index: usize,
    pub label: usize,
    pub split: Split,
    /// Channel-major RGB bytes.
    pub rgb: Vec<u8>,
    /// Binary mask values in {0, 1}.
    pub mask: Vec<u8>,
}

/// Frame-granularity dataset for stage 1. Frames whose mask is empty are
/// excluded at load time.
pub struct FrameDataset {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<FrameEntry>,
}

impl FrameDataset {
    pub fn load(manifest: &Manifest, frame_split: &FrameSplit) -> Result<FrameDataset> {
        let mut entries = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for &(row, frame, split) in &frame_split.entries {
            let record = &manifest.rows[row];
            let rgb = crate::data::png::load_rgb(&manifest.resolve(&record.frame_file(frame)))?;
            let mask_path = record.mask_file(frame).ok_or_else(|| {
                Error::Data(format!(
                    "sequence '{}' has no mask directory (run mask preparation first)",
                    record.sequence_id
                ))
            })?;
            let (mw, mh, mask) = crate::data::png::load_mask(&manifest.resolve(&mask_path))?;
            if (mh, mw) != (rgb.height, rgb.width) {
                return Err(Error::Data(format!(
                    "sequence '{}' frame {frame}: mask size differs from frame",
                    record.sequence_id
                )));
            }
            match dims {
                None => dims = Some((rgb.height, rgb.width)),
                Some(d) if d != (rgb.height, rgb.width) => {
                    return Err(Error::Data("dataset mixes image sizes".into()))
                }
                _ => {}
            }
            if mask.iter().all(|&v| v == 0) {
                continue; // only frames that actually contain a hand
            }
            let plane = rgb.height * rgb.width;
            let mut chw = vec![0u8; 3 * plane];
            for p in 0..plane {
                for c in 0..3 {
                    chw[c * plane + p] = rgb.pixels[p * 3 + c];
                }
            }
            entries.push(FrameEntry {
                seq_id: record.sequence_id.clone(),
                frame_index: frame,
                label: record.label,
                split,
                rgb: chw,
                mask,
            });
        }
        let (height, width) =
            dims.ok_or_else(|| Error::Data("frame split selected no frames".into()))?;
        Ok(FrameDataset { height, width, entries })
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    /// Builds `[b,3,h,w]` frames in `[0,1]`, `[b,h,w]` masks, and labels.
    pub fn batch_tensors<T: Scalar>(&self, idxs: &[usize]) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
        let plane = self.height * self.width;
        let b = idxs.len();
        let mut frames = vec![T::zero(); b * 3 * plane];
        let mut masks = vec![T::zero(); b * plane];
        let mut labels = Vec::with_capacity(b);
        let scale = T::of_f64(1.0 / 255.0);
        for (j, &i) in idxs.iter().enumerate() {
            let e = &self.entries[i];
            for (dst, &src) in frames[j * 3 * plane..(j + 1) * 3 * plane]
                .iter_mut()
                .zip(&e.rgb)
            {
                *dst = T::of_f64(src as f64) * scale;
            }
            for (dst, &src) in masks[j * plane..(j + 1) * plane].iter_mut().zip(&e.mask) {
                *dst = T::of_f64(src as f64);
            }
            labels.push(e.label);
        }
        (
            Tensor::leaf(vec![b, 3, self.height, self.width], frames, false),
            Tensor::leaf(vec![b, self.height, self.width], masks, false),
            labels,
        )
    }
}

/// One whole sequence held as bytes.
pub struct SeqEntry {
    pub id: String,
    pub label: usize,
    pub scenario: Scenario,
    pub split: Split,
    pub len: usize,
    pub rgb: Vec<u8>,
    pub mask: Option<Vec<u8>>,
}

/// Sequence-granularity dataset for stage 3 and evaluation.
pub struct SequenceDataset {
    pub height: usize,
    pub width: usize,
    pub items: Vec<SeqEntry>,
}

impl SequenceDataset {
    pub fn load(manifest: &Manifest, want_masks: bool) -> Result<SequenceDataset> {
        let mut items = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for record in &manifest.rows {
            let seq = load_sequence::<f32>(manifest, record, want_masks)?;
            match dims {
                None => dims = Some((seq.height, seq.width)),
                Some(d) if d != (seq.height, seq.width) => {
                    return Err(Error::Data("dataset mixes image sizes".into()))
                }
                _ => {}
            }
            items.push(SeqEntry {
                id: seq.id,
                label: seq.label,
                scenario: seq.scenario,
                split: seq.split,
                len: seq.len,
                rgb: seq.frames.iter().map(|&v| (v * 255.0).round() as u8).collect(),
                mask: seq.masks.map(|m| m.iter().map(|&v| v as u8).collect()),
            });
        }
        let (height, width) = dims.ok_or_else(|| Error::Data("empty manifest".into()))?;
        Ok(SequenceDataset { height, width, items })
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == split)
            .collect()
    }

    pub fn frames_tensor<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let e = &self.items[i];
        let scale = T::of_f64(1.0 / 255.0);
        let data: Vec<T> = e.rgb.iter().map(|&v| T::of_f64(v as f64) * scale).collect();
        Tensor::leaf(vec![e.len, 3, self.height, self.width], data, false)
    }

    pub fn masks_tensor<T: Scalar>(&self, i: usize) -> Option<Tensor<T>> {
        let e = &self.items[i];
        e.mask.as_ref().map(|m| {
            let data: Vec<T> = m.iter().map(|&v| T::of_f64(v as f64)).collect();
            Tensor::leaf(vec![e.len, self.height, self.width], data, false)
        })
    }
}

// ---------------------------------------------------------------------------
// Shared loop helpers

type Snapshot<T> = Vec<(String, Tensor<T>)>;

fn snapshot_model<T: Scalar>(model: &SsarModel<T>) -> Snapshot<T> {
    let mut s = model.named_params();
    s.extend(model.named_buffers());
    s
}

fn restore_model<T: Scalar>(model: &mut SsarModel<T>, snap: &Snapshot<T>) -> Result<()> {
    for (path, tensor) in snap {
        model.set_tensor(path, tensor.clone())?;
    }
    Ok(())
}

fn snapshot_classifier<T: Scalar>(c: &LstmClassifier<T>) -> Snapshot<T> {
    let mut s = Vec::new();
    c.collect_params("lstm", &mut s);
    s
}

fn restore_classifier<T: Scalar>(c: &mut LstmClassifier<T>, snap: &Snapshot<T>) -> Result<()> {
    for (path, tensor) in snap {
        c.set_tensor(path.strip_prefix("lstm.").unwrap(), tensor.clone())?;
    }
    Ok(())
}

fn adam_update_model<T: Scalar>(
    model: &mut SsarModel<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let mut params = model.named_params();
    adam_step(state, &mut params, lr)?;
    for (path, tensor) in params {
        model.set_tensor(&path, tensor)?;
    }
    Ok(())
}

fn adam_update_classifier<T: Scalar>(
    classifier: &mut LstmClassifier<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let mut params = snapshot_classifier(classifier);
    adam_step(state, &mut params, lr)?;
    restore_classifier(classifier, &params)
}

fn ensure_finite(stage: u8, step: u64, loss: f64, seg: f64, label: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "stage {stage} step {step}: non-finite loss {loss} (segmentation {seg}, label {label})"
        )));
    }
    Ok(())
}

struct EarlyStop {
    best: f64,
    since: u64,
    patience: u64,
}

impl EarlyStop {
    fn new(patience: usize, best: f64, since: u64) -> Self {
        EarlyStop { best, since, patience: patience as u64 }
    }
    /// Returns (improved, should_stop).
    fn update(&mut self, val: f64) -> (bool, bool) {
        if val > self.best {
            self.best = val;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0usize;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Frame-level classification accuracy through the embedding head.
pub fn frame_accuracy<T: Scalar>(
    model: &SsarModel<T>,
    data: &FrameDataset,
    idxs: &[usize],
    chunk: usize,
) -> Result<f64> {
    if idxs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for part in idxs.chunks(chunk.max(1)) {
        let (frames, _, labels) = data.batch_tensors::<T>(part);
        let x = model.normalize_frames(&frames)?;
        let (hidden, _) = model.encoder_forward(&x, BnMode::Eval)?;
        let (emb, _) = model.embed(&hidden, BnMode::Eval)?;
        let k = model.config.embedding_dim;
        for (j, &label) in labels.iter().enumerate() {
            if argmax_row(&emb.data()[j * k..(j + 1) * k]) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idxs.len() as f64)
}

/// Sequence-level accuracy over chosen items of a loaded dataset.
pub fn sequence_accuracy<T: Scalar>(
    model: &SsarModel<T>,
    data: &SequenceDataset,
    idxs: &[usize],
) -> Result<f64> {
    if idxs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for &i in idxs {
        let frames = data.frames_tensor::<T>(i);
        let rec = model.recognize(&frames)?;
        if rec.label == data.items[i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / idxs.len() as f64)
}

/// Accuracy of the standalone classifier over embedding sequences.
pub fn classifier_accuracy<T: Scalar>(
    classifier: &LstmClassifier<T>,
    items: &[SequenceItem<T>],
    batch_size: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for batch in pad_and_batch(items, batch_size)? {
        let logits = classifier.forward(&batch.to_tensor(), &batch.lengths)?;
        let k = logits.shape()[1];
        for (j, &label) in batch.labels.iter().enumerate() {
            if argmax_row(&logits.data()[j * k..(j + 1) * k]) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

// ---------------------------------------------------------------------------
// Stage 1

pub fn train_stage1<T: Scalar>(
    model: &mut SsarModel<T>,
    data: &FrameDataset,
    cfg: &StageConfig,
    sink: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
    start: Option<(AdamState<T>, TrainState)>,
) -> Result<TrainOutcome> {
    if model.config.embedding_dim != model.config.num_classes {
        return Err(Error::Config(format!(
            "frame-label supervision uses the embedding as class logits; embedding_dim {} must equal num_classes {}",
            model.config.embedding_dim, model.config.num_classes
        )));
    }
    if (data.height, data.width) != (model.config.input_h, model.config.input_w) {
        return Err(Error::Data(format!(
            "dataset frames are {}x{}, model expects {}x{}",
            data.height, data.width, model.config.input_h, model.config.input_w
        )));
    }
    let train_idx = data.indices_in(Split::Train);
    let val_idx = data.indices_in(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Data("stage 1: no training frames".into()));
    }

    let (mut adam, ts) = start.unwrap_or_else(|| {
        (
            AdamState::new(),
            TrainState {
                epochs_done: 0,
                best_val: f64::NEG_INFINITY,
                since_best: 0,
                lr_current: cfg.lr,
                lr_dropped: false,
            },
        )
    });
    let mut stop = EarlyStop::new(cfg.patience, ts.best_val, ts.since_best);
    let mut best_snap = snapshot_model(model);
    let mut epochs_done = ts.epochs_done;

    for epoch in ts.epochs_done..cfg.max_epochs as u64 {
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, 1, epoch));
        let mut epoch_loss = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (frames, masks, labels) = data.batch_tensors::<T>(chunk);
            let x = model.normalize_frames(&frames)?;
            let (hidden, st_enc) = model.encoder_forward(&x, BnMode::Train)?;
            let mask_logits = model.decoder_forward(&hidden)?;
            let (emb, st_emb) = model.embed(&hidden, BnMode::Train)?;
            let seg = pixelwise_cross_entropy(&mask_logits, &masks)?;
            let label = softmax_cross_entropy(&emb, &labels)?;
            let total = weighted_total(&seg, &label, cfg)?;

            let (lv, sv, bv) = (
                total.item().as_f64(),
                seg.item().as_f64(),
                label.item().as_f64(),
            );
            ensure_finite(1, adam.step + 1, lv, sv, bv)?;
            backward(&total)?;
            adam_update_model(model, &mut adam, ts.lr_current)?;
            model.apply_stats(&st_enc)?;
            model.apply_stats(&st_emb)?;
            sink.log(MetricsRecord {
                step: adam.step,
                stage: 1,
                loss: lv,
                seg_loss: sv,
                label_loss: bv,
                val_accuracy: None,
                lr: ts.lr_current,
            })?;
            epoch_loss = (epoch_loss.0 + lv, epoch_loss.1 + sv, epoch_loss.2 + bv);
            batches += 1;
        }

        let val = frame_accuracy(model, data, &val_idx, 64)?;
        let n = batches.max(1) as f64;
        sink.log(MetricsRecord {
            step: adam.step,
            stage: 1,
            loss: epoch_loss.0 / n,
            seg_loss: epoch_loss.1 / n,
            label_loss: epoch_loss.2 / n,
            val_accuracy: Some(val),
            lr: ts.lr_current,
        })?;
        epochs_done = epoch + 1;

        let (improved, should_stop) = stop.update(val);
        if improved {
            best_snap = snapshot_model(model);
            if let Some(dir) = ckpt_dir {
                checkpoint_from_model(model, 1, None, None).save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = ckpt_dir {
            let state = TrainState {
                epochs_done,
                best_val: stop.best,
                since_best: stop.since,
                lr_current: ts.lr_current,
                lr_dropped: false,
            };
            checkpoint_from_model(model, 1, Some(&adam), Some(&state))
                .save(&dir.join("latest.ckpt"))?;
        }
        if should_stop {
            break;
        }
    }

    restore_model(model, &best_snap)?;
    Ok(TrainOutcome {
        best_val_accuracy: stop.best,
        epochs_run: epochs_done,
        final_step: adam.step,
    })
}

fn weighted_total<T: Scalar>(
    seg: &Tensor<T>,
    label: &Tensor<T>,
    cfg: &StageConfig,
) -> Result<Tensor<T>> {
    // Unit weights stay an exact sum of the two terms.
    if cfg.seg_weight == 1.0 && cfg.label_weight == 1.0 {
        ops::add(seg, label)
    } else {
        ops::add(
            &ops::scale(seg, T::of_f64(cfg.seg_weight)),
            &ops::scale(label, T::of_f64(cfg.label_weight)),
        )
    }
}

// ---------------------------------------------------------------------------
// Embedding export

/// Runs the trained encoder + embedding head over every sequence in the
/// manifest (evaluation mode) and collects the per-frame embeddings.
pub fn export_embeddings<T: Scalar>(
    model: &SsarModel<T>,
    manifest: &Manifest,
) -> Result<EmbeddingArchive> {
    let dim = model.config.embedding_dim;
    let mut archive = EmbeddingArchive::new(dim);
    for record in &manifest.rows {
        let seq = load_sequence::<T>(manifest, record, false)?;
        let frames = seq.frames_tensor();
        let x = model.normalize_frames(&frames)?;
        let (hidden, _) = model.encoder_forward(&x, BnMode::Eval)?;
        let (emb, _) = model.embed(&hidden, BnMode::Eval)?;
        archive.push(EmbeddingSequence {
            id: record.sequence_id.clone(),
            label: record.label,
            len: seq.len,
            values: emb.data().iter().map(|&v| v.as_f64() as f32).collect(),
        })?;
    }
    Ok(archive)
}

/// Joins an embedding archive with the manifest's split column, producing
/// the per-split item lists stage 2 trains on.
pub fn archive_split_items<T: Scalar>(
    archive: &EmbeddingArchive,
    manifest: &Manifest,
    split: Split,
) -> Result<Vec<SequenceItem<T>>> {
    let mut items = Vec::new();
    for record in &manifest.rows {
        if record.split != split {
            continue;
        }
        let seq = archive.find(&record.sequence_id).ok_or_else(|| {
            Error::Data(format!(
                "embedding archive has no sequence '{}'",
                record.sequence_id
            ))
        })?;
        let rows: Vec<T> = seq.values.iter().map(|&v| T::of_f64(v as f64)).collect();
        items.push(SequenceItem::new(
            seq.id.clone(),
            seq.label,
            seq.len,
            archive.dim,
            rows,
        )?);
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Stage 2

#[allow(clippy::too_many_arguments)]
pub fn train_stage2<T: Scalar>(
    classifier: &mut LstmClassifier<T>,
    model_config: &ModelConfig,
    train_items: &[SequenceItem<T>],
    val_items: &[SequenceItem<T>],
    cfg: &StageConfig,
    sink: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
    start: Option<(AdamState<T>, TrainState)>,
) -> Result<TrainOutcome> {
    if train_items.is_empty() {
        return Err(Error::Data("stage 2: no training sequences".into()));
    }
    let dim = classifier.input_size();
    if let Some(bad) = train_items.iter().chain(val_items).find(|i| i.row_width != dim) {
        return Err(Error::Data(format!(
            "embedding width {} of sequence '{}' does not match classifier input {dim}",
            bad.row_width, bad.id
        )));
    }

    let (mut adam, ts) = start.unwrap_or_else(|| {
        (
            AdamState::new(),
            TrainState {
                epochs_done: 0,
                best_val: f64::NEG_INFINITY,
                since_best: 0,
                lr_current: cfg.lr,
                lr_dropped: false,
            },
        )
    });
    let mut stop = EarlyStop::new(cfg.patience, ts.best_val, ts.since_best);
    let mut best_snap = snapshot_classifier(classifier);
    let mut epochs_done = ts.epochs_done;
    let mut lr = ts.lr_current;
    let mut dropped = ts.lr_dropped;

    // Divergence detection over fixed windows of the training loss.
    let mut window_sum = 0.0;
    let mut window_count = 0usize;
    let mut prev_window: Option<f64> = None;
    let mut rising = 0usize;

    for epoch in ts.epochs_done..cfg.max_epochs as u64 {
        if let Some(drop_at) = cfg.lr_drop_epoch {
            if !dropped && epoch as usize >= drop_at {
                lr = cfg.lr_after_divergence;
                dropped = true;
            }
        }
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, 2, epoch));
        let shuffled: Vec<SequenceItem<T>> =
            order.iter().map(|&i| train_items[i].clone()).collect();

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in pad_and_batch(&shuffled, cfg.batch_size)? {
            let logits = classifier.forward(&batch.to_tensor(), &batch.lengths)?;
            let loss = softmax_cross_entropy(&logits, &batch.labels)?;
            let lv = loss.item().as_f64();
            ensure_finite(2, adam.step + 1, lv, 0.0, lv)?;
            backward(&loss)?;
            adam_update_classifier(classifier, &mut adam, lr)?;
            sink.log(MetricsRecord {
                step: adam.step,
                stage: 2,
                loss: lv,
                seg_loss: 0.0,
                label_loss: lv,
                val_accuracy: None,
                lr,
            })?;
            epoch_loss += lv;
            batches += 1;

            window_sum += lv;
            window_count += 1;
            if window_count == cfg.divergence_window {
                let mean = window_sum / window_count as f64;
                if let Some(prev) = prev_window {
                    rising = if mean > prev { rising + 1 } else { 0 };
                    if !dropped && rising >= cfg.divergence_windows_needed {
                        lr = cfg.lr_after_divergence;
                        dropped = true;
                        log::info!("stage 2: training loss diverging, learning rate drops to {lr}");
                    }
                }
                prev_window = Some(mean);
                window_sum = 0.0;
                window_count = 0;
            }
        }

        let val = classifier_accuracy(classifier, val_items, cfg.batch_size)?;
        sink.log(MetricsRecord {
            step: adam.step,
            stage: 2,
            loss: epoch_loss / batches.max(1) as f64,
            seg_loss: 0.0,
            label_loss: epoch_loss / batches.max(1) as f64,
            val_accuracy: Some(val),
            lr,
        })?;
        epochs_done = epoch + 1;

        let (improved, should_stop) = stop.update(val);
        if improved {
            best_snap = snapshot_classifier(classifier);
            if let Some(dir) = ckpt_dir {
                checkpoint_from_classifier(model_config, classifier, 2, None, None)
                    .save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = ckpt_dir {
            let state = TrainState {
                epochs_done,
                best_val: stop.best,
                since_best: stop.since,
                lr_current: lr,
                lr_dropped: dropped,
            };
            checkpoint_from_classifier(model_config, classifier, 2, Some(&adam), Some(&state))
                .save(&dir.join("latest.ckpt"))?;
        }
        if should_stop {
            break;
        }
    }

    restore_classifier(classifier, &best_snap)?;
    Ok(TrainOutcome {
        best_val_accuracy: stop.best,
        epochs_run: epochs_done,
        final_step: adam.step,
    })
}

// ---------------------------------------------------------------------------
// Stage 3

pub fn train_stage3<T: Scalar>(
    model: &mut SsarModel<T>,
    data: &SequenceDataset,
    cfg: &StageConfig,
    sink: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
    start: Option<(AdamState<T>, TrainState)>,
) -> Result<TrainOutcome> {
    let train_idx = data.indices_in(Split::Train);
    let val_idx = data.indices_in(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Data("stage 3: no training sequences".into()));
    }
    if (data.height, data.width) != (model.config.input_h, model.config.input_w) {
        return Err(Error::Data(format!(
            "dataset frames are {}x{}, model expects {}x{}",
            data.height, data.width, model.config.input_h, model.config.input_w
        )));
    }

    let (mut adam, ts) = start.unwrap_or_else(|| {
        (
            AdamState::new(),
            TrainState {
                epochs_done: 0,
                best_val: f64::NEG_INFINITY,
                since_best: 0,
                lr_current: cfg.lr,
                lr_dropped: false,
            },
        )
    });
    let mut stop = EarlyStop::new(cfg.patience, ts.best_val, ts.since_best);
    let mut best_snap = snapshot_model(model);
    let mut epochs_done = ts.epochs_done;

    for epoch in ts.epochs_done..cfg.max_epochs as u64 {
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, 3, epoch));
        let mut epoch_loss = (0.0, 0.0, 0.0);
        for &i in &order {
            let (total, seg, label, st) = stage3_loss(model, data, i, cfg)?;
            let (lv, sv, bv) = (
                total.item().as_f64(),
                seg.item().as_f64(),
                label.item().as_f64(),
            );
            ensure_finite(3, adam.step + 1, lv, sv, bv)?;
            backward(&total)?;
            adam_update_model(model, &mut adam, ts.lr_current)?;
            model.apply_stats(&st)?;
            sink.log(MetricsRecord {
                step: adam.step,
                stage: 3,
                loss: lv,
                seg_loss: sv,
                label_loss: bv,
                val_accuracy: None,
                lr: ts.lr_current,
            })?;
            epoch_loss = (epoch_loss.0 + lv, epoch_loss.1 + sv, epoch_loss.2 + bv);
        }

        let val = sequence_accuracy(model, data, &val_idx)?;
        let n = order.len().max(1) as f64;
        sink.log(MetricsRecord {
            step: adam.step,
            stage: 3,
            loss: epoch_loss.0 / n,
            seg_loss: epoch_loss.1 / n,
            label_loss: epoch_loss.2 / n,
            val_accuracy: Some(val),
            lr: ts.lr_current,
        })?;
        epochs_done = epoch + 1;

        let (improved, should_stop) = stop.update(val);
        if improved {
            best_snap = snapshot_model(model);
            if let Some(dir) = ckpt_dir {
                checkpoint_from_model(model, 3, None, None).save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = ckpt_dir {
            let state = TrainState {
                epochs_done,
                best_val: stop.best,
                since_best: stop.since,
                lr_current: ts.lr_current,
                lr_dropped: false,
            };
            checkpoint_from_model(model, 3, Some(&adam), Some(&state))
                .save(&dir.join("latest.ckpt"))?;
        }
        if should_stop {
            break;
        }
    }

    restore_model(model, &best_snap)?;
    Ok(TrainOutcome {
        best_val_accuracy: stop.best,
        epochs_run: epochs_done,
        final_step: adam.step,
    })
}

/// One-sequence end-to-end loss: sequence-label cross-entropy plus the
/// per-frame segmentation cross-entropy averaged over the sequence.
#[allow(clippy::type_complexity)]
pub fn stage3_loss<T: Scalar>(
    model: &SsarModel<T>,
    data: &SequenceDataset,
    index: usize,
    cfg: &StageConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, crate::model::StatsUpdates<T>)> {
    let entry = &data.items[index];
    let frames = data.frames_tensor::<T>(index);
    let masks = data
        .masks_tensor::<T>(index)
        .ok_or_else(|| Error::Data(format!("sequence '{}' has no masks", entry.id)))?;
    let x = model.normalize_frames(&frames)?;
    let (hidden, mut stats) = model.encoder_forward(&x, BnMode::Train)?;
    let mask_logits = model.decoder_forward(&hidden)?;
    let (emb, st2) = model.embed(&hidden, BnMode::Train)?;
    stats.merge(st2);
    let seg = pixelwise_cross_entropy(&mask_logits, &masks)?;
    let seq = emb.reshape(&[entry.len, 1, model.config.embedding_dim])?;
    let logits = model.classify_sequence(&seq, &[entry.len])?;
    let label = softmax_cross_entropy(&logits, &[entry.label])?;
    let total = weighted_total(&seg, &label, cfg)?;
    Ok((total, seg, label, stats))
}
