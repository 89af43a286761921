//! Dataset ingestion: manifests, depth-derived masks, splits, batching,
//! and the synthetic gesture generator.

pub mod batch;
pub mod manifest;
pub mod mask;
pub mod png;
pub mod split;
pub mod synth;

pub use batch::{pad_and_batch, SequenceBatch, SequenceItem};
pub use manifest::{Manifest, Scenario, SequenceRecord, Split};
pub use mask::depth_to_mask;
pub use split::{proportional_counts, split_frames, split_sequences, FrameSplit};
pub use synth::{synth_generate, SynthConfig};

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One frame with its optional side channels.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub sequence_id: String,
    pub frame_index: usize,
    pub label: usize,
    pub rgb_path: PathBuf,
    pub depth_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
}

impl SequenceRecord {
    /// Frame-level view of this sequence, paths resolved against `manifest`.
    pub fn frame_samples(&self, manifest: &Manifest) -> Vec<FrameSample> {
        (0..self.num_frames)
            .map(|i| FrameSample {
                sequence_id: self.sequence_id.clone(),
                frame_index: i,
                label: self.label,
                rgb_path: manifest.resolve(&self.frame_file(i)),
                depth_path: self.depth_file(i).map(|p| manifest.resolve(&p)),
                mask_path: self.mask_file(i).map(|p| manifest.resolve(&p)),
            })
            .collect()
    }
}

/// A fully decoded sequence: frames as `[t, 3, h, w]` values in `[0, 1]`
/// and, when available, binary masks as `[t, h, w]`.
pub struct LoadedSequence<T> {
    pub id: String,
    pub label: usize,
    pub scenario: Scenario,
    pub split: Split,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<T>,
    pub masks: Option<Vec<T>>,
}

impl<T: Scalar> LoadedSequence<T> {
    pub fn frames_tensor(&self) -> Tensor<T> {
        Tensor::leaf(
            vec![self.len, 3, self.height, self.width],
            self.frames.clone(),
            false,
        )
    }

    pub fn masks_tensor(&self) -> Option<Tensor<T>> {
        self.masks.as_ref().map(|m| {
            Tensor::leaf(vec![self.len, self.height, self.width], m.clone(), false)
        })
    }

    /// One frame as a `[1, 3, h, w]` tensor.
    pub fn frame_tensor(&self, t: usize) -> Tensor<T> {
        let plane = 3 * self.height * self.width;
        Tensor::leaf(
            vec![1, 3, self.height, self.width],
            self.frames[t * plane..(t + 1) * plane].to_vec(),
            false,
        )
    }
}

/// Decodes every frame (and mask when present) of one sequence, verifying
/// a consistent image size.
pub fn load_sequence<T: Scalar>(
    manifest: &Manifest,
    record: &SequenceRecord,
    want_masks: bool,
) -> Result<LoadedSequence<T>> {
    if record.num_frames == 0 {
        return Err(Error::Data(format!(
            "sequence '{}' has no frames",
            record.sequence_id
        )));
    }
    let mut frames: Vec<T> = Vec::new();
    let mut masks: Vec<T> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for i in 0..record.num_frames {
        let path = manifest.resolve(&record.frame_file(i));
        let rgb = png::load_rgb(&path).map_err(|e| {
            Error::Data(format!("sequence '{}': {e}", record.sequence_id))
        })?;
        match dims {
            None => dims = Some((rgb.height, rgb.width)),
            Some(d) if d != (rgb.height, rgb.width) => {
                return Err(Error::Data(format!(
                    "sequence '{}' mixes frame sizes",
                    record.sequence_id
                )))
            }
            _ => {}
        }
        frames.extend(png::rgb_to_chw::<T>(&rgb));
        if want_masks {
            let mask_path = record.mask_file(i).ok_or_else(|| {
                Error::Data(format!(
                    "sequence '{}' has no mask directory",
                    record.sequence_id
                ))
            })?;
            let (mw, mh, mask) = png::load_mask(&manifest.resolve(&mask_path))?;
            if (mh, mw) != dims.unwrap() {
                return Err(Error::Data(format!(
                    "sequence '{}' frame {i}: mask {mh}x{mw} does not match frames",
                    record.sequence_id
                )));
            }
            masks.extend(mask.iter().map(|&v| T::of_f64(v as f64)));
        }
    }
    let (height, width) = dims.unwrap();
    Ok(LoadedSequence {
        id: record.sequence_id.clone(),
        label: record.label,
        scenario: record.scenario,
        split: record.split,
        len: record.num_frames,
        height,
        width,
        frames,
        masks: if want_masks { Some(masks) } else { None },
    })
}
