//! Deterministic train/val/test assignment at sequence or frame granularity.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, Split};
use crate::error::{Error, Result};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::InvalidArgument(format!("ratios out of range: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "ratios must sum to 1, got {ratios:?} (sum {sum})"
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items into three buckets.
pub fn proportional_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

fn assign<I: Copy>(items: &mut [I], ratios: [f64; 3], seed: u64) -> Result<Vec<(I, Split)>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    check_ratios(ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let counts = proportional_counts(items.len(), ratios);
    let mut out = Vec::with_capacity(items.len());
    let mut cursor = 0usize;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        for &item in &items[cursor..cursor + count] {
            out.push((item, *split));
        }
        cursor += count;
    }
    Ok(out)
}

/// Annotates the manifest's split column by whole sequences.
pub fn split_sequences(manifest: &mut Manifest, ratios: [f64; 3], seed: u64) -> Result<()> {
    let mut indices: Vec<usize> = (0..manifest.rows.len()).collect();
    for (idx, split) in assign(&mut indices, ratios, seed)? {
        manifest.rows[idx].split = split;
    }
    Ok(())
}

/// Per-frame split assignment, shuffling frames independent of their video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSplit {
    /// `(row index into the manifest, frame index, split)`
    pub entries: Vec<(usize, usize, Split)>,
}

impl FrameSplit {
    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries
            .iter()
            .filter(move |(_, _, s)| *s == split)
            .map(|&(row, frame, _)| (row, frame))
    }

    pub fn save(&self, manifest: &Manifest, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["sequence_id", "frame_index", "split"])?;
        for &(row, frame, split) in &self.entries {
            writer.write_record([
                manifest.rows[row].sequence_id.clone(),
                frame.to_string(),
                split.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load(manifest: &Manifest, path: &Path) -> Result<FrameSplit> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            let id = record.get(0).unwrap_or("");
            let row = manifest
                .rows
                .iter()
                .position(|r| r.sequence_id == id)
                .ok_or_else(|| Error::Data(format!("frame split names unknown sequence '{id}'")))?;
            let frame: usize = record
                .get(1)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Data("bad frame_index in frame split".into()))?;
            let split: Split = record.get(2).unwrap_or("").parse()?;
            entries.push((row, frame, split));
        }
        Ok(FrameSplit { entries })
    }
}

/// Shuffles every frame of every sequence and assigns splits proportionally.
pub fn split_frames(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<FrameSplit> {
    let mut frames: Vec<(usize, usize)> = Vec::new();
    for (row, record) in manifest.rows.iter().enumerate() {
        for frame in 0..record.num_frames {
            frames.push((row, frame));
        }
    }
    let assigned = assign(&mut frames, ratios, seed)?;
    Ok(FrameSplit {
        entries: assigned
            .into_iter()
            .map(|((row, frame), split)| (row, frame, split))
            .collect(),
    })
}
