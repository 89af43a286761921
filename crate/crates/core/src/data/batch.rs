//! Zero-padded batching of variable-length sequences.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One variable-length item: `len` rows of `row_width` values (a row is one
/// frame or one embedding vector).
#[derive(Clone, Debug)]
pub struct SequenceItem<T> {
    pub id: String,
    pub label: usize,
    pub len: usize,
    pub row_width: usize,
    pub rows: Vec<T>,
}

impl<T: Scalar> SequenceItem<T> {
    pub fn new(id: String, label: usize, len: usize, row_width: usize, rows: Vec<T>) -> Result<Self> {
        if len == 0 || rows.len() != len * row_width {
            return Err(Error::Shape(format!(
                "sequence '{id}': {} values for {len} rows of {row_width}",
                rows.len()
            )));
        }
        Ok(SequenceItem { id, label, len, row_width, rows })
    }
}

/// A zero-padded batch laid out `[t_max, batch, row_width]`.
#[derive(Clone, Debug)]
pub struct SequenceBatch<T> {
    pub data: Vec<T>,
    pub t_max: usize,
    pub batch: usize,
    pub row_width: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_ids: Vec<String>,
}

impl<T: Scalar> SequenceBatch<T> {
    /// View as a `[t_max, batch, row_width]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::leaf(
            vec![self.t_max, self.batch, self.row_width],
            self.data.clone(),
            false,
        )
    }

    /// Recovers item `j`'s rows without padding.
    pub fn extract_item(&self, j: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.lengths[j] * self.row_width);
        for t in 0..self.lengths[j] {
            let base = (t * self.batch + j) * self.row_width;
            out.extend_from_slice(&self.data[base..base + self.row_width]);
        }
        out
    }
}

/// Groups items into batches in the given order; the last batch may be
/// smaller. Every padding element is exactly zero.
pub fn pad_and_batch<T: Scalar>(
    items: &[SequenceItem<T>],
    batch_size: usize,
) -> Result<Vec<SequenceBatch<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut batches = Vec::new();
    for chunk in items.chunks(batch_size) {
        let row_width = chunk[0].row_width;
        if let Some(bad) = chunk.iter().find(|i| i.row_width != row_width) {
            return Err(Error::Shape(format!(
                "sequence '{}' row width {} differs from batch width {row_width}",
                bad.id, bad.row_width
            )));
        }
        let t_max = chunk.iter().map(|i| i.len).max().unwrap();
        let b = chunk.len();
        let mut data = vec![T::zero(); t_max * b * row_width];
        for (j, item) in chunk.iter().enumerate() {
            for t in 0..item.len {
                let dst = (t * b + j) * row_width;
                let src = t * row_width;
                data[dst..dst + row_width]
                    .copy_from_slice(&item.rows[src..src + row_width]);
            }
        }
        batches.push(SequenceBatch {
            data,
            t_max,
            batch: b,
            row_width,
            lengths: chunk.iter().map(|i| i.len).collect(),
            labels: chunk.iter().map(|i| i.label).collect(),
            seq_ids: chunk.iter().map(|i| i.id.clone()).collect(),
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, label: usize, len: usize, width: usize, seed: f64) -> SequenceItem<f64> {
        let rows = (0..len * width).map(|i| seed + i as f64 * 0.1).collect();
        SequenceItem::new(id.into(), label, len, width, rows).unwrap()
    }

    #[test]
    fn t_max_and_lengths() {
        let batches = pad_and_batch(&[item("a", 0, 3, 2, 1.0), item("b", 1, 5, 2, 2.0)], 4).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.t_max, 5);
        assert_eq!(b.lengths, vec![3, 5]);
        assert_eq!(b.labels, vec![0, 1]);
        // padding beyond item a's length is zero
        for t in 3..5 {
            let base = (t * 2) * 2;
            assert_eq!(&b.data[base..base + 2], &[0.0, 0.0]);
        }
    }

    #[test]
    fn last_partial_batch_kept() {
        let items: Vec<_> = (0..5).map(|i| item(&format!("s{i}"), i, 2, 3, i as f64)).collect();
        let batches = pad_and_batch(&items, 2).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].batch, 1);
        assert_eq!(batches[2].seq_ids, vec!["s4".to_string()]);
    }

    #[test]
    fn extract_item_round_trips() {
        let a = item("a", 0, 4, 3, 0.5);
        let b = item("b", 2, 7, 3, 9.0);
        let batches = pad_and_batch(&[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(batches[0].extract_item(0), a.rows);
        assert_eq!(batches[0].extract_item(1), b.rows);
    }

    #[test]
    fn zero_length_rejected() {
        assert!(SequenceItem::<f64>::new("z".into(), 0, 0, 3, vec![]).is_err());
    }
}
