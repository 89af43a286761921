//! Confusion matrix over gesture classes.

use crate::error::{Error, Result};

/// K x K count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        if true_class >= self.k || predicted >= self.k {
            return Err(Error::InvalidArgument(format!(
                "class ({true_class}, {predicted}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[true_class * self.k + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class * self.k..(true_class + 1) * self.k]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.count(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Per-class recall: `(samples, correct, recall)` per class.
    pub fn per_class(&self) -> Vec<(u64, u64, f64)> {
        (0..self.k)
            .map(|c| {
                let n = self.row_sum(c);
                let correct = self.count(c, c);
                let recall = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
                (n, correct, recall)
            })
            .collect()
    }

    /// CSV with a header row and header column of class indices
    /// (`k + 1` rows and columns in total).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 0..self.k {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for t in 0..self.k {
            out.push_str(&t.to_string());
            for p in 0..self.k {
                out.push_str(&format!(",{}", self.count(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_when_perfect() {
        let mut m = ConfusionMatrix::new(3);
        for c in 0..3 {
            for _ in 0..4 {
                m.record(c, c).unwrap();
            }
        }
        assert_eq!(m.accuracy(), 1.0);
        assert_eq!(m.trace(), 12);
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(m.count(t, p), if t == p { 4 } else { 0 });
            }
        }
    }

    #[test]
    fn row_sums_match_sample_counts() {
        let mut m = ConfusionMatrix::new(4);
        m.record(1, 1).unwrap();
        m.record(1, 2).unwrap();
        m.record(1, 3).unwrap();
        m.record(0, 0).unwrap();
        assert_eq!(m.row_sum(1), 3);
        assert_eq!(m.row_sum(0), 1);
        assert_eq!(m.total(), 4);
        assert!((m.accuracy() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut m = ConfusionMatrix::new(2);
        assert!(m.record(2, 0).is_err());
        assert!(m.record(0, 5).is_err());
    }

    #[test]
    fn csv_shape_and_sums() {
        let mut m = ConfusionMatrix::new(2);
        m.record(0, 1).unwrap();
        m.record(1, 1).unwrap();
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "true\\pred,0,1");
        assert_eq!(lines[1], "0,0,1");
        assert_eq!(lines[2], "1,0,1");
    }
}
