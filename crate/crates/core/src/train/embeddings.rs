//! Per-sequence embedding archive.
//!
//! Layout (little-endian): `SSAREMB1` magic, u32 sequence count, u32
//! embedding width, then per sequence: u16 id length, UTF-8 id, u32 label,
//! u32 length T, and T x width f32 values; a CRC32 over every preceding
//! byte closes the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSAREMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub id: String,
    pub label: usize,
    pub len: usize,
    /// `len * dim` row-major values.
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingArchive {
    pub dim: usize,
    pub sequences: Vec<EmbeddingSequence>,
}

impl EmbeddingArchive {
    pub fn new(dim: usize) -> Self {
        EmbeddingArchive { dim, sequences: Vec::new() }
    }

    pub fn push(&mut self, seq: EmbeddingSequence) -> Result<()> {
        if seq.values.len() != seq.len * self.dim {
            return Err(Error::Checkpoint(format!(
                "sequence '{}': {} values for {} rows of {}",
                seq.id,
                seq.values.len(),
                seq.len,
                self.dim
            )));
        }
        self.sequences.push(seq);
        Ok(())
    }

    pub fn find(&self, id: &str) -> Option<&EmbeddingSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&(self.sequences.len() as u32).to_le_bytes());
        body.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for seq in &self.sequences {
            let id = seq.id.as_bytes();
            if id.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("sequence id too long: '{}'", seq.id)));
            }
            body.extend_from_slice(&(id.len() as u16).to_le_bytes());
            body.extend_from_slice(id);
            body.extend_from_slice(&(seq.label as u32).to_le_bytes());
            body.extend_from_slice(&(seq.len as u32).to_le_bytes());
            for &v in &seq.values {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&body);
        let mut writer = BufWriter::new(File::create(path)?);
        writer.write_all(&body)?;
        writer.write_all(&crc.to_le_bytes())?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingArchive> {
        let mut raw = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
        if raw.len() < MAGIC.len() + 4 + 4 + 4 {
            return Err(Error::Checkpoint("embedding archive truncated".into()));
        }
        let (body, crc_bytes) = raw.split_at(raw.len() - 4);
        let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checkpoint(format!(
                "embedding archive CRC mismatch: stored {stored:08x}, computed {computed:08x}"
            )));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::Checkpoint("embedding archive truncated".into()));
            }
            let out = &body[*pos..*pos + n];
            *pos += n;
            Ok(out)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not an embedding archive)".into()));
        }
        let count = {
            let b = take(&mut pos, 4)?;
            u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
        };
        let dim = {
            let b = take(&mut pos, 4)?;
            u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
        };
        let mut archive = EmbeddingArchive::new(dim);
        for _ in 0..count {
            let id_len = {
                let b = take(&mut pos, 2)?;
                u16::from_le_bytes([b[0], b[1]]) as usize
            };
            let id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("sequence id is not UTF-8".into()))?;
            let label = {
                let b = take(&mut pos, 4)?;
                u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
            };
            let len = {
                let b = take(&mut pos, 4)?;
                u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
            };
            let data = take(&mut pos, len * dim * 4)?;
            let values: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.push(EmbeddingSequence { id, label, len, values })?;
        }
        if pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes in embedding archive".into()));
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingArchive {
        let mut a = EmbeddingArchive::new(3);
        a.push(EmbeddingSequence {
            id: "c0_s000".into(),
            label: 0,
            len: 2,
            values: vec![0.1, -0.2, 0.3, 1.0, 2.0, -3.0],
        })
        .unwrap();
        a.push(EmbeddingSequence {
            id: "c1_s001".into(),
            label: 1,
            len: 1,
            values: vec![9.0, 8.0, 7.0],
        })
        .unwrap();
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.semb");
        let p2 = dir.path().join("b.semb");
        let archive = sample();
        archive.save(&p1).unwrap();
        let loaded = EmbeddingArchive::load(&p1).unwrap();
        assert_eq!(loaded, archive);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.semb");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = EmbeddingArchive::load(&path).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let mut a = EmbeddingArchive::new(4);
        assert!(a
            .push(EmbeddingSequence {
                id: "bad".into(),
                label: 0,
                len: 2,
                values: vec![0.0; 7],
            })
            .is_err());
    }
}
