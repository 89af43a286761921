//! Dataset manifest: one CSV row per gesture sequence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 9] = [
    "sequence_id",
    "subject",
    "scenario",
    "label",
    "split",
    "frames_dir",
    "depth_dir",
    "mask_dir",
    "num_frames",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Stationary,
    Walking,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Stationary => write!(f, "stationary"),
            Scenario::Walking => write!(f, "walking"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Scenario::Stationary),
            "walking" => Ok(Scenario::Walking),
            other => Err(Error::Data(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
            Split::Unassigned => write!(f, ""),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

/// One gesture video: an ordered run of frames sharing a label.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub subject: String,
    pub scenario: Scenario,
    pub label: usize,
    pub split: Split,
    pub frames_dir: PathBuf,
    pub depth_dir: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
    pub num_frames: usize,
}

impl SequenceRecord {
    pub fn frame_file(&self, index: usize) -> PathBuf {
        self.frames_dir.join(format!("frame_{index:04}.png"))
    }
    pub fn depth_file(&self, index: usize) -> Option<PathBuf> {
        self.depth_dir
            .as_ref()
            .map(|d| d.join(format!("depth_{index:04}.png")))
    }
    pub fn mask_file(&self, index: usize) -> Option<PathBuf> {
        self.mask_dir
            .as_ref()
            .map(|d| d.join(format!("mask_{index:04}.png")))
    }
}

/// Loaded manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub rows: Vec<SequenceRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<SequenceRecord>, base_dir: PathBuf) -> Self {
        Manifest { rows, base_dir }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        {
            let headers = reader.headers()?;
            let expected: Vec<&str> = MANIFEST_HEADER.to_vec();
            let got: Vec<&str> = headers.iter().collect();
            if got != expected {
                return Err(Error::Data(format!(
                    "manifest header mismatch: expected {expected:?}, got {got:?}"
                )));
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").to_string();
            let opt_dir = |s: String| if s.is_empty() { None } else { Some(PathBuf::from(s)) };
            rows.push(SequenceRecord {
                sequence_id: field(0),
                subject: field(1),
                scenario: field(2).parse()?,
                label: field(3)
                    .parse()
                    .map_err(|_| Error::Data(format!("bad label '{}'", field(3))))?,
                split: field(4).parse()?,
                frames_dir: PathBuf::from(field(5)),
                depth_dir: opt_dir(field(6)),
                mask_dir: opt_dir(field(7)),
                num_frames: field(8)
                    .parse()
                    .map_err(|_| Error::Data(format!("bad num_frames '{}'", field(8))))?,
            });
        }
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Manifest { rows, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(MANIFEST_HEADER)?;
        for row in &self.rows {
            let dir_str = |d: &PathBuf| d.to_string_lossy().into_owned();
            writer.write_record([
                row.sequence_id.clone(),
                row.subject.clone(),
                row.scenario.to_string(),
                row.label.to_string(),
                row.split.to_string(),
                dir_str(&row.frames_dir),
                row.depth_dir.as_ref().map(dir_str).unwrap_or_default(),
                row.mask_dir.as_ref().map(dir_str).unwrap_or_default(),
                row.num_frames.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split_rows(&self, split: Split) -> Vec<&SequenceRecord> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn find(&self, sequence_id: &str) -> Option<&SequenceRecord> {
        self.rows.iter().find(|r| r.sequence_id == sequence_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<SequenceRecord> {
        vec![
            SequenceRecord {
                sequence_id: "c0_s000".into(),
                subject: "s0".into(),
                scenario: Scenario::Stationary,
                label: 0,
                split: Split::Train,
                frames_dir: PathBuf::from("frames/c0_s000"),
                depth_dir: Some(PathBuf::from("depth/c0_s000")),
                mask_dir: None,
                num_frames: 9,
            },
            SequenceRecord {
                sequence_id: "c1_s001".into(),
                subject: "s1".into(),
                scenario: Scenario::Walking,
                label: 1,
                split: Split::Unassigned,
                frames_dir: PathBuf::from("frames/c1_s001"),
                depth_dir: None,
                mask_dir: Some(PathBuf::from("masks/c1_s001")),
                num_frames: 12,
            },
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let manifest = Manifest::new(sample_rows(), dir.path().to_path_buf());
        manifest.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.rows.len(), 2);
        assert_eq!(loaded.rows[0].sequence_id, "c0_s000");
        assert_eq!(loaded.rows[0].scenario, Scenario::Stationary);
        assert_eq!(loaded.rows[1].split, Split::Unassigned);
        assert!(loaded.rows[1].depth_dir.is_none());
        assert_eq!(
            loaded.rows[1].mask_file(3).unwrap(),
            PathBuf::from("masks/c1_s001/mask_0003.png")
        );
    }

    #[test]
    fn rejects_foreign_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,label\n1,2\n").unwrap();
        assert!(Manifest::load(&path).is_err());
    }
}
