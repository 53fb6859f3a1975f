use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::wav::{read_wav, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Enroll,
    Impostor,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Enroll => "enroll",
            Split::Impostor => "impostor",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "enroll" => Ok(Split::Enroll),
            "impostor" => Ok(Split::Impostor),
            other => Err(Error::Csv(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub speaker_id: String,
    pub split: Split,
}

/// `path,speaker_id,split` rows. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "speaker_id", "split"] {
            return Err(Error::Csv(format!(
                "{}: expected header `path,speaker_id,split`",
                path.display()
            )));
        }
        let entries = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        Ok(Self {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Csv(e.to_string()))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).map(|e| e.speaker_id.as_str()).collect()
    }

    /// Training speakers in sorted order mapped to class indices.
    pub fn class_map(&self) -> BTreeMap<String, usize> {
        self.speakers(Split::Train)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i))
            .collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads an entry's audio, tags it with its speaker and manifest path, and
/// peak-normalizes to 0.95.
    pub fn load_utterance(&self, entry: &ManifestEntry, sample_rate: u32) -> Result<Utterance> {
        let mut u = read_wav(self.resolve(entry), Some(sample_rate))?;
        u.speaker_id = entry.speaker_id.clone();
        u.utterance_id = entry.path.clone();
        u.peak_normalize(0.95);
        Ok(u)
    }

    /// Split consistency: test speakers are known, train/test files are
    /// disjoint, impostor speakers never appear in training.
    pub fn validate(&self) -> Result<()> {
        let train = self.speakers(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("manifest has no training entries".into()));
        }
        for s in self.speakers(Split::Test) {
            if !train.contains(s) {
                return Err(Error::Config(format!("test speaker `{s}` has no training data")));
            }
        }
        for s in self.speakers(Split::Impostor) {
            if train.contains(s) {
                return Err(Error::Config(format!("impostor speaker `{s}` also appears in training")));
            }
        }
        let train_paths: BTreeSet<&str> = self.split(Split::Train).map(|e| e.path.as_str()).collect();
        for e in self.split(Split::Test) {
            if train_paths.contains(e.path.as_str()) {
                return Err(Error::Config(format!("`{}` is in both train and test", e.path)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, spk: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            speaker_id: spk.into(),
            split,
        }
    }

    #[test]
    fn csv_round_trip_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            entries: vec![
                entry("b/1.wav", "spk01", Split::Train),
                entry("a/1.wav", "spk00", Split::Train),
                entry("a/2.wav", "spk00", Split::Test),
                entry("c/1.wav", "imp", Split::Impostor),
            ],
            root: dir.path().to_path_buf(),
        };
        let p = dir.path().join("manifest.csv");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,speaker_id,split\n"));
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.class_map()["spk00"], 0);
        back.validate().unwrap();
    }

    #[test]
    fn validation_catches_overlaps() {
        let m = Manifest {
            entries: vec![
                entry("a.wav", "s0", Split::Train),
                entry("b.wav", "s0", Split::Impostor),
            ],
            root: PathBuf::new(),
        };
        assert!(m.validate().is_err());
        let m = Manifest {
            entries: vec![entry("a.wav", "s0", Split::Train), entry("a.wav", "s0", Split::Test)],
            root: PathBuf::new(),
        };
        assert!(m.validate().is_err());
        let m = Manifest {
            entries: vec![entry("a.wav", "s0", Split::Train), entry("b.wav", "s9", Split::Test)],
            root: PathBuf::new(),
        };
        assert!(m.validate().is_err());
    }
}
