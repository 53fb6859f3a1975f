use super::chunk::{chunk, ChunkGeometry, ChunkMode};
use super::manifest::{Manifest, Split};
use super::wav::Utterance;
use crate::error::{Error, Result};

/// Utterances of a manifest grouped by split, with class labels for the
/// training speakers.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub train: Vec<(Utterance, usize)>,
    pub test: Vec<(Utterance, usize)>,
    pub enroll: Vec<Utterance>,
    pub impostor: Vec<Utterance>,
    pub sample_rate: u32,
}

impl Corpus {
    pub fn load(manifest: &Manifest, sample_rate: u32) -> Result<Self> {
        manifest.validate()?;
        let map = manifest.class_map();
        let labelled = |split| -> Result<Vec<(Utterance, usize)>> {
            manifest
                .split(split)
                .map(|e| Ok((manifest.load_utterance(e, sample_rate)?, map[&e.speaker_id])))
                .collect()
        };
        let plain = |split| -> Result<Vec<Utterance>> {
            manifest.split(split).map(|e| manifest.load_utterance(e, sample_rate)).collect()
        };
        Ok(Self {
            classes: map.keys().cloned().collect(),
            train: labelled(Split::Train)?,
            test: labelled(Split::Test)?,
            enroll: plain(Split::Enroll)?,
            impostor: plain(Split::Impostor)?,
            sample_rate,
        })
    }

    /// Utterances used to build a speaker's enrollment d-vector: the enroll
    /// split when present, the training split otherwise.
    pub fn enrollment(&self) -> Vec<&Utterance> {
        if self.enroll.is_empty() {
            self.train.iter().map(|(u, _)| u).collect()
        } else {
            self.enroll.iter().collect()
        }
    }
}

/// Flat `[n, chunk_len]` chunk matrix with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSet {
    pub chunk_len: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    /// Index of the source utterance of every chunk.
    pub source: Vec<usize>,
}

impl ChunkSet {
    pub fn from_utterances(utts: &[(Utterance, usize)], geometry: ChunkGeometry, mode: ChunkMode) -> Result<Self> {
        let mut set = Self {
            chunk_len: geometry.window,
            data: Vec::new(),
            labels: Vec::new(),
            source: Vec::new(),
        };
        for (i, (u, label)) in utts.iter().enumerate() {
            for c in chunk(&u.samples, geometry, mode)? {
                set.data.extend(c);
                set.labels.push(*label);
                set.source.push(i);
            }
        }
        if set.labels.is_empty() {
            return Err(Error::EmptyResult("no chunks produced".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn chunk(&self, i: usize) -> &[f64] {
        &self.data[i * self.chunk_len..(i + 1) * self.chunk_len]
    }
}
