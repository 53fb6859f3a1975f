//! Audio ingestion, chunking, manifests, and the synthetic corpus.

pub mod chunk;
pub mod dataset;
pub mod manifest;
pub mod synth;
pub mod wav;

pub use chunk::{chunk, ChunkGeometry, ChunkMode};
pub use dataset::{ChunkSet, Corpus};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{corpus_speaker, synth_corpus, synthesize_utterance, SynthOptions, SynthSpeakerSpec};
pub use wav::{read_wav, write_wav, Utterance};
