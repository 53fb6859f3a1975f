use crate::error::{Error, Result};

/// Window and hop, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub window: usize,
    pub stride: usize,
}

impl ChunkGeometry {
    pub fn from_ms(chunk_ms: f64, overlap_ms: f64, sample_rate: u32) -> Result<Self> {
        if !(chunk_ms > 0.0 && overlap_ms >= 0.0 && chunk_ms > overlap_ms) {
            return Err(Error::Config(format!(
                "chunk_ms ({chunk_ms}) must be positive and exceed overlap_ms ({overlap_ms})"
            )));
        }
        let fs = sample_rate as f64;
        let window = (chunk_ms * fs / 1000.0).round() as usize;
        let stride = ((chunk_ms - overlap_ms) * fs / 1000.0).round() as usize;
        if window == 0 || stride == 0 {
            return Err(Error::Config("chunk geometry rounds to zero samples".into()));
        }
        Ok(Self { window, stride })
    }

    /// `floor((len - window) / stride) + 1` for `len >= window`, else 0.
    pub fn count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.stride + 1
        }
    }
}

/// Training chunks need real audio; inference tolerates short input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    Train,
    Inference,
}

/// Fixed-grid windows over `samples`; a trailing partial window is dropped.
///
/// In inference mode an input shorter than one window yields a single
/// zero-padded chunk; in training mode it is an error.
pub fn chunk(samples: &[f64], geometry: ChunkGeometry, mode: ChunkMode) -> Result<Vec<Vec<f64>>> {
    let n = geometry.count(samples.len());
    if n == 0 {
        return match mode {
            ChunkMode::Train => Err(Error::EmptyResult(format!(
                "utterance of {} samples is shorter than one {}-sample chunk",
                samples.len(),
                geometry.window
            ))),
            ChunkMode::Inference => {
                let mut padded = samples.to_vec();
                padded.resize(geometry.window, 0.0);
                Ok(vec![padded])
            }
        };
    }
    Ok((0..n)
        .map(|i| samples[i * geometry.stride..i * geometry.stride + geometry.window].to_vec())
        .collect())
}
