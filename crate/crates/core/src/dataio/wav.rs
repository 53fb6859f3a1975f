use std::path::Path;

use crate::error::{Error, Result};

/// One pre-trimmed recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Samples in `[-1, 1)`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl Utterance {
    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }

    /// Scales so the largest magnitude equals `peak`. Silent input is left as is.
    pub fn peak_normalize(&mut self, peak: f64) {
        let max = self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            let g = peak / max;
            self.samples.iter_mut().for_each(|v| *v *= g);
        }
    }
}

fn unsupported(field: &'static str, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        field,
        detail: detail.into(),
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file. Samples are scaled by 1/32768.
///
/// With `expected_rate` set, a file at any other rate is rejected.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Utterance> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => unsupported("container", format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(unsupported("codec", format!("{}: floating-point samples", path.display())));
    }
    if spec.bits_per_sample != 16 {
        return Err(unsupported(
            "bits_per_sample",
            format!("{}: {} bits, expected 16", path.display(), spec.bits_per_sample),
        ));
    }
    if spec.channels != 1 {
        return Err(unsupported(
            "channels",
            format!("{}: {} channels, expected 1", path.display(), spec.channels),
        ));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(unsupported(
                "sample_rate",
                format!("{}: {} Hz, expected {rate} Hz", path.display(), spec.sample_rate),
            ));
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| unsupported("data", format!("{}: {e}", path.display())))?;
    let utterance_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Utterance {
        samples,
        sample_rate: spec.sample_rate,
        speaker_id: String::new(),
        utterance_id,
    })
}

/// Writes mono 16-bit PCM; values are rounded to the nearest `k/32768` and clipped.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => unsupported("container", other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(map)?;
    }
    w.finalize().map_err(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_wav(&p, &[0.0; 10], 8000).unwrap();
        let u = read_wav(&p, Some(8000)).unwrap();
        assert!(u.samples.iter().all(|&v| v == 0.0));
        assert_eq!(u.utterance_id, "z");

        write_wav(&p, &[0.5], 8000).unwrap();
        assert_eq!(read_wav(&p, None).unwrap().samples, vec![0.5]);
    }

    #[test]
    fn rejects_wrong_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        match read_wav(&p, None) {
            Err(Error::UnsupportedFormat { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("expected channel error, got {other:?}"),
        }

        write_wav(&p, &[0.1], 16000).unwrap();
        match read_wav(&p, Some(8000)) {
            Err(Error::UnsupportedFormat { field, .. }) => assert_eq!(field, "sample_rate"),
            other => panic!("expected rate error, got {other:?}"),
        }

        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.0f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p, None), Err(Error::UnsupportedFormat { field: "codec", .. })));
    }

    #[test]
    fn peak_normalization() {
        let mut u = Utterance {
            samples: vec![0.1, -0.5, 0.25],
            sample_rate: 8000,
            speaker_id: String::new(),
            utterance_id: String::new(),
        };
        u.peak_normalize(0.95);
        assert!((u.samples[1] + 0.95).abs() < 1e-15);
    }
}
