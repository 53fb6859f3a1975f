//! Source-filter speaker simulator for desk-scale experiments.
//!
//! Each speaker has a pitch and a neutral-vowel formant set. An utterance is a
//! run of vowels drawn from a shared inventory; each vowel's formants are the
//! speaker's neutral formants scaled by the vowel's ratios, so vowel identity
//! is shared across speakers and the speaker shows through pitch and vocal
//! tract scale. The source is a jittered pulse train with a -12 dB/octave
//! glottal low-pass, and white noise is added at a fixed SNR.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, ManifestEntry, Split};
use super::wav::write_wav;
use crate::error::{Error, Result};

/// Half-width of the relative vocal tract scale drawn per speaker.
const TRACT_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpeakerSpec {
    pub pitch_hz: f64,
    /// `(center Hz, bandwidth Hz)` per resonance.
    pub formants: Vec<(f64, f64)>,
    /// Relative period-to-period pitch perturbation.
    pub jitter: f64,
    /// Relative pulse-to-pulse amplitude perturbation.
    pub shimmer: f64,
    pub seed: u64,
}

impl SynthSpeakerSpec {
    /// Random speaker with pitch in `pitch_range` and three neutral-vowel
    /// formants below 0.45 fs, scaled by a common vocal tract factor.
    pub fn random(seed: u64, pitch_range: (f64, f64), sample_rate: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = 0.45 * sample_rate as f64;
        let pitch_hz = rng.gen_range(pitch_range.0..=pitch_range.1);
        // One vocal tract length scale per speaker, small per-formant spread.
        let tract: f64 = rng.gen_range(1.0 - TRACT_SPREAD..1.0 + TRACT_SPREAD);
        let formants = [500.0, 1500.0, 2500.0]
            .iter()
            .map(|&f| {
                let f = f * tract * rng.gen_range(0.97..1.03);
                (f.min(cap), rng.gen_range(50.0..150.0))
            })
            .collect();
        Self {
            pitch_hz,
            formants,
            jitter: rng.gen_range(0.005..0.02),
            shimmer: rng.gen_range(0.02..0.08),
            seed,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(80.0..=300.0).contains(&self.pitch_hz) {
            return Err(Error::InvalidParameter(format!("pitch {} Hz outside [80, 300]", self.pitch_hz)));
        }
        if let Some(&(f, _)) = self.formants.iter().find(|(f, _)| *f >= sample_rate as f64 / 2.0) {
            return Err(Error::InvalidParameter(format!("formant {f} Hz at or above Nyquist")));
        }
        Ok(())
    }
}

/// Two-pole resonator with unity gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sample_rate: f64) -> Self {
        let r = (-PI * bandwidth / sample_rate).exp();
        let c = -r * r;
        let b = 2.0 * r * (2.0 * PI * freq / sample_rate).cos();
        Self {
            a: 1.0 - b - c,
            b,
            c,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Formant ratios to a neutral vowel, roughly /a/, /i/, /u/, /e/, /o/ and schwa.
const VOWELS: [[f64; 3]; 6] = [
    [1.46, 0.73, 0.98],
    [0.54, 1.53, 1.20],
    [0.60, 0.58, 0.90],
    [1.06, 1.23, 0.99],
    [1.14, 0.56, 0.96],
    [1.00, 1.00, 1.00],
];

/// Renders one utterance of `spec` with white noise at `snr_db`. The result is
/// peak-normalized to 0.9.
pub fn synthesize_utterance(
    spec: &SynthSpeakerSpec,
    seconds: f64,
    sample_rate: u32,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let fs = sample_rate as f64;
    let n = (seconds * fs).round() as usize;
    let f0 = spec.pitch_hz * (1.0 + rng.gen_range(-0.02..0.02));
    // Declination over the utterance plus a slow intonation wave.
    let slope = rng.gen_range(-0.05..0.0);
    let tone_rate = rng.gen_range(1.0..3.0);
    let tone_depth = rng.gen_range(0.01..0.03);
    let tone_phase = rng.gen_range(0.0..2.0 * PI);
    let cap = 0.45 * fs;

    let mut glottis = Resonator::new(0.0, 100.0, fs);
    let mut formants: Vec<Resonator> = Vec::new();
    let mut out = Vec::with_capacity(n);
    let mut phase = rng.gen_range(0.0..1.0);
    let mut period_scale = 1.0;
    let mut segment_end = 0;
    for i in 0..n {
        if i >= segment_end {
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            let next: Vec<Resonator> = spec
                .formants
                .iter()
                .zip(vowel.iter().chain(std::iter::repeat(&1.0)))
                .map(|(&(f, bw), ratio)| {
                    let f = (f * ratio * (1.0 + rng.gen_range(-0.05..0.05))).min(cap);
                    Resonator::new(f, bw, fs)
                })
                .collect();
            // Keep filter state across segments to avoid clicks.
            formants = if formants.is_empty() {
                next
            } else {
                next.into_iter()
                    .zip(&formants)
                    .map(|(mut r, old)| {
                        r.y1 = old.y1;
                        r.y2 = old.y2;
                        r
                    })
                    .collect()
            };
            segment_end = i + (rng.gen_range(0.12..0.3) * fs) as usize;
        }
        let t = i as f64 / fs;
        let contour = 1.0 + slope * t / seconds.max(1e-9) + tone_depth * (2.0 * PI * tone_rate * t + tone_phase).sin();
        let inst = f0 * contour * period_scale;
        phase += inst / fs;
        let mut src = 0.0;
        if phase >= 1.0 {
            phase -= 1.0;
            src = 1.0 + spec.shimmer * rng.gen_range(-1.0..1.0);
            period_scale = 1.0 + spec.jitter * rng.gen_range(-1.0..1.0);
        }
        let mut y = glottis.step(src * 50.0);
        for r in &mut formants {
            y = r.step(y);
        }
        out.push(y);
    }
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    // Uniform noise on [-a, a] has variance a^2 / 3.
    let a = rms * 10f64.powf(-snr_db / 20.0) * 3f64.sqrt();
    for v in &mut out {
        *v += a * rng.gen_range(-1.0..1.0);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    /// Speakers with train and test material.
    pub speakers: usize,
    pub train_utts: usize,
    pub test_utts: usize,
    /// Extra speakers that only provide impostor utterances.
    pub impostor_speakers: usize,
    pub impostor_utts: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub pitch_range: (f64, f64),
    /// Additive white noise level relative to the voiced signal, in dB.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            speakers: 10,
            train_utts: 8,
            test_utts: 4,
            impostor_speakers: 5,
            impostor_utts: 4,
            seconds: 2.0,
            sample_rate: 4000,
            pitch_range: (100.0, 250.0),
            snr_db: 15.0,
            seed: 7,
        }
    }
}

fn speaker_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64 + 1)
}

/// Speaker parameters the corpus generator uses for `index`.
///
/// Pitches are stratified: the range is cut into one slot per speaker
/// (impostors included), slots are assigned by a seeded shuffle, and each
/// pitch is drawn from the middle half of its slot.
pub fn corpus_speaker(opts: &SynthOptions, index: usize) -> SynthSpeakerSpec {
    let total = (opts.speakers + opts.impostor_speakers).max(index + 1);
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51_07));
    let seed = speaker_seed(opts.seed, index);
    let mut spec = SynthSpeakerSpec::random(seed, opts.pitch_range, opts.sample_rate);
    let (lo, hi) = opts.pitch_range;
    let width = (hi - lo) / total as f64;
    let u: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x9_17C4).gen_range(0.25..0.75);
    spec.pitch_hz = lo + (slots[index] as f64 + u) * width;
    spec
}

/// Writes `spkNN/<split>_MM.wav` files and `manifest.csv` under `out_dir`.
pub fn synth_corpus(opts: &SynthOptions, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if opts.speakers < 2 {
        return Err(Error::InvalidParameter("need at least two speakers".into()));
    }
    if opts.seconds.is_nan() || opts.seconds <= 0.0 {
        return Err(Error::InvalidParameter("utterance length must be positive".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    let total = opts.speakers + opts.impostor_speakers;
    for s in 0..total {
        let spec = corpus_speaker(opts, s);
        spec.validate(opts.sample_rate)?;
        let speaker_id = format!("spk{s:02}");
        let dir = out_dir.join(&speaker_id);
        std::fs::create_dir_all(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED);
        let plan: Vec<(Split, usize)> = if s < opts.speakers {
            vec![(Split::Train, opts.train_utts), (Split::Test, opts.test_utts)]
        } else {
            vec![(Split::Impostor, opts.impostor_utts)]
        };
        for (split, count) in plan {
            for u in 0..count {
                let samples = synthesize_utterance(&spec, opts.seconds, opts.sample_rate, opts.snr_db, &mut rng);
                let rel = format!("{speaker_id}/{split}_{u:02}.wav");
                write_wav(out_dir.join(&rel), &samples, opts.sample_rate)?;
                entries.push(ManifestEntry {
                    path: rel,
                    speaker_id: speaker_id.clone(),
                    split,
                });
            }
        }
    }
    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resonator_has_unity_dc_gain() {
        let mut r = Resonator::new(500.0, 80.0, 8000.0);
        let mut y = 0.0;
        for _ in 0..20000 {
            y = r.step(1.0);
        }
        assert!((y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_specs_are_admissible() {
        for seed in 0..50 {
            let s = SynthSpeakerSpec::random(seed, (100.0, 250.0), 8000);
            s.validate(8000).unwrap();
            assert!((100.0..=250.0).contains(&s.pitch_hz));
        }
        let mut bad = SynthSpeakerSpec::random(0, (100.0, 250.0), 8000);
        bad.pitch_hz = 50.0;
        assert!(bad.validate(8000).is_err());
    }

    #[test]
    fn corpus_pitches_are_spread() {
        let opts = SynthOptions {
            impostor_speakers: 5,
            ..Default::default()
        };
        let mut p: Vec<f64> = (0..15).map(|i| corpus_speaker(&opts, i).pitch_hz).collect();
        p.sort_by(f64::total_cmp);
        assert!(p.windows(2).all(|w| w[1] - w[0] >= 0.5 * 150.0 / 15.0 - 1e-9));
        assert!(p[0] >= 100.0 && p[14] <= 250.0);
    }

    #[test]
    fn same_seed_same_audio() {
        let s = SynthSpeakerSpec::random(3, (100.0, 250.0), 8000);
        let a = synthesize_utterance(&s, 0.5, 8000, 20.0, &mut ChaCha8Rng::seed_from_u64(1));
        let b = synthesize_utterance(&s, 0.5, 8000, 20.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4000);
        assert!(a.iter().all(|v| v.abs() <= 0.9 + 1e-12));
    }
}
