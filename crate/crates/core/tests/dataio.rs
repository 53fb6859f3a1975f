use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sincnet::dataio::*;

fn speaker(pitch_hz: f64) -> SynthSpeakerSpec {
    SynthSpeakerSpec {
        pitch_hz,
        formants: vec![(500.0, 80.0), (1500.0, 100.0), (2500.0, 120.0)],
        jitter: 0.01,
        shimmer: 0.05,
        seed: 1,
    }
}

/// Magnitude of the plain DFT sum at `hz`.
fn dft_mag(x: &[f64], hz: f64, fs: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let a = 2.0 * PI * hz * n as f64 / fs;
        re += v * a.cos();
        im -= v * a.sin();
    }
    re.hypot(im)
}

/// Strongest 1 Hz bin in `[lo, hi]`.
fn peak_hz(x: &[f64], fs: f64, lo: usize, hi: usize) -> f64 {
    (lo..=hi)
        .map(|f| (f as f64, dft_mag(x, f as f64, fs)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn synthetic_pitch_shows_in_the_spectrum() {
    let fs = 8000.0;
    for pitch in [100.0, 220.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = synthesize_utterance(&speaker(pitch), 1.0, 8000, 30.0, &mut rng);
        let lo = (0.6 * pitch) as usize;
        let hi = (1.4 * pitch) as usize;
        let p = peak_hz(&x, fs, lo, hi);
        assert!((p - pitch).abs() <= 0.06 * pitch, "pitch {pitch}: peak at {p} Hz");
        // harmonic energy dominates the gaps between harmonics
        let on = dft_mag(&x, p, fs) + dft_mag(&x, 2.0 * p, fs);
        let off = dft_mag(&x, 1.5 * p, fs) + dft_mag(&x, 2.5 * p, fs);
        assert!(on > 3.0 * off, "pitch {pitch}: {on} vs {off}");
    }
}

#[test]
fn corpus_layout_and_determinism() {
    let opts = SynthOptions {
        speakers: 3,
        train_utts: 2,
        test_utts: 1,
        impostor_speakers: 1,
        impostor_utts: 1,
        seconds: 0.5,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth_corpus(&opts, a.path()).unwrap();
    synth_corpus(&opts, b.path()).unwrap();
    assert_eq!(ma.entries.len(), 3 * 3 + 1);
    for e in &ma.entries {
        let x = std::fs::read(a.path().join(&e.path)).unwrap();
        let y = std::fs::read(b.path().join(&e.path)).unwrap();
        assert_eq!(x, y, "{}", e.path);
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.csv")).unwrap(),
        std::fs::read(b.path().join("manifest.csv")).unwrap()
    );
    let reloaded = Manifest::load(a.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded.entries, ma.entries);
    let corpus = Corpus::load(&reloaded, opts.sample_rate).unwrap();
    assert_eq!(corpus.classes.len(), 3);
    assert_eq!((corpus.train.len(), corpus.test.len(), corpus.impostor.len()), (6, 3, 1));
    assert!(corpus.train.iter().all(|(u, _)| u.samples.len() == 2000));
}

#[test]
fn wav_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..5000).map(|_| rng.gen_range(-0.99..0.99)).collect();
    write_wav(&p, &x, 16000).unwrap();
    let u = read_wav(&p, Some(16000)).unwrap();
    assert_eq!(u.samples.len(), x.len());
    assert!(x.iter().zip(&u.samples).all(|(a, b)| (a - b).abs() <= 0.5 / 32768.0 + 1e-15));
    // a second pass is exact
    write_wav(&p, &u.samples, 16000).unwrap();
    assert_eq!(read_wav(&p, None).unwrap().samples, u.samples);
    assert!(read_wav(&p, Some(8000)).is_err());
}

#[test]
fn manifest_rejects_test_speaker_unseen_in_training() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "path,speaker_id,split\na.wav,s1,train\nb.wav,s2,test\n").unwrap();
    let m = Manifest::load(&p);
    assert!(m.is_err() || m.unwrap().validate().is_err());
}

/// Every start offset that fits, stepping by the stride.
fn brute_force_chunks(len: usize, g: ChunkGeometry) -> usize {
    let mut n = 0;
    let mut start = 0;
    while start + g.window <= len {
        n += 1;
        start += g.stride;
    }
    n
}

proptest! {
    #[test]
    fn chunk_count_matches_brute_force(len in 0usize..5000, window in 1usize..800, stride in 1usize..800) {
        let g = ChunkGeometry { window, stride };
        prop_assert_eq!(g.count(len), brute_force_chunks(len, g));
        let x: Vec<f64> = (0..len).map(|i| i as f64).collect();
        match chunk(&x, g, ChunkMode::Train) {
            Ok(c) => {
                prop_assert_eq!(c.len(), g.count(len));
                for (i, w) in c.iter().enumerate() {
                    prop_assert_eq!(w[0], (i * stride) as f64);
                    prop_assert_eq!(w.len(), window);
                }
            }
            Err(_) => prop_assert_eq!(g.count(len), 0),
        }
    }
}
