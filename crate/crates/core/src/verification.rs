//! Speaker verification: d-vector and posterior scoring, trial lists, EER.
//!
//! Scores are similarities throughout: higher means more likely genuine, and
//! a trial is accepted when `score >= threshold`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{chunk, ChunkGeometry, ChunkMode, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::neuralnet::{Mode, Network, Tensor};
use crate::trainer::average_and_vote;

#[derive(Debug, Clone, PartialEq)]
pub struct DVector {
    pub values: Vec<f64>,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl DVector {
    pub fn new(values: Vec<f64>, speaker_id: impl Into<String>, utterance_id: impl Into<String>) -> Result<Self> {
        let d = Self {
            values,
            speaker_id: speaker_id.into(),
            utterance_id: utterance_id.into(),
        };
        if !d.values.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateEmbedding(format!("non-finite d-vector for `{}`", d.utterance_id)));
        }
        if d.norm() == 0.0 {
            return Err(Error::DegenerateEmbedding(format!("zero d-vector for `{}`", d.utterance_id)));
        }
        Ok(d)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn utterance_batch(u: &Utterance, geometry: ChunkGeometry) -> Result<Tensor> {
    let chunks = chunk(&u.samples, geometry, ChunkMode::Inference)?;
    Tensor::new(vec![chunks.len(), geometry.window], chunks.concat())
}

/// Mean of the last hidden layer over all chunks of `utterance`.
pub fn extract_dvector(net: &mut Network, utterance: &Utterance, geometry: ChunkGeometry) -> Result<DVector> {
    let h = net.embed(&utterance_batch(utterance, geometry)?)?;
    DVector::new(mean_rows(&h), &utterance.speaker_id, &utterance.utterance_id)
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let n = t.batch();
    let mut m = vec![0.0; t.item_len()];
    for i in 0..n {
        m.iter_mut().zip(t.item(i)).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= n as f64);
    m
}

/// `a·b / (|a| |b|)`.
pub fn cosine_score(a: &DVector, b: &DVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::Shape(format!(
            "d-vectors differ in width ({} vs {})",
            a.values.len(),
            b.values.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm d-vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Sentence-averaged posterior of `claimed_class`.
pub fn posterior_score(
    net: &mut Network,
    utterance: &Utterance,
    claimed_class: usize,
    geometry: ChunkGeometry,
) -> Result<f64> {
    let p = net.forward(&utterance_batch(utterance, geometry)?, Mode::Eval)?;
    let (_, mean) = average_and_vote(&p)?;
    mean.get(claimed_class).copied().ok_or_else(|| {
        Error::InvalidParameter(format!("claimed class {claimed_class} outside {} classes", mean.len()))
    })
}

/// Per-speaker enrollment vector: mean of the speaker's utterance d-vectors,
/// renormalized to unit length.
pub fn enroll(net: &mut Network, utterances: &[&Utterance], geometry: ChunkGeometry) -> Result<BTreeMap<String, DVector>> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for u in utterances {
        let d = extract_dvector(net, u, geometry)?;
        let e = sums
            .entry(u.speaker_id.clone())
            .or_insert_with(|| (vec![0.0; d.values.len()], 0));
        e.0.iter_mut().zip(&d.values).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(spk, (sum, n))| {
            let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit = mean.iter().map(|v| v / norm).collect();
            Ok((spk.clone(), DVector::new(unit, spk, "enrollment")?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Genuine,
    Impostor,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Genuine => "genuine",
            TrialLabel::Impostor => "impostor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub claimed_speaker: String,
    /// Index into the utterance list the trial list was built from.
    pub utterance: usize,
    pub utterance_id: String,
    pub label: TrialLabel,
    pub score: Option<f64>,
}

/// One genuine trial plus `impostors_per_genuine` impostor trials for every
/// genuine test sentence.
///
/// `genuine` and `impostor_pool` hold `(utterance index, utterance id,
/// speaker)`; impostor utterances are drawn without replacement when the
/// pool is large enough.
pub fn make_trials(
    genuine: &[(usize, String, String)],
    impostor_pool: &[(usize, String, String)],
    impostors_per_genuine: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    if impostor_pool.is_empty() {
        return Err(Error::Config("impostor pool is empty".into()));
    }
    if let Some((_, id, spk)) = impostor_pool
        .iter()
        .find(|(_, _, s)| genuine.iter().any(|(_, _, g)| g == s))
    {
        return Err(Error::Config(format!(
            "impostor utterance `{id}` belongs to enrolled speaker `{spk}`"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(genuine.len() * (impostors_per_genuine + 1));
    for (idx, id, spk) in genuine {
        trials.push(Trial {
            claimed_speaker: spk.clone(),
            utterance: *idx,
            utterance_id: id.clone(),
            label: TrialLabel::Genuine,
            score: None,
        });
        let picks: Vec<&(usize, String, String)> = if impostor_pool.len() >= impostors_per_genuine {
            impostor_pool.choose_multiple(&mut rng, impostors_per_genuine).collect()
        } else {
            (0..impostors_per_genuine)
                .map(|_| &impostor_pool[rng.gen_range(0..impostor_pool.len())])
                .collect()
        };
        for (i_idx, i_id, _) in picks {
            trials.push(Trial {
                claimed_speaker: spk.clone(),
                utterance: *i_idx,
                utterance_id: i_id.clone(),
                label: TrialLabel::Impostor,
                score: None,
            });
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EerReport {
    pub eer_percent: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl EerReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Equal error rate in percent.
///
/// Thresholds are the sorted unique scores plus `+inf`. For each, FAR is the
/// fraction of impostors with `score >= t` and FRR the fraction of genuine
/// trials with `score < t`. At the first threshold where `FAR <= FRR` the two
/// curves are linearly interpolated against the previous threshold and the
/// crossing value is returned.
pub fn equal_error_rate(scores: &[f64], genuine: &[bool]) -> Result<EerReport> {
    if scores.len() != genuine.len() {
        return Err(Error::InvalidTrialSet(format!(
            "{} scores for {} labels",
            scores.len(),
            genuine.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidTrialSet(format!("non-finite score {s}")));
    }
    let n_gen = genuine.iter().filter(|&&g| g).count();
    let n_imp = genuine.len() - n_gen;
    if n_gen == 0 || n_imp == 0 {
        return Err(Error::InvalidTrialSet(format!(
            "need both classes, got {n_gen} genuine and {n_imp} impostor"
        )));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(genuine.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk thresholds upward; below the current threshold lie `gen_below`
    // genuine and `imp_below` impostor scores.
    let (mut gen_below, mut imp_below) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None; // (threshold, far, frr)
    let mut i = 0;
    loop {
        let t = if i < pairs.len() { pairs[i].0 } else { f64::INFINITY };
        let far = (n_imp - imp_below) as f64 / n_imp as f64;
        let frr = gen_below as f64 / n_gen as f64;
        if far <= frr {
            let (eer, thr) = match prev {
                None => (far, t),
                Some((pt, pfar, pfrr)) => {
                    let d0 = pfar - pfrr;
                    let d1 = far - frr;
                    let lambda = if d0 == d1 { 1.0 } else { d0 / (d0 - d1) };
                    let eer = pfar + lambda * (far - pfar);
                    let thr = if t.is_finite() { pt + lambda * (t - pt) } else { pt };
                    (eer, thr)
                }
            };
            return Ok(EerReport {
                eer_percent: 100.0 * eer,
                threshold: thr,
                n_genuine: n_gen,
                n_impostor: n_imp,
            });
        }
        prev = Some((t, far, frr));
        if i >= pairs.len() {
            unreachable!("FAR reaches 0 at +inf");
        }
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                gen_below += 1;
            } else {
                imp_below += 1;
            }
            i += 1;
        }
    }
}

pub fn trials_to_csv(trials: &[Trial]) -> String {
    let mut s = String::from("claimed_speaker,utterance,label,score\n");
    for t in trials {
        let score = t.score.map(|v| format!("{v:.9}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", t.claimed_speaker, t.utterance_id, t.label.as_str(), score);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    DVector,
    Posterior,
}

impl std::str::FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dvector" | "d-vector" => Ok(Scoring::DVector),
            "posterior" | "dnn-class" => Ok(Scoring::Posterior),
            other => Err(Error::Config(format!("unknown scoring `{other}` (expected dvector|posterior)"))),
        }
    }
}

/// Test utterances of the corpus are the genuine sentences; impostor
/// utterances come from the impostor split. Returns scored trials and the EER.
pub fn run_verification(
    net: &mut Network,
    corpus: &Corpus,
    geometry: ChunkGeometry,
    impostors_per_genuine: usize,
    seed: u64,
    scoring: Scoring,
) -> Result<(Vec<Trial>, EerReport)> {
    // Utterance index space: test utterances first, then impostors.
    let mut utts: Vec<&Utterance> = corpus.test.iter().map(|(u, _)| u).collect();
    utts.extend(corpus.impostor.iter());
    let n_test = corpus.test.len();
    let key = |(i, u): (usize, &&Utterance)| (i, u.utterance_id.clone(), u.speaker_id.clone());
    let genuine: Vec<_> = utts[..n_test].iter().enumerate().map(key).collect();
    let pool: Vec<_> = utts[n_test..]
        .iter()
        .enumerate()
        .map(|(i, u)| key((i + n_test, u)))
        .collect();
    let mut trials = make_trials(&genuine, &pool, impostors_per_genuine, seed)?;

    match scoring {
        Scoring::DVector => {
            let models = enroll(net, &corpus.enrollment(), geometry)?;
            let mut cache: BTreeMap<usize, DVector> = BTreeMap::new();
            for t in &mut trials {
                if let Entry::Vacant(e) = cache.entry(t.utterance) {
                    e.insert(extract_dvector(net, utts[t.utterance], geometry)?);
                }
                let model = models.get(&t.claimed_speaker).ok_or_else(|| {
                    Error::Config(format!("no enrollment data for `{}`", t.claimed_speaker))
                })?;
                t.score = Some(cosine_score(model, &cache[&t.utterance])?);
            }
        }
        Scoring::Posterior => {
            let classes: BTreeMap<&str, usize> =
                corpus.classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for t in &mut trials {
                if let Entry::Vacant(e) = cache.entry(t.utterance) {
                    let p = net.forward(&utterance_batch(utts[t.utterance], geometry)?, Mode::Eval)?;
                    e.insert(average_and_vote(&p)?.1);
                }
                let c = *classes.get(t.claimed_speaker.as_str()).ok_or_else(|| {
                    Error::InvalidParameter(format!("claimed speaker `{}` is not a training class", t.claimed_speaker))
                })?;
                t.score = Some(cache[&t.utterance][c]);
            }
        }
    }
    let scores: Vec<f64> = trials.iter().map(|t| t.score.expect("scored above")).collect();
    let labels: Vec<bool> = trials.iter().map(|t| t.label == TrialLabel::Genuine).collect();
    let report = equal_error_rate(&scores, &labels)?;
    Ok((trials, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector {
        DVector::new(v.to_vec(), "s", "u").unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = dv(&[1.0, 2.0, -0.5]);
        assert_abs_diff_eq!(cosine_score(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_score(&dv(&[1.0, 0.0]), &dv(&[0.0, 3.0])).unwrap(), 0.0);
        let neg = dv(&[-1.0, -2.0, 0.5]);
        assert_abs_diff_eq!(cosine_score(&a, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(DVector::new(vec![0.0; 3], "s", "u"), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn eer_examples() {
        let r = equal_error_rate(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(r.eer_percent, 0.0);
        assert_eq!((r.n_genuine, r.n_impostor), (2, 2));
        let r = equal_error_rate(&[0.3, 0.7], &[true, false]).unwrap();
        assert_eq!(r.eer_percent, 100.0);
        assert!(matches!(
            equal_error_rate(&[0.3, 0.7], &[true, true]),
            Err(Error::InvalidTrialSet(_))
        ));
        let json = r.to_json();
        for field in ["eer_percent", "threshold", "n_genuine", "n_impostor"] {
            assert!(json.contains(field));
        }
    }

    fn ids(n: usize, spk: &str, offset: usize) -> Vec<(usize, String, String)> {
        (0..n).map(|i| (offset + i, format!("{spk}_{i}"), spk.to_string())).collect()
    }

    #[test]
    fn trial_ratio_and_determinism() {
        let mut genuine = ids(3, "a", 0);
        genuine.extend(ids(2, "b", 3));
        let pool = ids(20, "x", 5);
        let t = make_trials(&genuine, &pool, 10, 4).unwrap();
        assert_eq!(t.iter().filter(|t| t.label == TrialLabel::Genuine).count(), 5);
        assert_eq!(t.iter().filter(|t| t.label == TrialLabel::Impostor).count(), 50);
        assert_eq!(t, make_trials(&genuine, &pool, 10, 4).unwrap());
        assert!(matches!(make_trials(&genuine, &[], 10, 4), Err(Error::Config(_))));
        // small pool: sampling with replacement still yields the full ratio
        let t = make_trials(&genuine, &ids(3, "x", 5), 10, 4).unwrap();
        assert_eq!(t.len(), 55);
    }
}
