//! RMSprop training with cross-entropy, frame/sentence scoring, and epoch logs.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{chunk, ChunkGeometry, ChunkMode, ChunkSet, Utterance};
use crate::error::{Error, Result};
use crate::neuralnet::{save_network, Mode, Network, Param, Tensor};

/// RMSprop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 0.001,
            alpha: 0.95,
            epsilon: 1e-7,
        }
    }
}

/// `v <- α v + (1-α) g²`, `p <- p - lr g / (sqrt(v) + ε)`, element-wise.
pub fn rmsprop_update(hp: &RmsProp, param: &mut [f64], grad: &[f64], v: &mut [f64]) -> Result<()> {
    if param.len() != grad.len() || param.len() != v.len() {
        return Err(Error::Contract(format!(
            "rmsprop: parameter ({}), gradient ({}) and accumulator ({}) lengths differ",
            param.len(),
            grad.len(),
            v.len()
        )));
    }
    for ((p, &g), s) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
        *s = hp.alpha * *s + (1.0 - hp.alpha) * g * g;
        *p -= hp.lr * g / (s.sqrt() + hp.epsilon);
    }
    Ok(())
}

/// Squared-gradient accumulators, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hp: RmsProp,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(hp: RmsProp, net: &Network) -> Self {
        Self {
            hp,
            v: net.params().iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param)]) -> Result<()> {
        if params.len() != self.v.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.v.len(),
                params.len()
            )));
        }
        for ((_, p), v) in params.iter_mut().zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            rmsprop_update(&self.hp, p.value.data_mut(), &grad, v.data_mut())?;
        }
        Ok(())
    }
}

/// Mean negative log posterior of the true class, and the gradient with
/// respect to the pre-softmax logits, `(p - onehot) / frames`.
pub fn cross_entropy(posteriors: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match *posteriors.shape() {
        [n, k] if n == labels.len() && n > 0 => (n, k),
        _ => {
            return Err(Error::Shape(format!(
                "posteriors {:?} do not match {} labels",
                posteriors.shape(),
                labels.len()
            )))
        }
    };
    let mut loss = 0.0;
    let mut grad = posteriors.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
        }
        loss -= posteriors.item(i)[y].ln();
        grad.data_mut()[i * k + y] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= n as f64);
    Ok((loss / n as f64, grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Averages frame posteriors and votes for the most probable class.
pub fn average_and_vote(posteriors: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (n, k) = match *posteriors.shape() {
        [n, k] if n > 0 => (n, k),
        _ => return Err(Error::Shape(format!("need at least one posterior row, got {:?}", posteriors.shape()))),
    };
    let mut mean = vec![0.0; k];
    for i in 0..n {
        mean.iter_mut().zip(posteriors.item(i)).for_each(|(m, p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok((argmax(&mean), mean))
}

/// Sentence-level decision from all chunks of one utterance.
pub fn sentence_classify(net: &mut Network, chunks: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if chunks.is_empty() {
        return Err(Error::EmptyResult("sentence has no chunks".into()));
    }
    let len = chunks[0].len();
    let x = Tensor::new(vec![chunks.len(), len], chunks.concat())?;
    let p = net.forward(&x, Mode::Eval)?;
    average_and_vote(&p)
}

/// `100 * wrong / total`.
pub fn classification_error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "need equal, non-empty prediction ({}) and label ({}) lists",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: RmsProp,
    /// Draw chunk positions at random each epoch instead of the fixed grid.
    pub random_offsets: bool,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch: 128,
            epochs: 50,
            seed: 0,
            optimizer: RmsProp::default(),
            random_offsets: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let hp = &self.optimizer;
        if self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::Config("minibatch and epochs must be positive".into()));
        }
        if !(hp.lr > 0.0 && hp.epsilon > 0.0 && (0.0..1.0).contains(&hp.alpha)) {
            return Err(Error::Config(format!("invalid optimizer settings {hp:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Frame error rate on the training chunks, percent.
    pub train_fer: f64,
    /// Frame error rate on held-out chunks, percent.
    pub eval_fer: Option<f64>,
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,train_fer,eval_fer\n");
    for l in logs {
        let eval = l.eval_fer.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6},{:.4},{}", l.epoch, l.loss, l.train_fer, eval);
    }
    s
}

pub fn logs_from_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("epoch,loss,train_fer,eval_fer") {
        return Err(Error::Csv("expected header `epoch,loss,train_fer,eval_fer`".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Csv(format!("malformed log row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                train_fer: f[2].parse().map_err(|_| bad())?,
                eval_fer: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

/// Where training chunks come from.
pub enum TrainData<'a> {
    /// A fixed chunk grid reused every epoch.
    Fixed(&'a ChunkSet),
    /// Chunks re-drawn at random offsets every epoch, as many per utterance
    /// as the fixed grid would give.
    RandomOffsets {
        utterances: &'a [(Utterance, usize)],
        geometry: ChunkGeometry,
    },
}

impl TrainData<'_> {
    fn epoch_set(&self, rng: &mut ChaCha8Rng) -> Result<std::borrow::Cow<'_, ChunkSet>> {
        match self {
            TrainData::Fixed(set) => Ok(std::borrow::Cow::Borrowed(*set)),
            TrainData::RandomOffsets { utterances, geometry } => {
                let mut set = ChunkSet {
                    chunk_len: geometry.window,
                    data: Vec::new(),
                    labels: Vec::new(),
                    source: Vec::new(),
                };
                for (i, (u, label)) in utterances.iter().enumerate() {
                    let n = geometry.count(u.samples.len());
                    if n == 0 {
                        return Err(Error::EmptyResult(format!(
                            "utterance `{}` is shorter than one chunk",
                            u.utterance_id
                        )));
                    }
                    let span = u.samples.len() - geometry.window;
                    for _ in 0..n {
                        let start = rng.gen_range(0..=span);
                        set.data.extend_from_slice(&u.samples[start..start + geometry.window]);
                        set.labels.push(*label);
                        set.source.push(i);
                    }
                }
                Ok(std::borrow::Cow::Owned(set))
            }
        }
    }
}

fn batch_tensor(set: &ChunkSet, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * set.chunk_len);
    for &i in idx {
        data.extend_from_slice(set.chunk(i));
    }
    Tensor::new(vec![idx.len(), set.chunk_len], data)
}

/// Frame error rate of `net` (inference mode) over every chunk of `set`.
pub fn frame_error_rate(net: &mut Network, set: &ChunkSet, batch: usize) -> Result<f64> {
    let mut preds = Vec::with_capacity(set.len());
    let order: Vec<usize> = (0..set.len()).collect();
    for idx in order.chunks(batch.max(1)) {
        let p = net.forward(&batch_tensor(set, idx)?, Mode::Eval)?;
        let k = p.shape()[1];
        preds.extend(p.data().chunks(k).map(argmax));
    }
    classification_error_rate(&preds, &set.labels)
}

/// Trains `net` in place and returns one log entry per epoch.
///
/// Batches are drawn from a seeded shuffle; the result is a pure function of
/// the network initialization, the data and `config`.
pub fn train(
    net: &mut Network,
    data: TrainData<'_>,
    eval: Option<&ChunkSet>,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut opt = OptimizerState::new(config.optimizer, net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let set = data.epoch_set(&mut rng)?;
        if set.is_empty() {
            return Err(Error::EmptyResult("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.minibatch).enumerate() {
            let x = batch_tensor(&set, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let p = net.forward(&x, Mode::Train)?;
            let (loss, grad) = cross_entropy(&p, &labels)?;
            if !loss.is_finite() {
                let (param, param_norm) = net.largest_param_norm();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param,
                    param_norm,
                });
            }
            let k = p.shape()[1];
            wrong += p
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) != y)
                .count();
            loss_sum += loss * idx.len() as f64;
            net.backward_from_logits(&grad)?;
            opt.step(&mut net.params_mut())?;
        }
        let eval_fer = match eval {
            Some(e) => Some(frame_error_rate(net, e, config.minibatch)?),
            None => None,
        };
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / set.len() as f64,
            train_fer: 100.0 * wrong as f64 / set.len() as f64,
            eval_fer,
        });
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                save_network(net, dir.join(format!("epoch_{epoch:03}.snc")))?;
            }
        }
    }
    Ok(logs)
}

/// Sentence-level predictions for labelled utterances, and the resulting CER.
pub fn evaluate_sentences(
    net: &mut Network,
    utterances: &[(Utterance, usize)],
    geometry: ChunkGeometry,
) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(utterances.len());
    for (u, _) in utterances {
        let chunks = chunk(&u.samples, geometry, ChunkMode::Inference)?;
        preds.push(sentence_classify(net, &chunks)?.0);
    }
    let labels: Vec<usize> = utterances.iter().map(|(_, l)| *l).collect();
    let cer = classification_error_rate(&preds, &labels)?;
    Ok((preds, cer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmsprop_examples() {
        let hp = RmsProp::default();
        let mut p = [1.0, -2.0];
        let mut v = [0.4, 0.0];
        rmsprop_update(&hp, &mut p, &[0.0, 0.0], &mut v).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_abs_diff_eq!(v[0], 0.4 * 0.95, epsilon = 1e-15);

        let mut p = [0.0];
        let mut v = [0.0];
        rmsprop_update(&hp, &mut p, &[1.0], &mut v).unwrap();
        assert_abs_diff_eq!(v[0], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], -0.0044721, epsilon = 1e-7);
        let first = p[0];
        rmsprop_update(&hp, &mut p, &[1.0], &mut v).unwrap();
        assert!((p[0] - first).abs() < first.abs());

        assert!(rmsprop_update(&hp, &mut [0.0; 2], &[1.0], &mut [0.0; 2]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let k = 5;
        let uniform = Tensor::new(vec![2, k], vec![0.2; 2 * k]).unwrap();
        let (loss, _) = cross_entropy(&uniform, &[0, 3]).unwrap();
        assert_abs_diff_eq!(loss, (k as f64).ln(), epsilon = 1e-12);
        let onehot = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy(&onehot, &[1]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        assert!(cross_entropy(&onehot, &[3]).is_err());
    }

    #[test]
    fn voting_examples() {
        let single = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(average_and_vote(&single).unwrap().0, 1);
        // class 0 wins one chunk narrowly, class 1 wins the other decisively
        let pair = Tensor::new(vec![2, 2], vec![0.55, 0.45, 0.05, 0.95]).unwrap();
        assert_eq!(average_and_vote(&pair).unwrap().0, 1);
        let flat = Tensor::new(vec![3, 4], vec![0.25; 12]).unwrap();
        assert_eq!(average_and_vote(&flat).unwrap().0, 0);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(classification_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(classification_error_rate(&[0, 0], &[1, 1]).unwrap(), 100.0);
        let labels = [0usize; 8];
        let mut preds = [0usize; 8];
        preds[5] = 2;
        assert_eq!(classification_error_rate(&preds, &labels).unwrap(), 12.5);
        assert!(classification_error_rate(&[], &[]).is_err());
    }

    #[test]
    fn log_csv_round_trip() {
        let logs = vec![
            EpochLog { epoch: 1, loss: 2.5, train_fer: 80.0, eval_fer: Some(85.5) },
            EpochLog { epoch: 2, loss: 1.25, train_fer: 40.0, eval_fer: None },
        ];
        let csv = logs_to_csv(&logs);
        assert!(csv.starts_with("epoch,loss,train_fer,eval_fer\n"));
        assert_eq!(logs_from_csv(&csv).unwrap(), logs);
    }
}
