//! End-to-end experiment settings shared by the command line and tests.

use std::path::{Path, PathBuf};

use crate::config::{join_list, KeyValues};
use crate::dataio::{ChunkGeometry, ChunkMode, ChunkSet, Corpus, Manifest};
use crate::error::{Error, Result};
use crate::neuralnet::{ArchConfig, Checkpoint, FrontEnd, Network};
use crate::trainer::{train, EpochLog, RmsProp, TrainConfig, TrainData};

/// Keys accepted in a training config file.
pub const EXPERIMENT_KEYS: &[&str] = &[
    "manifest",
    "out_dir",
    "cnn_mode",
    "sample_rate",
    "chunk_ms",
    "overlap_ms",
    "filters",
    "filter_len",
    "mel_low_hz",
    "mel_high_hz",
    "conv_channels",
    "conv_len",
    "pool",
    "rectify",
    "dense",
    "leaky_slope",
    "dropout",
    "seed",
    "epochs",
    "minibatch",
    "lr",
    "alpha",
    "epsilon",
    "random_offsets",
    "checkpoint_every",
];

/// Desk-scale settings used by the bundled `configs/toy.conf`.
pub const TOY_CONFIG: &str = include_str!("../../../configs/toy.conf");

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub sample_rate: u32,
    pub chunk_ms: f64,
    pub overlap_ms: f64,
    /// Architecture with `classes` and `chunk_len` filled in from the data.
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl Experiment {
    /// Reads an experiment from flat keys. Unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(EXPERIMENT_KEYS)?;
        let sample_rate: u32 = kv.require("sample_rate")?;
        let chunk_ms = kv.get_or("chunk_ms", 200.0)?;
        let overlap_ms = kv.get_or("overlap_ms", 10.0)?;
        let geometry = ChunkGeometry::from_ms(chunk_ms, overlap_ms, sample_rate)?;
        let seed = kv.get_or("seed", 0u64)?;
        let fs = sample_rate as f64;
        let arch = ArchConfig {
            front_end: kv.get_or("cnn_mode", FrontEnd::Sinc)?,
            sample_rate: fs,
            chunk_len: geometry.window,
            filters: kv.require("filters")?,
            filter_len: kv.require("filter_len")?,
            mel_low_hz: kv.get_or("mel_low_hz", 30.0)?,
            mel_high_hz: kv.get_or("mel_high_hz", fs / 2.0)?,
            conv_channels: kv.get_list("conv_channels")?.unwrap_or_default(),
            conv_len: kv.get_or("conv_len", 5)?,
            pool: kv.get_or("pool", 3)?,
            rectify: kv.get_or("rectify", false)?,
            dense: kv.get_list("dense")?.unwrap_or_default(),
            classes: 0,
            leaky_slope: kv.get_or("leaky_slope", 0.2)?,
            dropout: kv.get_or("dropout", 0.0)?,
            seed,
        };
        let d = RmsProp::default();
        let train = TrainConfig {
            minibatch: kv.get_or("minibatch", 128)?,
            epochs: kv.get_or("epochs", 50)?,
            seed,
            optimizer: RmsProp {
                lr: kv.get_or("lr", d.lr)?,
                alpha: kv.get_or("alpha", d.alpha)?,
                epsilon: kv.get_or("epsilon", d.epsilon)?,
            },
            random_offsets: kv.get_or("random_offsets", false)?,
            checkpoint_every: kv.get_or("checkpoint_every", 0)?,
            checkpoint_dir: None,
        };
        train.validate()?;
        Ok(Self {
            manifest: kv.get_str("manifest").map(PathBuf::from),
            out_dir: kv.get_str("out_dir").map(PathBuf::from),
            sample_rate,
            chunk_ms,
            overlap_ms,
            arch,
            train,
        })
    }

    /// The bundled desk-scale configuration.
    pub fn toy() -> Self {
        Self::from_kv(&KeyValues::parse(TOY_CONFIG).expect("bundled config parses"))
            .expect("bundled config is valid")
    }

    /// Fully resolved settings as flat keys, in a fixed order.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        if let Some(m) = &self.manifest {
            kv.set("manifest", m.display());
        }
        if let Some(o) = &self.out_dir {
            kv.set("out_dir", o.display());
        }
        let a = &self.arch;
        kv.set("cnn_mode", a.front_end.as_str());
        kv.set("sample_rate", self.sample_rate);
        kv.set("chunk_ms", self.chunk_ms);
        kv.set("overlap_ms", self.overlap_ms);
        kv.set("filters", a.filters);
        kv.set("filter_len", a.filter_len);
        kv.set("mel_low_hz", a.mel_low_hz);
        kv.set("mel_high_hz", a.mel_high_hz);
        kv.set("conv_channels", join_list(&a.conv_channels));
        kv.set("conv_len", a.conv_len);
        kv.set("pool", a.pool);
        kv.set("rectify", a.rectify);
        kv.set("dense", join_list(&a.dense));
        kv.set("leaky_slope", a.leaky_slope);
        kv.set("dropout", a.dropout);
        kv.set("seed", a.seed);
        let t = &self.train;
        kv.set("epochs", t.epochs);
        kv.set("minibatch", t.minibatch);
        kv.set("lr", t.optimizer.lr);
        kv.set("alpha", t.optimizer.alpha);
        kv.set("epsilon", t.optimizer.epsilon);
        kv.set("random_offsets", t.random_offsets);
        kv.set("checkpoint_every", t.checkpoint_every);
        kv
    }

    pub fn geometry(&self) -> ChunkGeometry {
        ChunkGeometry::from_ms(self.chunk_ms, self.overlap_ms, self.sample_rate).expect("validated on construction")
    }

    pub fn with_front_end(mut self, front_end: FrontEnd) -> Self {
        self.arch.front_end = front_end;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.arch.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("no manifest given".into()))?;
        Corpus::load(&Manifest::load(path)?, self.sample_rate)
    }

    /// Builds and trains a network on `corpus`, evaluating held-out FER on
    /// the test split each epoch.
    pub fn run(&self, corpus: &Corpus) -> Result<(Network, Vec<EpochLog>)> {
        let geometry = self.geometry();
        let mut arch = self.arch.clone();
        arch.classes = corpus.classes.len();
        let mut net = Network::new(arch)?;
        let train_set = ChunkSet::from_utterances(&corpus.train, geometry, ChunkMode::Train)?;
        let eval_set = if corpus.test.is_empty() {
            None
        } else {
            Some(ChunkSet::from_utterances(&corpus.test, geometry, ChunkMode::Train)?)
        };
        let data = if self.train.random_offsets {
            TrainData::RandomOffsets {
                utterances: &corpus.train,
                geometry,
            }
        } else {
            TrainData::Fixed(&train_set)
        };
        let logs = train(&mut net, data, eval_set.as_ref(), &self.train)?;
        Ok((net, logs))
    }
}

/// Saves `net` with its chunk geometry so evaluation can re-chunk identically.
pub fn save_model(net: &Network, geometry: ChunkGeometry, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = Checkpoint::from_network(net);
    ckpt.metadata.push_str(&format!("chunk_stride = {}\n", geometry.stride));
    ckpt.save(path)
}

/// Loads a network and the chunk geometry it was trained with.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Network, ChunkGeometry)> {
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.to_network()?;
    let kv = KeyValues::parse(&ckpt.metadata)?;
    let window = net.config().chunk_len;
    let stride = kv.get_or("chunk_stride", window)?;
    Ok((net, ChunkGeometry { window, stride }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_round_trips() {
        let e = Experiment::toy();
        let back = Experiment::from_kv(&KeyValues::parse(&e.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut kv = KeyValues::parse(TOY_CONFIG).unwrap();
        kv.set("learning_rate", 0.1);
        assert!(Experiment::from_kv(&kv).is_err());
    }

    #[test]
    fn model_keeps_geometry() {
        let e = Experiment::toy();
        let mut arch = e.arch.clone();
        arch.classes = 3;
        let net = Network::new(arch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.snc");
        save_model(&net, e.geometry(), &p).unwrap();
        let (_, g) = load_model(&p).unwrap();
        assert_eq!(g, e.geometry());
    }
}
