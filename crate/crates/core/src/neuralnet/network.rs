use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    BatchNorm, Conv1d, Dense, Dropout, Layer, LayerKind, LayerNorm, LeakyRelu, MaxPool, Mode, Param,
    SincConv, Softmax,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::filterbank::{hamming_window, mel_initialize, CutoffParams};

/// First-layer flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontEnd {
    /// Learnable cutoffs, two parameters per filter.
    Sinc,
    /// Every tap learned.
    Standard,
}

impl FrontEnd {
    pub fn as_str(self) -> &'static str {
        match self {
            FrontEnd::Sinc => "sinc",
            FrontEnd::Standard => "standard",
        }
    }
}

impl std::str::FromStr for FrontEnd {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinc" => Ok(FrontEnd::Sinc),
            "standard" | "cnn" => Ok(FrontEnd::Standard),
            other => Err(Error::Config(format!("unknown cnn_mode `{other}` (expected sinc|standard)"))),
        }
    }
}

/// Layer sizes of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub front_end: FrontEnd,
    pub sample_rate: f64,
    /// Input chunk length in samples.
    pub chunk_len: usize,
    pub filters: usize,
    pub filter_len: usize,
    /// Mel initialization range in Hz.
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub conv_channels: Vec<usize>,
    pub conv_len: usize,
    pub pool: usize,
    /// Pool the magnitude of the first filtering layer's output.
    pub rectify: bool,
    pub dense: Vec<usize>,
    pub classes: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl ArchConfig {
    /// Full-size architecture at 16 kHz: 80 sinc filters of 251 taps, two
    /// 60x5 convolutions, three 2048-unit dense layers.
    pub fn reference(classes: usize) -> Self {
        Self {
            front_end: FrontEnd::Sinc,
            sample_rate: 16000.0,
            chunk_len: 3200,
            filters: 80,
            filter_len: 251,
            mel_low_hz: 30.0,
            mel_high_hz: 8000.0,
            conv_channels: vec![60, 60],
            conv_len: 5,
            pool: 3,
            rectify: false,
            dense: vec![2048, 2048, 2048],
            classes,
            leaky_slope: 0.2,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Ordered layer stack ending in a softmax over speakers.
pub struct Network {
    layers: Vec<Box<dyn Layer>>,
    /// Index of the layer whose output is the d-vector (last hidden activation).
    embedding_layer: usize,
    config: ArchConfig,
}

impl Network {
    pub fn new(config: ArchConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if config.pool == 0 || config.filters == 0 || config.chunk_len == 0 {
            return Err(Error::Config("pool, filters and chunk length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let slope = config.leaky_slope;

        layers.push(Box::new(LayerNorm::new(1, false)));
        match config.front_end {
            FrontEnd::Sinc => {
                let cutoffs = mel_initialize(
                    config.filters,
                    config.sample_rate,
                    config.mel_low_hz,
                    config.mel_high_hz,
                )?;
                layers.push(Box::new(SincConv::new(cutoffs, hamming_window(config.filter_len)?)));
            }
            FrontEnd::Standard => {
                layers.push(Box::new(Conv1d::new(config.filters, 1, config.filter_len, &mut rng)));
            }
        }
        let mut time = shrink(config.chunk_len, config.filter_len, config.pool)?;
        let mut channels = config.filters;
        let mut dropout_seed = config.seed.wrapping_mul(31).wrapping_add(7);
        let mut push_dropout = |layers: &mut Vec<Box<dyn Layer>>| {
            if config.dropout > 0.0 {
                dropout_seed = dropout_seed.wrapping_add(1);
                layers.push(Box::new(Dropout::new(config.dropout, dropout_seed)));
            }
        };
        layers.push(Box::new(if config.rectify {
            MaxPool::magnitude(config.pool)
        } else {
            MaxPool::new(config.pool)
        }));
        layers.push(Box::new(LayerNorm::new(channels, true)));
        layers.push(Box::new(LeakyRelu::new(slope)));
        push_dropout(&mut layers);

        for &c in &config.conv_channels {
            layers.push(Box::new(Conv1d::new(c, channels, config.conv_len, &mut rng)));
            time = shrink(time, config.conv_len, config.pool)?;
            channels = c;
            layers.push(Box::new(MaxPool::new(config.pool)));
            layers.push(Box::new(LayerNorm::new(channels, true)));
            layers.push(Box::new(LeakyRelu::new(slope)));
            push_dropout(&mut layers);
        }

        let mut width = channels * time;
        for &d in &config.dense {
            layers.push(Box::new(Dense::new(width, d, &mut rng)));
            layers.push(Box::new(BatchNorm::new(d)));
            layers.push(Box::new(LeakyRelu::new(slope)));
            push_dropout(&mut layers);
            width = d;
        }
        // Last hidden activation; dropout is the identity at inference.
        let embedding_layer = layers.len() - 1;
        layers.push(Box::new(Dense::new(width, config.classes, &mut rng)));
        layers.push(Box::new(Softmax::new()));

        let mut net = Self {
            layers,
            embedding_layer,
            config,
        };
        net.update_input_grad_flags();
        Ok(net)
    }

    fn update_input_grad_flags(&mut self) {
        let mut upstream_params = false;
        for layer in &mut self.layers {
            layer.set_input_grad(upstream_params);
            upstream_params |= !layer.params().is_empty();
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind()).collect()
    }

    /// Posteriors `[B, classes]` for a batch of chunks `[B, chunk_len]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = self.prepare_input(x)?;
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Last-hidden-layer activations `[B, width]` (inference mode).
    pub fn embed(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.prepare_input(x)?;
        for layer in &mut self.layers[..=self.embedding_layer] {
            h = layer.forward(&h, Mode::Eval)?;
        }
        Ok(h)
    }

    fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        match *x.shape() {
            [b, t] if t == self.config.chunk_len => x.clone().reshape(&[b, 1, t]),
            [b, 1, t] if t == self.config.chunk_len => Ok(x.clone().reshape(&[b, 1, t])?),
            _ => Err(Error::Shape(format!(
                "network expects [batch, {}] chunks, got {:?}",
                self.config.chunk_len,
                x.shape()
            ))),
        }
    }

    /// Back-propagates a gradient taken with respect to the pre-softmax
    /// logits. The final softmax is skipped.
    pub fn backward_from_logits(&mut self, grad_logits: &Tensor) -> Result<()> {
        let n = self.layers.len();
        let mut g = grad_logits.clone();
        for layer in self.layers[..n - 1].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(())
    }

    /// Back-propagates a gradient with respect to the posteriors.
    pub fn backward(&mut self, grad_posteriors: &Tensor) -> Result<()> {
        let mut g = grad_posteriors.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(())
    }

    /// `(qualified name, parameter)` in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().iter().map(move |p| (format!("layer{i}.{}", p.name), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().iter_mut().map(move |p| (format!("layer{i}.{}", p.name), p)))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.buffers_mut().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Learnable parameters of the first filtering layer.
    pub fn front_end_param_count(&self) -> usize {
        self.layers
            .iter()
            .find(|l| matches!(l.kind(), LayerKind::SincConv | LayerKind::Conv1d))
            .map(|l| l.param_count())
            .unwrap_or(0)
    }

    /// Current cutoffs of the sinc layer, if the network has one.
    pub fn cutoffs(&self) -> Option<CutoffParams> {
        self.layers.iter().find_map(|l| l.cutoffs())
    }

    /// Returns `(name, norm)` of the parameter with the largest L2 norm.
    pub fn largest_param_norm(&self) -> (String, f64) {
        self.params()
            .into_iter()
            .map(|(n, p)| {
                let norm = p.value.norm();
                (n, if norm.is_finite() { norm } else { f64::INFINITY })
            })
            .fold((String::new(), 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
    }
}

fn shrink(time: usize, kernel: usize, pool: usize) -> Result<usize> {
    if time < kernel || (time - kernel + 1) / pool == 0 {
        return Err(Error::Config(format!(
            "feature map of length {time} is too short for kernel {kernel} and pooling {pool}"
        )));
    }
    Ok((time - kernel + 1) / pool)
}

/// Parameter count of a first layer with `filters` filters of length `len`,
/// read back from the registry of a freshly built layer.
pub fn first_layer_param_count(front_end: FrontEnd, filters: usize, len: usize) -> Result<usize> {
    match front_end {
        FrontEnd::Standard => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(Conv1d::new(filters, 1, len, &mut rng).param_count())
        }
        FrontEnd::Sinc => {
            let cutoffs = CutoffParams::new(vec![0.0; filters], vec![0.25; filters])?;
            Ok(SincConv::new(cutoffs, hamming_window(len)?).param_count())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(front_end: FrontEnd) -> ArchConfig {
        ArchConfig {
            front_end,
            sample_rate: 8000.0,
            chunk_len: 64,
            filters: 4,
            filter_len: 17,
            mel_low_hz: 30.0,
            mel_high_hz: 4000.0,
            conv_channels: vec![2],
            conv_len: 5,
            pool: 3,
            rectify: false,
            dense: vec![8],
            classes: 3,
            leaky_slope: 0.2,
            dropout: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn builds_expected_stack() {
        let net = Network::new(tiny(FrontEnd::Sinc)).unwrap();
        use LayerKind::*;
        assert_eq!(
            net.kinds(),
            vec![
                LayerNorm, SincConv, MaxPool, LayerNorm, LeakyRelu, Conv1d, MaxPool, LayerNorm, LeakyRelu,
                Dense, BatchNorm, LeakyRelu, Dense, Softmax
            ]
        );
        assert_eq!(net.front_end_param_count(), 8);
        let cnn = Network::new(tiny(FrontEnd::Standard)).unwrap();
        assert_eq!(cnn.front_end_param_count(), 4 * 17);
    }

    #[test]
    fn posteriors_are_normalized_and_finite() {
        let mut net = Network::new(tiny(FrontEnd::Sinc)).unwrap();
        let x = Tensor::new(vec![3, 64], (0..192).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let p = net.forward(&x, Mode::Train).unwrap();
        assert!(p.is_finite());
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(net.embed(&x).unwrap().shape(), &[3, 8]);
    }

    #[test]
    fn rejects_wrong_chunk_length() {
        let mut net = Network::new(tiny(FrontEnd::Sinc)).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 63]), Mode::Eval).is_err());
    }

    #[test]
    fn sinc_count_ignores_length() {
        assert_eq!(first_layer_param_count(FrontEnd::Sinc, 80, 101).unwrap(), 160);
        assert_eq!(first_layer_param_count(FrontEnd::Sinc, 80, 201).unwrap(), 160);
        assert_eq!(first_layer_param_count(FrontEnd::Standard, 80, 100).unwrap(), 8000);
    }
}
