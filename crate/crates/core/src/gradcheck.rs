//! Finite-difference check of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::neuralnet::{ArchConfig, FrontEnd, Mode, Network, Tensor};
use crate::trainer::cross_entropy;

pub const STEP: f64 = 1e-6;
pub const THRESHOLD: f64 = 1e-4;
/// Added to the denominator so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + REL_FLOOR)
}

/// F=4, L=17, one 2x5 convolution, one 8-unit dense layer, 3 classes.
pub fn tiny_config(seed: u64) -> ArchConfig {
    ArchConfig {
        front_end: FrontEnd::Sinc,
        sample_rate: 8000.0,
        chunk_len: 64,
        filters: 4,
        filter_len: 17,
        mel_low_hz: 30.0,
        mel_high_hz: 4000.0,
        conv_channels: vec![2],
        conv_len: 5,
        pool: 2,
        rectify: true,
        dense: vec![8],
        classes: 3,
        leaky_slope: 0.2,
        dropout: 0.0,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub n_params: usize,
    pub max_rel_error: f64,
    /// Qualified name and flat index of the worst entry.
    pub worst: (String, usize),
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

fn loss(net: &mut Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let p = net.forward(x, Mode::Train)?;
    Ok(cross_entropy(&p, labels)?.0)
}

/// Compares every analytic gradient of `net` against central differences of
/// the mean cross-entropy on `(x, labels)`.
pub fn check_network(net: &mut Network, x: &Tensor, labels: &[usize], seed: u64) -> Result<GradcheckReport> {
    let p = net.forward(x, Mode::Train)?;
    let (_, g) = cross_entropy(&p, labels)?;
    net.backward_from_logits(&g)?;
    let analytic: Vec<(String, Vec<f64>)> = net
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.data().to_vec()))
        .collect();

    let mut worst = (String::new(), 0);
    let mut max_rel = 0.0f64;
    let mut n_params = 0;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = net.params()[pi].1.value.data()[i];
            set_param(net, pi, i, orig + STEP);
            let up = loss(net, x, labels)?;
            set_param(net, pi, i, orig - STEP);
            let down = loss(net, x, labels)?;
            set_param(net, pi, i, orig);
            let numeric = (up - down) / (2.0 * STEP);
            let rel = relative_error(a, numeric);
            if rel > max_rel || !rel.is_finite() {
                max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = (name.clone(), i);
            }
            n_params += 1;
        }
    }
    Ok(GradcheckReport {
        seed,
        n_params,
        max_rel_error: max_rel,
        worst,
    })
}

fn set_param(net: &mut Network, param: usize, index: usize, value: f64) {
    let mut params = net.params_mut();
    params[param].1.value.data_mut()[index] = value;
}

/// Builds a tiny network with random raw cutoffs (either sign) and random
/// input, then runs [`check_network`].
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cfg = tiny_config(seed);
    let mut net = Network::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD_C4EC);
    for (name, p) in net.params_mut() {
        if name.ends_with("f1_raw") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(0.005..0.2) * if rng.gen_bool(0.3) { -1.0 } else { 1.0 };
            }
        } else if name.ends_with("f2_raw") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.1..0.45);
            }
        }
    }
    let batch = 4;
    let x: Vec<f64> = (0..batch * cfg.chunk_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![batch, cfg.chunk_len], x)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.classes).collect();
    check_network(&mut net, &x, &labels, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-6);
        assert!(relative_error(1e-6, 0.0) > 1e-2);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn tiny_network_passes() {
        let r = gradcheck(7).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.n_params > 8);
    }
}
