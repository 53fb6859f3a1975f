use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sincnet::filterbank::{hamming_window, CutoffParams, WindowVector};
use sincnet::gradcheck::{gradcheck, THRESHOLD};
use sincnet::neuralnet::{sinc_conv_backward, sinc_conv_forward, Tensor};

/// Scalar loss `Σ c ⊙ y` over the sinc layer output.
fn loss(x: &Tensor, p: &CutoffParams, w: &WindowVector, c: &[f64]) -> f64 {
    let y = sinc_conv_forward(x, p, w).unwrap();
    y.data().iter().zip(c).map(|(a, b)| a * b).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn sinc_backward_matches_finite_differences() {
    let (f, len, t) = (2, 9, 16);
    let w = hamming_window(len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    for trial in 0..20 {
        let sign = if trial % 2 == 0 { 1.0 } else { -1.0 };
        let f1: Vec<f64> = (0..f).map(|_| sign * rng.gen_range(0.02..0.2)).collect();
        let f2: Vec<f64> = (0..f).map(|_| rng.gen_range(0.25..0.45)).collect();
        let p = CutoffParams::new(f1.clone(), f2.clone()).unwrap();
        let x = Tensor::new(vec![1, t], (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c: Vec<f64> = (0..f * (t - len + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up = Tensor::new(vec![f, t - len + 1], c.clone()).unwrap();
        let (g1, g2, gx) = sinc_conv_backward(&up, &x, &p, &w).unwrap();
        for k in 0..f {
            for (which, g) in [(0, &g1), (1, &g2)] {
                let mut plus = (f1.clone(), f2.clone());
                let mut minus = (f1.clone(), f2.clone());
                if which == 0 {
                    plus.0[k] += h;
                    minus.0[k] -= h;
                } else {
                    plus.1[k] += h;
                    minus.1[k] -= h;
                }
                let lp = loss(&x, &CutoffParams::new(plus.0, plus.1).unwrap(), &w, &c);
                let lm = loss(&x, &CutoffParams::new(minus.0, minus.1).unwrap(), &w, &c);
                let num = (lp - lm) / (2.0 * h);
                assert!(rel(g[k], num) < 1e-4, "trial {trial} filter {k}: {} vs {num}", g[k]);
            }
        }
        for i in 0..t {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &p, &w, &c) - loss(&xm, &p, &w, &c)) / (2.0 * h);
            assert!(rel(gx.data()[i], num) < 1e-4);
        }
    }
}

#[test]
fn negative_raw_cutoff_flips_gradient_sign() {
    // With f2_raw = 0 the absolute band is (|f1|, 2|f1|) for either sign of
    // f1_raw, so the forward output is identical and only the Jacobian
    // differs: d/d(f1_raw) flips sign, d/d(f2_raw) does too.
    let (len, t) = (9, 16);
    let w = hamming_window(len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![1, t], (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let up = Tensor::new(vec![1, t - len + 1], (0..t - len + 1).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let pos = CutoffParams::new(vec![0.12], vec![0.0]).unwrap();
    let neg = CutoffParams::new(vec![-0.12], vec![0.0]).unwrap();
    assert_eq!(
        sinc_conv_forward(&x, &pos, &w).unwrap(),
        sinc_conv_forward(&x, &neg, &w).unwrap()
    );
    let (p1, p2, _) = sinc_conv_backward(&up, &x, &pos, &w).unwrap();
    let (n1, n2, _) = sinc_conv_backward(&up, &x, &neg, &w).unwrap();
    assert!(p1[0].abs() > 1e-6);
    assert!((p1[0] + n1[0]).abs() < 1e-12 * p1[0].abs().max(1.0));
    assert!((p2[0] + n2[0]).abs() < 1e-12 * p2[0].abs().max(1.0));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let w = hamming_window(9).unwrap();
    let p = CutoffParams::new(vec![0.1, 0.2], vec![0.3, 0.4]).unwrap();
    let x = Tensor::new(vec![1, 16], (0..16).map(|i| i as f64).collect()).unwrap();
    let up = Tensor::zeros(&[2, 8]);
    let (g1, g2, gx) = sinc_conv_backward(&up, &x, &p, &w).unwrap();
    assert!(g1.iter().chain(&g2).chain(gx.data()).all(|&v| v == 0.0));
    let bad = Tensor::zeros(&[2, 7]);
    assert!(sinc_conv_backward(&bad, &x, &p, &w).is_err());
}

#[test]
fn tiny_networks_pass_full_gradcheck() {
    for seed in 0..5 {
        let r = gradcheck(seed).unwrap();
        assert!(r.max_rel_error < THRESHOLD, "{r:?}");
    }
}
