//! Slice-level 1-D correlation kernels shared by the convolutional layers.
//!
//! Layout is channel-major: a `[channels x time]` slice stores each channel's
//! samples contiguously.

/// Fixed-order dot product with four partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Valid-mode correlation `out[o][t] = Σ_i Σ_k w[o][i][k] x[i][t+k]`.
///
/// `out` must hold `c_out * (t_in - k + 1)` values and is overwritten.
pub fn correlate(x: &[f64], c_in: usize, t_in: usize, w: &[f64], c_out: usize, k: usize, out: &mut [f64]) {
    let t_out = t_in - k + 1;
    out.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..c_out {
        let y = &mut out[o * t_out..(o + 1) * t_out];
        for i in 0..c_in {
            let xi = &x[i * t_in..(i + 1) * t_in];
            let wk = &w[(o * c_in + i) * k..(o * c_in + i + 1) * k];
            for (j, &h) in wk.iter().enumerate() {
                axpy(h, &xi[j..j + t_out], y);
            }
        }
    }
}

/// Accumulates `gw[o][i][k] += Σ_t up[o][t] x[i][t+k]`.
pub fn correlate_grad_weights(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    up: &[f64],
    c_out: usize,
    k: usize,
    gw: &mut [f64],
) {
    let t_out = t_in - k + 1;
    for o in 0..c_out {
        let u = &up[o * t_out..(o + 1) * t_out];
        for i in 0..c_in {
            let xi = &x[i * t_in..(i + 1) * t_in];
            let g = &mut gw[(o * c_in + i) * k..(o * c_in + i + 1) * k];
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += dot(u, &xi[j..j + t_out]);
            }
        }
    }
}

/// Accumulates `gx[i][t+k] += Σ_o w[o][i][k] up[o][t]`.
pub fn correlate_grad_input(
    w: &[f64],
    c_in: usize,
    t_in: usize,
    up: &[f64],
    c_out: usize,
    k: usize,
    gx: &mut [f64],
) {
    let t_out = t_in - k + 1;
    for o in 0..c_out {
        let u = &up[o * t_out..(o + 1) * t_out];
        for i in 0..c_in {
            let g = &mut gx[i * t_in..(i + 1) * t_in];
            let wk = &w[(o * c_in + i) * k..(o * c_in + i + 1) * k];
            for (j, &h) in wk.iter().enumerate() {
                axpy(h, u, &mut g[j..j + t_out]);
            }
        }
    }
}
