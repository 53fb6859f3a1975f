//! Windowed-sinc band-pass filters parametrized by two cutoff frequencies.
//!
//! Frequencies are normalized (cycles per sample, Nyquist = 0.5) everywhere in
//! this module. Conversion to Hz happens at the I/O boundary only.
//!
//! A filter of odd length `L` is evaluated on the centered integer grid
//! `m = -(L-1)/2 ..= (L-1)/2`:
//!
//! ```text
//! g[m] = (2 f2 sinc(2π f2 m) - 2 f1 sinc(2π f1 m)) * w[m]
//! ```
//!
//! with `w` a Hamming window whose peak sits on `m = 0`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Learnable cutoff pairs, one per filter, in their raw (unconstrained) form.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffParams {
    pub f1_raw: Vec<f64>,
    pub f2_raw: Vec<f64>,
}

impl CutoffParams {
    pub fn new(f1_raw: Vec<f64>, f2_raw: Vec<f64>) -> Result<Self> {
        if f1_raw.len() != f2_raw.len() {
            return Err(Error::InvalidParameter(format!(
                "cutoff vectors differ in length ({} vs {})",
                f1_raw.len(),
                f2_raw.len()
            )));
        }
        if f1_raw.is_empty() {
            return Err(Error::InvalidParameter("a filter bank needs at least one filter".into()));
        }
        let params = Self { f1_raw, f2_raw };
        params.check_finite()?;
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.f1_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f1_raw.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, (a, b)) in self.f1_raw.iter().zip(&self.f2_raw).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "filter {k} has non-finite cutoff ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    /// Admissible `(f1_abs, f2_abs)` pairs for every filter.
    pub fn absolute(&self) -> Result<Vec<(f64, f64)>> {
        self.f1_raw
            .iter()
            .zip(&self.f2_raw)
            .map(|(&a, &b)| reparametrize(a, b))
            .collect()
    }

    /// Indices of filters whose upper cutoff lies above Nyquist. Not an error;
    /// reported as a diagnostic only.
    pub fn above_nyquist(&self) -> Vec<usize> {
        self.absolute()
            .unwrap_or_default()
            .iter()
            .enumerate()
            .filter(|(_, (_, f2))| *f2 > 0.5)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Maps raw cutoffs onto `0 <= f1_abs <= f2_abs`:
/// `f1_abs = |f1|`, `f2_abs = |f1| + |f2 - f1|`.
pub fn reparametrize(f1_raw: f64, f2_raw: f64) -> Result<(f64, f64)> {
    if !f1_raw.is_finite() || !f2_raw.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "non-finite cutoff pair ({f1_raw}, {f2_raw})"
        )));
    }
    let f1_abs = f1_raw.abs();
    Ok((f1_abs, f1_abs + (f2_raw - f1_raw).abs()))
}

/// Jacobian of [`reparametrize`]: `[[df1_abs/df1, df1_abs/df2], [df2_abs/df1, df2_abs/df2]]`.
///
/// At the kinks (`f1 == 0`, `f2 == f1`) the right derivative is used.
pub fn reparametrize_jacobian(f1_raw: f64, f2_raw: f64) -> [[f64; 2]; 2] {
    let s1 = sign(f1_raw);
    let s21 = sign(f2_raw - f1_raw);
    [[s1, 0.0], [s1 - s21, s21]]
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `sin(x) / x`, with the removable singularity filled in as 1.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hamming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowVector {
    pub values: Vec<f64>,
    pub kind: WindowKind,
}

impl WindowVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn center(&self) -> usize {
        (self.values.len() - 1) / 2
    }

    /// Window value at centered index `m`.
    pub fn at(&self, m: isize) -> f64 {
        self.values[(self.center() as isize + m) as usize]
    }
}

/// Hamming window `0.54 - 0.46 cos(2πn/(L-1))`, `n = 0..L`, peak 1.0 at the
/// center sample and 0.08 at both ends.
///
/// Only the center and one side are evaluated; the other side is a mirror so
/// the window is exactly symmetric.
pub fn hamming_window(len: usize) -> Result<WindowVector> {
    check_len(len)?;
    let c = (len - 1) / 2;
    let span = (len - 1) as f64;
    let mut values = vec![0.0; len];
    for m in 0..=c {
        // n = c + m, and cos(2π(c+m)/(L-1)) = -cos(2πm/(L-1)).
        let v = 0.54 + 0.46 * (2.0 * PI * m as f64 / span).cos();
        values[c + m] = v;
        values[c - m] = v;
    }
    Ok(WindowVector {
        values,
        kind: WindowKind::Hamming,
    })
}

fn check_len(len: usize) -> Result<()> {
    if len < 3 || len.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "filter length must be odd and >= 3, got {len}"
        )));
    }
    Ok(())
}

fn check_band(f1_abs: f64, f2_abs: f64) -> Result<()> {
    if !(f1_abs.is_finite() && f2_abs.is_finite()) || f1_abs < 0.0 || f1_abs > f2_abs {
        return Err(Error::InvalidParameter(format!(
            "band edges must satisfy 0 <= f1 <= f2, got ({f1_abs}, {f2_abs})"
        )));
    }
    Ok(())
}

/// Unwindowed band-pass response at centered index `m`.
#[inline]
fn sinc_pair(f1: f64, f2: f64, m: f64) -> f64 {
    2.0 * f2 * sinc(2.0 * PI * f2 * m) - 2.0 * f1 * sinc(2.0 * PI * f1 * m)
}

/// Full construction with the number of sinc-pair evaluations performed.
pub fn build_filter_counted(
    f1_abs: f64,
    f2_abs: f64,
    window: &WindowVector,
) -> Result<(Vec<f64>, usize)> {
    check_len(window.len())?;
    check_band(f1_abs, f2_abs)?;
    let c = window.center() as isize;
    let mut evals = 0;
    let taps = (-c..=c)
        .map(|m| {
            evals += 1;
            sinc_pair(f1_abs, f2_abs, m as f64) * window.at(m)
        })
        .collect();
    Ok((taps, evals))
}

/// Length-`L` windowed band-pass impulse response.
pub fn build_filter(f1_abs: f64, f2_abs: f64, window: &WindowVector) -> Result<Vec<f64>> {
    build_filter_counted(f1_abs, f2_abs, window).map(|(t, _)| t)
}

/// Center-plus-one-side construction: element `i` holds the tap at `m = i`.
pub fn build_half_filter_counted(
    f1_abs: f64,
    f2_abs: f64,
    window: &WindowVector,
) -> Result<(Vec<f64>, usize)> {
    check_len(window.len())?;
    check_band(f1_abs, f2_abs)?;
    let c = window.center() as isize;
    let mut evals = 0;
    let half = (0..=c)
        .map(|m| {
            evals += 1;
            sinc_pair(f1_abs, f2_abs, m as f64) * window.at(m)
        })
        .collect();
    Ok((half, evals))
}

pub fn build_half_filter(f1_abs: f64, f2_abs: f64, window: &WindowVector) -> Result<Vec<f64>> {
    build_half_filter_counted(f1_abs, f2_abs, window).map(|(t, _)| t)
}

/// Expands a half filter (center first) to the full symmetric tap array.
pub fn mirror_half(half: &[f64]) -> Vec<f64> {
    let c = half.len() - 1;
    let mut full = vec![0.0; 2 * c + 1];
    for (m, &v) in half.iter().enumerate() {
        full[c + m] = v;
        full[c - m] = v;
    }
    full
}

/// Analytic derivatives of every windowed tap with respect to `f1_abs` and `f2_abs`.
///
/// `d/df [2f sinc(2πfm)] = 2 cos(2πfm)`, which is continuous through `m = 0`.
pub fn filter_gradients(
    f1_abs: f64,
    f2_abs: f64,
    window: &WindowVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(window.len())?;
    check_band(f1_abs, f2_abs)?;
    let c = window.center() as isize;
    let mut d1 = Vec::with_capacity(window.len());
    let mut d2 = Vec::with_capacity(window.len());
    for m in -c..=c {
        let w = window.at(m);
        let m = m as f64;
        d1.push(-2.0 * (2.0 * PI * f1_abs * m).cos() * w);
        d2.push(2.0 * (2.0 * PI * f2_abs * m).cos() * w);
    }
    Ok((d1, d2))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges of a triangular mel filter bank, normalized by `sample_rate`.
///
/// `F + 2` points are spaced evenly in mel between `f_min` and `f_max`;
/// filter `k` spans points `k` and `k + 2`.
pub fn mel_initialize(
    n_filters: usize,
    sample_rate: f64,
    f_min: f64,
    f_max: f64,
) -> Result<CutoffParams> {
    if n_filters == 0 {
        return Err(Error::InvalidParameter("need at least one filter".into()));
    }
    if !(sample_rate > 0.0 && f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "mel range must satisfy 0 <= f_min < f_max <= fs/2, got [{f_min}, {f_max}] at fs={sample_rate}"
        )));
    }
    let lo = hz_to_mel(f_min);
    let hi = hz_to_mel(f_max);
    let n_points = n_filters + 2;
    let mut points: Vec<f64> = (0..n_points)
        .map(|i| {
            let mel = lo + (hi - lo) * i as f64 / (n_points - 1) as f64;
            mel_to_hz(mel) / sample_rate
        })
        .collect();
    // the mel round trip can land a hair outside the requested range
    points[0] = f_min / sample_rate;
    points[n_points - 1] = f_max / sample_rate;
    let f1 = points[..n_filters].to_vec();
    let f2 = points[2..].to_vec();
    CutoffParams::new(f1, f2)
}

/// Materialized windowed-sinc filters for every cutoff pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SincFilterBank {
    /// Row-major `F x L`.
    pub taps: Vec<f64>,
    /// Row-major `F x (L+1)/2`, center first.
    pub half_taps: Vec<f64>,
    pub len: usize,
    pub sample_rate: f64,
}

impl SincFilterBank {
    /// Builds every filter from its half and mirrors it.
    pub fn from_params(params: &CutoffParams, window: &WindowVector, sample_rate: f64) -> Result<Self> {
        let len = window.len();
        let half_len = len.div_ceil(2);
        let mut taps = Vec::with_capacity(params.len() * len);
        let mut half_taps = Vec::with_capacity(params.len() * half_len);
        for (f1, f2) in params.absolute()? {
            let half = build_half_filter(f1, f2, window)?;
            taps.extend(mirror_half(&half));
            half_taps.extend(half);
        }
        Ok(Self {
            taps,
            half_taps,
            len,
            sample_rate,
        })
    }

    /// Same bank built tap by tap over the full length.
    pub fn from_params_full(params: &CutoffParams, window: &WindowVector, sample_rate: f64) -> Result<Self> {
        let len = window.len();
        let mut taps = Vec::with_capacity(params.len() * len);
        let mut half_taps = Vec::new();
        for (f1, f2) in params.absolute()? {
            let full = build_filter(f1, f2, window)?;
            half_taps.extend_from_slice(&full[(len - 1) / 2..]);
            taps.extend(full);
        }
        Ok(Self {
            taps,
            half_taps,
            len,
            sample_rate,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.taps.len() / self.len
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        &self.taps[k * self.len..(k + 1) * self.len]
    }
}

/// Magnitude of the zero-padded `n_fft`-point DFT of `taps`, bins `0..=n_fft/2`.
///
/// Evaluated by direct summation.
pub fn frequency_response(taps: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if !n_fft.is_power_of_two() || n_fft < taps.len() {
        return Err(Error::InvalidParameter(format!(
            "n_fft must be a power of two >= filter length {}, got {n_fft}",
            taps.len()
        )));
    }
    let (cos_t, sin_t) = twiddles(n_fft);
    let mask = n_fft - 1;
    Ok((0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in taps.iter().enumerate() {
                let idx = (k * n) & mask;
                re += x * cos_t[idx];
                im -= x * sin_t[idx];
            }
            re.hypot(im)
        })
        .collect())
}

fn twiddles(n: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip()
}

/// Element-wise sum of the magnitude responses of every filter in the bank.
pub fn cumulative_response(bank: &SincFilterBank, n_fft: usize) -> Result<Vec<f64>> {
    if bank.n_filters() == 0 {
        return Err(Error::InvalidParameter("empty filter bank".into()));
    }
    let mut acc = vec![0.0; n_fft / 2 + 1];
    for k in 0..bank.n_filters() {
        for (a, m) in acc.iter_mut().zip(frequency_response(bank.filter(k), n_fft)?) {
            *a += m;
        }
    }
    Ok(acc)
}

/// Normalized frequency of DFT bin `k`.
pub fn bin_frequency(k: usize, n_fft: usize) -> f64 {
    k as f64 / n_fft as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reparametrize_examples() {
        assert_eq!(reparametrize(0.1, 0.3).unwrap(), (0.1, 0.3));
        let (a, b) = reparametrize(-0.1, 0.3).unwrap();
        assert_abs_diff_eq!(a, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b, 0.5, epsilon = 1e-15);
        assert_eq!(reparametrize(0.2, 0.2).unwrap(), (0.2, 0.2));
        assert!(reparametrize(f64::NAN, 0.1).is_err());
        assert!(reparametrize(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn sinc_examples() {
        assert_eq!(sinc(0.0), 1.0);
        assert_abs_diff_eq!(sinc(PI), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sinc(PI / 2.0), std::f64::consts::FRAC_2_PI, epsilon = 1e-15);
    }

    #[test]
    fn hamming_examples() {
        let w = hamming_window(251).unwrap();
        assert_abs_diff_eq!(w.values[0], 0.08, epsilon = 1e-12);
        assert_abs_diff_eq!(w.values[250], 0.08, epsilon = 1e-12);
        assert_eq!(w.values[125], 1.0);
        assert!(w.values.iter().all(|&v| (0.08 - 1e-12..=1.0).contains(&v)));

        // pointwise 0.54 - 0.46 cos(2πn/4) for n = 0..5
        let w5 = hamming_window(5).unwrap();
        let expected = [0.08, 0.54, 1.0, 0.54, 0.08];
        for (v, e) in w5.values.iter().zip(expected) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn hamming_rejects_bad_lengths() {
        assert!(hamming_window(4).is_err());
        assert!(hamming_window(1).is_err());
        assert!(hamming_window(0).is_err());
    }

    #[test]
    fn filter_examples() {
        let w = hamming_window(251).unwrap();
        assert!(build_filter(0.1, 0.1, &w).unwrap().iter().all(|&t| t == 0.0));
        let taps = build_filter(0.0, 0.25, &w).unwrap();
        assert_eq!(taps[125], 0.5);
        assert!(build_filter(0.3, 0.2, &w).is_err());
        assert!(build_half_filter(0.1, 0.1, &w).unwrap().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn half_build_counts_and_mirrors() {
        let w = hamming_window(251).unwrap();
        let (full, n_full) = build_filter_counted(0.013, 0.171, &w).unwrap();
        let (half, n_half) = build_half_filter_counted(0.013, 0.171, &w).unwrap();
        assert_eq!(n_full, 251);
        assert_eq!(n_half, 126);
        assert_eq!(mirror_half(&half), full);
    }

    #[test]
    fn gradient_center_tap() {
        let w = hamming_window(17).unwrap();
        let (d1, d2) = filter_gradients(0.1, 0.3, &w).unwrap();
        assert_eq!(d2[8], 2.0 * w.values[8]);
        assert_eq!(d1[8], -2.0 * w.values[8]);
        let (e1, e2) = filter_gradients(0.2, 0.2, &w).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn mel_examples() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        // 2595 log10(1 + 1000/700)
        assert_abs_diff_eq!(hz_to_mel(1000.0), 999.985, epsilon = 1e-3);
        assert_abs_diff_eq!(mel_to_hz(hz_to_mel(1234.5)), 1234.5, epsilon = 1e-9);

        let p = mel_initialize(80, 16000.0, 30.0, 8000.0).unwrap();
        assert_eq!(p.len(), 80);
        let abs = p.absolute().unwrap();
        assert!(abs.iter().all(|&(_, f2)| f2 <= 0.5 + 1e-12));
        assert!(abs.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1));
        let widths: Vec<f64> = abs.iter().map(|(a, b)| b - a).collect();
        assert!(widths[0] < widths[79]);

        assert!(mel_initialize(0, 16000.0, 30.0, 8000.0).is_err());
        assert!(mel_initialize(10, 16000.0, 300.0, 200.0).is_err());
        assert!(mel_initialize(10, 16000.0, 30.0, 9000.0).is_err());
    }

    #[test]
    fn response_trivial_cases() {
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        for m in frequency_response(&delta, 16).unwrap() {
            assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        }
        assert!(frequency_response(&[0.0; 9], 16).unwrap().iter().all(|&m| m == 0.0));
        assert!(frequency_response(&delta, 8).is_err());
        assert!(frequency_response(&delta, 24).is_err());
    }

    #[test]
    fn cumulative_is_linear() {
        let w = hamming_window(31).unwrap();
        let one = CutoffParams::new(vec![0.05], vec![0.2]).unwrap();
        let three = CutoffParams::new(vec![0.05; 3], vec![0.2; 3]).unwrap();
        let single = SincFilterBank::from_params(&one, &w, 16000.0).unwrap();
        let triple = SincFilterBank::from_params(&three, &w, 16000.0).unwrap();
        let r1 = cumulative_response(&single, 64).unwrap();
        assert_eq!(r1, frequency_response(single.filter(0), 64).unwrap());
        let r3 = cumulative_response(&triple, 64).unwrap();
        for (a, b) in r1.iter().zip(&r3) {
            assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn nyquist_diagnostic() {
        let p = CutoffParams::new(vec![0.1, 0.2], vec![0.3, 0.7]).unwrap();
        assert_eq!(p.above_nyquist(), vec![1]);
    }
}
