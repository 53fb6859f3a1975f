//! Filter inspection: per-filter taps and responses, cumulative response,
//! learned band tables, and convergence comparison.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::filterbank::{frequency_response, SincFilterBank};
use crate::neuralnet::{LayerKind, Network};
use crate::trainer::EpochLog;

pub const DB_FLOOR: f64 = -120.0;
pub const DEFAULT_NFFT: usize = 4096;

/// `20 log10(m)` clamped at [`DB_FLOOR`].
pub fn to_db(magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        (20.0 * magnitude.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSummary {
    pub filter: usize,
    pub f1_hz: f64,
    pub f2_hz: f64,
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

/// Bands of a sinc network in Hz, sorted by center frequency.
pub fn band_summary(net: &Network) -> Option<Vec<BandSummary>> {
    let fs = net.config().sample_rate;
    let cutoffs = net.cutoffs()?;
    let mut rows: Vec<BandSummary> = cutoffs
        .absolute()
        .ok()?
        .into_iter()
        .enumerate()
        .map(|(k, (f1, f2))| BandSummary {
            filter: k,
            f1_hz: f1 * fs,
            f2_hz: f2 * fs,
            center_hz: 0.5 * (f1 + f2) * fs,
            bandwidth_hz: (f2 - f1) * fs,
        })
        .collect();
    rows.sort_by(|a, b| a.center_hz.total_cmp(&b.center_hz).then(a.filter.cmp(&b.filter)));
    Some(rows)
}

/// First-layer impulse responses, one row per filter, for either front end.
pub fn first_layer_filters(net: &Network) -> Result<Vec<Vec<f64>>> {
    if let Some(cutoffs) = net.cutoffs() {
        let window = crate::filterbank::hamming_window(net.config().filter_len)?;
        let bank = SincFilterBank::from_params(&cutoffs, &window, net.config().sample_rate)?;
        return Ok((0..bank.n_filters()).map(|k| bank.filter(k).to_vec()).collect());
    }
    let conv = net
        .layers()
        .iter()
        .find(|l| l.kind() == LayerKind::Conv1d)
        .ok_or_else(|| Error::InvalidParameter("network has no convolutional front end".into()))?;
    let w = &conv.params()[0].value;
    let len = w.shape()[2];
    Ok(w.data().chunks(len).map(<[f64]>::to_vec).collect())
}

/// Bin frequencies in Hz for an `n_fft`-point response at `sample_rate`.
pub fn bin_frequencies_hz(n_fft: usize, sample_rate: f64) -> Vec<f64> {
    (0..=n_fft / 2).map(|k| k as f64 * sample_rate / n_fft as f64).collect()
}

/// Linear magnitude responses of every filter and their element-wise sum.
pub fn responses(filters: &[Vec<f64>], n_fft: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if filters.is_empty() {
        return Err(Error::InvalidParameter("no filters".into()));
    }
    let per: Vec<Vec<f64>> = filters
        .iter()
        .map(|f| frequency_response(f, n_fft))
        .collect::<Result<_>>()?;
    let mut cum = vec![0.0; n_fft / 2 + 1];
    for r in &per {
        cum.iter_mut().zip(r).for_each(|(c, m)| *c += m);
    }
    Ok((per, cum))
}

/// Sum of `cumulative` over bins in consecutive bands of `band_hz`, starting at 0 Hz.
/// Bin `k` belongs to band `floor(f_k / band_hz)`; bins at or above Nyquist
/// that would start a new band are dropped.
pub fn band_masses(cumulative: &[f64], sample_rate: f64, band_hz: f64) -> Vec<f64> {
    let n_fft = (cumulative.len() - 1) * 2;
    let nyquist = sample_rate / 2.0;
    let n_bands = (nyquist / band_hz).floor().max(1.0) as usize;
    let mut mass = vec![0.0; n_bands];
    for (k, &m) in cumulative.iter().enumerate() {
        let f = k as f64 * sample_rate / n_fft as f64;
        let b = (f / band_hz).floor() as usize;
        if b < n_bands {
            mass[b] += m;
        }
    }
    mass
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Files written by [`export_filters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub n_filters: usize,
    pub bands: Option<Vec<BandSummary>>,
    /// Filters whose upper cutoff exceeds Nyquist.
    pub nyquist_warnings: Vec<usize>,
    pub cumulative: Vec<f64>,
}

/// Writes, under `out_dir`:
/// - `filter_KKK_taps.csv` (`tap_index,value`)
/// - `filter_KKK_response.csv` (`freq_hz,magnitude_db`)
/// - `cumulative.csv` (`freq_hz,magnitude,magnitude_norm,magnitude_db`)
/// - `bands.csv` for sinc networks (`filter,f1_hz,f2_hz,center_hz,bandwidth_hz`)
pub fn export_filters(net: &Network, out_dir: impl AsRef<Path>, n_fft: usize) -> Result<ExportSummary> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let fs = net.config().sample_rate;
    let filters = first_layer_filters(net)?;
    let (per, cum) = responses(&filters, n_fft)?;
    let freqs = bin_frequencies_hz(n_fft, fs);

    for (k, (taps, resp)) in filters.iter().zip(&per).enumerate() {
        let mut s = String::from("tap_index,value\n");
        for (i, v) in taps.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:e}");
        }
        write_file(&out_dir.join(format!("filter_{k:03}_taps.csv")), &s)?;
        let mut s = String::from("freq_hz,magnitude_db\n");
        for (f, m) in freqs.iter().zip(resp) {
            let _ = writeln!(s, "{f},{:e}", to_db(*m));
        }
        write_file(&out_dir.join(format!("filter_{k:03}_response.csv")), &s)?;
    }
    write_file(&out_dir.join("cumulative.csv"), &cumulative_csv(&freqs, &cum))?;

    let bands = band_summary(net);
    if let Some(rows) = &bands {
        let mut s = String::from("filter,f1_hz,f2_hz,center_hz,bandwidth_hz\n");
        for r in rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.filter, r.f1_hz, r.f2_hz, r.center_hz, r.bandwidth_hz);
        }
        write_file(&out_dir.join("bands.csv"), &s)?;
    }
    Ok(ExportSummary {
        n_filters: filters.len(),
        bands,
        nyquist_warnings: net.cutoffs().map(|c| c.above_nyquist()).unwrap_or_default(),
        cumulative: cum,
    })
}

pub fn cumulative_csv(freqs: &[f64], cum: &[f64]) -> String {
    let max = cum.iter().cloned().fold(0.0, f64::max);
    let mut s = String::from("freq_hz,magnitude,magnitude_norm,magnitude_db\n");
    for (f, m) in freqs.iter().zip(cum) {
        let norm = if max > 0.0 { m / max } else { 0.0 };
        let _ = writeln!(s, "{f},{m:e},{norm:e},{:e}", to_db(*m));
    }
    s
}

/// Bin frequencies in Hz, cumulative magnitude, and the band table of a sinc model.
pub type CumulativeReport = (Vec<f64>, Vec<f64>, Option<Vec<BandSummary>>);

/// Cumulative response of the first layer and the sorted band table.
pub fn cumulative_report(net: &Network, n_fft: usize) -> Result<CumulativeReport> {
    let filters = first_layer_filters(net)?;
    let (_, cum) = responses(&filters, n_fft)?;
    Ok((bin_frequencies_hz(n_fft, net.config().sample_rate), cum, band_summary(net)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub epoch: usize,
    pub fer_sinc: f64,
    pub fer_cnn: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSummary {
    pub rows: Vec<ConvergenceRow>,
    pub final_sinc: f64,
    pub final_cnn: f64,
}

fn fer(l: &EpochLog) -> f64 {
    l.eval_fer.unwrap_or(l.train_fer)
}

/// Aligns two training logs by epoch. Held-out FER is used when both logs
/// have it, training FER otherwise.
pub fn compare_convergence(sinc: &[EpochLog], cnn: &[EpochLog]) -> Result<ConvergenceSummary> {
    if sinc.is_empty() || cnn.is_empty() {
        return Err(Error::InvalidParameter("both logs must be non-empty".into()));
    }
    let use_eval = sinc.iter().chain(cnn).all(|l| l.eval_fer.is_some());
    let pick = |l: &EpochLog| if use_eval { fer(l) } else { l.train_fer };
    let rows: Vec<ConvergenceRow> = sinc
        .iter()
        .filter_map(|s| {
            cnn.iter().find(|c| c.epoch == s.epoch).map(|c| ConvergenceRow {
                epoch: s.epoch,
                fer_sinc: pick(s),
                fer_cnn: pick(c),
            })
        })
        .collect();
    let last = rows
        .last()
        .ok_or_else(|| Error::InvalidParameter("logs share no epochs".into()))?;
    Ok(ConvergenceSummary {
        final_sinc: last.fer_sinc,
        final_cnn: last.fer_cnn,
        rows,
    })
}

impl ConvergenceSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,fer_sinc,fer_cnn\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.4}", r.epoch, r.fer_sinc, r.fer_cnn);
        }
        s
    }

    pub fn at_epoch(&self, epoch: usize) -> Option<&ConvergenceRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }
}
