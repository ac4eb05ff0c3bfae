//! Spectral reconstruction losses and clip metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ad::{stft_frames, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Log-magnitude floor.
pub const LOG_FLOOR: f64 = 1e-5;
/// SI-SDR values are clamped to `±SI_SDR_CAP_DB`.
pub const SI_SDR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// FFT size per scale, largest first; hop is a quarter of it.
    pub fft_sizes: Vec<usize>,
    pub mel_bins: Vec<usize>,
    pub scale_weights: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![512, 256, 128, 64],
            mel_bins: vec![64, 32, 16, 8],
            scale_weights: vec![45.0, 1.0, 1.0, 1.0],
            sample_rate_hz: 8000.0,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.fft_sizes.len();
        if n == 0 || self.mel_bins.len() != n || self.scale_weights.len() != n {
            return Err(Error::config(
                "spectral.fft_sizes, mel_bins and scale_weights must be non-empty and equally long",
            ));
        }
        if let Some(f) = self.fft_sizes.iter().find(|f| !f.is_power_of_two() || **f < 4) {
            return Err(Error::config(format!("spectral fft size {f} is not a power of two >= 4")));
        }
        if self.mel_bins.contains(&0) {
            return Err(Error::config("spectral.mel_bins must be positive"));
        }
        if self.scale_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("spectral.scale_weights must be nonnegative"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("spectral.sample_rate_hz must be positive"));
        }
        Ok(())
    }

    /// Index of the largest FFT scale.
    fn largest(&self) -> usize {
        (0..self.fft_sizes.len()).max_by_key(|&i| self.fft_sizes[i]).unwrap_or(0)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-spaced filterbank, `[n_mels, n_fft/2 + 1]`, spanning 0 Hz
/// to Nyquist.
pub fn mel_filterbank(n_fft: usize, n_mels: usize, sample_rate_hz: f64) -> Tensor {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate_hz / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate_hz / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[m * bins + k] = w;
        }
    }
    Tensor::new(vec![n_mels, bins], fb).expect("filterbank shape")
}

/// Writes a filterbank as CSV: header `mel,bin_0,..`, one row per filter.
pub fn write_filterbank_csv(path: &Path, fb: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let bins = fb.last_dim();
    let mut header = vec!["mel".to_string()];
    header.extend((0..bins).map(|k| format!("bin_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (m, row) in fb.rows().enumerate() {
        let mut rec = vec![m.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numeric(format!("csv: {other:?}")),
    }
}

/// Hann-windowed magnitudes of one clip, `[frames, n_fft/2 + 1]`, hop `n_fft/4`.
pub fn stft_mag(x: &[f64], n_fft: usize) -> Result<Tensor> {
    if n_fft < 4 || x.len() < n_fft {
        return Err(Error::contract(format!(
            "stft_mag: signal length {} shorter than fft size {n_fft}",
            x.len()
        )));
    }
    let frames = stft_frames(x, n_fft, n_fft / 4);
    let rows = frames.len();
    let data = frames.into_iter().flatten().map(|c| c.norm()).collect();
    Tensor::new(vec![rows, n_fft / 2 + 1], data)
}

/// `log(max(mel(|STFT(x)|), floor))` on the tape, `[..., frames, n_mels]`.
fn log_mel(tape: &mut Tape, x: Var, n_fft: usize, fb_t: Var) -> Result<Var> {
    let mag = tape.stft_mag(x, n_fft, n_fft / 4)?;
    let mel = tape.matmul(mag, fb_t)?;
    let floored = tape.clamp_min(mel, LOG_FLOOR);
    Ok(tape.log(floored))
}

/// `Σ_s w_s · mean|logmel_s(x) − logmel_s(x̂)|` for signals `[..., T]`.
pub fn multiscale_spectral_loss(tape: &mut Tape, x: Var, x_hat: Var, cfg: &SpectralConfig) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::dim("multiscale_spectral_loss", tape.shape(x), tape.shape(x_hat)));
    }
    cfg.validate()?;
    let mut total: Option<Var> = None;
    for ((&n_fft, &mels), &w) in cfg.fft_sizes.iter().zip(&cfg.mel_bins).zip(&cfg.scale_weights) {
        let fb = tape.constant(mel_filterbank(n_fft, mels, cfg.sample_rate_hz).transpose_last2());
        let a = log_mel(tape, x, n_fft, fb)?;
        let b = log_mel(tape, x_hat, n_fft, fb)?;
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        let m = tape.mean(d);
        let term = tape.scale(m, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one scale"))
}

fn check_lengths(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(op, &[x.len()], &[y.len()]));
    }
    Ok(())
}

fn log_mel_values(x: &[f64], n_fft: usize, fb: &Tensor) -> Result<Vec<f64>> {
    let mag = stft_mag(x, n_fft)?;
    let mut out = Vec::new();
    for frame in mag.rows() {
        for filt in fb.rows() {
            let e: f64 = filt.iter().zip(frame).map(|(w, m)| w * m).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(out)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute log-mel difference at the largest scale.
pub fn mel_error(x: &[f64], x_hat: &[f64], cfg: &SpectralConfig) -> Result<f64> {
    check_lengths("mel_error", x, x_hat)?;
    let i = cfg.largest();
    let fb = mel_filterbank(cfg.fft_sizes[i], cfg.mel_bins[i], cfg.sample_rate_hz);
    let a = log_mel_values(x, cfg.fft_sizes[i], &fb)?;
    let b = log_mel_values(x_hat, cfg.fft_sizes[i], &fb)?;
    Ok(mean_abs_diff(&a, &b))
}

/// Mean absolute linear-magnitude difference at the largest scale.
pub fn stft_distance(x: &[f64], x_hat: &[f64], cfg: &SpectralConfig) -> Result<f64> {
    check_lengths("stft_distance", x, x_hat)?;
    let n = cfg.fft_sizes[cfg.largest()];
    Ok(mean_abs_diff(stft_mag(x, n)?.data(), stft_mag(x_hat, n)?.data()))
}

/// Scale-invariant SDR in dB, clamped to `±100`.
pub fn si_sdr(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_lengths("si_sdr", x, x_hat)?;
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::contract("si_sdr: zero reference signal"));
    }
    let alpha = x.iter().zip(x_hat).map(|(a, b)| a * b).sum::<f64>() / energy;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (a, b) in x.iter().zip(x_hat) {
        let t = alpha * a;
        target += t * t;
        noise += (b - t) * (b - t);
    }
    // A silent estimate has neither target nor residual energy; it scores
    // the floor.
    let db = if target == 0.0 {
        -SI_SDR_CAP_DB
    } else if noise == 0.0 {
        SI_SDR_CAP_DB
    } else {
        10.0 * (target / noise).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub mel_error: f64,
    pub stft_distance: f64,
    pub si_sdr_db: f64,
}

pub fn metrics(x: &[f64], x_hat: &[f64], cfg: &SpectralConfig) -> Result<Metrics> {
    Ok(Metrics {
        mel_error: mel_error(x, x_hat, cfg)?,
        stft_distance: stft_distance(x, x_hat, cfg)?,
        si_sdr_db: si_sdr(x, x_hat)?,
    })
}
