//! Mel analysis and synthesis.
//!
//! Analysis: STFT magnitudes through a triangular mel filterbank with a log
//! floor. Synthesis: non-negative least-squares pseudo-inversion of the
//! filterbank back to linear magnitudes, then classical Griffin-Lim phase
//! reconstruction. The plain (momentum-free) Griffin-Lim update is used so
//! the spectral-convergence error is non-increasing across iterations.

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::MelSpectrogram;

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("waveform too short: {len} samples, need at least win_len = {win}")]
    TooShort { len: usize, win: usize },
    #[error("magnitude spectrogram contains negative entries (min {0})")]
    NegativeMagnitude(f64),
    #[error("invalid analysis config: {0}")]
    BadConfig(String),
}

/// STFT / mel analysis settings shared by the corpus generator, the trainer,
/// and synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_len: usize,
    pub win_len: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub n_gl_iters: usize,
}

impl AnalysisConfig {
    /// Desk-scale defaults: 16 kHz, 512-point FFT, 25 ms window, 12.5 ms hop.
    pub fn default_16k(n_mels: usize) -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 512,
            hop_len: 200,
            win_len: 400,
            n_mels,
            fmin: 0.0,
            fmax: 8_000.0,
            n_gl_iters: 60,
        }
    }

    pub fn validate(&self) -> Result<(), VocoderError> {
        if self.hop_len == 0 || self.win_len < self.hop_len || self.fft_size < self.win_len {
            return Err(VocoderError::BadConfig(format!(
                "need 0 < hop ({}) <= win ({}) <= fft ({})",
                self.hop_len, self.win_len, self.fft_size
            )));
        }
        if self.n_mels == 0 || self.fmax <= self.fmin {
            return Err(VocoderError::BadConfig("bad mel range".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count produced for a waveform of `len` samples: the signal is
    /// right-padded by `win - hop` zeros, giving `1 + (len - hop) / hop`
    /// full frames (`len / hop` exactly when `hop` divides `len`).
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + self.win_len - self.hop_len;
        1 + (padded - self.win_len) / self.hop_len
    }
}

/// Log floor applied to mel magnitudes.
pub const MEL_LOG_FLOOR: f64 = 1e-5;

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect()
}

/// Complex STFT: frame `t` covers samples `[t*hop, t*hop + win)` of the
/// right-padded signal. Output is `n_frames x n_bins`.
pub fn stft(wav: &[f64], cfg: &AnalysisConfig) -> Result<Array2<Complex<f64>>, VocoderError> {
    cfg.validate()?;
    if wav.len() < cfg.win_len {
        return Err(VocoderError::TooShort {
            len: wav.len(),
            win: cfg.win_len,
        });
    }
    let n_frames = cfg.n_frames(wav.len());
    let n_bins = cfg.n_bins();
    let window = hann(cfg.win_len);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut out = Array2::<Complex<f64>>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop_len;
        for i in 0..cfg.fft_size {
            let v = if i < cfg.win_len {
                wav.get(start + i).copied().unwrap_or(0.0) * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = buf[k];
        }
    }
    Ok(out)
}

/// Magnitude STFT.
pub fn stft_magnitude(wav: &[f64], cfg: &AnalysisConfig) -> Result<Array2<f64>, VocoderError> {
    Ok(stft(wav, cfg)?.mapv(|c| c.norm()))
}

/// Weighted-least-squares inverse STFT (overlap-add with squared-window
/// normalization). Returns `n_frames * hop` samples.
pub fn istft(spec: &Array2<Complex<f64>>, cfg: &AnalysisConfig) -> Vec<f64> {
    let (n_frames, n_bins) = spec.dim();
    debug_assert_eq!(n_bins, cfg.n_bins());
    let window = hann(cfg.win_len);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let full_len = (n_frames - 1) * cfg.hop_len + cfg.win_len;
    let mut acc = vec![0.0f64; full_len];
    let mut norm = vec![0.0f64; full_len];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        // hermitian extension of the half spectrum
        for k in 0..n_bins {
            buf[k] = spec[[t, k]];
        }
        for k in n_bins..cfg.fft_size {
            buf[k] = spec[[t, cfg.fft_size - k]].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_len;
        let scale = 1.0 / cfg.fft_size as f64;
        for i in 0..cfg.win_len {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let out_len = n_frames * cfg.hop_len;
    (0..out_len)
        .map(|i| if norm[i] > 1e-10 { acc[i] / norm[i] } else { 0.0 })
        .collect()
}

/// Triangular mel filterbank, `n_mels x n_bins`, peak 1 per filter.
pub fn mel_filterbank(cfg: &AnalysisConfig) -> Array2<f64> {
    fn hz_to_mel(f: f64) -> f64 {
        2595.0 * (1.0 + f / 700.0).log10()
    }
    fn mel_to_hz(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }
    let n_bins = cfg.n_bins();
    let mlo = hz_to_mel(cfg.fmin);
    let mhi = hz_to_mel(cfg.fmax);
    let centers: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let v = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[[m, k]] = v;
        }
    }
    fb
}

/// Waveform to log-mel spectrogram.
pub fn wav_to_mel(wav: &[f64], cfg: &AnalysisConfig) -> Result<MelSpectrogram, VocoderError> {
    let mag = stft_magnitude(wav, cfg)?;
    let fb = mel_filterbank(cfg);
    let mel = mag.dot(&fb.t());
    let frames = mel.mapv(|v| v.max(MEL_LOG_FLOOR).ln());
    Ok(MelSpectrogram {
        frames,
        hop_len: cfg.hop_len,
        sample_rate: cfg.sample_rate,
    })
}

/// Inverts a log-mel spectrogram to non-negative linear magnitudes by
/// projected-gradient non-negative least squares against the filterbank.
/// Applying the forward filterbank to the result recovers the mel input
/// within a small relative error.
pub fn mel_to_linear(mel: &MelSpectrogram, cfg: &AnalysisConfig) -> Array2<f64> {
    let fb = mel_filterbank(cfg); // (n_mels, n_bins)
    // target magnitudes, frames as columns: (n_mels, F)
    let m = mel.frames.mapv(f64::exp).t().to_owned();
    let at = fb.t().to_owned();

    // Lipschitz constant of x -> A^T A x via power iteration
    let n_bins = fb.ncols();
    let mut v = Array1::<f64>::from_elem(n_bins, 1.0 / (n_bins as f64).sqrt());
    let mut lip = 1.0;
    for _ in 0..40 {
        let w = at.dot(&fb.dot(&v));
        let n = w.dot(&w).sqrt();
        if n < 1e-30 {
            break;
        }
        lip = n;
        v = w / n;
    }
    let step = 1.0 / (lip * 1.01);

    // warm start: scaled A^T m
    let mut x = at.dot(&m);
    let b = fb.dot(&x);
    let denom = (&b * &b).sum();
    if denom > 0.0 {
        x *= (&b * &m).sum() / denom;
    }
    x.mapv_inplace(|v| v.max(0.0));

    let m_norm = (&m * &m).sum().sqrt().max(1e-30);
    let mut last_rel = f64::INFINITY;
    for it in 0..400 {
        let r = &fb.dot(&x) - &m;
        let g = at.dot(&r);
        x.zip_mut_with(&g, |xi, &gi| *xi = (*xi - step * gi).max(0.0));
        if it % 20 == 19 {
            let rel = (&fb.dot(&x) - &m).mapv(|v| v * v).sum().sqrt() / m_norm;
            if rel < 1e-4 || last_rel - rel < 1e-7 {
                break;
            }
            last_rel = rel;
        }
    }
    x.t().to_owned() // (F, n_bins)
}

/// Classical Griffin-Lim phase reconstruction from a magnitude spectrogram.
/// Zero-phase initialization keeps the whole path deterministic.
pub fn griffin_lim(magnitude: &Array2<f64>, cfg: &AnalysisConfig) -> Result<Vec<f64>, VocoderError> {
    Ok(griffin_lim_with_trace(magnitude, cfg)?.0)
}

/// Griffin-Lim returning the waveform plus the spectral-convergence error
/// `|| |STFT(x_k)| - M ||_F / ||M||_F` after each iteration.
pub fn griffin_lim_with_trace(
    magnitude: &Array2<f64>,
    cfg: &AnalysisConfig,
) -> Result<(Vec<f64>, Vec<f64>), VocoderError> {
    cfg.validate()?;
    let min = magnitude.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        return Err(VocoderError::NegativeMagnitude(min));
    }
    let (n_frames, _) = magnitude.dim();
    let m_norm = magnitude.mapv(|v| v * v).sum().sqrt();
    if m_norm == 0.0 {
        return Ok((vec![0.0; n_frames * cfg.hop_len], vec![0.0; cfg.n_gl_iters]));
    }

    // zero-phase start
    let mut spec = magnitude.mapv(|v| Complex::new(v, 0.0));
    let mut wav = istft(&spec, cfg);
    let mut errors = Vec::with_capacity(cfg.n_gl_iters);
    for _ in 0..cfg.n_gl_iters {
        let s = stft(&wav, cfg)?;
        let err = s
            .iter()
            .zip(magnitude.iter())
            .map(|(c, &m)| {
                let d = c.norm() - m;
                d * d
            })
            .sum::<f64>()
            .sqrt()
            / m_norm;
        errors.push(err);
        spec.zip_mut_with(&s, |out, &sv| {
            let n = sv.norm();
            *out = if n > 1e-300 {
                sv / n * out.norm()
            } else {
                Complex::new(out.norm(), 0.0)
            };
        });
        // keep magnitudes pinned to the target
        for (o, &m) in spec.iter_mut().zip(magnitude.iter()) {
            let n = o.norm();
            *o = if n > 1e-300 {
                *o / n * m
            } else {
                Complex::new(m, 0.0)
            };
        }
        wav = istft(&spec, cfg);
    }
    Ok((wav, errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AnalysisConfig {
        AnalysisConfig::default_16k(40)
    }

    fn tone(freq: f64, len: usize, sr: f64) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin() * 0.5)
            .collect()
    }

    #[test]
    fn frame_count_matches_contract() {
        let c = cfg();
        // padded formula: 1 + floor((len - hop)/hop); exact len/hop when divisible
        assert_eq!(c.n_frames(16_000), 80);
        assert_eq!(c.n_frames(3_200), 16);
        assert_eq!(c.n_frames(16_100), 80);
    }

    #[test]
    fn zero_waveform_gives_floored_log_mel() {
        let c = cfg();
        let mel = wav_to_mel(&vec![0.0; 4000], &c).unwrap();
        let floor = MEL_LOG_FLOOR.ln();
        assert!(mel.frames.iter().all(|&v| (v - floor).abs() < 1e-12));
        assert_eq!(mel.frames.nrows(), 20);
        assert_eq!(mel.frames.ncols(), 40);
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let c = cfg();
        assert!(matches!(
            wav_to_mel(&vec![0.0; 100], &c),
            Err(VocoderError::TooShort { .. })
        ));
    }

    #[test]
    fn pure_tone_peaks_in_the_filter_containing_it() {
        let c = cfg();
        let wav = tone(440.0, 16_000, 16_000.0);
        let mel = wav_to_mel(&wav, &c).unwrap();
        // oracle: the filter with the largest response at the 440 Hz bin
        let fb = mel_filterbank(&c);
        let bin = (440.0 * c.fft_size as f64 / c.sample_rate as f64).round() as usize;
        let expected = (0..c.n_mels)
            .max_by(|&a, &b| fb[[a, bin]].partial_cmp(&fb[[b, bin]]).unwrap())
            .unwrap();
        // mid frame, away from edge effects
        let row = mel.frames.row(mel.frames.nrows() / 2);
        let got = (0..c.n_mels)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        assert_eq!(got, expected, "dominant mel band mismatch");
    }

    #[test]
    fn stft_istft_round_trip_recovers_interior() {
        let c = cfg();
        let wav = tone(523.0, 4000, 16_000.0);
        let spec = stft(&wav, &c).unwrap();
        let rec = istft(&spec, &c);
        assert_eq!(rec.len(), 4000);
        // interior samples (first window is only partially covered)
        for i in c.win_len..3600 {
            assert!(
                (rec[i] - wav[i]).abs() < 1e-8,
                "sample {i}: {} vs {}",
                rec[i],
                wav[i]
            );
        }
    }

    #[test]
    fn mel_round_trip_error_is_small() {
        let c = cfg();
        let wav = {
            // tone complex, closer to corpus audio than a lone sinusoid
            let mut w = tone(220.0, 8000, 16_000.0);
            for (i, v) in tone(660.0, 8000, 16_000.0).iter().enumerate() {
                w[i] += 0.4 * v;
            }
            for (i, v) in tone(1320.0, 8000, 16_000.0).iter().enumerate() {
                w[i] += 0.2 * v;
            }
            w
        };
        let mel = wav_to_mel(&wav, &c).unwrap();
        let lin = mel_to_linear(&mel, &c);
        assert!(lin.iter().all(|&v| v >= 0.0), "NNLS must stay non-negative");
        let fb = mel_filterbank(&c);
        let mel2 = lin.dot(&fb.t());
        let target = mel.frames.mapv(f64::exp);
        let num = (&mel2 - &target).mapv(|v| v * v).sum().sqrt();
        let den = target.mapv(|v| v * v).sum().sqrt();
        assert!(num / den < 0.05, "round-trip rel err {}", num / den);
    }

    #[test]
    fn zero_mel_inverts_to_near_zero_magnitudes() {
        let c = cfg();
        let mel = MelSpectrogram {
            frames: Array2::from_elem((10, c.n_mels), MEL_LOG_FLOOR.ln()),
            hop_len: c.hop_len,
            sample_rate: c.sample_rate,
        };
        let lin = mel_to_linear(&mel, &c);
        let max = lin.iter().copied().fold(0.0f64, f64::max);
        assert!(max < 1e-3, "max magnitude {max}");
    }

    #[test]
    fn griffin_lim_converges_monotonically_on_a_tone() {
        let c = cfg();
        let wav = tone(440.0, 8000, 16_000.0);
        let mag = stft_magnitude(&wav, &c).unwrap();
        let (rec, errors) = griffin_lim_with_trace(&mag, &c).unwrap();
        assert_eq!(rec.len(), 8000);
        assert_eq!(errors.len(), 60);
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "error increased: {} -> {}", w[0], w[1]);
        }
        assert!(
            *errors.last().unwrap() < 0.1,
            "final spectral convergence {}",
            errors.last().unwrap()
        );
    }

    #[test]
    fn griffin_lim_edge_cases() {
        let c = cfg();
        let zeros = Array2::<f64>::zeros((12, c.n_bins()));
        let out = griffin_lim(&zeros, &c).unwrap();
        assert_eq!(out.len(), 12 * c.hop_len);
        assert!(out.iter().all(|&v| v == 0.0));

        let mut neg = zeros.clone();
        neg[[0, 0]] = -1.0;
        assert!(matches!(
            griffin_lim(&neg, &c),
            Err(VocoderError::NegativeMagnitude(_))
        ));

        let mut c0 = c.clone();
        c0.n_gl_iters = 0;
        let mag = Array2::<f64>::from_elem((7, c.n_bins()), 0.3);
        let out = griffin_lim(&mag, &c0).unwrap();
        assert_eq!(out.len(), 7 * c0.hop_len, "length contract at zero iters");
    }
}
