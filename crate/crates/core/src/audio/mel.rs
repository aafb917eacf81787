//! Log-Mel spectrogram extraction.
//!
//! 16 kHz mono input, 128 ms FFT window (2048 samples) sliding at a 10 ms
//! hop (160 samples), Hann window, 128 triangular Mel filters over the
//! magnitude-squared spectrum from 0 to 8 kHz (HTK Mel scale), natural log
//! with a floor. A 3-second clip yields exactly 300 frames: frame `t` reads
//! samples `[t*hop, t*hop + n_fft)` with zero padding past the clip end.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub frames: usize,
    pub clip_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            n_fft: 2048,
            hop: 160,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
            frames: 300,
            clip_seconds: 3.0,
        }
    }
}

impl FrontendConfig {
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.n_mels == 0 || self.frames == 0 {
            return Err(Error::Config("front-end sizes must be positive".into()));
        }
        if self.fmax <= self.fmin || self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "mel range [{}, {}] invalid for sample rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank rows over the `n_fft/2 + 1` spectrum bins.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    let rising = (f - lo) / (mid - lo);
                    let falling = (hi - f) / (hi - mid);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Frequency support of each filter, for tests that locate tone energy.
pub fn mel_filter_ranges(cfg: &FrontendConfig) -> Vec<(f64, f64)> {
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels).map(|m| (edges[m], edges[m + 2])).collect()
}

/// Extract a `(frames, n_mels)` log-Mel spectrogram from a mono waveform.
/// The waveform must be at the configured rate; shorter clips are
/// zero-padded to the clip length, longer ones rejected.
pub fn log_mel(waveform: &[f64], sample_rate: u32, cfg: &FrontendConfig) -> Result<Tensor> {
    cfg.validate()?;
    if sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "front-end requires {} Hz input, got {} Hz",
            cfg.sample_rate, sample_rate
        )));
    }
    let want = cfg.clip_samples();
    if waveform.len() > want {
        return Err(Error::Shape(format!(
            "clip has {} samples, expected at most {want}",
            waveform.len()
        )));
    }
    let mut padded = waveform.to_vec();
    padded.resize(want, 0.0);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let window: Vec<f64> = (0..cfg.n_fft)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / cfg.n_fft as f64).cos()))
        .collect();
    let bank = mel_filterbank(cfg);
    let n_bins = cfg.n_fft / 2 + 1;

    let mut out = vec![0.0; cfg.frames * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for t in 0..cfg.frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            let s = padded.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for (m, filter) in bank.iter().enumerate() {
            let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[t * cfg.n_mels + m] = e.max(cfg.log_floor).ln();
        }
    }
    Ok(Tensor::new(vec![cfg.frames, cfg.n_mels], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = FrontendConfig::default();
        let spec = log_mel(&vec![0.0; cfg.clip_samples()], 16_000, &cfg).unwrap();
        assert_eq!(spec.shape(), &[300, 128]);
        let floor = cfg.log_floor.ln();
        assert!(spec.data().iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn wrong_sample_rate_is_rejected_with_required_rate() {
        let cfg = FrontendConfig::default();
        let err = log_mel(&[0.0; 100], 48_000, &cfg).unwrap_err();
        assert!(err.to_string().contains("16000"));
    }

    #[test]
    fn shape_is_stable_and_deterministic() {
        let cfg = FrontendConfig::default();
        let wave: Vec<f64> = (0..cfg.clip_samples())
            .map(|i| (i as f64 * 0.01).sin() * 0.3)
            .collect();
        let a = log_mel(&wave, 16_000, &cfg).unwrap();
        let b = log_mel(&wave, 16_000, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[cfg.frames, cfg.n_mels]);
        // short input is zero-padded, not rejected
        let short = log_mel(&wave[..1000], 16_000, &cfg).unwrap();
        assert_eq!(short.shape(), &[300, 128]);
    }

    #[test]
    fn pure_tone_concentrates_in_covering_mel_bins() {
        let cfg = FrontendConfig::default();
        let freq = 1000.0;
        let wave: Vec<f64> = (0..cfg.clip_samples())
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let spec = log_mel(&wave, 16_000, &cfg).unwrap();
        // bins whose triangles cover 1 kHz, from the filterbank definition
        let covering: Vec<usize> = mel_filter_ranges(&cfg)
            .iter()
            .enumerate()
            .filter(|(_, (lo, hi))| *lo <= freq && freq <= *hi)
            .map(|(i, _)| i)
            .collect();
        assert!(!covering.is_empty());
        // every frame's argmax bin covers the tone; energy is stationary
        let mut frame_max = Vec::new();
        for t in 0..cfg.frames {
            let row = &spec.data()[t * cfg.n_mels..(t + 1) * cfg.n_mels];
            let (argmax, max) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, v)| (i, *v))
                .unwrap();
            assert!(
                covering.contains(&argmax),
                "frame {t}: argmax bin {argmax} not in covering set {covering:?}"
            );
            frame_max.push(max);
        }
        // interior frames (full window support) vary by well under 1 dB-ish
        let interior = &frame_max[13..cfg.frames - 13];
        let lo = interior.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = interior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 0.1, "tone not stationary: spread {}", hi - lo);
    }
}
