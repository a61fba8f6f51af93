//! 40-band log mel filterbank features and their binary cache.
//!
//! Framing follows the usual speech-toolkit defaults: 25 ms windows every
//! 10 ms with snip-edges framing, per-frame DC removal, 0.97 preemphasis,
//! a Povey window, zero padding to a power of two, power spectrum,
//! triangular mel filters from 20 Hz to Nyquist and a natural log floored
//! at the smallest normal `f32`. Dithering is off. Samples are scaled to
//! the 16-bit integer range before analysis.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::models::N_MELS;

pub const FRAME_LENGTH_MS: f64 = 25.0;
pub const FRAME_SHIFT_MS: f64 = 10.0;
pub const PREEMPHASIS: f64 = 0.97;
pub const LOW_CUTOFF_HZ: f64 = 20.0;
pub const LOG_FLOOR: f64 = f32::MIN_POSITIVE as f64;
const WAVE_SCALE: f64 = 32768.0;
const CACHE_MAGIC: &[u8; 4] = b"MFB1";

/// `frames x dims` row-major matrix of 32-bit features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if frames * dims != data.len() {
            return Err(Error::shape("feature matrix", format!("{frames}x{dims} vs {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self { frames, dims, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }
}

pub fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn inverse_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// `w[n] = (0.5 - 0.5 cos(2 pi n / (N - 1)))^0.85`.
pub fn povey_window(n: usize) -> Vec<f64> {
    assert!(n >= 2, "window needs at least two samples");
    let denom = (n - 1) as f64;
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos()).powf(0.85)).collect()
}

/// Triangular filters evenly spaced on the mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels x n_bins`, row-major.
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// Filters over FFT bins `0..n_bins` (bin `i` at `i * rate / (2 n_bins)` Hz).
    pub fn new(n_bins: usize, sample_rate: u32, n_mels: usize, low_hz: f64, high_hz: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(low_hz >= 0.0 && low_hz < high_hz && high_hz <= nyquist) {
            return Err(Error::InvalidArgument(format!(
                "mel band {low_hz}..{high_hz} Hz invalid for Nyquist {nyquist}"
            )));
        }
        let bin_hz = nyquist / n_bins as f64;
        let (mlo, mhi) = (mel(low_hz), mel(high_hz));
        let delta = (mhi - mlo) / (n_mels + 1) as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        let mut centers_hz = Vec::with_capacity(n_mels);
        for k in 0..n_mels {
            let left = mlo + k as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            centers_hz.push(inverse_mel(center));
            let row = &mut weights[k * n_bins..(k + 1) * n_bins];
            for (i, w) in row.iter_mut().enumerate() {
                let m = mel(bin_hz * i as f64);
                if m > left && m < right {
                    *w = if m <= center { (m - left) / (center - left) } else { (right - m) / (right - center) };
                }
            }
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "mel filter {k} covers no FFT bin; {n_mels} filters are too many for {n_bins} bins"
                )));
            }
        }
        Ok(Self { weights, n_mels, n_bins, centers_hz })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_bins..(k + 1) * self.n_bins]
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.centers_hz[k]
    }

    /// Filter energies for a power spectrum of at least `n_bins` values.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels).map(|k| self.filter(k).iter().zip(power).map(|(w, p)| w * p).sum()).collect()
    }
}

pub fn mel_filterbank(n_bins: usize, sample_rate: u32) -> Result<MelFilterbank> {
    MelFilterbank::new(n_bins, sample_rate, N_MELS, LOW_CUTOFF_HZ, sample_rate as f64 / 2.0)
}

/// Framing and spectral analysis setup for one sample rate.
pub struct MfbExtractor {
    rate: u32,
    win: usize,
    shift: usize,
    fft_len: usize,
    window: Vec<f64>,
    bank: MelFilterbank,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl MfbExtractor {
    pub fn new(sample_rate: u32) -> Result<Self> {
        let win = (sample_rate as f64 * FRAME_LENGTH_MS / 1000.0).round() as usize;
        let shift = (sample_rate as f64 * FRAME_SHIFT_MS / 1000.0).round() as usize;
        if win < 2 || shift == 0 {
            return Err(Error::InvalidArgument(format!("sample rate {sample_rate} too low")));
        }
        let fft_len = win.next_power_of_two();
        Ok(Self {
            rate: sample_rate,
            win,
            shift,
            fft_len,
            window: povey_window(win),
            bank: mel_filterbank(fft_len / 2, sample_rate)?,
            fft: FftPlanner::new().plan_fft_forward(fft_len),
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.rate
    }

    pub fn window_samples(&self) -> usize {
        self.win
    }

    pub fn shift_samples(&self) -> usize {
        self.shift
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// `1 + (n - win) / shift`, or `None` when fewer than `win` samples.
    pub fn frame_count(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.win).then(|| 1 + (n_samples - self.win) / self.shift)
    }

    /// Log mel energies of one frame of `win` samples.
    pub fn frame_energies(&self, frame: &[f64]) -> Vec<f64> {
        debug_assert_eq!(frame.len(), self.win);
        let mut x: Vec<f64> = frame.iter().map(|v| v * WAVE_SCALE).collect();
        let dc = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= dc);
        for i in (1..x.len()).rev() {
            x[i] -= PREEMPHASIS * x[i - 1];
        }
        x[0] -= PREEMPHASIS * x[0];
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.fft_len];
        for (b, (v, w)) in buf.iter_mut().zip(x.iter().zip(&self.window)) {
            b.re = v * w;
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.fft_len / 2].iter().map(|c| c.norm_sqr()).collect();
        self.bank.apply(&power).into_iter().map(|e| e.max(LOG_FLOOR).ln()).collect()
    }

    pub fn extract(&self, samples: &[f64]) -> Result<FeatureMatrix> {
        let frames = self.frame_count(samples.len()).ok_or(Error::TooShort {
            op: "extract_mfb",
            got: samples.len(),
            need: self.win,
        })?;
        let mut data = Vec::with_capacity(frames * N_MELS);
        for t in 0..frames {
            let start = t * self.shift;
            data.extend(self.frame_energies(&samples[start..start + self.win]).into_iter().map(|v| v as f32));
        }
        FeatureMatrix::new(frames, N_MELS, data)
    }
}

pub fn extract_mfb(clip: &AudioClip) -> Result<FeatureMatrix> {
    MfbExtractor::new(clip.sample_rate)?.extract(&clip.samples)
}

/// Writes `MFB1`, u32 rows, u32 cols (little endian) and the f32 payload.
pub fn cache_write(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + m.data.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(m.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dims as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    crate::fsio::write_atomic(path, &buf)
}

pub fn cache_read(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "MFB1" });
    }
    let corrupt = |detail: String| Error::Corrupt { path: path.into(), detail };
    if bytes.len() < 12 {
        return Err(corrupt("truncated header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(corrupt(format!("header says {rows}x{cols} but payload has {} bytes", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    FeatureMatrix::new(rows, cols, data).map_err(|e| corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn povey_examples() {
        let w = povey_window(5);
        assert_eq!(w[0], 0.0);
        assert!((w[2] - 1.0).abs() < 1e-15);
        assert!((w[1] - 0.5f64.powf(0.85)).abs() < 1e-12);
        assert!((w[1] - 0.5547).abs() < 1e-4);
    }

    #[test]
    fn mel_examples() {
        assert_eq!(mel(0.0), 0.0);
        assert!((mel(700.0) - 1127.0 * 2f64.ln()).abs() < 1e-12);
        assert!((mel(700.0) - 781.17).abs() < 0.01);
        assert!((inverse_mel(mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rejects_too_many_filters() {
        assert!(MelFilterbank::new(16, 16000, 40, 20.0, 8000.0).is_err());
        assert!(MelFilterbank::new(256, 16000, 40, 20.0, 9000.0).is_err());
    }

    #[test]
    fn filters_are_positive_and_partition_interior() {
        let bank = mel_filterbank(256, 16000).unwrap();
        for k in 0..40 {
            assert!(bank.filter(k).iter().sum::<f64>() > 0.0);
            assert!(bank.filter(k).iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        let bin_hz = 8000.0 / 256.0;
        for i in 0..256 {
            let f = i as f64 * bin_hz;
            let total: f64 = (0..40).map(|k| bank.filter(k)[i]).sum();
            assert!(total <= 1.0 + 1e-6);
            if f >= bank.center_hz(0) && f <= bank.center_hz(39) {
                assert!(total > 0.0, "bin {i} uncovered");
            }
        }
    }

    #[test]
    fn frame_count_for_one_second() {
        let ex = MfbExtractor::new(16000).unwrap();
        assert_eq!(ex.frame_count(16000), Some(98));
        assert_eq!(ex.frame_count(399), None);
        let e = ex.extract(&[0.0; 399]).unwrap_err();
        assert!(matches!(e, Error::TooShort { need: 400, .. }));
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = AudioClip { samples: vec![0.0; 800], sample_rate: 16000 };
        let m = extract_mfb(&clip).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn cache_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mfb");
        let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap();
        cache_write(&m, &p).unwrap();
        assert_eq!(cache_read(&p).unwrap(), m);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(cache_read(&p), Err(Error::Corrupt { .. })));
        bytes[..4].copy_from_slice(b"MFB2");
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(cache_read(&p), Err(Error::BadMagic { .. })));
    }
}
