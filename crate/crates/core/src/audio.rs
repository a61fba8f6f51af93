//! WAV input/output, peak normalisation and rational-ratio resampling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Rates the feature pipeline is exercised with.
pub const PIPELINE_RATES: [u32; 4] = [8000, 16000, 44100, 48000];
pub const KAISER_BETA: f64 = 12.0;
/// Zero crossings of the interpolation sinc on each side of its centre.
pub const ZERO_CROSSINGS: usize = 64;

const PCM_TAG: u16 = 0x0001;
const FLOAT_TAG: u16 = 0x0003;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Outcome of [`AudioClip::peak_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Peak {
    Scaled,
    /// All samples are zero; the clip was left untouched.
    Silent,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scales so the largest magnitude is exactly 1.0 (0 dB full scale).
    pub fn peak_normalize(&self) -> (AudioClip, Peak) {
        let peak = self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            log::warn!("peak normalisation skipped: clip is silent");
            return (self.clone(), Peak::Silent);
        }
        let samples = self.samples.iter().map(|v| v / peak).collect();
        (AudioClip { samples, sample_rate: self.sample_rate }, Peak::Scaled)
    }

    /// Band-limited resampling to `target_rate`; output length is
    /// `round(n * target / source)`.
    pub fn resample(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == 0 || self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rates must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let r = Resampler::new(self.sample_rate, target_rate);
        Ok(AudioClip { samples: r.process(&self.samples), sample_rate: target_rate })
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Polyphase windowed-sinc resampler for the ratio `up / down`.
struct Resampler {
    up: u64,
    down: u64,
    /// Taps per phase; tap `m` of phase `p` weights input `base - half + m`.
    taps: usize,
    half: usize,
    table: Vec<f64>,
}

impl Resampler {
    fn new(source: u32, target: u32) -> Self {
        let g = gcd(source as u64, target as u64);
        let (up, down) = (target as u64 / g, source as u64 / g);
        let cutoff = (up as f64 / down as f64).min(1.0);
        let width = ZERO_CROSSINGS as f64 / cutoff;
        let half = width.ceil() as usize;
        let taps = 2 * half + 1;
        let norm = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up as usize * taps];
        for p in 0..up as usize {
            let frac = p as f64 / up as f64;
            for m in 0..taps {
                // distance from output time to this input sample
                let tau = frac + half as f64 - m as f64;
                if tau.abs() < width {
                    let r = tau / width;
                    let kaiser = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                    table[p * taps + m] = cutoff * sinc(cutoff * tau) * kaiser;
                }
            }
        }
        Self { up, down, taps, half, table }
    }

    fn process(&self, x: &[f64]) -> Vec<f64> {
        let n_out = ((x.len() as u64 * self.up) as f64 / self.down as f64).round() as usize;
        let n = x.len() as isize;
        (0..n_out as u64)
            .map(|j| {
                let num = j * self.down;
                let base = (num / self.up) as isize;
                let phase = (num % self.up) as usize;
                let row = &self.table[phase * self.taps..(phase + 1) * self.taps];
                let start = base - self.half as isize;
                row.iter()
                    .enumerate()
                    .filter_map(|(m, &h)| {
                        let i = start + m as isize;
                        (i >= 0 && i < n).then(|| h * x[i as usize])
                    })
                    .sum()
            })
            .collect()
    }
}

/// Byte offset scan for the `fmt ` chunk; returns (format tag, bits).
fn sniff_format(bytes: &[u8]) -> Option<(u16, u16)> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return None;
    }
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().ok()?) as usize;
        if id == b"fmt " && pos + 24 <= bytes.len() {
            let tag = u16::from_le_bytes([bytes[pos + 8], bytes[pos + 9]]);
            let bits = u16::from_le_bytes([bytes[pos + 22], bytes[pos + 23]]);
            return Some((tag, bits));
        }
        pos += 8 + size + (size & 1);
    }
    None
}

/// Reads 16-bit PCM or 32-bit float WAV, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tag, bits) = sniff_format(&bytes).ok_or_else(|| Error::Wav(format!("{}: not a RIFF/WAVE file", path.display())))?;
    let reader = WavReader::new(std::io::Cursor::new(&bytes)).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedWav { tag, bits },
        other => Error::Wav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let wav_err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        _ => return Err(Error::UnsupportedWav { tag, bits: spec.bits_per_sample }),
    };
    let ch = spec.channels.max(1) as usize;
    let samples = interleaved.chunks(ch).map(|f| f.iter().sum::<f64>() / ch as f64).collect();
    Ok(AudioClip { samples, sample_rate: spec.sample_rate })
}

/// Quantises to 16-bit PCM mono.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let wav_err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let mut w = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        w.write_sample(quantize(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Known format tags, for diagnostics.
pub fn format_tag_name(tag: u16) -> &'static str {
    match tag {
        PCM_TAG => "PCM",
        FLOAT_TAG => "IEEE float",
        0x0002 => "ADPCM",
        0x0006 => "A-law",
        0x0007 => "mu-law",
        0xFFFE => "extensible",
        _ => "unknown",
    }
}
