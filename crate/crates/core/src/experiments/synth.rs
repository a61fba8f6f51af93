//! Synthetic domain-shift corpus.
//!
//! Each utterance is a `T x 40` log-energy matrix built from
//!
//! * a class template: a Gaussian bump over a class-specific band, scaled
//!   per frame by a random gain,
//! * a per-subject offset vector,
//! * the dataset's offset: `level + tilt * (2c/39 - 1)` on mel bin `c`,
//! * a nuisance band, present with probability `rho` at a level set by the
//!   class and flat otherwise,
//! * Gaussian noise of standard deviation `sigma`.
//!
//! Labels come from three simulated annotators on a 1..5 scale. Draws with
//! no unique majority, or a majority off the latent class, are redrawn.
//! In WAV mode each matrix is rendered as a tone mixture at the mel
//! centre frequencies and the cached features are extracted from that audio.

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{write_wav, AudioClip};
use crate::config::KeyValues;
use crate::data::{bin_ratings, write_manifest, Binned, Corpus, UtteranceRecord};
use crate::error::{Error, Result};
use crate::features::{cache_write, FeatureMatrix, MfbExtractor};
use crate::models::{N_CLASSES, N_MELS, RECEPTIVE_FIELD};
use crate::seed::{rng_for, RunRng};

/// Mel bins carrying the nuisance level.
pub const NUISANCE_BINS: Range<usize> = 33..38;
/// Centre bins of the low / mid / high class templates.
pub const TEMPLATE_CENTRES: [f64; N_CLASSES] = [6.0, 15.0, 24.0];
const TEMPLATE_WIDTH: f64 = 2.5;
const RATING_MIDPOINT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub name: String,
    pub utterances: usize,
    pub subjects: usize,
    pub tilt: f64,
    pub level: f64,
    /// Probability that the nuisance band is present and encodes the class.
    pub rho: f64,
    pub sigma: f64,
    /// Audio rate in WAV mode.
    pub rate: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub datasets: Vec<SynthDataset>,
    pub class_strength: f64,
    pub nuisance_strength: f64,
    pub subject_spread: f64,
    /// Probability that one annotator rates in the latent bin.
    pub annotator_agreement: f64,
    pub frames: Range<usize>,
    pub wav: bool,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text, "synth spec", Path::new(""))?)
    }

    fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let names: Vec<String> =
            kv.take_list("datasets")?.ok_or_else(|| Error::Config("synth spec needs a datasets list".into()))?;
        let frames = match kv.take("frames") {
            Some(s) => {
                let (a, b) = s.split_once("..").ok_or_else(|| Error::Config(format!("frames must be lo..hi, got {s}")))?;
                let lo: usize = a.trim().parse().map_err(|_| Error::Config(format!("bad frames {s}")))?;
                let hi: usize = b.trim().parse().map_err(|_| Error::Config(format!("bad frames {s}")))?;
                lo..hi + 1
            }
            None => 24..37,
        };
        let mut datasets = Vec::new();
        for name in names {
            let mut get = |k: &str, default: f64| -> Result<f64> {
                Ok(kv.take_parsed(&format!("{name}.{k}"))?.unwrap_or(default))
            };
            let utterances = get("utterances", 600.0)? as usize;
            let subjects = get("subjects", 10.0)? as usize;
            let (tilt, level, rho, sigma) = (get("tilt", 0.0)?, get("level", 0.0)?, get("rho", 0.0)?, get("sigma", 0.3)?);
            let rate = get("rate", 16000.0)? as u32;
            datasets.push(SynthDataset { name, utterances, subjects, tilt, level, rho, sigma, rate });
        }
        let spec = Self {
            seed: kv.take_parsed("seed")?.unwrap_or(0),
            class_strength: kv.take_parsed("class_strength")?.unwrap_or(1.0),
            nuisance_strength: kv.take_parsed("nuisance_strength")?.unwrap_or(1.0),
            subject_spread: kv.take_parsed("subject_spread")?.unwrap_or(0.2),
            annotator_agreement: kv.take_parsed("annotator_agreement")?.unwrap_or(0.7),
            wav: kv.take_parsed("wav")?.unwrap_or(false),
            frames,
            datasets,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("infeasible synth spec: {m}")));
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        if self.frames.start < RECEPTIVE_FIELD || self.frames.is_empty() {
            return bad(format!("frames must be at least {RECEPTIVE_FIELD}"));
        }
        if !(self.annotator_agreement > 0.5 && self.annotator_agreement <= 1.0) {
            return bad("annotator_agreement must be in (0.5, 1]".into());
        }
        for d in &self.datasets {
            if !(0.0..=1.0).contains(&d.rho) || !(d.sigma >= 0.0) {
                return bad(format!("{}: rho must be in [0,1] and sigma >= 0", d.name));
            }
            if d.subjects == 0 || d.utterances < 2 * N_CLASSES * d.subjects {
                return bad(format!("{}: need at least 2 utterances per class per subject", d.name));
            }
            if d.rate < 8000 {
                return bad(format!("{}: rate below 8000 Hz", d.name));
            }
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate dataset names".into());
        }
        Ok(())
    }
}

pub fn template(class: usize, strength: f64) -> [f64; N_MELS] {
    std::array::from_fn(|c| {
        let z = (c as f64 - TEMPLATE_CENTRES[class]) / TEMPLATE_WIDTH;
        strength * (-0.5 * z * z).exp()
    })
}

pub fn domain_offset(d: &SynthDataset) -> [f64; N_MELS] {
    std::array::from_fn(|c| d.level + d.tilt * (2.0 * c as f64 / (N_MELS - 1) as f64 - 1.0))
}

/// One generated utterance before it is written anywhere.
#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub record: UtteranceRecord,
    pub class: usize,
    /// The class the nuisance band encodes, if present.
    pub nuisance: Option<usize>,
    pub features: FeatureMatrix,
    /// The rendered audio the features were extracted from, in WAV mode.
    pub audio: Option<AudioClip>,
}

fn annotate(class: usize, agreement: f64, rng: &mut RunRng) -> Vec<f64> {
    loop {
        let ratings: Vec<f64> = (0..3)
            .map(|_| {
                let bin = if rng.random_bool(agreement) { class } else { (class + rng.random_range(1..N_CLASSES)) % N_CLASSES };
                match bin {
                    0 => rng.random_range(1..=2) as f64,
                    1 => 3.0,
                    _ => rng.random_range(4..=5) as f64,
                }
            })
            .collect();
        if let Ok(Binned::Label(l)) = bin_ratings(&ratings, RATING_MIDPOINT) {
            if l.class() == class {
                return ratings;
            }
        }
    }
}

/// Generates one dataset deterministically from `(spec.seed, index)`.
pub fn generate_dataset(spec: &SynthSpec, index: usize) -> Result<Vec<SynthUtterance>> {
    let d = &spec.datasets[index];
    let mut rng = rng_for(spec.seed, "synth", index as u64);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let offset = domain_offset(d);
    let templates: Vec<[f64; N_MELS]> = (0..N_CLASSES).map(|k| template(k, spec.class_strength)).collect();
    let extractor = if spec.wav { Some(MfbExtractor::new(d.rate)?) } else { None };

    let mut out = Vec::with_capacity(d.utterances);
    for s in 0..d.subjects {
        let n_s = d.utterances / d.subjects + usize::from(s < d.utterances % d.subjects);
        let subject_offset: Vec<f64> = (0..N_MELS).map(|_| spec.subject_spread * std_normal.sample(&mut rng)).collect();
        let mut classes: Vec<usize> = (0..n_s).map(|i| i % N_CLASSES).collect();
        classes.shuffle(&mut rng);
        for (j, &class) in classes.iter().enumerate() {
            let frames = rng.random_range(spec.frames.clone());
            let nuisance = rng.random_bool(d.rho).then_some(class);
            let nuisance_level = nuisance.map_or(0.0, |k| spec.nuisance_strength * (k as f64 - 1.0));
            let mut data = Vec::with_capacity(frames * N_MELS);
            for _ in 0..frames {
                let gain = rng.random_range(0.5..1.5);
                for c in 0..N_MELS {
                    let mut v = gain * templates[class][c] + subject_offset[c] + offset[c];
                    if NUISANCE_BINS.contains(&c) {
                        v += nuisance_level;
                    }
                    v += d.sigma * std_normal.sample(&mut rng);
                    data.push(v as f32);
                }
            }
            let mut features = FeatureMatrix::new(frames, N_MELS, data)?;
            let mut audio = None;
            if let Some(ex) = &extractor {
                let clip = AudioClip::new(render_tones(&features, ex, &mut rng), d.rate);
                features = ex.extract(&clip.samples)?;
                audio = Some(clip);
            }
            let ratings = annotate(class, spec.annotator_agreement, &mut rng);
            let id = format!("{}-s{s:02}-{j:04}", d.name);
            out.push(SynthUtterance {
                record: UtteranceRecord {
                    id,
                    dataset: d.name.clone(),
                    subject: format!("{}-s{s:02}", d.name),
                    feature_path: None,
                    audio_path: None,
                    ratings,
                    scale_midpoint: RATING_MIDPOINT,
                },
                class,
                nuisance,
                features,
                audio,
            });
        }
    }
    Ok(out)
}

/// Renders a log-energy matrix as sinusoids at the mel centres with
/// amplitude `exp(v / 2)`, linearly interpolated between frame centres.
fn render_tones(m: &FeatureMatrix, ex: &MfbExtractor, rng: &mut RunRng) -> Vec<f64> {
    let (win, shift) = (ex.window_samples(), ex.shift_samples());
    let n = win + (m.frames() - 1) * shift;
    let rate = ex.sample_rate() as f64;
    let mut samples = vec![0.0; n];
    for c in 0..N_MELS {
        let omega = 2.0 * PI * ex.filterbank().center_hz(c) / rate;
        let phase = rng.random_range(0.0..2.0 * PI);
        for (i, s) in samples.iter_mut().enumerate() {
            let pos = (i as f64 - win as f64 / 2.0) / shift as f64;
            let t0 = pos.floor().clamp(0.0, (m.frames() - 1) as f64) as usize;
            let t1 = (t0 + 1).min(m.frames() - 1);
            let frac = (pos - t0 as f64).clamp(0.0, 1.0);
            let v = (1.0 - frac) * m.frame(t0)[c] as f64 + frac * m.frame(t1)[c] as f64;
            *s += (v / 2.0).exp() * (omega * i as f64 + phase).sin();
        }
    }
    let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    // round through 16-bit so cached features match what a reader of the WAV sees
    samples.iter().map(|&v| crate::audio::quantize(v) as f64 / 32768.0).collect()
}

/// The generated corpus in memory, datasets in spec order.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut corpus = Corpus::default();
    for i in 0..spec.datasets.len() {
        for u in generate_dataset(spec, i)? {
            let label = match u.record.binned()? {
                Some(Binned::Label(l)) => Some(l),
                _ => None,
            };
            corpus.push(u.record.id, &u.record.dataset, u.record.subject, Arc::new(u.features), label);
        }
    }
    Ok(corpus)
}

/// Writes `<out>/<name>.jsonl` manifests and `<out>/features/<name>/*.mfb`
/// caches (plus `<out>/audio/<name>/*.wav` in WAV mode). Returns the
/// manifest paths in spec order.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut manifests = Vec::new();
    for (i, d) in spec.datasets.iter().enumerate() {
        let feat_dir = PathBuf::from("features").join(&d.name);
        let audio_dir = PathBuf::from("audio").join(&d.name);
        fs::create_dir_all(out.join(&feat_dir)).map_err(|e| Error::io(out, e))?;
        if spec.wav {
            fs::create_dir_all(out.join(&audio_dir)).map_err(|e| Error::io(out, e))?;
        }
        let mut records = Vec::new();
        for mut u in generate_dataset(spec, i)? {
            let fp = feat_dir.join(format!("{}.mfb", u.record.id));
            cache_write(&u.features, &out.join(&fp))?;
            u.record.feature_path = Some(fp);
            if let Some(clip) = &u.audio {
                let ap = audio_dir.join(format!("{}.wav", u.record.id));
                write_wav(clip, &out.join(&ap))?;
                u.record.audio_path = Some(ap);
            }
            records.push(u.record);
        }
        let m = out.join(format!("{}.jsonl", d.name));
        write_manifest(&m, &records)?;
        manifests.push(m);
    }
    Ok(manifests)
}
