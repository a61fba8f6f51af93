//! Audio manifests to feature caches.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::manifest::{read_manifest, write_manifest, UtteranceRecord};
use crate::audio::{read_wav, AudioClip};
use crate::error::{Error, Result};
use crate::features::{cache_write, FeatureMatrix, MfbExtractor};

/// Rates audio may be brought to before extraction.
pub const EXTRACT_RATES: [u32; 2] = [8000, 16000];

/// Resample to `rate`, then peak-normalise, then extract.
pub fn clip_features(clip: &AudioClip, extractor: &MfbExtractor) -> Result<FeatureMatrix> {
    let (clip, _) = clip.resample(extractor.sample_rate())?.peak_normalize();
    extractor.extract(&clip.samples)
}

/// Extracts every record's audio into `<out>/features/<dataset>/<id>.mfb`
/// and writes `<out>/<manifest file name>` pointing at the caches.
/// Returns the new manifest path.
pub fn extract_manifest(manifest: &Path, out: &Path, rate: u32) -> Result<PathBuf> {
    if !EXTRACT_RATES.contains(&rate) {
        return Err(Error::Config(format!("rate must be 8000 or 16000, got {rate}")));
    }
    let extractor = MfbExtractor::new(rate)?;
    let records = read_manifest(manifest)?;
    let name = manifest.file_name().ok_or_else(|| Error::Config(format!("{} is not a file", manifest.display())))?;
    let target = out.join(name);
    if target == manifest {
        return Err(Error::Config("output manifest would overwrite the input".into()));
    }
    let updated = records
        .par_iter()
        .map(|r| -> Result<UtteranceRecord> {
            let audio = r.audio_path.as_ref().ok_or_else(|| Error::Data(format!("record {} has no audio_path", r.id)))?;
            let features = clip_features(&read_wav(audio)?, &extractor)?;
            let rel = PathBuf::from("features").join(&r.dataset).join(format!("{}.mfb", r.id));
            cache_write(&features, &out.join(&rel))?;
            Ok(UtteranceRecord { feature_path: Some(rel), ..r.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&target, &updated)?;
    Ok(target)
}
