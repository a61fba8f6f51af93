//! JSON-lines manifests and the in-memory corpus built from them.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::labels::{bin_ratings, Binned, SoftLabel};
use crate::error::{Error, Result};
use crate::features::{cache_read, FeatureMatrix};

/// One line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub dataset: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    /// Empty for unlabelled utterances.
    #[serde(default)]
    pub ratings: Vec<f64>,
    pub scale_midpoint: f64,
}

impl UtteranceRecord {
    /// `None` for unlabelled records.
    pub fn binned(&self) -> Result<Option<Binned>> {
        if self.ratings.is_empty() {
            return Ok(None);
        }
        bin_ratings(&self.ratings, self.scale_midpoint)
            .map(Some)
            .map_err(|e| Error::Label(format!("record {}: {e}", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetTag {
    pub name: String,
    pub index: usize,
}

/// Relative paths in a manifest are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: UtteranceRecord =
            serde_json::from_str(&line).map_err(|source| Error::Json { path: path.into(), line: i + 1, source })?;
        for p in [&mut rec.feature_path, &mut rec.audio_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    crate::fsio::write_atomic(path, &buf)
}

/// Label histogram for one dataset of a manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSummary {
    pub name: String,
    pub records: usize,
    /// Accepted labels per majority bin (low, mid, high).
    pub bins: [usize; 3],
    pub rejected: usize,
    pub unlabeled: usize,
}

impl DatasetSummary {
    pub fn summarize(records: &[UtteranceRecord]) -> Result<Vec<DatasetSummary>> {
        let mut out: Vec<DatasetSummary> = Vec::new();
        for r in records {
            let idx = match out.iter().position(|s| s.name == r.dataset) {
                Some(i) => i,
                None => {
                    out.push(DatasetSummary { name: r.dataset.clone(), ..Default::default() });
                    out.len() - 1
                }
            };
            let s = &mut out[idx];
            s.records += 1;
            match r.binned()? {
                None => s.unlabeled += 1,
                Some(Binned::Rejected { .. }) => s.rejected += 1,
                Some(Binned::Label(l)) => s.bins[l.class()] += 1,
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub dataset: usize,
    pub subject: String,
    pub features: Arc<FeatureMatrix>,
    pub label: Option<SoftLabel>,
}

/// Utterances of one experiment; ids elsewhere are indices into `utterances`.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub datasets: Vec<DatasetTag>,
    pub utterances: Vec<Utterance>,
    /// Records dropped for lacking a unique majority bin.
    pub rejected: usize,
}

impl Corpus {
    /// Loads the feature caches referenced by `manifests`. Dataset indices
    /// follow first appearance. Tie-labelled records are dropped.
    pub fn load(manifests: &[PathBuf]) -> Result<Self> {
        let mut corpus = Corpus::default();
        for m in manifests {
            for rec in read_manifest(m)? {
                let label = match rec.binned()? {
                    Some(Binned::Rejected { .. }) => {
                        corpus.rejected += 1;
                        continue;
                    }
                    Some(Binned::Label(l)) => Some(l),
                    None => None,
                };
                let Some(fp) = &rec.feature_path else {
                    return Err(Error::Data(format!(
                        "record {} has no feature_path; run extract-features first",
                        rec.id
                    )));
                };
                let features = Arc::new(cache_read(fp)?);
                corpus.push(rec.id, &rec.dataset, rec.subject, features, label);
            }
        }
        Ok(corpus)
    }

    pub fn push(
        &mut self,
        id: String,
        dataset: &str,
        subject: String,
        features: Arc<FeatureMatrix>,
        label: Option<SoftLabel>,
    ) -> usize {
        let dataset = self.dataset_index_or_insert(dataset);
        self.utterances.push(Utterance { id, dataset, subject, features, label });
        self.utterances.len() - 1
    }

    fn dataset_index_or_insert(&mut self, name: &str) -> usize {
        if let Some(t) = self.datasets.iter().find(|t| t.name == name) {
            return t.index;
        }
        let index = self.datasets.len();
        self.datasets.push(DatasetTag { name: name.to_string(), index });
        index
    }

    pub fn dataset_index(&self, name: &str) -> Option<usize> {
        self.datasets.iter().find(|t| t.name == name).map(|t| t.index)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Ids of every utterance belonging to any of `datasets`.
    pub fn ids_in(&self, datasets: &[usize]) -> Vec<usize> {
        (0..self.utterances.len()).filter(|&i| datasets.contains(&self.utterances[i].dataset)).collect()
    }
}
