//! Experiment protocols: fold plans per repeat, the training runs they
//! imply, and per-subject UAR reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::metrics::uar;
use crate::config::{Protocol, RunConfig};
use crate::data::{split_exp1, split_fig4, Corpus, FoldPlan, Half};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::seed::derive_seed;
use crate::models::ParamSet;
use crate::train::{fit, write_epoch_csv, EpochRecord, FitResult, Method, Pools, TrainConfig, Trainer};

pub const REPORT_HEADER: &str = "method,budget,repeat,subject,uar";

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub protocol: Protocol,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub channels: usize,
    pub epochs: usize,
}

impl ExperimentPlan {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            protocol: cfg.experiment,
            methods: cfg.methods.clone(),
            budgets: cfg.budgets.clone(),
            repeats: cfg.repeats,
            seed: cfg.seed,
            channels: cfg.channels,
            epochs: cfg.epochs,
        }
    }

    /// Methods run at `budget`. An empty method list means the protocol
    /// defaults: CNN and ADDoG, plus SP when labelled target data exists
    /// and MADDoG when there are several source datasets.
    pub fn methods_at(&self, budget: usize, n_src_datasets: usize) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            let mut m = vec![Method::Cnn];
            if self.protocol != Protocol::Exp1 && budget > 0 {
                m.push(Method::Sp);
            }
            m.push(Method::Addog);
            if self.protocol != Protocol::Exp1 && n_src_datasets >= 2 {
                m.push(Method::Maddog);
            }
            return Ok(m);
        }
        if budget == 0 && self.methods.contains(&Method::Sp) {
            return Err(Error::Config("SP cannot be trained without labelled target data (budget 0)".into()));
        }
        if n_src_datasets < 2 && self.methods.contains(&Method::Maddog) {
            return Err(Error::Config("MADDoG needs at least 2 source datasets".into()));
        }
        Ok(self.methods.clone())
    }
}

/// Repeats x subjects UAR grid for one (method, budget) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectUarMatrix {
    pub method: Method,
    pub budget: usize,
    pub subjects: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SubjectUarMatrix {
    pub fn repeat_means(&self) -> Vec<f64> {
        self.values.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
    }

    /// Mean and sample standard deviation of the repeat means.
    pub fn summary(&self) -> (f64, f64) {
        mean_std(&self.repeat_means())
    }
}

/// Mean and sample (n - 1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-subject UAR of each repeat's predictions (corpus id -> class) over
/// `test_ids`.
pub fn subject_report(
    method: Method,
    budget: usize,
    predictions: &[HashMap<usize, usize>],
    test_ids: &[usize],
    corpus: &Corpus,
) -> Result<SubjectUarMatrix> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &id in test_ids {
        by_subject.entry(corpus.utterances[id].subject.as_str()).or_default().push(id);
    }
    let mut values = Vec::with_capacity(predictions.len());
    for (r, preds) in predictions.iter().enumerate() {
        let mut row = Vec::with_capacity(by_subject.len());
        for (subject, ids) in &by_subject {
            let mut p = Vec::with_capacity(ids.len());
            let mut t = Vec::with_capacity(ids.len());
            for id in ids {
                let u = &corpus.utterances[*id];
                p.push(*preds.get(id).ok_or_else(|| {
                    Error::Data(format!("repeat {r}: no prediction for {} (subject {subject})", u.id))
                })?);
                t.push(u.label.ok_or_else(|| Error::Label(format!("test utterance {} has no label", u.id)))?.class());
            }
            let v = uar(&p, &t).map_err(|e| Error::Data(format!("subject {subject}: {e}")))?;
            row.push(v);
        }
        values.push(row);
    }
    Ok(SubjectUarMatrix {
        method,
        budget,
        subjects: by_subject.keys().map(|s| s.to_string()).collect(),
        values,
    })
}

/// One training run of a protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Job {
    pub method: Method,
    pub budget: usize,
    pub repeat: usize,
    /// `None` for the exp1 split.
    pub half: Option<Half>,
}

impl Job {
    /// File stem used for the job's outputs.
    pub fn tag(&self) -> String {
        let h = self.half.map(|h| format!("-h{}", h.number())).unwrap_or_default();
        format!("{}-b{}-r{}{h}", self.method, self.budget, self.repeat)
    }
}

struct JobOutput {
    test_ids: Vec<usize>,
    predictions: Vec<usize>,
    records: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    /// In method-then-budget order of the plan.
    pub matrices: Vec<SubjectUarMatrix>,
}

impl ExperimentResult {
    pub fn matrix(&self, method: Method, budget: usize) -> Option<&SubjectUarMatrix> {
        self.matrices.iter().find(|m| m.method == method && m.budget == budget)
    }

    pub fn report_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for m in &self.matrices {
            for (r, row) in m.values.iter().enumerate() {
                for (subject, v) in m.subjects.iter().zip(row) {
                    let _ = writeln!(s, "{},{},{r},{subject},{v}", m.method, m.budget);
                }
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,budget,mean,std,repeats\n");
        for m in &self.matrices {
            let (mean, std) = m.summary();
            let _ = writeln!(s, "{},{},{mean},{std},{}", m.method, m.budget, m.values.len());
        }
        s
    }
}

/// Worker threads: `DOMGEN_THREADS` if set, else the available cores.
pub fn thread_count() -> usize {
    std::env::var("DOMGEN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn fold_plan(plan: &ExperimentPlan, src: &[usize], tar: &[usize], job: &Job) -> Result<FoldPlan> {
    let seed = derive_seed(plan.seed, "folds", job.repeat as u64);
    match job.half {
        None => split_exp1(src, tar, seed),
        Some(h) => split_fig4(src, tar, job.budget, h, seed),
    }
}

fn train_job(
    corpus: &Corpus,
    src: &[usize],
    tar: &[usize],
    plan: &ExperimentPlan,
    job: &Job,
) -> Result<(FoldPlan, FitResult, ParamSet<f64>)> {
    let folds = fold_plan(plan, src, tar, job)?;
    let pools = Pools::from_plan(corpus, &folds)?;
    let index = 2 * job.repeat as u64 + job.half.map_or(0, |h| h.number() as u64 - 1);
    let config = TrainConfig::new(job.method, derive_seed(plan.seed, "train", index))
        .with_channels(plan.channels)
        .with_epochs(plan.epochs);
    let mut trainer = Trainer::<f64>::new(config, pools.n_datasets)?;
    let result = fit(&mut trainer, &pools)?;
    log::info!("{}: selected epoch {}", job.tag(), result.selected_record().epoch);
    Ok((folds, result, trainer.params))
}

fn labeled_ids(corpus: &Corpus, datasets: &[usize]) -> Vec<usize> {
    corpus.ids_in(datasets).into_iter().filter(|&i| corpus.utterances[i].label.is_some()).collect()
}

/// Runs one job exactly as `run_protocol` would, returning its fold plan,
/// epoch records and final weights.
pub fn train_single(
    corpus: &Corpus,
    src_datasets: &[usize],
    tar_datasets: &[usize],
    plan: &ExperimentPlan,
    job: &Job,
) -> Result<(FoldPlan, FitResult, ParamSet<f64>)> {
    if job.half.is_some() != plan.protocol.half_swap() {
        return Err(Error::Config(format!("{} {} a half", plan.protocol.name(), if job.half.is_some() { "takes no" } else { "needs" })));
    }
    if !plan.methods_at(job.budget, src_datasets.len())?.contains(&job.method) {
        return Err(Error::Config(format!("{} is not run at budget {}", job.method, job.budget)));
    }
    let (src, tar) = (labeled_ids(corpus, src_datasets), labeled_ids(corpus, tar_datasets));
    train_job(corpus, &src, &tar, plan, job)
}

/// Runs every (method, budget, repeat[, half]) training job of `plan` on
/// `corpus`. Source and target are given as dataset indices. Per-epoch
/// CSVs go under `<epoch_dir>` when set.
pub fn run_protocol(
    corpus: &Corpus,
    src_datasets: &[usize],
    tar_datasets: &[usize],
    plan: &ExperimentPlan,
    epoch_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    if src_datasets.is_empty() || tar_datasets.is_empty() {
        return Err(Error::Config("need at least one source and one target dataset".into()));
    }
    if src_datasets.iter().any(|d| tar_datasets.contains(d)) {
        return Err(Error::Config("a dataset cannot be both source and target".into()));
    }
    let (src, tar) = (labeled_ids(corpus, src_datasets), labeled_ids(corpus, tar_datasets));
    let unlabeled = corpus.ids_in(src_datasets).len() + corpus.ids_in(tar_datasets).len() - src.len() - tar.len();
    if unlabeled > 0 {
        log::warn!("ignoring {unlabeled} utterances without labels");
    }

    let mut cells = Vec::new();
    for &budget in &plan.budgets {
        for method in plan.methods_at(budget, src_datasets.len())? {
            cells.push((method, budget));
        }
    }
    let halves: Vec<Option<Half>> =
        if plan.protocol.half_swap() { vec![Some(Half::First), Some(Half::Second)] } else { vec![None] };
    let mut jobs = Vec::new();
    for &(method, budget) in &cells {
        for repeat in 0..plan.repeats {
            for &half in &halves {
                jobs.push(Job { method, budget, repeat, half });
            }
        }
    }
    // validate every fold up front so bad budgets fail before any training
    for job in &jobs {
        fold_plan(plan, &src, &tar, job)?;
    }

    let run = |job: &Job| -> Result<JobOutput> {
        let (folds, result, _) = train_job(corpus, &src, &tar, plan, job)?;
        Ok(JobOutput { predictions: result.test_predictions().to_vec(), test_ids: folds.test, records: result.records })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Train(format!("thread pool: {e}")))?;
    let outputs: Vec<JobOutput> = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;

    if let Some(dir) = epoch_dir {
        for (job, out) in jobs.iter().zip(&outputs) {
            write_epoch_csv(&dir.join(format!("{}.csv", job.tag())), &out.records)?;
        }
    }

    let mut matrices = Vec::new();
    for &(method, budget) in &cells {
        let mut per_repeat = vec![HashMap::new(); plan.repeats];
        for (job, out) in jobs.iter().zip(&outputs) {
            if job.method == method && job.budget == budget {
                per_repeat[job.repeat].extend(out.test_ids.iter().copied().zip(out.predictions.iter().copied()));
            }
        }
        matrices.push(subject_report(method, budget, &per_repeat, &tar, corpus)?);
    }
    Ok(ExperimentResult { matrices })
}

/// Loads the configured manifests, runs the protocol and writes
/// `report.csv`, `summary.csv` and per-epoch CSVs under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    let (corpus, src, tar) = load_corpus(cfg)?;
    let plan = ExperimentPlan::from_config(cfg);
    let result = run_protocol(&corpus, &src, &tar, &plan, Some(&cfg.out.join("epochs")))?;
    write_atomic(&cfg.out.join("report.csv"), result.report_csv().as_bytes())?;
    write_atomic(&cfg.out.join("summary.csv"), result.summary_csv().as_bytes())?;
    Ok(result)
}

/// The configured manifests with the dataset indices of the source and
/// target sides.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, Vec<usize>, Vec<usize>)> {
    let all: Vec<_> = cfg.src.iter().chain(&cfg.tar).cloned().collect();
    let corpus = Corpus::load(&all)?;
    let names_in = |paths: &[std::path::PathBuf]| -> Result<Vec<usize>> {
        let mut ds = Vec::new();
        for p in paths {
            for r in crate::data::read_manifest(p)? {
                let d = corpus.dataset_index(&r.dataset).expect("loaded");
                if !ds.contains(&d) {
                    ds.push(d);
                }
            }
        }
        Ok(ds)
    };
    let (src, tar) = (names_in(&cfg.src)?, names_in(&cfg.tar)?);
    Ok((corpus, src, tar))
}
