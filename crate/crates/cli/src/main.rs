use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use domgen::config::RunConfig;
use domgen::data::{extract_manifest, read_manifest, DatasetSummary, Half};
use domgen::experiments::{load_corpus, run_experiment, synth_generate, thread_count, train_single, ExperimentPlan, Job, SynthSpec};
use domgen::fsio::write_atomic;
use domgen::train::{addog_grad_check, write_epoch_csv, Method, CHECK_TOLERANCE};
use domgen::Error;

#[derive(Parser)]
#[command(name = "domgen", version, about = "Adversarial domain generalization for utterance-level valence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract log mel filterbank caches for every record of a manifest.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16000)]
        rate: u32,
    },
    /// Generate a synthetic domain-shift corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on one fold and write its epoch log, weights and
    /// test predictions.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// 1 or 2; half-swap protocols only.
        #[arg(long)]
        half: Option<u8>,
    },
    /// Run a full experiment protocol and write report CSVs.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of the ADDoG objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarise a manifest's labels, counting tie-rejected records.
    ValidateManifest { manifest: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // a second init only happens in tests that call main twice
    let _ = rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build_global();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            let (kind, code) = match e {
                Error::Config(_) => ("config", 3),
                _ => ("runtime", 1),
            };
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

enum Failure {
    Error(Error),
    /// A check ran and reported failure on stdout.
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::ExtractFeatures { manifest, out, rate } => {
            println!("{}", extract_manifest(&manifest, &out, rate)?.display());
        }
        Command::Synth { spec, out } => {
            for m in synth_generate(&SynthSpec::load(&spec)?, &out)? {
                println!("{}", m.display());
            }
        }
        Command::Train { config, method, budget, repeat, half } => train(&config, method, budget, repeat, half)?,
        Command::Experiment { config } => {
            let cfg = RunConfig::load(&config)?;
            let result = run_experiment(&cfg)?;
            for m in &result.matrices {
                let (mean, std) = m.summary();
                println!("{} budget={} uar={mean:.4} std={std:.4}", m.method, m.budget);
            }
        }
        Command::Gradcheck { seed } => {
            let r = addog_grad_check(seed)?;
            println!("max_rel_err={:e} checked={}", r.max_rel_err, r.checked);
            if !(r.max_rel_err < CHECK_TOLERANCE) {
                return Err(Failure::Check);
            }
        }
        Command::ValidateManifest { manifest } => {
            let summaries = DatasetSummary::summarize(&read_manifest(&manifest)?)?;
            for s in &summaries {
                println!(
                    "dataset={} records={} low={} mid={} high={} rejected={} unlabeled={}",
                    s.name, s.records, s.bins[0], s.bins[1], s.bins[2], s.rejected, s.unlabeled
                );
            }
            println!("rejected={}", summaries.iter().map(|s| s.rejected).sum::<usize>());
        }
    }
    Ok(())
}

fn train(config: &Path, method: Method, budget: Option<usize>, repeat: usize, half: Option<u8>) -> Result<(), Error> {
    let cfg = RunConfig::load(config)?;
    let plan = ExperimentPlan::from_config(&cfg);
    let half = match (half, plan.protocol.half_swap()) {
        (Some(h), _) => Some(Half::from_number(h).map_err(|e| Error::Config(e.to_string()))?),
        (None, true) => Some(Half::First),
        (None, false) => None,
    };
    let budget = budget.unwrap_or(plan.budgets[0]);
    if repeat >= plan.repeats {
        return Err(Error::Config(format!("repeat {repeat} is outside 0..{}", plan.repeats)));
    }
    let job = Job { method, budget, repeat, half };
    let (corpus, src, tar) = load_corpus(&cfg)?;
    let (folds, result, params) = train_single(&corpus, &src, &tar, &plan, &job)?;
    let tag = job.tag();
    write_epoch_csv(&cfg.out.join(format!("{tag}.csv")), &result.records)?;
    params.save(&cfg.out.join(format!("{tag}.dgp")))?;
    let mut preds = String::from("id,prediction\n");
    for (&i, p) in folds.test.iter().zip(result.test_predictions()) {
        let _ = writeln!(preds, "{},{p}", corpus.utterances[i].id);
    }
    write_atomic(&cfg.out.join(format!("{tag}.predictions.csv")), preds.as_bytes())?;
    let sel = result.selected_record();
    println!("{tag} selected_epoch={} val_uar={:.4}", sel.epoch, sel.val_uar);
    Ok(())
}
