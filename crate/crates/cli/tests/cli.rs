use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn domgen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domgen"))
        .args(args)
        .current_dir(cwd)
        .env("DOMGEN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}, stderr {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn assert_same(a: &Path, b: &Path) {
    let (a, b) = (snapshot(a), snapshot(b));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs", k.display());
    }
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SPEC: &str = "seed = 3
datasets = s, t
s.utterances = 36
s.subjects = 2
s.rho = 0.8
t.utterances = 36
t.subjects = 2
t.tilt = 0.5
";

fn experiment_cfg(dir: &Path, out: &str) -> PathBuf {
    let p = dir.join(format!("{out}.cfg"));
    fs::write(&p, format!("experiment = exp1\nsrc = data/s.jsonl\ntar = data/t.jsonl\nrepeats = 2\nchannels = 4\nepochs = 2\nseed = 5\nout = {out}\n"))
        .unwrap();
    p
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(domgen(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(domgen(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn config_errors_exit_3_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "src = nowhere.jsonl\ntar = nowhere.jsonl\n").unwrap();
    let out = domgen(&["experiment", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:"), "{err}");

    fs::write(dir.path().join("bad.spec"), "datasets = a\nframes = 5..9\n").unwrap();
    assert_eq!(domgen(&["synth", "--spec", "bad.spec", "--out", "x"], dir.path()).status.code(), Some(3));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.jsonl"), "{not json\n").unwrap();
    let out = domgen(&["validate-manifest", "m.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[runtime]:"));
}

#[test]
fn gradcheck_passes_for_seed_7() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&domgen(&["gradcheck", "--seed", "7"], dir.path()));
    let v: f64 = out.trim().split_whitespace().next().unwrap().strip_prefix("max_rel_err=").unwrap().parse().unwrap();
    assert!(v < 1e-4, "{out}");
}

#[test]
fn validate_manifest_counts_a_tie() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |id: &str, r: &str| {
        format!(r#"{{"id":"{id}","dataset":"d","subject":"s","ratings":[{r}],"scale_midpoint":3.0}}"#)
    };
    fs::write(dir.path().join("m.jsonl"), [rec("a", "3,4,5"), rec("b", "2,4"), rec("c", "1,1,5")].join("\n")).unwrap();
    let out = ok(&domgen(&["validate-manifest", "m.jsonl"], dir.path()));
    assert!(out.contains("dataset=d records=3 low=1 mid=0 high=1 rejected=1 unlabeled=0"), "{out}");
    assert!(out.lines().last().unwrap() == "rejected=1");
}

#[test]
fn synth_then_experiment_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.cfg"), SPEC).unwrap();
    ok(&domgen(&["synth", "--spec", "spec.cfg", "--out", "data"], dir.path()));
    let cfg = experiment_cfg(dir.path(), "run1");
    ok(&domgen(&["experiment", "--config", cfg.to_str().unwrap()], dir.path()));
    let report = fs::read_to_string(dir.path().join("run1/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "method,budget,repeat,subject,uar");
    // CNN and ADDoG x 2 repeats x 2 target subjects
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert_eq!(fs::read_dir(dir.path().join("run1/epochs")).unwrap().count(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let wav_spec = format!("{SPEC}wav = true\nframes = 23..25\n");
    fs::write(dir.path().join("spec.cfg"), &wav_spec).unwrap();
    for run in ["a", "b"] {
        ok(&domgen(&["synth", "--spec", "spec.cfg", "--out", &format!("synth_{run}")], dir.path()));
        ok(&domgen(&["extract-features", "--manifest", "synth_a/s.jsonl", "--out", &format!("feat_{run}"), "--rate", "8000"], dir.path()));
    }
    assert_same(&dir.path().join("synth_a"), &dir.path().join("synth_b"));
    assert_same(&dir.path().join("feat_a"), &dir.path().join("feat_b"));

    fs::write(dir.path().join("plain.cfg"), SPEC).unwrap();
    ok(&domgen(&["synth", "--spec", "plain.cfg", "--out", "data"], dir.path()));
    for run in ["x", "y"] {
        let cfg = experiment_cfg(dir.path(), &format!("exp_{run}"));
        ok(&domgen(&["experiment", "--config", cfg.to_str().unwrap()], dir.path()));
        let cfg = experiment_cfg(dir.path(), &format!("train_{run}"));
        let out = ok(&domgen(&["train", "--config", cfg.to_str().unwrap(), "--method", "addog", "--repeat", "1"], dir.path()));
        assert!(out.starts_with("ADDoG-b0-r1 selected_epoch="), "{out}");
    }
    let exp = snapshot(&dir.path().join("exp_x"));
    assert_eq!(exp.len(), 2 + 4);
    assert_same(&dir.path().join("exp_x"), &dir.path().join("exp_y"));
    let train = snapshot(&dir.path().join("train_x"));
    assert_eq!(train.keys().map(|k| k.to_str().unwrap()).collect::<Vec<_>>(), [
        "ADDoG-b0-r1.csv",
        "ADDoG-b0-r1.dgp",
        "ADDoG-b0-r1.predictions.csv"
    ]);
    assert_same(&dir.path().join("train_x"), &dir.path().join("train_y"));
}

#[test]
fn train_rejects_methods_outside_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.cfg"), SPEC).unwrap();
    ok(&domgen(&["synth", "--spec", "spec.cfg", "--out", "data"], dir.path()));
    let cfg = experiment_cfg(dir.path(), "t");
    let out = domgen(&["train", "--config", cfg.to_str().unwrap(), "--method", "sp"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = domgen(&["train", "--config", cfg.to_str().unwrap(), "--method", "cnn", "--repeat", "9"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}
