//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! Keys may appear once. Every key must be consumed by the reader, so a
//! misspelt key is an error rather than a silently ignored setting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::FIG4_BUDGETS;
use crate::error::{Error, Result};
use crate::train::Method;

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    origin: String,
    base: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("{origin}:{}: duplicate key {key}", i + 1)));
            }
        }
        Ok(Self { origin: origin.to_string(), base: base.to_path_buf(), entries })
    }

    /// Relative paths in the file resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some((v, line)) = self.entries.remove(key) else { return Ok(None) };
        v.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{}:{line}: cannot parse {key} = {v:?}", self.origin)))
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((v, line)) = self.entries.remove(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("{}:{line}: bad item {s:?} in {key}", self.origin))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Comma-separated paths that must already exist.
    pub fn take_existing_paths(&mut self, key: &str) -> Result<Option<Vec<PathBuf>>> {
        let Some(items) = self.take_list::<String>(key)? else { return Ok(None) };
        let paths: Vec<PathBuf> = items.iter().map(|s| self.resolve(s)).collect();
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("{}: {key} path {} does not exist", self.origin, missing.display())));
        }
        Ok(Some(paths))
    }

    /// Fails on any key that was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            Some((k, (_, line))) => Err(Error::Config(format!("{}:{line}: unknown key {k}", self.origin))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Source 80:20 split, whole target set as test.
    Exp1,
    /// Half-swap with labelled-target budgets.
    Exp2,
    Exp3,
    Exp4,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Exp1 => "exp1",
            Protocol::Exp2 => "exp2",
            Protocol::Exp3 => "exp3",
            Protocol::Exp4 => "exp4",
        }
    }

    pub fn default_repeats(self) -> usize {
        match self {
            Protocol::Exp1 => 50,
            _ => 10,
        }
    }

    pub fn half_swap(self) -> bool {
        self != Protocol::Exp1
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Protocol::Exp1, Protocol::Exp2, Protocol::Exp3, Protocol::Exp4]
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?} (expected exp1..exp4)")))
    }
}

/// Settings for `train` and `experiment` runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Protocol,
    /// Empty means the protocol's default method list.
    pub methods: Vec<Method>,
    pub src: Vec<PathBuf>,
    pub tar: Vec<PathBuf>,
    pub budgets: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub channels: usize,
    pub epochs: usize,
    pub out: PathBuf,
    /// Sample rate audio is brought to before feature extraction.
    pub rate: u32,
}

pub const RUN_KEYS: [&str; 11] =
    ["experiment", "methods", "src", "tar", "budgets", "repeats", "seed", "channels", "epochs", "out", "rate"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let experiment = kv.take_parsed::<Protocol>("experiment")?.unwrap_or(Protocol::Exp1);
        let methods = match kv.take_list::<String>("methods")? {
            Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<Method>>>()?,
            None => Vec::new(),
        };
        let src = kv.take_existing_paths("src")?.ok_or_else(|| Error::Config("missing key src".into()))?;
        let tar = kv.take_existing_paths("tar")?.ok_or_else(|| Error::Config("missing key tar".into()))?;
        let budgets = kv.take_list("budgets")?.unwrap_or_else(|| match experiment {
            Protocol::Exp1 => vec![0],
            _ => FIG4_BUDGETS.to_vec(),
        });
        let cfg = Self {
            experiment,
            methods,
            src,
            tar,
            budgets,
            repeats: kv.take_parsed("repeats")?.unwrap_or(experiment.default_repeats()),
            seed: kv.take_parsed("seed")?.unwrap_or(0),
            channels: kv.take_parsed("channels")?.unwrap_or(32),
            epochs: kv.take_parsed("epochs")?.unwrap_or(crate::train::DEFAULT_EPOCHS),
            out: kv.take("out").map(|p| kv.resolve(&p)).unwrap_or_else(|| kv.resolve("out")),
            rate: kv.take_parsed("rate")?.unwrap_or(16000),
        };
        kv.finish()?;
        if cfg.repeats == 0 || cfg.channels == 0 || cfg.epochs == 0 || cfg.rate == 0 {
            return Err(Error::Config("repeats, channels, epochs and rate must be positive".into()));
        }
        if cfg.experiment == Protocol::Exp1 && cfg.budgets != [0] {
            return Err(Error::Config("exp1 has no labelled target data; budgets must be 0".into()));
        }
        Ok(cfg)
    }
}
