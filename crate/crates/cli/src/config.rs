//! Run configuration: training fields plus paths and intervals, resolved
//! from defaults, a key-value file, `VTRANS_*` environment variables and
//! command-line overrides, in increasing precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vtrans_core::dataset::Preprocessing;
use vtrans_core::training::keys::{parse_pairs, KEYS};
use vtrans_core::training::TrainingConfig;
use vtrans_core::{Error, Result};

pub const ENV_PREFIX: &str = "VTRANS_";

pub const RUN_KEYS: &[&str] = &[
    "normal_dir",
    "impaired_dir",
    "out_dir",
    "cache_dir",
    "checkpoint_interval",
    "log_interval",
    "trim_db",
    "target_peak",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub normal_dir: Option<PathBuf>,
    pub impaired_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/feature_cache`.
    pub cache_dir: Option<PathBuf>,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub preprocessing: Preprocessing,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            normal_dir: None,
            impaired_dir: None,
            out_dir: PathBuf::from("run"),
            cache_dir: None,
            checkpoint_interval: 1000,
            log_interval: 100,
            preprocessing: Preprocessing::default(),
        }
    }
}

/// Where a resolved value came from, echoed next to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    CommandLine,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::CommandLine => "command line",
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "normal_dir" => self.normal_dir = path(),
            "impaired_dir" => self.impaired_dir = path(),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "cache_dir" => self.cache_dir = path(),
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, value)?,
            "log_interval" => self.log_interval = parse_num(key, value)?,
            "trim_db" => self.preprocessing.trim_db = parse_num(key, value)?,
            "target_peak" => self.preprocessing.target_peak = parse_num(key, value)?,
            _ => self.training.set(key, value)?,
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("feature_cache"))
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = vec![
            ("normal_dir", show(&self.normal_dir)),
            ("impaired_dir", show(&self.impaired_dir)),
            ("out_dir", self.out_dir.display().to_string()),
            ("cache_dir", self.cache_dir().display().to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("trim_db", self.preprocessing.trim_db.to_string()),
            ("target_peak", self.preprocessing.target_peak.to_string()),
        ];
        out.extend(self.training.pairs());
        out
    }

    /// Field checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.training.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if !(self.preprocessing.target_peak > 0.0 && self.preprocessing.target_peak <= 1.0) {
            return Err(Error::Config(format!(
                "target_peak must lie in (0, 1], got {}",
                self.preprocessing.target_peak
            )));
        }
        if !(self.preprocessing.trim_db > 0.0) {
            return Err(Error::Config(format!(
                "trim_db must be positive, got {}",
                self.preprocessing.trim_db
            )));
        }
        Ok(())
    }

    /// Requires both corpus directories to be set and to exist.
    pub fn corpus_dirs(&self) -> Result<(&Path, &Path)> {
        let check = |name: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("{name} is not set"))),
                Some(p) if !p.is_dir() => Err(Error::Config(format!(
                    "{name}: {} is not a directory",
                    p.display()
                ))),
                Some(_) => Ok(()),
            }
        };
        check("normal_dir", &self.normal_dir)?;
        check("impaired_dir", &self.impaired_dir)?;
        Ok((
            self.normal_dir.as_deref().expect("checked"),
            self.impaired_dir.as_deref().expect("checked"),
        ))
    }
}

pub fn all_keys() -> impl Iterator<Item = &'static str> {
    RUN_KEYS.iter().chain(KEYS).copied()
}

/// Effective configuration with the source of every value.
pub struct Resolved {
    pub config: RunConfig,
    pub sources: BTreeMap<&'static str, Source>,
}

impl Resolved {
    /// `key = value  # source` lines in a fixed key order.
    pub fn echo(&self) -> String {
        self.config
            .pairs()
            .into_iter()
            .map(|(k, v)| {
                let src = self.sources.get(k).copied().unwrap_or(Source::Default);
                format!("{k} = {v}  # {}\n", src.as_str())
            })
            .collect()
    }
}

fn canonical_key(key: &str) -> Result<&'static str> {
    all_keys()
        .find(|k| *k == key)
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
}

/// Applies file, environment and command-line layers over the defaults.
pub fn resolve(
    file: Option<&Path>,
    env: &[(String, String)],
    overrides: &[(String, String)],
) -> Result<Resolved> {
    let mut config = RunConfig::default();
    let mut sources = BTreeMap::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line, k, v) in parse_pairs(&text)? {
            let key = canonical_key(&k).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{line}: {m}", path.display())),
                other => other,
            })?;
            config.set(key, &v)?;
            sources.insert(key, Source::File);
        }
    }
    for (name, v) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let lower = rest.to_ascii_lowercase();
        let key = canonical_key(&lower)
            .map_err(|_| Error::Config(format!("unknown config key {lower:?} (from {name})")))?;
        config.set(key, v)?;
        sources.insert(key, Source::Env);
    }
    for (k, v) in overrides {
        let key = canonical_key(k)?;
        config.set(key, v)?;
        sources.insert(key, Source::CommandLine);
    }
    config.validate()?;
    Ok(Resolved { config, sources })
}

/// `VTRANS_*` variables of the current process, sorted by name.
pub fn process_env() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    v.sort();
    v
}
