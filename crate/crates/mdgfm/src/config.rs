//! Experiment configuration files.
//!
//! ```text
//! [experiment]
//! seed = 7
//! repeats = 5
//! resamples = 50
//! variant = full
//! out = results
//!
//! [pretrain]
//! epochs = 60
//!
//! [gsl]
//! k = 30
//!
//! [adapt]
//! shots = 1
//!
//! [attack]
//! mode = add
//! ratio = 0.1
//! scope = all
//!
//! [source:cora]
//! prefix = data/cora
//!
//! [target:citeseer]
//! edges = data/citeseer.edges.tsv
//! features = data/citeseer.features.csv
//! labels = data/citeseer.labels.txt
//! ```
//!
//! Relative paths resolve against the config file's directory. Every
//! non-dataset setting can also be given as `section.key=value` on the
//! command line, which overrides the file.

use std::fs;
use std::path::{Path, PathBuf};

use mdgfm_core::adapt::{AdaptConfig, DEFAULT_RESAMPLES};
use mdgfm_core::attack::{AttackMode, AttackScope, AttackSpec};
use mdgfm_core::pretrain::PretrainConfig;

use crate::error::{Error, Result};
use crate::io::DatasetFiles;

/// Default number of pretraining repeats per experiment.
pub const DEFAULT_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub id: String,
    pub files: DatasetFiles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub sources: Vec<DatasetSpec>,
    pub target: Option<DatasetSpec>,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub repeats: usize,
    pub resamples: usize,
    pub attack: Option<AttackSpec>,
    pub out: PathBuf,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            target: None,
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            repeats: DEFAULT_REPEATS,
            resamples: DEFAULT_RESAMPLES,
            attack: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{}` for {}", value.trim(), key)))
}

enum Section {
    Settings(String),
    Source(usize),
    Target,
}

#[derive(Default)]
struct PartialDataset {
    prefix: Option<PathBuf>,
    edges: Option<PathBuf>,
    features: Option<PathBuf>,
    labels: Option<PathBuf>,
}

impl PartialDataset {
    fn finish(self, id: &str) -> Result<DatasetFiles> {
        let base = self.prefix.map(DatasetFiles::from_prefix);
        let edges = self.edges.or_else(|| base.as_ref().map(|b| b.edges.clone()));
        let features = self.features.or_else(|| base.as_ref().map(|b| b.features.clone()));
        let labels = self.labels.or_else(|| base.and_then(|b| b.labels));
        match (edges, features) {
            (Some(edges), Some(features)) => Ok(DatasetFiles { edges, features, labels }),
            _ => Err(Error::Config(format!("dataset `{}` needs `prefix` or both `edges` and `features`", id))),
        }
    }
}

impl ExperimentConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.pretrain.set(key, value)? || self.adapt.set(key, value)? {
            return Ok(());
        }
        match key {
            "experiment.repeats" => self.repeats = parse_value(key, value)?,
            "experiment.resamples" => self.resamples = parse_value(key, value)?,
            "experiment.variant" => self.pretrain.variant = value.trim().parse()?,
            "experiment.out" => self.out = PathBuf::from(value.trim()),
            "experiment.seed" => self.seed = parse_value(key, value)?,
            "attack.mode" => self.attack_mut().mode = value.trim().parse::<AttackMode>()?,
            "attack.ratio" => self.attack_mut().ratio = parse_value(key, value)?,
            "attack.scope" => self.attack_mut().scope = value.trim().parse::<AttackScope>()?,
            "attack.seed" => self.attack_mut().seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown setting `{}`", key))),
        }
        Ok(())
    }

    fn attack_mut(&mut self) -> &mut AttackSpec {
        self.attack.get_or_insert(AttackSpec {
            mode: AttackMode::default(),
            ratio: 0.0,
            scope: AttackScope::default(),
            seed: 0,
        })
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{}` is not `section.key=value`", assignment)))?;
        self.set(key.trim(), value)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<Section> = None;
        let mut sources: Vec<(String, PartialDataset)> = Vec::new();
        let mut target: Option<(String, PartialDataset)> = None;
        let parse_err = |line: usize, msg: String| Error::Config(format!("{}:{}: {}", path.display(), line, msg));
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(if let Some(id) = name.strip_prefix("source:") {
                    let id = id.trim().to_string();
                    if sources.iter().any(|(s, _)| *s == id) {
                        return Err(parse_err(i + 1, format!("duplicate source `{}`", id)));
                    }
                    sources.push((id, PartialDataset::default()));
                    Section::Source(sources.len() - 1)
                } else if let Some(id) = name.strip_prefix("target:") {
                    if target.is_some() {
                        return Err(parse_err(i + 1, "only one target dataset is allowed".into()));
                    }
                    target = Some((id.trim().to_string(), PartialDataset::default()));
                    Section::Target
                } else {
                    Section::Settings(name.to_string())
                });
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(parse_err(i + 1, format!("expected `key = value`, got `{}`", line)));
            };
            let (key, value) = (key.trim(), value.trim());
            let dataset = match &section {
                None => return Err(parse_err(i + 1, "setting outside of a section".into())),
                Some(Section::Settings(name)) => {
                    cfg.set(&format!("{}.{}", name, key), value)
                        .map_err(|e| parse_err(i + 1, e.to_string()))?;
                    continue;
                }
                Some(Section::Source(s)) => &mut sources[*s].1,
                Some(Section::Target) => &mut target.as_mut().unwrap().1,
            };
            let resolved = Some(base.join(value));
            match key {
                "prefix" => dataset.prefix = resolved,
                "edges" => dataset.edges = resolved,
                "features" => dataset.features = resolved,
                "labels" => dataset.labels = resolved,
                _ => return Err(parse_err(i + 1, format!("unknown dataset key `{}`", key))),
            }
        }
        for (id, partial) in sources {
            let files = partial.finish(&id)?;
            cfg.sources.push(DatasetSpec { id, files });
        }
        if let Some((id, partial)) = target {
            let files = partial.finish(&id)?;
            cfg.target = Some(DatasetSpec { id, files });
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Checks everything a full pretrain-then-adapt run needs.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one [source:<id>] dataset is required".into()));
        }
        if let Some(t) = &self.target {
            if self.sources.iter().any(|s| s.id == t.id) {
                return Err(Error::Config(format!("target `{}` is also a source", t.id)));
            }
        }
        self.validate_settings()
    }

    /// Checks the settings alone, for runs on datasets already in memory.
    pub fn validate_settings(&self) -> Result<()> {
        if self.repeats == 0 || self.resamples == 0 {
            return Err(Error::Config("experiment.repeats and experiment.resamples must be positive".into()));
        }
        if let Some(a) = &self.attack {
            if !(0.0..=1.0).contains(&a.ratio) {
                return Err(Error::Config(format!("attack.ratio {} outside [0, 1]", a.ratio)));
            }
        }
        self.pretrain.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    pub fn require_target(&self) -> Result<&DatasetSpec> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::Config("a [target:<id>] dataset is required".into()))
    }
}
