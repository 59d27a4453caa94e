//! Experiment orchestration: attack, pretrain (with a checkpoint cache),
//! adapt over resampled few-shot tasks, and write CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mdgfm_core::ablation::Variant;
use mdgfm_core::adapt::{prepare_target, sample_kshot, tune, AdaptConfig};
use mdgfm_core::attack::{attack_random, AttackSpec};
use mdgfm_core::pretrain::{pretrain, Checkpoint, EpochLoss, PretrainConfig};
use mdgfm_core::seed::{derive, tag};
use mdgfm_core::Graph;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, FORMAT_VERSION};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::load_graph;

/// Loaded source and target graphs of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub sources: Vec<Graph>,
    pub target: Graph,
}

impl Datasets {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let target = cfg.require_target()?;
        let sources = cfg
            .sources
            .iter()
            .map(|s| load_graph(&s.files, &s.id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sources,
            target: load_graph(&target.files, &target.id)?,
        })
    }
}

impl Datasets {
    /// At least one source, and the target's domain id differs from every source's.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source dataset is required".into()));
        }
        if self.sources.iter().any(|s| s.domain_id == self.target.domain_id) {
            return Err(Error::Config(format!("target `{}` is also a source", self.target.domain_id)));
        }
        Ok(())
    }
}

/// One resampled few-shot evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub repeat: usize,
    pub seed: u64,
    pub shots: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub accuracy: f64,
}

/// Mean and sample standard deviation of task accuracies (fractions).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    /// Percent with two decimals, e.g. `44.83±7.41`.
    pub fn display(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }

    pub const CSV_HEADER: &'static str = "mean,std,n,display";

    pub fn csv_fields(&self) -> String {
        format!("{},{},{},{}", self.mean, self.std, self.n, self.display())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub tasks: Vec<TaskRecord>,
    pub summary: Summary,
    /// `(repeat, entry)` for every pretraining epoch of every repeat.
    pub pretrain_log: Vec<(usize, EpochLoss)>,
    /// Repeats whose checkpoint came from the cache.
    pub cache_hits: usize,
}

/// Cache key over everything that shapes a checkpoint: the pretraining
/// settings and the source graphs' structure and features. Downstream
/// settings and labels are deliberately left out.
pub fn checkpoint_key(cfg: &PretrainConfig, sources: &[Graph]) -> String {
    let mut h = Sha256::new();
    h.update(format!("checkpoint-format={}\n", FORMAT_VERSION));
    for (k, v) in cfg.to_pairs() {
        h.update(format!("{}={}\n", k, v));
    }
    for g in sources {
        h.update(format!("source={} n={} d={}\n", g.domain_id, g.n_nodes(), g.feature_dim()));
        for &p in g.adjacency.row_ptr() {
            h.update((p as u64).to_le_bytes());
        }
        for &c in g.adjacency.col_idx() {
            h.update((c as u64).to_le_bytes());
        }
        for &v in g.adjacency.values().iter().chain(g.features.data()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{:02x}", b).unwrap();
        s
    })
}

pub const PRETRAIN_LOG_HEADER: &str = "epoch,graph,mean_loss";

pub fn pretrain_log_csv(log: &[EpochLoss]) -> String {
    let mut out = format!("{}\n", PRETRAIN_LOG_HEADER);
    for e in log {
        writeln!(out, "{},{},{}", e.epoch, e.graph, e.mean_loss).unwrap();
    }
    out
}

fn parse_pretrain_log(text: &str, path: &Path) -> Result<Vec<EpochLoss>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad log row `{}`", l),
            };
            let mut f = l.splitn(3, ',');
            let (Some(epoch), Some(graph), Some(loss)) = (f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            Ok(EpochLoss {
                epoch: epoch.parse().map_err(|_| bad())?,
                graph: graph.to_string(),
                mean_loss: loss.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLoss>,
    pub cached: bool,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretrains, or loads the checkpoint stored under the same key in `cache`.
pub fn pretrain_cached(sources: &[Graph], cfg: &PretrainConfig, cache: Option<&Path>) -> Result<Pretrained> {
    let paths = cache.map(|dir| {
        let key = checkpoint_key(cfg, sources);
        (dir.join(format!("{}.mdgf", key)), dir.join(format!("{}.log.csv", key)))
    });
    if let Some((cp_path, log_path)) = &paths {
        if cp_path.exists() && log_path.exists() {
            let checkpoint = checkpoint::load(cp_path)?;
            let text = fs::read_to_string(log_path).map_err(|e| Error::io(log_path, e))?;
            log::info!("reusing checkpoint {}", cp_path.display());
            return Ok(Pretrained {
                checkpoint,
                log: parse_pretrain_log(&text, log_path)?,
                cached: true,
            });
        }
    }
    let outcome = pretrain(sources, cfg)?;
    if let Some((cp_path, log_path)) = &paths {
        checkpoint::save(&outcome.checkpoint, cp_path)?;
        write_file(log_path, &pretrain_log_csv(&outcome.log))?;
    }
    Ok(Pretrained {
        checkpoint: outcome.checkpoint,
        log: outcome.log,
        cached: false,
    })
}

/// Tunes and scores `resamples` independent K-shot tasks on `target`.
pub fn evaluate(
    cp: &Checkpoint,
    target: &Graph,
    adapt: &AdaptConfig,
    resamples: usize,
    master_seed: u64,
    repeat: usize,
) -> Result<Vec<TaskRecord>> {
    let labels = target
        .labels
        .as_ref()
        .ok_or_else(|| mdgfm_core::Error::Precondition(format!("target `{}` has no labels", target.name)))?;
    let cfg = adapt.aligned_with(&cp.config.refine);
    let (prepared, _) = prepare_target(target, cp)?;
    (0..resamples)
        .map(|t| {
            let seed = derive(master_seed, &[tag::TASK, repeat as u64, t as u64]);
            let run = || -> Result<TaskRecord> {
                let task = sample_kshot(labels, cfg.shots, seed)?;
                let out = tune(&prepared, labels, cp, &task, &cfg)?;
                Ok(TaskRecord {
                    repeat,
                    seed,
                    shots: cfg.shots,
                    support_size: task.support_size(),
                    query_size: task.query.len(),
                    accuracy: out.accuracy,
                })
            };
            run().map_err(|e| e.at_stage("adapt", seed))
        })
        .collect()
}

fn attack_graph(g: &Graph, spec: &AttackSpec, master_seed: u64, repeat: usize, index: usize) -> Result<Graph> {
    let seed = derive(spec.seed, &[tag::ATTACK, master_seed, repeat as u64, index as u64]);
    attack_random(g, spec.mode, spec.ratio, seed).map_err(|e| Error::from(e).at_stage("attack", seed))
}

/// Graphs of one repeat after the configured attack.
fn attacked(cfg: &ExperimentConfig, data: &Datasets, repeat: usize) -> Result<(Vec<Graph>, Graph)> {
    let Some(spec) = &cfg.attack else {
        return Ok((data.sources.clone(), data.target.clone()));
    };
    let sources = data
        .sources
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if spec.scope.hits_sources() {
                attack_graph(g, spec, cfg.seed, repeat, i)
            } else {
                Ok(g.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let target = if spec.scope.hits_target() {
        attack_graph(&data.target, spec, cfg.seed, repeat, data.sources.len())?
    } else {
        data.target.clone()
    };
    Ok((sources, target))
}

/// Pretraining config of one repeat; its seed derives from the master seed.
pub fn repeat_pretrain_config(cfg: &ExperimentConfig, repeat: usize) -> PretrainConfig {
    PretrainConfig {
        seed: derive(cfg.seed, &[tag::PRETRAIN, repeat as u64]),
        ..cfg.pretrain.clone()
    }
}

/// Runs every repeat: attack, pretrain (or reuse), then resampled adaptation.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Datasets, cache: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate_settings()?;
    data.validate()?;
    let mut tasks = Vec::with_capacity(cfg.repeats * cfg.resamples);
    let mut pretrain_log = Vec::new();
    let mut cache_hits = 0;
    for repeat in 0..cfg.repeats {
        let (sources, target) = attacked(cfg, data, repeat)?;
        let pcfg = repeat_pretrain_config(cfg, repeat);
        let pre = pretrain_cached(&sources, &pcfg, cache).map_err(|e| e.at_stage("pretrain", pcfg.seed))?;
        cache_hits += pre.cached as usize;
        log::info!("repeat {}: pretrained on {} sources", repeat, sources.len());
        pretrain_log.extend(pre.log.into_iter().map(|e| (repeat, e)));
        tasks.extend(evaluate(&pre.checkpoint, &target, &cfg.adapt, cfg.resamples, cfg.seed, repeat)?);
    }
    let accuracies: Vec<f64> = tasks.iter().map(|t| t.accuracy).collect();
    Ok(ExperimentReport {
        summary: Summary::of(&accuracies),
        tasks,
        pretrain_log,
        cache_hits,
    })
}

pub const TASKS_HEADER: &str = "seed,K,support_size,query_size,accuracy";

pub fn tasks_csv(tasks: &[TaskRecord]) -> String {
    let mut out = format!("{}\n", TASKS_HEADER);
    for t in tasks {
        writeln!(out, "{},{},{},{},{}", t.seed, t.shots, t.support_size, t.query_size, t.accuracy).unwrap();
    }
    out
}

pub fn summary_csv(summary: &Summary) -> String {
    format!("{}\n{}\n", Summary::CSV_HEADER, summary.csv_fields())
}

/// Writes `tasks.csv`, `summary.csv` and `pretrain_log.csv` (with a leading
/// repeat column) into `dir`.
pub fn write_reports(report: &ExperimentReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("tasks.csv"), &tasks_csv(&report.tasks))?;
    write_file(&dir.join("summary.csv"), &summary_csv(&report.summary))?;
    let mut log = format!("repeat,{}\n", PRETRAIN_LOG_HEADER);
    for (repeat, e) in &report.pretrain_log {
        writeln!(log, "{},{},{},{}", repeat, e.epoch, e.graph, e.mean_loss).unwrap();
    }
    write_file(&dir.join("pretrain_log.csv"), &log)
}

/// Runs the experiment once per variant, each into `<out>/<variant>/`, and
/// writes `<out>/ablation.csv`.
pub fn ablate(
    cfg: &ExperimentConfig,
    data: &Datasets,
    variants: &[Variant],
    cache: Option<&Path>,
) -> Result<Vec<(Variant, ExperimentReport)>> {
    let mut rows = Vec::new();
    let mut table = format!("variant,{}\n", Summary::CSV_HEADER);
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.pretrain.variant = variant;
        let report = run_experiment(&vcfg, data, cache)?;
        write_reports(&report, &cfg.out.join(variant.as_str()))?;
        writeln!(table, "{},{}", variant, report.summary.csv_fields()).unwrap();
        rows.push((variant, report));
    }
    write_file(&cfg.out.join("ablation.csv"), &table)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub variant: Variant,
    pub ratio: f64,
    pub summary: Summary,
}

/// Runs every (variant, ratio) cell with the configured attack mode and
/// scope, and writes `<out>/robustness.csv`.
pub fn robustness(
    cfg: &ExperimentConfig,
    data: &Datasets,
    ratios: &[f64],
    variants: &[Variant],
    cache: Option<&Path>,
) -> Result<Vec<RobustnessRow>> {
    let base = cfg.attack.unwrap_or(AttackSpec {
        mode: Default::default(),
        ratio: 0.0,
        scope: Default::default(),
        seed: 0,
    });
    let mut rows = Vec::new();
    let mut table = format!("variant,ratio,{}\n", Summary::CSV_HEADER);
    for &variant in variants {
        for &ratio in ratios {
            let mut vcfg = cfg.clone();
            vcfg.pretrain.variant = variant;
            vcfg.attack = Some(AttackSpec { ratio, ..base });
            let report = run_experiment(&vcfg, data, cache)?;
            writeln!(table, "{},{},{}", variant, ratio, report.summary.csv_fields()).unwrap();
            rows.push(RobustnessRow {
                variant,
                ratio,
                summary: report.summary,
            });
        }
    }
    write_file(&cfg.out.join("robustness.csv"), &table)?;
    Ok(rows)
}

/// Cache directory used by the CLI.
pub fn default_cache_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}
