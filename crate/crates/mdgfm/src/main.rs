use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdgfm::checkpoint;
use mdgfm::config::ExperimentConfig;
use mdgfm::error::{Error, Result};
use mdgfm::fixture::{make_fixture, FixtureKind, FixtureSpec};
use mdgfm::harness::{self, Datasets, ExperimentReport, Summary};
use mdgfm::io::{load_graph, save_graph, DatasetFiles};
use mdgfm_core::{DatasetStats, Variant};

#[derive(Parser)]
#[command(name = "mdgfm", version, about = "Multi-domain graph pretraining and few-shot transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `experiment.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` settings, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics as CSV.
    Stats {
        /// Dataset prefixes (`<prefix>.edges.tsv` etc.); defaults to the
        /// config's datasets.
        prefixes: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a stochastic block model dataset to `<out>.edges.tsv`,
    /// `<out>.features.csv` and `<out>.labels.txt`.
    Fixture {
        #[arg(long, default_value = "sbm_homophilic")]
        kind: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        p_in: Option<f64>,
        #[arg(long)]
        p_out: Option<f64>,
        #[arg(long)]
        d_raw: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on the source datasets and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Tune prompts on the target with an existing checkpoint.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Full experiment: attack, pretrain, adapt, report.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Robustness sweep over random-attack ratios.
    Attack {
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.15,0.25")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "full,wo_refinedadj")]
        variants: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment once per ablation variant.
    Ablate {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,wo_refinedadj,wo_sumtoken,wo_topology,wo_balance"
        )]
        variants: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names.iter().map(|v| Ok(v.trim().parse()?)).collect()
}

fn print_summary(label: &str, s: &Summary) {
    println!("{}: {} (n = {})", label, s.display(), s.n);
}

fn finish(report: &ExperimentReport, out: &Path) -> Result<()> {
    harness::write_reports(report, out)?;
    print_summary("accuracy", &report.summary);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { prefixes, common } => {
            let graphs = if prefixes.is_empty() {
                let cfg = load_config(&common)?;
                if cfg.sources.is_empty() && cfg.target.is_none() {
                    return Err(Error::Config("give dataset prefixes or a --config with datasets".into()));
                }
                cfg.sources
                    .iter()
                    .chain(cfg.target.iter())
                    .map(|d| load_graph(&d.files, &d.id))
                    .collect::<Result<Vec<_>>>()?
            } else {
                prefixes
                    .iter()
                    .map(|p| {
                        let id = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        load_graph(&DatasetFiles::from_prefix(p), &id)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            println!("{}", DatasetStats::CSV_HEADER);
            for g in &graphs {
                println!("{}", g.stats().csv_row());
            }
        }
        Command::Fixture {
            kind,
            n,
            classes,
            p_in,
            p_out,
            d_raw,
            noise,
            common,
        } => {
            let seed = common.seed.unwrap_or(0);
            let base = match kind.parse::<FixtureKind>()? {
                FixtureKind::SbmHomophilic => FixtureSpec::homophilic(seed),
                FixtureKind::SbmHeterophilic => FixtureSpec::heterophilic(seed),
            };
            let spec = FixtureSpec {
                n: n.unwrap_or(base.n),
                classes: classes.unwrap_or(base.classes),
                p_in: p_in.unwrap_or(base.p_in),
                p_out: p_out.unwrap_or(base.p_out),
                d_raw: d_raw.unwrap_or(base.d_raw),
                noise: noise.unwrap_or(base.noise),
                ..base
            };
            let prefix = common
                .out
                .ok_or_else(|| Error::Config("fixture needs --out <prefix>".into()))?;
            let id = prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let graph = make_fixture(&spec, &id)?;
            save_graph(&graph, &prefix)?;
            println!("{}", DatasetStats::CSV_HEADER);
            println!("{}", graph.stats().csv_row());
        }
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let sources = cfg
                .sources
                .iter()
                .map(|d| load_graph(&d.files, &d.id))
                .collect::<Result<Vec<_>>>()?;
            let pcfg = harness::repeat_pretrain_config(&cfg, 0);
            let pre = harness::pretrain_cached(&sources, &pcfg, None).map_err(|e| e.at_stage("pretrain", pcfg.seed))?;
            let path = cfg.out.join("checkpoint.mdgf");
            checkpoint::save(&pre.checkpoint, &path)?;
            std::fs::write(cfg.out.join("pretrain_log.csv"), harness::pretrain_log_csv(&pre.log))
                .map_err(|e| Error::io(cfg.out.join("pretrain_log.csv"), e))?;
            println!("checkpoint: {}", path.display());
        }
        Command::Adapt { checkpoint: cp_path, common } => {
            let cfg = load_config(&common)?;
            cfg.adapt.validate()?;
            let target = cfg.require_target()?;
            let target = load_graph(&target.files, &target.id)?;
            let cp = checkpoint::load(&cp_path)?;
            let tasks = harness::evaluate(&cp, &target, &cfg.adapt, cfg.resamples, cfg.seed, 0)?;
            let accuracies: Vec<f64> = tasks.iter().map(|t| t.accuracy).collect();
            let report = ExperimentReport {
                summary: Summary::of(&accuracies),
                tasks,
                pretrain_log: Vec::new(),
                cache_hits: 0,
            };
            finish(&report, &cfg.out)?;
        }
        Command::Run { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let data = Datasets::load(&cfg)?;
            let report = harness::run_experiment(&cfg, &data, Some(&harness::default_cache_dir(&cfg.out)))?;
            finish(&report, &cfg.out)?;
        }
        Command::Attack {
            ratios,
            variants,
            common,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let variants = parse_variants(&variants)?;
            let data = Datasets::load(&cfg)?;
            let rows = harness::robustness(&cfg, &data, &ratios, &variants, Some(&harness::default_cache_dir(&cfg.out)))?;
            for r in rows {
                print_summary(&format!("{} @ {}", r.variant, r.ratio), &r.summary);
            }
        }
        Command::Ablate { variants, common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let variants = parse_variants(&variants)?;
            let data = Datasets::load(&cfg)?;
            for (variant, report) in harness::ablate(&cfg, &data, &variants, Some(&harness::default_cache_dir(&cfg.out)))? {
                print_summary(variant.as_str(), &report.summary);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
