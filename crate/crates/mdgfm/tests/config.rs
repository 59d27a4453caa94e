use std::path::{Path, PathBuf};

use mdgfm::config::{ExperimentConfig, DEFAULT_REPEATS};
use mdgfm::error::{Error, EXIT_CONFIG};
use mdgfm_core::adapt::{TargetBalance, DEFAULT_RESAMPLES};
use mdgfm_core::attack::{AttackMode, AttackScope};
use mdgfm_core::Variant;

const EXAMPLE: &str = "\
# comment
[experiment]
seed = 7
repeats = 3
resamples = 20
variant = wo_sumtoken
out = results

[pretrain]
epochs = 12
lr = 0.005

[encoder]
hidden = 64

[gsl]
k = 15
lsh_batch = 128

[adapt]
shots = 3
tau = 0.1
target_balance = mixed
literal_eq7 = true

[attack]
mode = delete
ratio = 0.15
scope = target

[source:cora]
prefix = data/cora

[source:pubmed]
edges = data/pm.tsv
features = /abs/pm.csv

[target:citeseer]
prefix = data/citeseer
labels = labels/citeseer.txt
";

fn parse(text: &str) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::parse(text, Path::new("/base"), Path::new("/base/exp.conf"))
}

#[test]
fn parses_every_section() {
    let cfg = parse(EXAMPLE).unwrap();
    assert_eq!((cfg.seed, cfg.repeats, cfg.resamples), (7, 3, 20));
    assert_eq!(cfg.pretrain.variant, Variant::WoSumToken);
    assert_eq!(cfg.out, PathBuf::from("/base/results"));
    assert_eq!((cfg.pretrain.epochs, cfg.pretrain.learning_rate), (12, 0.005));
    assert_eq!(cfg.pretrain.encoder.hidden, 64);
    assert_eq!((cfg.pretrain.refine.k, cfg.pretrain.refine.lsh_batch), (15, 128));
    assert_eq!((cfg.adapt.shots, cfg.adapt.tau), (3, 0.1));
    assert_eq!(cfg.adapt.target_balance, TargetBalance::Mixed);
    assert!(cfg.adapt.literal_eq7);
    let attack = cfg.attack.unwrap();
    assert_eq!((attack.mode, attack.ratio, attack.scope), (AttackMode::Delete, 0.15, AttackScope::Target));

    let ids: Vec<&str> = cfg.sources.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["cora", "pubmed"]);
    assert_eq!(cfg.sources[0].files.edges, PathBuf::from("/base/data/cora.edges.tsv"));
    assert_eq!(cfg.sources[1].files.features, PathBuf::from("/abs/pm.csv"));
    assert_eq!(cfg.sources[1].files.labels, None);
    let target = cfg.target.as_ref().unwrap();
    assert_eq!(target.files.labels, Some(PathBuf::from("/base/labels/citeseer.txt")));
    cfg.validate().unwrap();
}

#[test]
fn defaults() {
    let cfg = ExperimentConfig::default();
    assert_eq!((cfg.repeats, cfg.resamples), (DEFAULT_REPEATS, DEFAULT_RESAMPLES));
    assert_eq!((cfg.repeats, cfg.resamples), (5, 50));
    assert!(cfg.attack.is_none());
    assert_eq!(cfg.adapt.shots, 1);
}

#[test]
fn overrides_replace_file_values() {
    let mut cfg = parse(EXAMPLE).unwrap();
    cfg.apply_override("gsl.k=5").unwrap();
    cfg.apply_override("adapt.k_shot = 5").unwrap();
    cfg.apply_override("attack.ratio=0.5").unwrap();
    cfg.apply_override("experiment.variant=full").unwrap();
    assert_eq!(cfg.pretrain.refine.k, 5);
    assert_eq!(cfg.adapt.shots, 5);
    assert_eq!(cfg.attack.unwrap().ratio, 0.5);
    assert_eq!(cfg.pretrain.variant, Variant::Full);
}

#[test]
fn attack_keys_create_a_default_spec() {
    let mut cfg = ExperimentConfig::default();
    cfg.set("attack.ratio", "0.25").unwrap();
    let a = cfg.attack.unwrap();
    assert_eq!((a.mode, a.scope, a.ratio), (AttackMode::Add, AttackScope::All, 0.25));
}

fn config_error(r: Result<impl std::fmt::Debug, Error>) -> String {
    let e = r.unwrap_err();
    assert_eq!(e.exit_code(), EXIT_CONFIG, "{:?}", e);
    e.to_string()
}

#[test]
fn bad_input_is_a_config_error_with_location() {
    let msg = config_error(parse("[experiment]\nseed = 1\nbogus = 2\n"));
    assert!(msg.contains("exp.conf:3"), "{}", msg);
    let msg = config_error(parse("[pretrain]\nepochs = many\n"));
    assert!(msg.contains("exp.conf:2") && msg.contains("many"), "{}", msg);
    config_error(parse("seed = 1\n"));
    config_error(parse("[experiment]\nno equals sign\n"));
    config_error(parse("[source:a]\nprefix = x\n[source:a]\nprefix = y\n"));
    config_error(parse("[source:a]\nedges = x\n"));
    config_error(parse("[source:a]\ncolour = x\n"));
    config_error(parse("[experiment]\nvariant = wo_everything\n"));
    config_error(parse("[attack]\nmode = shuffle\n"));
    config_error(ExperimentConfig::default().apply_override("gsl.k"));
    config_error(ExperimentConfig::load(Path::new("/definitely/not/here.conf")));
}

#[test]
fn validation() {
    let base = "[source:a]\nprefix = a\n[target:b]\nprefix = b\n";
    parse(base).unwrap().validate().unwrap();
    config_error(parse("[target:b]\nprefix = b\n").unwrap().validate());
    config_error(parse("[source:a]\nprefix = a\n[target:a]\nprefix = a\n").unwrap().validate());
    config_error(parse(&format!("{}[experiment]\nrepeats = 0\n", base)).unwrap().validate());
    config_error(parse(&format!("{}[attack]\nratio = 1.5\n", base)).unwrap().validate());
    config_error(parse(&format!("{}[pretrain]\nbatch_size = 1\n", base)).unwrap().validate());
    config_error(parse("[source:a]\nprefix = a\n").unwrap().require_target());
}
