//! Multi-domain contrastive pretraining.
//!
//! For every source graph the encoder sees two views of the token-unified
//! features: the degree-normalized original adjacency and the refined
//! adjacency `A'`. The objective per node batch is the identity loss plus the
//! refined loss, and Adam updates the encoder, the projection head and the
//! tokens of the graph being visited.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::Variant;
use crate::adjacency::degree_normalize_selfloops;
use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::encoder::{encode, EncoderConfig, EncoderNodes, EncoderParams, Propagation};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{loss_identity, loss_refined, project_head, ProjectionHead, DEFAULT_TAU};
use crate::optim::Adam;
use crate::pca::{fit_pca, project, ProjectionBasis, DEFAULT_UNIFIED_DIM};
use crate::refine::{fuse_views, knn, unify_features, RefineConfig, RefinePlan, TokenSet};
use crate::seed::{derive, tag};
use crate::tape::{NodeId, Tape};
use crate::refine;

/// Order in which graphs and epochs are visited.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    /// Every epoch visits all graphs in input order.
    #[default]
    RoundRobin,
    /// All epochs on the first graph, then all epochs on the next.
    GraphByGraph,
}

/// How often Adam steps while visiting a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StepGranularity {
    /// One forward over the whole graph, losses averaged over its node
    /// batches, one step. Cost is linear in the graph size.
    #[default]
    PerGraph,
    /// One full-graph forward and one step per node batch.
    PerBatch,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RoundRobin => "per_epoch_roundrobin",
            Self::GraphByGraph => "per_graph_full",
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_epoch_roundrobin" => Ok(Self::RoundRobin),
            "per_graph_full" => Ok(Self::GraphByGraph),
            _ => Err(Error::Config(format!("unknown schedule `{}`", s))),
        }
    }
}

impl StepGranularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerGraph => "per_graph",
            Self::PerBatch => "per_batch",
        }
    }
}

impl FromStr for StepGranularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_graph" => Ok(Self::PerGraph),
            "per_batch" => Ok(Self::PerBatch),
            _ => Err(Error::Config(format!("unknown step granularity `{}`", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_c: f64,
    pub unified_dim: usize,
    pub seed: u64,
    pub pca_center: bool,
    pub schedule: Schedule,
    pub step: StepGranularity,
    pub shared_dropout_mask: bool,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub refine: RefineConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 128,
            tau_c: DEFAULT_TAU,
            unified_dim: DEFAULT_UNIFIED_DIM,
            seed: 0,
            pca_center: true,
            schedule: Schedule::default(),
            step: StepGranularity::default(),
            shared_dropout_mask: false,
            variant: Variant::Full,
            encoder: EncoderConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{}` for {}", value, key)))
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0) {
            return Err(Error::Config("pretrain.tau_c must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain.batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretrain.lr must be positive".into()));
        }
        if self.unified_dim == 0 {
            return Err(Error::Config("pretrain.unified_dim must be positive".into()));
        }
        self.encoder.validate()?;
        self.refine.validate()
    }

    /// Every field as `section.key = value`, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("pretrain.lr", format!("{:?}", self.learning_rate)),
            ("pretrain.epochs", self.epochs.to_string()),
            ("pretrain.batch_size", self.batch_size.to_string()),
            ("pretrain.tau_c", format!("{:?}", self.tau_c)),
            ("pretrain.unified_dim", self.unified_dim.to_string()),
            ("pretrain.seed", self.seed.to_string()),
            ("pretrain.pca_center", self.pca_center.to_string()),
            ("pretrain.schedule", self.schedule.as_str().into()),
            ("pretrain.step", self.step.as_str().into()),
            ("pretrain.variant", self.variant.as_str().into()),
            ("encoder.hidden", self.encoder.hidden.to_string()),
            ("encoder.layers", self.encoder.layers.to_string()),
            ("encoder.dropout", format!("{:?}", self.encoder.dropout)),
            ("encoder.bias", self.encoder.bias.to_string()),
            ("encoder.shared_dropout_mask", self.shared_dropout_mask.to_string()),
            ("gsl.k", self.refine.k.to_string()),
            ("gsl.r", self.refine.r.to_string()),
            ("gsl.lsh_batch", self.refine.lsh_batch.to_string()),
            ("gsl.eps", format!("{:?}", self.refine.eps)),
            ("gsl.lsh_seed", self.refine.lsh_seed.to_string()),
            ("gsl.token_activation", self.refine.activation.as_str().into()),
            ("gsl.fuse_normalized_adj", self.refine.fuse_normalized_adj.to_string()),
        ]
    }

    /// Applies one `section.key = value` setting. Returns `false` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "pretrain.lr" => self.learning_rate = parse(key, value)?,
            "pretrain.epochs" => self.epochs = parse(key, value)?,
            "pretrain.batch_size" => self.batch_size = parse(key, value)?,
            "pretrain.tau_c" => self.tau_c = parse(key, value)?,
            "pretrain.unified_dim" => self.unified_dim = parse(key, value)?,
            "pretrain.seed" => self.seed = parse(key, value)?,
            "pretrain.pca_center" => self.pca_center = parse(key, value)?,
            "pretrain.schedule" => self.schedule = value.trim().parse()?,
            "pretrain.step" => self.step = value.trim().parse()?,
            "pretrain.variant" => self.variant = value.trim().parse()?,
            "encoder.hidden" => self.encoder.hidden = parse(key, value)?,
            "encoder.layers" => self.encoder.layers = parse(key, value)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, value)?,
            "encoder.bias" => self.encoder.bias = parse(key, value)?,
            "encoder.shared_dropout_mask" => self.shared_dropout_mask = parse(key, value)?,
            "gsl.k" => self.refine.k = parse(key, value)?,
            "gsl.r" => self.refine.r = parse(key, value)?,
            "gsl.lsh_batch" => self.refine.lsh_batch = parse(key, value)?,
            "gsl.eps" => self.refine.eps = parse(key, value)?,
            "gsl.lsh_seed" => self.refine.lsh_seed = parse(key, value)?,
            "gsl.token_activation" => self.refine.activation = value.trim().parse()?,
            "gsl.fuse_normalized_adj" => self.refine.fuse_normalized_adj = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Frozen result of pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub head: ProjectionHead,
    /// `tokens.domains` is the ordered source list; downstream mixture
    /// coefficients follow this order.
    pub tokens: TokenSet,
    /// One basis per source domain, same order as `tokens.domains`.
    pub pca_bases: Vec<ProjectionBasis>,
    pub config: PretrainConfig,
}

impl Checkpoint {
    pub fn source_domain_ids(&self) -> &[String] {
        &self.tokens.domains
    }
}

/// A source graph reduced to what training needs.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub name: String,
    /// PCA-projected features, `n x d`.
    pub features: DenseMatrix,
    pub adjacency: Arc<CsrMatrix>,
    /// `D^-1/2 (A + I) D^-1/2`.
    pub normalized: Arc<CsrMatrix>,
}

impl PreparedGraph {
    pub fn new(graph: &Graph, basis: &ProjectionBasis, eps: f64) -> Result<Self> {
        Ok(Self {
            name: graph.name.clone(),
            features: project(&graph.features, basis)?,
            adjacency: Arc::new(graph.adjacency.clone()),
            normalized: Arc::new(degree_normalize_selfloops(&graph.adjacency, eps)?),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    /// The matrix aggregated in the neighbourhood view.
    pub fn fuse_adjacency(&self, cfg: &RefineConfig) -> &Arc<CsrMatrix> {
        if cfg.fuse_normalized_adj {
            &self.normalized
        } else {
            &self.adjacency
        }
    }
}

/// Refined structure for one graph, frozen for one epoch: the kNN pattern and
/// the `A'` weights used as constant positives.
#[derive(Clone, Debug)]
pub struct EpochStructure {
    pub plan: RefinePlan,
    pub weights: CsrMatrix,
}

/// Fused features `H` for `graph` under the given tokens (no gradients).
pub fn fused_features(
    graph: &PreparedGraph,
    t_d: &[f64],
    t_s: &[f64],
    t_b: &[f64],
    variant: Variant,
    cfg: &RefineConfig,
) -> Result<DenseMatrix> {
    let unified = unify_features(&graph.features, t_d, t_s, cfg.activation)?;
    if variant.fuses_topology() {
        fuse_views(&unified, graph.fuse_adjacency(cfg), cfg.r, t_b)
    } else {
        unified.mul_row_broadcast(t_b)
    }
}

/// Builds the frozen kNN pattern from fused features and evaluates `A'` on it.
pub fn epoch_structure(h: &DenseMatrix, cfg: &RefineConfig) -> Result<EpochStructure> {
    cfg.validate()?;
    let plan = RefinePlan::new(knn(h, cfg)?)?;
    let mut tape = Tape::new();
    let hn = tape.constant(h.clone());
    let values = plan.apply(&mut tape, hn, cfg.eps)?;
    let weights = plan.matrix(tape.value(values))?;
    Ok(EpochStructure { plan, weights })
}

/// Model parameters recorded on a tape for one graph.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub encoder: EncoderNodes,
    pub head_w1: NodeId,
    pub head_w2: NodeId,
    pub shared: NodeId,
    pub domain: NodeId,
    pub balance: NodeId,
}

/// Both encoded views of one graph.
#[derive(Clone, Copy, Debug)]
pub struct Views {
    pub unified: NodeId,
    pub z1: NodeId,
    pub z2: NodeId,
}

/// Records both views. With `structure = None` the second view propagates
/// over the normalized original adjacency.
pub fn encode_views<R: rand::Rng>(
    tape: &mut Tape,
    graph: &PreparedGraph,
    nodes: &ModelNodes,
    structure: Option<&EpochStructure>,
    cfg: &PretrainConfig,
    training: bool,
    rng: &mut R,
) -> Result<Views> {
    let x = tape.constant(graph.features.clone());
    let unified = refine::unify_on_tape(tape, x, nodes.domain, nodes.shared, cfg.refine.activation)?;
    let view1 = Propagation::Const(graph.normalized.clone());
    let view2 = match structure {
        Some(s) => {
            let fuse_adj = cfg.variant.fuses_topology().then(|| graph.fuse_adjacency(&cfg.refine));
            let h = refine::fuse_on_tape(tape, unified, fuse_adj, cfg.refine.r, nodes.balance)?;
            let values = s.plan.apply(tape, h, cfg.refine.eps)?;
            Propagation::Valued {
                pattern: s.plan.pattern().clone(),
                values,
            }
        }
        None => Propagation::Const(graph.normalized.clone()),
    };
    let seed1 = rng.next_u64();
    let seed2 = if cfg.shared_dropout_mask { seed1 } else { rng.next_u64() };
    let z1 = encode(tape, &view1, unified, &nodes.encoder, training, &mut ChaCha8Rng::seed_from_u64(seed1))?;
    let z2 = encode(tape, &view2, unified, &nodes.encoder, training, &mut ChaCha8Rng::seed_from_u64(seed2))?;
    Ok(Views { unified, z1, z2 })
}

/// Mean over `batches` of identity loss plus refined loss.
pub fn batch_objective(
    tape: &mut Tape,
    views: &Views,
    nodes: &ModelNodes,
    weights: &CsrMatrix,
    batches: &[Vec<usize>],
    tau: f64,
) -> Result<NodeId> {
    if batches.is_empty() {
        return Err(Error::Config("no node batches".into()));
    }
    let p1 = project_head(tape, views.z1, nodes.head_w1, nodes.head_w2)?;
    let p2 = project_head(tape, views.z2, nodes.head_w1, nodes.head_w2)?;
    let mut total: Option<NodeId> = None;
    for batch in batches {
        let b1 = tape.gather_rows(p1, batch)?;
        let b2 = tape.gather_rows(p2, batch)?;
        let li = loss_identity(tape, b1, b2, tau)?;
        let lr = loss_refined(tape, b1, b2, &weights.submatrix(batch), tau)?;
        if lr.skipped_anchors > 0 {
            log::warn!("{} anchors without positives in a batch", lr.skipped_anchors);
        }
        let l = tape.add(li, lr.loss)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one batch");
    Ok(tape.scale(total, 1.0 / batches.len() as f64))
}

/// Shuffled node batches, each sorted internally.
pub fn node_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size.max(1))
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// One parameter tensor of the pretraining model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamSlot {
    EncoderWeight(usize),
    EncoderBias(usize),
    HeadW1,
    HeadW2,
    Shared,
    Domain(usize),
    Balance(usize),
}

/// Mean training loss of one graph in one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub graph: String,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLoss>,
}

/// Mutable training state over a fixed list of source graphs.
pub struct Trainer {
    cfg: PretrainConfig,
    graphs: Vec<PreparedGraph>,
    bases: Vec<ProjectionBasis>,
    encoder: EncoderParams,
    head: ProjectionHead,
    tokens: TokenSet,
    adam: Adam,
}

impl Trainer {
    pub fn new(sources: &[Graph], cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        if sources.is_empty() {
            return Err(Error::Config("pretraining needs at least one source graph".into()));
        }
        let domains: Vec<String> = sources.iter().map(|g| g.domain_id.clone()).collect();
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].contains(d) {
                return Err(Error::Config(format!("duplicate source domain `{}`", d)));
            }
        }
        let mut bases = Vec::with_capacity(sources.len());
        let mut graphs = Vec::with_capacity(sources.len());
        for g in sources {
            let basis = fit_pca(&g.features, cfg.unified_dim, cfg.pca_center)?;
            graphs.push(PreparedGraph::new(g, &basis, cfg.refine.eps)?);
            bases.push(basis);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[tag::INIT]));
        let encoder = EncoderParams::init(cfg.unified_dim, &cfg.encoder, &mut rng)?;
        let head = ProjectionHead::init(cfg.encoder.hidden, &mut rng);
        let tokens = TokenSet::ones(&domains, cfg.unified_dim, cfg.variant.balance_width(cfg.unified_dim));
        Ok(Self {
            cfg: cfg.clone(),
            graphs,
            bases,
            encoder,
            head,
            tokens,
            adam: Adam::new(cfg.learning_rate),
        })
    }

    pub fn graphs(&self) -> &[PreparedGraph] {
        &self.graphs
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    /// The epoch structure of graph `g` under the current tokens, or `None`
    /// when the variant does not refine.
    pub fn structure(&self, g: usize) -> Result<Option<EpochStructure>> {
        if !self.cfg.variant.uses_refined_adjacency() {
            return Ok(None);
        }
        let h = fused_features(
            &self.graphs[g],
            &self.tokens.domain_tokens[g],
            &self.tokens.shared_token,
            &self.tokens.balance_tokens[g],
            self.cfg.variant,
            &self.cfg.refine,
        )?;
        epoch_structure(&h, &self.cfg.refine).map(Some)
    }

    fn record(&self, tape: &mut Tape, g: usize) -> (ModelNodes, Vec<(NodeId, ParamSlot)>) {
        let mut slots = Vec::new();
        let encoder = self.encoder.on_tape(tape, true);
        for (l, &w) in encoder.weights.iter().enumerate() {
            slots.push((w, ParamSlot::EncoderWeight(l)));
        }
        for (l, &b) in encoder.biases.iter().enumerate() {
            slots.push((b, ParamSlot::EncoderBias(l)));
        }
        let head_w1 = tape.param(self.head.w1.clone());
        let head_w2 = tape.param(self.head.w2.clone());
        slots.push((head_w1, ParamSlot::HeadW1));
        slots.push((head_w2, ParamSlot::HeadW2));
        let row = |v: &[f64]| DenseMatrix::row_vector(v);
        let shared = if self.cfg.variant.trains_shared_token() {
            let id = tape.param(row(&self.tokens.shared_token));
            slots.push((id, ParamSlot::Shared));
            id
        } else {
            tape.constant(row(&self.tokens.shared_token))
        };
        let domain = tape.param(row(&self.tokens.domain_tokens[g]));
        slots.push((domain, ParamSlot::Domain(g)));
        let balance = if self.cfg.variant.trains_balance_tokens() && self.cfg.variant.uses_refined_adjacency() {
            let id = tape.param(row(&self.tokens.balance_tokens[g]));
            slots.push((id, ParamSlot::Balance(g)));
            id
        } else {
            tape.constant(row(&self.tokens.balance_tokens[g]))
        };
        let nodes = ModelNodes {
            encoder,
            head_w1,
            head_w2,
            shared,
            domain,
            balance,
        };
        (nodes, slots)
    }

    /// Loss and gradients of graph `g` over `batches` at the current state.
    pub fn loss_and_gradients(
        &self,
        g: usize,
        structure: Option<&EpochStructure>,
        batches: &[Vec<usize>],
        dropout_seed: u64,
    ) -> Result<(f64, Vec<(ParamSlot, DenseMatrix)>)> {
        let mut tape = Tape::new();
        let (nodes, slots) = self.record(&mut tape, g);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let views = encode_views(&mut tape, &self.graphs[g], &nodes, structure, &self.cfg, true, &mut rng)?;
        let weights = structure.map_or_else(|| self.graphs[g].normalized.as_ref().clone(), |s| s.weights.clone());
        let loss = batch_objective(&mut tape, &views, &nodes, &weights, batches, self.cfg.tau_c)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let out = slots
            .into_iter()
            .map(|(id, slot)| {
                let (r, c) = tape.shape(id);
                (slot, grads.get(id).cloned().unwrap_or_else(|| DenseMatrix::zeros(r, c)))
            })
            .collect();
        Ok((value, out))
    }

    fn slot_index(&self, slot: ParamSlot) -> usize {
        let layers = self.encoder.weights.len();
        let biases = self.encoder.biases.len();
        let n = self.graphs.len();
        match slot {
            ParamSlot::EncoderWeight(l) => l,
            ParamSlot::EncoderBias(l) => layers + l,
            ParamSlot::HeadW1 => layers + biases,
            ParamSlot::HeadW2 => layers + biases + 1,
            ParamSlot::Shared => layers + biases + 2,
            ParamSlot::Domain(g) => layers + biases + 3 + g,
            ParamSlot::Balance(g) => layers + biases + 3 + n + g,
        }
    }

    fn apply(&mut self, grads: Vec<(ParamSlot, DenseMatrix)>) {
        for (slot, grad) in grads {
            let idx = self.slot_index(slot);
            let adam = &mut self.adam;
            let step_row = |adam: &mut Adam, v: &mut Vec<f64>| {
                let mut m = DenseMatrix::row_vector(v);
                adam.step(idx, &mut m, &grad);
                *v = m.into_data();
            };
            match slot {
                ParamSlot::EncoderWeight(l) => adam.step(idx, &mut self.encoder.weights[l], &grad),
                ParamSlot::EncoderBias(l) => adam.step(idx, &mut self.encoder.biases[l], &grad),
                ParamSlot::HeadW1 => adam.step(idx, &mut self.head.w1, &grad),
                ParamSlot::HeadW2 => adam.step(idx, &mut self.head.w2, &grad),
                ParamSlot::Shared => step_row(adam, &mut self.tokens.shared_token),
                ParamSlot::Domain(g) => step_row(adam, &mut self.tokens.domain_tokens[g]),
                ParamSlot::Balance(g) => step_row(adam, &mut self.tokens.balance_tokens[g]),
            }
        }
    }

    /// Trains graph `g` for one epoch and returns its mean batch loss.
    pub fn visit(&mut self, epoch: usize, g: usize) -> Result<f64> {
        let structure = self.structure(g)?;
        let n = self.graphs[g].n_nodes();
        let batches = node_batches(n, self.cfg.batch_size, derive(self.cfg.seed, &[tag::BATCH, epoch as u64, g as u64]));
        let seed = self.cfg.seed;
        let dropout = |b: u64| derive(seed, &[tag::DROPOUT, epoch as u64, g as u64, b]);
        let mut losses = Vec::new();
        match self.cfg.step {
            StepGranularity::PerGraph => {
                let (loss, grads) = self.loss_and_gradients(g, structure.as_ref(), &batches, dropout(0))?;
                self.check_finite(loss, epoch, g, None)?;
                self.apply(grads);
                losses.push(loss);
            }
            StepGranularity::PerBatch => {
                for (b, batch) in batches.iter().enumerate() {
                    let one = core::slice::from_ref(batch);
                    let (loss, grads) = self.loss_and_gradients(g, structure.as_ref(), one, dropout(b as u64))?;
                    self.check_finite(loss, epoch, g, Some(b))?;
                    self.apply(grads);
                    losses.push(loss);
                }
            }
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn check_finite(&self, loss: f64, epoch: usize, g: usize, batch: Option<usize>) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        let batch = batch.map_or_else(|| "all".into(), |b| b.to_string());
        Err(Error::NonFinite(format!(
            "loss {} at epoch {}, graph {} ({}), batch {}",
            loss, epoch, g, self.graphs[g].name, batch
        )))
    }

    /// Runs the configured schedule.
    pub fn run(&mut self) -> Result<Vec<EpochLoss>> {
        let mut log = Vec::new();
        let (epochs, graphs) = (self.cfg.epochs, self.graphs.len());
        let order: Vec<(usize, usize)> = match self.cfg.schedule {
            Schedule::RoundRobin => (0..epochs).flat_map(|e| (0..graphs).map(move |g| (e, g))).collect(),
            Schedule::GraphByGraph => (0..graphs).flat_map(|g| (0..epochs).map(move |e| (e, g))).collect(),
        };
        for (epoch, g) in order {
            let mean_loss = self.visit(epoch, g)?;
            log::debug!("epoch {} graph {} loss {:.6}", epoch, self.graphs[g].name, mean_loss);
            log.push(EpochLoss {
                epoch,
                graph: self.graphs[g].name.clone(),
                mean_loss,
            });
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            tokens: self.tokens.clone(),
            pca_bases: self.bases.clone(),
            config: self.cfg.clone(),
        }
    }
}

/// Trains on `sources` and returns the checkpoint with the per-epoch log.
pub fn pretrain(sources: &[Graph], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let mut trainer = Trainer::new(sources, cfg)?;
    let log = trainer.run()?;
    Ok(PretrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}

/// Evaluation-mode embeddings of both views of a source graph under a checkpoint.
pub fn view_embeddings(cp: &Checkpoint, graph: &PreparedGraph, domain: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let cfg = &cp.config;
    let structure = if cfg.variant.uses_refined_adjacency() {
        let h = fused_features(
            graph,
            &cp.tokens.domain_tokens[domain],
            &cp.tokens.shared_token,
            &cp.tokens.balance_tokens[domain],
            cfg.variant,
            &cfg.refine,
        )?;
        Some(epoch_structure(&h, &cfg.refine)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let row = |v: &[f64]| DenseMatrix::row_vector(v);
    let nodes = ModelNodes {
        encoder: cp.encoder.on_tape(&mut tape, false),
        head_w1: tape.constant(cp.head.w1.clone()),
        head_w2: tape.constant(cp.head.w2.clone()),
        shared: tape.constant(row(&cp.tokens.shared_token)),
        domain: tape.constant(row(&cp.tokens.domain_tokens[domain])),
        balance: tape.constant(row(&cp.tokens.balance_tokens[domain])),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let views = encode_views(&mut tape, graph, &nodes, structure.as_ref(), cfg, false, &mut rng)?;
    Ok((tape.value(views.z1).clone(), tape.value(views.z2).clone()))
}
