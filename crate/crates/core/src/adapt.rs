//! Few-shot transfer to an unseen graph with the pretrained encoder frozen.
//!
//! The target features pass through a meta prompt (a softmax mixture of the
//! frozen source domain tokens) and a free specific prompt, mixed by a
//! sigmoid gate. The target structure is refined like a source graph with
//! its own balance token, and nodes are classified by cosine similarity to
//! class prototypes built from the support set.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense::DenseMatrix;
use crate::encoder::{encode, EncoderNodes, Propagation};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math;
use crate::optim::Adam;
use crate::pca::{fit_pca, ProjectionBasis};
use crate::pretrain::{parse, Checkpoint, PreparedGraph};
use crate::refine::{knn, RefineConfig, RefinePlan, TokenActivation};
use crate::tape::{NodeId, Tape};

/// Floor for the literal (non-exponentiated) numerator before its logarithm.
pub const LITERAL_NUMERATOR_FLOOR: f64 = 1e-12;

/// Default number of resampled tasks per pretrained model.
pub const DEFAULT_RESAMPLES: usize = 50;

/// How the target balance token is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetBalance {
    /// A free vector tuned with the prompts.
    #[default]
    Trained,
    /// The α-weighted mixture of the frozen source balance tokens.
    Mixed,
}

impl TargetBalance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Trained => "trained",
            Self::Mixed => "mixed",
        }
    }
}

impl FromStr for TargetBalance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(Self::Trained),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Config(format!("unknown target balance mode `{}`", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub shots: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau: f64,
    /// Target-side refinement; `k` is the downstream kNN width.
    pub refine: RefineConfig,
    pub target_balance: TargetBalance,
    /// Use the prototype loss with a plain (non-exponentiated) numerator.
    pub literal_eq7: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            epochs: 100,
            learning_rate: 1e-3,
            tau: 0.2,
            refine: RefineConfig::default(),
            target_balance: TargetBalance::Trained,
            literal_eq7: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("adapt.shots must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("adapt.tau must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("adapt.lr must be positive".into()));
        }
        self.refine.validate()
    }

    /// Every downstream field as `adapt.key = value`. Only `k` is listed from
    /// the refinement settings; the rest follow the pretraining checkpoint.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("adapt.shots", self.shots.to_string()),
            ("adapt.epochs", self.epochs.to_string()),
            ("adapt.lr", format!("{:?}", self.learning_rate)),
            ("adapt.tau", format!("{:?}", self.tau)),
            ("adapt.k", self.refine.k.to_string()),
            ("adapt.target_balance", self.target_balance.as_str().into()),
            ("adapt.literal_eq7", self.literal_eq7.to_string()),
        ]
    }

    /// Applies one `adapt.key = value` setting; `false` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "adapt.shots" | "adapt.k_shot" => self.shots = parse(key, value)?,
            "adapt.epochs" => self.epochs = parse(key, value)?,
            "adapt.lr" => self.learning_rate = parse(key, value)?,
            "adapt.tau" => self.tau = parse(key, value)?,
            "adapt.k" => self.refine.k = parse(key, value)?,
            "adapt.target_balance" => self.target_balance = value.trim().parse()?,
            "adapt.literal_eq7" => self.literal_eq7 = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Copy whose refinement settings come from `pretrained`, keeping this
    /// config's downstream `k`.
    pub fn aligned_with(&self, pretrained: &RefineConfig) -> Self {
        Self {
            refine: RefineConfig {
                k: self.refine.k,
                ..pretrained.clone()
            },
            ..self.clone()
        }
    }
}

/// Downstream learnables.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub alpha_logits: Vec<f64>,
    pub specific: Vec<f64>,
    pub beta_logit: f64,
    pub target_balance: Vec<f64>,
}

impl PromptState {
    /// Uniform mixture, neutral specific prompt, `β = 0.5`, ones balance token.
    pub fn init(n_domains: usize, dim: usize, balance_width: usize) -> Self {
        Self {
            alpha_logits: vec![0.0; n_domains],
            specific: vec![1.0; dim],
            beta_logit: 0.0,
            target_balance: vec![1.0; balance_width],
        }
    }

    pub fn for_checkpoint(cp: &Checkpoint) -> Self {
        Self::init(cp.tokens.domains.len(), cp.tokens.dim(), cp.tokens.balance_width())
    }

    pub fn alpha(&self) -> Vec<f64> {
        let lse = math::log_sum_exp(&self.alpha_logits);
        self.alpha_logits.iter().map(|&l| math::exp(l - lse)).collect()
    }

    pub fn beta(&self) -> f64 {
        math::sigmoid(self.beta_logit)
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> PromptNodes {
        let mut leaf = |m: DenseMatrix| if trainable { tape.param(m) } else { tape.constant(m) };
        PromptNodes {
            alpha_logits: leaf(DenseMatrix::row_vector(&self.alpha_logits)),
            specific: leaf(DenseMatrix::row_vector(&self.specific)),
            beta_logit: leaf(DenseMatrix::scalar(self.beta_logit)),
            target_balance: leaf(DenseMatrix::row_vector(&self.target_balance)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptNodes {
    pub alpha_logits: NodeId,
    pub specific: NodeId,
    pub beta_logit: NodeId,
    pub target_balance: NodeId,
}

/// Checkpoint values recorded as constants.
#[derive(Clone, Debug)]
pub struct FrozenNodes {
    pub encoder: EncoderNodes,
    pub shared: NodeId,
    /// `N x d`, one source domain token per row.
    pub domain_tokens: NodeId,
    /// `N x w`, one source balance token per row.
    pub balance_tokens: NodeId,
    pub activation: TokenActivation,
}

impl FrozenNodes {
    pub fn record(tape: &mut Tape, cp: &Checkpoint) -> Result<Self> {
        let stack = |rows: &[Vec<f64>]| DenseMatrix::from_rows(rows);
        Ok(Self {
            encoder: cp.encoder.on_tape(tape, false),
            shared: tape.constant(DenseMatrix::row_vector(&cp.tokens.shared_token)),
            domain_tokens: tape.constant(stack(&cp.tokens.domain_tokens)?),
            balance_tokens: tape.constant(stack(&cp.tokens.balance_tokens)?),
            activation: cp.config.refine.activation,
        })
    }
}

/// `t_s ⊙ σ((Σ_i α_i t_{D_i}) ⊙ x)` with `α = softmax(alpha_logits)`.
pub fn meta_prompt(tape: &mut Tape, x: NodeId, prompt: &PromptNodes, frozen: &FrozenNodes) -> Result<NodeId> {
    let n_domains = tape.shape(frozen.domain_tokens).0;
    if tape.shape(prompt.alpha_logits) != (1, n_domains) {
        return Err(Error::shape(
            "meta_prompt",
            format!("{:?} mixture logits for {} source domains", tape.shape(prompt.alpha_logits), n_domains),
        ));
    }
    let alpha = tape.softmax_rows(prompt.alpha_logits);
    let mixed = tape.matmul(alpha, frozen.domain_tokens)?;
    crate::refine::unify_on_tape(tape, x, mixed, frozen.shared, frozen.activation)
}

/// `β · meta(x) + (1 - β) · (p_s ⊙ x)` with `β = sigmoid(beta_logit)`.
pub fn compose_input(tape: &mut Tape, x: NodeId, prompt: &PromptNodes, frozen: &FrozenNodes) -> Result<NodeId> {
    let meta = meta_prompt(tape, x, prompt, frozen)?;
    let specific = tape.row_broadcast_mul(x, prompt.specific)?;
    let beta = tape.sigmoid(prompt.beta_logit);
    let rest = tape.affine(beta, -1.0, 1.0);
    let a = tape.scalar_mul(meta, beta)?;
    let b = tape.scalar_mul(specific, rest)?;
    tape.add(a, b)
}

/// Target embeddings and the refinement pattern they used.
#[derive(Clone, Debug)]
pub struct TargetEmbedding {
    pub z: NodeId,
    /// `None` when the variant propagates over the original adjacency.
    pub plan: Option<RefinePlan>,
}

/// Records the full target path: prompts, fusion with the target balance
/// token, refinement and the frozen encoder. A given `plan` freezes the kNN
/// pattern; otherwise it is selected from the current fused features.
pub fn embed_target(
    tape: &mut Tape,
    target: &PreparedGraph,
    cp: &Checkpoint,
    prompt: &PromptNodes,
    frozen: &FrozenNodes,
    cfg: &AdaptConfig,
    plan: Option<&RefinePlan>,
) -> Result<TargetEmbedding> {
    let variant = cp.config.variant;
    let x = tape.constant(target.features.clone());
    let composed = compose_input(tape, x, prompt, frozen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if !variant.uses_refined_adjacency() {
        let prop = Propagation::Const(target.normalized.clone());
        let z = encode(tape, &prop, composed, &frozen.encoder, false, &mut rng)?;
        return Ok(TargetEmbedding { z, plan: None });
    }
    let balance = match cfg.target_balance {
        TargetBalance::Trained => prompt.target_balance,
        TargetBalance::Mixed => {
            let alpha = tape.softmax_rows(prompt.alpha_logits);
            tape.matmul(alpha, frozen.balance_tokens)?
        }
    };
    let fuse_adj = variant.fuses_topology().then(|| target.fuse_adjacency(&cfg.refine));
    let h = crate::refine::fuse_on_tape(tape, composed, fuse_adj, cfg.refine.r, balance)?;
    let plan = match plan {
        Some(p) => p.clone(),
        None => RefinePlan::new(knn(tape.value(h), &cfg.refine)?)?,
    };
    let values = plan.apply(tape, h, cfg.refine.eps)?;
    let prop = Propagation::Valued {
        pattern: plan.pattern().clone(),
        values,
    };
    let z = encode(tape, &prop, composed, &frozen.encoder, false, &mut rng)?;
    Ok(TargetEmbedding { z, plan: Some(plan) })
}

/// A K-shot node classification task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotTask {
    pub shots: usize,
    /// Retained class ids; prototype `c` belongs to `classes[c]`.
    pub classes: Vec<usize>,
    /// `support[c]` holds the sorted support nodes of `classes[c]`.
    pub support: Vec<Vec<usize>>,
    /// Labeled nodes of retained classes outside the support set, ascending.
    pub query: Vec<usize>,
    pub seed: u64,
}

impl FewShotTask {
    pub fn support_size(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    /// `(node, prototype index)` for every support node.
    pub fn support_targets(&self) -> Vec<(usize, usize)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(c, nodes)| nodes.iter().map(move |&n| (n, c)))
            .collect()
    }
}

/// Draws `shots` support nodes per class uniformly without replacement.
/// Classes with at most `shots` labeled nodes are dropped with a warning.
pub fn sample_kshot(labels: &[usize], shots: usize, seed: u64) -> Result<FewShotTask> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (node, &y) in labels.iter().enumerate() {
        members[y].push(node);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::new();
    let mut support = Vec::new();
    for (c, nodes) in members.iter().enumerate() {
        if nodes.len() < shots + 1 {
            if !nodes.is_empty() {
                log::warn!("class {} has {} labeled nodes, needs {}; dropped", c, nodes.len(), shots + 1);
            }
            continue;
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, nodes.len(), shots)
            .into_iter()
            .map(|i| nodes[i])
            .collect();
        picked.sort_unstable();
        classes.push(c);
        support.push(picked);
    }
    if classes.is_empty() {
        return Err(Error::Task(format!("no class has more than {} labeled nodes", shots)));
    }
    let mut in_support = vec![false; labels.len()];
    support.iter().flatten().for_each(|&n| in_support[n] = true);
    let query = (0..labels.len())
        .filter(|&n| !in_support[n] && classes.binary_search(&labels[n]).is_ok())
        .collect();
    Ok(FewShotTask {
        shots,
        classes,
        support,
        query,
        seed,
    })
}

fn averaging_matrix(task: &FewShotTask) -> Result<DenseMatrix> {
    let total = task.support_size();
    let mut m = DenseMatrix::zeros(task.support.len(), total);
    let mut col = 0;
    for (c, nodes) in task.support.iter().enumerate() {
        if nodes.is_empty() {
            return Err(Error::Precondition(format!("class {} has no support nodes", task.classes[c])));
        }
        for _ in nodes {
            m.set(c, col, 1.0 / nodes.len() as f64);
            col += 1;
        }
    }
    Ok(m)
}

/// Per-class mean of the support embeddings, `C x h`.
pub fn prototypes(z: &DenseMatrix, task: &FewShotTask) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(task.support.len(), z.cols());
    for (c, nodes) in task.support.iter().enumerate() {
        if nodes.is_empty() {
            return Err(Error::Precondition(format!("class {} has no support nodes", task.classes[c])));
        }
        for &n in nodes {
            if n >= z.rows() {
                return Err(Error::Bounds { node: n, n: z.rows() });
            }
            for (o, &v) in out.row_mut(c).iter_mut().zip(z.row(n)) {
                *o += v;
            }
        }
        let k = nodes.len() as f64;
        out.row_mut(c).iter_mut().for_each(|v| *v /= k);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    /// Prototype index per node; ties go to the lower index.
    pub predictions: Vec<usize>,
    /// Mean cross-entropy over the labeled nodes passed in (0 if none).
    pub loss: f64,
}

/// Cosine-to-prototype classification with temperature `tau`. Zero-norm
/// embeddings have similarity 0 to every prototype.
pub fn classify(z: &DenseMatrix, protos: &DenseMatrix, tau: f64, labeled: &[(usize, usize)]) -> Result<Classification> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {} must be positive", tau)));
    }
    if z.cols() != protos.cols() {
        return Err(Error::shape("classify", format!("embeddings width {} vs prototypes {}", z.cols(), protos.cols())));
    }
    let (zn, _) = z.normalize_rows();
    let (pn, _) = protos.normalize_rows();
    let logits = zn.matmul_t(&pn)?.scale(1.0 / tau);
    let predictions = (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (1..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    let mut loss = 0.0;
    for &(node, class) in labeled {
        let row = logits.row(node);
        loss += math::log_sum_exp(row) - row[class];
    }
    if !labeled.is_empty() {
        loss /= labeled.len() as f64;
    }
    Ok(Classification { predictions, loss })
}

/// Prototype loss over the support set, computed on the tape so gradients
/// reach the prompts through both the prototypes and the support embeddings.
pub fn support_loss(tape: &mut Tape, z: NodeId, task: &FewShotTask, tau: f64, literal_eq7: bool) -> Result<NodeId> {
    let targets = task.support_targets();
    let nodes: Vec<usize> = targets.iter().map(|&(n, _)| n).collect();
    let classes: Vec<usize> = targets.iter().map(|&(_, c)| c).collect();
    let zs = tape.gather_rows(z, &nodes)?;
    let avg = tape.constant(averaging_matrix(task)?);
    let protos = tape.matmul(avg, zs)?;
    let cos = tape.cosine_similarity_matrix(zs, protos)?;
    let logits = tape.scale(cos, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(log_probs, &classes)?;
    let per_node = if literal_eq7 {
        // ln(s_y / τ) - LSE = ln(s_y / τ) - s_y / τ + log p_y
        let raw = tape.pick_per_row(logits, &classes)?;
        let ln_raw = tape.ln_clamped(raw, LITERAL_NUMERATOR_FLOOR);
        let neg_raw = tape.neg(raw);
        let partial = tape.add(ln_raw, neg_raw)?;
        tape.add(partial, picked)?
    } else {
        picked
    };
    let mean = tape.mean_scalar(per_node);
    Ok(tape.neg(mean))
}

/// PCA basis fitted on the target graph itself and the prepared graph.
pub fn prepare_target(graph: &Graph, cp: &Checkpoint) -> Result<(PreparedGraph, ProjectionBasis)> {
    let basis = fit_pca(&graph.features, cp.config.unified_dim, cp.config.pca_center)?;
    let prepared = PreparedGraph::new(graph, &basis, cp.config.refine.eps)?;
    Ok((prepared, basis))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOutcome {
    pub state: PromptState,
    /// Fraction of query nodes classified correctly.
    pub accuracy: f64,
    /// Support loss before each optimizer step.
    pub support_losses: Vec<f64>,
}

/// Evaluation-mode target embeddings under a prompt state.
pub fn target_embeddings(target: &PreparedGraph, cp: &Checkpoint, state: &PromptState, cfg: &AdaptConfig) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let frozen = FrozenNodes::record(&mut tape, cp)?;
    let prompt = state.on_tape(&mut tape, false);
    let emb = embed_target(&mut tape, target, cp, &prompt, &frozen, cfg, None)?;
    Ok(tape.value(emb.z).clone())
}

/// Tunes the prompts on the support set with the encoder frozen, then scores
/// the query set. The embeddings are computed in evaluation mode.
pub fn tune(target: &PreparedGraph, labels: &[usize], cp: &Checkpoint, task: &FewShotTask, cfg: &AdaptConfig) -> Result<TuneOutcome> {
    cfg.validate()?;
    if labels.len() != target.n_nodes() {
        return Err(Error::shape("tune", format!("{} labels for {} nodes", labels.len(), target.n_nodes())));
    }
    if task.query.is_empty() {
        return Err(Error::Task("task has an empty query set".into()));
    }
    let mut state = PromptState::for_checkpoint(cp);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut support_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let frozen = FrozenNodes::record(&mut tape, cp)?;
        let prompt = state.on_tape(&mut tape, true);
        let emb = embed_target(&mut tape, target, cp, &prompt, &frozen, cfg, None)?;
        let loss = support_loss(&mut tape, emb.z, task, cfg.tau, cfg.literal_eq7)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("support loss {} at tuning epoch {}", value, epoch)));
        }
        support_losses.push(value);
        let grads = tape.backward(loss)?;
        let grad = |id: NodeId| grads.get(id).cloned().unwrap_or_else(|| DenseMatrix::zeros(tape.shape(id).0, tape.shape(id).1));
        step_row(&mut adam, 0, &mut state.alpha_logits, &grad(prompt.alpha_logits));
        step_row(&mut adam, 1, &mut state.specific, &grad(prompt.specific));
        let mut beta = vec![state.beta_logit];
        step_row(&mut adam, 2, &mut beta, &grad(prompt.beta_logit));
        state.beta_logit = beta[0];
        if cfg.target_balance == TargetBalance::Trained {
            step_row(&mut adam, 3, &mut state.target_balance, &grad(prompt.target_balance));
        }
    }
    let z = target_embeddings(target, cp, &state, cfg)?;
    let protos = prototypes(&z, task)?;
    let out = classify(&z, &protos, cfg.tau, &[])?;
    let correct = task
        .query
        .iter()
        .filter(|&&n| task.classes[out.predictions[n]] == labels[n])
        .count();
    Ok(TuneOutcome {
        state,
        accuracy: correct as f64 / task.query.len() as f64,
        support_losses,
    })
}

fn step_row(adam: &mut Adam, slot: usize, values: &mut Vec<f64>, grad: &DenseMatrix) {
    let mut m = DenseMatrix::new(1, values.len(), values.clone()).expect("prompt values are finite");
    adam.step(slot, &mut m, grad);
    *values = m.into_data();
}

/// Ids of the source domains a checkpoint mixes over.
pub fn source_ids(cp: &Checkpoint) -> &[String] {
    &cp.tokens.domains
}
