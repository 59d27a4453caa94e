//! Structure refinement: token modulation of features, balance-token fusion of
//! the feature and neighbourhood views, cosine kNN sparsification (exact or
//! LSH-bucketed) and the symmetrize/activate/normalize post-processing.
//!
//! Every stage has a plain function on [`DenseMatrix`] / [`CsrMatrix`] and a
//! tape counterpart. On the tape the kNN pattern is frozen while the retained
//! similarity values stay differentiable, so gradients reach the tokens.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjacency::{degree_normalize_selfloops, symmetrize_activate, DEFAULT_DEGREE_EPS};
use crate::csr::CsrMatrix;
use crate::dense::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::math;
use crate::tape::{NodeId, Tape};

/// Default kNN width for homophilic graphs.
pub const DEFAULT_K_HOMOPHILIC: usize = 30;
/// Default kNN width for heterophilic graphs.
pub const DEFAULT_K_HETEROPHILIC: usize = 15;

/// Non-linearity applied after the domain token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenActivation {
    #[default]
    Elu,
    Relu,
    Tanh,
}

impl TokenActivation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Elu => "elu",
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Elu => {
                if v > 0.0 {
                    v
                } else {
                    math::expm1(v)
                }
            }
            Self::Relu => v.max(0.0),
            Self::Tanh => math::tanh(v),
        }
    }

    pub fn on_tape(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Self::Elu => tape.elu(x),
            Self::Relu => tape.relu(x),
            Self::Tanh => tape.tanh(x),
        }
    }
}

impl FromStr for TokenActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Self::Elu),
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown token activation `{}`", other))),
        }
    }
}

/// Learnable alignment vectors for a set of source domains.
///
/// `domains[i]` owns `domain_tokens[i]` (width `dim`) and `balance_tokens[i]`
/// (width `2 * dim`, or `dim` when the neighbourhood view is disabled).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub domains: Vec<String>,
    pub domain_tokens: Vec<Vec<f64>>,
    pub shared_token: Vec<f64>,
    pub balance_tokens: Vec<Vec<f64>>,
}

impl TokenSet {
    /// All tokens start at one, i.e. identity modulation.
    pub fn ones(domains: &[String], dim: usize, balance_width: usize) -> Self {
        Self {
            domains: domains.to_vec(),
            domain_tokens: vec![vec![1.0; dim]; domains.len()],
            shared_token: vec![1.0; dim],
            balance_tokens: vec![vec![1.0; balance_width]; domains.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.shared_token.len()
    }

    pub fn balance_width(&self) -> usize {
        self.balance_tokens.first().map_or(2 * self.dim(), Vec::len)
    }

    pub fn index_of(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub k: usize,
    /// Aggregation order of the neighbourhood view.
    pub r: usize,
    /// LSH bucket size; 0 selects exact kNN.
    pub lsh_batch: usize,
    pub eps: f64,
    pub lsh_seed: u64,
    pub activation: TokenActivation,
    /// Aggregate with the degree-normalized adjacency instead of the raw one.
    pub fuse_normalized_adj: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K_HOMOPHILIC,
            r: 1,
            lsh_batch: 0,
            eps: DEFAULT_DEGREE_EPS,
            lsh_seed: 0,
            activation: TokenActivation::Elu,
            fuse_normalized_adj: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("gsl.k must be at least 1".into()));
        }
        if self.r == 0 {
            return Err(Error::Config("gsl.r must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("gsl.eps must be positive".into()));
        }
        if self.lsh_batch != 0 && self.lsh_batch < self.k + 1 {
            return Err(Error::Config(format!(
                "gsl.lsh_batch {} must be at least k+1 = {}",
                self.lsh_batch,
                self.k + 1
            )));
        }
        Ok(())
    }
}

fn check_token(op: &'static str, token: &[f64], width: usize) -> Result<()> {
    if token.len() != width {
        return Err(Error::shape(op, format!("token of length {} for width {}", token.len(), width)));
    }
    Ok(())
}

/// `t_s ⊙ σ(t_d ⊙ x)`, tokens broadcast over rows.
pub fn unify_features(x: &DenseMatrix, t_d: &[f64], t_s: &[f64], act: TokenActivation) -> Result<DenseMatrix> {
    check_token("unify_features", t_d, x.cols())?;
    check_token("unify_features", t_s, x.cols())?;
    Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
        t_s[j] * act.apply(t_d[j] * x.get(i, j))
    }))
}

/// `t_b ⊙ [x, Aʳ x]`.
pub fn fuse_views(x: &DenseMatrix, a: &CsrMatrix, r: usize, t_b: &[f64]) -> Result<DenseMatrix> {
    check_token("fuse_views", t_b, 2 * x.cols())?;
    let mut agg = x.clone();
    for _ in 0..r {
        agg = a.spmm(&agg)?;
    }
    x.concat_cols(&agg)?.mul_row_broadcast(t_b)
}

/// Tape version of [`unify_features`]; tokens are `1 x d` nodes.
pub fn unify_on_tape(tape: &mut Tape, x: NodeId, t_d: NodeId, t_s: NodeId, act: TokenActivation) -> Result<NodeId> {
    let modulated = tape.row_broadcast_mul(x, t_d)?;
    let activated = act.on_tape(tape, modulated);
    tape.row_broadcast_mul(activated, t_s)
}

/// Tape version of [`fuse_views`]. With `a = None` the neighbourhood view is
/// skipped and the result is `t_b ⊙ x`.
pub fn fuse_on_tape(tape: &mut Tape, x: NodeId, a: Option<&Arc<CsrMatrix>>, r: usize, t_b: NodeId) -> Result<NodeId> {
    let h = match a {
        Some(a) => {
            let mut agg = x;
            for _ in 0..r {
                agg = tape.spmm_const(a.clone(), agg)?;
            }
            tape.concat_cols(x, agg)?
        }
        None => x,
    };
    tape.row_broadcast_mul(h, t_b)
}

/// Per-row top-k over candidate columns by descending similarity, lower
/// column first on ties. `candidates` must be ascending.
fn top_k_row(hn: &DenseMatrix, i: usize, candidates: &[usize], k: usize, evaluations: &mut u64) -> Vec<(usize, f64)> {
    let mut sims: Vec<(usize, f64)> = candidates
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (j, dot(hn.row(i), hn.row(j))))
        .collect();
    *evaluations += sims.len() as u64;
    select_top_k(&mut sims, k);
    sims
}

/// Keeps the `k` most similar entries (lower column first on ties), sorted by column.
fn select_top_k(sims: &mut Vec<(usize, f64)>, k: usize) {
    if sims.len() > k && k > 0 {
        sims.select_nth_unstable_by(k - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    }
    sims.truncate(k);
    sims.sort_by_key(|&(j, _)| j);
}

/// Cosine kNN over all row pairs. Stored values are the raw similarities;
/// zero rows have similarity 0 with everything. The diagonal is excluded.
pub fn knn_exact(h: &DenseMatrix, k: usize) -> CsrMatrix {
    let (hn, _) = h.normalize_rows();
    let n = h.rows();
    // dot is symmetric bit for bit, so each pair is evaluated once
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = dot(hn.row(i), hn.row(j));
            gram[i * n + j] = s;
            gram[j * n + i] = s;
        }
    }
    let rows = (0..n)
        .map(|i| {
            let mut sims: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, gram[i * n + j])).collect();
            select_top_k(&mut sims, k);
            sims
        })
        .collect();
    CsrMatrix::from_rows(n, rows).expect("kNN rows are in range")
}

/// Bookkeeping from an LSH kNN run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LshStats {
    pub hyperplanes: usize,
    pub buckets: usize,
    pub similarity_evaluations: u64,
}

/// Approximate cosine kNN: rows are hashed by the signs of their projections
/// onto `⌈log2(n / batch)⌉` random hyperplanes, undersized buckets are merged
/// with their smaller neighbour (in hash order) until every bucket holds at
/// least `batch` rows, and exact top-k runs inside each bucket.
pub fn knn_lsh(h: &DenseMatrix, k: usize, batch: usize, seed: u64) -> Result<CsrMatrix> {
    knn_lsh_with_stats(h, k, batch, seed).map(|(m, _)| m)
}

pub fn knn_lsh_with_stats(h: &DenseMatrix, k: usize, batch: usize, seed: u64) -> Result<(CsrMatrix, LshStats)> {
    if batch < k + 1 {
        return Err(Error::Config(format!("LSH bucket size {} must be at least k+1 = {}", batch, k + 1)));
    }
    let n = h.rows();
    let (hn, _) = h.normalize_rows();
    let planes = if n > batch {
        math::ceil(math::log2(n as f64 / batch as f64)) as usize
    } else {
        0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Vec<f64>> = (0..planes)
        .map(|_| (0..h.cols()).map(|_| standard_normal(&mut rng)).collect())
        .collect();
    let codes: Vec<u64> = (0..n)
        .map(|i| {
            normals
                .iter()
                .enumerate()
                .fold(0u64, |c, (b, w)| c | (((dot(hn.row(i), w) >= 0.0) as u64) << b))
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (codes[i], i));
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match buckets.last_mut() {
            Some(b) if codes[b[0]] == codes[i] => b.push(i),
            _ => buckets.push(vec![i]),
        }
    }
    merge_small_buckets(&mut buckets, batch);

    let mut stats = LshStats {
        hyperplanes: planes,
        buckets: buckets.len(),
        similarity_evaluations: 0,
    };
    let mut rows = vec![Vec::new(); n];
    for bucket in &mut buckets {
        bucket.sort_unstable();
        for &i in bucket.iter() {
            rows[i] = top_k_row(&hn, i, bucket, k, &mut stats.similarity_evaluations);
        }
    }
    Ok((CsrMatrix::from_rows(n, rows)?, stats))
}

fn merge_small_buckets(buckets: &mut Vec<Vec<usize>>, min_size: usize) {
    while buckets.len() > 1 {
        let Some((pos, _)) = buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.len() < min_size)
            .min_by_key(|&(p, b)| (b.len(), p))
        else {
            break;
        };
        let left = pos.checked_sub(1).map(|p| buckets[p].len());
        let right = buckets.get(pos + 1).map(Vec::len);
        let target = match (left, right) {
            (Some(l), Some(r)) if r < l => pos + 1,
            (Some(_), _) => pos - 1,
            (None, _) => pos + 1,
        };
        let (keep, drop) = if target < pos { (target, pos) } else { (pos, target) };
        let moved = buckets.remove(drop);
        buckets[keep].extend(moved);
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    math::sqrt(-2.0 * math::ln(1.0 - u)) * math::cos(2.0 * core::f64::consts::PI * v)
}

/// kNN with the backend chosen by `cfg.lsh_batch`.
pub fn knn(h: &DenseMatrix, cfg: &RefineConfig) -> Result<CsrMatrix> {
    if cfg.lsh_batch == 0 {
        Ok(knn_exact(h, cfg.k))
    } else {
        knn_lsh(h, cfg.k, cfg.lsh_batch, cfg.lsh_seed)
    }
}

/// Symmetrize with ReLU, add self-loops and degree-normalize. Entries that
/// the activation zeroes are dropped, so every stored value is in `(0, 1]`.
pub fn postprocess(a_sp: &CsrMatrix, eps: f64) -> Result<CsrMatrix> {
    let sym = symmetrize_activate(a_sp)?;
    Ok(degree_normalize_selfloops(&sym, eps)?.prune_zeros())
}

/// Fuse, sparsify and post-process in one go (no gradients).
pub fn refine(x_unified: &DenseMatrix, adjacency: &CsrMatrix, t_b: &[f64], cfg: &RefineConfig) -> Result<CsrMatrix> {
    cfg.validate()?;
    let h = fuse_views(x_unified, adjacency, cfg.r, t_b)?;
    postprocess(&knn(&h, cfg)?, cfg.eps)
}

/// The sparse bookkeeping needed to rebuild `A'` on a tape from fused
/// features while the kNN pattern stays fixed.
#[derive(Clone, Debug)]
pub struct RefinePlan {
    knn: Arc<CsrMatrix>,
    /// Union of the kNN pattern, its transpose and the diagonal.
    pattern: Arc<CsrMatrix>,
    /// `pattern.nnz() x knn.nnz()` map that averages each similarity into both mirror slots.
    mirror: Arc<CsrMatrix>,
    /// `1.0` at diagonal slots of `pattern`.
    self_loops: DenseMatrix,
    /// `n x pattern.nnz()` row-sum operator.
    degree: Arc<CsrMatrix>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl RefinePlan {
    pub fn new(knn: CsrMatrix) -> Result<Self> {
        if !knn.is_square() {
            return Err(Error::shape("RefinePlan::new", "kNN pattern must be square"));
        }
        let n = knn.n_rows();
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 0.0)]).collect();
        for (i, j, _) in knn.iter() {
            rows[i].push((j, 0.0));
            rows[j].push((i, 0.0));
        }
        let pattern = CsrMatrix::from_rows(n, rows)?;
        let slot = |i: usize, j: usize| -> usize {
            let (c, _) = pattern.row(i);
            pattern.row_ptr()[i] + c.binary_search(&j).expect("slot exists in the union pattern")
        };
        let mut triplets = Vec::with_capacity(2 * knn.nnz());
        for (e, (i, j, _)) in knn.iter().enumerate() {
            triplets.push((slot(i, j), e, 0.5));
            triplets.push((slot(j, i), e, 0.5));
        }
        let mirror = CsrMatrix::from_triplets(pattern.nnz(), knn.nnz(), &triplets)?;
        let entry_rows = pattern.entry_rows();
        let cols = pattern.col_idx().to_vec();
        let mut loops = vec![0.0; pattern.nnz()];
        for (e, (&i, &j)) in entry_rows.iter().zip(&cols).enumerate() {
            if i == j {
                loops[e] = 1.0;
            }
        }
        let degree = CsrMatrix::from_parts(
            n,
            pattern.nnz(),
            pattern.row_ptr().to_vec(),
            (0..pattern.nnz()).collect(),
            vec![1.0; pattern.nnz()],
        )?;
        Ok(Self {
            knn: Arc::new(knn),
            self_loops: DenseMatrix::column_vector(&loops),
            pattern: Arc::new(pattern),
            mirror: Arc::new(mirror),
            degree: Arc::new(degree),
            rows: entry_rows,
            cols,
        })
    }

    pub fn knn(&self) -> &CsrMatrix {
        &self.knn
    }

    /// Stored pattern of `A'`, diagonal included.
    pub fn pattern(&self) -> &Arc<CsrMatrix> {
        &self.pattern
    }

    /// Records `A'` values (`pattern.nnz() x 1`) for fused features `h`.
    pub fn apply(&self, tape: &mut Tape, h: NodeId, eps: f64) -> Result<NodeId> {
        let hn = tape.l2_row_normalize(h);
        let sims = tape.edge_dot(self.knn.clone(), hn, hn)?;
        let active = tape.relu(sims);
        let mirrored = tape.spmm_const(self.mirror.clone(), active)?;
        let loops = tape.constant(self.self_loops.clone());
        let weights = tape.add(mirrored, loops)?;
        let degree = tape.spmm_const(self.degree.clone(), weights)?;
        let inv_sqrt = tape.rsqrt_clamped(degree, eps);
        let left = tape.gather_rows(inv_sqrt, &self.rows)?;
        let right = tape.gather_rows(inv_sqrt, &self.cols)?;
        let scale = tape.hadamard(left, right)?;
        tape.hadamard(weights, scale)
    }

    /// `A'` as a matrix from values produced by [`RefinePlan::apply`], zeros dropped.
    pub fn matrix(&self, values: &DenseMatrix) -> Result<CsrMatrix> {
        if values.shape() != (self.pattern.nnz(), 1) {
            return Err(Error::shape("RefinePlan::matrix", "values must be nnz x 1"));
        }
        Ok(self.pattern.with_values(values.data().to_vec())?.prune_zeros())
    }
}
