//! Contrastive objectives on projected embeddings.
//!
//! Both losses compare the two views of the same node batch through the
//! similarity matrix `S = z1 z2ᵀ / τ` of L2-normalized rows. The identity loss
//! treats each node's own counterpart as the only positive; the refined loss
//! weights positives by the learned adjacency.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.2;

/// Two-layer projection head `Z ↦ normalize(elu(Z W1) W2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(dim, dim, rng),
            w2: glorot(dim, dim, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w1: DenseMatrix::identity(dim),
            w2: DenseMatrix::identity(dim),
        }
    }
}

/// Applies a head given as tape nodes.
pub fn project_head(tape: &mut Tape, z: NodeId, w1: NodeId, w2: NodeId) -> Result<NodeId> {
    let hidden = tape.matmul(z, w1)?;
    let act = tape.elu(hidden);
    let out = tape.matmul(act, w2)?;
    Ok(tape.l2_row_normalize(out))
}

fn check_views(tape: &Tape, z1: NodeId, z2: NodeId, tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {} must be positive", tau)));
    }
    let (s1, s2) = (tape.shape(z1), tape.shape(z2));
    if s1 != s2 || s1.0 == 0 {
        return Err(Error::shape("contrastive loss", format!("views {:?} and {:?}", s1, s2)));
    }
    Ok(s1.0)
}

/// Row-wise log-softmax of `S` and of `Sᵀ`.
fn directed_log_probs(tape: &mut Tape, z1: NodeId, z2: NodeId, tau: f64) -> Result<(NodeId, NodeId)> {
    let sim = tape.matmul_t(z1, z2)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let forward = tape.log_softmax_rows(logits);
    let flipped = tape.transpose(logits);
    let backward = tape.log_softmax_rows(flipped);
    Ok((forward, backward))
}

/// Symmetrized InfoNCE with each node's counterpart as its positive:
/// `-(1 / 2B) Σ_m [log p(1→2)_mm + log p(2→1)_mm]`.
///
/// A batch of one has a single candidate per anchor, so the loss is 0.
pub fn loss_identity(tape: &mut Tape, z1: NodeId, z2: NodeId, tau: f64) -> Result<NodeId> {
    let b = check_views(tape, z1, z2, tau)?;
    let (fwd, bwd) = directed_log_probs(tape, z1, z2, tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let pf = tape.pick_per_row(fwd, &diag)?;
    let pb = tape.pick_per_row(bwd, &diag)?;
    let both = tape.add(pf, pb)?;
    let total = tape.sum_scalar(both);
    Ok(tape.scale(total, -1.0 / (2.0 * b as f64)))
}

/// Value of a refined loss plus the anchors it had to leave out.
#[derive(Clone, Copy, Debug)]
pub struct RefinedLoss {
    pub loss: NodeId,
    /// Anchors whose weight row was empty. Non-zero only when the weights are
    /// missing their self-loops.
    pub skipped_anchors: usize,
}

/// Symmetrized contrastive loss with weighted positives:
/// per anchor `log(Σ_n w_mn exp(S_mn) / Σ_n exp(S_mn))`. The weights are
/// constants; `weights` must be the `B x B` restriction of a symmetric `A'`.
pub fn loss_refined(tape: &mut Tape, z1: NodeId, z2: NodeId, weights: &CsrMatrix, tau: f64) -> Result<RefinedLoss> {
    let b = check_views(tape, z1, z2, tau)?;
    if weights.n_rows() != b || weights.n_cols() != b {
        return Err(Error::shape(
            "loss_refined",
            format!("weights {}x{} for batch {}", weights.n_rows(), weights.n_cols(), b),
        ));
    }
    let anchors: Vec<usize> = (0..b)
        .filter(|&m| weights.row(m).1.iter().any(|&w| w > 0.0))
        .collect();
    let skipped_anchors = b - anchors.len();
    if anchors.is_empty() {
        return Err(Error::Contract("refined loss has no anchor with a positive weight".into()));
    }
    let (fwd, bwd) = directed_log_probs(tape, z1, z2, tau)?;
    let (fwd, bwd, kept) = if skipped_anchors == 0 {
        (fwd, bwd, Arc::new(weights.clone()))
    } else {
        let rows: Vec<Vec<(usize, f64)>> = anchors
            .iter()
            .map(|&m| {
                let (c, v) = weights.row(m);
                c.iter().copied().zip(v.iter().copied()).collect()
            })
            .collect();
        let kept = Arc::new(CsrMatrix::from_rows(b, rows)?);
        (tape.gather_rows(fwd, &anchors)?, tape.gather_rows(bwd, &anchors)?, kept)
    };
    let lf = tape.weighted_lse_rows(fwd, kept.clone())?;
    let lb = tape.weighted_lse_rows(bwd, kept)?;
    let both = tape.add(lf, lb)?;
    let total = tape.sum_scalar(both);
    let loss = tape.scale(total, -1.0 / (2.0 * anchors.len() as f64));
    Ok(RefinedLoss { loss, skipped_anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::math;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(seed: u64, n: usize, d: usize) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, d, |_, _| rng.random::<f64>() - 0.5).normalize_rows().0
    }

    fn identity_value(z1: &DenseMatrix, z2: &DenseMatrix, tau: f64) -> f64 {
        let mut t = Tape::new();
        let (a, b) = (t.constant(z1.clone()), t.constant(z2.clone()));
        let l = loss_identity(&mut t, a, b, tau).unwrap();
        t.value(l).item()
    }

    fn refined_value(z1: &DenseMatrix, z2: &DenseMatrix, w: &CsrMatrix, tau: f64) -> f64 {
        let mut t = Tape::new();
        let (a, b) = (t.constant(z1.clone()), t.constant(z2.clone()));
        let l = loss_refined(&mut t, a, b, w, tau).unwrap();
        t.value(l.loss).item()
    }

    /// Scalar evaluation of the weighted-positive formula, both directions.
    fn refined_oracle(z1: &DenseMatrix, z2: &DenseMatrix, w: &DenseMatrix, tau: f64) -> f64 {
        let b = z1.rows();
        let sim = |x: &DenseMatrix, i: usize, y: &DenseMatrix, j: usize| {
            x.row(i).iter().zip(y.row(j)).map(|(p, q)| p * q).sum::<f64>() / tau
        };
        let mut total = 0.0;
        for (x, y) in [(z1, z2), (z2, z1)] {
            for m in 0..b {
                let den: f64 = (0..b).map(|n| sim(x, m, y, n).exp()).sum();
                let num: f64 = (0..b).map(|n| w.get(m, n) * sim(x, m, y, n).exp()).sum();
                total += (num / den).ln();
            }
        }
        -total / (2.0 * b as f64)
    }

    #[test]
    fn singleton_batch_has_zero_loss() {
        let z = DenseMatrix::row_vector(&[0.6, 0.8]);
        assert_eq!(identity_value(&z, &z, DEFAULT_TAU), 0.0);
    }

    #[test]
    fn two_orthogonal_nodes_hand_value() {
        let z = DenseMatrix::identity(2);
        let got = identity_value(&z, &z, 0.2);
        assert!((got - math::ln1p((-5.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn identity_weights_reduce_to_identity_loss() {
        let z1 = unit_rows(1, 6, 4);
        let z2 = unit_rows(2, 6, 4);
        let w = CsrMatrix::identity(6);
        assert_eq!(refined_value(&z1, &z2, &w, 0.2), identity_value(&z1, &z2, 0.2));
    }

    #[test]
    fn three_node_toy_matches_scalar_formula() {
        let z1 = DenseMatrix::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]).unwrap();
        let z2 = DenseMatrix::from_rows(&[[0.8, 0.6], [1.0, 0.0], [-0.6, 0.8]]).unwrap();
        let dense = DenseMatrix::from_rows(&[[0.5, 0.5, 0.0], [0.5, 0.4, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let w = CsrMatrix::from_dense(&dense);
        let got = refined_value(&z1, &z2, &w, 0.2);
        assert!((got - refined_oracle(&z1, &z2, &dense, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_give_constant_loss_and_zero_gradient() {
        let w = CsrMatrix::from_dense(&DenseMatrix::filled(4, 4, 0.3));
        let z1 = unit_rows(3, 4, 3);
        let z2 = unit_rows(4, 4, 3);
        assert!((refined_value(&z1, &z2, &w, 0.2) + 0.3f64.ln()).abs() < 1e-12);
        let mut t = Tape::new();
        let (a, b) = (t.param(z1), t.param(z2));
        let l = loss_refined(&mut t, a, b, &w, 0.2).unwrap().loss;
        let g = t.backward(l).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_weight_row_is_skipped_and_counted() {
        let z = unit_rows(5, 3, 2);
        let w = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (2, 2, 1.0)]).unwrap();
        let mut t = Tape::new();
        let a = t.constant(z.clone());
        let out = loss_refined(&mut t, a, a, &w, 0.2).unwrap();
        assert_eq!(out.skipped_anchors, 1);
        assert!(t.value(out.loss).item().is_finite());
    }

    #[test]
    fn shape_and_temperature_checked() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::identity(2));
        let b = t.constant(DenseMatrix::identity(3));
        assert!(loss_identity(&mut t, a, b, 0.2).is_err());
        assert!(matches!(loss_identity(&mut t, a, a, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_head_keeps_nonnegative_unit_rows() {
        let z = DenseMatrix::from_rows(&[[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let head = ProjectionHead::identity(3);
        let mut t = Tape::new();
        let (zn, w1, w2) = (t.constant(z.clone()), t.constant(head.w1), t.constant(head.w2));
        let out = project_head(&mut t, zn, w1, w2).unwrap();
        assert!(t.value(out).max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn head_gradient_passes_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = ProjectionHead::init(4, &mut rng);
        let z = unit_rows(7, 5, 4);
        let z2 = unit_rows(8, 5, 4);
        let report = grad_check(
            |t, p| {
                let (a, b) = (t.constant(z.clone()), t.constant(z2.clone()));
                let pa = project_head(t, a, p[0], p[1])?;
                let pb = project_head(t, b, p[0], p[1])?;
                loss_identity(t, pa, pb, 0.2)
            },
            &[head.w1, head.w2],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }

    fn batch() -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
        (2usize..10, 1usize..6, any::<u64>()).prop_map(|(b, d, s)| (unit_rows(s, b, d), unit_rows(s ^ 0xff, b, d)))
    }

    proptest! {
        #[test]
        fn identity_loss_bounds((z1, z2) in batch()) {
            let b = z1.rows() as f64;
            let l = identity_value(&z1, &z2, 0.2);
            prop_assert!(l > 0.0);
            // each direction's InfoNCE estimate log B - loss stays below log B
            prop_assert!(b.ln() - l <= b.ln());
            let mut t = Tape::new();
            let head = ProjectionHead::identity(z1.cols());
            let a = t.constant(z1.clone());
            let (w1, w2) = (t.constant(head.w1), t.constant(head.w2));
            let pa = project_head(&mut t, a, w1, w2).unwrap();
            let norms = t.value(pa).row_norms();
            prop_assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-12 || *n == 0.0));
        }

        #[test]
        fn identity_loss_rotation_invariant((z1, z2) in batch(), angle in 0.0f64..6.28) {
            let d = z1.cols();
            if d >= 2 {
                let mut rot = DenseMatrix::identity(d);
                rot.set(0, 0, angle.cos());
                rot.set(0, 1, -angle.sin());
                rot.set(1, 0, angle.sin());
                rot.set(1, 1, angle.cos());
                let l = identity_value(&z1, &z2, 0.2);
                let lr = identity_value(&z1.matmul(&rot).unwrap(), &z2.matmul(&rot).unwrap(), 0.2);
                prop_assert!((l - lr).abs() < 1e-10);
            }
        }

        #[test]
        fn identity_weights_double_the_combined_objective((z1, z2) in batch()) {
            let w = CsrMatrix::identity(z1.rows());
            let combined = identity_value(&z1, &z2, 0.2) + refined_value(&z1, &z2, &w, 0.2);
            prop_assert_eq!(combined, 2.0 * identity_value(&z1, &z2, 0.2));
        }
    }
}
