//! Central finite-difference check of tape gradients.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense::DenseMatrix;
use crate::error::Result;
use crate::math;
use crate::tape::{NodeId, Tape};

/// At most this many coordinates are sampled across all parameters.
pub const MAX_SAMPLED_COORDINATES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over compared coordinates.
    pub max_rel_err: f64,
    pub sampled: usize,
    /// Coordinates whose ±h evaluations landed on a different piecewise branch
    /// (ReLU gate, clamp) than the unperturbed point, e.g. a ReLU input of exactly 0.
    pub skipped: usize,
}

fn evaluate<F>(build: &F, params: &[DenseMatrix]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    Ok((tape.value(loss).item(), tape.kink_signature()))
}

/// Compares reverse-mode gradients of `build_loss` against central
/// differences with step `h`. `build_loss` receives one trainable node per
/// entry of `params` and must be deterministic.
pub fn grad_check<F>(build_loss: F, params: &[DenseMatrix], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build_loss(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let base_signature = tape.kink_signature();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, m)| (0..m.data().len()).map(move |c| (p, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= MAX_SAMPLED_COORDINATES {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        let mut idx = rand::seq::index::sample(&mut rng, coords.len(), MAX_SAMPLED_COORDINATES).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        sampled: 0,
        skipped: 0,
    };
    let mut work: Vec<DenseMatrix> = params.to_vec();
    for (p, c) in chosen {
        let orig = work[p].data()[c];
        work[p].data_mut()[c] = orig + h;
        let (plus, sig_plus) = evaluate(&build_loss, &work)?;
        work[p].data_mut()[c] = orig - h;
        let (minus, sig_minus) = evaluate(&build_loss, &work)?;
        work[p].data_mut()[c] = orig;

        // a breakpoint between orig-h and orig+h shows up as a changed branch signature
        if sig_plus != base_signature || sig_minus != base_signature {
            report.skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        let ad = grads.get(ids[p]).map_or(0.0, |g| g.data()[c]);
        let rel = math::abs(ad - fd) / (math::abs(ad) + math::abs(fd)).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.sampled += 1;
    }
    Ok(report)
}
