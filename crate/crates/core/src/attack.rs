//! Random structural perturbations for robustness experiments.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttackMode {
    /// Insert uniformly random non-edges.
    #[default]
    Add,
    /// Remove uniformly random existing edges.
    Delete,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Delete => "delete",
        }
    }
}

impl FromStr for AttackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "delete" => Ok(Self::Delete),
            _ => Err(Error::Config(format!("unknown attack mode `{}`", s))),
        }
    }
}

/// Which graphs of an experiment get perturbed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttackScope {
    Sources,
    Target,
    #[default]
    All,
}

impl AttackScope {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sources => "sources",
            Self::Target => "target",
            Self::All => "all",
        }
    }

    pub fn hits_sources(self) -> bool {
        matches!(self, Self::Sources | Self::All)
    }

    pub fn hits_target(self) -> bool {
        matches!(self, Self::Target | Self::All)
    }
}

impl FromStr for AttackScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sources" => Ok(Self::Sources),
            "target" => Ok(Self::Target),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown attack scope `{}`", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub mode: AttackMode,
    pub ratio: f64,
    pub scope: AttackScope,
    pub seed: u64,
}

/// Number of edges touched: `floor(ratio * edges)`, with a tiny slack so
/// that ratios like 0.1 of 100 give 10 despite binary rounding.
pub fn perturbation_count(ratio: f64, edges: usize) -> usize {
    math::floor(ratio * edges as f64 + 1e-9) as usize
}

/// Adds or deletes `floor(ratio * |E|)` undirected edges chosen uniformly at
/// random. Features, labels and identity are untouched. Additions are capped
/// at the number of available non-edges.
pub fn attack_random(graph: &Graph, mode: AttackMode, ratio: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("attack ratio {} outside [0, 1]", ratio)));
    }
    let edges = graph.undirected_edges();
    let count = perturbation_count(ratio, edges.len());
    if count == 0 {
        return Ok(graph.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.n_nodes();
    let perturbed: Vec<(usize, usize)> = match mode {
        AttackMode::Delete => {
            let mut drop = alloc::vec![false; edges.len()];
            for i in rand::seq::index::sample(&mut rng, edges.len(), count) {
                drop[i] = true;
            }
            edges.iter().zip(drop).filter(|(_, d)| !d).map(|(&e, _)| e).collect()
        }
        AttackMode::Add => {
            let existing: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
            let pairs = n * n.saturating_sub(1) / 2;
            let free = pairs - existing.len();
            let want = if count > free {
                log::warn!("{} edges requested but only {} non-edges exist; adding all", count, free);
                free
            } else {
                count
            };
            let mut added = BTreeSet::new();
            if want * 2 > free {
                // Dense regime: enumerate non-edges and sample among them.
                let candidates: Vec<(usize, usize)> = (0..n)
                    .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                    .filter(|e| !existing.contains(e))
                    .collect();
                for i in rand::seq::index::sample(&mut rng, candidates.len(), want) {
                    added.insert(candidates[i]);
                }
            } else {
                while added.len() < want {
                    let i = rng.random_range(0..n);
                    let j = rng.random_range(0..n);
                    let e = (i.min(j), i.max(j));
                    if i != j && !existing.contains(&e) {
                        added.insert(e);
                    }
                }
            }
            existing.union(&added).copied().collect()
        }
    };
    graph.with_edges(&perturbed)
}
