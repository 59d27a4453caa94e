//! Stochastic block model graphs standing in for benchmark datasets.

use std::fmt;
use std::str::FromStr;

use mdgfm_core::{DenseMatrix, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    SbmHomophilic,
    SbmHeterophilic,
}

impl FixtureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SbmHomophilic => "sbm_homophilic",
            Self::SbmHeterophilic => "sbm_heterophilic",
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbm_homophilic" => Ok(Self::SbmHomophilic),
            "sbm_heterophilic" => Ok(Self::SbmHeterophilic),
            _ => Err(Error::Config(format!("unknown fixture kind `{}`", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    pub n: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d_raw: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl FixtureSpec {
    /// 150 nodes, 3 classes, `p_in = 0.2`, `p_out = 0.02`, 60 raw features.
    pub fn homophilic(seed: u64) -> Self {
        Self {
            kind: FixtureKind::SbmHomophilic,
            n: 150,
            classes: 3,
            p_in: 0.2,
            p_out: 0.02,
            d_raw: 60,
            noise: 0.5,
            seed,
        }
    }

    /// Same sizes as [`FixtureSpec::homophilic`] with the edge probabilities swapped.
    pub fn heterophilic(seed: u64) -> Self {
        Self {
            kind: FixtureKind::SbmHeterophilic,
            p_in: 0.02,
            p_out: 0.2,
            ..Self::homophilic(seed)
        }
    }

    pub fn with_nodes(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} = {} outside [0, 1]", name, p)));
            }
        }
        if self.classes == 0 || self.n < self.classes {
            return Err(Error::Config(format!("{} nodes cannot fill {} classes", self.n, self.classes)));
        }
        if self.d_raw < self.classes {
            return Err(Error::Config(format!(
                "d_raw = {} is narrower than the {}-class one-hot signal",
                self.d_raw, self.classes
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        let mismatch = match self.kind {
            FixtureKind::SbmHomophilic => self.p_in < self.p_out,
            FixtureKind::SbmHeterophilic => self.p_in > self.p_out,
        };
        if mismatch {
            log::warn!("{} fixture with p_in = {} and p_out = {}", self.kind, self.p_in, self.p_out);
        }
        Ok(())
    }

    /// Class of node `i`: contiguous, equal-sized blocks.
    pub fn block_of(&self, i: usize) -> usize {
        i * self.classes / self.n
    }

    /// Large-graph edge homophily `p_in / (p_in + (C - 1) p_out)`.
    pub fn expected_homophily(&self) -> f64 {
        let c = self.classes as f64;
        self.p_in / (self.p_in + (c - 1.0) * self.p_out)
    }
}

/// Samples a graph: each pair is an edge with `p_in` inside a block and
/// `p_out` across blocks; features are the one-hot class in the first `C`
/// columns plus `N(0, noise²)` on every column.
pub fn make_fixture(spec: &FixtureSpec, domain_id: &str) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.n).map(|i| spec.block_of(i)).collect();
    let mut edges = Vec::new();
    for i in 0..spec.n {
        for j in (i + 1)..spec.n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let features = DenseMatrix::from_fn(spec.n, spec.d_raw, |i, j| {
        let signal = if j == labels[i] { 1.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(&mut rng);
        signal + spec.noise * z
    });
    Ok(Graph::from_edges(&edges, features, Some(labels), domain_id, domain_id)?)
}
