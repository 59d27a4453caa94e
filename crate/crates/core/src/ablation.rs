//! Component ablations of the full pipeline.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// Second view, loss weights and downstream propagation use the
    /// normalized original adjacency instead of the learned one.
    WoRefinedAdj,
    /// Shared token pinned to ones.
    WoSumToken,
    /// Structure learning sees only the token-unified features, no aggregation.
    WoTopology,
    /// Balance tokens pinned to ones.
    WoBalance,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WoRefinedAdj,
        Variant::WoSumToken,
        Variant::WoTopology,
        Variant::WoBalance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoRefinedAdj => "wo_refinedadj",
            Self::WoSumToken => "wo_sumtoken",
            Self::WoTopology => "wo_topology",
            Self::WoBalance => "wo_balance",
        }
    }

    pub fn uses_refined_adjacency(self) -> bool {
        self != Self::WoRefinedAdj
    }

    pub fn trains_shared_token(self) -> bool {
        self != Self::WoSumToken
    }

    pub fn trains_balance_tokens(self) -> bool {
        self != Self::WoBalance
    }

    pub fn fuses_topology(self) -> bool {
        self != Self::WoTopology
    }

    /// Width of a balance token for unified width `dim`.
    pub fn balance_width(self, dim: usize) -> usize {
        if self.fuses_topology() {
            2 * dim
        } else {
            dim
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{}`", s)))
    }
}
