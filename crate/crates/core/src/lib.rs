//! Numerical core for multi-domain graph pretraining with structure learning
//! and few-shot prompt transfer.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem (graph files, checkpoints, reports, the CLI) lives in the `mdgfm`
//! companion crate.
//!
//! Pipeline overview:
//!
//! 1. [`pca`] projects each graph's raw features to a shared width.
//! 2. [`refine`] modulates features with learnable tokens, fuses them with
//!    aggregated neighbourhood features and rebuilds the adjacency with cosine
//!    kNN plus symmetrize/activate/normalize post-processing.
//! 3. [`pretrain`] trains a shared [`encoder`] with the two-view contrastive
//!    objective from [`loss`].
//! 4. [`adapt`] transfers to an unseen graph with meta/specific prompts and a
//!    prototype classifier.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ablation;
pub mod adapt;
pub mod adjacency;
pub mod attack;
pub mod csr;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod math;
pub mod optim;
pub mod pca;
pub mod pretrain;
pub mod refine;
pub mod seed;
pub mod tape;

pub use ablation::Variant;
pub use csr::CsrMatrix;
pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use graph::{DatasetStats, Graph};
pub use tape::{NodeId, Tape};
