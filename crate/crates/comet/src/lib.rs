//! Community search and detection on attributed graphs, built around a
//! small pipeline: conductance-guided local-subgraph tokenization, a graph
//! transformer pre-trained per source domain, prompt-based adaptation of the
//! frozen backbone to a target graph, task experts for community search
//! (CS), disjoint detection (DCD) and overlapping detection (OCD), and
//! fusion of multiple domain experts into one prediction.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`autodiff`] — dense f32 tensors with a tape-based
//!   reverse-mode engine and an Adam optimizer; everything trainable runs
//!   on this substrate.
//! * [`graph`] — CSR graphs, normalized feature propagation, conductance,
//!   and per-node hop selection producing the token tensor.
//! * [`cohesive`] — K-means and Louvain partitions and the global prompt
//!   tokens appended to every node's token sequence.
//! * [`encoder`] — Laplacian positional encoding and the pre-norm
//!   transformer encoder over token sequences.
//! * [`ugl`] — per-domain pre-training (margin triplet + reconstruction)
//!   and checkpointing.
//! * [`das`] — adaptation prompts, the cross-domain projector, anchor /
//!   challenging node selection, the CMMD alignment loss, per-task losses,
//!   and the frozen-backbone tuning loop.
//! * [`experts`] / [`fusion`] — task experts and multi-expert fusion.
//! * [`metrics`] — F1 / Jaccard / NMI / ONMI / overlap statistics /
//!   modularity.
//! * [`sbm`] / [`io`] / [`pipeline`] — synthetic benchmarks, file formats,
//!   and the command-level orchestration used by the `comet` binary.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod autodiff;
pub mod checkpoint;
pub mod cohesive;
pub mod das;
pub mod encoder;
pub mod error;
pub mod experts;
pub mod fusion;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod sbm;
pub mod tensor;
pub mod ugl;

pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
