//! Electron micrograph classification by fusing multi-scale patch sequences,
//! vision graphs and language-derived category knowledge.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: dense tensors and a reverse-mode tape, the only source of
//!   gradients in the crate.
//! - [`patcher`]: image normalization, patch tokenization and embedding.
//! - [`visiongraph`]: k-NN vision graphs, virtual nodes and Chebyshev graph
//!   convolution.
//! - [`odeflow`]: transformer-encoder Neural ODE dynamics, RK4, adjoint
//!   gradients with interpolated state reconstruction, bidirectional gating.
//! - [`hnf`]: the layered fusion network with mixture-of-experts gates.
//! - [`textknow`]: prompt suite, replayable LLM client, small masked LM,
//!   attention pooling and text/image matching.
//! - [`fusionhead`]: cross-modal multi-head attention and the classifier.
//! - [`harness`]: datasets, k-fold training, metrics, checkpoints, reports.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod diffcore;
pub mod error;
pub mod fusionhead;
pub mod harness;
pub mod hnf;
pub mod nn;
pub mod odeflow;
pub mod patcher;
pub mod textknow;
pub mod visiongraph;

pub use error::{Error, Result};
