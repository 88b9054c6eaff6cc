//! Source-free domain adaptation with a noisy, denoised teacher.
//!
//! A classifier pretrained on a source domain is adapted to an unlabeled,
//! shifted target domain. Guidance comes from a simulated vision-language
//! teacher whose logits are corrected by the drift between the frozen source
//! model and the adapting target model before they are distilled through a
//! mutual-information objective with class balancing and pseudo-label
//! refinement.
//!
//! Module map:
//! - [`matrix`], [`mlp`], [`optim`], [`softmax`]: numeric substrate
//! - [`losses`]: every objective term with analytic gradients
//! - [`proxy`]: teacher simulation, adapter, logit correction
//! - [`data`]: seeded domain generators, CSV, splits, batch orders
//! - [`training`]: pretraining, oracle, adaptation loop, ablations
//! - [`diagnostics`]: accuracy, KL/entropy, MMD, run reports
//! - [`experiment`]: run configuration and the end-to-end pipeline

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod proxy;
pub mod rng;
pub mod softmax;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mlp::{Activation, MlpModel};
pub use softmax::{softmax_rows, ProbBatch};
