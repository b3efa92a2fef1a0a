//! Distributed and integrated method of moments (DIMM) for high-dimensional
//! correlated Gaussian responses.
//!
//! A response vector of dimension M is split into J blocks. Each block is fit
//! on its own by maximizing a pairwise Gaussian composite likelihood with an
//! AR(1) or compound-symmetry working structure. The block estimating
//! functions are then stacked and combined through a one-step GMM estimator,
//! which also yields a χ² goodness-of-fit statistic and Wald tests.
//!
//! ```no_run
//! use dimm::model::{BlockPartition, Structure};
//! use dimm::pairwise::FitOptions;
//! use dimm::pipeline::run_dimm;
//! # fn demo(data: &dimm::model::PanelDataset) -> dimm::error::Result<()> {
//! let part = BlockPartition::uniform(&[10, 10, 10], Structure::Ar1)?;
//! let fit = run_dimm(data, &part, &FitOptions::default(), None)?;
//! println!("{:?} (Q = {:.2})", fit.integrated.beta_dimm, fit.integrated.q_stat);
//! # Ok(())
//! # }
//! ```
//!
//! Modules:
//! * [`model`] datasets, block partitions and nested covariances
//! * [`pairwise`] per-block composite likelihood, scores and fitting
//! * [`gmm`] score stacking, weight matrix, integration and tests
//! * [`baselines`] GEE and the GLS oracle
//! * [`sim`] Monte-Carlo scenarios and their reports
//! * [`io`] CSV/JSON ingestion and the command implementations

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod distributions;
pub mod error;
pub mod gmm;
pub mod io;
pub mod model;
pub mod optim;
pub mod pairwise;
pub mod pipeline;
pub mod sim;
