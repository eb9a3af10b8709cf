//! Dropout as perturbation, regularizer, and privacy mechanism.
//!
//! The crate bundles four labs around one primitive, the random inclusion
//! mask:
//!
//! - [`netescape`]: one-hidden-layer networks, where a node-level dropout
//!   perturbation pushes gradient descent out of poor stationary points with
//!   constant probability;
//! - [`sgd`] / [`glm`]: dropout stochastic gradient descent for generalized
//!   linear models, whose expected risk is strongly convex even on
//!   rank-deficient data;
//! - [`dp_simplex`] / [`dp_glm`]: differentially private learners built from
//!   dropout stability, gated by propose-test-release and calibrated
//!   Laplace/Gaussian noise, plus an exhaustive privacy auditor;
//! - [`mod@bench`]: a leave-out stability benchmark harness comparing
//!   unregularized, L2, stochastic-dropout, and deterministic-dropout
//!   training, with CSV output.
//!
//! All randomness flows through [`rng::SeededRng`], addressed by explicit
//! `(seed, stream)` pairs, so every experiment replays bit-for-bit.
//!
//! ```
//! use dropescape::glm::GlmLoss;
//! use dropescape::math::Constraint;
//! use dropescape::sgd::{dropout_sgd_train, dropout_risk_exact_ls, SgdConfig};
//!
//! let data = dropescape::synth::gaussian_regression(200, 5, 0.1, 7)?;
//! let cfg = SgdConfig::new(20_000, 0.5, Constraint::L2Ball(2.0), 7);
//! let model = dropout_sgd_train(&data, GlmLoss::Squared, &cfg)?;
//! let risk = dropout_risk_exact_ls(&model.theta, &data);
//! assert!(risk < dropout_risk_exact_ls(&vec![0.0; 5], &data));
//! # Ok::<(), dropescape::Error>(())
//! ```

pub mod bench;
pub mod cli;
pub mod dp_glm;
pub mod dp_simplex;
pub mod error;
pub mod glm;
pub mod math;
pub mod netescape;
pub mod rng;
pub mod sgd;
pub mod synth;

pub use error::{Error, Result};
