//! Behavioral conditional generative models (CGM) for stochastic LTI systems.
//!
//! The crate provides the full pipeline from data collection to control:
//!
//! * [`lti`] — simulation of stochastic state-space plants and the stabilizing
//!   data-collection controllers that excite them;
//! * [`library`] — trajectory libraries in Hankel (single-trajectory) or
//!   stacked (multi-trajectory) form;
//! * [`cgm`] — the conditional generative model itself: offline precomputation
//!   of the conditional-mean coefficient and conditional covariance, online
//!   sampling of future outputs;
//! * [`kalman`] — the full-information Kalman-filter reference: multi-step
//!   predictor matrices, output posteriors and the coefficient maps used to
//!   benchmark the CGM against the optimal filter;
//! * [`qp`] — a dense operator-splitting convex QP solver;
//! * [`control`] — predictive controllers (scenario-based, DeePC-style and
//!   deterministic baselines) built on top of the above, with a closed-loop
//!   runner.
//!
//! All randomness flows through [`numerics::RngStream`], a counter-based
//! generator with explicit stream ids, so every experiment is reproducible
//! from a `(seed, stream)` pair.

pub mod cgm;
pub mod control;
pub mod kalman;
pub mod library;
pub mod lti;
pub mod numerics;
pub mod qp;

mod error;

pub use error::{Error, Result};
