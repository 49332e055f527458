//! A desk-scale laboratory for Mixture-of-Experts routing.
//!
//! The crate covers the whole path from token features to dispatch:
//!
//! - [`gating`]: grouped-average-pooling (GrAP) gating weights, cosine affinity
//!   scores and gate probabilities.
//! - [`routing`]: token-choice (TCR), expert-choice (ECR) and hybrid dispatch
//!   under a capacity bound, plus the capacity lower bound and its adaptive
//!   estimator.
//! - [`losses`]: auxiliary load-balancing loss and node-locality loss.
//! - [`theory`]: exact and Monte-Carlo training-success probabilities for TCR
//!   and ECR, their closed-form bounds, and Chernoff tail bounds.
//! - [`synthetic`]: isotropic and clustered token generators and the
//!   class-discriminative patch data model.
//! - [`training`]: a toy MoE classifier trained with SGD on the patch model.

pub mod error;
pub mod gating;
pub mod losses;
pub mod rng;
pub mod routing;
pub mod synthetic;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use gating::{GatingWeights, ScoreMatrix, TokenBatch};
pub use routing::{CapacityEstimate, DispatchPlan, RouteMode};
