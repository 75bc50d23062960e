//! Membership-inference research toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: synthetic Gaussian-mixture generation, CSV ingestion, disjoint splits.
//! - [`model`]: softmax classifiers trained with mini-batch SGD, confidence scaling, augmentation.
//! - [`shadow`]: shadow-dataset plans, shadow ensembles and persisted score matrices.
//! - [`attacks`]: baseline membership scores (LOSS, entropy, calibration, Attack-R, LiRA, RMIA).
//! - [`cmia`]: the cascading attack that conditions shadow models on inferred anchors.
//! - [`pmia`]: the proxy attack that borrows IN behaviour from similar adversary instances.
//! - [`theory`]: enumerable universes checking Gibbs convergence and the posterior odds test.
//! - [`eval`]: the membership game, ROC curves and low-FPR metrics.
//! - [`experiment`]: config-driven pipelines used by the `mia` binary.

pub mod attacks;
pub mod cmia;
pub mod data;
mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod pmia;
pub mod seed;
pub mod shadow;
pub mod theory;


pub use attacks::{AttackKind, AttackResult, GaussPair, ShadowAttack, TargetObservation};
pub use cmia::{CascadeConfig, CascadeTranscript, ShadowSetup, Thresholds};
pub use data::{Dataset, Instance, ScalerParams, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{GameConfig, GameTranscript, Metrics, RocCurve, Setting};
pub use model::{AugmentConfig, Classifier, TrainConfig};
pub use pmia::{PreparedShadows, ProxyStrategy};
pub use shadow::{AnchorSets, BitMatrix, ScoreMatrix, ShadowEnsemble, ShadowPlan};
pub use theory::{GibbsConfig, JointUniverse};
