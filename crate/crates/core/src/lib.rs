//! Source-free domain adaptation with generated class prototypes.
//!
//! A source-trained classifier is adapted to an unlabeled, covariate-shifted
//! target domain without ever touching source data. The library covers the
//! full pipeline at desk scale:
//!
//! - [`tensor`]: a minimal dense-tensor kernel with reverse-mode
//!   differentiation, SGD and gradient checking;
//! - [`data`]: synthetic source/target domain pairs with controllable
//!   covariate shift and long-tailed class skew, plus CSV interchange;
//! - [`model`]: the given source model (MLP extractor + weight-normalized
//!   classifier) and its label-smoothed training;
//! - [`proto`]: stage one — a conditional generator trained against the
//!   frozen classifier to emit compact, well-separated class prototypes;
//! - [`adapt`]: stage two — centroid pseudo-labeling, confidence-weighted
//!   contrastive alignment to prototypes, early-learning regularization and
//!   neighborhood clustering, in both the source-model-only variant and the
//!   oracle-ensembled, target-distribution-aware variant;
//! - [`metrics`]: overall/per-class accuracy and the pseudo-label
//!   distribution discrepancy.

pub mod adapt;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod modelio;
pub mod proto;
pub mod tensor;

pub use error::{Error, Result};
