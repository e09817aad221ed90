//! Federated training of an attention adapter over frozen image/text encoder
//! features.
//!
//! Clients hold precomputed image features, labels and per-class text
//! features. Each round every client trains a small attention adapter on its
//! own data with a symmetric contrastive loss, the server averages the adapter
//! weights by sample count, and the averaged adapter is evaluated on held-out
//! validation, test and unseen-domain data.

pub mod adapter;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod loss;
pub mod numerics;
pub mod optim;

pub use adapter::{parameter_count, AdapterForward, AdapterParams};
pub use config::{Algorithm, RunConfig};
pub use data::{FeatureDataset, SplitDataset, SynthSpec};
pub use error::{Error, ErrorKind, Result};
pub use numerics::Matrix;
