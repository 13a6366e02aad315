//! Fine-tuning hyperparameter toolkit: EMD domain similarity, effective
//! learning rate recommendation, Nesterov SGD with decoupled weight decay,
//! L2 / L2-SP regularization, and a grid-search harness over synthetic
//! source/target tasks.

pub mod cli;
pub mod error;
pub mod features;
pub mod harness;
pub mod models;
pub mod optim;
pub mod recommender;
pub mod regularizers;
pub mod tasks;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
