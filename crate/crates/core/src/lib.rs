//! Domain-generalisation toolkit: calibrated image augmentation combined
//! with a cross-domain supervised contrastive objective, an ERM baseline,
//! a leave-one-domain-out experiment harness and a feature-space domain
//! distance probe.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use losses::SupConConfig;
pub use nn::{init_model, ModelBundle, ModelConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
