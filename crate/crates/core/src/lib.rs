//! Compositional defect synthesis: data handling, networks, objectives,
//! training, evaluation and the downstream inspector.

pub mod controlmap;
pub mod datamodel;
pub mod discriminator;
pub mod evaluation;
pub mod error;
pub mod generator;
pub mod inspector;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
