pub mod align;
pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod ode;
pub mod pipeline;
pub mod signal;
pub mod vector_field;
pub mod wavegen;

pub use error::{Error, Result};
