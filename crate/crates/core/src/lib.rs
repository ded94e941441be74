//! Diversity-promoting Bayesian latent variable models: mutual-angular priors
//! over component directions, variational and MCMC fitters for a Bayesian
//! mixture of experts, and an infinite latent feature model with slice-sampled
//! inference on the sphere.

pub mod directional;
pub mod bmem;
pub mod bounds;
pub mod data;
pub mod prior;
pub mod error;
pub mod eval;
pub mod ghmc;
pub mod ilfm;
pub mod util;

pub use error::{Error, Result};
