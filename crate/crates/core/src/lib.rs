//! Desk-scale laboratory for information-guided diffusion sampling.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`ndnum`]: dense-tensor kernel with reverse-mode differentiation
//! - [`infotheory`]: exact information measures on finite distributions
//! - [`ve`]: the trained variational estimator supplying information bounds
//! - [`diffusion`]: a toy denoising diffusion model
//! - [`igds`]: the information-guided sampler on top of it
//! - [`distill`]: synthetic datasets, scoring, subset sampling, evaluation
//! - [`pipeline`]: the seeded experiment harness behind the CLI

pub mod ndnum;
