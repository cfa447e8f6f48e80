//! Desk-scale controllable driving world model.
//!
//! A self-contained stack: a 2D kinematic driving simulator (`toyworld`),
//! episode recording and sampling (`corpus`), a small autodiff kit (`nnkit`),
//! a conditional diffusion video model (`diffusion`, `denoiser`, `sampler`),
//! a video reward estimator (`reward`), inverse-dynamics decoding (`idm`),
//! and downstream planning applications (`apps`) behind a CLI (`cli`).

pub mod apps;
pub mod cli;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
mod featstack;
pub mod idm;
pub mod nnkit;
pub mod reward;
pub mod sampler;
pub mod toyworld;
