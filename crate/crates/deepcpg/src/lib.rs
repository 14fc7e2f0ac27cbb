//! DeepCPG: neural policies whose output layer is a Kuramoto oscillator
//! network, trained with TD3 by backpropagating through the oscillators.
//!
//! - [`cpg`]: oscillator network forward dynamics
//! - [`grad`]: reverse-mode gradients of CPG rollouts
//! - [`gradcheck`]: finite-difference oracle for those gradients
//! - [`nn`]: dense actor and critic networks, Adam, Polyak averaging
//! - [`env`]: the planar crawler environment and its rewards
//! - [`td3`]: training loop and deployment
//! - [`marl`]: modular agents and weight transfer
//! - [`checkpoint`]: binary persistence of whole training runs

pub mod checkpoint;
pub mod config;
pub mod cpg;
pub mod env;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod marl;
pub mod nn;
pub mod perturb;
pub mod replay;
pub mod td3;
pub mod transfer;

pub use error::{Error, Result};
