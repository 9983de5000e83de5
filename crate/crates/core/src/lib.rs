//! Federated training for unpaired two-domain translation models.
//!
//! The crate trains CycleGAN-style model pairs under a federated protocol in
//! which clients never share raw samples: each client evaluates a local
//! objective that only touches its own domain's data and ships the resulting
//! gradients to a server. The sum of the two local objectives equals the
//! centralized composite loss exactly, and the summed local gradients equal
//! the centralized gradient — `verify` contains suites that check both
//! identities numerically, alongside a finite-difference oracle for the
//! autodiff engine and a federated-vs-centralized trajectory harness.
//!
//! Module map:
//! - [`tensor`]: dense-tensor reverse-mode autodiff tape + gradient checking
//! - [`nn`]: generators, discriminators, AdaIN code generators, parameter
//!   registry and serialization
//! - [`objectives`]: adversarial / cycle / identity terms, the per-domain
//!   local objectives and the centralized composite
//! - [`fed`]: rounds, client selection, aggregation, optimizers, trainers
//! - [`transport`]: gradient-message codec and in-process / TCP channels
//! - [`data`]: synthetic unpaired datasets and evaluation metrics
//! - [`verify`]: the property suites exposed to the CLI and the tests

pub mod data;
pub mod fed;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod transport;
pub mod verify;

pub use nn::Domain;
pub use tensor::{Tape, Tensor};
