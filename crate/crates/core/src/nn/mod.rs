//! Model construction and the parameter registry.
//!
//! Two families are built here: the standard four-network setup (generators
//! `G`, `F` and discriminators `D_X`, `D_Y`) and the switchable setup where a
//! single shared generator and discriminator flip translation direction via
//! AdaIN codes emitted by small code-generator networks keyed on a domain
//! index.

mod codegen;
mod discriminator;
mod generator;
mod models;
mod serial;

pub use codegen::{
    build_code_generator, code_generator_eval, code_generator_forward, code_output_dim,
};
pub use discriminator::{build_discriminator, discriminator_adain_sites, discriminator_forward};
pub use generator::{build_generator, generator_adain_sites, generator_forward};
pub use models::{BoundModels, CycleModels, Freeze, ModelSpec, Variant};
pub use serial::{load_params, read_params, save_params, write_params};

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

/// Epsilon used by every instance-norm / AdaIN site.
pub const NORM_EPS: f64 = 1e-5;
/// Leaky ReLU slope used throughout the models.
pub const LRELU_SLOPE: f64 = 0.2;
/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("parameter {0:?} missing from group {1:?}")]
    MissingParam(String, Role),
    #[error("group {0:?} missing from model")]
    MissingGroup(Role),
    #[error("AdaIN code required for norm mode `adain` but none was supplied")]
    MissingCode,
    #[error("AdaIN code mismatch: {0}")]
    CodeMismatch(String),
}

/// Training domain tag. `G` translates Y to X, `F` translates X to Y;
/// `D_X` discriminates domain X.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    /// Code index fed to the code generators: X is 0, Y is 1.
    pub fn index(self) -> usize {
        match self {
            Domain::X => 0,
            Domain::Y => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::X => write!(f, "X"),
            Domain::Y => write!(f, "Y"),
        }
    }
}

/// Network role of a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Generator Y -> X.
    G,
    /// Generator X -> Y.
    F,
    /// Discriminator for domain X.
    Dx,
    /// Discriminator for domain Y.
    Dy,
    /// Shared switchable generator.
    GShared,
    /// Shared switchable discriminator.
    DShared,
    /// AdaIN code generator for the shared generator.
    CodeGenG,
    /// AdaIN code generator for the shared discriminator.
    CodeGenD,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::G,
        Role::F,
        Role::Dx,
        Role::Dy,
        Role::GShared,
        Role::DShared,
        Role::CodeGenG,
        Role::CodeGenD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::G => "G",
            Role::F => "F",
            Role::Dx => "DX",
            Role::Dy => "DY",
            Role::GShared => "GS",
            Role::DShared => "DS",
            Role::CodeGenG => "g",
            Role::CodeGenD => "d",
        }
    }

    pub fn wire_byte(self) -> u8 {
        match self {
            Role::G => 0,
            Role::F => 1,
            Role::Dx => 2,
            Role::Dy => 3,
            Role::GShared => 4,
            Role::DShared => 5,
            Role::CodeGenG => 6,
            Role::CodeGenD => 7,
        }
    }

    pub fn from_wire_byte(b: u8) -> Option<Self> {
        Role::ALL.iter().copied().find(|r| r.wire_byte() == b)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normalization mode of a network's norm sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Instance,
    AdaIn,
}

/// Topology of a generator or discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 stages (down/up pairs for the generator).
    pub depth: usize,
    /// Global input -> output skip connection (residual learning).
    pub residual_skip: bool,
    pub norm: NormMode,
    /// Optional bounded-range output activation on the generator head.
    pub tanh_output: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.base_width < 1 {
            return Err(NnError::BadConfig("base width must be >= 1".into()));
        }
        if self.depth < 1 {
            return Err(NnError::BadConfig("depth must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(NnError::BadConfig("input channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Toy-scale generator used by the default experiments.
    pub fn toy_generator() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            depth: 2,
            residual_skip: true,
            norm: NormMode::Instance,
            tanh_output: false,
        }
    }

    /// Toy-scale discriminator (two stride-2 stages).
    pub fn toy_discriminator() -> Self {
        Self {
            in_channels: 1,
            base_width: 8,
            depth: 2,
            residual_skip: false,
            norm: NormMode::Instance,
            tanh_output: false,
        }
    }
}

/// Named, ordered parameter collection for one network role. Entry order is
/// stable across builds with the same config and is the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub role: Role,
    entries: Vec<(String, Tensor<f32>)>,
}

impl ParamGroup {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != &name),
            "duplicate param name {name}"
        );
        self.entries.push((name, value));
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<(String, Tensor<f32>)> {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, NnError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::MissingParam(name.to_string(), self.role))
    }

    /// Total number of scalar parameters in the group.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Per-group and total scalar parameter counts.
pub fn param_count(groups: &[ParamGroup]) -> (Vec<(Role, usize)>, usize) {
    let per: Vec<(Role, usize)> = groups.iter().map(|g| (g.role, g.param_count())).collect();
    let total = per.iter().map(|(_, c)| c).sum();
    (per, total)
}

/// Per-AdaIN-site modulation vectors for one domain index: `(scale, shift)`
/// pairs whose lengths equal the channel count at each site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaInCode<E: Real = f32> {
    pub pairs: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Real> AdaInCode<E> {
    pub fn check_sites(&self, sites: &[usize]) -> Result<(), NnError> {
        if self.pairs.len() != sites.len() {
            return Err(NnError::CodeMismatch(format!(
                "{} pairs for {} AdaIN sites",
                self.pairs.len(),
                sites.len()
            )));
        }
        for (i, ((g, b), &c)) in self.pairs.iter().zip(sites).enumerate() {
            if g.shape() != [c] || b.shape() != [c] {
                return Err(NnError::CodeMismatch(format!(
                    "site {i}: expected vectors of length {c}, got {:?}/{:?}",
                    g.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// View of a group bound onto a tape (leaves) or internalized as constants.
pub struct BoundGroup<E: Real> {
    pub role: Role,
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Real> BoundGroup<E> {
    pub fn from_entries(role: Role, entries: Vec<(String, Tensor<E>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self {
            role,
            entries,
            index,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>, NnError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| NnError::MissingParam(name.to_string(), self.role))
    }

    pub fn entries(&self) -> &[(String, Tensor<E>)] {
        &self.entries
    }
}

/// Full leaf name of a parameter: `<role>/<name>`.
pub fn qualified(role: Role, name: &str) -> String {
    format!("{}/{}", role.as_str(), name)
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD as f32).expect("valid init distribution"),
        }
    }

    /// normal(0, 0.02) weights.
    pub fn weights(&mut self, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::raw(shape.to_vec(), data)
    }
}

/// SplitMix64; used to derive independent sub-seeds from a master seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_of_empty_list_is_zero() {
        let (per, total) = param_count(&[]);
        assert!(per.is_empty());
        assert_eq!(total, 0);
    }

    #[test]
    fn role_wire_bytes_round_trip() {
        for role in Role::ALL {
            assert_eq!(Role::from_wire_byte(role.wire_byte()), Some(role));
        }
        assert_eq!(Role::from_wire_byte(9), None);
    }

    #[test]
    fn mix_seed_separates_salts() {
        assert_ne!(mix_seed(7, 1), mix_seed(7, 2));
        assert_eq!(mix_seed(7, 1), mix_seed(7, 1));
    }
}
