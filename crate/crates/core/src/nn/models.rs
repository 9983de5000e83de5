//! The full model pack used by the losses and the trainers: either the
//! standard four networks (G, F, D_X, D_Y) or the switchable pair plus its
//! two AdaIN code generators.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::{Real, Tape, Tensor};

use super::{
    build_code_generator, build_discriminator, build_generator, code_generator_forward,
    discriminator_adain_sites, discriminator_forward, generator_adain_sites, generator_forward,
    mix_seed, param_count, qualified, AdaInCode, BoundGroup, Domain, ModelConfig, NnError,
    NormMode, ParamGroup, Role,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Standard,
    Switchable,
}

/// Configuration of a model pack; carries no tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub gen: ModelConfig,
    pub disc: ModelConfig,
    /// Hidden width of the AdaIN code generators (switchable only).
    pub code_hidden: usize,
}

impl ModelSpec {
    pub fn toy(variant: Variant) -> Self {
        let norm = match variant {
            Variant::Standard => NormMode::Instance,
            Variant::Switchable => NormMode::AdaIn,
        };
        Self {
            variant,
            gen: ModelConfig {
                norm,
                ..ModelConfig::toy_generator()
            },
            disc: ModelConfig {
                norm,
                ..ModelConfig::toy_discriminator()
            },
            code_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.gen.validate()?;
        self.disc.validate()?;
        match self.variant {
            Variant::Standard => {
                if self.gen.norm != NormMode::Instance || self.disc.norm != NormMode::Instance {
                    return Err(NnError::BadConfig(
                        "standard variant requires instance norm".into(),
                    ));
                }
            }
            Variant::Switchable => {
                if self.gen.norm != NormMode::AdaIn || self.disc.norm != NormMode::AdaIn {
                    return Err(NnError::BadConfig(
                        "switchable variant requires adain norm".into(),
                    ));
                }
                if self.code_hidden < 1 {
                    return Err(NnError::BadConfig("code hidden width must be >= 1".into()));
                }
                if discriminator_adain_sites(&self.disc).is_empty() {
                    return Err(NnError::BadConfig(
                        "switchable discriminator needs depth >= 2 for at least one AdaIN site"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parameter-group roles of this variant, in fixed order.
    pub fn roles(&self) -> [Role; 4] {
        match self.variant {
            Variant::Standard => [Role::G, Role::F, Role::Dx, Role::Dy],
            Variant::Switchable => [Role::GShared, Role::DShared, Role::CodeGenG, Role::CodeGenD],
        }
    }

    /// Roles updated by the generator step / the discriminator step.
    pub fn generator_roles(&self) -> Vec<Role> {
        match self.variant {
            Variant::Standard => vec![Role::G, Role::F],
            Variant::Switchable => vec![Role::GShared, Role::CodeGenG],
        }
    }

    pub fn discriminator_roles(&self) -> Vec<Role> {
        match self.variant {
            Variant::Standard => vec![Role::Dx, Role::Dy],
            Variant::Switchable => vec![Role::DShared, Role::CodeGenD],
        }
    }
}

/// Parameter groups for one model pack, stored in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleModels {
    pub spec: ModelSpec,
    groups: Vec<ParamGroup>,
}

impl CycleModels {
    /// Builds and initializes all groups deterministically from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let groups = match spec.variant {
            Variant::Standard => vec![
                build_generator(&spec.gen, mix_seed(seed, 1), Role::G)?,
                build_generator(&spec.gen, mix_seed(seed, 2), Role::F)?,
                build_discriminator(&spec.disc, mix_seed(seed, 3), Role::Dx)?,
                build_discriminator(&spec.disc, mix_seed(seed, 4), Role::Dy)?,
            ],
            Variant::Switchable => vec![
                build_generator(&spec.gen, mix_seed(seed, 1), Role::GShared)?,
                build_discriminator(&spec.disc, mix_seed(seed, 3), Role::DShared)?,
                build_code_generator(
                    &generator_adain_sites(&spec.gen),
                    spec.code_hidden,
                    mix_seed(seed, 5),
                    Role::CodeGenG,
                )?,
                build_code_generator(
                    &discriminator_adain_sites(&spec.disc),
                    spec.code_hidden,
                    mix_seed(seed, 6),
                    Role::CodeGenD,
                )?,
            ],
        };
        Ok(Self { spec, groups })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, role: Role) -> Result<&ParamGroup, NnError> {
        self.groups
            .iter()
            .find(|g| g.role == role)
            .ok_or(NnError::MissingGroup(role))
    }

    /// Total scalar parameter count across all groups.
    pub fn total_params(&self) -> usize {
        param_count(&self.groups).1
    }

    /// Mutable access to a parameter by qualified name (`<role>/<name>`).
    pub fn entry_mut(&mut self, qualified: &str) -> Option<&mut Tensor<f32>> {
        let (role_str, name) = qualified.split_once('/')?;
        let role = Role::ALL.iter().copied().find(|r| r.as_str() == role_str)?;
        self.groups
            .iter_mut()
            .find(|g| g.role == role)?
            .entries_mut()
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Iterates `(qualified name, tensor)` over all groups in group order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<f32>)> {
        self.groups.iter().flat_map(|g| {
            g.entries()
                .iter()
                .map(move |(n, t)| (qualified(g.role, n), t))
        })
    }

    /// All parameters lifted to `f64` for the gradient oracle.
    pub fn f64_params(&self) -> Vec<(String, Tensor<f64>)> {
        self.named_params().map(|(n, t)| (n, t.cast())).collect()
    }

    /// Registers groups on a tape and returns the working view. Groups whose
    /// role is in `freeze` are internalized as constants: no gradient is ever
    /// produced for them.
    pub fn bind<E: Real>(
        &self,
        tape: &mut Tape<E>,
        freeze: Freeze,
    ) -> Result<BoundModels<E>, NnError> {
        let frozen = freeze.roles(&self.spec);
        let mut bound = Vec::with_capacity(self.groups.len());
        for group in &self.groups {
            let is_frozen = frozen.contains(&group.role);
            let mut entries = Vec::with_capacity(group.entries().len());
            for (name, value) in group.entries() {
                let lifted: Tensor<E> = value.cast();
                let tracked = if is_frozen {
                    tape.constant(&lifted)
                } else {
                    tape.leaf(qualified(group.role, name), &lifted)?
                };
                entries.push((name.clone(), tracked));
            }
            bound.push(BoundGroup::from_entries(group.role, entries));
        }
        Ok(BoundModels {
            spec: self.spec.clone(),
            groups: bound,
            codes: HashMap::new(),
        })
    }
}

/// Which side of the model pack is treated as constant during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    None,
    /// Generator-side groups are constants (discriminator step).
    Generators,
    /// Discriminator-side groups are constants (generator step).
    Discriminators,
}

impl Freeze {
    fn roles(self, spec: &ModelSpec) -> Vec<Role> {
        match self {
            Freeze::None => vec![],
            Freeze::Generators => spec.generator_roles(),
            Freeze::Discriminators => spec.discriminator_roles(),
        }
    }
}

/// Per-tape working view of a model pack. Translation direction and
/// discriminator domain are selected per call; for the switchable variant the
/// AdaIN codes are computed once per (network, domain index) and reused so
/// code-generator gradients accumulate across uses.
pub struct BoundModels<E: Real> {
    pub spec: ModelSpec,
    groups: Vec<BoundGroup<E>>,
    codes: HashMap<(Role, usize), AdaInCode<E>>,
}

impl<E: Real> BoundModels<E> {
    /// Organizes already-tracked leaves (keyed by qualified name) into a
    /// working view. Used by the gradient oracle, which owns the binding.
    pub fn from_leaves(
        spec: &ModelSpec,
        leaves: &BTreeMap<String, Tensor<E>>,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let mut groups = Vec::with_capacity(4);
        for role in spec.roles() {
            let prefix = format!("{}/", role.as_str());
            let entries: Vec<(String, Tensor<E>)> = leaves
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(k, v)| (k[prefix.len()..].to_string(), v.clone()))
                .collect();
            if entries.is_empty() {
                return Err(NnError::MissingGroup(role));
            }
            groups.push(BoundGroup::from_entries(role, entries));
        }
        Ok(Self {
            spec: spec.clone(),
            groups,
            codes: HashMap::new(),
        })
    }

    fn group(&self, role: Role) -> Result<&BoundGroup<E>, NnError> {
        self.groups
            .iter()
            .find(|g| g.role == role)
            .ok_or(NnError::MissingGroup(role))
    }

    fn code(
        &mut self,
        tape: &mut Tape<E>,
        role: Role,
        sites: &[usize],
        index: usize,
    ) -> Result<AdaInCode<E>, NnError> {
        if let Some(code) = self.codes.get(&(role, index)) {
            return Ok(code.clone());
        }
        let code = code_generator_forward(tape, self.group(role)?, sites, index)?;
        self.codes.insert((role, index), code.clone());
        Ok(code)
    }

    /// Applies the generator that translates into domain `to`.
    pub fn translate(
        &mut self,
        tape: &mut Tape<E>,
        to: Domain,
        input: &Tensor<E>,
    ) -> Result<Tensor<E>, NnError> {
        let gen_cfg = self.spec.gen.clone();
        match self.spec.variant {
            Variant::Standard => {
                let role = match to {
                    Domain::X => Role::G,
                    Domain::Y => Role::F,
                };
                generator_forward(tape, &gen_cfg, self.group(role)?, input, None)
            }
            Variant::Switchable => {
                let sites = generator_adain_sites(&gen_cfg);
                let code = self.code(tape, Role::CodeGenG, &sites, to.index())?;
                generator_forward(tape, &gen_cfg, self.group(Role::GShared)?, input, Some(&code))
            }
        }
    }

    /// Applies the discriminator of domain `dom` and returns raw patch
    /// scores.
    pub fn discriminate(
        &mut self,
        tape: &mut Tape<E>,
        dom: Domain,
        input: &Tensor<E>,
    ) -> Result<Tensor<E>, NnError> {
        let disc_cfg = self.spec.disc.clone();
        match self.spec.variant {
            Variant::Standard => {
                let role = match dom {
                    Domain::X => Role::Dx,
                    Domain::Y => Role::Dy,
                };
                discriminator_forward(tape, &disc_cfg, self.group(role)?, input, None)
            }
            Variant::Switchable => {
                let sites = discriminator_adain_sites(&disc_cfg);
                let code = self.code(tape, Role::CodeGenD, &sites, dom.index())?;
                discriminator_forward(
                    tape,
                    &disc_cfg,
                    self.group(Role::DShared)?,
                    input,
                    Some(&code),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switchable_pack_transmits_fewer_parameters() {
        let std = CycleModels::new(ModelSpec::toy(Variant::Standard), 11).unwrap();
        let sw = CycleModels::new(ModelSpec::toy(Variant::Switchable), 11).unwrap();
        assert!(
            sw.total_params() < std.total_params(),
            "switchable {} vs standard {}",
            sw.total_params(),
            std.total_params()
        );
    }

    #[test]
    fn build_and_forward_are_deterministic() {
        let run = |seed| {
            let models = CycleModels::new(ModelSpec::toy(Variant::Switchable), seed).unwrap();
            let mut tape = Tape::<f32>::new();
            let mut bound = models.bind(&mut tape, Freeze::None).unwrap();
            let x = Tensor::full(&[1, 1, 16, 16], 0.25f32);
            bound
                .translate(&mut tape, Domain::X, &x)
                .unwrap()
                .data()
                .to_vec()
        };
        let a = run(3);
        let b = run(3);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn switch_code_changes_translation() {
        let models = CycleModels::new(ModelSpec::toy(Variant::Switchable), 3).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut bound = models.bind(&mut tape, Freeze::None).unwrap();
        let x = Tensor::from_vec(
            vec![1, 1, 16, 16],
            (0..256).map(|i| ((i % 13) as f32) * 0.05).collect(),
        )
        .unwrap();
        let to_x = bound.translate(&mut tape, Domain::X, &x).unwrap();
        let to_y = bound.translate(&mut tape, Domain::Y, &x).unwrap();
        assert_eq!(to_x.shape(), to_y.shape());
        assert_ne!(to_x.data(), to_y.data());
    }

    #[test]
    fn switch_code_changes_discrimination() {
        let models = CycleModels::new(ModelSpec::toy(Variant::Switchable), 9).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut bound = models.bind(&mut tape, Freeze::None).unwrap();
        let x = Tensor::from_vec(
            vec![1, 1, 16, 16],
            (0..256).map(|i| ((i % 7) as f32) * 0.1 - 0.3).collect(),
        )
        .unwrap();
        let dx = bound.discriminate(&mut tape, Domain::X, &x).unwrap();
        let dy = bound.discriminate(&mut tape, Domain::Y, &x).unwrap();
        assert_eq!(dx.shape(), &[1, 1, 4, 4]);
        assert_ne!(dx.data(), dy.data());
    }

    #[test]
    fn frozen_groups_produce_no_gradients() {
        let models = CycleModels::new(ModelSpec::toy(Variant::Standard), 5).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut bound = models.bind(&mut tape, Freeze::Discriminators).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.4f32);
        let fake = bound.translate(&mut tape, Domain::Y, &x).unwrap();
        let scores = bound.discriminate(&mut tape, Domain::Y, &fake).unwrap();
        let loss = tape.square_mean(&scores).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.keys().all(|k| !k.starts_with("DX/") && !k.starts_with("DY/")));
        assert!(grads.keys().any(|k| k.starts_with("F/")));
    }
}
