//! Patch discriminator: a stride-2 conv stack ending in a 1-channel patch
//! score map. No final sigmoid; the losses consume raw scores. The first
//! stage carries no norm site, matching the usual patch-discriminator
//! convention.

use crate::tensor::{Real, Tape, Tensor};

use super::{
    AdaInCode, BoundGroup, Init, ModelConfig, NnError, NormMode, ParamGroup, Role, LRELU_SLOPE,
    NORM_EPS,
};

/// Channel counts at the discriminator's norm sites (stages 1..depth).
pub fn discriminator_adain_sites(cfg: &ModelConfig) -> Vec<usize> {
    (1..cfg.depth).map(|k| cfg.base_width << k).collect()
}

pub fn build_discriminator(cfg: &ModelConfig, seed: u64, role: Role) -> Result<ParamGroup, NnError> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut group = ParamGroup::new(role);
    let w = cfg.base_width;

    let mut ci = cfg.in_channels;
    for k in 0..cfg.depth {
        let co = w << k;
        group.push(format!("c{k}.w"), init.weights(&[co, ci, 3, 3]));
        group.push(format!("c{k}.b"), Tensor::zeros(&[co]));
        ci = co;
    }
    group.push("head.w", init.weights(&[1, ci, 3, 3]));
    group.push("head.b", Tensor::zeros(&[1]));
    Ok(group)
}

/// Records the discriminator forward pass; returns the raw patch score map.
pub fn discriminator_forward<E: Real>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundGroup<E>,
    input: &Tensor<E>,
    code: Option<&AdaInCode<E>>,
) -> Result<Tensor<E>, NnError> {
    let sites = discriminator_adain_sites(cfg);
    match (cfg.norm, code) {
        (NormMode::AdaIn, Some(c)) => c.check_sites(&sites)?,
        (NormMode::AdaIn, None) => return Err(NnError::MissingCode),
        (NormMode::Instance, Some(_)) => {
            return Err(NnError::CodeMismatch(
                "code supplied but norm mode is `instance`".into(),
            ))
        }
        (NormMode::Instance, None) => {}
    }
    let slope = E::of(LRELU_SLOPE);
    let eps = E::of(NORM_EPS);

    let mut x = input.clone();
    for k in 0..cfg.depth {
        let y = tape.conv2d(
            &x,
            params.get(&format!("c{k}.w"))?,
            Some(params.get(&format!("c{k}.b"))?),
            2,
        )?;
        let y = if k == 0 {
            y
        } else {
            match cfg.norm {
                NormMode::Instance => tape.instance_norm(&y, eps)?,
                NormMode::AdaIn => {
                    let (gamma, beta) = &code.expect("checked above").pairs[k - 1];
                    tape.adain(&y, gamma, beta, eps)?
                }
            }
        };
        x = tape.leaky_relu(&y, slope)?;
    }
    Ok(tape.conv2d(&x, params.get("head.w")?, Some(params.get("head.b")?), 1)?)
}
