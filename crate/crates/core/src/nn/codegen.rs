//! AdaIN code generators: a one-hot domain index goes through two dense
//! layers and the concatenated output is split per AdaIN site into
//! (scale, shift) vectors.
//!
//! The first dense layer carries no bias (a bias is redundant for a one-hot
//! input); the final bias is initialized so every scale starts at 1 and every
//! shift at 0, i.e. the switchable networks start out behaving like plain
//! instance normalization.

use crate::tensor::{Real, Tape, Tensor};

use super::{AdaInCode, BoundGroup, Init, NnError, ParamGroup, Role, LRELU_SLOPE};

/// Dimension of the concatenated (scale, shift) output: 2 * sum(sites).
pub fn code_output_dim(sites: &[usize]) -> usize {
    2 * sites.iter().sum::<usize>()
}

pub fn build_code_generator(
    sites: &[usize],
    hidden: usize,
    seed: u64,
    role: Role,
) -> Result<ParamGroup, NnError> {
    if sites.is_empty() {
        return Err(NnError::BadConfig("code generator needs at least one AdaIN site".into()));
    }
    if hidden < 1 {
        return Err(NnError::BadConfig("code generator hidden width must be >= 1".into()));
    }
    let out = code_output_dim(sites);
    let mut init = Init::new(seed);
    let mut group = ParamGroup::new(role);
    group.push("fc1.w", init.weights(&[2, hidden]));
    group.push("fc2.w", init.weights(&[hidden, out]));
    let mut bias = vec![0.0f32; out];
    let mut offset = 0;
    for &c in sites {
        for v in &mut bias[offset..offset + c] {
            *v = 1.0;
        }
        offset += 2 * c;
    }
    group.push("fc2.b", Tensor::raw(vec![out], bias));
    Ok(group)
}

/// Records the code generator on the tape for domain index `index` (0 or 1)
/// and splits the output into per-site (scale, shift) pairs. Gradients flow
/// back into the code-generator parameters through every site.
pub fn code_generator_forward<E: Real>(
    tape: &mut Tape<E>,
    params: &BoundGroup<E>,
    sites: &[usize],
    index: usize,
) -> Result<AdaInCode<E>, NnError> {
    assert!(index < 2, "domain index must be 0 or 1");
    let mut onehot = vec![E::zero(); 2];
    onehot[index] = E::one();
    let input = Tensor::raw(vec![2], onehot);

    let h = tape.dense(&input, params.get("fc1.w")?, None)?;
    let h = tape.leaky_relu(&h, E::of(LRELU_SLOPE))?;
    let out = tape.dense(&h, params.get("fc2.w")?, Some(params.get("fc2.b")?))?;

    let mut pairs = Vec::with_capacity(sites.len());
    let mut offset = 0;
    for &c in sites {
        let gamma = tape.slice(&out, offset, c)?;
        let beta = tape.slice(&out, offset + c, c)?;
        pairs.push((gamma, beta));
        offset += 2 * c;
    }
    Ok(AdaInCode { pairs })
}

/// Evaluates the code generator outside any training tape, returning plain
/// value vectors.
pub fn code_generator_eval(
    group: &ParamGroup,
    sites: &[usize],
    index: usize,
) -> Result<AdaInCode<f32>, NnError> {
    let mut tape = Tape::new();
    let entries = group
        .entries()
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let bound = BoundGroup::from_entries(group.role, entries);
    let code = code_generator_forward(&mut tape, &bound, sites, index)?;
    Ok(AdaInCode {
        pairs: code
            .pairs
            .iter()
            .map(|(g, b)| (g.detached(), b.detached()))
            .collect(),
    })
}
