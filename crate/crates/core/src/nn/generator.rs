//! U-net style generator: stride-2 conv encoder, nearest-neighbour x2
//! upsampling decoder, additive skip connections between matching stages,
//! and an optional global input -> output residual skip.

use crate::tensor::{Real, Tape, Tensor};

use super::{
    AdaInCode, BoundGroup, Init, ModelConfig, NnError, NormMode, ParamGroup, Role, LRELU_SLOPE,
    NORM_EPS,
};

/// Channel counts at the generator's norm sites, in forward order:
/// stem, each encoder stage, bottleneck, each decoder stage.
pub fn generator_adain_sites(cfg: &ModelConfig) -> Vec<usize> {
    let w = cfg.base_width;
    let mut sites = vec![w];
    for k in 0..cfg.depth {
        sites.push(w << (k + 1));
    }
    sites.push(w << cfg.depth);
    for k in (0..cfg.depth).rev() {
        sites.push(w << k);
    }
    sites
}

/// Deterministic parameter initialization of the generator topology for a
/// given seed. Entry order is the forward order and is stable across builds.
pub fn build_generator(cfg: &ModelConfig, seed: u64, role: Role) -> Result<ParamGroup, NnError> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut group = ParamGroup::new(role);
    let w = cfg.base_width;

    group.push("stem.w", init.weights(&[w, cfg.in_channels, 3, 3]));
    group.push("stem.b", Tensor::zeros(&[w]));
    for k in 0..cfg.depth {
        let (ci, co) = (w << k, w << (k + 1));
        group.push(format!("enc{k}.w"), init.weights(&[co, ci, 3, 3]));
        group.push(format!("enc{k}.b"), Tensor::zeros(&[co]));
    }
    let mid = w << cfg.depth;
    group.push("mid.w", init.weights(&[mid, mid, 3, 3]));
    group.push("mid.b", Tensor::zeros(&[mid]));
    for k in (0..cfg.depth).rev() {
        let (ci, co) = (w << (k + 1), w << k);
        group.push(format!("dec{k}.w"), init.weights(&[co, ci, 3, 3]));
        group.push(format!("dec{k}.b"), Tensor::zeros(&[co]));
    }
    group.push("head.w", init.weights(&[cfg.in_channels, w, 3, 3]));
    group.push("head.b", Tensor::zeros(&[cfg.in_channels]));
    Ok(group)
}

struct NormSites<'a, E: Real> {
    mode: NormMode,
    code: Option<&'a AdaInCode<E>>,
    next: usize,
}

impl<'a, E: Real> NormSites<'a, E> {
    fn new(
        mode: NormMode,
        code: Option<&'a AdaInCode<E>>,
        sites: &[usize],
    ) -> Result<Self, NnError> {
        match (mode, code) {
            (NormMode::AdaIn, Some(c)) => c.check_sites(sites)?,
            (NormMode::AdaIn, None) => return Err(NnError::MissingCode),
            (NormMode::Instance, Some(_)) => {
                return Err(NnError::CodeMismatch(
                    "code supplied but norm mode is `instance`".into(),
                ))
            }
            (NormMode::Instance, None) => {}
        }
        Ok(Self { mode, code, next: 0 })
    }

    fn apply(&mut self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>, NnError> {
        let eps = E::of(NORM_EPS);
        let out = match self.mode {
            NormMode::Instance => tape.instance_norm(x, eps)?,
            NormMode::AdaIn => {
                let (gamma, beta) = &self.code.expect("checked in new").pairs[self.next];
                self.next += 1;
                tape.adain(x, gamma, beta, eps)?
            }
        };
        Ok(out)
    }
}

/// Records the generator forward pass on the tape. Output shape equals input
/// shape; spatial extents must be divisible by 2^depth so that skip shapes
/// line up.
pub fn generator_forward<E: Real>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    params: &BoundGroup<E>,
    input: &Tensor<E>,
    code: Option<&AdaInCode<E>>,
) -> Result<Tensor<E>, NnError> {
    let sites = generator_adain_sites(cfg);
    let mut norms = NormSites::new(cfg.norm, code, &sites)?;
    let slope = E::of(LRELU_SLOPE);

    let conv_block = |tape: &mut Tape<E>,
                      norms: &mut NormSites<E>,
                      name: &str,
                      x: &Tensor<E>,
                      stride: usize|
     -> Result<Tensor<E>, NnError> {
        let y = tape.conv2d(
            x,
            params.get(&format!("{name}.w"))?,
            Some(params.get(&format!("{name}.b"))?),
            stride,
        )?;
        let y = norms.apply(tape, &y)?;
        Ok(tape.leaky_relu(&y, slope)?)
    };

    let mut features = Vec::with_capacity(cfg.depth + 1);
    let mut x = conv_block(tape, &mut norms, "stem", input, 1)?;
    features.push(x.clone());
    for k in 0..cfg.depth {
        x = conv_block(tape, &mut norms, &format!("enc{k}"), &x, 2)?;
        if k + 1 < cfg.depth {
            features.push(x.clone());
        }
    }
    x = conv_block(tape, &mut norms, "mid", &x, 1)?;
    for k in (0..cfg.depth).rev() {
        let up = tape.upsample_nearest(&x)?;
        let y = conv_block(tape, &mut norms, &format!("dec{k}"), &up, 1)?;
        let skip = features.pop().expect("one skip feature per decoder stage");
        x = tape.add(&y, &skip)?;
    }
    let mut out = tape.conv2d(&x, params.get("head.w")?, Some(params.get("head.b")?), 1)?;
    if cfg.tanh_output {
        out = tape.tanh(&out)?;
    }
    if cfg.residual_skip {
        out = tape.add(&out, input)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::qualified;
    use crate::tensor::Tensor;

    fn bind(group: &ParamGroup, tape: &mut Tape<f32>) -> BoundGroup<f32> {
        let entries = group
            .entries()
            .iter()
            .map(|(n, t)| {
                let leaf = tape.leaf(qualified(group.role, n), t).unwrap();
                (n.clone(), leaf)
            })
            .collect();
        BoundGroup::from_entries(group.role, entries)
    }

    #[test]
    fn toy_generator_param_count_matches_analytic() {
        let cfg = ModelConfig {
            in_channels: 1,
            base_width: 8,
            depth: 2,
            residual_skip: true,
            norm: NormMode::Instance,
            tanh_output: false,
        };
        let g = build_generator(&cfg, 1, Role::G).unwrap();
        // stem 1->8, enc0 8->16, enc1 16->32, mid 32->32, dec1 32->16,
        // dec0 16->8, head 8->1; each 3x3 with bias.
        let weights = 9 * (8 + 8 * 16 + 16 * 32 + 32 * 32 + 32 * 16 + 16 * 8 + 8);
        let biases = 8 + 16 + 32 + 32 + 16 + 8 + 1;
        assert_eq!(g.param_count(), weights + biases);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = ModelConfig::toy_generator();
        let a = build_generator(&cfg, 42, Role::G).unwrap();
        let b = build_generator(&cfg, 42, Role::G).unwrap();
        assert_eq!(a, b);
        let c = build_generator(&cfg, 43, Role::G).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let cfg = ModelConfig::toy_generator();
        let group = build_generator(&cfg, 7, Role::G).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&group, &mut tape);
        let input = Tensor::full(&[1, 1, 16, 16], 0.3f32);
        let out = generator_forward(&mut tape, &cfg, &bound, &input, None).unwrap();
        assert_eq!(out.shape(), input.shape());
    }

    #[test]
    fn residual_generator_with_zero_weights_is_identity() {
        let cfg = ModelConfig::toy_generator();
        let mut group = build_generator(&cfg, 7, Role::G).unwrap();
        for (_, t) in group.entries_mut().iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let bound = bind(&group, &mut tape);
        let input = Tensor::from_vec(vec![1, 1, 16, 16], (0..256).map(|i| i as f32 * 0.01).collect())
            .unwrap();
        let out = generator_forward(&mut tape, &cfg, &bound, &input, None).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn adain_mode_requires_code() {
        let cfg = ModelConfig {
            norm: NormMode::AdaIn,
            ..ModelConfig::toy_generator()
        };
        let group = build_generator(&cfg, 7, Role::GShared).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&group, &mut tape);
        let input = Tensor::zeros(&[1, 1, 16, 16]);
        let err = generator_forward(&mut tape, &cfg, &bound, &input, None).unwrap_err();
        assert!(matches!(err, NnError::MissingCode));
    }

    #[test]
    fn instance_mode_rejects_spurious_code() {
        let cfg = ModelConfig::toy_generator();
        let group = build_generator(&cfg, 7, Role::G).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&group, &mut tape);
        let input = Tensor::zeros(&[1, 1, 16, 16]);
        let code = AdaInCode {
            pairs: generator_adain_sites(&cfg)
                .iter()
                .map(|&c| (Tensor::full(&[c], 1.0f32), Tensor::zeros(&[c])))
                .collect(),
        };
        let err = generator_forward(&mut tape, &cfg, &bound, &input, Some(&code)).unwrap_err();
        assert!(matches!(err, NnError::CodeMismatch(_)));
    }

    #[test]
    fn adain_with_unit_code_matches_instance_norm() {
        let base = ModelConfig::toy_generator();
        let adain_cfg = ModelConfig {
            norm: NormMode::AdaIn,
            ..base.clone()
        };
        let group = build_generator(&base, 11, Role::G).unwrap();
        let input = Tensor::from_vec(
            vec![1, 1, 16, 16],
            (0..256).map(|i| ((i * 37 % 101) as f32) * 0.01 - 0.4).collect(),
        )
        .unwrap();

        let mut t1 = Tape::new();
        let b1 = bind(&group, &mut t1);
        let plain = generator_forward(&mut t1, &base, &b1, &input, None).unwrap();

        let code = AdaInCode {
            pairs: generator_adain_sites(&base)
                .iter()
                .map(|&c| (Tensor::full(&[c], 1.0f32), Tensor::zeros(&[c])))
                .collect(),
        };
        let mut t2 = Tape::new();
        let b2 = bind(&group, &mut t2);
        let switched = generator_forward(&mut t2, &adain_cfg, &b2, &input, Some(&code)).unwrap();
        assert_eq!(plain.data(), switched.data());
    }
}
