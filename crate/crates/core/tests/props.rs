//! Property tests: codec round-trip identity over randomized messages,
//! aggregation order-independence, and the switchable-vs-standard parameter
//! inequality across configs.

use proptest::prelude::*;

use fedcycle::fed::{aggregate, AggMode};
use fedcycle::nn::{
    build_code_generator, build_discriminator, build_generator, discriminator_adain_sites,
    generator_adain_sites, param_count, Domain, ModelConfig, NormMode, Role,
};
use fedcycle::tensor::Tensor;
use fedcycle::transport::{decode, encode, encoded_len, GradGroup, GradientMessage, StepKind};

fn role_strategy() -> impl Strategy<Value = Role> {
    prop::sample::select(Role::ALL.to_vec())
}

fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
    (
        prop::collection::vec(1usize..4, 1..4),
        prop::num::f32::NORMAL,
    )
        .prop_flat_map(|(shape, _)| {
            let n: usize = shape.iter().product();
            prop::collection::vec(-1e6f32..1e6, n)
                .prop_map(move |data| Tensor::from_vec(shape.clone(), data).expect("finite"))
        })
}

fn group_strategy() -> impl Strategy<Value = GradGroup> {
    (
        role_strategy(),
        prop::collection::vec(("[a-z]{1,8}\\.[wb]", tensor_strategy()), 1..4),
    )
        .prop_map(|(role, entries)| GradGroup { role, entries })
}

fn message_strategy() -> impl Strategy<Value = GradientMessage> {
    (
        any::<u32>(),
        any::<u32>(),
        prop::bool::ANY,
        0u8..3,
        prop::collection::vec(group_strategy(), 0..3),
    )
        .prop_map(|(round, client, dom, kind, groups)| {
            GradientMessage::new(
                round,
                client,
                if dom { Domain::X } else { Domain::Y },
                StepKind::from_wire_byte(kind).expect("kind byte in range"),
                groups,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip_is_bit_exact(msg in message_strategy()) {
        let bytes = encode(&msg).expect("finite payloads encode");
        prop_assert_eq!(bytes.len(), encoded_len(&msg));
        let back = decode(&bytes).expect("decodes");
        prop_assert_eq!(&back, &msg);
        for (ga, gb) in msg.groups.iter().zip(&back.groups) {
            for ((_, ta), (_, tb)) in ga.entries.iter().zip(&gb.entries) {
                for (a, b) in ta.data().iter().zip(tb.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_arrival_order(
        payloads in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 6), 2..5),
        order in any::<u64>(),
    ) {
        let messages: Vec<GradientMessage> = payloads
            .iter()
            .enumerate()
            .map(|(i, p)| {
                GradientMessage::new(
                    3,
                    i as u32,
                    Domain::X,
                    StepKind::DStep,
                    vec![GradGroup {
                        role: Role::Dx,
                        entries: vec![(
                            "c0.w".to_string(),
                            Tensor::from_vec(vec![6], p.clone()).expect("finite"),
                        )],
                    }],
                )
            })
            .collect();
        let mut shuffled = messages.clone();
        // Deterministic pseudo-shuffle driven by the generated seed.
        let mut state = order;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        let a = aggregate(&messages, AggMode::Sum).expect("aggregates");
        let b = aggregate(&shuffled, AggMode::Sum).expect("aggregates");
        prop_assert_eq!(a, b);
    }

    /// Holds whenever the code generators stay light relative to the
    /// backbone (hidden width up to twice the conv width); an oversized code
    /// generator on a tiny backbone can tip the balance the other way, see
    /// `switchable_saving_has_a_boundary`.
    #[test]
    fn switchable_transmits_fewer_parameters_than_standard(
        (width, hidden) in (2usize..10).prop_flat_map(|w| (Just(w), 1usize..=2 * w)),
        depth in 1usize..3,
        disc_depth in 2usize..4,
    ) {
        let gen = ModelConfig {
            in_channels: 1,
            base_width: width,
            depth,
            residual_skip: true,
            norm: NormMode::Instance,
            tanh_output: false,
        };
        let disc = ModelConfig {
            in_channels: 1,
            base_width: width,
            depth: disc_depth,
            residual_skip: false,
            norm: NormMode::Instance,
            tanh_output: false,
        };
        let standard = vec![
            build_generator(&gen, 1, Role::G).expect("valid cfg"),
            build_generator(&gen, 2, Role::F).expect("valid cfg"),
            build_discriminator(&disc, 3, Role::Dx).expect("valid cfg"),
            build_discriminator(&disc, 4, Role::Dy).expect("valid cfg"),
        ];
        let switchable = vec![
            build_generator(&gen, 1, Role::GShared).expect("valid cfg"),
            build_discriminator(&disc, 3, Role::DShared).expect("valid cfg"),
            build_code_generator(&generator_adain_sites(&gen), hidden, 5, Role::CodeGenG)
                .expect("valid cfg"),
            build_code_generator(&discriminator_adain_sites(&disc), hidden, 6, Role::CodeGenD)
                .expect("valid cfg"),
        ];
        let (_, std_total) = param_count(&standard);
        let (_, sw_total) = param_count(&switchable);
        prop_assert!(
            sw_total < std_total,
            "switchable {} vs standard {} (width {width}, depth {depth}, hidden {hidden})",
            sw_total,
            std_total
        );
    }
}

/// The parameter saving is not unconditional: a code generator wider than a
/// tiny backbone costs more than sharing saves. This pins the boundary so
/// the scoped property above stays honest.
#[test]
fn switchable_saving_has_a_boundary() {
    let gen = ModelConfig {
        in_channels: 1,
        base_width: 2,
        depth: 1,
        residual_skip: true,
        norm: NormMode::Instance,
        tanh_output: false,
    };
    let disc = ModelConfig {
        in_channels: 1,
        base_width: 2,
        depth: 2,
        residual_skip: false,
        norm: NormMode::Instance,
        tanh_output: false,
    };
    let backbone = build_generator(&gen, 1, Role::G).unwrap().param_count()
        + build_discriminator(&disc, 2, Role::Dx).unwrap().param_count();
    let codegens = build_code_generator(&generator_adain_sites(&gen), 13, 3, Role::CodeGenG)
        .unwrap()
        .param_count()
        + build_code_generator(&discriminator_adain_sites(&disc), 13, 4, Role::CodeGenD)
            .unwrap()
            .param_count();
    assert!(
        codegens > backbone,
        "expected the width-13 code generators ({codegens}) to outweigh the micro backbone ({backbone})"
    );
}
