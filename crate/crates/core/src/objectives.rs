//! Loss terms, the per-domain local objectives, the centralized composite,
//! and the alternating per-step training losses.
//!
//! Every term is written in minimizer form: the adversarial term is the
//! squared distance to the target label in least-squares mode and the
//! negative log-likelihood of the target label in vanilla-log mode, so the
//! same code serves discriminator and generator steps by flipping the target.
//! The composite loss regroups, term by term, into one objective per domain
//! that touches only that domain's samples; `centralized_loss` evaluates the
//! left side of that identity and `local_objective_x`/`_y` the right side.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::nn::{BoundModels, CycleModels, Domain, Freeze, NnError};
use crate::tensor::{Gradients, Real, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch must be [n, c, h, w], got {0:?}")]
    BadBatch(Vec<usize>),
}

/// Adversarial loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanMode {
    /// Mean squared distance of scores to the target label (LSGAN).
    LeastSquares,
    /// Negative log-sigmoid likelihood of the target label.
    VanillaLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Real,
    Fake,
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub gan_mode: GanMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            lambda_identity: 5.0,
            gan_mode: GanMode::LeastSquares,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.lambda_cycle < 0.0 || self.lambda_identity < 0.0 {
            return Err(ObjectiveError::Nn(NnError::BadConfig(
                "loss weights must be non-negative".into(),
            )));
        }
        Ok(())
    }
}

/// Scalar value and per-term breakdown of one domain's local objective. The
/// breakdown terms carry their weights, so they sum to the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalLossReport {
    pub domain: Domain,
    pub total: f64,
    pub adversarial_real: f64,
    pub adversarial_fake: f64,
    pub cycle: f64,
    pub identity: f64,
}

/// Mean adversarial penalty of a patch score map against a target label.
pub fn adversarial_term<E: Real>(
    tape: &mut Tape<E>,
    scores: &Tensor<E>,
    target: Target,
    mode: GanMode,
) -> Result<Tensor<E>, TensorError> {
    match (mode, target) {
        (GanMode::LeastSquares, Target::Real) => {
            let ones = Tensor::full(scores.shape(), E::one());
            let diff = tape.sub(scores, &ones)?;
            tape.square_mean(&diff)
        }
        (GanMode::LeastSquares, Target::Fake) => tape.square_mean(scores),
        (GanMode::VanillaLog, Target::Real) => {
            // -mean(log sigmoid(s))
            let ls = tape.log_sigmoid(scores)?;
            let m = tape.mean(&ls)?;
            tape.scalar_mul(&m, -E::one())
        }
        (GanMode::VanillaLog, Target::Fake) => {
            // -mean(log(1 - sigmoid(s)))
            let neg = tape.scalar_mul(scores, -E::one())?;
            let ls = tape.log_sigmoid(&neg)?;
            let m = tape.mean(&ls)?;
            tape.scalar_mul(&m, -E::one())
        }
    }
}

/// Mean absolute difference between a reconstruction and its original.
pub fn cycle_term<E: Real>(
    tape: &mut Tape<E>,
    recon: &Tensor<E>,
    original: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    let diff = tape.sub(recon, original)?;
    tape.abs_mean(&diff)
}

/// Mean absolute difference between a generator's output and its input.
/// Same contract as [`cycle_term`]; named separately because it plays a
/// different role in the objective.
pub fn identity_term<E: Real>(
    tape: &mut Tape<E>,
    output: &Tensor<E>,
    input: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    cycle_term(tape, output, input)
}

fn check_batch<E: Real>(batch: &Tensor<E>) -> Result<(), ObjectiveError> {
    match batch.shape() {
        [n, _, _, _] if *n > 0 => Ok(()),
        [0, ..] => Err(ObjectiveError::EmptyBatch),
        other => Err(ObjectiveError::BadBatch(other.to_vec())),
    }
}

/// Records one domain's local objective on the tape and returns the scalar
/// loss plus its breakdown. For domain X the terms are: D_X on real x,
/// D_Y on F(x), cycle |G(F(x)) - x| and identity |G(x) - x|; domain Y is the
/// mirror image. The batch is the only sample data the computation touches.
pub fn local_objective<E: Real>(
    tape: &mut Tape<E>,
    models: &mut BoundModels<E>,
    domain: Domain,
    batch: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(Tensor<E>, LocalLossReport), ObjectiveError> {
    check_batch(batch)?;
    weights.validate()?;
    let here = domain;
    let there = domain.other();

    // Real samples of this domain, judged by this domain's discriminator.
    let real_scores = models.discriminate(tape, here, batch)?;
    let adv_real = adversarial_term(tape, &real_scores, Target::Real, weights.gan_mode)?;

    // Translated into the other domain, judged there as fake.
    let fake = models.translate(tape, there, batch)?;
    let fake_scores = models.discriminate(tape, there, &fake)?;
    let adv_fake = adversarial_term(tape, &fake_scores, Target::Fake, weights.gan_mode)?;

    let recon = models.translate(tape, here, &fake)?;
    let cyc = cycle_term(tape, &recon, batch)?;
    let cyc = tape.scalar_mul(&cyc, E::of(weights.lambda_cycle))?;

    let mut total = tape.add(&adv_real, &adv_fake)?;
    total = tape.add(&total, &cyc)?;

    let mut identity_value = 0.0;
    if weights.lambda_identity > 0.0 {
        let kept = models.translate(tape, here, batch)?;
        let idt = identity_term(tape, &kept, batch)?;
        let idt = tape.scalar_mul(&idt, E::of(weights.lambda_identity))?;
        identity_value = idt.item().to64();
        total = tape.add(&total, &idt)?;
    }

    let report = LocalLossReport {
        domain,
        total: total.item().to64(),
        adversarial_real: adv_real.item().to64(),
        adversarial_fake: adv_fake.item().to64(),
        cycle: cyc.item().to64(),
        identity: identity_value,
    };
    Ok((total, report))
}

/// Convenience wrapper computing the domain-X local objective and its
/// gradients with respect to all four parameter groups on a fresh tape.
pub fn local_objective_x<E: Real>(
    models: &CycleModels,
    batch_x: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(LocalLossReport, Gradients<E>), ObjectiveError> {
    local_objective_gradients(models, Domain::X, batch_x, weights)
}

/// Mirror of [`local_objective_x`] for domain Y.
pub fn local_objective_y<E: Real>(
    models: &CycleModels,
    batch_y: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(LocalLossReport, Gradients<E>), ObjectiveError> {
    local_objective_gradients(models, Domain::Y, batch_y, weights)
}

pub fn local_objective_gradients<E: Real>(
    models: &CycleModels,
    domain: Domain,
    batch: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(LocalLossReport, Gradients<E>), ObjectiveError> {
    let mut tape = Tape::new();
    let mut bound = models.bind(&mut tape, Freeze::None)?;
    let (loss, report) = local_objective(&mut tape, &mut bound, domain, batch, weights)?;
    let grads = tape.backward(&loss)?;
    Ok((report, grads))
}

/// Evaluates the full composite objective on both batches on one tape and
/// returns its value, both per-domain breakdowns, and the gradient with
/// respect to every parameter group.
#[allow(clippy::type_complexity)]
pub fn centralized_loss<E: Real>(
    models: &CycleModels,
    batch_x: &Tensor<E>,
    batch_y: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(f64, LocalLossReport, LocalLossReport, Gradients<E>), ObjectiveError> {
    let mut tape = Tape::new();
    let mut bound = models.bind(&mut tape, Freeze::None)?;
    let (loss_x, report_x) = local_objective(&mut tape, &mut bound, Domain::X, batch_x, weights)?;
    let (loss_y, report_y) = local_objective(&mut tape, &mut bound, Domain::Y, batch_y, weights)?;
    let total = tape.add(&loss_x, &loss_y)?;
    let value = total.item().to64();
    let grads = tape.backward(&total)?;
    Ok((value, report_x, report_y, grads))
}

/// Values of the generator-step terms (weights applied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GStepParts {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub total: f64,
}

/// Records one domain's discriminator-step loss on the tape:
/// 1/2 [ adv(D_here(real), real) + adv(D_there(fake), fake) ]. Generator
/// outputs act as constants when the generator side is bound frozen; the 1/2
/// keeps each discriminator's least-squares fixed point at 0.25.
pub fn d_step_loss<E: Real>(
    tape: &mut Tape<E>,
    models: &mut BoundModels<E>,
    domain: Domain,
    batch: &Tensor<E>,
    weights: &LossWeights,
) -> Result<Tensor<E>, ObjectiveError> {
    check_batch(batch)?;
    let here = domain;
    let there = domain.other();
    let real_scores = models.discriminate(tape, here, batch)?;
    let adv_real = adversarial_term(tape, &real_scores, Target::Real, weights.gan_mode)?;
    let fake = models.translate(tape, there, batch)?;
    let fake_scores = models.discriminate(tape, there, &fake)?;
    let adv_fake = adversarial_term(tape, &fake_scores, Target::Fake, weights.gan_mode)?;
    let sum = tape.add(&adv_real, &adv_fake)?;
    Ok(tape.scalar_mul(&sum, E::of(0.5))?)
}

/// Records one domain's generator-step loss on the tape:
/// adv(D_there(fake), real) + cycle + identity, with the adversarial target
/// flipped. Discriminator parameters act as constants when bound frozen.
pub fn g_step_loss<E: Real>(
    tape: &mut Tape<E>,
    models: &mut BoundModels<E>,
    domain: Domain,
    batch: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(Tensor<E>, GStepParts), ObjectiveError> {
    check_batch(batch)?;
    let here = domain;
    let there = domain.other();
    let fake = models.translate(tape, there, batch)?;
    let fake_scores = models.discriminate(tape, there, &fake)?;
    let adv = adversarial_term(tape, &fake_scores, Target::Real, weights.gan_mode)?;
    let recon = models.translate(tape, here, &fake)?;
    let cyc = cycle_term(tape, &recon, batch)?;
    let cyc = tape.scalar_mul(&cyc, E::of(weights.lambda_cycle))?;
    let mut total = tape.add(&adv, &cyc)?;
    let mut identity = 0.0;
    if weights.lambda_identity > 0.0 {
        let kept = models.translate(tape, here, batch)?;
        let idt = identity_term(tape, &kept, batch)?;
        let idt = tape.scalar_mul(&idt, E::of(weights.lambda_identity))?;
        identity = idt.item().to64();
        total = tape.add(&total, &idt)?;
    }
    let parts = GStepParts {
        adversarial: adv.item().to64(),
        cycle: cyc.item().to64(),
        identity,
        total: total.item().to64(),
    };
    Ok((total, parts))
}

/// Values and gradients of the two alternating practical losses for one
/// domain's batch.
pub struct StepLosses<E: Real> {
    pub d_loss: f64,
    pub d_grads: Gradients<E>,
    pub g_loss: f64,
    pub g_adversarial: f64,
    pub g_cycle: f64,
    pub g_identity: f64,
    pub g_grads: Gradients<E>,
}

/// Splits the minimax into the two practical losses, both evaluated at the
/// same parameter snapshot. The discriminator step sees generator outputs as
/// constants; the generator step sees discriminator parameters as constants.
pub fn gan_step_losses<E: Real>(
    models: &CycleModels,
    batch: &Tensor<E>,
    domain: Domain,
    weights: &LossWeights,
) -> Result<StepLosses<E>, ObjectiveError> {
    weights.validate()?;

    let mut d_tape = Tape::new();
    let mut bound = models.bind(&mut d_tape, Freeze::Generators)?;
    let d_total = d_step_loss(&mut d_tape, &mut bound, domain, batch, weights)?;
    let d_loss = d_total.item().to64();
    let d_grads = d_tape.backward(&d_total)?;

    let mut g_tape = Tape::new();
    let mut bound = models.bind(&mut g_tape, Freeze::Discriminators)?;
    let (g_total, parts) = g_step_loss(&mut g_tape, &mut bound, domain, batch, weights)?;
    let g_grads = g_tape.backward(&g_total)?;

    Ok(StepLosses {
        d_loss,
        d_grads,
        g_loss: parts.total,
        g_adversarial: parts.adversarial,
        g_cycle: parts.cycle,
        g_identity: parts.identity,
        g_grads,
    })
}

/// Sums two named gradient maps entry by entry. Maps must cover identical
/// names with identical shapes.
pub fn sum_gradients<E: Real>(
    a: &Gradients<E>,
    b: &Gradients<E>,
) -> Result<Gradients<E>, TensorError> {
    debug_assert_eq!(a.len(), b.len());
    let mut out = BTreeMap::new();
    for (name, ga) in a {
        let gb = &b[name];
        let data = ga
            .data()
            .iter()
            .zip(gb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        out.insert(name.clone(), Tensor::raw(ga.shape().to_vec(), data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Variant;
    use crate::verify::{micro_spec, random_batch};

    #[test]
    fn least_squares_term_values() {
        let mut tape = Tape::<f64>::new();
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        let t = adversarial_term(&mut tape, &ones, Target::Real, GanMode::LeastSquares).unwrap();
        assert_eq!(t.item(), 0.0);

        let half = Tensor::full(&[1, 1, 2, 2], 0.5);
        let r = adversarial_term(&mut tape, &half, Target::Real, GanMode::LeastSquares).unwrap();
        let f = adversarial_term(&mut tape, &half, Target::Fake, GanMode::LeastSquares).unwrap();
        assert!((r.item() - 0.25).abs() < 1e-12);
        assert!((f.item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn vanilla_term_at_zero_scores_is_ln_two() {
        let mut tape = Tape::<f64>::new();
        let zeros = Tensor::zeros(&[1, 1, 2, 2]);
        let t = adversarial_term(&mut tape, &zeros, Target::Real, GanMode::VanillaLog).unwrap();
        assert!((t.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cycle_term_values() {
        let mut tape = Tape::<f64>::new();
        let a = random_batch::<f64>(1, 4, 1);
        assert_eq!(cycle_term(&mut tape, &a, &a).unwrap().item(), 0.0);

        let shifted = Tensor::raw(
            a.shape().to_vec(),
            a.data().iter().map(|v| v + 0.5).collect(),
        );
        let c = cycle_term(&mut tape, &shifted, &a).unwrap();
        assert!((c.item() - 0.5).abs() < 1e-12);

        // Brute-force |diff| mean.
        let b = random_batch::<f64>(1, 4, 2);
        let c = cycle_term(&mut tape, &a, &b).unwrap();
        let brute: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.numel() as f64;
        assert!((c.item() - brute).abs() <= 1e-6 * brute.abs().max(1.0));
    }

    #[test]
    fn breakdown_terms_sum_to_total() {
        for variant in [Variant::Standard, Variant::Switchable] {
            let models = CycleModels::new(micro_spec(variant), 21).unwrap();
            let batch = random_batch::<f64>(2, 8, 3);
            let (report, _) =
                local_objective_x(&models, &batch, &LossWeights::default()).unwrap();
            let sum = report.adversarial_real
                + report.adversarial_fake
                + report.cycle
                + report.identity;
            assert!(
                (report.total - sum).abs() <= 1e-6 * report.total.abs().max(1.0),
                "total {} vs sum {}",
                report.total,
                sum
            );
        }
    }

    #[test]
    fn least_squares_breakdown_terms_are_non_negative() {
        let models = CycleModels::new(micro_spec(Variant::Standard), 5).unwrap();
        let batch = random_batch::<f64>(2, 8, 9);
        let (report, _) = local_objective_y(&models, &batch, &LossWeights::default()).unwrap();
        assert!(report.adversarial_real >= 0.0);
        assert!(report.adversarial_fake >= 0.0);
        assert!(report.cycle >= 0.0);
        assert!(report.identity >= 0.0);
    }

    #[test]
    fn decomposition_identity_in_values_and_gradients() {
        let models = CycleModels::new(micro_spec(Variant::Standard), 7).unwrap();
        let weights = LossWeights::default();
        let bx = random_batch::<f64>(2, 8, 11);
        let by = random_batch::<f64>(2, 8, 12);

        let (central, _, _, central_grads) =
            centralized_loss(&models, &bx, &by, &weights).unwrap();
        let (rx, gx) = local_objective_x(&models, &bx, &weights).unwrap();
        let (ry, gy) = local_objective_y(&models, &by, &weights).unwrap();

        let sum = rx.total + ry.total;
        assert!((central - sum).abs() / central.abs().max(1.0) <= 1e-6);

        let local_sum = sum_gradients(&gx, &gy).unwrap();
        for (name, cg) in &central_grads {
            let lg = &local_sum[name];
            for (a, b) in cg.data().iter().zip(lg.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                assert!(rel <= 1e-5, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let models = CycleModels::new(micro_spec(Variant::Standard), 7).unwrap();
        let empty = Tensor::<f64>::zeros(&[0, 1, 8, 8]);
        assert!(matches!(
            local_objective_x(&models, &empty, &LossWeights::default()),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    #[test]
    fn step_losses_respect_stop_gradients() {
        for variant in [Variant::Standard, Variant::Switchable] {
            let models = CycleModels::new(micro_spec(variant), 13).unwrap();
            let batch = random_batch::<f32>(2, 8, 4);
            let steps =
                gan_step_losses(&models, &batch, Domain::X, &LossWeights::default()).unwrap();
            let disc_roles = models.spec.discriminator_roles();
            let gen_roles = models.spec.generator_roles();
            for role in &gen_roles {
                let prefix = format!("{}/", role.as_str());
                assert!(
                    steps.d_grads.keys().all(|k| !k.starts_with(&prefix)),
                    "D step leaked into {role}"
                );
            }
            for role in &disc_roles {
                let prefix = format!("{}/", role.as_str());
                assert!(
                    steps.g_grads.keys().all(|k| !k.starts_with(&prefix)),
                    "G step leaked into {role}"
                );
            }
            // And the thawed side is actually populated.
            assert!(!steps.d_grads.is_empty());
            assert!(!steps.g_grads.is_empty());
        }
    }

    #[test]
    fn d_step_loss_at_half_scores_is_quarter() {
        // With every discriminator score at 0.5, each adversarial half is
        // 0.25 and the 1/2 scaling keeps the combined value at 0.25.
        let mut tape = Tape::<f64>::new();
        let half = Tensor::full(&[1, 1, 4, 4], 0.5);
        let r = adversarial_term(&mut tape, &half, Target::Real, GanMode::LeastSquares).unwrap();
        let f = adversarial_term(&mut tape, &half, Target::Fake, GanMode::LeastSquares).unwrap();
        let sum = tape.add(&r, &f).unwrap();
        let d = tape.scalar_mul(&sum, 0.5).unwrap();
        assert!((d.item() - 0.25).abs() < 1e-12);
    }
}
