//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured value against its pinned tolerance. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedcycle::fed::{
    evaluate_denoise, train_centralized, train_federated, AggMode, DenoiseEval, FedTrainer,
    OptimKind, RunConfig, Seeds, TaskSpec, TransportKind,
};
use fedcycle::nn::{param_count, CycleModels, ModelSpec, Variant};
use fedcycle::transport::message_size;
use fedcycle::verify::{
    equivalence_config, run_codec_suite, run_decomposition_suite, run_equivalence_pair,
    run_gradcheck_suite,
};

struct Criterion {
    name: &'static str,
    budget: Duration,
    started: Instant,
}

impl Criterion {
    fn start(name: &'static str, budget_secs: u64) -> Self {
        Self {
            name,
            budget: Duration::from_secs(budget_secs),
            started: Instant::now(),
        }
    }

    fn finish(self, passed: bool, detail: String) {
        let elapsed = self.started.elapsed();
        println!(
            "acceptance {}: {} ({detail}; {:.1?} of {:.0?} budget)",
            self.name,
            if passed { "PASS" } else { "FAIL" },
            elapsed,
            self.budget
        );
        assert!(passed, "{}: {detail}", self.name);
        assert!(
            elapsed <= self.budget,
            "{} exceeded its runtime budget: {:.1?} > {:.0?}",
            self.name,
            elapsed,
            self.budget
        );
    }
}

#[test]
fn criterion_1_decomposition_identity() {
    let c = Criterion::start("1 decomposition identity", 30);
    let report = run_decomposition_suite(100);
    let detail = report
        .checks
        .iter()
        .map(|ch| ch.detail.clone())
        .collect::<Vec<_>>()
        .join("; ");
    c.finish(report.passed(), detail);
}

#[test]
fn criterion_2_federated_equals_centralized() {
    let c = Criterion::start("2 federated == centralized trajectories", 120);
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (label, optimizer) in [("sgd", OptimKind::Sgd), ("adam", OptimKind::adam_default())] {
        let div = run_equivalence_pair(optimizer, TransportKind::InProcess, 50)
            .expect("equivalence harness runs");
        worst = worst.max(div);
        detail.push(format!("{label} max divergence {div:.3e}"));
    }
    c.finish(worst <= 1e-6, detail.join("; "));
}

#[test]
fn criterion_3_gradient_correctness() {
    let c = Criterion::start("3 gradient correctness", 120);
    let report = run_gradcheck_suite(100);
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|ch| !ch.passed)
        .map(|ch| format!("{}: {}", ch.name, ch.detail))
        .collect();
    let detail = if failed.is_empty() {
        format!("{} checks at tolerance 1e-4", report.checks.len())
    } else {
        failed.join("; ")
    };
    c.finish(report.passed(), detail);
}

/// The 400-round toy denoise run shared by criteria 4 and (as the short-run
/// reference) the history checks.
fn toy_denoise_run() -> &'static (RunConfig, fedcycle::fed::TrainHistory, CycleModels) {
    static RUN: OnceLock<(RunConfig, fedcycle::fed::TrainHistory, CycleModels)> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = RunConfig::toy_denoise(ModelSpec::toy(Variant::Standard), 17);
        let out = train_federated(config.clone()).expect("toy run trains");
        (config, out.history, out.models)
    })
}

#[test]
fn criterion_4_lsgan_fixed_point() {
    let c = Criterion::start("4 LSGAN fixed point", 300);
    let (config, history, _) = toy_denoise_run();
    assert_eq!(config.rounds, 400);
    let tail = &history.records[history.records.len() - 50..];
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in tail {
        for rep in &rec.reports {
            sum += rep.d_loss;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    c.finish(
        (0.15..=0.35).contains(&mean),
        format!("discriminator-step loss over final 50 rounds: {mean:.4} (band [0.15, 0.35])"),
    );
}

/// Longer denoise schedule used for the held-out quality criteria; the
/// adversarial denoising behaviour emerges after the 400-round mark at this
/// scale, so quality is measured on an extended run of the same task.
fn quality_config(variant: Variant, master: u64) -> RunConfig {
    let mut config = RunConfig::toy_denoise(ModelSpec::toy(variant), master);
    config.rounds = 1200;
    config
}

struct QualityOutcome {
    fed: DenoiseEval,
    central: DenoiseEval,
}

fn quality_runs() -> &'static QualityOutcome {
    static RUN: OnceLock<QualityOutcome> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = quality_config(Variant::Standard, 17);
        let trainer = FedTrainer::new(config.clone()).expect("valid config");
        let eval = trainer.eval_set().expect("denoise task has eval pairs").clone();
        let fed_out = trainer.run().expect("federated run");
        let fed = evaluate_denoise(&fed_out.models, &eval).expect("evaluation");
        let cen_out = train_centralized(config).expect("centralized run");
        let central = evaluate_denoise(&cen_out.models, &eval).expect("evaluation");
        QualityOutcome { fed, central }
    })
}

#[test]
fn criterion_5_denoising_improvement() {
    let c = Criterion::start("5 denoising improvement", 600);
    let q = quality_runs();
    let uplift = q.fed.output_psnr - q.fed.input_psnr;
    let gap = (q.fed.output_psnr - q.central.output_psnr).abs();
    let passed = uplift >= 2.0 && gap <= 0.5;
    c.finish(
        passed,
        format!(
            "input {:.2} dB, federated {:.2} dB (uplift {uplift:.2} >= 2), centralized {:.2} dB (gap {gap:.3} <= 0.5)",
            q.fed.input_psnr, q.fed.output_psnr, q.central.output_psnr
        ),
    );
}

#[test]
fn criterion_6_switchable_bandwidth_reduction() {
    let c = Criterion::start("6 switchable bandwidth reduction", 30);
    let standard = CycleModels::new(ModelSpec::toy(Variant::Standard), 0).expect("toy");
    let switchable = CycleModels::new(ModelSpec::toy(Variant::Switchable), 0).expect("toy");
    let (_, std_params) = param_count(standard.groups());
    let (_, sw_params) = param_count(switchable.groups());
    let std_bytes = message_size(standard.groups());
    let sw_bytes = message_size(switchable.groups());
    let reference_ratio = 35_576_708f64 / 69_522_952f64;
    let passed = sw_params < std_params && sw_bytes < std_bytes;
    c.finish(
        passed,
        format!(
            "params {sw_params} < {std_params}, bytes {sw_bytes} < {std_bytes}; full-scale reference ratio {reference_ratio:.3}"
        ),
    );
}

#[test]
fn criterion_7_multi_client_trend() {
    let c = Criterion::start("7 multi-client trend", 1200);
    let mut means = Vec::new();
    for n in [1usize, 4] {
        let mut acc = 0.0;
        for seed in [1u64, 2, 3] {
            let mut config = quality_config(Variant::Switchable, seed);
            config.rounds = 600;
            config.clients_per_domain = 2;
            config.select_per_round = n;
            config.aggregation = AggMode::Mean;
            let trainer = FedTrainer::new(config).expect("valid config");
            let eval = trainer.eval_set().expect("eval pairs").clone();
            let out = trainer.run().expect("multi-client run");
            acc += evaluate_denoise(&out.models, &eval).expect("evaluation").output_psnr;
        }
        means.push(acc / 3.0);
    }
    let (n1, n4) = (means[0], means[1]);
    c.finish(
        n4 >= n1 - 0.3,
        format!("mean held-out PSNR over 3 seeds: N=4 {n4:.3} dB vs N=1 {n1:.3} dB (soft monotonicity)"),
    );
}

#[test]
fn criterion_8_wire_integrity() {
    let c = Criterion::start("8 wire integrity", 300);
    let codec = run_codec_suite(1000);
    let mut details: Vec<String> = codec.checks.iter().map(|ch| ch.detail.clone()).collect();

    // The trajectory harness must behave identically over both transports.
    let rounds = 50;
    let in_proc = run_equivalence_pair(OptimKind::adam_default(), TransportKind::InProcess, rounds)
        .expect("in-process harness");
    let tcp = run_equivalence_pair(OptimKind::adam_default(), TransportKind::Tcp, rounds)
        .expect("tcp harness");
    details.push(format!(
        "equivalence divergence in-process {in_proc:.3e}, tcp {tcp:.3e}"
    ));

    // And bit-identical final parameters between the two transports.
    let fed_a = train_federated(equivalence_config(
        OptimKind::adam_default(),
        TransportKind::InProcess,
        rounds,
    ))
    .expect("in-process run");
    let fed_b = train_federated(equivalence_config(
        OptimKind::adam_default(),
        TransportKind::Tcp,
        rounds,
    ))
    .expect("tcp run");
    let transports_identical = fed_a.models == fed_b.models
        && fed_a.history.checksum() == fed_b.history.checksum();
    details.push(format!(
        "transport parity: models identical {transports_identical}, history crc {:08x}",
        fed_a.history.checksum()
    ));

    let passed =
        codec.passed() && in_proc <= 1e-6 && tcp <= 1e-6 && transports_identical;
    c.finish(passed, details.join("; "));
}
