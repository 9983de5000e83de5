//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use fedcycle::data::make_style_task;
use fedcycle::fed::{
    evaluate_denoise, evaluate_style, CentralTrainer, FedError, FedTrainer, TaskSpec,
    TrainHistory, TrainOutcome,
};
use fedcycle::nn::{load_params, mix_seed, param_count, save_params, CycleModels, ModelSpec, Variant};
use fedcycle::transport::message_size;
use fedcycle::verify::{
    run_codec_suite, run_decomposition_suite, run_equivalence_suite, run_gradcheck_suite,
};

use crate::config::{ExperimentConfig, TrainMode};
use crate::{EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY};

/// Full-scale parameter counts reported for the original networks; printed
/// for reference only, the toy models do not reproduce them.
pub const REFERENCE_STANDARD_PARAMS: u64 = 69_522_952;
pub const REFERENCE_SWITCHABLE_PARAMS: u64 = 35_576_708;

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn is_numeric_abort(err: &FedError) -> bool {
    matches!(
        err,
        FedError::NonFiniteGradient { .. }
            | FedError::Transport(fedcycle::transport::TransportError::NonFinitePayload { .. })
    )
}

pub fn cmd_train(config_path: &Path, mode: &str, out_override: Option<&Path>) -> i32 {
    let mode = match TrainMode::parse(mode) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    let config = match ExperimentConfig::parse(&text, mode) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    for w in &config.warnings {
        eprintln!("warning: {w}");
    }
    let out_dir = out_override
        .map(PathBuf::from)
        .or_else(|| std::env::var("FEDCYCLE_OUT_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| config.out_dir.clone());
    if let Err(e) = fs::create_dir_all(&out_dir) {
        eprintln!("config error: cannot create {}: {e}", out_dir.display());
        return EXIT_CONFIG;
    }

    let outcome = match mode {
        TrainMode::Centralized => CentralTrainer::new(config.run.clone()).and_then(|t| t.run()),
        TrainMode::Federated | TrainMode::SwitchableFederated => {
            FedTrainer::new(config.run.clone()).and_then(|t| t.run())
        }
    };
    let TrainOutcome { history, models } = match outcome {
        Ok(o) => o,
        Err(e) if is_numeric_abort(&e) => {
            eprintln!("numeric abort: {e}");
            return EXIT_NUMERIC;
        }
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };

    match write_artifacts(&out_dir, &config, mode, &history, &models) {
        Ok(()) => {
            println!(
                "trained {} rounds; artifacts in {} (history crc {:08x})",
                history.records.len(),
                out_dir.display(),
                history.checksum()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error writing artifacts: {e}");
            EXIT_CONFIG
        }
    }
}

fn write_artifacts(
    out_dir: &Path,
    config: &ExperimentConfig,
    mode: TrainMode,
    history: &TrainHistory,
    models: &CycleModels,
) -> anyhow::Result<()> {
    let config_text = crate::config::render(&config.run, config.master_seed, out_dir, mode);
    fs::write(out_dir.join("config.txt"), &config_text)?;
    let csv = history.to_csv();
    fs::write(out_dir.join("history.csv"), &csv)?;
    save_params(&out_dir.join("params.bin"), models)?;
    let params_bytes = fs::read(out_dir.join("params.bin"))?;

    let mut manifest = String::new();
    manifest.push_str(&format!(
        "mode = {}\n",
        match mode {
            TrainMode::Centralized => "centralized",
            TrainMode::Federated => "federated",
            TrainMode::SwitchableFederated => "switchable-federated",
        }
    ));
    manifest.push_str(&format!("rounds = {}\n", history.records.len()));
    manifest.push_str(&format!("config_sha256 = {}\n", sha256_hex(config_text.as_bytes())));
    manifest.push_str(&format!("history_sha256 = {}\n", sha256_hex(csv.as_bytes())));
    manifest.push_str(&format!("history_crc32 = {:08x}\n", history.checksum()));
    manifest.push_str(&format!("params_sha256 = {}\n", sha256_hex(&params_bytes)));
    fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn cmd_verify(suite: &str) -> i32 {
    let report = match suite {
        "decomposition" => run_decomposition_suite(100),
        "gradcheck" => run_gradcheck_suite(100),
        "equivalence" => run_equivalence_suite(50),
        "codec" => run_codec_suite(1000),
        other => {
            eprintln!("unknown suite {other:?}: expected decomposition | gradcheck | equivalence | codec");
            return EXIT_CONFIG;
        }
    };
    print!("{}", report.render());
    if report.passed() {
        println!("suite {suite}: all checks passed");
        EXIT_OK
    } else {
        println!("suite {suite}: FAILED");
        EXIT_VERIFY
    }
}

pub fn cmd_bench(what: &str) -> i32 {
    let standard = CycleModels::new(ModelSpec::toy(Variant::Standard), 0).expect("toy spec");
    let switchable = CycleModels::new(ModelSpec::toy(Variant::Switchable), 0).expect("toy spec");
    match what {
        "params" => {
            println!("trainable parameters to transmit (toy config)");
            println!("{:<14}{:>12}   {:<14}{:>12}", "standard", "params", "switchable", "params");
            let (std_per, std_total) = param_count(standard.groups());
            let (sw_per, sw_total) = param_count(switchable.groups());
            for i in 0..std_per.len().max(sw_per.len()) {
                let left = std_per
                    .get(i)
                    .map(|(r, c)| format!("{:<14}{:>12}", r.to_string(), c))
                    .unwrap_or_else(|| format!("{:<26}", ""));
                let right = sw_per
                    .get(i)
                    .map(|(r, c)| format!("{:<14}{:>12}", r.to_string(), c))
                    .unwrap_or_default();
                println!("{left}   {right}");
            }
            println!("{:<14}{:>12}   {:<14}{:>12}", "total", std_total, "total", sw_total);
            println!(
                "toy ratio: {:.3} (switchable / standard)",
                sw_total as f64 / std_total as f64
            );
            println!(
                "full-scale reference: {} / {} = {:.3}",
                REFERENCE_SWITCHABLE_PARAMS,
                REFERENCE_STANDARD_PARAMS,
                REFERENCE_SWITCHABLE_PARAMS as f64 / REFERENCE_STANDARD_PARAMS as f64
            );
        }
        "bytes" => {
            let std_bytes = message_size(standard.groups());
            let sw_bytes = message_size(switchable.groups());
            println!("encoded gradient-message size, one gradient per parameter (toy config)");
            println!("standard:   {std_bytes} bytes");
            println!("switchable: {sw_bytes} bytes");
            println!("ratio: {:.3}", sw_bytes as f64 / std_bytes as f64);
            println!("(sizes include the message header, entry names, shapes and CRC)");
        }
        other => {
            eprintln!("unknown bench target {other:?}: expected params | bytes");
            return EXIT_CONFIG;
        }
    }
    EXIT_OK
}

fn manifest_value(manifest: &str, key: &str) -> Option<String> {
    manifest.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

pub fn cmd_report(run_dir: &Path) -> i32 {
    let manifest_path = run_dir.join("manifest.txt");
    let manifest = match fs::read_to_string(&manifest_path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("missing artifact {}: {e}", manifest_path.display());
            return EXIT_CONFIG;
        }
    };
    let mode = match manifest_value(&manifest, "mode").map(|m| TrainMode::parse(&m)) {
        Some(Ok(m)) => m,
        _ => {
            eprintln!("manifest {} lacks a valid mode", manifest_path.display());
            return EXIT_CONFIG;
        }
    };
    let config_path = run_dir.join("config.txt");
    let text = match fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("missing artifact {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    let config = match ExperimentConfig::parse(&text, mode) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let params_path = run_dir.join("params.bin");
    if !params_path.exists() {
        eprintln!("missing artifact {}", params_path.display());
        return EXIT_CONFIG;
    }
    let models = match load_params(&params_path, &config.run.spec) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("cannot load {}: {e}", params_path.display());
            return EXIT_CONFIG;
        }
    };

    let mut csv = String::from("metric,input,model\n");
    match &config.run.task {
        TaskSpec::Denoise { n_train, n_eval, sigma } => {
            let (_, _, eval) = match fedcycle::data::make_denoise_task(
                *n_train,
                *n_eval,
                *sigma,
                config.run.seeds.data,
            ) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot rebuild eval set: {e}");
                    return EXIT_CONFIG;
                }
            };
            let m = match evaluate_denoise(&models, &eval) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("evaluation failed: {e}");
                    return EXIT_CONFIG;
                }
            };
            println!("held-out denoising report ({} pairs, sigma {sigma})", eval.pairs.len());
            println!("{:<12}{:>10}{:>10}", "metric", "input", "model");
            println!("{:<12}{:>10.4}{:>10.4}", "PSNR [dB]", m.input_psnr, m.output_psnr);
            println!("{:<12}{:>10.4}{:>10.4}", "SSIM", m.input_ssim, m.output_ssim);
            csv.push_str(&format!("psnr_db,{:.6},{:.6}\n", m.input_psnr, m.output_psnr));
            csv.push_str(&format!("ssim,{:.6},{:.6}\n", m.input_ssim, m.output_ssim));
        }
        TaskSpec::Style { n_per_domain } => {
            // Held-out draws of both style distributions.
            let (xs, ys) = match make_style_task(
                (*n_per_domain).max(16),
                mix_seed(config.run.seeds.data, 0xE7A1),
            ) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot rebuild eval set: {e}");
                    return EXIT_CONFIG;
                }
            };
            let m = match evaluate_style(&models, xs.samples(), ys.samples()) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("evaluation failed: {e}");
                    return EXIT_CONFIG;
                }
            };
            println!("held-out style report ({} samples per domain)", xs.len());
            println!("{:<18}{:>12}{:>12}", "metric", "input", "model");
            println!("{:<18}{:>12.5}{:>12.5}", "MMD^2 to target", m.input_mmd, m.output_mmd);
            csv.push_str(&format!("mmd2,{:.6},{:.6}\n", m.input_mmd, m.output_mmd));
        }
    }
    if let Err(e) = fs::write(run_dir.join("metrics.csv"), csv) {
        eprintln!("cannot write metrics.csv: {e}");
        return EXIT_CONFIG;
    }
    EXIT_OK
}

pub fn cmd_plot_data(run_dir: &Path) -> i32 {
    let history_path = run_dir.join("history.csv");
    let text = match fs::read_to_string(&history_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("missing artifact {}: {e}", history_path.display());
            return EXIT_CONFIG;
        }
    };
    // Average the per-client rows of each round into one line per round.
    let mut rows: Vec<(u32, f64, f64, f64, u32)> = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 10 {
            continue;
        }
        let (round, lr) = (cols[0].parse::<u32>(), cols[1].parse::<f64>());
        let (d, g) = (cols[4].parse::<f64>(), cols[8].parse::<f64>());
        if let (Ok(round), Ok(lr), Ok(d), Ok(g)) = (round, lr, d, g) {
            match rows.last_mut() {
                Some(r) if r.0 == round => {
                    r.2 += d;
                    r.3 += g;
                    r.4 += 1;
                }
                _ => rows.push((round, lr, d, g, 1)),
            }
        }
    }
    let plot_dir = run_dir.join("plot");
    if let Err(e) = fs::create_dir_all(&plot_dir) {
        eprintln!("cannot create {}: {e}", plot_dir.display());
        return EXIT_CONFIG;
    }
    let mut out = String::from("# round lr d_step_loss g_step_loss\n");
    for (round, lr, d, g, n) in rows {
        out.push_str(&format!(
            "{round} {lr:.10e} {:.7e} {:.7e}\n",
            d / n as f64,
            g / n as f64
        ));
    }
    match fs::write(plot_dir.join("losses.dat"), out) {
        Ok(()) => {
            println!("wrote {}", plot_dir.join("losses.dat").display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("cannot write plot data: {e}");
            EXIT_CONFIG
        }
    }
}
