use fedcycle::fed::*;
use fedcycle::nn::{ModelSpec, Variant};
use std::time::Instant;

fn main() {
    let rounds: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    for n in [1usize, 4] {
        for seed in [1u64] {
            let t = Instant::now();
            let mut config = RunConfig::toy_denoise(ModelSpec::toy(Variant::Switchable), seed);
            config.rounds = rounds;
            config.clients_per_domain = 2;
            config.select_per_round = n;
            config.aggregation = AggMode::Mean;
            let trainer = FedTrainer::new(config).unwrap();
            let eval = trainer.eval_set().unwrap().clone();
            let out = trainer.run().unwrap();
            let m = evaluate_denoise(&out.models, &eval).unwrap();
            let tail: f64 = out.history.records[rounds as usize - 50..]
                .iter()
                .flat_map(|r| r.reports.iter().map(|p| p.d_loss))
                .sum::<f64>()
                / out.history.records[rounds as usize - 50..]
                    .iter()
                    .map(|r| r.reports.len())
                    .sum::<usize>() as f64;
            println!(
                "N={n} seed {seed} rounds {rounds}: psnr {:.3} (in {:.3}) d_tail {:.3} [{:.0?}]",
                m.output_psnr, m.input_psnr, tail, t.elapsed()
            );
        }
    }
}
