use fedcycle::fed::{evaluate_denoise, FedTrainer, RunConfig, TaskSpec};
use fedcycle::nn::{ModelSpec, Variant};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rounds: u32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let n_train: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let t0 = Instant::now();
    let mut config = RunConfig::toy_denoise(ModelSpec::toy(Variant::Standard), 17);
    config.rounds = rounds;
    config.batch_size = batch;
    config.task = TaskSpec::Denoise { n_train, n_eval: 32, sigma: 0.1 };
    let mut trainer = FedTrainer::new(config).unwrap();
    let eval = trainer.eval_set().unwrap().clone();
    for k in 0..rounds {
        trainer.step().unwrap();
        if (k + 1) % 100 == 0 || k + 1 == rounds {
            let m = evaluate_denoise(trainer.models(), &eval).unwrap();
            let rec = &trainer.history().records[k as usize];
            let d: Vec<String> = rec.reports.iter().map(|r| format!("{:.3}", r.d_loss)).collect();
            println!(
                "round {:4} psnr {:.3} (in {:.3}) d {:?} [{:.1?}]",
                k + 1, m.output_psnr, m.input_psnr, d, t0.elapsed()
            );
        }
    }
}
