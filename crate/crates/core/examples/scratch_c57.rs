use fedcycle::fed::*;
use fedcycle::nn::{ModelSpec, Variant};
use std::time::Instant;

fn denoise_config(variant: Variant, master: u64, rounds: u32) -> RunConfig {
    let mut c = RunConfig::toy_denoise(ModelSpec::toy(variant), master);
    c.rounds = rounds;
    c
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "c5".into());
    if which == "c5" {
        let t = Instant::now();
        let config = denoise_config(Variant::Standard, 17, 1200);
        let fed = FedTrainer::new(config.clone()).unwrap();
        let eval = fed.eval_set().unwrap().clone();
        let fed_out = fed.run().unwrap();
        let fed_m = evaluate_denoise(&fed_out.models, &eval).unwrap();
        println!("fed: in {:.3} out {:.3} [{:.0?}]", fed_m.input_psnr, fed_m.output_psnr, t.elapsed());
        let cen_out = train_centralized(config).unwrap();
        let cen_m = evaluate_denoise(&cen_out.models, &eval).unwrap();
        println!("cen: out {:.3} gap {:.4} [{:.0?}]", cen_m.output_psnr, (fed_m.output_psnr - cen_m.output_psnr).abs(), t.elapsed());
    } else {
        // criterion 7 probe: switchable, 4 clients, mean aggregation
        for n in [1usize, 4] {
            for seed in [1u64, 2, 3] {
                let t = Instant::now();
                let mut config = denoise_config(Variant::Switchable, seed, 600);
                config.clients_per_domain = 2;
                config.select_per_round = n;
                config.aggregation = AggMode::Mean;
                let fed = FedTrainer::new(config).unwrap();
                let eval = fed.eval_set().unwrap().clone();
                let out = fed.run().unwrap();
                let m = evaluate_denoise(&out.models, &eval).unwrap();
                println!("N={n} seed {seed}: psnr {:.3} (in {:.3}) [{:.0?}]", m.output_psnr, m.input_psnr, t.elapsed());
            }
        }
    }
}
