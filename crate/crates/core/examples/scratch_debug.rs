use fedcycle::nn::*;
use fedcycle::objectives::*;
use fedcycle::tensor::*;
use fedcycle::verify::{micro_spec, random_batch};
use std::collections::BTreeMap;

fn main() {
    let variant = Variant::Switchable;
    let domain = Domain::Y;
    let spec = micro_spec(variant);
    // Mirror the suite's randomized_models(101 + 1) and random_batch(99 + 1).
    let mut models = CycleModels::new(spec.clone(), 102).unwrap();
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(102u64 ^ 0xA5A5_5A5A);
        for group in models.groups_mut() {
            for (_, t) in group.entries_mut().iter_mut() {
                let scale: f32 = rng.gen_range(0.5..3.0);
                for v in t.data_mut() { *v *= scale; }
            }
        }
    }
    let batch = random_batch::<f64>(1, 8, 100);
    let weights = LossWeights::default();
    let params = models.f64_params();

    let eval = |ps: &[(String, Tensor<f64>)]| -> f64 {
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        for (n, v) in ps { leaves.insert(n.clone(), tape.leaf(n.clone(), v).unwrap()); }
        let mut bound = BoundModels::from_leaves(&spec, &leaves).unwrap();
        let (loss, _) = local_objective(&mut tape, &mut bound, domain, &batch, &weights).unwrap();
        loss.item()
    };

    let mut tape = Tape::new();
    let mut leaves = BTreeMap::new();
    for (n, v) in &params { leaves.insert(n.clone(), tape.leaf(n.clone(), v).unwrap()); }
    let mut bound = BoundModels::from_leaves(&spec, &leaves).unwrap();
    let (loss, _) = local_objective(&mut tape, &mut bound, domain, &batch, &weights).unwrap();
    let analytic = tape.backward(&loss).unwrap();

    let mut work = params.clone();
    let mut worst = (0.0f64, String::new(), 0usize);
    for pi in 0..params.len() {
        let name = params[pi].0.clone();
        let g = &analytic[&name];
        for j in 0..params[pi].1.numel() {
            let orig = params[pi].1.data()[j];
            let a = g.data()[j];
            let mut best = f64::INFINITY;
            for h in [1e-3, 2.5e-4, 6.25e-5, 1.5625e-5] {
                work[pi].1.data_mut()[j] = orig + h;
                let plus = eval(&work);
                work[pi].1.data_mut()[j] = orig - h;
                let minus = eval(&work);
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                best = best.min(rel);
            }
            work[pi].1.data_mut()[j] = orig;
            if best > worst.0 { worst = (best, name.clone(), j); }
        }
    }
    println!("worst {:.4e} at {}[{}]", worst.0, worst.1, worst.2);
    let (_, name, j) = worst;
    let pi = params.iter().position(|(n, _)| n == &name).unwrap();
    let orig = params[pi].1.data()[j];
    let a = analytic[&name].data()[j];
    println!("analytic = {a:.9e}");
    for h in [1e-3, 2.5e-4, 6.25e-5, 1.5625e-5, 4e-6, 1e-6] {
        work[pi].1.data_mut()[j] = orig + h;
        let plus = eval(&work);
        work[pi].1.data_mut()[j] = orig - h;
        let minus = eval(&work);
        work[pi].1.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        println!("h {h:.2e}: numeric {numeric:.9e}");
    }
}
