use fedcycle::verify::*;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if which == "all" || which == "decomposition" {
        let t = Instant::now();
        let r = run_decomposition_suite(100);
        print!("{}", r.render());
        println!("decomposition: {:.2?} passed={}", t.elapsed(), r.passed());
    }
    if which == "all" || which == "gradcheck" {
        let t = Instant::now();
        let r = run_gradcheck_suite(100);
        print!("{}", r.render());
        println!("gradcheck: {:.2?} passed={}", t.elapsed(), r.passed());
    }
    if which == "all" || which == "equivalence" {
        let t = Instant::now();
        let r = run_equivalence_suite(50);
        print!("{}", r.render());
        println!("equivalence: {:.2?} passed={}", t.elapsed(), r.passed());
    }
    if which == "all" || which == "codec" {
        let t = Instant::now();
        let r = run_codec_suite(1000);
        print!("{}", r.render());
        println!("codec: {:.2?} passed={}", t.elapsed(), r.passed());
    }
}
