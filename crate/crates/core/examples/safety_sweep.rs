//! Runs the randomised safety suite over many seeds.
//!
//! `cargo run --release --example safety_sweep -- 200`

use std::time::Instant;

use eraswitch::suite::{check, safety_scenario, Plan};

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let t0 = Instant::now();
    let mut bad = 0;
    for plan in Plan::standard() {
        let t = Instant::now();
        for seed in 1..=seeds {
            let sc = safety_scenario(&plan, seed);
            match check(&sc) {
                Ok(r) if r.passed() => {}
                Ok(r) => {
                    bad += 1;
                    println!("{} failed\n{r}", sc.name);
                }
                Err(e) => {
                    bad += 1;
                    println!("{} error: {e}", sc.name);
                }
            }
        }
        println!("{plan}: {seeds} seeds in {:.1} s", t.elapsed().as_secs_f64());
    }
    println!("{bad} failing runs, {:.1} s", t0.elapsed().as_secs_f64());
}
