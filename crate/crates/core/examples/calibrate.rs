//! Prints seed-averaged summaries for the four compared strategies and a V grid.
//!
//! `cargo run --release --example calibrate -- sinr_target_db=16 queue_unit_bytes=50`

use proharq::metrics::{aggregate, summarize};
use proharq::scenario::{load_scenario_with_overrides, parse_override, StrategySpec};
use proharq::run_many;

fn main() {
    let overrides: Vec<(String, String)> =
        std::env::args().skip(1).map(|a| parse_override(&a).expect("key=value")).collect();
    let base = load_scenario_with_overrides("", &overrides).expect("valid overrides");
    let seeds = 1..=5u64;
    let strategies = [
        StrategySpec::Reactive,
        StrategySpec::Fixed(vec![2, 2, 2, 2, 2]),
        StrategySpec::Fixed(vec![3, 3, 3, 1]),
        StrategySpec::Adaptive,
    ];
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!("{:<18} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "strategy", "eff", "mean", "p90", "p95", "loss", "f_obj", "queue", "zbar", "z");
    for spec in &strategies {
        let runs: Vec<_> = seeds.clone().map(|s| base.with_strategy(spec.clone()).with_seed(s)).collect();
        let rows: Vec<_> = run_many(&runs, threads).into_iter().map(|r| summarize(&r.unwrap())).collect();
        let (m, _) = aggregate(&rows).unwrap();
        println!(
            "{:<18} {:>6.3} {:>7.3} {:>7.3} {:>7.3} {:>7.4} {:>7.3} {:>7.3} {:>7.4} {:>7.2}",
            spec.to_string(), m.resource_efficiency, m.mean_latency_ms, m.p90_latency_ms, m.p95_latency_ms,
            m.app_loss, m.f_obj, m.mean_queue_tb, m.zeta_bar, m.z_final
        );
        for r in &rows {
            println!("   seed {:>3} eff {:.3} p90 {:.3} mean {:.3} loss {:.4}", r.seed, r.resource_efficiency, r.p90_latency_ms, r.mean_latency_ms, r.app_loss);
        }
    }
    println!("V sweep");
    for v in (0..=120).step_by(10) {
        let runs: Vec<_> = seeds.clone().map(|s| base.with_strategy(StrategySpec::Adaptive).with_v(v as f64).with_seed(s)).collect();
        let rows: Vec<_> = run_many(&runs, threads).into_iter().map(|r| summarize(&r.unwrap())).collect();
        let (m, _) = aggregate(&rows).unwrap();
        println!("V={v:>4} f_obj {:.4} eff {:.3} queue {:.4} mean {:.3} zbar {:.4} z {:.2}", m.f_obj, m.resource_efficiency, m.mean_queue_tb, m.mean_latency_ms, m.zeta_bar, m.z_final);
    }
}
