//! Runs the default EV scenario and prints one line per step.
//!
//! cargo run --release --example closed_loop -- [steps]

use std::time::Instant;

use incentive_mpc::ev::ScenarioConfig;
use incentive_mpc::sim::{audit_steps, Simulator};

fn main() -> incentive_mpc::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(48);
    let cfg = ScenarioConfig::default();
    let mut sim = Simulator::new(&cfg, steps, cfg.seed)?;
    let mut state = sim.initial_state();
    let mut records = Vec::new();
    println!("  t  storage  generation  demand  groups  mean_iter  max_first_err/bound  secs");
    for _ in 0..steps {
        let clock = Instant::now();
        let (next, rec) = sim.step(&state)?;
        let iters: usize = rec.groups.iter().map(|g| g.iterations).sum();
        let worst =
            rec.groups.iter().map(|g| if g.bound > 0.0 { g.first_err / g.bound } else { 0.0 }).fold(0.0, f64::max);
        println!(
            "{:>3}  {:.4}   {:.4}      {:.4}  {:>6}  {:>9.1}  {:>19.3}  {:.2}",
            rec.t,
            rec.x_real,
            rec.u_g,
            rec.demand,
            rec.groups.len(),
            iters as f64 / rec.groups.len() as f64,
            worst,
            clock.elapsed().as_secs_f64()
        );
        records.push(rec);
        state = next;
    }
    let report = audit_steps(&records, &cfg);
    println!("violations: {}", report.violations.len());
    println!("fully charged per class: {:?}", sim.full_charged());
    Ok(())
}
