//! Follower error bound: random prices, population average vs the θ = 0
//! response, for a grid of SoC spreads.
//!
//! Usage: `cargo run --release --example error_bound -- [members]`

use incentive_mpc::ev::EVClassConfig;
use incentive_mpc::verify::verify_error_bound;

fn main() -> incentive_mpc::Result<()> {
    let members = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let grid: Vec<f64> = (1..=10).map(|k| 0.01 * k as f64).collect();
    let report = verify_error_bound(&EVClassConfig::large(), members, &grid, 10, 12, 7)?;

    println!("{:>6} {:>10} {:>10} {:>6}", "dy0", "max err", "bound", "ratio");
    for chunk in report.samples.chunks(10) {
        let worst = chunk.iter().map(|s| s.error).fold(0.0, f64::max);
        let b = chunk[0].bound;
        println!("{:>6.2} {:>10.4e} {:>10.4e} {:>6.3}", chunk[0].dy0, worst, b, worst / b);
    }
    println!("violations: {}", report.violations().len());
    Ok(())
}
