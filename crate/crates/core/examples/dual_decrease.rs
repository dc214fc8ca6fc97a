//! Audited incentive iteration: the actual dual increase at each step against
//! the increase promised by the surrogate.
//!
//! Usage: `cargo run --release --example dual_decrease -- [members] [trials]`

use incentive_mpc::ev::EVClassConfig;
use incentive_mpc::verify::verify_dual_decrease;

fn main() -> incentive_mpc::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let members = args.next().flatten().unwrap_or(200);
    let trials = args.next().flatten().unwrap_or(5);
    let report = verify_dual_decrease(&EVClassConfig::large(), members, trials, 30, 12, 11)?;

    for s in report.samples.iter().filter(|s| s.trial == 0) {
        println!("iter {:>3}  actual {:>12.5e}  surrogate {:>12.5e}", s.iteration, s.actual, s.surrogate);
    }
    println!("samples: {}  min(actual - surrogate): {:.3e}", report.samples.len(), report.min_slack);
    println!("violations: {}", report.violations().len());
    Ok(())
}
