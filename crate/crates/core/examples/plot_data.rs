//! Short run, then every figure table the trace supports, to stdout.
//!
//! cargo run --release --example plot_data

use incentive_mpc::ev::ScenarioConfig;
use incentive_mpc::plot::{trace_series, Figure};
use incentive_mpc::sim::run;

fn main() -> incentive_mpc::Result<()> {
    let cfg = ScenarioConfig::default();
    let trace = run(&cfg, 3, cfg.seed)?;
    for fig in [Figure::Storage, Figure::Generation, Figure::AggregateConsumption, Figure::ErrorBound] {
        println!("# {fig}");
        trace_series(fig, &trace.steps)?.write_csv(std::io::stdout().lock())?;
    }
    Ok(())
}
