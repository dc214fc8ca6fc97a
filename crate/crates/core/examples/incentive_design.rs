//! Prices steering a group of EVs to a planned charging profile.
//!
//! cargo run --release --example incentive_design -- [members]

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use incentive_mpc::ev::EVClassConfig;
use incentive_mpc::incentive::{regularize_incentive, solve_optimal_incentive, Incentive, IncentiveOptions};
use incentive_mpc::lompc::{average_response, theta_bound, ConeTag};
use incentive_mpc::verify::{random_price, sample_group};

fn main() -> incentive_mpc::Result<()> {
    let members = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let class = EVClassConfig::large();
    let (n, dy0) = (12, 0.002);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pop = sample_group(&mut rng, &class, members, dy0, n)?;

    // A reachable plan: what the group does under some hidden price.
    let target = average_response(&pop, 0, &random_price(&mut rng, &class, n))?.mean_w;
    let radius = theta_bound(class.delta, class.capacity_kwh, dy0, n) / class.strong_m();

    let mut warm = vec![DVector::zeros(n); members];
    let opts = IncentiveOptions::default();
    let out =
        solve_optimal_incentive(&pop, 0, &target, radius, &Incentive::zeros(3 * n, ConeTag::Nonneg), &opts, &mut warm)?;
    println!(
        "iterations {}  final error {:.3e}  band {:.3e}",
        out.incentive.iterations,
        out.incentive.final_err,
        radius + opts.eps_tol
    );
    for (k, e) in out.err_history.iter().enumerate().take(10) {
        println!("  {k:>2}  {e:.4e}");
    }

    let c = pop.representative(0).map().phi(&out.w_final);
    let reg = regularize_incentive(&out.incentive, &out.summary.gram, &c, opts.lambda_cap)?;
    println!("price cost {:.6e} -> {:.6e}", reg.cost_before, reg.cost_after);
    Ok(())
}
