//! Randomized checks of the follower error bound and of the guaranteed dual
//! decrease, on populations of one EV class.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ev::{group_bound, EVClassConfig, EvGroupModel};
use crate::incentive::{solve_optimal_incentive, Incentive, IncentiveOptions, AUDIT_SLACK};
use crate::lompc::{average_response, solve_member, theta_bound, Population};

/// A random price in `𝒦* = ℝ₊^{3N}`, entrywise uniform on `[0, δΘ]`.
pub fn random_price<R: Rng>(rng: &mut R, class: &EVClassConfig, horizon: usize) -> DVector<f64> {
    let hi = class.delta * class.capacity_kwh;
    DVector::from_fn(3 * horizon, |_, _| rng.random_range(0.0..=hi))
}

/// `members` EVs of one class with SoCs uniform on `[c − dy0, c + dy0]`,
/// `c = y_max/2`. The first two sit on the interval ends so the sampled
/// half-range is exactly `dy0`.
pub fn sample_group<R: Rng>(
    rng: &mut R,
    class: &EVClassConfig,
    members: usize,
    dy0: f64,
    horizon: usize,
) -> Result<Population> {
    let center = 0.5 * class.y_max;
    if members == 0 || !(0.0..=center).contains(&dy0) {
        return Err(Error::InvalidArgument(format!(
            "need members ≥ 1 and dy0 in [0, {center}], got {members} and {dy0}"
        )));
    }
    let model = EvGroupModel::new(class, center, horizon)?;
    let specs = (0..members)
        .map(|i| {
            let y0 = match i {
                0 => center - dy0,
                1 => center + dy0,
                _ if dy0 > 0.0 => rng.random_range(center - dy0..=center + dy0),
                _ => center,
            };
            model.member(y0)
        })
        .collect::<Result<Vec<_>>>()?;
    let bar = theta_bound(class.delta, class.capacity_kwh, dy0, horizon);
    Population::new(specs, vec![(0..members).collect()], vec![bar])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSample {
    pub dy0: f64,
    pub trial: usize,
    /// `‖ŵ − w̄‖` at the sampled price.
    pub error: f64,
    /// `√N·dy0`.
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub members: usize,
    pub horizon: usize,
    pub samples: Vec<BoundSample>,
    /// Tolerance added to the bound for solver inaccuracy.
    pub slack: f64,
}

impl BoundReport {
    pub fn violations(&self) -> Vec<BoundSample> {
        self.samples.iter().filter(|s| s.error > s.bound + self.slack).copied().collect()
    }

    pub fn passed(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Follower solves stop at a gradient-map norm of 1e-8; the response error
/// that leaves is far below this.
pub const BOUND_SLACK: f64 = 1e-6;

/// For each `dy0` and trial: draw a price, solve the `θ = 0` problem for ŵ,
/// average the population's responses to the same price and record the gap.
pub fn verify_error_bound(
    class: &EVClassConfig,
    members: usize,
    dy0_grid: &[f64],
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(dy0_grid.len() * trials);
    for &dy0 in dy0_grid {
        let pop = sample_group(&mut rng, class, members, dy0, horizon)?;
        let rep = EvGroupModel::new(class, 0.5 * class.y_max, horizon)?.representative()?;
        for trial in 0..trials {
            let lambda = random_price(&mut rng, class, horizon);
            let w_hat = solve_member(&rep, &lambda)?.w;
            let avg = average_response(&pop, 0, &lambda)?;
            samples.push(BoundSample {
                dy0,
                trial,
                error: (&w_hat - &avg.mean_w).norm(),
                bound: group_bound(dy0, horizon),
            });
        }
    }
    Ok(BoundReport { members, horizon, samples, slack: BOUND_SLACK })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseSample {
    pub trial: usize,
    pub iteration: usize,
    /// Increase of the shifted dual function over the step.
    pub actual: f64,
    /// The same increase predicted by the surrogate.
    pub surrogate: f64,
}

#[derive(Debug, Clone)]
pub struct DecreaseReport {
    pub members: usize,
    pub samples: Vec<DecreaseSample>,
    /// Smallest `actual − surrogate` seen.
    pub min_slack: f64,
}

impl DecreaseReport {
    pub fn violations(&self) -> Vec<DecreaseSample> {
        self.samples.iter().filter(|s| s.actual - s.surrogate < -AUDIT_SLACK).copied().collect()
    }

    pub fn passed(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Runs the incentive iteration with audits on, from λ = 0 toward the mean
/// response to a random price, for a fixed number of iterations.
///
/// Each trial draws its own SoC spread `dy0 ∈ [0.01, 0.1]`. The stopping
/// threshold is zero so every run uses all `iterations`.
pub fn verify_dual_decrease(
    class: &EVClassConfig,
    members: usize,
    trials: usize,
    iterations: usize,
    horizon: usize,
    seed: u64,
) -> Result<DecreaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = IncentiveOptions { eps_tol: 0.0, max_iter: iterations, audit: true, ..Default::default() };
    let mut samples = Vec::new();
    for trial in 0..trials {
        let dy0 = rng.random_range(0.01..=0.1);
        let pop = sample_group(&mut rng, class, members, dy0, horizon)?;
        let price = random_price(&mut rng, class, horizon);
        let target = average_response(&pop, 0, &price)?.mean_w;
        let mut warm: Vec<DVector<f64>> = pop.members().iter().map(|m| m.input_box().anchor()).collect();
        let start = Incentive::zeros(3 * horizon, pop.representative(0).map().cone());
        let out = solve_optimal_incentive(&pop, 0, &target, 0.0, &start, &opts, &mut warm)?;
        samples.extend(out.audits.iter().enumerate().map(|(k, a)| DecreaseSample {
            trial,
            iteration: k,
            actual: a.actual_decrease,
            surrogate: a.surrogate_decrease,
        }));
    }
    let min_slack = samples.iter().map(|s| s.actual - s.surrogate).fold(f64::INFINITY, f64::min);
    Ok(DecreaseReport { members, samples, min_slack })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_matches_representative() {
        let r = verify_error_bound(&EVClassConfig::large(), 5, &[0.0], 3, 12, 1).unwrap();
        assert!(r.samples.iter().all(|s| s.error <= 1e-7), "{:?}", r.samples);
    }

    #[test]
    fn small_bound_run_passes() {
        let r = verify_error_bound(&EVClassConfig::small(), 8, &[0.02, 0.08], 3, 12, 2).unwrap();
        assert!(r.passed());
        assert_eq!(r.samples.len(), 6);
        assert!((r.samples[0].bound - 12f64.sqrt() * 0.02).abs() < 1e-15);
    }

    #[test]
    fn short_decrease_run_passes() {
        let r = verify_dual_decrease(&EVClassConfig::large(), 10, 2, 5, 12, 3).unwrap();
        assert!(r.passed(), "min slack {}", r.min_slack);
        assert!(!r.samples.is_empty());
    }
}
