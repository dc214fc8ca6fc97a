mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{fd_gradient, quadratic_population, rel_close, rng, uniform_vec};
use incentive_mpc::ev::{build_ev_incentive_map, EVClassConfig, EvGroupModel, EvTracking};
use incentive_mpc::incentive::{
    linear_ascent_step, linear_dual_ascent, mm_lambda_update, regularize_incentive, Incentive, Linearization, MMState,
    LAMBDA_CAP,
};
use incentive_mpc::lompc::{
    average_response, solve_member, BaseCost, ConeTag, IdentityMap, IncentiveMap, LoMPCSpec, Population,
};
use incentive_mpc::solvers::{BoxSet, SmoothTerm};

fn class(large: bool) -> EVClassConfig {
    if large {
        EVClassConfig::large()
    } else {
        EVClassConfig::small()
    }
}

#[test]
fn dual_ascent_is_exact_in_one_step_on_isotropic_quadratics() {
    let mut r = rng(5);
    for n in 1..6 {
        let m = 0.5 + n as f64;
        let center = uniform_vec(&mut r, n, -2.0, 2.0);
        let base = Arc::new(BaseCost::quadratic(m, center).unwrap());
        let bx = Arc::new(BoxSet::unbounded(n));
        let map: Arc<dyn IncentiveMap> = Arc::new(IdentityMap { dim: n, cone: ConeTag::Zero });
        let specs = (0..4)
            .map(|_| LoMPCSpec::new(base.clone(), bx.clone(), uniform_vec(&mut r, n, -1.0, 1.0), map.clone()).unwrap())
            .collect();
        let pop = Population::single_group(specs).unwrap();
        let target = uniform_vec(&mut r, n, -1.0, 1.0);
        let iters = linear_dual_ascent(&pop, 0, &target, &DVector::zeros(n), 1).unwrap();
        assert!((&iters[1].1 - &target).norm() < 1e-7, "n = {n}");
    }
}

/// `√k·‖w̄_k − ŵ‖` over 1000 iterations stays within 3× its largest value
/// over the first ten.
#[test]
fn dual_ascent_error_follows_inverse_sqrt_envelope() {
    for case in 0..20u64 {
        let n = 2 + (case as usize) % 5;
        let (pop, _) = quadratic_population(100 + case, n, 3, true);
        let mut r = rng(200 + case);
        let lambda_star = uniform_vec(&mut r, n, -3.0, 3.0);
        let target = average_response(&pop, 0, &lambda_star).unwrap().mean_w;
        let iters = linear_dual_ascent(&pop, 0, &target, &DVector::zeros(n), 1000).unwrap();
        let scaled: Vec<f64> =
            iters.iter().enumerate().skip(1).map(|(k, (_, w))| (k as f64).sqrt() * (w - &target).norm()).collect();
        let fit = scaled[..10].iter().copied().fold(0.0, f64::max);
        let worst = scaled.iter().copied().fold(0.0, f64::max);
        assert!(worst <= 3.0 * fit + 1e-9, "case {case}: max {worst:.3e} vs fitted {fit:.3e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ev_map_is_cone_convex(seed in any::<u64>(), large in any::<bool>(), alpha in 0.0f64..=1.0) {
        let c = class(large);
        let map = build_ev_incentive_map(&c, 12);
        let mut r = rng(seed);
        let w1 = uniform_vec(&mut r, 12, 0.0, c.w_max);
        let w2 = uniform_vec(&mut r, 12, 0.0, c.w_max);
        let mix = &w1 * alpha + &w2 * (1.0 - alpha);
        let gap = map.phi(&w1) * alpha + map.phi(&w2) * (1.0 - alpha) - map.phi(&mix);
        prop_assert!(map.cone().contains_primal(&gap, 1e-12));
    }

    #[test]
    fn ev_map_is_order_injective(seed in any::<u64>(), large in any::<bool>()) {
        let c = class(large);
        let map = build_ev_incentive_map(&c, 12);
        let mut r = rng(seed);
        let w1 = uniform_vec(&mut r, 12, 0.0, c.w_max);
        let mut w2 = w1.clone();
        w2[(seed % 12) as usize] += 1e-3;
        let (p1, p2) = (map.phi(&w1), map.phi(&w2));
        let both = map.cone().contains_primal(&(&p2 - &p1), 0.0) && map.cone().contains_primal(&(&p1 - &p2), 0.0);
        prop_assert!(!both);
    }

    #[test]
    fn ev_map_derivative_matches_finite_differences(seed in any::<u64>(), large in any::<bool>()) {
        let c = class(large);
        let map = build_ev_incentive_map(&c, 12);
        let mut r = rng(seed);
        let w = uniform_vec(&mut r, 12, 0.0, c.w_max);
        let lambda = uniform_vec(&mut r, 36, 0.0, 5.0);
        let fd = fd_gradient(|v| lambda.dot(&map.phi(v)), &w, 1e-6);
        prop_assert!(rel_close(&map.jacobian_t(&w, &lambda), &fd, 1e-5));
        let mut g = DVector::zeros(12);
        let v = map.pair_with_grad(&w, &lambda, &mut g);
        prop_assert!((v - lambda.dot(&map.phi(&w))).abs() <= 1e-9 * v.abs().max(1.0));
        prop_assert!(rel_close(&g, &fd, 1e-5));
    }

    #[test]
    fn tracking_gradient_matches_finite_differences(seed in any::<u64>(), large in any::<bool>(), y0 in 0.0f64..0.9) {
        let c = class(large);
        let t2 = c.capacity_kwh * c.capacity_kwh;
        let f = EvTracking { horizon: 12, quad: t2 * c.battery.c1, weight: t2 * c.delta, r0: c.y_max - y0 };
        let mut r = rng(seed);
        let w = uniform_vec(&mut r, 12, 0.0, c.w_max);
        let mut g = DVector::zeros(12);
        f.eval(&w, &mut g);
        let fd = fd_gradient(|v| f.eval(v, &mut DVector::zeros(12)), &w, 1e-6);
        prop_assert!(rel_close(&g, &fd, 1e-5));
    }

    /// `f(αx + (1−α)y) ≤ αf(x) + (1−α)f(y) − (m/2)α(1−α)‖x − y‖²` for the
    /// priced follower objective, any price in the dual cone.
    #[test]
    fn follower_objective_is_m_strongly_convex(
        seed in any::<u64>(), large in any::<bool>(), y0 in 0.1f64..0.8, alpha in 0.05f64..0.95,
    ) {
        let c = class(large);
        let spec = EvGroupModel::new(&c, 0.45, 12).unwrap().member(y0).unwrap();
        let m = spec.strong_m();
        prop_assert!((m - 2.0 * c.delta * c.capacity_kwh.powi(2)).abs() < 1e-12);
        let mut r = rng(seed);
        let lambda = uniform_vec(&mut r, 36, 0.0, 2.0);
        let x = uniform_vec(&mut r, 12, -0.5, 0.5);
        let y = uniform_vec(&mut r, 12, -0.5, 0.5);
        let f = |v: &DVector<f64>| spec.objective(&lambda, v);
        let mix = &x * alpha + &y * (1.0 - alpha);
        let secant = alpha * f(&x) + (1.0 - alpha) * f(&y) - f(&mix);
        let need = 0.5 * m * alpha * (1.0 - alpha) * (&x - &y).norm_squared();
        prop_assert!(secant >= need * (1.0 - 1e-6) - 1e-9 * f(&x).abs().max(1.0), "{secant} < {need}");
    }

    /// Responses of two members of one group differ by at most ‖Δθ‖/m.
    #[test]
    fn member_responses_are_lipschitz_in_offset(
        seed in any::<u64>(), large in any::<bool>(), y1 in 0.3f64..0.6, y2 in 0.3f64..0.6,
    ) {
        let c = class(large);
        let model = EvGroupModel::new(&c, 0.45, 12).unwrap();
        let (a, b) = (model.member(y1).unwrap(), model.member(y2).unwrap());
        let lambda = uniform_vec(&mut rng(seed), 36, 0.0, c.delta * c.capacity_kwh);
        let wa = solve_member(&a, &lambda).unwrap().w;
        let wb = solve_member(&b, &lambda).unwrap().w;
        let bound = (a.theta() - b.theta()).norm() / a.strong_m();
        prop_assert!((wa - wb).norm() <= bound + 1e-7);
    }

    /// With a separable quadratic cost, raising the energy price at step k
    /// never raises the charge at step k.
    #[test]
    fn energy_price_lowers_own_step_response(seed in any::<u64>(), k in 0usize..12, bump in 0.01f64..5.0) {
        let c = EVClassConfig::large();
        let mut r = rng(seed);
        let m = c.strong_m();
        let base = Arc::new(BaseCost::quadratic(m, uniform_vec(&mut r, 12, 0.0, 0.2)).unwrap());
        let bx = Arc::new(BoxSet::uniform(12, 0.0, c.w_max).unwrap());
        let map: Arc<dyn IncentiveMap> = Arc::new(build_ev_incentive_map(&c, 12));
        let spec = LoMPCSpec::new(base, bx, DVector::zeros(12), map).unwrap();
        let lambda = uniform_vec(&mut r, 36, 0.0, 3.0);
        let mut raised = lambda.clone();
        raised[k] += bump;
        let w0 = solve_member(&spec, &lambda).unwrap().w;
        let w1 = solve_member(&spec, &raised).unwrap().w;
        prop_assert!(w1[k] <= w0[k] + 1e-8);
    }

    /// With φ(w) = w and no cone, the majorization step tends to the dual
    /// ascent step as ε → 0.
    #[test]
    fn mm_step_reduces_to_dual_ascent(seed in any::<u64>(), n in 1usize..6) {
        let (pop, m) = quadratic_population(seed, n, 2, false);
        let mut r = rng(seed ^ 1);
        let lambda = uniform_vec(&mut r, n, -1.0, 1.0);
        let target = uniform_vec(&mut r, n, -1.0, 1.0);
        let summary = average_response(&pop, 0, &lambda).unwrap();
        let map = IdentityMap { dim: n, cone: ConeTag::Zero };
        let state = MMState::new(lambda.clone(), &summary, target.clone(), &map, m, 1e-9 * m, Linearization::PopulationMoments)
            .unwrap();
        let mm = mm_lambda_update(&state, LAMBDA_CAP).unwrap() - &lambda;
        let ascent = linear_ascent_step(&lambda, &summary.mean_w, &target, m).unwrap() - &lambda;
        prop_assert!((&mm - &ascent).norm() <= 1e-6 * ascent.norm().max(1e-12));
        prop_assert!(MMState::new(lambda, &summary, target, &map, m, 0.0, Linearization::PopulationMoments).is_err());
    }

    /// The regularized price leaves a single follower's response unchanged
    /// and does not raise ⟨λ, c⟩.
    #[test]
    fn regularized_price_keeps_response(seed in any::<u64>(), large in any::<bool>(), y0 in 0.2f64..0.7) {
        let c = class(large);
        let spec = EvGroupModel::new(&c, y0, 12).unwrap().representative().unwrap();
        let map = spec.map().clone();
        let pop = Population::single_group(vec![spec]).unwrap();
        let lambda = uniform_vec(&mut rng(seed), 36, 0.0, c.delta * c.capacity_kwh);
        let before = average_response(&pop, 0, &lambda).unwrap();
        let cost = map.phi(&before.mean_w);
        let star = Incentive::new(lambda, ConeTag::Nonneg).unwrap();
        let reg = regularize_incentive(&star, &before.gram, &cost, LAMBDA_CAP).unwrap();
        let after = average_response(&pop, 0, &reg.incentive.lambda).unwrap();
        prop_assert!((after.mean_w - &before.mean_w).norm() <= 1e-6);
        prop_assert!(reg.cost_after <= reg.cost_before + 1e-12 * reg.cost_before.abs().max(1.0));
    }
}

#[test]
fn population_rejects_overlapping_or_missing_members() {
    let (pop, _) = quadratic_population(9, 3, 4, true);
    let members = pop.members().to_vec();
    let bar = vec![10.0, 10.0];
    assert!(Population::new(members.clone(), vec![vec![0, 1], vec![1, 2, 3]], bar.clone()).is_err());
    assert!(Population::new(members.clone(), vec![vec![0, 1], vec![2]], bar.clone()).is_err());
    assert!(Population::new(members.clone(), vec![vec![0, 3], vec![2, 1]], bar).is_ok());
    // A member whose offset exceeds the group bound is refused.
    assert!(Population::new(members, vec![vec![0, 1, 2, 3]], vec![1e-6]).is_err());
}

#[test]
fn gram_of_linear_map_is_identity() {
    let (pop, _) = quadratic_population(4, 3, 2, true);
    let s = average_response(&pop, 0, &DVector::zeros(3)).unwrap();
    assert!((s.gram - DMatrix::identity(3, 3)).amax() < 1e-15);
}
