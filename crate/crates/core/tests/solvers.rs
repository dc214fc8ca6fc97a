mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{clamp_oracle, random_qp, rng};
use incentive_mpc::ev::KinkProx;
use incentive_mpc::solvers::{
    solve_composite, solve_polytope, solve_polytope_with, BoxSet, CompositeObjective, DenseQuadratic, DiagQuadratic,
    L1Prox, LinearTerm, PolytopeMethod, PolytopeOptions, PolytopeProgram, ProxTerm, ZeroProx,
};

fn diag_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.1f64..10.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-2.0f64..0.0, n),
            proptest::collection::vec(0.0f64..2.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn diagonal_box_qp_matches_clamp((q, b, lo, hi) in diag_case()) {
        let (q, b) = (DVector::from_vec(q), DVector::from_vec(b));
        let (lo, hi) = (DVector::from_vec(lo), DVector::from_vec(hi));
        let bx = BoxSet::new(lo.clone(), hi.clone()).unwrap();
        let f = DiagQuadratic { q: q.clone(), b: b.clone() };
        let obj = CompositeObjective::new(&f, &ZeroProx, q.min());
        let sol = solve_composite(&obj, &bx, 1e-10, 100_000).unwrap();
        let oracle = clamp_oracle(&q, &b, &lo, &hi);
        prop_assert!((&sol.w - &oracle).amax() <= 1e-6, "{} vs {}", sol.w, oracle);
    }

    /// Two problems differing by ⟨θ, w⟩ have solutions at most ‖Δθ‖/m apart.
    #[test]
    fn linear_shift_contracts_by_modulus(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let qp = random_qp(&mut r, n, 0, 0);
        let m = qp.q.clone().symmetric_eigen().eigenvalues.min();
        let bx = BoxSet::new(qp.lo.clone(), qp.hi.clone()).unwrap();
        let theta = common::uniform_vec(&mut r, n, -2.0, 2.0);
        let solve = |b: DVector<f64>| {
            let f = DenseQuadratic { q: qp.q.clone(), b };
            let obj = CompositeObjective::new(&f, &ZeroProx, m);
            solve_composite(&obj, &bx, 1e-11, 200_000).unwrap().w
        };
        let w1 = solve(qp.b.clone());
        let w2 = solve(&qp.b - &theta);
        prop_assert!((w1 - w2).norm() <= theta.norm() / m * (1.0 + 1e-6) + 1e-9);
    }

    /// The prox maps minimize `h(z) + (z − v)²/(2t)` along each coordinate.
    #[test]
    fn prox_maps_beat_grid_search(v in -3.0f64..3.0, t in 0.01f64..2.0, a in 0.0f64..3.0, knee in -1.0f64..1.0) {
        let terms: [Box<dyn ProxTerm>; 2] = [Box::new(KinkProx { a, knee }), Box::new(L1Prox { weight: a })];
        for h in &terms {
            let vv = DVector::from_element(1, v);
            let mut out = DVector::zeros(1);
            h.prox(&vv, t, &mut out);
            let val = |z: f64| h.value(&DVector::from_element(1, z)) + (z - v).powi(2) / (2.0 * t);
            let best = (0..=4000).map(|k| -5.0 + 10.0 * k as f64 / 4000.0).map(val).fold(f64::INFINITY, f64::min);
            prop_assert!(val(out[0]) <= best + 1e-9);
        }
    }
}

fn polytope_of(qp: &common::RandomQp) -> (DenseQuadratic, BoxSet) {
    (DenseQuadratic { q: qp.q.clone(), b: qp.b.clone() }, BoxSet::new(qp.lo.clone(), qp.hi.clone()).unwrap())
}

#[test]
fn polytope_qps_match_active_set_oracle() {
    let mut r = rng(17);
    for (case, method) in (0..50).zip([PolytopeMethod::Auto, PolytopeMethod::AugmentedLagrangian].iter().cycle()) {
        let n = 2 + case % 5;
        let qp = random_qp(&mut r, n, case % 3, 1 + case % 4);
        let (f, bx) = polytope_of(&qp);
        let prog =
            PolytopeProgram::new(&f, bx).with_eq(qp.a.clone(), qp.e.clone()).with_ineq(qp.c.clone(), qp.d.clone());
        let opts = PolytopeOptions { tol_feas: 1e-10, tol_opt: 1e-10, method: *method, ..Default::default() };
        let sol = solve_polytope_with(&prog, &opts, None).unwrap_or_else(|e| panic!("case {case} ({method:?}): {e}"));
        let oracle = qp.kkt_oracle();
        assert!((&sol.z - &oracle).amax() <= 1e-5, "case {case} ({method:?}): {} vs {}", sol.z, oracle);
        assert!(qp.max_violation(&sol.z) <= 1e-8, "case {case}: infeasible");
        assert!(sol.complementarity <= 1e-5, "case {case}: complementarity {}", sol.complementarity);
    }
}

#[test]
fn equality_only_qp_is_a_linear_solve() {
    // min ½‖z‖² s.t. z₀ + z₁ + z₂ = 3 → z = (1, 1, 1)
    let f = DenseQuadratic { q: DMatrix::identity(3, 3), b: DVector::zeros(3) };
    let prog = PolytopeProgram::new(&f, BoxSet::unbounded(3))
        .with_eq(DMatrix::from_element(1, 3, 1.0), DVector::from_element(1, 3.0));
    let sol = solve_polytope(&prog, 1e-10, 1e-10).unwrap();
    assert!((sol.z - DVector::from_element(3, 1.0)).amax() < 1e-8);
}

#[test]
fn linear_program_on_box_hits_a_vertex() {
    let f = LinearTerm { c: DVector::from_vec(vec![1.0, -1.0]) };
    let bx = BoxSet::uniform(2, -1.0, 2.0).unwrap();
    let prog = PolytopeProgram::new(&f, bx)
        .with_ineq(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 1.5));
    let opts = PolytopeOptions { tol_feas: 1e-10, tol_opt: 1e-10, prox_weight: 1.0, ..Default::default() };
    let sol = solve_polytope_with(&prog, &opts, None).unwrap();
    // z₁ as large as allowed: z₀ = −1, z₁ = 2 (sum 1 ≤ 1.5).
    assert!((sol.z[0] + 1.0).abs() < 1e-6 && (sol.z[1] - 2.0).abs() < 1e-6, "{}", sol.z);
}
