//! Optimal incentives computed by querying followers as black boxes.
//!
//! The leader only sees group summaries ([`ResponseSummary`]): the mean
//! response, the mean of `φ(wⁱ)` and of `Dφ(wⁱ)Dφ(wⁱ)ᵀ`, and the mean
//! optimal value. From those it runs a majorization-minimization ascent on
//! the dual function `g̃*(λ) = ḡ*(λ) − ⟨λ, φ(ŵ)⟩`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::lompc::{average_response_warm, ConeTag, IncentiveMap, Population, ResponseSummary};
use crate::solvers::{
    solve_composite_best, solve_polytope_with, BoxSet, CompositeObjective, FnSmooth, LinearTerm, PolytopeOptions,
    PolytopeProgram, ZeroProx,
};

/// Default safety cap on `‖λ‖∞`.
pub const LAMBDA_CAP: f64 = 1e6;

/// A price vector in `𝒦*` with how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Incentive {
    pub lambda: DVector<f64>,
    pub cone: ConeTag,
    pub iterations: usize,
    pub final_err: f64,
}

impl Incentive {
    pub fn new(lambda: DVector<f64>, cone: ConeTag) -> Result<Self> {
        cone.check_dual(&lambda)?;
        Ok(Self { lambda, cone, iterations: 0, final_err: f64::NAN })
    }

    pub fn zeros(q: usize, cone: ConeTag) -> Self {
        Self { lambda: DVector::zeros(q), cone, iterations: 0, final_err: f64::NAN }
    }
}

/// `λ + m(w_k − ŵ)`: one step of dual ascent for linear incentives.
pub fn linear_ascent_step(
    lambda_k: &DVector<f64>,
    w_k: &DVector<f64>,
    w_target: &DVector<f64>,
    m: f64,
) -> Result<DVector<f64>> {
    check_dim(lambda_k.len(), w_k.len())?;
    check_dim(w_k.len(), w_target.len())?;
    Ok(lambda_k + (w_k - w_target) * m)
}

/// Where the quadratic surrogate of the dual is linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linearization {
    /// Mean of `φ(wⁱ)` and of `Dφ(wⁱ)Dφ(wⁱ)ᵀ` over the group. Majorizes the
    /// group dual for any `𝒦`-convex map.
    #[default]
    PopulationMoments,
    /// `φ` and `Dφ` at the mean response. Identical to the above for linear
    /// maps or single members.
    AverageResponse,
}

/// Everything the λ-update and its audit need at iterate `k`.
#[derive(Debug, Clone)]
pub struct MMState {
    pub lambda_k: DVector<f64>,
    pub cone: ConeTag,
    /// Current group-average response.
    pub w_k: DVector<f64>,
    pub w_target: DVector<f64>,
    pub phi_target: DVector<f64>,
    /// Linearization point value (mean `φ`) and curvature (Gram matrix).
    pub lin_phi: DVector<f64>,
    pub lin_gram: DMatrix<f64>,
    /// Group dual function `ḡ*(λ_k)`.
    pub gbar_k: f64,
    pub eps: f64,
    pub m: f64,
}

impl MMState {
    pub fn new(
        lambda_k: DVector<f64>,
        summary: &ResponseSummary,
        w_target: DVector<f64>,
        map: &dyn IncentiveMap,
        m: f64,
        eps: f64,
        linearization: Linearization,
    ) -> Result<Self> {
        check_dim(map.dim_lambda(), lambda_k.len())?;
        check_dim(map.dim_w(), w_target.len())?;
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("ε must be positive, got {eps}")));
        }
        let (lin_phi, lin_gram) = match linearization {
            Linearization::PopulationMoments => (summary.mean_phi.clone(), summary.gram.clone()),
            Linearization::AverageResponse => {
                let q = map.dim_lambda();
                let mut g = DMatrix::zeros(q, q);
                map.add_gram(&summary.mean_w, 1.0, &mut g);
                (map.phi(&summary.mean_w), g)
            }
        };
        Ok(Self {
            lambda_k,
            cone: map.cone(),
            w_k: summary.mean_w.clone(),
            phi_target: map.phi(&w_target),
            w_target,
            lin_phi,
            lin_gram,
            gbar_k: summary.mean_value,
            eps,
            m,
        })
    }

    /// `g̃*(λ_k + Δ; λ_k) − g̃*(λ_k; λ_k)`, the surrogate's change.
    pub fn surrogate_change(&self, delta: &DVector<f64>) -> f64 {
        let hd = &self.lin_gram * delta;
        delta.dot(&self.lin_phi) - delta.dot(&hd) / (2.0 * self.m) - delta.dot(&self.phi_target)
    }
}

/// Minimizer over `𝒦* ∩ {‖λ‖∞ ≤ cap}` of
/// `ε‖Δ‖² + ⟨Δ, φ(ŵ) − φ̄⟩ + (1/2m) ΔᵀHΔ` with `Δ = λ − λ_k`.
pub fn mm_lambda_update(state: &MMState, cap: f64) -> Result<DVector<f64>> {
    let q = state.lambda_k.len();
    let b = &state.phi_target - &state.lin_phi;
    if b.amax() == 0.0 {
        return Ok(state.lambda_k.clone());
    }
    let h = state.lin_gram.clone();
    let (eps, m) = (state.eps, state.m);
    let lk = state.lambda_k.clone();
    let f = FnSmooth::new(q, move |lam: &DVector<f64>, g: &mut DVector<f64>| {
        let d = lam - &lk;
        let hd = &h * &d;
        g.copy_from(&(&d * (2.0 * eps) + &b + &hd / m));
        eps * d.norm_squared() + d.dot(&b) + d.dot(&hd) / (2.0 * m)
    });
    let gersh = (0..q).map(|i| state.lin_gram.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let obj = CompositeObjective::new(&f, &ZeroProx, 2.0 * eps).with_lipschitz(2.0 * eps + gersh / m);
    let bx = state.cone.dual_box(q, cap);
    let start = crate::solvers::project_box(&state.lambda_k, &bx)?;
    let tol = 1e-12 * (1.0 + state.lambda_k.amax());
    // The surrogate majorizes the dual at any λ, so a slightly inexact
    // minimizer only slows the ascent; accept it near the rounding floor.
    let (sol, converged) = solve_composite_best(&obj, &bx, &start, tol, 100_000)?;
    if !converged && sol.residual > 1e-6 * (1.0 + state.lambda_k.amax()) {
        return Err(Error::MaxIterExceeded { iterations: sol.iterations, residual: sol.residual });
    }
    Ok(sol.w)
}

/// One audit record of the guaranteed dual decrease.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAudit {
    /// `g̃*(λ_k) − g̃*(λ_{k+1})`.
    pub lhs: f64,
    /// `−g̃*(λ_{k+1}; λ_k) + g̃*(λ_k; λ_k) + ε‖λ_{k+1} − λ_k‖²`.
    pub rhs: f64,
    /// Increase of `g̃*` (decrease of the dual cost `−g̃*`).
    pub actual_decrease: f64,
    /// Same quantity for the surrogate.
    pub surrogate_decrease: f64,
    pub ok: bool,
}

pub const AUDIT_SLACK: f64 = 1e-8;

/// Checks `g̃*(λ_k) − g̃*(λ_{k+1}) ≤ −g̃*(λ_{k+1}; λ_k) + g̃*(λ_k; λ_k) + ε‖Δ‖²`.
///
/// `gbar_at` evaluates the group dual function (mean optimal value) at a λ.
pub fn dual_decrease_audit(
    state: &MMState,
    lambda_next: &DVector<f64>,
    gbar_at: impl FnOnce(&DVector<f64>) -> Result<f64>,
) -> Result<DualAudit> {
    check_dim(state.lambda_k.len(), lambda_next.len())?;
    let delta = lambda_next - &state.lambda_k;
    if delta.amax() == 0.0 {
        return Ok(DualAudit { lhs: 0.0, rhs: 0.0, actual_decrease: 0.0, surrogate_decrease: 0.0, ok: true });
    }
    let gbar_next = gbar_at(lambda_next)?;
    let tilde_k = state.gbar_k - state.lambda_k.dot(&state.phi_target);
    let tilde_next = gbar_next - lambda_next.dot(&state.phi_target);
    let surrogate = state.surrogate_change(&delta);
    let lhs = tilde_k - tilde_next;
    let rhs = -surrogate + state.eps * delta.norm_squared();
    let actual = tilde_next - tilde_k;
    Ok(DualAudit {
        lhs,
        rhs,
        actual_decrease: actual,
        surrogate_decrease: surrogate,
        ok: rhs - lhs >= -AUDIT_SLACK && actual - surrogate >= -AUDIT_SLACK,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct IncentiveOptions {
    pub eps_tol: f64,
    /// `ε = eps_scale · m`.
    pub eps_scale: f64,
    pub lambda_cap: f64,
    pub max_iter: usize,
    pub audit: bool,
    pub linearization: Linearization,
}

impl Default for IncentiveOptions {
    fn default() -> Self {
        Self {
            eps_tol: 1e-3,
            eps_scale: 0.01,
            lambda_cap: LAMBDA_CAP,
            max_iter: 500,
            audit: false,
            linearization: Linearization::PopulationMoments,
        }
    }
}

/// Result of the iterative incentive search for one group.
#[derive(Debug, Clone)]
pub struct IncentiveOutcome {
    pub incentive: Incentive,
    /// Group-average response at the returned incentive.
    pub w_final: DVector<f64>,
    pub summary: ResponseSummary,
    /// `‖ŵ − w̄‖` at every visited iterate (index 0 is the warm start).
    pub err_history: Vec<f64>,
    pub audits: Vec<DualAudit>,
    pub converged: bool,
    /// The `‖λ‖∞` cap was active at some iterate.
    pub cap_hit: bool,
}

/// Iterative method for optimal incentives on one group.
///
/// Stops once `‖ŵ − w̄‖ ≤ θ̄/m + ε_tol`. When `max_iter` runs out it returns
/// the best iterate seen with `converged = false` instead of failing.
/// `warm` holds per-member solver warm starts and is updated in place.
pub fn solve_optimal_incentive(
    pop: &Population,
    group: usize,
    w_target: &DVector<f64>,
    theta_bar_over_m: f64,
    lambda_ws: &Incentive,
    opts: &IncentiveOptions,
    warm: &mut [DVector<f64>],
) -> Result<IncentiveOutcome> {
    let rep = pop.representative(group);
    let map = rep.map().clone();
    let m = rep.strong_m();
    check_dim(map.dim_w(), w_target.len())?;
    if !rep.input_box().contains(w_target, 1e-9) {
        return Err(Error::InvalidArgument("target response lies outside the input box".into()));
    }
    let cone = map.cone();
    cone.check_dual(&lambda_ws.lambda)?;
    let eps = opts.eps_scale * m;
    let bound = theta_bar_over_m + opts.eps_tol;

    let mut lambda = lambda_ws.lambda.clone();
    let mut summary = average_response_warm(pop, group, &lambda, warm)?;
    let mut err = (w_target - &summary.mean_w).norm();
    let mut err_history = vec![err];
    let mut audits = Vec::new();
    let mut best = (err, lambda.clone(), summary.clone());
    let mut cap_hit = false;
    let mut iters = 0;

    while err > bound && iters < opts.max_iter {
        let state = MMState::new(lambda.clone(), &summary, w_target.clone(), map.as_ref(), m, eps, opts.linearization)?;
        let next = mm_lambda_update(&state, opts.lambda_cap)?;
        cap_hit |= next.amax() >= opts.lambda_cap * (1.0 - 1e-12);
        let next_summary = average_response_warm(pop, group, &next, warm)?;
        if opts.audit {
            let g = next_summary.mean_value;
            audits.push(dual_decrease_audit(&state, &next, |_| Ok(g))?);
        }
        lambda = next;
        summary = next_summary;
        err = (w_target - &summary.mean_w).norm();
        err_history.push(err);
        iters += 1;
        if err < best.0 {
            best = (err, lambda.clone(), summary.clone());
        }
    }

    let converged = err <= bound;
    let (final_err, lambda, summary) = if converged { (err, lambda, summary) } else { best };
    Ok(IncentiveOutcome {
        incentive: Incentive { lambda, cone, iterations: iters, final_err },
        w_final: summary.mean_w.clone(),
        summary,
        err_history,
        audits,
        converged,
        cap_hit,
    })
}

/// Iterates of plain dual ascent `λ ← λ + m(w̄ − ŵ)` for linear incentives.
///
/// Returns `(λ_k, w̄_k)` for `k = 0..=iters`.
pub fn linear_dual_ascent(
    pop: &Population,
    group: usize,
    w_target: &DVector<f64>,
    lambda0: &DVector<f64>,
    iters: usize,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let rep = pop.representative(group);
    let m = rep.strong_m();
    let mut warm: Vec<DVector<f64>> =
        pop.groups()[group].iter().map(|&i| pop.members()[i].input_box().anchor()).collect();
    let mut lambda = lambda0.clone();
    let mut out = Vec::with_capacity(iters + 1);
    for k in 0..=iters {
        let s = average_response_warm(pop, group, &lambda, &mut warm)?;
        if k < iters {
            let next = linear_ascent_step(&lambda, &s.mean_w, w_target, m)?;
            out.push((std::mem::replace(&mut lambda, next), s.mean_w));
        } else {
            out.push((lambda.clone(), s.mean_w));
        }
    }
    Ok(out)
}

/// Outcome of the post-hoc regularization.
#[derive(Debug, Clone)]
pub struct Regularized {
    pub incentive: Incentive,
    pub cost_before: f64,
    pub cost_after: f64,
    /// The `‖λ‖∞` cap binds at the returned point.
    pub cap_active: bool,
}

/// Minimizes `⟨λ, c⟩` over `𝒦*` among incentives that leave every group
/// member's response unchanged.
///
/// `gram` is the group's mean `Dφ(wⁱ)Dφ(wⁱ)ᵀ` at `λ*`; its range spans all
/// directions some member reacts to, so the constraint keeps `λ − λ*` in
/// its null space. Falls back to `λ*` when `c = 0` or when the program does
/// not improve on it.
pub fn regularize_incentive(
    lambda_star: &Incentive,
    gram: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda_box_cap: f64,
) -> Result<Regularized> {
    let q = lambda_star.lambda.len();
    check_dim(q, c.len())?;
    check_dim(q, gram.nrows())?;
    lambda_star.cone.check_dual(&lambda_star.lambda)?;
    let before = c.dot(&lambda_star.lambda);
    let keep = |inc: &Incentive| Regularized {
        incentive: inc.clone(),
        cost_before: before,
        cost_after: before,
        cap_active: false,
    };
    if c.amax() == 0.0 {
        return Ok(keep(lambda_star));
    }

    let eig = SymmetricEigen::new(gram.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cols: Vec<usize> = (0..q).filter(|&i| eig.eigenvalues[i] > 1e-10 * top.max(1e-300)).collect();
    let e = DMatrix::from_fn(cols.len(), q, |r, j| eig.eigenvectors[(j, cols[r])]);
    if cols.len() == q {
        return Ok(keep(lambda_star));
    }

    let scale = lambda_star.lambda.amax().max(1.0);
    let f = LinearTerm { c: c.clone() };
    let bx: BoxSet = lambda_star.cone.dual_box(q, lambda_box_cap);
    let b = &e * &lambda_star.lambda;
    let prog = PolytopeProgram::new(&f, bx.clone()).with_eq(e, b);
    let opts = PolytopeOptions {
        tol_feas: 1e-8 * scale,
        tol_opt: 1e-9 * c.amax(),
        prox_weight: c.amax() / scale,
        max_outer: 400,
        ..Default::default()
    };
    let sol = match solve_polytope_with(&prog, &opts, Some(&lambda_star.lambda)) {
        Ok(s) => s,
        // λ* itself is feasible, so a stalled solve just keeps it.
        Err(Error::MaxIterExceeded { .. }) | Err(Error::Infeasible { .. }) => return Ok(keep(lambda_star)),
        Err(e) => return Err(e),
    };
    let mut lam = sol.z;
    bx.clamp_in_place(&mut lam);
    let after = c.dot(&lam);
    if after > before {
        return Ok(keep(lambda_star));
    }
    let cap_active = lam.amax() >= lambda_box_cap * (1.0 - 1e-9);
    Ok(Regularized {
        incentive: Incentive { lambda: lam, ..lambda_star.clone() },
        cost_before: before,
        cost_after: after,
        cap_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lompc::{solve_member, BaseCost, IdentityMap, LoMPCSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn quad_pop(m: f64, a: DVector<f64>, lo: f64, hi: f64) -> Population {
        let n = a.len();
        let spec = LoMPCSpec::new(
            Arc::new(BaseCost::quadratic(m, a).unwrap()),
            Arc::new(BoxSet::uniform(n, lo, hi).unwrap()),
            DVector::zeros(n),
            Arc::new(IdentityMap { dim: n, cone: ConeTag::Zero }),
        )
        .unwrap();
        Population::single_group(vec![spec]).unwrap()
    }

    #[test]
    fn ascent_fixed_point_and_one_step_exactness() {
        let l = DVector::from_vec(vec![1.0, -2.0]);
        let w = DVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(linear_ascent_step(&l, &w, &w, 3.0).unwrap(), l);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(0.5..3.0);
            let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let target = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let pop = quad_pop(m, a.clone(), -1e9, 1e9);
            let l0 = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let traj = linear_dual_ascent(&pop, 0, &target, &l0, 1).unwrap();
            let expect = (&a - &target) * m;
            assert!((&traj[1].0 - expect).amax() < 1e-6);
            assert!((&traj[1].1 - &target).amax() < 1e-7);
        }
    }

    fn state_for(pop: &Population, lam: &DVector<f64>, target: &DVector<f64>, eps: f64) -> MMState {
        let s = crate::lompc::average_response(pop, 0, lam).unwrap();
        let rep = pop.representative(0);
        MMState::new(
            lam.clone(),
            &s,
            target.clone(),
            rep.map().as_ref(),
            rep.strong_m(),
            eps,
            Linearization::PopulationMoments,
        )
        .unwrap()
    }

    #[test]
    fn mm_update_identity_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(0.5..3.0);
            let a = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
            let target = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
            let pop = quad_pop(m, a, 0.0, 1.0);
            let lam = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let eps = 0.01 * m;
            let st = state_for(&pop, &lam, &target, eps);
            let next = mm_lambda_update(&st, LAMBDA_CAP).unwrap();
            let expect = &lam + (&st.w_k - &target) / (2.0 * eps + 1.0 / m);
            assert!((next - expect).amax() < 1e-9);
        }
    }

    #[test]
    fn mm_update_is_fixed_at_target() {
        let pop = quad_pop(2.0, DVector::from_vec(vec![0.2, 0.6]), 0.0, 1.0);
        let lam = DVector::from_vec(vec![0.1, -0.3]);
        let w = solve_member(pop.representative(0), &lam).unwrap().w;
        let st = state_for(&pop, &lam, &w, 0.02);
        let next = mm_lambda_update(&st, LAMBDA_CAP).unwrap();
        assert!((next - lam).amax() < 1e-12);
    }

    #[test]
    fn audit_on_quadratic_matches_closed_form_dual() {
        // g = (m/2)‖w − a‖² − (m/2)‖a‖² (the stored form), no box:
        // ḡ*(λ) = ⟨λ, a⟩ − ‖λ‖²/(2m) − (m/2)‖a‖².
        let m = 1.5;
        let a = DVector::from_vec(vec![0.3, -0.2, 0.8]);
        let pop = quad_pop(m, a.clone(), -1e9, 1e9);
        let target = DVector::from_vec(vec![0.0, 0.1, 0.5]);
        let lam = DVector::from_vec(vec![0.4, 0.0, -0.2]);
        let st = state_for(&pop, &lam, &target, 0.01 * m);
        let next = mm_lambda_update(&st, LAMBDA_CAP).unwrap();
        let dual = |l: &DVector<f64>| l.dot(&a) - l.norm_squared() / (2.0 * m) - 0.5 * m * a.norm_squared();
        let audit = dual_decrease_audit(&st, &next, |l| Ok(dual(l))).unwrap();
        assert!(audit.ok);
        // The surrogate is exact for this dual, so actual == surrogate.
        assert!((audit.actual_decrease - audit.surrogate_decrease).abs() < 1e-8);
        let same = dual_decrease_audit(&st, &lam, |_| unreachable!()).unwrap();
        assert_eq!((same.lhs, same.rhs, same.ok), (0.0, 0.0, true));
    }

    #[test]
    fn single_member_alg2_reaches_tolerance() {
        let pop = quad_pop(2.0, DVector::from_vec(vec![0.9, 0.1, 0.5]), 0.0, 1.0);
        let target = DVector::from_vec(vec![0.2, 0.3, 1.0]);
        let mut warm = vec![DVector::zeros(3)];
        let ws = Incentive::zeros(3, ConeTag::Zero);
        let opts = IncentiveOptions { audit: true, ..Default::default() };
        let out = solve_optimal_incentive(&pop, 0, &target, 0.0, &ws, &opts, &mut warm).unwrap();
        assert!(out.converged);
        assert!(out.incentive.final_err <= 1e-3);
        assert!(out.audits.iter().all(|a| a.ok));
        // Restarting at the optimum takes zero iterations.
        let again = solve_optimal_incentive(&pop, 0, &target, 0.0, &out.incentive, &opts, &mut warm).unwrap();
        assert_eq!(again.incentive.iterations, 0);
    }

    #[test]
    fn identity_regularization_keeps_lambda() {
        let inc = Incentive::new(DVector::from_vec(vec![0.5, -1.0]), ConeTag::Zero).unwrap();
        let gram = DMatrix::identity(2, 2);
        let r = regularize_incentive(&inc, &gram, &DVector::from_vec(vec![1.0, 1.0]), LAMBDA_CAP).unwrap();
        assert_eq!(r.incentive.lambda, inc.lambda);
        let r0 = regularize_incentive(&inc, &DMatrix::zeros(2, 2), &DVector::zeros(2), LAMBDA_CAP).unwrap();
        assert_eq!(r0.incentive.lambda, inc.lambda);
    }

    #[test]
    fn regularization_moves_only_in_null_space() {
        // Gram spans e0 + e1; null space is e0 − e1 and e2.
        let inc = Incentive::new(DVector::from_vec(vec![2.0, 1.0, 3.0]), ConeTag::Nonneg).unwrap();
        let v = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let gram = &v * v.transpose();
        let c = DVector::from_vec(vec![1.0, 2.0, 1.0]);
        let r = regularize_incentive(&inc, &gram, &c, LAMBDA_CAP).unwrap();
        // λ0 + λ1 = 3 held fixed, cheapest split puts it all on λ0; λ2 → 0.
        let l = &r.incentive.lambda;
        assert!((l[0] - 3.0).abs() < 1e-6 && l[1].abs() < 1e-6 && l[2].abs() < 1e-6, "{l}");
        assert!(r.cost_after < r.cost_before);
    }
}
