//! Follower problems, incentive maps and populations.
//!
//! A follower minimizes `g(w) + ⟨λ, φ(w)⟩ + ⟨θ, w⟩` over a box. The leader
//! never sees `g`: everything outside this module interacts with followers
//! through [`solve_member`] and [`average_response`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::solvers::{solve_composite_best, BoxSet, CompositeObjective, DiagQuadratic, ProxTerm, SmoothTerm, ZeroProx};

/// Solver tolerance for follower problems (distance-to-minimizer bound).
pub const MEMBER_TOL: f64 = 1e-8;
const MEMBER_MAX_ITER: usize = 50_000;

/// The cone `𝒦` of an incentive map. Its dual `𝒦*` constrains λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeTag {
    /// `𝒦 = {0}`, `𝒦*` is the whole space.
    Zero,
    /// `𝒦 = 𝒦* = ℝ₊^q`.
    Nonneg,
    /// Zero block of length `zero_len` followed by a nonnegative block.
    Product { zero_len: usize, nonneg_len: usize },
}

impl ConeTag {
    /// True when coordinate `i` of λ is unconstrained in `𝒦*`.
    pub fn is_free(&self, i: usize) -> bool {
        match *self {
            ConeTag::Zero => true,
            ConeTag::Nonneg => false,
            ConeTag::Product { zero_len, .. } => i < zero_len,
        }
    }

    /// `Ok` when `λ ∈ 𝒦*`, otherwise the first offending coordinate.
    pub fn check_dual(&self, lambda: &DVector<f64>) -> Result<()> {
        if let ConeTag::Product { zero_len, nonneg_len } = *self {
            check_dim(zero_len + nonneg_len, lambda.len())?;
        }
        for (i, v) in lambda.iter().enumerate() {
            if !v.is_finite() || (!self.is_free(i) && *v < 0.0) {
                return Err(Error::ConeViolation { index: i, value: *v });
            }
        }
        Ok(())
    }

    /// Membership in `𝒦` itself, with slack.
    pub fn contains_primal(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.iter().enumerate().all(|(i, x)| if self.is_free(i) { x.abs() <= tol } else { *x >= -tol })
    }

    /// `𝒦* ∩ {‖λ‖∞ ≤ cap}` as a box.
    pub fn dual_box(&self, q: usize, cap: f64) -> BoxSet {
        let lower = DVector::from_fn(q, |i, _| if self.is_free(i) { -cap } else { 0.0 });
        BoxSet::new(lower, DVector::from_element(q, cap)).expect("cap is nonnegative")
    }
}

/// A `𝒦`-convex map `φ: ℝⁿ → ℝ^q` with its derivative.
pub trait IncentiveMap: Send + Sync {
    fn dim_w(&self) -> usize;
    fn dim_lambda(&self) -> usize;
    fn cone(&self) -> ConeTag;
    fn phi(&self, w: &DVector<f64>) -> DVector<f64>;
    /// `Dφ(w)`, a `q × n` matrix.
    fn jacobian(&self, w: &DVector<f64>) -> DMatrix<f64>;

    /// `Dφ(w)ᵀλ`.
    fn jacobian_t(&self, w: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        self.jacobian(w).tr_mul(lambda)
    }

    /// Returns `⟨λ, φ(w)⟩` and adds `Dφ(w)ᵀλ` into `grad`.
    fn pair_with_grad(&self, w: &DVector<f64>, lambda: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        *grad += self.jacobian_t(w, lambda);
        lambda.dot(&self.phi(w))
    }

    /// Adds `weight · Dφ(w) Dφ(w)ᵀ` into `acc`.
    fn add_gram(&self, w: &DVector<f64>, weight: f64, acc: &mut DMatrix<f64>) {
        let j = self.jacobian(w);
        acc.gemm(weight, &j, &j.transpose(), 1.0);
    }

    /// Upper bound on the curvature of `w ↦ ⟨λ, φ(w)⟩`; zero for linear maps.
    fn curvature_bound(&self, _lambda: &DVector<f64>) -> f64 {
        0.0
    }
}

/// `φ(w) = w` with a chosen cone.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap {
    pub dim: usize,
    pub cone: ConeTag,
}

impl IncentiveMap for IdentityMap {
    fn dim_w(&self) -> usize {
        self.dim
    }

    fn dim_lambda(&self) -> usize {
        self.dim
    }

    fn cone(&self) -> ConeTag {
        self.cone
    }

    fn phi(&self, w: &DVector<f64>) -> DVector<f64> {
        w.clone()
    }

    fn jacobian(&self, _w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn jacobian_t(&self, _w: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        lambda.clone()
    }

    fn pair_with_grad(&self, w: &DVector<f64>, lambda: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        *grad += lambda;
        lambda.dot(w)
    }

    fn add_gram(&self, _w: &DVector<f64>, weight: f64, acc: &mut DMatrix<f64>) {
        for i in 0..self.dim {
            acc[(i, i)] += weight;
        }
    }
}

/// The private cost `g = smooth + prox` of a follower, with modulus `m`.
pub struct BaseCost {
    smooth: Box<dyn SmoothTerm>,
    prox: Box<dyn ProxTerm>,
    m: f64,
    lipschitz: Option<f64>,
}

impl BaseCost {
    pub fn new(smooth: impl SmoothTerm + 'static, prox: impl ProxTerm + 'static, m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::InvalidArgument(format!("strong modulus must be positive, got {m}")));
        }
        Ok(Self { smooth: Box::new(smooth), prox: Box::new(prox), m, lipschitz: None })
    }

    /// `(m/2)‖w − a‖²`.
    pub fn quadratic(m: f64, center: DVector<f64>) -> Result<Self> {
        let n = center.len();
        let q = DiagQuadratic { q: DVector::from_element(n, m), b: center * m };
        Ok(Self::new(q, ZeroProx, m)?.with_lipschitz(m))
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    pub fn dim(&self) -> usize {
        self.smooth.dim()
    }

    pub fn strong_m(&self) -> f64 {
        self.m
    }
}

/// One follower: shared base cost, box and map, plus its own offset θ.
#[derive(Clone)]
pub struct LoMPCSpec {
    base: Arc<BaseCost>,
    input_box: Arc<BoxSet>,
    theta: DVector<f64>,
    map: Arc<dyn IncentiveMap>,
}

impl LoMPCSpec {
    pub fn new(
        base: Arc<BaseCost>,
        input_box: Arc<BoxSet>,
        theta: DVector<f64>,
        map: Arc<dyn IncentiveMap>,
    ) -> Result<Self> {
        let n = base.dim();
        check_dim(n, input_box.dim())?;
        check_dim(n, theta.len())?;
        check_dim(n, map.dim_w())?;
        Ok(Self { base, input_box, theta, map })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn strong_m(&self) -> f64 {
        self.base.m
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn input_box(&self) -> &BoxSet {
        &self.input_box
    }

    pub fn map(&self) -> &Arc<dyn IncentiveMap> {
        &self.map
    }

    /// Same base cost, box and map (only θ may differ).
    pub fn shares_structure(&self, other: &LoMPCSpec) -> bool {
        Arc::ptr_eq(&self.base, &other.base)
            && (Arc::ptr_eq(&self.input_box, &other.input_box) || self.input_box == other.input_box)
            && Arc::ptr_eq(&self.map, &other.map)
    }

    /// Copy of this spec with a different offset.
    pub fn with_theta(&self, theta: DVector<f64>) -> Result<Self> {
        Self::new(self.base.clone(), self.input_box.clone(), theta, self.map.clone())
    }

    /// Incentivized objective `g(w) + ⟨λ, φ(w)⟩ + ⟨θ, w⟩`.
    pub fn objective(&self, lambda: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let mut g = DVector::zeros(w.len());
        Incentivized { spec: self, lambda }.eval(w, &mut g) + self.base.prox.value(w)
    }
}

struct Incentivized<'a> {
    spec: &'a LoMPCSpec,
    lambda: &'a DVector<f64>,
}

impl SmoothTerm for Incentivized<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let mut v = self.spec.base.smooth.eval(w, grad);
        v += self.spec.map.pair_with_grad(w, self.lambda, grad);
        *grad += &self.spec.theta;
        v + self.spec.theta.dot(w)
    }
}

/// A follower's answer to one query.
#[derive(Debug, Clone)]
pub struct MemberResponse {
    pub w: DVector<f64>,
    /// Optimal incentivized objective value.
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Optimal response of one follower to λ.
pub fn solve_member(spec: &LoMPCSpec, lambda: &DVector<f64>) -> Result<MemberResponse> {
    solve_member_from(spec, lambda, &spec.input_box.anchor())
}

/// [`solve_member`] with a warm start.
pub fn solve_member_from(spec: &LoMPCSpec, lambda: &DVector<f64>, w0: &DVector<f64>) -> Result<MemberResponse> {
    check_dim(spec.map.dim_lambda(), lambda.len())?;
    spec.map.cone().check_dual(lambda)?;
    let smooth = Incentivized { spec, lambda };
    let mut obj = CompositeObjective::new(&smooth, spec.base.prox.as_ref(), spec.base.m);
    if let Some(l) = spec.base.lipschitz {
        obj = obj.with_lipschitz(l + spec.map.curvature_bound(lambda));
    }
    let (sol, converged) = solve_composite_best(&obj, &spec.input_box, w0, MEMBER_TOL, MEMBER_MAX_ITER)?;
    if !converged {
        return Err(Error::MaxIterExceeded { iterations: sol.iterations, residual: sol.residual });
    }
    Ok(MemberResponse { w: sol.w, value: sol.objective, residual: sol.residual, iterations: sol.iterations })
}

/// Offset `θⁱ = 2δΘ²(y_center − y_member)𝟙` of a member relative to its
/// group centre.
pub fn build_parametric_theta(
    y0_member: f64,
    y0_center: f64,
    delta: f64,
    capacity: f64,
    horizon: usize,
) -> DVector<f64> {
    DVector::from_element(horizon, 2.0 * delta * capacity * capacity * (y0_center - y0_member))
}

/// Population bound `θ̄ = 2δΘ²Δy₀√N`.
pub fn theta_bound(delta: f64, capacity: f64, dy0: f64, horizon: usize) -> f64 {
    2.0 * delta * capacity * capacity * dy0 * (horizon as f64).sqrt()
}

/// Followers partitioned into groups that share one incentive each.
#[derive(Clone)]
pub struct Population {
    members: Vec<LoMPCSpec>,
    groups: Vec<Vec<usize>>,
    theta_bar: Vec<f64>,
}

impl Population {
    pub fn new(members: Vec<LoMPCSpec>, groups: Vec<Vec<usize>>, theta_bar: Vec<f64>) -> Result<Self> {
        check_dim(groups.len(), theta_bar.len())?;
        let mut seen = vec![false; members.len()];
        for (g, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("group {g} is empty")));
            }
            let first = members
                .get(idx[0])
                .ok_or_else(|| Error::InvalidArgument(format!("group {g} references member {}", idx[0])))?;
            for &i in idx {
                let Some(spec) = members.get(i) else {
                    return Err(Error::InvalidArgument(format!("group {g} references member {i}")));
                };
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("member {i} is in two groups")));
                }
                if !spec.shares_structure(first) {
                    return Err(Error::InvalidArgument(format!(
                        "member {i} differs from group {g} in more than its offset"
                    )));
                }
                let tn = spec.theta.norm();
                if tn > theta_bar[g] * (1.0 + 1e-9) + 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "member {i}: ‖θ‖ = {tn:.6e} exceeds group bound {:.6e}",
                        theta_bar[g]
                    )));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("member {i} belongs to no group")));
        }
        Ok(Self { members, groups, theta_bar })
    }

    /// All members in one group, with the bound taken from their offsets.
    pub fn single_group(members: Vec<LoMPCSpec>) -> Result<Self> {
        let bar = members.iter().map(|m| m.theta.norm()).fold(0.0, f64::max);
        let idx = (0..members.len()).collect();
        Self::new(members, vec![idx], vec![bar])
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[LoMPCSpec] {
        &self.members
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn theta_bar(&self, group: usize) -> f64 {
        self.theta_bar[group]
    }

    /// `θ̄/m` for a group.
    pub fn radius(&self, group: usize) -> f64 {
        self.theta_bar[group] / self.members[self.groups[group][0]].strong_m()
    }

    /// Representative spec of a group (its first member).
    pub fn representative(&self, group: usize) -> &LoMPCSpec {
        &self.members[self.groups[group][0]]
    }
}

/// Aggregated answer of a group, all the leader gets to see.
#[derive(Debug, Clone)]
pub struct ResponseSummary {
    pub mean_w: DVector<f64>,
    /// Mean of `φ(wⁱ)`.
    pub mean_phi: DVector<f64>,
    /// Mean of `Dφ(wⁱ) Dφ(wⁱ)ᵀ`.
    pub gram: DMatrix<f64>,
    /// Mean optimal value, i.e. the group's dual function at λ.
    pub mean_value: f64,
    pub count: usize,
    pub max_residual: f64,
    pub member_iterations: usize,
}

/// Group-average response at λ, solved from the anchor of each box.
pub fn average_response(pop: &Population, group: usize, lambda: &DVector<f64>) -> Result<ResponseSummary> {
    let idx = pop
        .groups
        .get(group)
        .ok_or_else(|| Error::InvalidArgument(format!("group {group} out of range ({})", pop.groups.len())))?;
    let mut warm: Vec<DVector<f64>> = idx.iter().map(|&i| pop.members[i].input_box.anchor()).collect();
    average_response_warm(pop, group, lambda, &mut warm)
}

/// Group-average response with per-member warm starts, updated in place.
///
/// Members are solved in parallel; the reduction runs in member order so the
/// result does not depend on the thread count.
pub fn average_response_warm(
    pop: &Population,
    group: usize,
    lambda: &DVector<f64>,
    warm: &mut [DVector<f64>],
) -> Result<ResponseSummary> {
    let idx = pop
        .groups
        .get(group)
        .ok_or_else(|| Error::InvalidArgument(format!("group {group} out of range ({})", pop.groups.len())))?;
    check_dim(idx.len(), warm.len())?;
    let rep = &pop.members[idx[0]];
    rep.map.cone().check_dual(lambda)?;

    let responses: Vec<Result<MemberResponse>> =
        idx.par_iter().zip(warm.par_iter()).map(|(&i, w0)| solve_member_from(&pop.members[i], lambda, w0)).collect();

    let n = rep.dim();
    let q = rep.map.dim_lambda();
    let count = idx.len();
    let inv = 1.0 / count as f64;
    let mut mean_w = DVector::zeros(n);
    let mut mean_phi = DVector::zeros(q);
    let mut gram = DMatrix::zeros(q, q);
    let mut mean_value = 0.0;
    let mut max_residual: f64 = 0.0;
    let mut member_iterations = 0;
    for (slot, r) in warm.iter_mut().zip(responses) {
        let r = r?;
        mean_w.axpy(inv, &r.w, 1.0);
        mean_phi.axpy(inv, &rep.map.phi(&r.w), 1.0);
        rep.map.add_gram(&r.w, inv, &mut gram);
        mean_value += inv * r.value;
        max_residual = max_residual.max(r.residual);
        member_iterations += r.iterations;
        *slot = r.w;
    }
    Ok(ResponseSummary { mean_w, mean_phi, gram, mean_value, count, max_residual, member_iterations })
}
