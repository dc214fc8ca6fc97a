//! Accelerated proximal gradient for `f(w) + h(w)` over a box.
//!
//! `f` is smooth convex, `h` is closed convex with a cheap proximal map. The
//! method is FISTA with backtracking on the Lipschitz estimate, a
//! function-value restart that keeps the composite objective monotone, and a
//! step-size probe that lets the estimate shrink again after a spike.

use nalgebra::{DMatrix, DVector};

use super::boxset::BoxSet;
use crate::error::{check_dim, Error, Result};

/// Smooth convex term. `eval` writes the gradient and returns the value.
pub trait SmoothTerm: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64;

    /// Writes the Hessian at `w` into `hess` and returns `true`, or returns
    /// `false` when it is not available. Second-order solvers need it.
    fn hessian(&self, _w: &DVector<f64>, _hess: &mut DMatrix<f64>) -> bool {
        false
    }
}

/// Closed convex term handled through its proximal map.
pub trait ProxTerm: Send + Sync {
    fn value(&self, w: &DVector<f64>) -> f64;

    /// Writes `argmin_z h(z) + ‖z − v‖²/(2t)` into `out`.
    fn prox(&self, v: &DVector<f64>, t: f64, out: &mut DVector<f64>);

    /// Proximal map of `h` plus the box indicator. The default clamps the
    /// unconstrained prox, which is exact when `h` is separable.
    fn prox_boxed(&self, v: &DVector<f64>, t: f64, bx: &BoxSet, out: &mut DVector<f64>) {
        self.prox(v, t, out);
        bx.clamp_in_place(out);
    }
}

/// `h ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroProx;

impl ProxTerm for ZeroProx {
    fn value(&self, _w: &DVector<f64>) -> f64 {
        0.0
    }

    fn prox(&self, v: &DVector<f64>, _t: f64, out: &mut DVector<f64>) {
        out.copy_from(v);
    }
}

/// `h(w) = weight · ‖w‖₁`.
#[derive(Debug, Clone, Copy)]
pub struct L1Prox {
    pub weight: f64,
}

impl ProxTerm for L1Prox {
    fn value(&self, w: &DVector<f64>) -> f64 {
        self.weight * w.lp_norm(1)
    }

    fn prox(&self, v: &DVector<f64>, t: f64, out: &mut DVector<f64>) {
        let k = self.weight * t;
        for i in 0..v.len() {
            let x = v[i];
            out[i] = x.signum() * (x.abs() - k).max(0.0);
        }
    }
}

/// Any closure `w -> (value, gradient)` as a [`SmoothTerm`].
pub struct FnSmooth<F> {
    dim: usize,
    f: F,
}

impl<F> FnSmooth<F>
where
    F: Fn(&DVector<f64>, &mut DVector<f64>) -> f64 + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> SmoothTerm for FnSmooth<F>
where
    F: Fn(&DVector<f64>, &mut DVector<f64>) -> f64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        (self.f)(w, grad)
    }
}

/// `½ wᵀ diag(q) w − bᵀw` with `q >= 0`.
#[derive(Debug, Clone)]
pub struct DiagQuadratic {
    pub q: DVector<f64>,
    pub b: DVector<f64>,
}

impl SmoothTerm for DiagQuadratic {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let mut v = 0.0;
        for i in 0..w.len() {
            grad[i] = self.q[i] * w[i] - self.b[i];
            v += 0.5 * self.q[i] * w[i] * w[i] - self.b[i] * w[i];
        }
        v
    }

    fn hessian(&self, _w: &DVector<f64>, hess: &mut DMatrix<f64>) -> bool {
        hess.fill(0.0);
        hess.set_diagonal(&self.q);
        true
    }
}

/// `½ wᵀQw − bᵀw` with `Q` symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct DenseQuadratic {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl SmoothTerm for DenseQuadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        grad.gemv(1.0, &self.q, w, 0.0);
        let v = 0.5 * w.dot(grad) - self.b.dot(w);
        *grad -= &self.b;
        v
    }

    fn hessian(&self, _w: &DVector<f64>, hess: &mut DMatrix<f64>) -> bool {
        hess.copy_from(&self.q);
        true
    }
}

/// `cᵀw`.
#[derive(Debug, Clone)]
pub struct LinearTerm {
    pub c: DVector<f64>,
}

impl SmoothTerm for LinearTerm {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        grad.copy_from(&self.c);
        self.c.dot(w)
    }

    fn hessian(&self, _w: &DVector<f64>, hess: &mut DMatrix<f64>) -> bool {
        hess.fill(0.0);
        true
    }
}

/// `smooth + prox` with a strong-convexity modulus of the sum.
#[derive(Clone, Copy)]
pub struct CompositeObjective<'a> {
    pub smooth: &'a dyn SmoothTerm,
    pub prox: &'a dyn ProxTerm,
    pub strong_convexity_m: f64,
    /// Initial Lipschitz estimate for the smooth gradient. `None` triggers a
    /// short power iteration on gradient differences.
    pub lipschitz_hint: Option<f64>,
}

impl<'a> CompositeObjective<'a> {
    pub fn new(smooth: &'a dyn SmoothTerm, prox: &'a dyn ProxTerm, m: f64) -> Self {
        Self { smooth, prox, strong_convexity_m: m, lipschitz_hint: None }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz_hint = Some(l);
        self
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        let mut g = DVector::zeros(w.len());
        self.smooth.eval(w, &mut g) + self.prox.value(w)
    }
}

#[derive(Debug, Clone)]
pub struct CompositeSolution {
    pub w: DVector<f64>,
    /// Distance-to-minimizer bound `‖G(w)‖ / m`, with `G` the gradient map.
    pub residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

/// Low-level controls for the accelerated loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ApgOptions {
    /// Stop when the gradient-map norm falls below this.
    pub gradmap_tol: f64,
    pub max_iter: usize,
    pub lipschitz0: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ApgOutcome {
    pub w: DVector<f64>,
    pub gradmap_norm: f64,
    pub iterations: usize,
    pub objective: f64,
    pub lipschitz: f64,
    pub converged: bool,
    /// Objective after each accepted iteration (test builds only).
    #[cfg(test)]
    pub history: Vec<f64>,
}

/// Power iteration on finite gradient differences around `w0`.
pub(crate) fn estimate_lipschitz(smooth: &dyn SmoothTerm, w0: &DVector<f64>) -> f64 {
    let n = w0.len();
    if n == 0 {
        return 1.0;
    }
    let mut g0 = DVector::zeros(n);
    let mut g1 = DVector::zeros(n);
    smooth.eval(w0, &mut g0);
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    v /= v.norm();
    let h = 1e-4 * (1.0 + w0.norm());
    let mut est: f64 = 0.0;
    for _ in 0..12 {
        let probe = w0 + &v * h;
        smooth.eval(&probe, &mut g1);
        let mut d = (&g1 - &g0) / h;
        let nd = d.norm();
        if !nd.is_finite() || nd == 0.0 {
            break;
        }
        est = est.max(nd);
        d /= nd;
        v = d;
    }
    if est.is_finite() && est > 0.0 {
        est
    } else {
        1.0
    }
}

pub(crate) fn accelerated_prox_gradient(
    smooth: &dyn SmoothTerm,
    prox: &dyn ProxTerm,
    bx: &BoxSet,
    w0: &DVector<f64>,
    opts: ApgOptions,
) -> Result<ApgOutcome> {
    let n = w0.len();
    let mut lip = opts.lipschitz0.max(1e-12);
    let mut x = DVector::zeros(n);
    prox.prox_boxed(w0, 1e-300, bx, &mut x);
    bx.clamp_in_place(&mut x);

    let mut gx = DVector::zeros(n);
    let fx0 = smooth.eval(&x, &mut gx);
    if !fx0.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut fx_total = fx0 + prox.value(&x);

    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut fy = fx0;
    let mut t_k = 1.0f64;
    let mut x_new = DVector::zeros(n);
    let mut g_new = DVector::zeros(n);
    let mut step_pt = DVector::zeros(n);
    let mut gm_norm = f64::INFINITY;
    #[cfg(test)]
    let mut history = vec![fx_total];

    for it in 1..=opts.max_iter {
        // Backtracking from the extrapolated point y.
        let mut f_new;
        loop {
            step_pt.copy_from(&y);
            step_pt.axpy(-1.0 / lip, &gy, 1.0);
            prox.prox_boxed(&step_pt, 1.0 / lip, bx, &mut x_new);
            f_new = smooth.eval(&x_new, &mut g_new);
            if !f_new.is_finite() {
                if lip > 1e300 {
                    return Err(Error::NonFiniteObjective { iteration: it });
                }
                lip *= 2.0;
                continue;
            }
            let d = &x_new - &y;
            let dd = d.norm_squared();
            let model = fy + gy.dot(&d) + 0.5 * lip * dd;
            // Near the optimum the value test drowns in rounding; the
            // gradient-difference test keeps lip from shrinking below the
            // local curvature.
            let curv = (&g_new - &gy).dot(&d);
            if f_new <= model + 1e-12 * (1.0 + fy.abs()) && curv <= lip * dd {
                break;
            }
            lip *= 2.0;
            if lip > 1e300 {
                return Err(Error::NonFiniteObjective { iteration: it });
            }
        }

        let total_new = f_new + prox.value(&x_new);
        if total_new > fx_total + 1e-13 * (1.0 + fx_total.abs()) {
            // Function-value restart: drop momentum and retry from x.
            if y != x {
                y.copy_from(&x);
                gy.copy_from(&gx);
                fy = fx_total - prox.value(&x);
                t_k = 1.0;
                continue;
            }
        }

        // Gradient map at y; it vanishes exactly at the minimizer.
        gm_norm = (&y - &x_new).norm() * lip;

        // Gradient restart: momentum pointing uphill is dropped.
        if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            t_k = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let beta = (t_k - 1.0) / t_next;
        // A plain prox-gradient step (no momentum) descends up to rounding.
        let accept = y == x || total_new <= fx_total + 1e-13 * (1.0 + fx_total.abs());
        let prev_x = x.clone();
        if accept {
            x.copy_from(&x_new);
            gx.copy_from(&g_new);
            fx_total = total_new;
        }
        #[cfg(test)]
        history.push(fx_total);

        if gm_norm <= opts.gradmap_tol {
            // Confirm at the returned point, not only at the extrapolation.
            let gx_norm = gradient_map_norm(smooth, prox, bx, &x, lip);
            if gx_norm > opts.gradmap_tol {
                y.copy_from(&x);
                gy.copy_from(&gx);
                fy = fx_total - prox.value(&x);
                t_k = 1.0;
                continue;
            }
            return Ok(ApgOutcome {
                w: x,
                gradmap_norm: gx_norm,
                iterations: it,
                objective: fx_total,
                lipschitz: lip,
                converged: true,
                #[cfg(test)]
                history,
            });
        }

        // y = x + beta (x − x_prev)
        y.copy_from(&x);
        y.axpy(beta, &x, 1.0);
        y.axpy(-beta, &prev_x, 1.0);
        fy = smooth.eval(&y, &mut gy);
        if !fy.is_finite() {
            y.copy_from(&x);
            fy = smooth.eval(&y, &mut gy);
            t_k = 1.0;
        } else {
            t_k = t_next;
        }
        // Let the estimate relax so one bad region does not freeze small steps.
        lip *= 0.95;
    }

    Ok(ApgOutcome {
        w: x,
        gradmap_norm: gm_norm,
        iterations: opts.max_iter,
        objective: fx_total,
        lipschitz: lip,
        converged: false,
        #[cfg(test)]
        history,
    })
}

/// Gradient-map norm `‖w − prox(w − ∇f(w)/L)‖·L` evaluated at `w`.
pub(crate) fn gradient_map_norm(
    smooth: &dyn SmoothTerm,
    prox: &dyn ProxTerm,
    bx: &BoxSet,
    w: &DVector<f64>,
    lip: f64,
) -> f64 {
    let mut g = DVector::zeros(w.len());
    smooth.eval(w, &mut g);
    let step = w - &g / lip;
    let mut out = DVector::zeros(w.len());
    prox.prox_boxed(&step, 1.0 / lip, bx, &mut out);
    (w - out).norm() * lip
}

/// Minimizes a strongly convex composite objective over `bx`, starting from
/// the box point nearest the origin.
pub fn solve_composite(
    obj: &CompositeObjective<'_>,
    bx: &BoxSet,
    tol: f64,
    max_iter: usize,
) -> Result<CompositeSolution> {
    let w0 = bx.anchor();
    solve_composite_from(obj, bx, &w0, tol, max_iter)
}

/// Same as [`solve_composite`] with an explicit warm start.
///
/// On `MaxIterExceeded` the best iterate is lost to the error; callers that
/// need it use [`solve_composite_best`].
pub fn solve_composite_from(
    obj: &CompositeObjective<'_>,
    bx: &BoxSet,
    w0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<CompositeSolution> {
    let (sol, converged) = solve_composite_best(obj, bx, w0, tol, max_iter)?;
    if converged {
        Ok(sol)
    } else {
        Err(Error::MaxIterExceeded { iterations: sol.iterations, residual: sol.residual })
    }
}

/// Runs the solver and returns the best iterate with a convergence flag.
pub fn solve_composite_best(
    obj: &CompositeObjective<'_>,
    bx: &BoxSet,
    w0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(CompositeSolution, bool)> {
    check_dim(obj.smooth.dim(), bx.dim())?;
    check_dim(bx.dim(), w0.len())?;
    let m = obj.strong_convexity_m;
    if !(m > 0.0) {
        return Err(Error::InvalidArgument(format!("strong convexity modulus must be positive, got {m}")));
    }
    let lip0 = obj.lipschitz_hint.unwrap_or_else(|| estimate_lipschitz(obj.smooth, &bx.anchor())).max(m);
    let out = accelerated_prox_gradient(
        obj.smooth,
        obj.prox,
        bx,
        w0,
        ApgOptions { gradmap_tol: tol * m, max_iter, lipschitz0: lip0 },
    )?;
    let sol = CompositeSolution {
        residual: out.gradmap_norm / m,
        iterations: out.iterations,
        objective: out.objective,
        w: out.w,
    };
    Ok((sol, out.converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn squared_norm_on_unit_box_hits_origin() {
        let n = 5;
        let q = DiagQuadratic { q: DVector::from_element(n, 2.0), b: DVector::zeros(n) };
        let obj = CompositeObjective::new(&q, &ZeroProx, 2.0);
        let bx = BoxSet::uniform(n, 0.0, 1.0).unwrap();
        let sol = solve_composite_from(&obj, &bx, &DVector::from_element(n, 0.9), 1e-10, 1000).unwrap();
        assert!(sol.w.norm() < 1e-9);
    }

    #[test]
    fn unconstrained_weighted_quadratic_returns_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..8);
            let a = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let q = DVector::from_fn(n, |_, _| rng.random_range(0.5..4.0));
            // (w−a)ᵀdiag(q)(w−a) = ½ wᵀ diag(2q) w − (2 q⊙a)ᵀ w + const
            let f = DiagQuadratic { q: &q * 2.0, b: q.component_mul(&a) * 2.0 };
            let m = 2.0 * q.min();
            let obj = CompositeObjective::new(&f, &ZeroProx, m);
            let sol = solve_composite(&obj, &BoxSet::unbounded(n), 1e-10, 5000).unwrap();
            assert!((sol.w - &a).amax() < 1e-8);
        }
    }

    /// 1-D oracle for `(w − c)² + k|w|` on `[lo, hi]`: soft-threshold then clip.
    fn soft_clip_oracle(c: f64, k: f64, lo: f64, hi: f64) -> f64 {
        let st = c.signum() * (c.abs() - k / 2.0).max(0.0);
        st.clamp(lo, hi)
    }

    #[test]
    fn soft_threshold_then_clip() {
        assert!((soft_clip_oracle(0.8, 1.0, 0.0, 1.0) - 0.3).abs() < 1e-15);
        let f = DiagQuadratic { q: dv(&[2.0]), b: dv(&[1.6]) };
        let l1 = L1Prox { weight: 1.0 };
        let obj = CompositeObjective::new(&f, &l1, 2.0);
        let bx = BoxSet::uniform(1, 0.0, 1.0).unwrap();
        let sol = solve_composite(&obj, &bx, 1e-12, 1000).unwrap();
        assert!((sol.w[0] - 0.3).abs() < 1e-10, "{}", sol.w[0]);
    }

    #[test]
    fn composite_objective_is_monotone_across_restarts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.random_range(2..10);
            let q = DVector::from_fn(n, |_, _| rng.random_range(0.01..50.0));
            let b = DVector::from_fn(n, |_, _| rng.random_range(-20.0..20.0));
            let f = DiagQuadratic { q: q.clone(), b };
            let l1 = L1Prox { weight: rng.random_range(0.0..3.0) };
            let bx = BoxSet::uniform(n, -1.0, 1.0).unwrap();
            let w0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let out = accelerated_prox_gradient(
                &f,
                &l1,
                &bx,
                &w0,
                ApgOptions { gradmap_tol: 1e-12, max_iter: 3000, lipschitz0: 1.0 },
            )
            .unwrap();
            for pair in out.history.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12 * (1.0 + pair[0].abs()));
            }
        }
    }

    #[test]
    fn non_finite_callback_is_reported() {
        let bad = FnSmooth::new(2, |_w: &DVector<f64>, g: &mut DVector<f64>| {
            g.fill(0.0);
            f64::NAN
        });
        let obj = CompositeObjective::new(&bad, &ZeroProx, 1.0);
        let r = solve_composite(&obj, &BoxSet::uniform(2, 0.0, 1.0).unwrap(), 1e-8, 10);
        assert!(matches!(r, Err(Error::NonFiniteObjective { .. })));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let f = DiagQuadratic { q: dv(&[1e-3, 1e3]), b: dv(&[1.0, 1.0]) };
        let obj = CompositeObjective::new(&f, &ZeroProx, 1e-3).with_lipschitz(1e3);
        let r = solve_composite(&obj, &BoxSet::unbounded(2), 1e-14, 3);
        assert!(matches!(r, Err(Error::MaxIterExceeded { iterations: 3, .. })));
    }

    #[test]
    fn rejects_nonpositive_modulus() {
        let f = DiagQuadratic { q: dv(&[1.0]), b: dv(&[0.0]) };
        let obj = CompositeObjective::new(&f, &ZeroProx, 0.0);
        assert!(solve_composite(&obj, &BoxSet::unbounded(1), 1e-8, 10).is_err());
    }
}
