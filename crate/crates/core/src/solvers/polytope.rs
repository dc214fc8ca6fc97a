//! Smooth convex programs over `{Az = b, Cz <= d} ∩ box`.
//!
//! Objectives that supply a Hessian go to the interior-point method. The
//! fallback is the method of multipliers: each outer iteration minimizes the
//! augmented Lagrangian over the box with the accelerated proximal-gradient
//! loop, then updates the multipliers.

use nalgebra::{DMatrix, DVector};

use super::boxset::BoxSet;
use super::composite::{accelerated_prox_gradient, estimate_lipschitz, ApgOptions, SmoothTerm, ZeroProx};
use super::interior::interior_point;
use crate::error::{check_dim, Error, Result};

/// Smooth convex objective over a polytope.
pub struct PolytopeProgram<'a> {
    pub objective: &'a dyn SmoothTerm,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub ineq_c: DMatrix<f64>,
    pub ineq_d: DVector<f64>,
    pub var_box: BoxSet,
}

impl<'a> PolytopeProgram<'a> {
    /// Program with only a box; add rows with the builder methods.
    pub fn new(objective: &'a dyn SmoothTerm, var_box: BoxSet) -> Self {
        let n = var_box.dim();
        Self {
            objective,
            eq_a: DMatrix::zeros(0, n),
            eq_b: DVector::zeros(0),
            ineq_c: DMatrix::zeros(0, n),
            ineq_d: DVector::zeros(0),
            var_box,
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_a = a;
        self.eq_b = b;
        self
    }

    pub fn with_ineq(mut self, c: DMatrix<f64>, d: DVector<f64>) -> Self {
        self.ineq_c = c;
        self.ineq_d = d;
        self
    }

    pub fn dim(&self) -> usize {
        self.var_box.dim()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        check_dim(n, self.objective.dim())?;
        check_dim(n, self.eq_a.ncols())?;
        check_dim(self.eq_a.nrows(), self.eq_b.len())?;
        check_dim(n, self.ineq_c.ncols())?;
        check_dim(self.ineq_c.nrows(), self.ineq_d.len())
    }

    /// `(‖Az − b‖∞, max(Cz − d)⁺)`.
    pub fn violation(&self, z: &DVector<f64>) -> (f64, f64) {
        let eq = if self.eq_b.is_empty() { 0.0 } else { (&self.eq_a * z - &self.eq_b).amax() };
        let ineq = (&self.ineq_c * z - &self.ineq_d).iter().fold(0.0f64, |a, v| a.max(*v));
        (eq, ineq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolytopeMethod {
    /// Interior point when the objective has a Hessian, else multipliers.
    #[default]
    Auto,
    InteriorPoint,
    AugmentedLagrangian,
}

#[derive(Debug, Clone, Copy)]
pub struct PolytopeOptions {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Weight of a proximal term `σ/2 ‖z − z_k‖²` added to every inner
    /// problem. Helps when the objective is not strongly convex (LPs).
    pub prox_weight: f64,
    pub initial_penalty: f64,
    pub method: PolytopeMethod,
}

impl Default for PolytopeOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-7,
            tol_opt: 1e-6,
            max_outer: 200,
            max_inner: 20_000,
            prox_weight: 0.0,
            initial_penalty: 1.0,
            method: PolytopeMethod::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolytopeSolution {
    pub z: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub objective: f64,
    /// `‖z − Π_box(z − ∇ₓL(z, y, μ))‖∞`.
    pub stationarity: f64,
    pub feasibility: f64,
    /// `max_j |μ_j (Cz − d)_j|`.
    pub complementarity: f64,
    pub outer_iterations: usize,
    pub penalty: f64,
}

const PENALTY_GROWTH: f64 = 10.0;
const PENALTY_CAP: f64 = 1e12;
const REQUIRED_PROGRESS: f64 = 0.25;

struct AugmentedLagrangian<'p, 'a> {
    prog: &'p PolytopeProgram<'a>,
    y: &'p DVector<f64>,
    mu: &'p DVector<f64>,
    rho: f64,
    sigma: f64,
    center: &'p DVector<f64>,
}

impl SmoothTerm for AugmentedLagrangian<'_, '_> {
    fn dim(&self) -> usize {
        self.prog.dim()
    }

    fn eval(&self, z: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let p = self.prog;
        let mut val = p.objective.eval(z, grad);
        if !p.eq_b.is_empty() {
            let r = &p.eq_a * z - &p.eq_b;
            val += self.y.dot(&r) + 0.5 * self.rho * r.norm_squared();
            let coef = self.y + &r * self.rho;
            grad.gemv_tr(1.0, &p.eq_a, &coef, 1.0);
        }
        if !p.ineq_d.is_empty() {
            let s = &p.ineq_c * z - &p.ineq_d;
            let mut shifted = self.mu + &s * self.rho;
            shifted.apply(|v| *v = v.max(0.0));
            val += (shifted.norm_squared() - self.mu.norm_squared()) / (2.0 * self.rho);
            grad.gemv_tr(1.0, &p.ineq_c, &shifted, 1.0);
        }
        if self.sigma > 0.0 {
            let d = z - self.center;
            val += 0.5 * self.sigma * d.norm_squared();
            grad.axpy(self.sigma, &d, 1.0);
        }
        val
    }
}

fn kkt_residuals(
    prog: &PolytopeProgram<'_>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    mu: &DVector<f64>,
) -> (f64, f64, f64, f64) {
    let mut g = DVector::zeros(z.len());
    let obj = prog.objective.eval(z, &mut g);
    if !y.is_empty() {
        g.gemv_tr(1.0, &prog.eq_a, y, 1.0);
    }
    if !mu.is_empty() {
        g.gemv_tr(1.0, &prog.ineq_c, mu, 1.0);
    }
    let mut step = z - g;
    prog.var_box.clamp_in_place(&mut step);
    let stat = (z - step).amax();
    let (eq, ineq) = prog.violation(z);
    let s = &prog.ineq_c * z - &prog.ineq_d;
    let comp = mu.iter().zip(s.iter()).fold(0.0f64, |a, (m, sv)| a.max((m * sv).abs()));
    (obj, stat, eq.max(ineq), comp)
}

/// Solves a smooth convex program over a polytope with default options.
pub fn solve_polytope(prog: &PolytopeProgram<'_>, tol_feas: f64, tol_opt: f64) -> Result<PolytopeSolution> {
    let opts = PolytopeOptions { tol_feas, tol_opt, ..Default::default() };
    solve_polytope_with(prog, &opts, None)
}

/// Full-control entry point with an optional primal warm start.
pub fn solve_polytope_with(
    prog: &PolytopeProgram<'_>,
    opts: &PolytopeOptions,
    warm: Option<&DVector<f64>>,
) -> Result<PolytopeSolution> {
    prog.validate()?;
    if let Some(w) = warm {
        check_dim(prog.dim(), w.len())?;
    }
    let use_ipm = match opts.method {
        PolytopeMethod::InteriorPoint => true,
        PolytopeMethod::AugmentedLagrangian => false,
        PolytopeMethod::Auto => {
            let n = prog.dim();
            let probe = warm.cloned().unwrap_or_else(|| prog.var_box.anchor());
            prog.objective.hessian(&probe, &mut DMatrix::zeros(n, n))
        }
    };
    if use_ipm {
        let out = match interior_point(prog, opts, warm) {
            Ok(o) => o,
            // Degenerate programs can break the Newton solve; the
            // first-order method does not need it.
            Err(Error::NonFiniteObjective { .. }) if opts.method == PolytopeMethod::Auto => {
                return multipliers(prog, opts, warm)
            }
            Err(e) => return Err(e),
        };
        let mut z = out.z;
        prog.var_box.clamp_in_place(&mut z);
        let (obj, stat, feas, comp) = kkt_residuals(prog, &z, &out.y, &out.mu_c);
        return Ok(PolytopeSolution {
            z,
            eq_multipliers: out.y,
            ineq_multipliers: out.mu_c,
            objective: obj,
            stationarity: stat,
            feasibility: feas,
            complementarity: comp,
            outer_iterations: out.iterations,
            penalty: 0.0,
        });
    }
    multipliers(prog, opts, warm)
}

fn multipliers(
    prog: &PolytopeProgram<'_>,
    opts: &PolytopeOptions,
    warm: Option<&DVector<f64>>,
) -> Result<PolytopeSolution> {
    let n = prog.dim();
    let mut z = match warm {
        Some(w) => {
            check_dim(n, w.len())?;
            let mut w = w.clone();
            prog.var_box.clamp_in_place(&mut w);
            w
        }
        None => prog.var_box.anchor(),
    };
    let mut y = DVector::zeros(prog.eq_b.len());
    let mut mu = DVector::zeros(prog.ineq_d.len());
    let mut rho = opts.initial_penalty;
    let (e0, i0) = prog.violation(&z);
    let mut prev_infeas = e0.max(i0);
    let mut lip_f = estimate_lipschitz(prog.objective, &z);
    let norm_a = prog.eq_a.norm_squared();
    let norm_c = prog.ineq_c.norm_squared();
    let mut last = None;

    for outer in 1..=opts.max_outer {
        let center = z.clone();
        let al = AugmentedLagrangian { prog, y: &y, mu: &mu, rho, sigma: opts.prox_weight, center: &center };
        let inner_tol = (0.1 * opts.tol_opt).max((0.1 * prev_infeas).min(1e-2));
        let lip0 = lip_f + rho * (norm_a + norm_c) + opts.prox_weight;
        let out = accelerated_prox_gradient(
            &al,
            &ZeroProx,
            &prog.var_box,
            &z,
            ApgOptions { gradmap_tol: inner_tol, max_iter: opts.max_inner, lipschitz0: lip0 },
        )?;
        z = out.w;
        lip_f = lip_f.max(out.lipschitz - rho * (norm_a + norm_c) - opts.prox_weight).max(1e-12);

        // Multiplier updates.
        if !y.is_empty() {
            let r = &prog.eq_a * &z - &prog.eq_b;
            y.axpy(rho, &r, 1.0);
        }
        if !mu.is_empty() {
            let s = &prog.ineq_c * &z - &prog.ineq_d;
            mu.axpy(rho, &s, 1.0);
            mu.apply(|v| *v = v.max(0.0));
        }

        let (obj, stat, feas, comp) = kkt_residuals(prog, &z, &y, &mu);
        let sol = PolytopeSolution {
            z: z.clone(),
            eq_multipliers: y.clone(),
            ineq_multipliers: mu.clone(),
            objective: obj,
            stationarity: stat,
            feasibility: feas,
            complementarity: comp,
            outer_iterations: outer,
            penalty: rho,
        };
        if feas <= opts.tol_feas && stat <= opts.tol_opt && comp <= opts.tol_opt {
            return Ok(sol);
        }
        last = Some(sol);

        if feas > opts.tol_feas && feas > REQUIRED_PROGRESS * prev_infeas {
            rho *= PENALTY_GROWTH;
            if rho > PENALTY_CAP {
                return Err(Error::Infeasible { violation: feas, penalty: rho });
            }
        }
        prev_infeas = feas;
    }

    let sol = last.expect("at least one outer iteration");
    Err(Error::MaxIterExceeded {
        iterations: sol.outer_iterations,
        residual: sol.stationarity.max(sol.feasibility).max(sol.complementarity),
    })
}
