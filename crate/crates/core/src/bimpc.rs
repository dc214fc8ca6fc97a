//! Leader problem: batch dynamics, robust constraint tightening and the
//! team-optimal solve.
//!
//! The leader plans inputs `u` and follower responses `ŵ`. Followers only
//! reach `ŵ` up to a known radius per group, so every linear constraint is
//! shrunk by the worst-case effect of that error on its row.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::solvers::{solve_polytope_with, BoxSet, PolytopeOptions, PolytopeProgram, PolytopeSolution, SmoothTerm};

/// Stacked prediction `x = Ā x₀ + B̄₁ u + B̄₂ w` with `x = (x₀, …, x_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDynamics {
    pub a_bar: DMatrix<f64>,
    pub b1_bar: DMatrix<f64>,
    pub b2_bar: DMatrix<f64>,
    pub horizon: usize,
}

impl BatchDynamics {
    pub fn state_dim(&self) -> usize {
        self.a_bar.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.b1_bar.ncols() / self.horizon.max(1)
    }

    /// Number of follower channels `γ` per time step.
    pub fn channels(&self) -> usize {
        self.b2_bar.ncols() / self.horizon.max(1)
    }

    pub fn predict(&self, x0: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.a_bar.ncols(), x0.len())?;
        check_dim(self.b1_bar.ncols(), u.len())?;
        check_dim(self.b2_bar.ncols(), w.len())?;
        Ok(&self.a_bar * x0 + &self.b1_bar * u + &self.b2_bar * w)
    }
}

/// Block-Toeplitz batch matrices for `x_{k+1} = A x_k + B₁ u_k + B₂ w_k`.
pub fn build_batch(a: &DMatrix<f64>, b1: &DMatrix<f64>, b2: &DMatrix<f64>, horizon: usize) -> Result<BatchDynamics> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    check_dim(n, b1.nrows())?;
    check_dim(n, b2.nrows())?;
    let (p, g) = (b1.ncols(), b2.ncols());
    let rows = n * (horizon + 1);
    let mut a_bar = DMatrix::zeros(rows, n);
    let mut b1_bar = DMatrix::zeros(rows, p * horizon);
    let mut b2_bar = DMatrix::zeros(rows, g * horizon);

    // powers[k] = A^k
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::identity(n, n));
    for k in 1..=horizon {
        powers.push(a * &powers[k - 1]);
    }
    for k in 0..=horizon {
        a_bar.view_mut((k * n, 0), (n, n)).copy_from(&powers[k]);
        for j in 0..k {
            let ak = &powers[k - 1 - j];
            b1_bar.view_mut((k * n, j * p), (n, p)).copy_from(&(ak * b1));
            b2_bar.view_mut((k * n, j * g), (n, g)).copy_from(&(ak * b2));
        }
    }
    Ok(BatchDynamics { a_bar, b1_bar, b2_bar, horizon })
}

/// Constraints `C v ≤ d` with per-row robust shrinkage.
#[derive(Debug, Clone, PartialEq)]
pub struct TightenedPolytope {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Radius per follower channel.
    pub radius: Vec<f64>,
    pub tightening: DVector<f64>,
}

impl TightenedPolytope {
    pub fn d_tight(&self) -> DVector<f64> {
        &self.d - &self.tightening
    }

    pub fn contains_tight(&self, v: &DVector<f64>, tol: f64) -> bool {
        (&self.c * v - self.d_tight()).iter().all(|r| *r <= tol)
    }

    pub fn contains_original(&self, v: &DVector<f64>, tol: f64) -> bool {
        (&self.c * v - &self.d).iter().all(|r| *r <= tol)
    }
}

/// Worst case of `(CM)_j e` over per-channel balls `‖e_g‖ ≤ r_g` restricted
/// to the first `horizon_r` time steps. Columns of `cm` are time-major with
/// `gamma_dim` channels per step.
pub fn tightening_vector(cm: &DMatrix<f64>, radii: &[f64], horizon_r: usize, gamma_dim: usize) -> Result<DVector<f64>> {
    check_dim(gamma_dim, radii.len())?;
    let steps = cm.ncols().checked_div(gamma_dim).unwrap_or(0);
    check_dim(steps * gamma_dim, cm.ncols())?;
    if radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidArgument("tightening radius must be nonnegative".into()));
    }
    let nr = horizon_r.min(steps);
    Ok(DVector::from_fn(cm.nrows(), |j, _| {
        (0..gamma_dim)
            .map(|g| {
                let sq: f64 = (0..nr).map(|t| cm[(j, t * gamma_dim + g)].powi(2)).sum();
                radii[g] * sq.sqrt()
            })
            .sum()
    }))
}

/// Tightening against one Euclidean ball `‖w̃‖ ≤ radius` over all channels.
pub fn tighten(
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    b2_bar: &DMatrix<f64>,
    radius: f64,
    horizon_r: usize,
    gamma_dim: usize,
) -> Result<TightenedPolytope> {
    check_dim(c.nrows(), d.len())?;
    check_dim(c.ncols(), b2_bar.nrows())?;
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be nonnegative, got {radius}")));
    }
    let cm = c * b2_bar;
    // One ball over all channels: a single group whose columns are all of them.
    let cols = horizon_r.min(cm.ncols() / gamma_dim.max(1)) * gamma_dim;
    let tightening = DVector::from_fn(cm.nrows(), |j, _| radius * cm.view((j, 0), (1, cols)).norm());
    Ok(TightenedPolytope { c: c.clone(), d: d.clone(), radius: vec![radius; gamma_dim], tightening })
}

/// Tightening against a product of balls, one per channel.
pub fn tighten_grouped(
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    b2_bar: &DMatrix<f64>,
    radii: &[f64],
    horizon_r: usize,
) -> Result<TightenedPolytope> {
    check_dim(c.nrows(), d.len())?;
    check_dim(c.ncols(), b2_bar.nrows())?;
    let tightening = tightening_vector(&(c * b2_bar), radii, horizon_r, radii.len())?;
    Ok(TightenedPolytope { c: c.clone(), d: d.clone(), radius: radii.to_vec(), tightening })
}

/// `Σ_g count_g · Θ_g · √N · Δy₀_g` for `(count, capacity, dy0)` triples.
pub fn total_radius(groups: &[(f64, f64, f64)], horizon: usize) -> f64 {
    let sn = (horizon as f64).sqrt();
    groups.iter().map(|(count, cap, dy0)| count * cap * sn * dy0).sum()
}

/// The robust team-optimal problem over `z = (u, w)`.
///
/// Constraints are `C_x x + C_z z ≤ d` where `x` is the stacked prediction
/// plus an exogenous offset. Follower channels are time-major in `w`.
#[derive(Clone)]
pub struct RobustBiMPCSpec {
    pub dynamics: BatchDynamics,
    pub x0: DVector<f64>,
    /// Added to the predicted state (e.g. the effect of forecast demand).
    pub exogenous: DVector<f64>,
    pub c_x: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Radius `θ̄/m` (plus slack) per follower channel.
    pub radii: Vec<f64>,
    pub horizon_r: usize,
    pub input_box_u: BoxSet,
    pub input_box_w: BoxSet,
    pub cost: Arc<dyn SmoothTerm>,
}

impl RobustBiMPCSpec {
    pub fn nu(&self) -> usize {
        self.dynamics.b1_bar.ncols()
    }

    pub fn nw(&self) -> usize {
        self.dynamics.b2_bar.ncols()
    }

    fn validate(&self) -> Result<()> {
        let rows = self.dynamics.a_bar.nrows();
        check_dim(rows, self.exogenous.len())?;
        check_dim(self.dynamics.state_dim(), self.x0.len())?;
        check_dim(rows, self.c_x.ncols())?;
        check_dim(self.nu() + self.nw(), self.c_z.ncols())?;
        check_dim(self.c_x.nrows(), self.c_z.nrows())?;
        check_dim(self.c_x.nrows(), self.d.len())?;
        check_dim(self.dynamics.channels(), self.radii.len())?;
        check_dim(self.nu(), self.input_box_u.dim())?;
        check_dim(self.nw(), self.input_box_w.dim())?;
        check_dim(self.nu() + self.nw(), self.cost.dim())?;
        if self.horizon_r == 0 || self.horizon_r > self.dynamics.horizon {
            return Err(Error::InvalidArgument(format!(
                "robustness horizon {} outside 1..={}",
                self.horizon_r, self.dynamics.horizon
            )));
        }
        Ok(())
    }

    /// Constraints as a tightened polytope in `z`.
    pub fn tightened(&self) -> Result<TightenedPolytope> {
        self.validate()?;
        let (nu, nw) = (self.nu(), self.nw());
        let mut c = self.c_z.clone();
        let cx_b1 = &self.c_x * &self.dynamics.b1_bar;
        let cx_b2 = &self.c_x * &self.dynamics.b2_bar;
        let rows = c.nrows();
        c.view_mut((0, 0), (rows, nu)).zip_apply(&cx_b1, |a, b| *a += b);
        c.view_mut((0, nu), (rows, nw)).zip_apply(&cx_b2, |a, b| *a += b);
        let free = &self.dynamics.a_bar * &self.x0 + &self.exogenous;
        let d = &self.d - &self.c_x * free;
        // Disturbance enters through the dynamics and directly through C_z.
        let dist = cx_b2 + self.c_z.columns(nu, nw);
        let tightening = tightening_vector(&dist, &self.radii, self.horizon_r, self.radii.len())?;
        Ok(TightenedPolytope { c, d, radius: self.radii.clone(), tightening })
    }

    /// Stacked state for a decision vector `z = (u, w)`.
    pub fn predicted_x(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let (nu, nw) = (self.nu(), self.nw());
        check_dim(nu + nw, z.len())?;
        let u = z.rows(0, nu).into_owned();
        let w = z.rows(nu, nw).into_owned();
        Ok(self.dynamics.predict(&self.x0, &u, &w)? + &self.exogenous)
    }

    fn var_box(&self) -> BoxSet {
        let lo = DVector::from_iterator(
            self.nu() + self.nw(),
            self.input_box_u.lower().iter().chain(self.input_box_w.lower().iter()).copied(),
        );
        let hi = DVector::from_iterator(
            self.nu() + self.nw(),
            self.input_box_u.upper().iter().chain(self.input_box_w.upper().iter()).copied(),
        );
        BoxSet::new(lo, hi).expect("component boxes are valid")
    }
}

/// Optimal plan of the robust problem.
#[derive(Debug, Clone)]
pub struct TeamPlan {
    pub u: DVector<f64>,
    /// Follower plans, time-major by channel.
    pub w: DVector<f64>,
    pub predicted_x: DVector<f64>,
    pub objective: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub outer_iterations: usize,
    /// The first attempt failed and the relaxed retry produced this plan.
    pub retried: bool,
}

impl TeamPlan {
    /// Plan of one follower channel over the horizon.
    pub fn channel(&self, g: usize, channels: usize) -> DVector<f64> {
        let n = self.w.len() / channels;
        DVector::from_fn(n, |t, _| self.w[t * channels + g])
    }

    /// `(u, w)` stacked.
    pub fn z(&self) -> DVector<f64> {
        DVector::from_iterator(self.u.len() + self.w.len(), self.u.iter().chain(self.w.iter()).copied())
    }
}

/// Solver tolerances for the leader problem.
pub const BIMPC_TOL_OPT: f64 = 1e-6;
pub const BIMPC_TOL_FEAS: f64 = 1e-7;

/// Solves the tightened team-optimal problem. An `Infeasible` or
/// non-converged first attempt is retried once with a 10× looser
/// feasibility tolerance.
pub fn solve_team_optimal(spec: &RobustBiMPCSpec, warm: Option<&DVector<f64>>) -> Result<TeamPlan> {
    let tp = spec.tightened()?;
    let bx = spec.var_box();
    let prog = PolytopeProgram::new(spec.cost.as_ref(), bx).with_ineq(tp.c.clone(), tp.d_tight());
    let mut opts = PolytopeOptions {
        tol_feas: BIMPC_TOL_FEAS,
        tol_opt: BIMPC_TOL_OPT,
        prox_weight: 1e-3,
        max_outer: 300,
        max_inner: 50_000,
        ..Default::default()
    };
    let (sol, retried): (PolytopeSolution, bool) = match solve_polytope_with(&prog, &opts, warm) {
        Ok(s) => (s, false),
        Err(Error::Infeasible { .. }) | Err(Error::MaxIterExceeded { .. }) => {
            opts.tol_feas *= 10.0;
            match solve_polytope_with(&prog, &opts, warm) {
                Ok(s) => (s, true),
                Err(Error::Infeasible { violation, penalty }) => {
                    return Err(Error::InfeasibleStep(format!(
                        "team-optimal problem infeasible after retry (violation {violation:.3e}, penalty {penalty:.1e})"
                    )))
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    let z = sol.z;
    let (nu, nw) = (spec.nu(), spec.nw());
    let predicted_x = spec.predicted_x(&z)?;
    Ok(TeamPlan {
        u: z.rows(0, nu).into_owned(),
        w: z.rows(nu, nw).into_owned(),
        predicted_x,
        objective: sol.objective,
        stationarity: sol.stationarity,
        feasibility: sol.feasibility,
        outer_iterations: sol.outer_iterations,
        retried,
    })
}

/// Storage and generation limits of a single-storage leader (B units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageLimits {
    pub x_max: f64,
    pub u_b_max: f64,
    pub u_g_max: f64,
}

/// Which feasibility condition fails.
#[derive(Debug, Clone, PartialEq)]
pub enum CertificateViolation {
    /// `Δ > u^b_max`.
    RadiusExceedsStorageRate { delta: f64, u_b_max: f64 },
    /// `2Δ > x_max`.
    RadiusExceedsStorageBand { delta: f64, x_max: f64 },
    /// `x₀` cannot be brought into `[Δ, x_max − Δ]` in one step.
    InitialStorageUnreachable { x0: f64, correction: f64, limit: f64 },
    /// Generation needed by the witness leaves `[0, u^g_max]` at step `k`.
    GenerationLimit { step: usize, required: f64 },
}

impl std::fmt::Display for CertificateViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::RadiusExceedsStorageRate { delta, u_b_max } => {
                write!(f, "tightening radius {delta:.6} exceeds storage rate limit {u_b_max:.6}")
            }
            Self::RadiusExceedsStorageBand { delta, x_max } => {
                write!(f, "twice the tightening radius {delta:.6} exceeds storage capacity {x_max:.6}")
            }
            Self::InitialStorageUnreachable { x0, correction, limit } => {
                write!(f, "storage {x0:.6} needs a first-step correction {correction:.6} beyond {limit:.6}")
            }
            Self::GenerationLimit { step, required } => {
                write!(f, "witness needs generation {required:.6} at step {step}, outside limits")
            }
        }
    }
}

/// A feasible point of the tightened storage problem with zero follower use.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub u_g: DVector<f64>,
    pub u_b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub feasible: bool,
    pub violation: Option<CertificateViolation>,
    pub witness: Option<Witness>,
}

/// Constructive feasibility test for the tightened storage problem.
///
/// The witness keeps follower plans at zero, holds storage constant after
/// an optional first-step correction into `[Δ, x_max − Δ]`, and lets
/// generation cover demand.
pub fn feasibility_certificate(limits: &StorageLimits, x0: f64, demand: &DVector<f64>, delta: f64) -> Certificate {
    let fail = |v| Certificate { feasible: false, violation: Some(v), witness: None };
    if delta > limits.u_b_max {
        return fail(CertificateViolation::RadiusExceedsStorageRate { delta, u_b_max: limits.u_b_max });
    }
    if 2.0 * delta > limits.x_max {
        return fail(CertificateViolation::RadiusExceedsStorageBand { delta, x_max: limits.x_max });
    }
    let x1 = x0.clamp(delta, limits.x_max - delta);
    let correction = x1 - x0;
    let first_limit = limits.u_b_max - delta;
    if correction.abs() > first_limit {
        return fail(CertificateViolation::InitialStorageUnreachable { x0, correction, limit: first_limit });
    }
    let n = demand.len();
    let mut u_b = DVector::zeros(n);
    if n > 0 {
        u_b[0] = correction;
    }
    let u_g = demand + &u_b;
    for k in 0..n {
        if u_g[k] < 0.0 || u_g[k] > limits.u_g_max {
            return fail(CertificateViolation::GenerationLimit { step: k, required: u_g[k] });
        }
    }
    Certificate { feasible: true, violation: None, witness: Some(Witness { u_g, u_b }) }
}
