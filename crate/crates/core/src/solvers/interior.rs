//! Primal-dual interior-point method (Mehrotra predictor-corrector) for a
//! smooth convex objective with a Hessian over `{Az = b, Cz ≤ d} ∩ box`.
//!
//! Dense throughout: the reduced Newton system is `n × n` (plus equality
//! rows), which suits the few-hundred-variable leader problems.

use nalgebra::{DMatrix, DVector};

use super::polytope::{PolytopeOptions, PolytopeProgram};
use crate::error::{Error, Result};

pub(crate) struct IpmOutcome {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    /// Multipliers of the general inequality rows only.
    pub mu_c: DVector<f64>,
    pub iterations: usize,
}

/// Inequalities `G z ≤ h` with `G = [C; I_U; −I_L]` kept implicit.
struct Rows {
    /// Indices of finite upper / lower bounds.
    up: Vec<usize>,
    lo: Vec<usize>,
    mc: usize,
}

impl Rows {
    fn len(&self) -> usize {
        self.mc + self.up.len() + self.lo.len()
    }

    fn g_mul(&self, prog: &PolytopeProgram<'_>, z: &DVector<f64>, out: &mut DVector<f64>) {
        if self.mc > 0 {
            out.rows_mut(0, self.mc).copy_from(&(&prog.ineq_c * z));
        }
        for (j, &i) in self.up.iter().enumerate() {
            out[self.mc + j] = z[i];
        }
        let o = self.mc + self.up.len();
        for (j, &i) in self.lo.iter().enumerate() {
            out[o + j] = -z[i];
        }
    }

    fn gt_mul_add(&self, prog: &PolytopeProgram<'_>, v: &DVector<f64>, out: &mut DVector<f64>) {
        if self.mc > 0 {
            out.gemv_tr(1.0, &prog.ineq_c, &v.rows(0, self.mc), 1.0);
        }
        for (j, &i) in self.up.iter().enumerate() {
            out[i] += v[self.mc + j];
        }
        let o = self.mc + self.up.len();
        for (j, &i) in self.lo.iter().enumerate() {
            out[i] -= v[o + j];
        }
    }

    fn rhs(&self, prog: &PolytopeProgram<'_>) -> DVector<f64> {
        let mut h = DVector::zeros(self.len());
        h.rows_mut(0, self.mc).copy_from(&prog.ineq_d);
        for (j, &i) in self.up.iter().enumerate() {
            h[self.mc + j] = prog.var_box.upper()[i];
        }
        let o = self.mc + self.up.len();
        for (j, &i) in self.lo.iter().enumerate() {
            h[o + j] = -prog.var_box.lower()[i];
        }
        h
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter().zip(dv.iter()).fold(1.0f64, |a, (x, d)| if *d < 0.0 { a.min(-x / d) } else { a })
}

enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Factor::Chol(c) => Some(c.solve(b)),
            Factor::Lu(l) => l.solve(b),
        }
    }
}

pub(crate) fn interior_point(
    prog: &PolytopeProgram<'_>,
    opts: &PolytopeOptions,
    warm: Option<&DVector<f64>>,
) -> Result<IpmOutcome> {
    let n = prog.dim();
    let p = prog.eq_b.len();
    let bx = &prog.var_box;
    let rows = Rows {
        up: (0..n).filter(|&i| bx.upper()[i].is_finite()).collect(),
        lo: (0..n).filter(|&i| bx.lower()[i].is_finite()).collect(),
        mc: prog.ineq_d.len(),
    };
    let m = rows.len();
    let h = rows.rhs(prog);

    // Start inside the box where it is bounded.
    let mut z = warm.cloned().unwrap_or_else(|| bx.anchor());
    for i in 0..n {
        let (lo, hi) = (bx.lower()[i], bx.upper()[i]);
        if lo.is_finite() && hi.is_finite() {
            let pad = 0.01 * (hi - lo);
            z[i] = z[i].clamp(lo + pad, hi - pad);
        } else if lo.is_finite() {
            z[i] = z[i].max(lo + 1e-2);
        } else if hi.is_finite() {
            z[i] = z[i].min(hi - 1e-2);
        }
    }
    let mut y = DVector::zeros(p);
    let mut gz = DVector::zeros(m);
    rows.g_mul(prog, &z, &mut gz);
    let mut s = DVector::from_fn(m, |j, _| (h[j] - gz[j]).max(1e-2));
    let mut mu = DVector::from_element(m, 1.0);

    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let max_iter = opts.max_outer.max(50);
    // Complementarity target fine enough that projected stationarity,
    // roughly sqrt of the gap on active bounds, meets tol_opt.
    let gap_tol = (opts.tol_opt * opts.tol_opt).max(1e-20);

    // Full-row-rank equalities are restored exactly after every step; the
    // Newton solve alone loses them once the barrier weights spread.
    let eq_proj = if p > 0 { (&prog.eq_a * prog.eq_a.transpose()).cholesky() } else { None };
    let restore = |z: &mut DVector<f64>| {
        if let Some(c) = &eq_proj {
            let r = &prog.eq_a * &*z - &prog.eq_b;
            *z -= prog.eq_a.tr_mul(&c.solve(&r));
        }
    };
    restore(&mut z);

    let mut stalled = 0;
    let mut prev_gap = f64::INFINITY;

    for it in 0..max_iter {
        let f = prog.objective.eval(&z, &mut grad);
        if !f.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: it });
        }
        if !prog.objective.hessian(&z, &mut hess) {
            return Err(Error::InvalidArgument("interior-point method needs a Hessian".into()));
        }
        rows.g_mul(prog, &z, &mut gz);
        let mut r_d = grad.clone();
        if p > 0 {
            r_d.gemv_tr(1.0, &prog.eq_a, &y, 1.0);
        }
        rows.gt_mul_add(prog, &mu, &mut r_d);
        let r_eq = if p > 0 { &prog.eq_a * &z - &prog.eq_b } else { DVector::zeros(0) };
        let r_in = &gz + &s - &h;
        let gap = if m > 0 { s.dot(&mu) / m as f64 } else { 0.0 };

        let scale_d = 1.0 + grad.amax();
        let prim = r_eq.amax().max(r_in.amax());
        let loose = r_d.amax() <= opts.tol_opt * scale_d && prim <= opts.tol_feas && gap <= opts.tol_opt;
        // Stop at the fine gap, or once a loosely converged run stops
        // improving the gap (rounding floor).
        stalled = if gap > 0.5 * prev_gap { stalled + 1 } else { 0 };
        prev_gap = prev_gap.min(gap);
        if loose && (gap <= gap_tol || stalled >= 3) {
            return Ok(IpmOutcome { z, y, mu_c: mu.rows(0, rows.mc).into_owned(), iterations: it });
        }
        let dual_size = mu.amax().max(y.amax());
        if dual_size > 1e12 * scale_d && prim > opts.tol_feas {
            return Err(Error::Infeasible { violation: prim, penalty: dual_size });
        }

        // Reduced matrix K = H + Gᵀ W G.
        let w = s.zip_map(&mu, |sv, mv| mv / sv);
        let mut k = hess.clone();
        if rows.mc > 0 {
            let mut cw = prog.ineq_c.clone();
            for (j, mut row) in cw.row_iter_mut().enumerate() {
                row *= w[j];
            }
            k.gemm_tr(1.0, &prog.ineq_c, &cw, 1.0);
        }
        for (j, &i) in rows.up.iter().enumerate() {
            k[(i, i)] += w[rows.mc + j];
        }
        let o = rows.mc + rows.up.len();
        for (j, &i) in rows.lo.iter().enumerate() {
            k[(i, i)] += w[o + j];
        }
        let mut exact = DMatrix::zeros(n + p, n + p);
        exact.view_mut((0, 0), (n, n)).copy_from(&k);
        if p > 0 {
            exact.view_mut((n, 0), (p, n)).copy_from(&prog.eq_a);
            exact.view_mut((0, n), (n, p)).copy_from(&prog.eq_a.transpose());
        }
        // A tiny primal shift covers semidefinite Hessians; the equality
        // block is shifted only when the saddle matrix is singular.
        // Refinement against the exact matrix removes the shift's bias.
        let reg = 1e-14 * (1.0 + k.diagonal().amax());
        let shifted = |dual: f64| {
            let mut m = exact.clone();
            for i in 0..n + p {
                m[(i, i)] += if i < n { reg } else { -dual };
            }
            m
        };
        let factor = if p == 0 {
            match shifted(0.0).cholesky() {
                Some(c) => Factor::Chol(c),
                None => Factor::Lu(shifted(0.0).lu()),
            }
        } else {
            let lu = shifted(0.0).lu();
            if lu.is_invertible() {
                Factor::Lu(lu)
            } else {
                Factor::Lu(shifted(1e3 * reg).lu())
            }
        };
        let refined = |b: &DVector<f64>| -> Option<DVector<f64>> {
            let mut x = factor.solve(b)?;
            for _ in 0..3 {
                let r = b - &exact * &x;
                x += factor.solve(&r)?;
            }
            Some(x)
        };

        // Solves the Newton system for a complementarity residual r_c.
        let solve = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let t = DVector::from_fn(m, |j, _| (mu[j] * r_in[j] - r_c[j]) / s[j]);
            let mut rhs1 = -&r_d;
            rows.gt_mul_add(prog, &(-&t), &mut rhs1);
            let sol = if p == 0 {
                refined(&rhs1)?
            } else {
                let mut b = DVector::zeros(n + p);
                b.rows_mut(0, n).copy_from(&rhs1);
                b.rows_mut(n, p).copy_from(&(-&r_eq));
                refined(&b)?
            };
            let dz = sol.rows(0, n).into_owned();
            let dy = if p > 0 { sol.rows(n, p).into_owned() } else { DVector::zeros(0) };
            let mut gdz = DVector::zeros(m);
            rows.g_mul(prog, &dz, &mut gdz);
            let ds = -&r_in - &gdz;
            let dmu = DVector::from_fn(m, |j, _| t[j] + w[j] * gdz[j]);
            Some((dz, dy, ds, dmu))
        };

        let fail = || Error::MaxIterExceeded { iterations: it, residual: prim.max(r_d.amax()) };
        // Predictor.
        let r_aff = s.component_mul(&mu);
        let (_, _, ds_a, dmu_a) = solve(&r_aff).ok_or_else(fail)?;
        let a_p = max_step(&s, &ds_a);
        let a_d = max_step(&mu, &dmu_a);
        let gap_aff = if m > 0 { (&s + &ds_a * a_p).dot(&(&mu + &dmu_a * a_d)) / m as f64 } else { 0.0 };
        let sigma = if gap > 0.0 { (gap_aff / gap).powi(3).clamp(0.0, 1.0) } else { 0.0 };
        // Corrector.
        let r_c = DVector::from_fn(m, |j, _| s[j] * mu[j] + ds_a[j] * dmu_a[j] - sigma * gap);
        let (dz, dy, ds, dmu) = solve(&r_c).ok_or_else(fail)?;
        let a_p = (0.995 * max_step(&s, &ds)).min(1.0);
        let a_d = (0.995 * max_step(&mu, &dmu)).min(1.0);
        // Nonlinear objectives share one step length so the Newton model
        // stays consistent; for quadratics separate lengths are standard.
        let (a_p, a_d) = (a_p.min(a_d), a_p.min(a_d));
        z.axpy(a_p, &dz, 1.0);
        restore(&mut z);
        s.axpy(a_p, &ds, 1.0);
        if p > 0 {
            y.axpy(a_d, &dy, 1.0);
        }
        mu.axpy(a_d, &dmu, 1.0);
        for j in 0..m {
            s[j] = s[j].max(1e-300);
            mu[j] = mu[j].max(1e-300);
        }
    }
    rows.g_mul(prog, &z, &mut gz);
    let mut viol = (&gz - &h).iter().fold(0.0f64, |a, v| a.max(*v));
    if p > 0 {
        viol = viol.max((&prog.eq_a * &z - &prog.eq_b).amax());
    }
    if viol > opts.tol_feas {
        return Err(Error::Infeasible { violation: viol, penalty: mu.amax() });
    }
    Err(Error::MaxIterExceeded { iterations: max_iter, residual: viol })
}
