//! ISO problem: generation, storage and one planned charging profile per
//! pricing group, all in units of the fleet capacity `B`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::config::ScenarioConfig;
use crate::bimpc::{build_batch, RobustBiMPCSpec, StorageLimits};
use crate::error::{check_dim, Error, Result};
use crate::solvers::{BoxSet, SmoothTerm};

/// What the ISO knows about one pricing group.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderGroup {
    /// `count·Θ/B`: normalized energy drawn when every member charges at 1.
    pub energy_weight: f64,
    pub w_max: f64,
    /// Tightening radius on the group-average plan.
    pub radius: f64,
    /// Remaining charge `y_max − mean y₀` the tracking term aims for.
    pub target: f64,
    /// Tracking weight, the group's share of its class.
    pub rho: f64,
}

/// `Σ_k c·max(u_k, 0)^1.7 + Σ_g ρ_g Σ_{k=1}^N γ^{k−N} (S_{g,k} − target_g)²`.
#[derive(Debug, Clone)]
pub struct EvLeaderCost {
    pub horizon: usize,
    pub gen_cost: f64,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub target: Vec<f64>,
}

impl EvLeaderCost {
    fn weight(&self, k: usize) -> f64 {
        // k is 1-based
        self.gamma.powi(k as i32 - self.horizon as i32)
    }
}

impl SmoothTerm for EvLeaderCost {
    fn dim(&self) -> usize {
        self.horizon * (1 + self.rho.len())
    }

    fn eval(&self, z: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let n = self.horizon;
        let g_count = self.rho.len();
        let mut v = 0.0;
        for k in 0..n {
            let u = z[k].max(0.0);
            v += self.gen_cost * u.powf(1.7);
            grad[k] = 1.7 * self.gen_cost * u.powf(0.7);
        }
        for g in 0..g_count {
            let mut s = 0.0;
            for k in 0..n {
                let i = n + k * g_count + g;
                s += z[i];
                let r = s - self.target[g];
                let wk = self.rho[g] * self.weight(k + 1);
                v += wk * r * r;
                grad[i] = 2.0 * wk * r;
            }
            let mut tail = 0.0;
            for k in (0..n).rev() {
                let i = n + k * g_count + g;
                tail += grad[i];
                grad[i] = tail;
            }
        }
        v
    }

    fn hessian(&self, z: &DVector<f64>, hess: &mut DMatrix<f64>) -> bool {
        let n = self.horizon;
        let g_count = self.rho.len();
        hess.fill(0.0);
        for k in 0..n {
            let u = z[k];
            // 1.7·0.7·u^{-0.3}; guarded where the curvature blows up at 0
            hess[(k, k)] = if u > 0.0 { 1.19 * self.gen_cost * u.max(1e-9).powf(-0.3) } else { 0.0 };
        }
        for g in 0..g_count {
            // ∂²/∂w_i∂w_j = Σ_{k ≥ max(i,j)} 2ρ γ^{k+1−N}
            let mut tail = vec![0.0; n + 1];
            for k in (0..n).rev() {
                tail[k] = tail[k + 1] + 2.0 * self.rho[g] * self.weight(k + 1);
            }
            for i in 0..n {
                for j in 0..n {
                    hess[(n + i * g_count + g, n + j * g_count + g)] = tail[i.max(j)];
                }
            }
        }
        true
    }
}

/// Storage limits of the scenario in units of `B`.
pub fn storage_limits(cfg: &ScenarioConfig) -> StorageLimits {
    StorageLimits { x_max: cfg.iso.x_max_over_b, u_b_max: cfg.iso.u_b_max_over_b, u_g_max: cfg.iso.u_g_max_over_b }
}

/// Assembles the tightened ISO problem.
///
/// Decision vector `z = (u^g, ŵ)` with `ŵ` time-major over groups. The
/// storage level follows `x_{k+1} = x_k + u^g_k − D_k − Σ_g c_g ŵ_{g,k}`;
/// the battery flow `û^b = u^g − D − Σ_g c_g ŵ_g` is eliminated into
/// linear rows. `demand` is normalized by `B`.
pub fn build_bimpc(
    cfg: &ScenarioConfig,
    x0: f64,
    demand: &DVector<f64>,
    groups: &[LeaderGroup],
) -> Result<RobustBiMPCSpec> {
    let n = cfg.horizon;
    check_dim(n, demand.len())?;
    if groups.is_empty() {
        return Err(Error::InvalidArgument("the ISO problem needs at least one group".into()));
    }
    let gc = groups.len();
    let lim = storage_limits(cfg);

    let b2 = DMatrix::from_fn(1, gc, |_, g| -groups[g].energy_weight);
    let one = DMatrix::from_element(1, 1, 1.0);
    let dynamics = build_batch(&one, &one, &b2, n)?;
    let mut exogenous = DVector::zeros(n + 1);
    for k in 0..n {
        exogenous[k + 1] = exogenous[k] - demand[k];
    }

    let rows = 4 * n;
    let nz = n * (1 + gc);
    let mut c_x = DMatrix::zeros(rows, n + 1);
    let mut c_z = DMatrix::zeros(rows, nz);
    let mut d = DVector::zeros(rows);
    for k in 0..n {
        // storage level x_{k+1} in [0, x_max]
        c_x[(2 * k, k + 1)] = 1.0;
        d[2 * k] = lim.x_max;
        c_x[(2 * k + 1, k + 1)] = -1.0;
        d[2 * k + 1] = 0.0;
        // battery flow û^b_k in [−u_b_max, u_b_max]
        let (r_hi, r_lo) = (2 * n + 2 * k, 2 * n + 2 * k + 1);
        c_z[(r_hi, k)] = 1.0;
        c_z[(r_lo, k)] = -1.0;
        for (g, grp) in groups.iter().enumerate() {
            c_z[(r_hi, n + k * gc + g)] = -grp.energy_weight;
            c_z[(r_lo, n + k * gc + g)] = grp.energy_weight;
        }
        d[r_hi] = lim.u_b_max + demand[k];
        d[r_lo] = lim.u_b_max - demand[k];
    }

    let w_hi = DVector::from_fn(n * gc, |i, _| groups[i % gc].w_max);
    let cost = EvLeaderCost {
        horizon: n,
        gen_cost: cfg.iso.gen_cost,
        gamma: cfg.iso.gamma,
        rho: groups.iter().map(|g| g.rho).collect(),
        target: groups.iter().map(|g| g.target).collect(),
    };
    Ok(RobustBiMPCSpec {
        dynamics,
        x0: DVector::from_element(1, x0),
        exogenous,
        c_x,
        c_z,
        d,
        radii: groups.iter().map(|g| g.radius).collect(),
        horizon_r: cfg.solver.horizon_r,
        input_box_u: BoxSet::uniform(n, 0.0, lim.u_g_max)?,
        input_box_w: BoxSet::new(DVector::zeros(n * gc), w_hi)?,
        cost: Arc::new(cost),
    })
}

/// Storage tightening `Δ = Σ_g c_g r_g` for the given groups.
pub fn storage_delta(groups: &[LeaderGroup]) -> f64 {
    groups.iter().map(|g| g.energy_weight * g.radius).sum()
}
