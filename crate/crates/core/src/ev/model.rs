//! Follower model of one EV: price map, private cost and SoC partitions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::config::{cumsum_lambda_max, EVClassConfig};
use crate::error::{Error, Result};
use crate::lompc::{build_parametric_theta, BaseCost, ConeTag, IncentiveMap, LoMPCSpec};
use crate::solvers::{BoxSet, ProxTerm, SmoothTerm};

/// Price map `φ(w) = Θ·(w, w_max𝟙 − w, w ⊙ w)` on `ℝ₊^{3N}`.
#[derive(Debug, Clone, Copy)]
pub struct EvIncentiveMap {
    pub horizon: usize,
    pub capacity: f64,
    pub w_max: f64,
}

impl IncentiveMap for EvIncentiveMap {
    fn dim_w(&self) -> usize {
        self.horizon
    }

    fn dim_lambda(&self) -> usize {
        3 * self.horizon
    }

    fn cone(&self) -> ConeTag {
        ConeTag::Nonneg
    }

    fn phi(&self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon;
        let t = self.capacity;
        DVector::from_fn(3 * n, |i, _| match i / n {
            0 => t * w[i],
            1 => t * (self.w_max - w[i - n]),
            _ => t * w[i - 2 * n] * w[i - 2 * n],
        })
    }

    fn jacobian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.horizon;
        let mut j = DMatrix::zeros(3 * n, n);
        for k in 0..n {
            j[(k, k)] = self.capacity;
            j[(n + k, k)] = -self.capacity;
            j[(2 * n + k, k)] = 2.0 * self.capacity * w[k];
        }
        j
    }

    fn jacobian_t(&self, w: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon;
        DVector::from_fn(n, |k, _| self.capacity * (lambda[k] - lambda[n + k] + 2.0 * w[k] * lambda[2 * n + k]))
    }

    fn pair_with_grad(&self, w: &DVector<f64>, lambda: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let n = self.horizon;
        let t = self.capacity;
        let mut v = 0.0;
        for k in 0..n {
            let (l1, l2, l3) = (lambda[k], lambda[n + k], lambda[2 * n + k]);
            v += l1 * w[k] + l2 * (self.w_max - w[k]) + l3 * w[k] * w[k];
            grad[k] += t * (l1 - l2 + 2.0 * l3 * w[k]);
        }
        t * v
    }

    fn add_gram(&self, w: &DVector<f64>, weight: f64, acc: &mut DMatrix<f64>) {
        let n = self.horizon;
        let t2 = weight * self.capacity * self.capacity;
        for k in 0..n {
            let s = [1.0, -1.0, 2.0 * w[k]];
            for a in 0..3 {
                for b in 0..3 {
                    acc[(a * n + k, b * n + k)] += t2 * s[a] * s[b];
                }
            }
        }
    }

    fn curvature_bound(&self, lambda: &DVector<f64>) -> f64 {
        let n = self.horizon;
        2.0 * self.capacity * lambda.rows(2 * n, n).max().max(0.0)
    }
}

pub fn build_ev_incentive_map(class: &EVClassConfig, horizon: usize) -> EvIncentiveMap {
    EvIncentiveMap { horizon, capacity: class.capacity_kwh, w_max: class.w_max }
}

/// Smooth part of the follower cost:
/// `Θ²c₁‖w‖² + δΘ² Σ_{k=1}^N (r₀ − S_k)²` with `S_k = Σ_{j<k} w_j`.
#[derive(Debug, Clone, Copy)]
pub struct EvTracking {
    pub horizon: usize,
    /// `Θ²c₁`.
    pub quad: f64,
    /// `δΘ²`.
    pub weight: f64,
    /// Remaining charge `y_max − y₀`.
    pub r0: f64,
}

impl SmoothTerm for EvTracking {
    fn dim(&self) -> usize {
        self.horizon
    }

    fn eval(&self, w: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let n = self.horizon;
        let mut s = 0.0;
        let mut v = 0.0;
        for k in 0..n {
            s += w[k];
            let r = self.r0 - s;
            grad[k] = r;
            v += self.quad * w[k] * w[k] + self.weight * r * r;
        }
        let mut tail = 0.0;
        for k in (0..n).rev() {
            tail += grad[k];
            grad[k] = 2.0 * self.quad * w[k] - 2.0 * self.weight * tail;
        }
        v
    }
}

/// `a · Σ max(0, w_k − knee)`.
#[derive(Debug, Clone, Copy)]
pub struct KinkProx {
    pub a: f64,
    pub knee: f64,
}

impl ProxTerm for KinkProx {
    fn value(&self, w: &DVector<f64>) -> f64 {
        self.a * w.iter().map(|x| (x - self.knee).max(0.0)).sum::<f64>()
    }

    fn prox(&self, v: &DVector<f64>, t: f64, out: &mut DVector<f64>) {
        let step = self.a * t;
        for i in 0..v.len() {
            let x = v[i];
            out[i] = if x > self.knee + step {
                x - step
            } else if x < self.knee {
                x
            } else {
                self.knee
            };
        }
    }
}

/// Base cost of a follower whose SoC is `y0`.
pub fn build_ev_base_cost(class: &EVClassConfig, y0: f64, horizon: usize) -> Result<BaseCost> {
    let t2 = class.capacity_kwh * class.capacity_kwh;
    let smooth = EvTracking { horizon, quad: t2 * class.battery.c1, weight: class.delta * t2, r0: class.y_max - y0 };
    let prox = KinkProx { a: t2 * class.battery.c2, knee: class.battery.w_knee };
    let lip = 2.0 * smooth.quad + 2.0 * smooth.weight * cumsum_lambda_max(horizon);
    Ok(BaseCost::new(smooth, prox, class.strong_m())?.with_lipschitz(lip))
}

/// Shared structure of one pricing group: the base cost at the group
/// centre, the input box and the price map. Members differ only in θ.
#[derive(Clone)]
pub struct EvGroupModel {
    pub class: EVClassConfig,
    pub center: f64,
    pub horizon: usize,
    base: Arc<BaseCost>,
    input_box: Arc<BoxSet>,
    map: Arc<dyn IncentiveMap>,
}

impl EvGroupModel {
    pub fn new(class: &EVClassConfig, center: f64, horizon: usize) -> Result<Self> {
        let base = Arc::new(build_ev_base_cost(class, center, horizon)?);
        let input_box = Arc::new(BoxSet::uniform(horizon, 0.0, class.w_max)?);
        let map: Arc<dyn IncentiveMap> = Arc::new(build_ev_incentive_map(class, horizon));
        Ok(Self { class: class.clone(), center, horizon, base, input_box, map })
    }

    /// Follower problem of a member with SoC `y0`.
    pub fn member(&self, y0: f64) -> Result<LoMPCSpec> {
        if !(0.0..=self.class.y_max).contains(&y0) {
            return Err(Error::InvalidArgument(format!("SoC {y0} outside [0, {}]", self.class.y_max)));
        }
        let theta = build_parametric_theta(y0, self.center, self.class.delta, self.class.capacity_kwh, self.horizon);
        LoMPCSpec::new(self.base.clone(), self.input_box.clone(), theta, self.map.clone())
    }

    /// The θ = 0 problem at the centre.
    pub fn representative(&self) -> Result<LoMPCSpec> {
        LoMPCSpec::new(self.base.clone(), self.input_box.clone(), DVector::zeros(self.horizon), self.map.clone())
    }
}

/// Follower problem of one EV priced with a group centred at `center`.
pub fn build_ev_lompc(class: &EVClassConfig, member_y0: f64, center: f64, horizon: usize) -> Result<LoMPCSpec> {
    EvGroupModel::new(class, center, horizon)?.member(member_y0)
}

/// One pricing group of a class.
#[derive(Debug, Clone, PartialEq)]
pub struct SocGroup {
    pub partition: usize,
    /// Indices into the SoC slice.
    pub members: Vec<usize>,
    /// Interval midpoint.
    pub center: f64,
    /// Half the interval width.
    pub dy0: f64,
    pub mean_y0: f64,
}

/// Equal-width SoC intervals over `[min y0, max y0]`; empty ones dropped.
pub fn partition_population(y0: &[f64], p: usize) -> Result<Vec<SocGroup>> {
    if p == 0 {
        return Err(Error::InvalidArgument("partition count must be at least 1".into()));
    }
    if y0.is_empty() {
        return Ok(Vec::new());
    }
    let lo = y0.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / p as f64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); p];
    for (i, &y) in y0.iter().enumerate() {
        let k = if width > 0.0 { (((y - lo) / width).floor() as usize).min(p - 1) } else { 0 };
        buckets[k].push(i);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(k, members)| {
            let a = lo + width * k as f64;
            let b = if k + 1 == p { hi } else { lo + width * (k + 1) as f64 };
            let mean_y0 = members.iter().map(|&i| y0[i]).sum::<f64>() / members.len() as f64;
            SocGroup { partition: k, members, center: 0.5 * (a + b), dy0: 0.5 * (b - a), mean_y0 }
        })
        .collect())
}

/// Follower-side bound `√N·Δy₀` of a group.
pub fn group_bound(dy0: f64, horizon: usize) -> f64 {
    (horizon as f64).sqrt() * dy0
}

/// Projects a plan onto the class box `[0, w_max]ᴺ`.
pub fn clamp_to_class(class: &EVClassConfig, w: &DVector<f64>) -> DVector<f64> {
    w.map(|x| x.clamp(0.0, class.w_max))
}

/// `y₀ + Σ_{j<k} w_j` for `k = 0..=N`.
pub fn soc_trajectory(y0: f64, w: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(w.len() + 1);
    y[0] = y0;
    for k in 0..w.len() {
        y[k + 1] = y[k] + w[k];
    }
    y
}
