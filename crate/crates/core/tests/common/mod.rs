//! Independent oracles and instance generators shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use std::sync::Arc;

use incentive_mpc::ev::{DemandSource, EVClassConfig, ScenarioConfig, SyntheticDemand};
use incentive_mpc::lompc::{BaseCost, ConeTag, IdentityMap, IncentiveMap, LoMPCSpec, Population};
use incentive_mpc::solvers::{BoxSet, DenseQuadratic, ZeroProx};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Minimizer of `½Σ qᵢwᵢ² − bᵢwᵢ` over `[l, u]`: each coordinate clamps.
pub fn clamp_oracle(q: &DVector<f64>, b: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(q.len(), |i, _| (b[i] / q[i]).clamp(l[i], u[i]))
}

/// Random strictly convex QP `½zᵀQz − bᵀz` s.t. `Az = e`, `Cz ≤ d`,
/// `lo ≤ z ≤ hi`, feasible by construction.
#[derive(Debug, Clone)]
pub struct RandomQp {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
    pub e: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

pub fn random_qp<R: Rng>(rng: &mut R, n: usize, n_eq: usize, n_in: usize) -> RandomQp {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = m.transpose() * m + DMatrix::identity(n, n) * 0.5;
    let b = uniform_vec(rng, n, -3.0, 3.0);
    let lo = uniform_vec(rng, n, -1.5, -0.5);
    let hi = uniform_vec(rng, n, 0.5, 1.5);
    let z0 = DVector::from_fn(n, |i, _| rng.random_range(lo[i] * 0.5..hi[i] * 0.5));
    let a = DMatrix::from_fn(n_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let e = &a * &z0;
    let c = DMatrix::from_fn(n_in, n, |_, _| rng.random_range(-1.0..1.0));
    let d = &c * &z0 + uniform_vec(rng, n_in, 0.0, 0.5);
    RandomQp { q, b, a, e, c, d, lo, hi }
}

impl RandomQp {
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) - self.b.dot(z)
    }

    /// All inequalities as `G z ≤ h`, box rows included.
    fn stacked(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.b.len();
        let k = self.c.nrows();
        let mut g = DMatrix::zeros(k + 2 * n, n);
        let mut h = DVector::zeros(k + 2 * n);
        g.view_mut((0, 0), (k, n)).copy_from(&self.c);
        h.rows_mut(0, k).copy_from(&self.d);
        for i in 0..n {
            g[(k + i, i)] = 1.0;
            h[k + i] = self.hi[i];
            g[(k + n + i, i)] = -1.0;
            h[k + n + i] = -self.lo[i];
        }
        (g, h)
    }

    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let (g, h) = self.stacked();
        let ineq = (&g * z - h).max().max(0.0);
        let eq = if self.a.nrows() > 0 { (&self.a * z - &self.e).amax() } else { 0.0 };
        ineq.max(eq)
    }

    /// Active-set enumeration: solves the equality-constrained KKT system
    /// for every subset of inequality rows (up to `n − n_eq` of them) and
    /// keeps the best primal-feasible candidate.
    pub fn kkt_oracle(&self) -> DVector<f64> {
        let n = self.b.len();
        let p = self.a.nrows();
        let (g, h) = self.stacked();
        let rows = g.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut subset = Vec::new();
        let mut visit = |subset: &[usize]| {
            let k = p + subset.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.q);
            rhs.rows_mut(0, n).copy_from(&self.b);
            for r in 0..k {
                let (row, val) = if r < p {
                    (self.a.row(r).into_owned(), self.e[r])
                } else {
                    (g.row(subset[r - p]).into_owned(), h[subset[r - p]])
                };
                for j in 0..n {
                    kkt[(n + r, j)] = row[j];
                    kkt[(j, n + r)] = row[j];
                }
                rhs[n + r] = val;
            }
            let lu = kkt.lu();
            if lu.determinant().abs() < 1e-12 {
                return;
            }
            let Some(sol) = lu.solve(&rhs) else { return };
            let z = sol.rows(0, n).into_owned();
            if self.max_violation(&z) > 1e-10 {
                return;
            }
            let f = self.objective(&z);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        };
        fn rec(start: usize, rows: usize, left: usize, subset: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
            visit(subset);
            if left == 0 {
                return;
            }
            for r in start..rows {
                subset.push(r);
                rec(r + 1, rows, left - 1, subset, visit);
                subset.pop();
            }
        }
        rec(0, rows, n - p, &mut subset, &mut visit);
        best.expect("feasible by construction").1
    }
}

/// Uncontrolled charging: every EV charges at `w_max` until `y_max`, then
/// is replaced by a fresh draw from the initial-SoC interval. Returns the
/// fleet consumption per step in units of `B`.
pub fn greedy_consumption(cfg: &ScenarioConfig, steps: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    let [lo, hi] = cfg.initial_soc;
    let b = cfg.b_total();
    let mut socs: Vec<Vec<f64>> =
        cfg.classes.iter().map(|c| (0..c.count).map(|_| rng.random_range(lo..=hi)).collect()).collect();
    (0..steps)
        .map(|_| {
            let mut total = 0.0;
            for (c, ys) in cfg.classes.iter().zip(socs.iter_mut()) {
                for y in ys.iter_mut() {
                    let w = c.w_max.min(c.y_max - *y).max(0.0);
                    total += c.capacity_kwh * w;
                    *y += w;
                    if *y >= c.y_max - 1e-12 {
                        *y = rng.random_range(lo..=hi);
                    }
                }
            }
            total / b
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// A fleet small enough for per-test closed-loop runs.
pub fn small_scenario() -> ScenarioConfig {
    let mut small = EVClassConfig::small();
    small.count = 20;
    small.partitions = 3;
    let mut large = EVClassConfig::large();
    large.count = 20;
    large.partitions = 3;
    ScenarioConfig {
        classes: vec![small, large],
        horizon: 6,
        steps: 4,
        demand: DemandSource::Synthetic(SyntheticDemand { scale_divisor: 1e5, ..Default::default() }),
        ..Default::default()
    }
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, w: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(w.len(), |i, _| {
        let mut p = w.clone();
        let mut m = w.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// `‖a − b‖∞ ≤ rel · max(1, ‖b‖∞)`.
pub fn rel_close(a: &DVector<f64>, b: &DVector<f64>, rel: f64) -> bool {
    (a - b).amax() <= rel * b.amax().max(1.0)
}

/// Random linear system `(A, B₁, B₂)` with spectral scale about one.
pub fn random_system<R: Rng>(rng: &mut R, n: usize, p: usize, g: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
    let b1 = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    let b2 = DMatrix::from_fn(n, g, |_, _| rng.random_range(-1.0..1.0));
    (a, b1, b2)
}

/// Step-by-step rollout, stacked as `(x₀, …, x_N)`. Inputs are time-major.
pub fn rollout(
    a: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    b2: &DMatrix<f64>,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    horizon: usize,
) -> DVector<f64> {
    let (n, p, g) = (a.nrows(), b1.ncols(), b2.ncols());
    let mut out = DVector::zeros(n * (horizon + 1));
    let mut x = x0.clone();
    out.rows_mut(0, n).copy_from(&x);
    for k in 0..horizon {
        x = a * &x + b1 * u.rows(k * p, p) + b2 * w.rows(k * g, g);
        out.rows_mut((k + 1) * n, n).copy_from(&x);
    }
    out
}

/// Time-major disturbance with each channel's first `steps` entries on or
/// inside the sphere of radius `radii[g]`; later entries are zero.
pub fn ball_disturbance<R: Rng>(
    rng: &mut R,
    radii: &[f64],
    horizon: usize,
    steps: usize,
    on_sphere: bool,
) -> DVector<f64> {
    let g = radii.len();
    let mut e = DVector::zeros(g * horizon);
    for (c, r) in radii.iter().enumerate() {
        let dir = DVector::from_fn(steps, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = if on_sphere { 1.0 } else { rng.random_range(0.0f64..1.0).powf(1.0 / steps as f64) };
        let v = dir.normalize() * (r * scale);
        for t in 0..steps {
            e[t * g + c] = v[t];
        }
    }
    e
}

/// Followers `½wᵀQw − bᵀw + ⟨θⁱ, w⟩ + ⟨λ, w⟩` on a common box.
pub fn quadratic_population(seed: u64, n: usize, members: usize, bounded: bool) -> (Population, f64) {
    let mut r = rng(seed);
    let qp = random_qp(&mut r, n, 0, 0);
    let m = qp.q.clone().symmetric_eigen().eigenvalues.min();
    let base = Arc::new(BaseCost::new(DenseQuadratic { q: qp.q.clone(), b: qp.b.clone() }, ZeroProx, m).unwrap());
    let bx = Arc::new(if bounded { BoxSet::new(qp.lo, qp.hi).unwrap() } else { BoxSet::unbounded(n) });
    let map: Arc<dyn IncentiveMap> = Arc::new(IdentityMap { dim: n, cone: ConeTag::Zero });
    let specs: Vec<LoMPCSpec> = (0..members)
        .map(|_| LoMPCSpec::new(base.clone(), bx.clone(), uniform_vec(&mut r, n, -0.3, 0.3), map.clone()).unwrap())
        .collect();
    (Population::single_group(specs).unwrap(), m)
}
