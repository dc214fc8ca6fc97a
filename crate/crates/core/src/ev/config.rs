//! Scenario configuration: EV classes, the ISO, demand and solver settings.
//!
//! Files are TOML. Errors name the offending key as a flat path such as
//! `classes[0].capacity_kwh`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Private battery degradation cost `g(w) = c1·w² + c2·max(0, w − w_knee)`
/// per step, scaled by `Θ²` in the follower objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryCost {
    pub c1: f64,
    pub c2: f64,
    pub w_knee: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EVClassConfig {
    pub name: String,
    pub count: usize,
    /// Battery capacity Θ in kWh.
    pub capacity_kwh: f64,
    /// Maximum normalized charging rate per step.
    pub w_max: f64,
    /// Target normalized SoC.
    pub y_max: f64,
    /// Tracking weight δ.
    pub delta: f64,
    pub battery: BatteryCost,
    /// SoC partitions used for differential pricing.
    #[serde(default = "default_partitions")]
    pub partitions: usize,
}

fn default_partitions() -> usize {
    12
}

impl EVClassConfig {
    /// Configured strong modulus `2δΘ²`.
    pub fn strong_m(&self) -> f64 {
        2.0 * self.delta * self.capacity_kwh * self.capacity_kwh
    }

    pub fn small() -> Self {
        Self {
            name: "small".into(),
            count: 500,
            capacity_kwh: 10.0,
            w_max: 0.25,
            y_max: 0.9,
            delta: 0.05,
            battery: BatteryCost { c1: 0.05, c2: 0.02, w_knee: 0.15 },
            partitions: 12,
        }
    }

    pub fn large() -> Self {
        Self {
            name: "large".into(),
            count: 500,
            capacity_kwh: 50.0,
            w_max: 0.15,
            y_max: 0.9,
            delta: 0.05,
            battery: BatteryCost { c1: 0.05, c2: 0.02, w_knee: 0.1 },
            partitions: 12,
        }
    }
}

/// Leader limits and cost weights, in units of the fleet capacity `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsoConfig {
    pub x_max_over_b: f64,
    pub u_g_max_over_b: f64,
    pub u_b_max_over_b: f64,
    /// `c^g · B^1.7`, the generation cost weight on normalized generation.
    pub gen_cost: f64,
    /// Tracking discount base γ in `γ^{k−N}`.
    pub gamma: f64,
    /// Initial storage level.
    pub x0_over_b: f64,
}

impl Default for IsoConfig {
    fn default() -> Self {
        Self {
            x_max_over_b: 0.3,
            u_g_max_over_b: 1.0,
            u_b_max_over_b: 0.3,
            gen_cost: 1e-3,
            gamma: 5.0,
            x0_over_b: 0.15,
        }
    }
}

/// Built-in daily profile: a rising half-cosine from the trough hour to the
/// peak hour and a falling one back to the next trough.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDemand {
    /// Raw demand at the trough, kWh per step.
    pub low_kwh: f64,
    /// Raw demand at the peak, kWh per step.
    pub high_kwh: f64,
    pub trough_hour: f64,
    pub peak_hour: f64,
    pub scale_divisor: f64,
}

impl Default for SyntheticDemand {
    fn default() -> Self {
        Self { low_kwh: 6.0e7, high_kwh: 1.05e8, trough_hour: 4.0, peak_hour: 17.0, scale_divisor: 4000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSource {
    Synthetic(SyntheticDemand),
    /// Two-column CSV `hour,kwh`, one row per step.
    File {
        path: PathBuf,
        scale_divisor: f64,
    },
}

impl Default for DemandSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticDemand::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Tolerance added to the error bound when stopping the incentive loop.
    pub eps_tol: f64,
    /// Proximal weight of the λ update as a multiple of `m`.
    pub eps_scale: f64,
    pub max_iter: usize,
    pub horizon_r: usize,
    /// EVs within this distance of `y_max` count as fully charged.
    pub full_charge_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { eps_tol: 1e-3, eps_scale: 0.01, max_iter: 500, horizon_r: 1, full_charge_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub classes: Vec<EVClassConfig>,
    pub horizon: usize,
    pub steps: usize,
    /// Interval for initial and replacement SoCs.
    pub initial_soc: [f64; 2],
    #[serde(default)]
    pub iso: IsoConfig,
    #[serde(default)]
    pub demand: DemandSource,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            classes: vec![EVClassConfig::small(), EVClassConfig::large()],
            horizon: 12,
            steps: 48,
            initial_soc: [0.3, 0.5],
            iso: IsoConfig::default(),
            demand: DemandSource::default(),
            seed: 42,
            solver: SolverConfig::default(),
        }
    }
}

fn bad(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

/// Smallest eigenvalue of `LᵀL` for the `n × n` lower-triangular ones
/// matrix, i.e. the curvature of `Σ_k (Σ_{j<k} w_j)²` in its flattest
/// direction.
pub fn cumsum_lambda_min(n: usize) -> f64 {
    let s = (std::f64::consts::PI * (2 * n - 1) as f64 / (2.0 * (2 * n + 1) as f64)).sin();
    1.0 / (4.0 * s * s)
}

/// Largest eigenvalue of `LᵀL` (see [`cumsum_lambda_min`]).
pub fn cumsum_lambda_max(n: usize) -> f64 {
    let s = (std::f64::consts::PI / (2.0 * (2 * n + 1) as f64)).sin();
    1.0 / (4.0 * s * s)
}

impl ScenarioConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| bad("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            bad(key, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a scenario file. A relative demand path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DemandSource::File { path: p, .. } = &mut cfg.demand {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Total fleet capacity `B = Σ count·Θ` in kWh.
    pub fn b_total(&self) -> f64 {
        self.classes.iter().map(|c| c.count as f64 * c.capacity_kwh).sum()
    }

    pub fn population_size(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(bad("classes", "at least one EV class is required"));
        }
        if self.horizon == 0 {
            return Err(bad("horizon", "must be at least 1"));
        }
        let lmin = cumsum_lambda_min(self.horizon);
        for (i, c) in self.classes.iter().enumerate() {
            let key = |f: &str| format!("classes[{i}].{f}");
            if c.count == 0 {
                return Err(bad(key("count"), "must be at least 1"));
            }
            if !(c.capacity_kwh > 0.0 && c.capacity_kwh.is_finite()) {
                return Err(bad(key("capacity_kwh"), "must be positive"));
            }
            if !(c.w_max > 0.0 && c.w_max <= 1.0) {
                return Err(bad(key("w_max"), "must lie in (0, 1]"));
            }
            if !(c.y_max > 0.0 && c.y_max <= 1.0) {
                return Err(bad(key("y_max"), "must lie in (0, 1]"));
            }
            if !(c.delta > 0.0 && c.delta.is_finite()) {
                return Err(bad(key("delta"), "must be positive"));
            }
            if c.partitions == 0 {
                return Err(bad(key("partitions"), "must be at least 1"));
            }
            let b = c.battery;
            if !(b.c2 >= 0.0) || !b.w_knee.is_finite() {
                return Err(bad(key("battery"), "c2 must be nonnegative and w_knee finite"));
            }
            // The tracking term alone only has curvature 2δΘ²·λmin(LᵀL); the
            // quadratic battery term makes up the rest of 2δΘ².
            let need = c.delta * (1.0 - lmin);
            if !(b.c1 >= need * (1.0 - 1e-12)) {
                return Err(bad(
                    key("battery.c1"),
                    format!("must be at least {need:.6} so the follower cost is 2δΘ²-strongly convex"),
                ));
            }
            if !(self.initial_soc[1] < c.y_max) {
                return Err(bad("initial_soc", format!("upper end must be below classes[{i}].y_max")));
            }
        }
        let [lo, hi] = self.initial_soc;
        if !(0.0 <= lo && lo <= hi) {
            return Err(bad("initial_soc", "must satisfy 0 ≤ lo ≤ hi"));
        }
        let iso = &self.iso;
        for (k, v) in [
            ("iso.x_max_over_b", iso.x_max_over_b),
            ("iso.u_g_max_over_b", iso.u_g_max_over_b),
            ("iso.u_b_max_over_b", iso.u_b_max_over_b),
            ("iso.gen_cost", iso.gen_cost),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(k, "must be positive"));
            }
        }
        if !(iso.gamma > 1.0) {
            return Err(bad("iso.gamma", "must exceed 1"));
        }
        if !(0.0..=iso.x_max_over_b).contains(&iso.x0_over_b) {
            return Err(bad("iso.x0_over_b", "must lie in [0, x_max_over_b]"));
        }
        match &self.demand {
            DemandSource::Synthetic(s) => {
                if !(0.0 <= s.low_kwh && s.low_kwh <= s.high_kwh) {
                    return Err(bad("demand.low_kwh", "must satisfy 0 ≤ low_kwh ≤ high_kwh"));
                }
                if !(s.scale_divisor > 0.0) {
                    return Err(bad("demand.scale_divisor", "must be positive"));
                }
                for (k, h) in [("demand.trough_hour", s.trough_hour), ("demand.peak_hour", s.peak_hour)] {
                    if !(0.0..24.0).contains(&h) {
                        return Err(bad(k, "must lie in [0, 24)"));
                    }
                }
                if s.trough_hour == s.peak_hour {
                    return Err(bad("demand.peak_hour", "must differ from trough_hour"));
                }
            }
            DemandSource::File { scale_divisor, .. } => {
                if !(*scale_divisor > 0.0) {
                    return Err(bad("demand.scale_divisor", "must be positive"));
                }
            }
        }
        let s = &self.solver;
        if !(s.eps_tol > 0.0) {
            return Err(bad("solver.eps_tol", "must be positive"));
        }
        if !(s.eps_scale > 0.0) {
            return Err(bad("solver.eps_scale", "must be positive"));
        }
        if s.max_iter == 0 {
            return Err(bad("solver.max_iter", "must be at least 1"));
        }
        if s.horizon_r == 0 || s.horizon_r > self.horizon {
            return Err(bad("solver.horizon_r", "must lie in 1..=horizon"));
        }
        if !(s.full_charge_tol >= 0.0) {
            return Err(bad("solver.full_charge_tol", "must be nonnegative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_normalize() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        assert_eq!(c.b_total(), 30_000.0);
        assert_eq!(c.population_size(), 1000);
    }

    #[test]
    fn error_names_flat_key() {
        let text = r#"
            horizon = 12
            steps = 4
            initial_soc = [0.3, 0.5]
            seed = 1
            [[classes]]
            name = "a"
            count = 3
            capacity_kwh = "ten"
            w_max = 0.2
            y_max = 0.9
            delta = 0.05
            battery = { c1 = 0.05, c2 = 0.0, w_knee = 0.1 }
        "#;
        match ScenarioConfig::from_toml_str(text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "classes[0].capacity_kwh"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_wmax = text.replace("\"ten\"", "10.0").replace("w_max = 0.2", "w_max = 1.5");
        match ScenarioConfig::from_toml_str(&bad_wmax) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "classes[0].w_max"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cumsum_spectrum_matches_dense() {
        for n in [1, 2, 5, 12] {
            let l = nalgebra::DMatrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 });
            let ev: nalgebra::DVector<f64> = (l.transpose() * l).symmetric_eigen().eigenvalues;
            assert!((ev.min() - cumsum_lambda_min(n)).abs() < 1e-9);
            assert!((ev.max() - cumsum_lambda_max(n)).abs() < 1e-9 * ev.max());
        }
    }
}
