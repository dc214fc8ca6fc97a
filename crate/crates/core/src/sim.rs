//! Closed-loop simulation of the EV scenario.
//!
//! Each step partitions every class by SoC, solves the tightened ISO
//! problem, prices each group with the iterative incentive method, lets
//! every EV answer its own problem, and applies the first inputs. All
//! energy quantities are in units of the fleet capacity `B`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bimpc::{feasibility_certificate, solve_team_optimal};
use crate::error::{Error, Result};
use crate::ev::{
    build_bimpc, group_bound, ingest_demand, partition_population, storage_delta, storage_limits, DemandProfile,
    EvGroupModel, LeaderGroup, ScenarioConfig,
};
use crate::incentive::{solve_optimal_incentive, Incentive, IncentiveOptions};
use crate::lompc::{average_response_warm, theta_bound, ConeTag, Population};

/// Tolerance for bound and balance checks in normalized units.
pub const AUDIT_TOL: f64 = 1e-9;

/// Floor on a group's error band, for groups whose members share one SoC.
pub const MIN_RADIUS: f64 = 1e-6;

/// Storage level and member SoCs at the start of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub x: f64,
    /// SoCs per class.
    pub y: Vec<Vec<f64>>,
    pub t: usize,
}

/// One pricing group within one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub class: usize,
    pub partition: usize,
    pub count: usize,
    /// `count·Θ/B`.
    pub energy_weight: f64,
    pub center: f64,
    pub dy0: f64,
    pub mean_y0: f64,
    /// `√N·Δy₀`.
    pub bound: f64,
    /// Tightening radius and stopping level of the incentive loop; equals
    /// `bound` unless that is below [`MIN_RADIUS`].
    pub radius: f64,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub final_err: f64,
    pub converged: bool,
    /// Planned group-average profile ŵ.
    pub w_plan: Vec<f64>,
    /// Realized group-average profile.
    pub w_real: Vec<f64>,
    /// `|ŵ₀ − w₀|`.
    pub first_err: f64,
    /// Mean SoC actually added this step.
    pub delivered: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Storage at the start of the step.
    pub x: f64,
    /// Storage after applying the step.
    pub x_real: f64,
    /// Predicted storage `x₀..x_N`.
    pub x_pred: Vec<f64>,
    pub u_plan: Vec<f64>,
    /// Applied generation.
    pub u_g: f64,
    pub demand: f64,
    /// Realized battery flow.
    pub u_b: f64,
    /// Storage tightening `Σ c_g r_g`.
    pub delta: f64,
    pub objective: f64,
    /// EVs replaced after reaching full charge, per class.
    pub replaced: Vec<usize>,
    /// Constraint violations seen in the loop.
    pub violations: usize,
    pub nonconverged: usize,
    /// EVs whose first input was cut at `y_max`.
    pub clamped: usize,
    pub groups: Vec<GroupRecord>,
}

impl StepRecord {
    pub fn flagged(&self) -> bool {
        self.violations > 0 || self.nonconverged > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub initial: SystemState,
    pub steps: Vec<StepRecord>,
    pub final_state: SystemState,
    /// Full-charge count per class over the run.
    pub full_charged: Vec<usize>,
}

impl ClosedLoopTrace {
    pub fn flagged(&self) -> bool {
        self.steps.iter().any(StepRecord::flagged)
    }
}

/// Stateful driver: caches warm starts between steps.
pub struct Simulator {
    cfg: ScenarioConfig,
    demand: DemandProfile,
    b: f64,
    rng: ChaCha8Rng,
    member_warm: Vec<Vec<DVector<f64>>>,
    lambda_warm: BTreeMap<(usize, usize), DVector<f64>>,
    full_charged: Vec<usize>,
}

impl Simulator {
    /// Validates the scenario and loads enough demand for `steps` steps.
    pub fn new(cfg: &ScenarioConfig, steps: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let demand = ingest_demand(&cfg.demand, steps + cfg.horizon)?;
        let n = cfg.horizon;
        Ok(Self {
            cfg: cfg.clone(),
            demand,
            b: cfg.b_total(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            member_warm: cfg.classes.iter().map(|c| vec![DVector::zeros(n); c.count]).collect(),
            lambda_warm: BTreeMap::new(),
            full_charged: vec![0; cfg.classes.len()],
        })
    }

    /// Draws the initial SoCs and storage level.
    pub fn initial_state(&mut self) -> SystemState {
        let [lo, hi] = self.cfg.initial_soc;
        let y =
            self.cfg.classes.iter().map(|c| (0..c.count).map(|_| self.rng.random_range(lo..=hi)).collect()).collect();
        SystemState { x: self.cfg.iso.x0_over_b, y, t: 0 }
    }

    pub fn full_charged(&self) -> &[usize] {
        &self.full_charged
    }

    /// One pass of the hierarchical controller.
    pub fn step(&mut self, state: &SystemState) -> Result<(SystemState, StepRecord)> {
        let cfg = &self.cfg;
        let n = cfg.horizon;
        let eps_tol = cfg.solver.eps_tol;
        let demand = self.demand.window(state.t, n)? / self.b;

        // Pricing groups and what the ISO knows about them.
        let mut groups = Vec::new();
        let mut leader = Vec::new();
        for (ci, class) in cfg.classes.iter().enumerate() {
            for g in partition_population(&state.y[ci], class.partitions)? {
                let radius = group_bound(g.dy0, n).max(MIN_RADIUS);
                leader.push(LeaderGroup {
                    energy_weight: g.members.len() as f64 * class.capacity_kwh / self.b,
                    w_max: class.w_max,
                    radius,
                    target: class.y_max - g.mean_y0,
                    rho: g.members.len() as f64 / class.count as f64,
                });
                groups.push((ci, g));
            }
        }

        let delta = storage_delta(&leader);
        let limits = storage_limits(cfg);
        let cert = feasibility_certificate(&limits, state.x, &demand, delta);
        if let Some(v) = cert.violation {
            return Err(Error::InfeasibleStep(format!("step {}: {v}", state.t)));
        }
        let spec = build_bimpc(cfg, state.x, &demand, &leader)?;
        let plan = solve_team_optimal(&spec, None)?;
        let gc = groups.len();

        let opts = IncentiveOptions {
            eps_tol,
            eps_scale: cfg.solver.eps_scale,
            max_iter: cfg.solver.max_iter,
            ..Default::default()
        };
        let mut records = Vec::with_capacity(gc);
        let mut next_y = state.y.clone();
        let mut clamped = 0;
        let mut violations = 0;
        let mut consumption = 0.0;
        for (gi, (ci, g)) in groups.iter().enumerate() {
            let class = &cfg.classes[*ci];
            let model = EvGroupModel::new(class, g.center, n)?;
            let members = g.members.iter().map(|&i| model.member(state.y[*ci][i])).collect::<Result<Vec<_>>>()?;
            let bar = theta_bound(class.delta, class.capacity_kwh, g.dy0, n);
            let pop = Population::new(members, vec![(0..g.members.len()).collect()], vec![bar])?;

            let target = plan.channel(gi, gc).map(|v| v.clamp(0.0, class.w_max));
            let key = (*ci, g.partition);
            let ws = match self.lambda_warm.get(&key) {
                Some(l) => Incentive::new(l.clone(), ConeTag::Nonneg)?,
                None => Incentive::zeros(3 * n, ConeTag::Nonneg),
            };
            let mut warm: Vec<DVector<f64>> = g.members.iter().map(|&i| self.member_warm[*ci][i].clone()).collect();
            // The loop must land inside the band itself, so its tolerance
            // is carved out of the band rather than added to it.
            let radius = leader[gi].radius;
            let tol = eps_tol.min(0.5 * radius);
            let opts = IncentiveOptions { eps_tol: tol, ..opts };
            let out = solve_optimal_incentive(&pop, 0, &target, radius - tol, &ws, &opts, &mut warm)?;
            // Without convergence the warm starts hold the last iterate's
            // responses, not the best one returned.
            let w_real = if out.converged {
                out.w_final.clone()
            } else {
                average_response_warm(&pop, 0, &out.incentive.lambda, &mut warm)?.mean_w
            };

            let mut delivered = 0.0;
            for (slot, &i) in warm.iter().zip(&g.members) {
                let y = state.y[*ci][i];
                let w0 = slot[0];
                let d = w0.min(class.y_max - y).max(0.0);
                if d < w0 - 1e-12 {
                    clamped += 1;
                }
                delivered += d;
                next_y[*ci][i] = y + d;
                if !(0.0..=class.y_max + AUDIT_TOL).contains(&next_y[*ci][i]) {
                    violations += 1;
                }
            }
            delivered /= g.members.len() as f64;
            consumption += leader[gi].energy_weight * delivered;

            let first_err = (target[0] - w_real[0]).abs();
            if first_err > leader[gi].radius + AUDIT_TOL {
                violations += 1;
            }
            if !(-AUDIT_TOL..=class.w_max + AUDIT_TOL).contains(&w_real[0]) {
                violations += 1;
            }
            for (slot, &i) in warm.into_iter().zip(&g.members) {
                self.member_warm[*ci][i] = slot;
            }
            self.lambda_warm.insert(key, out.incentive.lambda.clone());
            records.push(GroupRecord {
                class: *ci,
                partition: g.partition,
                count: g.members.len(),
                energy_weight: leader[gi].energy_weight,
                center: g.center,
                dy0: g.dy0,
                mean_y0: g.mean_y0,
                bound: group_bound(g.dy0, n),
                radius: leader[gi].radius,
                lambda: out.incentive.lambda.iter().copied().collect(),
                iterations: out.incentive.iterations,
                final_err: out.incentive.final_err,
                converged: out.converged,
                w_plan: target.iter().copied().collect(),
                w_real: w_real.iter().copied().collect(),
                first_err,
                delivered,
            });
        }

        let u_g = plan.u[0];
        let u_b = u_g - demand[0] - consumption;
        let x_real = state.x + u_b;
        if !(-AUDIT_TOL..=limits.x_max + AUDIT_TOL).contains(&x_real) {
            violations += 1;
        }
        if u_b.abs() > limits.u_b_max + AUDIT_TOL {
            violations += 1;
        }
        if !(-AUDIT_TOL..=limits.u_g_max + AUDIT_TOL).contains(&u_g) {
            violations += 1;
        }

        // Replace full EVs and shift warm starts one step.
        let [lo, hi] = cfg.initial_soc;
        let mut replaced = vec![0; cfg.classes.len()];
        for (ci, class) in cfg.classes.iter().enumerate() {
            for (i, y) in next_y[ci].iter_mut().enumerate() {
                let warm = &mut self.member_warm[ci][i];
                if *y >= class.y_max - cfg.solver.full_charge_tol {
                    *y = self.rng.random_range(lo..=hi);
                    replaced[ci] += 1;
                    warm.fill(0.0);
                } else if n > 1 {
                    let last = warm[n - 1];
                    for k in 0..n - 1 {
                        warm[k] = warm[k + 1];
                    }
                    warm[n - 1] = last;
                }
            }
            self.full_charged[ci] += replaced[ci];
        }

        let nonconverged = records.iter().filter(|r| !r.converged).count();
        let record = StepRecord {
            t: state.t,
            x: state.x,
            x_real,
            x_pred: plan.predicted_x.iter().copied().collect(),
            u_plan: plan.u.iter().copied().collect(),
            u_g,
            demand: demand[0],
            u_b,
            delta,
            objective: plan.objective,
            replaced,
            violations,
            nonconverged,
            clamped,
            groups: records,
        };
        Ok((SystemState { x: x_real, y: next_y, t: state.t + 1 }, record))
    }
}

/// Runs `steps` closed-loop steps from a seeded initial population.
pub fn run(cfg: &ScenarioConfig, steps: usize, seed: u64) -> Result<ClosedLoopTrace> {
    let mut sim = Simulator::new(cfg, steps, seed)?;
    let initial = sim.initial_state();
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, rec) = sim.step(&state)?;
        records.push(rec);
        state = next;
    }
    Ok(ClosedLoopTrace { initial, steps: records, final_state: state, full_charged: sim.full_charged.clone() })
}

// ---------------------------------------------------------------------------
// Audit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Storage,
    Generation,
    ChargeRate,
    EnergyBalance,
    ErrorBound,
    InputBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t: usize,
    /// Group index within the step, for group-level checks.
    pub group: Option<usize>,
    pub kind: ViolationKind,
    /// How far past the limit, positive when violated.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub steps: usize,
    pub violations: Vec<Violation>,
    pub min_storage_margin: f64,
    pub min_rate_margin: f64,
    pub min_generation_margin: f64,
    /// Smallest `radius − |ŵ₀ − w₀|` over groups and steps.
    pub min_error_margin: f64,
    pub max_balance_residual: f64,
    pub max_storage_mismatch: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count_at(&self, t: usize) -> usize {
        self.violations.iter().filter(|v| v.t == t).count()
    }
}

/// Rechecks every recorded step against the scenario limits, ignoring the
/// in-loop flags.
pub fn audit_trace(trace: &ClosedLoopTrace, cfg: &ScenarioConfig) -> AuditReport {
    audit_steps(&trace.steps, cfg)
}

pub fn audit_steps(steps: &[StepRecord], cfg: &ScenarioConfig) -> AuditReport {
    let lim = storage_limits(cfg);
    let mut rep = AuditReport {
        steps: steps.len(),
        violations: Vec::new(),
        min_storage_margin: f64::INFINITY,
        min_rate_margin: f64::INFINITY,
        min_generation_margin: f64::INFINITY,
        min_error_margin: f64::INFINITY,
        max_balance_residual: 0.0,
        max_storage_mismatch: 0.0,
    };
    let flag = |rep: &mut AuditReport, t, group, kind, excess: f64| {
        if excess > AUDIT_TOL {
            rep.violations.push(Violation { t, group, kind, excess });
        }
    };
    for s in steps {
        // Storage: within its band and consistent with the applied flow.
        let margin = s.x_real.min(lim.x_max - s.x_real);
        let mismatch = (s.x_real - s.x - s.u_b).abs();
        rep.min_storage_margin = rep.min_storage_margin.min(margin);
        rep.max_storage_mismatch = rep.max_storage_mismatch.max(mismatch);
        flag(&mut rep, s.t, None, ViolationKind::Storage, (-margin).max(mismatch));

        let gen = s.u_g.min(lim.u_g_max - s.u_g);
        rep.min_generation_margin = rep.min_generation_margin.min(gen);
        flag(&mut rep, s.t, None, ViolationKind::Generation, -gen);

        let rate = lim.u_b_max - s.u_b.abs();
        rep.min_rate_margin = rep.min_rate_margin.min(rate);
        flag(&mut rep, s.t, None, ViolationKind::ChargeRate, -rate);

        let consumed: f64 = s.groups.iter().map(|g| g.energy_weight * g.delivered).sum();
        let residual = (s.u_g - s.demand - consumed - s.u_b).abs();
        rep.max_balance_residual = rep.max_balance_residual.max(residual);
        flag(&mut rep, s.t, None, ViolationKind::EnergyBalance, residual);

        for (gi, g) in s.groups.iter().enumerate() {
            let (Some(&p0), Some(&r0)) = (g.w_plan.first(), g.w_real.first()) else {
                continue;
            };
            let m = g.radius - (p0 - r0).abs();
            rep.min_error_margin = rep.min_error_margin.min(m);
            flag(&mut rep, s.t, Some(gi), ViolationKind::ErrorBound, -m);
            let w_max = cfg.classes.get(g.class).map_or(f64::INFINITY, |c| c.w_max);
            flag(&mut rep, s.t, Some(gi), ViolationKind::InputBox, (-r0).max(r0 - w_max));
        }
    }
    rep
}

// ---------------------------------------------------------------------------
// Serialization

/// Column names of the trace CSV, one row per (step, group).
pub const TRACE_COLUMNS: [&str; 31] = [
    "t",
    "x",
    "x_real",
    "x_pred",
    "u_plan",
    "u_g",
    "demand",
    "u_b",
    "delta",
    "objective",
    "replaced",
    "violations",
    "nonconverged",
    "clamped",
    "group",
    "class",
    "partition",
    "count",
    "energy_weight",
    "center",
    "dy0",
    "mean_y0",
    "bound",
    "radius",
    "lambda",
    "iterations",
    "final_err",
    "converged",
    "w_plan",
    "w_real",
    "first_err_delivered",
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// Writes the trace as CSV. Vectors are `;`-separated inside one field.
pub fn write_trace_csv<W: Write>(steps: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for s in steps {
        for (gi, g) in s.groups.iter().enumerate() {
            w.write_record([
                s.t.to_string(),
                s.x.to_string(),
                s.x_real.to_string(),
                join(&s.x_pred),
                join(&s.u_plan),
                s.u_g.to_string(),
                s.demand.to_string(),
                s.u_b.to_string(),
                s.delta.to_string(),
                s.objective.to_string(),
                join(&s.replaced),
                s.violations.to_string(),
                s.nonconverged.to_string(),
                s.clamped.to_string(),
                gi.to_string(),
                g.class.to_string(),
                g.partition.to_string(),
                g.count.to_string(),
                g.energy_weight.to_string(),
                g.center.to_string(),
                g.dy0.to_string(),
                g.mean_y0.to_string(),
                g.bound.to_string(),
                g.radius.to_string(),
                join(&g.lambda),
                g.iterations.to_string(),
                g.final_err.to_string(),
                u8::from(g.converged).to_string(),
                join(&g.w_plan),
                join(&g.w_real),
                format!("{};{}", g.first_err, g.delivered),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(steps: &[StepRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_trace_csv(steps, std::io::BufWriter::new(f))
}

fn schema(line: usize, what: impl std::fmt::Display) -> Error {
    Error::Schema(format!("row {line}: {what}"))
}

fn num<T: std::str::FromStr>(field: &str, col: &str, line: usize) -> Result<T> {
    field.parse().map_err(|_| schema(line, format!("column `{col}` has unparsable value `{field}`")))
}

fn nums<T: std::str::FromStr>(field: &str, col: &str, line: usize) -> Result<Vec<T>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(|p| num(p, col, line)).collect()
}

/// Reads a trace written by [`write_trace_csv`].
pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(TRACE_COLUMNS.iter().copied()) {
        return Err(Error::Schema(format!(
            "expected columns {}, found {}",
            TRACE_COLUMNS.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut steps: Vec<StepRecord> = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let f = |i: usize| &rec[i];
        let c = |i: usize| TRACE_COLUMNS[i];
        let t: usize = num(f(0), c(0), line)?;
        let pair: Vec<f64> = nums(f(30), c(30), line)?;
        if pair.len() != 2 {
            return Err(schema(line, "column `first_err_delivered` needs two values"));
        }
        let group = GroupRecord {
            class: num(f(15), c(15), line)?,
            partition: num(f(16), c(16), line)?,
            count: num(f(17), c(17), line)?,
            energy_weight: num(f(18), c(18), line)?,
            center: num(f(19), c(19), line)?,
            dy0: num(f(20), c(20), line)?,
            mean_y0: num(f(21), c(21), line)?,
            bound: num(f(22), c(22), line)?,
            radius: num(f(23), c(23), line)?,
            lambda: nums(f(24), c(24), line)?,
            iterations: num(f(25), c(25), line)?,
            final_err: num(f(26), c(26), line)?,
            converged: num::<u8>(f(27), c(27), line)? != 0,
            w_plan: nums(f(28), c(28), line)?,
            w_real: nums(f(29), c(29), line)?,
            first_err: pair[0],
            delivered: pair[1],
        };
        if steps.last().is_some_and(|s| s.t == t) {
            steps.last_mut().expect("checked").groups.push(group);
            continue;
        }
        steps.push(StepRecord {
            t,
            x: num(f(1), c(1), line)?,
            x_real: num(f(2), c(2), line)?,
            x_pred: nums(f(3), c(3), line)?,
            u_plan: nums(f(4), c(4), line)?,
            u_g: num(f(5), c(5), line)?,
            demand: num(f(6), c(6), line)?,
            u_b: num(f(7), c(7), line)?,
            delta: num(f(8), c(8), line)?,
            objective: num(f(9), c(9), line)?,
            replaced: nums(f(10), c(10), line)?,
            violations: num(f(11), c(11), line)?,
            nonconverged: num(f(12), c(12), line)?,
            clamped: num(f(13), c(13), line)?,
            groups: vec![group],
        });
    }
    Ok(steps)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<StepRecord>> {
    read_trace_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Run summary: configuration echo, counts and iteration statistics.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub steps: usize,
    pub b_total_kwh: f64,
    pub initial_storage: f64,
    pub final_storage: f64,
    pub full_charged: BTreeMap<String, usize>,
    pub group_steps: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub nonconverged_group_steps: usize,
    pub clamped_inputs: usize,
    pub flagged_steps: usize,
    pub audit: AuditReport,
}

impl RunSummary {
    pub fn new(trace: &ClosedLoopTrace, cfg: &ScenarioConfig, seed: u64) -> Self {
        let groups = trace.steps.iter().flat_map(|s| s.groups.iter());
        let group_steps = groups.clone().count();
        let total: usize = groups.clone().map(|g| g.iterations).sum();
        Self {
            scenario: cfg.clone(),
            seed,
            steps: trace.steps.len(),
            b_total_kwh: cfg.b_total(),
            initial_storage: trace.initial.x,
            final_storage: trace.final_state.x,
            full_charged: cfg.classes.iter().zip(&trace.full_charged).map(|(c, &n)| (c.name.clone(), n)).collect(),
            group_steps,
            mean_iterations: if group_steps > 0 { total as f64 / group_steps as f64 } else { 0.0 },
            max_iterations: groups.clone().map(|g| g.iterations).max().unwrap_or(0),
            nonconverged_group_steps: groups.filter(|g| !g.converged).count(),
            clamped_inputs: trace.steps.iter().map(|s| s.clamped).sum(),
            flagged_steps: trace.steps.iter().filter(|s| s.flagged()).count(),
            audit: audit_trace(trace, cfg),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
