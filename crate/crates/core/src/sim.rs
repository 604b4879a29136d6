//! Monte Carlo replay of feedback policies.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{FeedbackPolicy, NO_CONTROL};
use crate::price::{path_rng, PriceModel};
use crate::system::{ControlPoint, HydroSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicySource {
    DirectHjb,
    LevelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    pub policy_source: PolicySource,
    /// Keep the per-path payoffs in the report.
    #[serde(default)]
    pub keep_samples: bool,
    /// Number of leading paths whose trajectories are recorded.
    #[serde(default)]
    pub record_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 20_000,
            dt_sim: 1e-3,
            seed: 7,
            policy_source: PolicySource::DirectHjb,
            keep_samples: false,
            record_paths: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, policy: &FeedbackPolicy) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::config("sim.n_paths", "must be at least 1"));
        }
        let dt = policy.grid.dt();
        if !(self.dt_sim > 0.0) || self.dt_sim > dt * (1.0 + 1e-9) {
            return Err(Error::config(
                "sim.dt_sim",
                format!("must lie in (0, {dt}] (the policy time step)"),
            ));
        }
        Ok(())
    }
}

/// One recorded time point of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub path: usize,
    pub t: f64,
    pub x: f64,
    pub y1: f64,
    pub y2: f64,
    pub u1: f64,
    pub u2: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub n_paths: usize,
    pub value_mean: f64,
    pub value_stderr: f64,
    /// Largest `d_K(Y)` seen on any path at any time.
    pub max_violation: f64,
    /// Fraction of path-steps with `d_K(Y)` above `violation_tolerance`.
    pub violation_frequency: f64,
    pub violation_tolerance: f64,
    /// Lookups that hit a node without a control.
    pub infeasible_lookups: u64,
    /// Of those, lookups resolved by a neighbouring y-node.
    pub rescued_lookups: u64,
    /// Lookups that fell back to the safety rule.
    pub safety_rule_steps: u64,
    /// Level-set policies only: mean of `max(Z_T, 0)`, which stays near zero
    /// when the propagated level tracks the optimal one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_terminal_excess: Option<f64>,
    /// Level-set policies only: mean `|Z - z*|` at the nearest node over all steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_tracking_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub paths: Vec<PathPoint>,
}

#[derive(Debug, Clone, Default)]
struct PathResult {
    payoff: f64,
    max_violation: f64,
    violations: u64,
    infeasible: u64,
    rescued: u64,
    safety: u64,
    z_excess: f64,
    z_err_sum: f64,
    points: Vec<PathPoint>,
}

/// Control that keeps the levels where they are, clamped to `U`.
fn safety_control(system: &HydroSystem, t: f64) -> ControlPoint {
    let b1 = system.inflows[0].rate(t);
    if system.n_dams() == 1 {
        return ControlPoint::single(b1.clamp(0.0, system.release_max));
    }
    let u1 = b1.clamp(-system.pump_max, system.release_max);
    let b2 = system.inflows[1].rate(t);
    ControlPoint::pair(u1, (b2 + u1).clamp(0.0, system.release2_max))
}

/// Nearest-node lookup; on a node without control try the y-neighbours.
fn lookup(policy: &FeedbackPolicy, t: f64, point: &[f64]) -> (usize, usize, u16, bool) {
    let (step, node) = policy.locate(t, point);
    let k = policy.index_at(step, node);
    if k != NO_CONTROL {
        return (step, node, k, false);
    }
    let mut idx = policy.grid.unravel(node);
    for d in 1..idx.len() {
        let n = policy.grid.axes[d].n;
        let base = idx[d];
        // Closer neighbour first.
        let frac = point[d] - policy.grid.axes[d].value(base);
        let order: [isize; 2] = if frac >= 0.0 { [1, -1] } else { [-1, 1] };
        for off in order {
            let c = base as isize + off;
            if c < 0 || c >= n as isize {
                continue;
            }
            idx[d] = c as usize;
            let cand = policy.grid.offset(&idx);
            let k = policy.index_at(step, cand);
            if k != NO_CONTROL {
                return (step, cand, k, true);
            }
        }
        idx[d] = base;
    }
    (step, node, NO_CONTROL, true)
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    model: &PriceModel,
    system: &HydroSystem,
    policy: &FeedbackPolicy,
    start: &[f64],
    config: &SimConfig,
    n_steps: usize,
    tol: f64,
    path: usize,
) -> PathResult {
    let mut rng = path_rng(config.seed, path as u64);
    let dt = config.dt_sim;
    let sq = dt.sqrt();
    let track_z = config.policy_source == PolicySource::LevelSet
        && policy.alphas.is_some()
        && policy.z_star.is_some();
    let mut out = PathResult::default();
    let mut x = start[1];
    let mut y = start[2..].to_vec();
    let mut point = vec![0.0; y.len() + 1];
    let kappa_bar = system.kappa_bar();
    let mut z = f64::NAN;
    for k in 0..n_steps {
        let t = start[0] + k as f64 * dt;
        point[0] = x;
        point[1..].copy_from_slice(&y);
        let (step, node, idx, flagged) = lookup(policy, t, &point);
        let u = if idx == NO_CONTROL {
            out.infeasible += 1;
            out.safety += 1;
            safety_control(system, t)
        } else {
            if flagged {
                out.infeasible += 1;
                out.rescued += 1;
            }
            policy.controls[idx as usize]
        };
        let noise: f64 = StandardNormal.sample(&mut rng);
        let mut alpha = 0.0;
        if track_z {
            let level = policy.z_star.as_ref().unwrap()[step][node] as f64;
            if k == 0 {
                z = level;
            }
            if level.is_finite() {
                out.z_err_sum += (z - level).abs();
            }
            if idx != NO_CONTROL {
                alpha = policy.alphas.as_ref().unwrap()[step][node] as f64;
            }
        }
        let kappa = system.kappa_at(u);
        out.payoff += x * kappa * dt;
        z += x * (kappa_bar - kappa) * dt + alpha * sq * noise;
        let b1 = system.inflows[0].integral(t, t + dt);
        if y.len() == 1 {
            y[0] += b1 - u.u1 * dt;
        } else {
            let b2 = system.inflows[1].integral(t, t + dt);
            y[0] += b1 - u.u1 * dt;
            y[1] += b2 + (u.u1 - u.u2) * dt;
        }
        x = model.simulate_step(t, x, dt, noise);
        let d = system.distance_to_k(&y);
        out.max_violation = out.max_violation.max(d);
        if d > tol {
            out.violations += 1;
        }
        if path < config.record_paths {
            out.points.push(PathPoint {
                path,
                t,
                x: point[0],
                y1: point[1],
                y2: point.get(2).copied().unwrap_or(f64::NAN),
                u1: u.u1,
                u2: u.u2,
                z,
            });
        }
    }
    if track_z {
        out.z_excess = z.max(0.0);
    }
    out
}

/// Replays `policy` from `start = (t, x, y...)` on `config.n_paths` price paths.
pub fn simulate_policy(
    model: &PriceModel,
    system: &HydroSystem,
    policy: &FeedbackPolicy,
    start: &[f64],
    config: &SimConfig,
) -> Result<SimReport> {
    model.validate()?;
    system.validate()?;
    config.validate(policy)?;
    if start.len() != system.n_dams() + 2 {
        return Err(Error::config(
            "start",
            format!("expected t, x and {} levels", system.n_dams()),
        ));
    }
    let t0 = start[0];
    if !(0.0..system.horizon).contains(&t0) {
        return Err(Error::OutsideHorizon {
            t: t0,
            horizon: system.horizon,
        });
    }
    if start[1] < 0.0 {
        return Err(Error::NegativePrice(start[1]));
    }
    let n_steps = ((system.horizon - t0) / config.dt_sim).round() as usize;
    let sup_beta = (0..system.n_dams())
        .map(|d| system.inflow_max(d))
        .fold(0.0, f64::max);
    let tol = (system.kappa_bar() + sup_beta) * config.dt_sim;
    let results: Vec<PathResult> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| simulate_path(model, system, policy, start, config, n_steps, tol, p))
        .collect();

    // Sequential reduction keeps the report bit-identical across thread counts.
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.payoff).sum::<f64>() / n;
    let var = if results.len() > 1 {
        results
            .iter()
            .map(|r| (r.payoff - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    let track_z = config.policy_source == PolicySource::LevelSet
        && policy.alphas.is_some()
        && policy.z_star.is_some();
    let path_steps = n * n_steps.max(1) as f64;
    Ok(SimReport {
        n_paths: config.n_paths,
        value_mean: mean,
        value_stderr: (var / n).sqrt(),
        max_violation: results.iter().map(|r| r.max_violation).fold(0.0, f64::max),
        violation_frequency: results.iter().map(|r| r.violations).sum::<u64>() as f64 / path_steps,
        violation_tolerance: tol,
        infeasible_lookups: results.iter().map(|r| r.infeasible).sum(),
        rescued_lookups: results.iter().map(|r| r.rescued).sum(),
        safety_rule_steps: results.iter().map(|r| r.safety).sum(),
        z_terminal_excess: track_z.then(|| results.iter().map(|r| r.z_excess).sum::<f64>() / n),
        z_tracking_error: track_z
            .then(|| results.iter().map(|r| r.z_err_sum).sum::<f64>() / path_steps),
        samples: config
            .keep_samples
            .then(|| results.iter().map(|r| r.payoff).collect()),
        paths: results.into_iter().flat_map(|r| r.points).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative slack on `|mean - pde|` beyond three standard errors.
    pub rel_tol: f64,
    /// Relative slack on `mean - pde` (discretization allowance).
    pub dominance_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rel_tol: 0.05,
            dominance_rel: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub pde_value: f64,
    pub abs_diff: f64,
    pub agreement_bound: f64,
    /// The replay beat the value function beyond noise and allowance.
    pub exceeds_value: bool,
}

pub fn compare_values(report: &SimReport, pde_value: f64, tol: Tolerances) -> Verdict {
    let se3 = 3.0 * report.value_stderr;
    let diff = (report.value_mean - pde_value).abs();
    let bound = se3 + tol.rel_tol * pde_value.abs();
    let exceeds = report.value_mean > pde_value + se3 + tol.dominance_rel * pde_value.abs();
    Verdict {
        pass: diff <= bound && !exceeds,
        mc_mean: report.value_mean,
        mc_stderr: report.value_stderr,
        pde_value,
        abs_diff: diff,
        agreement_bound: bound,
        exceeds_value: exceeds,
    }
}
