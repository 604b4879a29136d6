//! Stage orchestration and artifact layout.
//!
//! ```text
//! <out>/meta.json              config, per-stage timings, timestamp
//! <out>/validation.json        per-check PASS/FAIL (validate stage)
//! <out>/FAILED                 present when a stage failed
//! <out>/viability/             theta.csv, region.csv, meta.json
//! <out>/hjb/                   V_t<k>.csv, policy_t<k>.csv, policy.{json,bin}, meta.json
//! <out>/levelset/              W_t<k>.csv, W_levelsets.csv, V_reconstructed_t<k>.csv,
//!                              zstar_t<k>.csv, policy_t<k>.csv, policy.{json,bin}, meta.json
//! <out>/sim/                   sim_report.json, paths_sample.csv
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::ValueField;
use crate::hjb::{solve_constrained_hjb, FeedbackPolicy};
use crate::io;
use crate::levelset::{solve_levelset, LevelSetSolution};
use crate::price::PriceModel;
use crate::sim::{compare_values, simulate_policy, PolicySource, SimReport, Verdict};
use crate::system::{ControlGrid, HydroSystem};
use crate::viability::{self, ViabilityResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Viability,
    Hjb,
    Levelset,
    Reconstruct,
    Simulate,
    Validate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Viability,
        Stage::Hjb,
        Stage::Levelset,
        Stage::Reconstruct,
        Stage::Simulate,
        Stage::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Viability => "viability",
            Stage::Hjb => "hjb",
            Stage::Levelset => "levelset",
            Stage::Reconstruct => "reconstruct",
            Stage::Simulate => "simulate",
            Stage::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Overrides `output.directory`.
    pub out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    pub seed: Option<u64>,
    /// Caps two-dam level-set grids at 21 points per axis.
    pub demo: bool,
    /// Overrides `sim.n_paths`.
    pub paths: Option<usize>,
    /// Overrides `sim.start`.
    pub start: Option<Vec<f64>>,
    /// Acceptance criteria the validate stage runs besides the run's own checks.
    pub acceptance: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// What a pipeline run produced.
#[derive(Debug, Default)]
pub struct PipelineReport {
    pub out_dir: PathBuf,
    pub stages_run: Vec<Stage>,
    pub checks: Vec<Check>,
    pub sim: Option<(SimReport, Option<Verdict>)>,
}

impl PipelineReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Requested stages plus their prerequisites, in execution order.
pub fn resolve_stages(
    requested: &[Stage],
    h3_holds: bool,
    source: Option<PolicySource>,
) -> Vec<Stage> {
    let mut want: Vec<Stage> = requested.to_vec();
    if want.contains(&Stage::Reconstruct) {
        want.push(Stage::Levelset);
    }
    if want.contains(&Stage::Simulate) {
        let direct = source.map_or(h3_holds, |s| s == PolicySource::DirectHjb);
        if direct {
            want.push(Stage::Hjb);
        } else {
            want.extend([Stage::Levelset, Stage::Reconstruct]);
        }
    }
    want.sort();
    want.dedup();
    want
}

#[derive(Default)]
struct State {
    viability: Option<ViabilityResult>,
    hjb: Option<(ValueField, FeedbackPolicy)>,
    levelset: Option<LevelSetSolution>,
    sim: Option<(SimReport, Option<Verdict>)>,
    timings: Vec<(Stage, f64)>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    opts: &'a PipelineOptions,
    model: PriceModel,
    system: HydroSystem,
    out: PathBuf,
    h3_holds: bool,
    eta_max: f64,
}

/// Runs `stages` (and their prerequisites) in dependency order. On failure the
/// partial artifacts stay on disk next to a `FAILED` marker.
pub fn run_pipeline(
    cfg: &RunConfig,
    stages: &[Stage],
    opts: &PipelineOptions,
) -> Result<PipelineReport> {
    let model = cfg.price_model()?;
    let system = cfg.hydro_system()?;
    let h3 = system.check_h3(cfg.system.h3_samples);
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.directory.clone());
    let order = resolve_stages(stages, h3.holds, cfg.sim.policy_source);
    if order.is_empty() {
        return Ok(PipelineReport {
            out_dir: out,
            ..Default::default()
        });
    }
    io::ensure_dir(&out)?;
    let marker = out.join("FAILED");
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let run = Run {
        cfg,
        opts,
        model,
        system,
        out,
        h3_holds: h3.holds,
        eta_max: h3.eta_max,
    };
    let mut state = State::default();
    let mut report = PipelineReport {
        out_dir: run.out.clone(),
        ..Default::default()
    };
    for &stage in &order {
        log::info!("stage `{}`", stage.name());
        let started = Instant::now();
        let res = match stage {
            Stage::Viability => run.viability(&mut state),
            Stage::Hjb => run.hjb(&mut state),
            Stage::Levelset => run.levelset(&mut state),
            Stage::Reconstruct => run.reconstruct(&state),
            Stage::Simulate => run.simulate(&mut state),
            Stage::Validate => run.validate(&state).map(|c| report.checks = c),
        };
        state.timings.push((stage, started.elapsed().as_secs_f64()));
        if let Err(e) = res {
            let msg = format!("stage `{}` failed: {e}\n", stage.name());
            io::write_text(&marker, &msg)?;
            run.write_meta(&state, Some(stage))?;
            return Err(Error::Stage {
                stage: stage.name().into(),
                message: e.to_string(),
            });
        }
        report.stages_run.push(stage);
    }
    run.write_meta(&state, None)?;
    report.sim = state.sim;
    Ok(report)
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Run<'_> {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        io::ensure_dir(&d)?;
        Ok(d)
    }

    fn write_meta(&self, state: &State, failed: Option<Stage>) -> Result<()> {
        let timings: serde_json::Map<String, serde_json::Value> = state
            .timings
            .iter()
            .map(|(s, t)| (s.name().to_string(), serde_json::json!(t)))
            .collect();
        let meta = serde_json::json!({
            "tool": "phs",
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp_unix": now_unix(),
            "config": self.cfg,
            "model": self.model,
            "system": self.system,
            "kappa_bar": self.system.kappa_bar(),
            "h3_holds": self.h3_holds,
            "eta_max": self.eta_max,
            "stage_seconds": timings,
            "failed_stage": failed.map(Stage::name),
        });
        io::write_json(&self.out.join("meta.json"), &meta)
    }

    fn viability(&self, state: &mut State) -> Result<()> {
        if self.system.n_dams() != 1 {
            return Err(Error::InvalidModel(
                "the viability stage covers a single dam only".into(),
            ));
        }
        let grid = self.cfg.hjb_grid(&self.system)?;
        let cells = grid.axes[1].n - 1;
        let tgrid = viability::theta_grid(&self.system, cells, grid.n_steps)?;
        let controls = ControlGrid::uniform(&self.system, self.cfg.solver.n_controls)?;
        let tol = viability::default_tolerance(&tgrid, 10.0);
        let res = viability::analyze(&self.system, &tgrid, &controls, tol)?;
        let dir = self.dir("viability")?;
        let rows: Vec<Vec<f64>> = res
            .theta
            .steps
            .iter()
            .zip(&res.theta.slices)
            .flat_map(|(&n, slice)| {
                let t = tgrid.time(n);
                let y = &tgrid.axes[0];
                slice
                    .iter()
                    .enumerate()
                    .map(move |(j, &v)| vec![t, y.value(j), v])
            })
            .collect();
        io::write_table(&dir.join("theta.csv"), &["t", "y", "theta"], &rows)?;
        let region: Vec<Vec<f64>> = res
            .region
            .iter()
            .map(|&(t, hat, b)| vec![t, hat, b.unwrap_or(f64::NAN)])
            .collect();
        io::write_table(
            &dir.join("region.csv"),
            &["t", "hat_y_analytic", "hat_y_levelset"],
            &region,
        )?;
        io::write_json(
            &dir.join("meta.json"),
            &serde_json::json!({
                "t_star": res.t_star,
                "T_star": res.big_t_star,
                "tolerance": res.tolerance,
                "max_boundary_error_cells": res.max_boundary_error_cells(),
                "dt": tgrid.dt(),
                "dy": tgrid.axes[0].step(),
            }),
        )?;
        if self.cfg.output.plot {
            io::write_text(&dir.join("plot.py"), &io::plot_script("viability"))?;
        }
        state.viability = Some(res);
        Ok(())
    }

    fn hjb(&self, state: &mut State) -> Result<()> {
        if !self.h3_holds {
            return Err(Error::ControllabilityFails {
                eta_max: self.eta_max,
            });
        }
        let setup = self.cfg.hjb_setup(&self.system)?;
        let started = Instant::now();
        let (v, policy) = solve_constrained_hjb(&self.model, &self.system, &setup)?;
        let wall = started.elapsed().as_secs_f64();
        let dir = self.dir("hjb")?;
        for step in self.cfg.export_steps(v.grid.n_steps, self.system.horizon) {
            if let Some(slice) = v.slice_at_step(step) {
                io::write_slice(
                    &io::step_file(&dir, "V", step),
                    &v.grid,
                    slice,
                    "value",
                    &[],
                )?;
            }
            if step < policy.grid.n_steps {
                io::write_policy_slice(&io::step_file(&dir, "policy", step), &policy, step)?;
            }
        }
        io::save_policy(&dir, &policy)?;
        let mut meta = v.meta.clone();
        meta["wall_seconds"] = serde_json::json!(wall);
        meta["grid"] = serde_json::json!(v.grid);
        io::write_json(&dir.join("meta.json"), &meta)?;
        if self.cfg.output.plot {
            io::write_text(&dir.join("plot.py"), &io::plot_script("hjb"))?;
        }
        state.hjb = Some((v, policy));
        Ok(())
    }

    fn levelset(&self, state: &mut State) -> Result<()> {
        let demo = self.opts.demo;
        if self.system.n_dams() == 2 && !demo {
            log::warn!("two-dam level-set at full resolution; consider --demo");
        }
        let setup = self.cfg.levelset_setup(&self.model, &self.system, demo)?;
        let sol = solve_levelset(&self.model, &self.system, &setup)?;
        let dir = self.dir("levelset")?;
        let grid = &setup.grid;
        let full = grid.full_grid();
        for (&step, slice) in sol.w.steps.iter().zip(&sol.w.slices) {
            if !setup.keep_w_steps.contains(&step) {
                continue;
            }
            // Level coordinate written as z, not the normalized zeta.
            let t = grid.base.time(step);
            let rows: Vec<Vec<f64>> = (0..full.len())
                .map(|n| {
                    let mut p = full.point(n);
                    let k = n % grid.zeta.n;
                    let z = grid.z_value(&self.model, t, p[0], k);
                    *p.last_mut().unwrap() = z;
                    p.push(slice[n]);
                    p
                })
                .collect();
            let mut header: Vec<&str> = grid.base.axes.iter().map(|a| a.name.as_str()).collect();
            header.extend(["z", "value"]);
            io::write_table(&io::step_file(&dir, "W", step), &header, &rows)?;
        }
        self.write_levelsets(&dir, &sol, grid)?;
        let mut meta = sol.w.meta.clone();
        meta["diagnostics"] = serde_json::to_value(&sol.diagnostics)?;
        meta["grid"] = serde_json::json!(grid.base);
        meta["zeta"] = serde_json::json!(grid.zeta);
        meta["demo"] = serde_json::json!(demo);
        io::write_json(&dir.join("meta.json"), &meta)?;
        if self.cfg.output.plot {
            io::write_text(&dir.join("plot.py"), &io::plot_script("levelset"))?;
        }
        state.levelset = Some(sol);
        Ok(())
    }

    /// `W(0, x, y, z)` at a few prices for contour plots in `(y, z)`.
    fn write_levelsets(
        &self,
        dir: &Path,
        sol: &LevelSetSolution,
        grid: &crate::levelset::AugmentedGrid,
    ) -> Result<()> {
        if grid.base.axes.len() != 2 {
            return Ok(());
        }
        let Some(w0) = sol.w.slice_at_step(0) else {
            return Ok(());
        };
        let (xa, ya) = (&grid.base.axes[0], &grid.base.axes[1]);
        let nz = grid.zeta.n;
        let mut xs: Vec<usize> = [2.0, 5.0, 10.0]
            .iter()
            .filter(|&&x| x <= xa.max)
            .map(|&x| xa.nearest(x))
            .collect();
        xs.dedup();
        let mut rows = Vec::new();
        for i in xs {
            let x = xa.value(i);
            for j in 0..ya.n {
                for k in 0..nz {
                    let z = grid.z_value(&self.model, 0.0, x, k);
                    rows.push(vec![x, ya.value(j), z, w0[(i * ya.n + j) * nz + k]]);
                }
            }
        }
        io::write_table(
            &dir.join("W_levelsets.csv"),
            &["x", "y", "z", "value"],
            &rows,
        )
    }

    fn reconstruct(&self, state: &State) -> Result<()> {
        let sol = state.levelset.as_ref().ok_or_else(|| Error::Stage {
            stage: "reconstruct".into(),
            message: "level-set solution missing".into(),
        })?;
        let rec = &sol.reconstruction;
        let dir = self.dir("levelset")?;
        let grid = &rec.v.grid;
        for step in self.cfg.export_steps(grid.n_steps, self.system.horizon) {
            if let Some(v) = rec.v.slice_at_step(step) {
                let flag = |n: usize| if v[n].is_finite() { 0.0 } else { 1.0 };
                io::write_slice(
                    &io::step_file(&dir, "V_reconstructed", step),
                    grid,
                    v,
                    "value",
                    &[("infeasible", &flag)],
                )?;
            }
            if let Some(z) = rec.z_star.slice_at_step(step) {
                io::write_slice(&io::step_file(&dir, "zstar", step), grid, z, "z_star", &[])?;
            }
            if step < grid.n_steps {
                io::write_policy_slice(&io::step_file(&dir, "policy", step), &rec.policy, step)?;
            }
        }
        io::save_policy(&dir, &rec.policy)
    }

    fn simulate(&self, state: &mut State) -> Result<()> {
        let (policy, pde, source) = if let Some((v, p)) = &state.hjb {
            (p, v, PolicySource::DirectHjb)
        } else if let Some(sol) = &state.levelset {
            (
                &sol.reconstruction.policy,
                &sol.reconstruction.v,
                PolicySource::LevelSet,
            )
        } else {
            return Err(Error::Stage {
                stage: "simulate".into(),
                message: "no policy available".into(),
            });
        };
        let mut sc = self.cfg.sim_config(source);
        if let Some(s) = self.opts.seed {
            sc.seed = s;
        }
        if let Some(n) = self.opts.paths {
            sc.n_paths = n;
        }
        let start = self
            .opts
            .start
            .clone()
            .unwrap_or_else(|| self.cfg.sim_start(&self.system));
        let (report, verdict) = simulate_and_compare(
            &self.model,
            &self.system,
            policy,
            Some(pde),
            &start,
            &sc,
            self.cfg.tolerances(),
        )?;
        write_sim(&self.dir("sim")?, &report, verdict.as_ref(), &start)?;
        state.sim = Some((report, verdict));
        Ok(())
    }

    fn validate(&self, state: &State) -> Result<Vec<Check>> {
        let mut checks = validation_checks(&self.model, &self.system, state);
        if let Some(ids) = &self.opts.acceptance {
            let suite = crate::acceptance::Suite::new();
            crate::acceptance::run_criteria(&suite, ids, |o| {
                log::info!("{}", o.line());
                checks.push(Check::new(
                    &format!("criterion_{}", o.id),
                    o.pass,
                    o.detail.clone(),
                ));
            });
        }
        let pass = checks.iter().all(|c| c.pass);
        io::write_json(
            &self.out.join("validation.json"),
            &serde_json::json!({
                "status": if pass { "PASS" } else { "FAIL" },
                "checks": checks,
            }),
        )?;
        Ok(checks)
    }
}

/// Replays `policy` and, when a PDE value field is given, compares at `start`.
pub fn simulate_and_compare(
    model: &PriceModel,
    system: &HydroSystem,
    policy: &FeedbackPolicy,
    pde: Option<&ValueField>,
    start: &[f64],
    sc: &crate::sim::SimConfig,
    tol: crate::sim::Tolerances,
) -> Result<(SimReport, Option<Verdict>)> {
    let report = simulate_policy(model, system, policy, start, sc)?;
    let verdict = match pde {
        Some(v) => {
            let value = v.interpolate(start[0], &start[1..])?;
            if !value.is_finite() {
                return Err(Error::InfeasibleNode {
                    t: start[0],
                    x: start[1],
                    y: start[2..].to_vec(),
                });
            }
            Some(compare_values(&report, value, tol))
        }
        None => None,
    };
    Ok((report, verdict))
}

pub fn write_sim(
    dir: &Path,
    report: &SimReport,
    verdict: Option<&Verdict>,
    start: &[f64],
) -> Result<()> {
    let mut slim = report.clone();
    let paths = std::mem::take(&mut slim.paths);
    io::write_json(
        &dir.join("sim_report.json"),
        &serde_json::json!({ "start": start, "report": slim, "verdict": verdict }),
    )?;
    if !paths.is_empty() {
        let rows: Vec<Vec<f64>> = paths
            .iter()
            .map(|p| vec![p.path as f64, p.t, p.x, p.y1, p.y2, p.u1, p.u2, p.z])
            .collect();
        io::write_table(
            &dir.join("paths_sample.csv"),
            &["path", "t", "x", "y1", "y2", "u1", "u2", "z"],
            &rows,
        )?;
    }
    Ok(())
}

/// Largest `V - G` over finite nodes of step 0.
fn max_excess_over_g(model: &PriceModel, system: &HydroSystem, v: &ValueField) -> f64 {
    let Some(v0) = v.slice_at_step(0) else {
        return f64::NAN;
    };
    let kb = system.kappa_bar();
    (0..v.grid.len())
        .filter(|&n| v0[n].is_finite())
        .map(|n| {
            let x = v.grid.point(n)[0];
            v0[n] - kb * model.integrated_mean(x, system.horizon)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Relative sup difference of the reconstruction against the direct value on
/// direct-grid nodes with `x <= x_cap`.
pub fn reconstruction_gap(direct: &ValueField, recon: &ValueField, x_cap: f64) -> Result<f64> {
    let d0 = direct
        .slice_at_step(0)
        .ok_or_else(|| Error::InvalidGrid("no t = 0 slice".into()))?;
    let (mut sup, mut diff) = (0.0f64, 0.0f64);
    for (n, &d) in d0.iter().enumerate() {
        let p = direct.grid.point(n);
        if p[0] > x_cap + 1e-9 {
            continue;
        }
        let r = recon.interpolate(0.0, &p)?;
        sup = sup.max(d.abs());
        diff = diff.max(if r.is_finite() {
            (r - d).abs()
        } else {
            f64::INFINITY
        });
    }
    Ok(diff / sup.max(f64::MIN_POSITIVE))
}

fn validation_checks(model: &PriceModel, system: &HydroSystem, state: &State) -> Vec<Check> {
    let mut out = Vec::new();
    let scale = |v: &ValueField| {
        v.slice_at_step(0)
            .map(|s| {
                s.iter()
                    .filter(|x| x.is_finite())
                    .fold(0.0f64, |m, &x| m.max(x.abs()))
            })
            .unwrap_or(0.0)
    };
    if let Some(res) = &state.viability {
        let cells = res.max_boundary_error_cells();
        out.push(Check::new(
            "viability_boundary_within_one_cell",
            cells <= 1.0,
            format!("max boundary error {cells:.3} cells"),
        ));
    }
    if let Some((v, _)) = &state.hjb {
        let n = v.grid.n_steps;
        let zero = v
            .slice_at_step(n)
            .is_some_and(|s| s.iter().all(|&x| x == 0.0));
        out.push(Check::new("hjb_terminal_zero", zero, "V(T, .) == 0"));
        let ex = max_excess_over_g(model, system, v);
        let tol = 1e-9 * scale(v).max(1.0);
        out.push(Check::new(
            "hjb_below_g",
            ex <= tol,
            format!("max V - G = {ex:.3e}"),
        ));
        if model.is_homogeneous() && system.n_dams() == 1 {
            let h = homogeneity_defect(v);
            out.push(Check::new(
                "gbm_homogeneity",
                h <= 0.02,
                format!("max |V(2x) - 2V(x)| / (1 + 2x) = {h:.4}"),
            ));
        }
    }
    if let Some(sol) = &state.levelset {
        let d = &sol.diagnostics;
        out.push(Check::new(
            "levelset_terminal_exact",
            d.terminal_exact,
            "W(T) == max(z, 0)",
        ));
        out.push(Check::new(
            "levelset_nonnegative",
            d.min_w >= 0.0,
            format!("min W = {:.3e}", d.min_w),
        ));
        out.push(Check::new(
            "levelset_monotone_in_z",
            d.z_monotonicity_violations == 0,
            format!(
                "{} violations, largest repair {:.3e}",
                d.z_monotonicity_violations, d.max_monotone_repair
            ),
        ));
        let v = &sol.reconstruction.v;
        let ex = max_excess_over_g(model, system, v);
        let tol = 0.05 * scale(v).max(1.0);
        out.push(Check::new(
            "reconstruction_below_g",
            ex <= tol,
            format!("max V - G = {ex:.3e} (tolerance {tol:.3e})"),
        ));
        if let Some((direct, _)) = &state.hjb {
            let x_cap = 0.5 * direct.grid.axes[0].max;
            match reconstruction_gap(direct, v, x_cap) {
                Ok(gap) => out.push(Check::new(
                    "reconstruction_agreement",
                    gap <= 0.05,
                    format!("relative sup difference {gap:.4} on x <= {x_cap}"),
                )),
                Err(e) => out.push(Check::new("reconstruction_agreement", false, e.to_string())),
            }
        }
    }
    if let Some((r, verdict)) = &state.sim {
        let bound = r.violation_tolerance;
        out.push(Check::new(
            "sim_admissible",
            r.violation_frequency == 0.0 && r.max_violation <= bound,
            format!(
                "violation frequency {:.3e}, max violation {:.3e} (bound {bound:.3e})",
                r.violation_frequency, r.max_violation
            ),
        ));
        if let Some(v) = verdict {
            out.push(Check::new(
                "mc_consistency",
                v.pass,
                format!(
                    "MC {:.4} +- {:.4} vs PDE {:.4}",
                    v.mc_mean, v.mc_stderr, v.pde_value
                ),
            ));
        }
    }
    out
}

/// `max |V(0, 2x, y) - 2 V(0, x, y)| / (1 + 2x)` over co-grid points.
pub fn homogeneity_defect(v: &ValueField) -> f64 {
    let Some(v0) = v.slice_at_step(0) else {
        return f64::NAN;
    };
    let g = &v.grid;
    let (nx, rest) = (g.axes[0].n, g.len() / g.axes[0].n);
    let mut worst = 0.0f64;
    for i in 0..nx {
        let j = 2 * i;
        if j >= nx {
            break;
        }
        let x = g.axes[0].value(i);
        for r in 0..rest {
            let (a, b) = (v0[i * rest + r], v0[j * rest + r]);
            if a.is_finite() && b.is_finite() {
                worst = worst.max((b - 2.0 * a).abs() / (1.0 + 2.0 * x));
            }
        }
    }
    worst
}
