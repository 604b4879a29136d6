//! Run configuration: TOML (or JSON) with one section per component.
//!
//! ```toml
//! [price]
//! kind = "gbm"
//! b = 0.05
//! sigma = 0.1
//!
//! [system]
//! n_dams = 1
//! beta = { form = "sine", amplitude = 2.0, offset = 0.5 }
//! y_max = 1.0
//! u1_max = 3.0
//! T = 1.0
//! ```
//!
//! Every other section is optional and filled with defaults. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec};
use crate::hjb::HjbSetup;
use crate::levelset::{default_eps_w, AugmentedGrid, LevelSetSetup};
use crate::price::PriceModel;
use crate::sim::{PolicySource, SimConfig, Tolerances};
use crate::system::{ControlGrid, HydroSystem, Inflow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    pub kind: String,
    pub b: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

/// Inflow as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    /// Path to a two-column CSV `t,beta`, relative to the config file.
    Csv(PathBuf),
    Form(BetaForm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaForm {
    /// `amplitude * sin(pi t) + offset`.
    Sine {
        amplitude: f64,
        offset: f64,
    },
    Constant {
        value: f64,
    },
    Table {
        t: Vec<f64>,
        beta: Vec<f64>,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_dams: usize,
    pub beta: BetaSpec,
    /// Inflow of the lower dam; defaults to `beta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<BetaSpec>,
    pub y_max: f64,
    /// Capacity of the lower dam; defaults to `y_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y2_max: Option<f64>,
    #[serde(default)]
    pub u1_min: f64,
    pub u1_max: f64,
    #[serde(default)]
    pub u2_max: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Time samples of the controllability scan.
    #[serde(default = "default_h3_samples")]
    pub h3_samples: usize,
}

fn default_gamma() -> f64 {
    1.5
}

fn default_h3_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    pub min: f64,
    pub max: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<AxisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<AxisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y2: Option<AxisSection>,
    /// Points on the level axis of the level-set solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_z: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_time_steps: Option<usize>,
    /// Fraction of `y_max` by which the level-set y-grid extends past `K`.
    #[serde(default = "default_y_pad")]
    pub levelset_y_pad: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            x: None,
            y: None,
            y2: None,
            n_z: None,
            n_time_steps: None,
            levelset_y_pad: default_y_pad(),
        }
    }
}

fn default_y_pad() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Zero-detection threshold; derived from the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_w: Option<f64>,
    /// Level-axis tolerance reported with the reconstruction (diagnostic).
    #[serde(default = "default_zero_tol")]
    pub zero_level_tolerance: f64,
    /// Bound on `alpha` at `x_max`; defaults to `2 sigma x_max kappa_bar`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_max: Option<f64>,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_controls")]
    pub n_controls: usize,
    #[serde(default = "default_n_alpha")]
    pub n_alpha: usize,
    #[serde(default = "default_budget")]
    pub memory_budget_mib: u64,
}

fn default_zero_tol() -> f64 {
    1e-6
}
fn default_rel_tol() -> f64 {
    0.05
}
fn default_controls() -> usize {
    21
}
fn default_n_alpha() -> usize {
    21
}
fn default_budget() -> u64 {
    3072
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            eps_w: None,
            zero_level_tolerance: default_zero_tol(),
            alpha_max: None,
            rel_tol: default_rel_tol(),
            n_controls: default_controls(),
            n_alpha: default_n_alpha(),
            memory_budget_mib: default_budget(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub directory: PathBuf,
    /// Times at which fields are exported; `0` is always included.
    #[serde(default = "default_export_times")]
    pub export_times: Vec<f64>,
    #[serde(default = "default_true")]
    pub plot: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_export_times() -> Vec<f64> {
    vec![0.0]
}
fn default_true() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_out(),
            export_times: default_export_times(),
            plot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt_sim")]
    pub dt_sim: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Chosen from the controllability scan when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_source: Option<PolicySource>,
    /// `(t, x, y...)`; defaults to `(0, 5, y_max / 2, ...)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub record_paths: usize,
}

fn default_paths() -> usize {
    20_000
}
fn default_dt_sim() -> f64 {
    1e-3
}
fn default_seed() -> u64 {
    7
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n_paths: default_paths(),
            dt_sim: default_dt_sim(),
            seed: default_seed(),
            policy_source: None,
            start: None,
            record_paths: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub price: PriceSection,
    pub system: SystemSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sim: SimSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Reads and validates a config; `.json` files are parsed as JSON, anything
/// else as TOML.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let mut cfg = parse_str(&text, is_json)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}

/// Parses without validating; see [`RunConfig::validate`].
pub fn parse_str(text: &str, json: bool) -> Result<RunConfig> {
    if json {
        serde_json::from_str(text).map_err(|e| {
            Error::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })
    } else {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "document".into());
            Error::config(at, msg)
        })
    }
}

fn range_err(path: &str, msg: impl Into<String>) -> Error {
    Error::config(path, msg)
}

impl RunConfig {
    pub fn price_model(&self) -> Result<PriceModel> {
        let p = &self.price;
        let model = match p.kind.as_str() {
            "gbm" => {
                if p.a.is_some() {
                    return Err(range_err("price.a", "only used by kind = \"igbm\""));
                }
                PriceModel::gbm(p.b, p.sigma)
            }
            "igbm" => {
                let a =
                    p.a.ok_or_else(|| range_err("price.a", "required for kind = \"igbm\""))?;
                PriceModel::igbm(a, p.b, p.sigma)
            }
            other => {
                return Err(range_err(
                    "price.kind",
                    format!("expected \"gbm\" or \"igbm\", got \"{other}\""),
                ))
            }
        };
        model
            .validate()
            .map_err(|e| range_err("price", e.to_string()))?;
        Ok(model)
    }

    fn inflow(&self, spec: &BetaSpec, key: &str) -> Result<Inflow> {
        let from_csv = |p: &Path| -> Result<Inflow> {
            let full = self.base_dir.join(p);
            let (t, beta) = crate::io::read_two_columns(&full, "t", "beta")?;
            Inflow::table(t, beta).map_err(|e| range_err(key, e.to_string()))
        };
        match spec {
            BetaSpec::Csv(p) => from_csv(p),
            BetaSpec::Form(BetaForm::Csv { path }) => from_csv(path),
            BetaSpec::Form(BetaForm::Sine { amplitude, offset }) => {
                Ok(Inflow::sine_offset(*amplitude, *offset))
            }
            BetaSpec::Form(BetaForm::Constant { value }) => Ok(Inflow::constant(*value)),
            BetaSpec::Form(BetaForm::Table { t, beta }) => {
                Inflow::table(t.clone(), beta.clone()).map_err(|e| range_err(key, e.to_string()))
            }
        }
    }

    pub fn hydro_system(&self) -> Result<HydroSystem> {
        let s = &self.system;
        let beta = self.inflow(&s.beta, "system.beta")?;
        if s.u1_min > 0.0 {
            return Err(range_err("system.u1_min", "must be <= 0"));
        }
        let wrap = |e: Error| range_err("system", e.to_string());
        match s.n_dams {
            1 => {
                if s.u1_min != 0.0 {
                    return Err(range_err("system.u1_min", "a single dam cannot pump"));
                }
                HydroSystem::single(beta, s.y_max, s.u1_max, s.horizon).map_err(wrap)
            }
            2 => {
                if !(s.gamma > 1.0) {
                    return Err(range_err(
                        "system.gamma",
                        format!("must exceed 1, got {}", s.gamma),
                    ));
                }
                let beta2 = match &s.beta2 {
                    Some(b) => self.inflow(b, "system.beta2")?,
                    None => beta.clone(),
                };
                HydroSystem::cascade(
                    [beta, beta2],
                    [s.y_max, s.y2_max.unwrap_or(s.y_max)],
                    -s.u1_min,
                    s.u1_max,
                    s.u2_max,
                    s.gamma,
                    s.horizon,
                )
                .map_err(wrap)
            }
            n => Err(range_err(
                "system.n_dams",
                format!("must be 1 or 2, got {n}"),
            )),
        }
    }

    fn axis(&self, key: &str, sec: Option<AxisSection>, default: AxisSection) -> Result<Axis> {
        let a = sec.unwrap_or(default);
        Axis::new(key, a.min, a.max, a.n_points)
            .map_err(|e| range_err(&format!("grid.{key}"), e.to_string()))
    }

    fn n_dams(&self) -> usize {
        self.system.n_dams
    }

    fn default_steps(&self) -> usize {
        if self.n_dams() == 1 {
            200
        } else {
            100
        }
    }

    /// Spatial grid of the direct solver.
    pub fn hjb_grid(&self, system: &HydroSystem) -> Result<GridSpec> {
        let n = if self.n_dams() == 1 { 101 } else { 61 };
        let g = &self.grid;
        let mut axes = vec![self.axis(
            "x",
            g.x,
            AxisSection {
                min: 0.0,
                max: 20.0,
                n_points: n,
            },
        )?];
        let caps = &system.capacity;
        axes.push(self.axis(
            if self.n_dams() == 1 { "y" } else { "y1" },
            g.y,
            AxisSection {
                min: 0.0,
                max: caps[0],
                n_points: n,
            },
        )?);
        if self.n_dams() == 2 {
            axes.push(self.axis(
                "y2",
                g.y2,
                AxisSection {
                    min: 0.0,
                    max: caps[1],
                    n_points: n,
                },
            )?);
        }
        GridSpec::new(
            axes,
            g.n_time_steps.unwrap_or(self.default_steps()),
            system.horizon,
        )
        .map_err(|e| range_err("grid", e.to_string()))
    }

    pub fn hjb_setup(&self, system: &HydroSystem) -> Result<HjbSetup> {
        let grid = self.hjb_grid(system)?;
        Ok(HjbSetup {
            keep_every: 1,
            controls: ControlGrid::uniform(system, self.solver.n_controls)
                .map_err(|e| range_err("solver.n_controls", e.to_string()))?,
            grid,
        })
    }

    /// Level-set setup: the direct solver's x-axis and time steps, y-axes with
    /// the same spacing extended by `levelset_y_pad` on both sides of `K`.
    /// `demo` caps every axis at 21 points.
    pub fn levelset_setup(
        &self,
        model: &PriceModel,
        system: &HydroSystem,
        demo: bool,
    ) -> Result<LevelSetSetup> {
        let hjb = self.hjb_grid(system)?;
        let cap_pts = |n: usize| if demo { n.min(21) } else { n };
        let x0 = &hjb.axes[0];
        let mut axes = vec![Axis::new("x", x0.min, x0.max, cap_pts(x0.n))?];
        let pad = self.grid.levelset_y_pad;
        if !(0.0..=1.0).contains(&pad) {
            return Err(range_err("grid.levelset_y_pad", "must lie in [0, 1]"));
        }
        for a in &hjb.axes[1..] {
            // Demo grids keep 13 points on K so the padded axis stays within 21.
            let n = if demo { a.n.min(13) } else { a.n };
            let step = (a.max - a.min) / (n - 1) as f64;
            let extra = ((pad * (a.max - a.min)) / step).round() as usize;
            axes.push(Axis::with_step(
                a.name.clone(),
                a.min - extra as f64 * step,
                step,
                n + 2 * extra,
            )?);
        }
        let steps = if demo {
            hjb.n_steps.min(40)
        } else {
            hjb.n_steps
        };
        let base = GridSpec::new(axes, steps, system.horizon)?;
        let n_z = self.grid.n_z.unwrap_or(81);
        let n_z = if demo { n_z.min(21) } else { n_z };
        let per_dim = if demo {
            self.solver.n_controls.min(11)
        } else {
            self.solver.n_controls
        };
        let mut setup = LevelSetSetup::with_base(model, system, base, n_z, per_dim)
            .map_err(|e| range_err("grid", e.to_string()))?;
        setup.grid.n_alpha = self.solver.n_alpha;
        if let Some(am) = self.solver.alpha_max {
            setup.grid.alpha_factor = alpha_factor_for(&setup.grid, model, am)?;
        }
        if let Some(eps) = self.solver.eps_w {
            setup.eps_w = eps;
        }
        setup.memory_budget_mib = self.solver.memory_budget_mib;
        setup.keep_w_steps = self.export_steps(setup.grid.base.n_steps, system.horizon);
        setup
            .grid
            .validate()
            .map_err(|e| range_err("solver", e.to_string()))?;
        Ok(setup)
    }

    /// Step indices of `output.export_times` on an `n_steps` grid.
    pub fn export_steps(&self, n_steps: usize, horizon: f64) -> Vec<usize> {
        let mut steps: Vec<usize> = std::iter::once(0.0)
            .chain(self.output.export_times.iter().copied())
            .map(|t| {
                ((t / horizon) * n_steps as f64)
                    .round()
                    .clamp(0.0, n_steps as f64) as usize
            })
            .collect();
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    pub fn sim_config(&self, source: PolicySource) -> SimConfig {
        SimConfig {
            n_paths: self.sim.n_paths,
            dt_sim: self.sim.dt_sim,
            seed: self.sim.seed,
            policy_source: self.sim.policy_source.unwrap_or(source),
            keep_samples: false,
            record_paths: self.sim.record_paths,
        }
    }

    pub fn sim_start(&self, system: &HydroSystem) -> Vec<f64> {
        self.sim.start.clone().unwrap_or_else(|| {
            let mut s = vec![0.0, 5.0];
            s.extend(system.capacity.iter().map(|c| 0.5 * c));
            s
        })
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            rel_tol: self.solver.rel_tol,
            ..Tolerances::default()
        }
    }

    /// Checks ranges and cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        let model = self.price_model()?;
        let system = self.hydro_system()?;
        if self.system.h3_samples < 2 {
            return Err(range_err("system.h3_samples", "must be at least 2"));
        }
        let grid = self.hjb_grid(&system)?;
        if grid.axes[0].min != 0.0 {
            return Err(range_err("grid.x.min", "the price axis must start at 0"));
        }
        for (a, &cap) in grid.axes[1..].iter().zip(&system.capacity) {
            if a.min > 0.0 || a.max < cap {
                return Err(range_err(
                    &format!("grid.{}", a.name),
                    format!("must cover [0, {cap}]"),
                ));
            }
        }
        if self.n_dams() == 1 && self.grid.y2.is_some() {
            return Err(range_err("grid.y2", "only used with n_dams = 2"));
        }
        if let Some(nz) = self.grid.n_z {
            AugmentedGrid::zeta_axis(nz).map_err(|e| range_err("grid.n_z", e.to_string()))?;
        }
        if let Some(eps) = self.solver.eps_w {
            if !(eps > 0.0) {
                return Err(range_err("solver.eps_w", "must be positive"));
            }
        }
        if let Some(a) = self.solver.alpha_max {
            if !(a > 0.0) {
                return Err(range_err("solver.alpha_max", "must be positive"));
            }
        }
        if !(self.solver.rel_tol > 0.0) {
            return Err(range_err("solver.rel_tol", "must be positive"));
        }
        if self.solver.n_controls < 2 {
            return Err(range_err("solver.n_controls", "must be at least 2"));
        }
        if self.solver.n_alpha < 3 {
            return Err(range_err("solver.n_alpha", "must be at least 3"));
        }
        if self
            .output
            .export_times
            .iter()
            .any(|&t| !(0.0..=system.horizon).contains(&t))
        {
            return Err(range_err("output.export_times", "must lie in [0, T]"));
        }
        if self.sim.n_paths == 0 {
            return Err(range_err("sim.n_paths", "must be at least 1"));
        }
        if !(self.sim.dt_sim > 0.0) || self.sim.dt_sim > grid.dt() * (1.0 + 1e-9) {
            return Err(range_err(
                "sim.dt_sim",
                format!("must lie in (0, {}] (the grid time step)", grid.dt()),
            ));
        }
        if let Some(start) = &self.sim.start {
            if start.len() != system.n_dams() + 2 {
                return Err(range_err(
                    "sim.start",
                    format!("expected t, x and {} levels", system.n_dams()),
                ));
            }
        }
        // The level axis is scaled by G, which must be positive somewhere.
        let g0 = system.kappa_bar() * model.integrated_mean(grid.axes[0].max, system.horizon);
        if !(g0 > 0.0) {
            return Err(range_err(
                "grid.x.max",
                "accumulated price G(0, x_max) must be positive",
            ));
        }
        Ok(())
    }

    /// `eps_w` the level-set stage will use.
    pub fn effective_eps_w(&self, model: &PriceModel, system: &HydroSystem) -> Result<f64> {
        if let Some(e) = self.solver.eps_w {
            return Ok(e);
        }
        let grid = self.hjb_grid(system)?;
        let g0 = system.kappa_bar() * model.integrated_mean(grid.axes[0].max, system.horizon);
        Ok(default_eps_w(g0, self.grid.n_z.unwrap_or(81)))
    }
}

/// `alpha_factor` that makes the bound at `x_max`, `t = 0` equal `alpha_max`.
fn alpha_factor_for(grid: &AugmentedGrid, model: &PriceModel, alpha_max: f64) -> Result<f64> {
    let x = grid.base.axes[0].max;
    let per = grid.alpha_max(model, 0.0, x) / grid.alpha_factor;
    if !(per > 0.0) {
        return Err(range_err(
            "solver.alpha_max",
            "cannot be set when sigma = 0",
        ));
    }
    Ok(alpha_max / per)
}
