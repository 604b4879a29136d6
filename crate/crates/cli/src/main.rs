use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use phs_core::config::parse_str;
use phs_core::pipeline::{simulate_and_compare, write_sim};
use phs_core::{
    io, parse_config, run_pipeline, PipelineOptions, PipelineReport, PolicySource, RunConfig, Stage,
};

/// Used by `validate` when no config is given.
const REFERENCE_CONFIG: &str = include_str!("../../../configs/gbm_u3.toml");

#[derive(Parser)]
#[command(
    name = "phs",
    version,
    about = "Pumped-storage valuation under reservoir constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Controllable region of a single dam (writes viability/).
    Viability(Common),
    /// Direct constrained HJB solve (writes hjb/).
    Hjb(Common),
    /// Level-set function W on the augmented grid (writes levelset/).
    Levelset(Common),
    /// Level-set solve followed by value and feedback reconstruction.
    Reconstruct(Common),
    /// Monte Carlo replay of a feedback policy (writes sim/).
    Simulate(SimulateArgs),
    /// Acceptance suite; writes validation.json and exits non-zero on any failure.
    Validate(ValidateArgs),
    /// Every stage, then the run's own validation checks.
    All(AllArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML (or .json) run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo seed; overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap two-dam level-set grids at 21 points per axis.
    #[arg(long)]
    demo: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    DirectHjb,
    LevelSet,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Which solver provides the policy; chosen from the controllability scan by default.
    #[arg(long, value_enum)]
    source: Option<Source>,
    /// Replay a saved policy (a directory holding policy.json and policy.bin)
    /// instead of solving; no PDE comparison is made.
    #[arg(long, value_name = "DIR", conflicts_with = "source")]
    policy: Option<PathBuf>,
    /// Start state `t,x,y[,y2]`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    start: Option<Vec<f64>>,
    /// Number of paths; overrides `sim.n_paths`.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Run configuration; the single-dam GBM reference is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated criterion numbers (default: all ten).
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<u8>>,
}

#[derive(Args)]
struct AllArgs {
    #[command(flatten)]
    common: Common,
    /// Also run the acceptance suite in the validate stage.
    #[arg(long)]
    acceptance: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn set_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PHS_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PHS_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn load(path: &Path) -> Result<RunConfig> {
    parse_config(path).with_context(|| format!("loading {}", path.display()))
}

fn options(c: &Common) -> PipelineOptions {
    PipelineOptions {
        out: c.out.clone(),
        seed: c.seed,
        demo: c.demo,
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    set_threads()?;
    let (cfg, stages, opts) = match cli.command {
        Command::Viability(c) => (load(&c.config)?, vec![Stage::Viability], options(&c)),
        Command::Hjb(c) => (load(&c.config)?, vec![Stage::Hjb], options(&c)),
        Command::Levelset(c) => (load(&c.config)?, vec![Stage::Levelset], options(&c)),
        Command::Reconstruct(c) => (load(&c.config)?, vec![Stage::Reconstruct], options(&c)),
        Command::Simulate(a) => {
            let mut cfg = load(&a.common.config)?;
            if let Some(dir) = &a.policy {
                return replay_saved(&cfg, &a, dir);
            }
            if let Some(p) = a.source {
                cfg.sim.policy_source = Some(match p {
                    Source::DirectHjb => PolicySource::DirectHjb,
                    Source::LevelSet => PolicySource::LevelSet,
                });
            }
            let opts = PipelineOptions {
                paths: a.paths,
                start: a.start.clone(),
                ..options(&a.common)
            };
            (cfg, vec![Stage::Simulate], opts)
        }
        Command::Validate(a) => {
            let cfg = match &a.config {
                Some(p) => load(p)?,
                None => parse_str(REFERENCE_CONFIG, false)?,
            };
            let opts = PipelineOptions {
                out: a.out.clone(),
                acceptance: Some(a.criteria.clone().unwrap_or_else(|| (1..=10).collect())),
                ..Default::default()
            };
            (cfg, vec![Stage::Validate], opts)
        }
        Command::All(a) => {
            let cfg = load(&a.common.config)?;
            let mut opts = options(&a.common);
            if a.acceptance {
                opts.acceptance = Some((1..=10).collect());
            }
            let h3 = cfg.hydro_system()?.check_h3(cfg.system.h3_samples);
            let mut stages = Stage::ALL.to_vec();
            // Viability covers one dam; the direct solver needs the margin.
            if cfg.system.n_dams != 1 {
                stages.retain(|&s| s != Stage::Viability);
            }
            if !h3.holds {
                log::warn!(
                    "controllability fails (eta_max = {:.3}); skipping the direct solver",
                    h3.eta_max
                );
                stages.retain(|&s| s != Stage::Hjb);
            }
            (cfg, stages, opts)
        }
    };
    let report = run_pipeline(&cfg, &stages, &opts)?;
    summarize(&report);
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn summarize(report: &PipelineReport) {
    let names: Vec<&str> = report.stages_run.iter().map(|s| s.name()).collect();
    println!(
        "stages: {}",
        if names.is_empty() {
            "none".into()
        } else {
            names.join(", ")
        }
    );
    println!("output: {}", report.out_dir.display());
    if let Some((r, verdict)) = &report.sim {
        println!(
            "simulation: mean {:.4} +- {:.4} over {} paths, violation frequency {:.2e}",
            r.value_mean, r.value_stderr, r.n_paths, r.violation_frequency
        );
        if let Some(v) = verdict {
            println!(
                "  PDE value {:.4}, |diff| {:.4}, bound {:.4}: {}",
                v.pde_value,
                v.abs_diff,
                v.agreement_bound,
                if v.pass { "PASS" } else { "FAIL" }
            );
        }
    }
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
}

fn replay_saved(cfg: &RunConfig, a: &SimulateArgs, dir: &Path) -> Result<ExitCode> {
    let model = cfg.price_model()?;
    let system = cfg.hydro_system()?;
    let policy = io::load_policy(dir)?;
    if policy.grid.axes.len() != system.n_dams() + 1 {
        bail!(
            "policy in {} does not match a {}-dam system",
            dir.display(),
            system.n_dams()
        );
    }
    let source = if policy.alphas.is_some() {
        PolicySource::LevelSet
    } else {
        PolicySource::DirectHjb
    };
    let mut sc = cfg.sim_config(source);
    if let Some(s) = a.common.seed {
        sc.seed = s;
    }
    if let Some(n) = a.paths {
        sc.n_paths = n;
    }
    let start = a.start.clone().unwrap_or_else(|| cfg.sim_start(&system));
    let (report, _) = simulate_and_compare(
        &model,
        &system,
        &policy,
        None,
        &start,
        &sc,
        cfg.tolerances(),
    )?;
    let out = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.directory.clone())
        .join("sim");
    io::ensure_dir(&out)?;
    write_sim(&out, &report, None, &start)?;
    println!(
        "simulation: mean {:.4} +- {:.4} over {} paths, violation frequency {:.2e}",
        report.value_mean, report.value_stderr, report.n_paths, report.violation_frequency
    );
    println!("output: {}", out.display());
    Ok(ExitCode::SUCCESS)
}
