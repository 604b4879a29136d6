//! Level-set reformulation: the auxiliary unconstrained problem `W(t, x, y, z)`.
//!
//! ```text
//! W(t, x, y, z) = inf_{u, alpha} E[ max(Z_T, 0) + int_t^T d_K(Y_s) ds ]
//! dZ = -x (kappa(u) - kappa_bar) ds + alpha dB      (same B as the price)
//! ```
//!
//! The constrained value is recovered as `V = sup{z <= 0 : W(z) = 0} + G(t, x)`,
//! with "= 0" read as `<= eps_w` on the grid.
//!
//! `z` is stored per column in units of `S(t, x) = G(t, x) + floor`:
//! node `k` of the `zeta` axis sits at `z = zeta_k S(t, x)`. The admissible
//! levels `[-G, 0]` then span the same number of cells in every column.
//! `|alpha|` is bounded by `alpha_factor * sigma * S(t, x)`.
//!
//! Per node and control the one-step operator is
//! `1/2 [W(x+, y', z + s + a) + W(x-, y', z + s - a)]` with
//! `s = x (kappa_bar - kappa(u)) dt` and `a = alpha sqrt(dt)`. It is piecewise
//! linear in `a`, so the minimum over the alpha interval is taken at its kinks
//! and ends. Interpolation weights are nonnegative, which keeps `W >= 0` and
//! monotone in `z`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, ValueField};
use crate::hjb::{FeedbackPolicy, XFeet, NO_CONTROL};
use crate::price::PriceModel;
use crate::system::{ControlGrid, ControlPoint, HydroSystem};

/// Spatial grid, the normalized level axis and the alpha bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentedGrid {
    /// Axes `x, y` (or `x, y1, y2`) and the time grid.
    pub base: GridSpec,
    /// Normalized level `zeta = z / S(t, x)`; contains 0 and starts at -1.
    pub zeta: Axis,
    /// Offset of the column scale `S` (keeps it positive at `x = 0` and `T`).
    pub scale_floor: f64,
    /// `alpha_max(t, x) = alpha_factor * sigma * S(t, x)`.
    pub alpha_factor: f64,
    /// Size of the nominal alpha grid. The minimum over alpha is taken over
    /// the whole interval; this only has to describe a usable grid.
    pub n_alpha: usize,
    pub kappa_bar: f64,
}

impl AugmentedGrid {
    /// `zeta` over `[-1, >= 0.1]` with `n` points and 0 a node.
    pub fn zeta_axis(n: usize) -> Result<Axis> {
        if n < 12 {
            return Err(Error::InvalidGrid("n_z must be at least 12".into()));
        }
        let below = ((n - 1) as f64 / 1.1).floor() as usize;
        Axis::with_step("zeta", -1.0, 1.0 / below as f64, n)
    }

    /// Defaults: floor `1e-3 G(0, x_max)`, `alpha_factor = 2`, 21 nominal alphas.
    pub fn new(
        model: &PriceModel,
        system: &HydroSystem,
        base: GridSpec,
        n_z: usize,
    ) -> Result<Self> {
        let kappa_bar = system.kappa_bar();
        let g0 = kappa_bar * model.integrated_mean(base.axes[0].max, base.horizon);
        let grid = AugmentedGrid {
            zeta: Self::zeta_axis(n_z)?,
            scale_floor: 1e-3 * g0,
            alpha_factor: 2.0,
            n_alpha: 21,
            kappa_bar,
            base,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alpha < 3 {
            return Err(Error::InvalidGrid(format!(
                "alpha grid needs at least 3 points, got {}",
                self.n_alpha
            )));
        }
        if !(self.alpha_factor >= 0.0 && self.alpha_factor.is_finite()) {
            return Err(Error::InvalidGrid(
                "alpha_factor must be finite and nonnegative".into(),
            ));
        }
        if !(self.scale_floor > 0.0 && self.scale_floor.is_finite()) {
            return Err(Error::InvalidGrid("scale floor must be positive".into()));
        }
        if self.zero_index().is_none() {
            return Err(Error::InvalidGrid("z-axis must contain 0 as a node".into()));
        }
        if self.zeta.min > -1.0 + 1e-12 || self.zeta.max < 0.0 {
            return Err(Error::InvalidGrid("z-axis must cover [-G, 0]".into()));
        }
        if self.base.axes[0].min != 0.0 {
            return Err(Error::InvalidGrid("x-axis must start at 0".into()));
        }
        Ok(())
    }

    pub fn zero_index(&self) -> Option<usize> {
        self.zeta.node_of(0.0, 1e-9)
    }

    /// Column scale `S(t, x)`. Affine in `x` (as `G` is), so interpolating
    /// between columns at fixed `zeta` is exact on functions affine in `z`.
    pub fn scale(&self, model: &PriceModel, t: f64, x: f64) -> f64 {
        let tau = (self.base.horizon - t).max(0.0);
        self.kappa_bar * model.integrated_mean(x, tau) + self.scale_floor
    }

    /// Bound on `|alpha|` at `(t, x)`.
    pub fn alpha_max(&self, model: &PriceModel, t: f64, x: f64) -> f64 {
        self.alpha_factor * model.sigma() * self.scale(model, t, x)
    }

    /// Level `z` of node `k` in the column at `(t, x)`.
    pub fn z_value(&self, model: &PriceModel, t: f64, x: f64, k: usize) -> f64 {
        self.zeta.value(k) * self.scale(model, t, x)
    }

    /// Nominal symmetric alpha grid at `(t, x)` (contains 0 when `n_alpha` is odd).
    pub fn alphas(&self, model: &PriceModel, t: f64, x: f64) -> Vec<f64> {
        let a = self.alpha_max(model, t, x);
        let n = self.n_alpha;
        (0..n)
            .map(|k| -a + 2.0 * a * k as f64 / (n - 1) as f64)
            .collect()
    }

    /// Grid of the stored `W` field: base axes followed by `zeta`.
    pub fn full_grid(&self) -> GridSpec {
        let mut axes = self.base.axes.clone();
        axes.push(self.zeta.clone());
        GridSpec {
            axes,
            n_steps: self.base.n_steps,
            horizon: self.base.horizon,
        }
    }

    fn n_y_nodes(&self) -> usize {
        self.base.axes[1..].iter().map(|a| a.n).product()
    }
}

/// Everything the level-set solver needs besides the model and the system.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetSetup {
    pub grid: AugmentedGrid,
    pub controls: ControlGrid,
    /// Zero-detection threshold for the reconstruction.
    pub eps_w: f64,
    /// `W` slices to keep (step indices); step 0 and `T` are always kept.
    pub keep_w_steps: Vec<usize>,
    pub memory_budget_mib: u64,
}

impl LevelSetSetup {
    /// Single dam: `x` in `[0, 20]` (101 points), `y` over `[-0.25, 1.25] y_max`
    /// with spacing `y_max / 100`, 200 steps, `n_z = 81`, 21 controls.
    pub fn default_single(model: &PriceModel, system: &HydroSystem) -> Result<Self> {
        let cap = system.capacity[0];
        let base = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 20.0, 101)?,
                Axis::with_step("y", -0.25 * cap, cap / 100.0, 151)?,
            ],
            200,
            system.horizon,
        )?;
        Self::with_base(model, system, base, 81, 21)
    }

    /// Coarse two-dam setup (at most 21 points per axis); demonstration only.
    pub fn demo_cascade(model: &PriceModel, system: &HydroSystem) -> Result<Self> {
        let axis = |name: &str, cap: f64| Axis::with_step(name, -0.25 * cap, cap / 12.0, 19);
        let base = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 20.0, 21)?,
                axis("y1", system.capacity[0])?,
                axis("y2", system.capacity[1])?,
            ],
            40,
            system.horizon,
        )?;
        Self::with_base(model, system, base, 21, 11)
    }

    pub fn with_base(
        model: &PriceModel,
        system: &HydroSystem,
        base: GridSpec,
        n_z: usize,
        controls_per_dim: usize,
    ) -> Result<Self> {
        let grid = AugmentedGrid::new(model, system, base, n_z)?;
        let g0 =
            system.kappa_bar() * model.integrated_mean(grid.base.axes[0].max, grid.base.horizon);
        Ok(LevelSetSetup {
            eps_w: default_eps_w(g0, n_z),
            grid,
            controls: ControlGrid::uniform(system, controls_per_dim)?,
            keep_w_steps: Vec::new(),
            memory_budget_mib: 3072,
        })
    }

    /// Rough peak memory of a solve, in MiB, with a breakdown.
    pub fn memory_estimate(&self) -> (u64, String) {
        let slab = self.grid.base.len() * self.grid.zeta.n * 8;
        let kept = self.keep_w_steps.len() + 2;
        let nodes = self.grid.base.len() * (self.grid.base.n_steps + 1);
        let recon = nodes * (8 + 8 + 2 + 4 + 4);
        let total = 2 * slab + kept * slab + recon;
        let mib = |b: usize| (b as f64 / (1 << 20) as f64).ceil() as u64;
        (
            mib(total),
            format!(
                "2 working slabs of {} MiB, {} retained W slices, {} MiB of reconstruction fields",
                mib(slab),
                kept,
                mib(recon)
            ),
        )
    }
}

/// Default zero-detection threshold for an `n_z`-point level axis.
pub fn default_eps_w(g0: f64, n_z: usize) -> f64 {
    EPS_FACTOR * g0 * 80.0 / (n_z - 1) as f64
}

const EPS_FACTOR: f64 = 1e-5;
const X_EXTRAP: bool = true;

/// `x (kappa(u) - kappa_bar)`, never positive.
pub fn tilde_l(system: &HydroSystem, x: f64, u: ControlPoint) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::NegativePrice(x));
    }
    Ok(x * (system.kappa(u)? - system.kappa_bar()))
}

/// Counters from structural checks performed during the solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LevelSetDiagnostics {
    pub min_w: f64,
    /// Pairs `(k, k+1)` along `z` with `W_k > W_{k+1}` in stored slices.
    pub z_monotonicity_violations: u64,
    /// Largest downward correction applied to restore monotonicity after
    /// the per-level alpha minimization (rounding-level by construction).
    pub max_monotone_repair: f64,
    pub terminal_exact: bool,
    /// `max |W(T - dt) - max(z, 0)|` over the grid.
    pub near_terminal_gap: f64,
    /// `near_terminal_gap / (dt (1 + |x| + |y|))`, maximized over nodes.
    pub near_terminal_constant: f64,
    pub wall_seconds: f64,
}

/// Reconstructed value, level and feedback.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// `V` over the base grid; `-inf` marks nodes without an admissible control.
    pub v: ValueField,
    /// `z*` per node; `-inf` where infeasible.
    pub z_star: ValueField,
    pub policy: FeedbackPolicy,
    pub eps_w: f64,
}

impl ReconstructionResult {
    pub fn is_feasible(&self, step: usize, node: usize) -> bool {
        self.v
            .slice_at_step(step)
            .is_some_and(|s| s[node].is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct LevelSetSolution {
    /// Retained `W` slices on the augmented grid (level axis normalized).
    pub w: ValueField,
    pub reconstruction: ReconstructionResult,
    pub diagnostics: LevelSetDiagnostics,
}

#[derive(Clone, Copy)]
struct Stencil {
    rows: [usize; 4],
    weights: [f64; 4],
    len: usize,
    /// Penalty for the part of the foot beyond the y-grid, held until `T`.
    extra: f64,
}

/// Multilinear stencil of `foot` over the y-axes, clamped to the grid.
///
/// Clamping alone would let a path park on the grid edge at a bounded
/// penalty, so the extra distance of an outside foot is charged as if it
/// persisted until `T`.
fn stencil(axes: &[Axis], foot: &[f64], system: &HydroSystem, remaining: f64) -> Stencil {
    let clamped: Vec<f64> = axes
        .iter()
        .zip(foot)
        .map(|(a, &v)| v.clamp(a.min, a.max))
        .collect();
    let extra = (system.distance_to_k(foot) - system.distance_to_k(&clamped)).max(0.0) * remaining;
    let mut st = Stencil {
        rows: [0; 4],
        weights: [0.0; 4],
        len: 1 << axes.len(),
        extra,
    };
    let cells: Vec<(usize, f64)> = axes.iter().zip(foot).map(|(a, &v)| a.locate(v)).collect();
    for corner in 0..st.len {
        let mut row = 0;
        let mut w = 1.0;
        for (d, (a, &(i, f))) in axes.iter().zip(&cells).enumerate() {
            let up = (corner >> (axes.len() - 1 - d)) & 1;
            row = row * a.n + i + up;
            w *= if up == 1 { f } else { 1.0 - f };
        }
        st.rows[corner] = row;
        st.weights[corner] = w;
    }
    st
}

/// Monotone piecewise-linear extension of a level line: constant below the
/// first node, slope 1 (in `z`) above the last. `h` is the cell size in `z`.
#[inline]
fn eval_line(line: &[f64], q: f64, h: f64) -> f64 {
    let last = line.len() - 1;
    if q <= 0.0 {
        line[0]
    } else if q >= last as f64 {
        line[last] + (q - last as f64) * h
    } else {
        let i = q as usize;
        let w = q - i as f64;
        let (a, b) = (line[i], line[i + 1]);
        (a + w * (b - a)).min(b)
    }
}

/// Per-step data shared by all nodes.
struct StepContext<'a> {
    feet: &'a XFeet,
    dt: f64,
    /// `y`-foot stencil per (y-node, control).
    stencils: Vec<Vec<Stencil>>,
    /// `kappa_bar - kappa(u)` per control.
    kappa_gap: Vec<f64>,
    /// Cell size in `z` at each node (time `t_n`) and at its two feet (`t_{n+1}`).
    h_node: Vec<f64>,
    h_plus: Vec<f64>,
    h_minus: Vec<f64>,
    /// `alpha_max sqrt(dt)` per x-node.
    reach: Vec<f64>,
    zero: usize,
}

impl<'a> StepContext<'a> {
    fn new(
        grid: &AugmentedGrid,
        model: &PriceModel,
        system: &HydroSystem,
        controls: &ControlGrid,
        feet: &'a XFeet,
        step: usize,
    ) -> Self {
        let base = &grid.base;
        let dt = base.dt();
        let (t0, t1) = (base.time(step), base.time(step + 1));
        let inflow: Vec<f64> = system.inflows.iter().map(|b| b.integral(t0, t1)).collect();
        let y_axes = &base.axes[1..];
        let ny = grid.n_y_nodes();
        let remaining = base.horizon - t1;
        let y_points: Vec<Vec<f64>> = (0..ny)
            .map(|j| {
                let mut rest = j;
                let mut p = vec![0.0; y_axes.len()];
                for (d, a) in y_axes.iter().enumerate().rev() {
                    p[d] = a.value(rest % a.n);
                    rest /= a.n;
                }
                p
            })
            .collect();
        let stencils = y_points
            .iter()
            .map(|p| {
                controls
                    .points
                    .iter()
                    .map(|u| {
                        let foot: Vec<f64> = if y_axes.len() == 1 {
                            vec![p[0] + inflow[0] - u.u1 * dt]
                        } else {
                            vec![
                                p[0] + inflow[0] - u.u1 * dt,
                                p[1] + inflow[1] + (u.u1 - u.u2) * dt,
                            ]
                        };
                        let mut st = stencil(y_axes, &foot, system, remaining);
                        st.extra += system.mean_distance_on_segment(p, &foot) * dt;
                        st
                    })
                    .collect()
            })
            .collect();
        let kappa_gap = controls
            .points
            .iter()
            .map(|&u| grid.kappa_bar - system.kappa_at(u))
            .collect();
        let x_axis = &base.axes[0];
        let dzeta = grid.zeta.step();
        let foot_x = |(c, w): (usize, f64)| x_axis.value(c) + w * x_axis.step();
        let h_node = feet
            .x
            .iter()
            .map(|&x| dzeta * grid.scale(model, t0, x))
            .collect();
        let h_plus = feet
            .plus
            .iter()
            .map(|&f| dzeta * grid.scale(model, t1, foot_x(f)))
            .collect();
        let h_minus = feet
            .minus
            .iter()
            .map(|&f| dzeta * grid.scale(model, t1, foot_x(f)))
            .collect();
        let reach = feet
            .x
            .iter()
            .map(|&x| grid.alpha_max(model, t0, x) * dt.sqrt())
            .collect();
        StepContext {
            feet,
            dt,
            stencils,
            kappa_gap,
            h_node,
            h_plus,
            h_minus,
            reach,
            zero: grid.zero_index().expect("validated"),
        }
    }

    /// y-interpolated level line of `slab` at stencil `st`.
    fn line(&self, slab: &[f64], st: &Stencil, out: &mut [f64]) {
        let nz = out.len();
        let r0 = &slab[st.rows[0] * nz..(st.rows[0] + 1) * nz];
        let w0 = st.weights[0];
        for k in 0..nz {
            out[k] = w0 * r0[k];
        }
        for m in 1..st.len {
            let r = &slab[st.rows[m] * nz..(st.rows[m] + 1) * nz];
            let w = st.weights[m];
            for k in 0..nz {
                out[k] += w * r[k];
            }
        }
        if st.extra > 0.0 {
            for v in out.iter_mut() {
                *v += st.extra;
            }
        }
    }

    /// Minimum over `|a| <= reach` of `1/2 [F+(cp + a/hp) + F-(cm - a/hm)]`
    /// and its minimizer. The function is piecewise linear in `a`; its kinks are
    /// where either argument crosses a node.
    fn min_alpha(
        fp: &[f64],
        fm: &[f64],
        cp: f64,
        cm: f64,
        hp: f64,
        hm: f64,
        reach: f64,
    ) -> (f64, f64) {
        let f = |a: f64| 0.5 * (eval_line(fp, cp + a / hp, hp) + eval_line(fm, cm - a / hm, hm));
        let mut best = (f(0.0), 0.0);
        if best.0 <= 0.0 || reach <= 0.0 {
            return best;
        }
        let mut take = |a: f64| {
            let v = f(a);
            if v < best.0 {
                best = (v, a);
            }
        };
        take(-reach);
        take(reach);
        let last = (fp.len() - 1) as f64;
        let (rp, rm) = (reach / hp, reach / hm);
        let lo = (cp - rp).ceil().max(0.0);
        let hi = (cp + rp).floor().min(last);
        let mut m = lo;
        while m <= hi {
            take((m - cp) * hp);
            m += 1.0;
        }
        let lo = (cm - rm).ceil().max(0.0);
        let hi = (cm + rm).floor().min(last);
        let mut m = lo;
        while m <= hi {
            take((cm - m) * hm);
            m += 1.0;
        }
        best
    }

    /// Fills `col` with the one-step operator at every level of node `(i, j)`
    /// and keeps the per-control lines in `scratch` for the feedback. Returns
    /// the largest monotonicity repair applied.
    fn column(
        &self,
        plus: &[f64],
        minus: &[f64],
        i: usize,
        j: usize,
        col: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let nz = col.len();
        let (hn, hp, hm) = (self.h_node[i], self.h_plus[i], self.h_minus[i]);
        let zero = self.zero as f64;
        let reach = self.reach[i];
        let x = self.feet.x[i];
        let stencils = &self.stencils[j];
        for (ku, st) in stencils.iter().enumerate() {
            let (fp, fm) = scratch.lines_mut(ku, nz);
            self.line(plus, st, fp);
            self.line(minus, st, fm);
        }
        let mut first = 0;
        for (k, c) in col.iter_mut().enumerate() {
            let base = (k as f64 - zero) * hn;
            *c = f64::INFINITY;
            // Start with the previous level's winner; skip controls whose
            // lower bound over the alpha interval cannot beat the incumbent.
            let lead = first;
            for ku in std::iter::once(lead).chain((0..stencils.len()).filter(|&u| u != lead)) {
                let (fp, fm) = scratch.lines(ku, nz);
                let z = base + x * self.kappa_gap[ku] * self.dt;
                let (cp, cm) = (zero + z / hp, zero + z / hm);
                let bound =
                    0.5 * (eval_line(fp, cp - reach / hp, hp) + eval_line(fm, cm - reach / hm, hm));
                if bound >= *c {
                    continue;
                }
                let (v, _) = Self::min_alpha(fp, fm, cp, cm, hp, hm, reach);
                if v < *c {
                    *c = v;
                    first = ku;
                    if v <= 0.0 {
                        break;
                    }
                }
            }
        }
        // The alpha candidates differ between levels, so rounding can break
        // monotonicity (and the sign near z = 0) in the last bits; restore
        // both from the top.
        let mut repair = 0.0f64;
        if col[nz - 1] < 0.0 {
            repair = -col[nz - 1];
            col[nz - 1] = 0.0;
        }
        for k in (0..nz - 1).rev() {
            if col[k] < 0.0 {
                repair = repair.max(-col[k]);
                col[k] = 0.0;
            }
            if col[k] > col[k + 1] {
                repair = repair.max(col[k] - col[k + 1]);
                col[k] = col[k + 1];
            }
        }
        repair
    }

    /// Argmin `(control index, alpha, value)` of the operator at fractional level
    /// index `q`, using the lines left in `scratch` by [`Self::column`].
    fn feedback(
        &self,
        i: usize,
        j: usize,
        q: f64,
        scratch: &Scratch,
        nz: usize,
    ) -> (u16, f64, f64) {
        let (hn, hp, hm) = (self.h_node[i], self.h_plus[i], self.h_minus[i]);
        let zero = self.zero as f64;
        let x = self.feet.x[i];
        let mut best = (NO_CONTROL, 0.0, f64::INFINITY);
        for ku in 0..self.stencils[j].len() {
            let (fp, fm) = scratch.lines(ku, nz);
            let z = (q - zero) * hn + x * self.kappa_gap[ku] * self.dt;
            let (v, a) =
                Self::min_alpha(fp, fm, zero + z / hp, zero + z / hm, hp, hm, self.reach[i]);
            if v < best.2 {
                best = (ku as u16, a / self.dt.sqrt(), v);
            }
        }
        best
    }
}

/// Per-thread buffers: one plus/minus line pair per control.
struct Scratch {
    lines: Vec<f64>,
}

impl Scratch {
    fn new(nz: usize, n_controls: usize) -> Self {
        Scratch {
            lines: vec![0.0; 2 * nz * n_controls],
        }
    }

    fn lines_mut(&mut self, ku: usize, nz: usize) -> (&mut [f64], &mut [f64]) {
        self.lines[2 * ku * nz..2 * (ku + 1) * nz].split_at_mut(nz)
    }

    fn lines(&self, ku: usize, nz: usize) -> (&[f64], &[f64]) {
        self.lines[2 * ku * nz..2 * (ku + 1) * nz].split_at(nz)
    }
}

/// Slabs of `next` at the two x-feet of node `i`, each `n_y * n_z` long.
fn x_slabs(feet: &XFeet, next: &[f64], i: usize, row: usize, plus: &mut [f64], minus: &mut [f64]) {
    for (out, (c, w)) in [(plus, feet.plus[i]), (minus, feet.minus[i])] {
        let (a, b) = (
            &next[c * row..(c + 1) * row],
            &next[(c + 1) * row..(c + 2) * row],
        );
        for k in 0..row {
            out[k] = (1.0 - w) * a[k] + w * b[k];
        }
    }
}

fn check_slice(grid: &AugmentedGrid, slice: &[f64]) -> Result<()> {
    let n = grid.base.len() * grid.zeta.n;
    if slice.len() != n {
        return Err(Error::InvalidGrid(format!(
            "W slice has {} entries, augmented grid has {n}",
            slice.len()
        )));
    }
    Ok(())
}

/// One backward step of the augmented scheme (no state constraint).
pub fn sl_step_augmented(
    next: &[f64],
    grid: &AugmentedGrid,
    step: usize,
    model: &PriceModel,
    system: &HydroSystem,
    controls: &ControlGrid,
) -> Result<Vec<f64>> {
    grid.validate()?;
    check_slice(grid, next)?;
    let feet = XFeet::new(&grid.base.axes[0], model, grid.base.dt(), X_EXTRAP);
    let ctx = StepContext::new(grid, model, system, controls, &feet, step);
    let nz = grid.zeta.n;
    let ny = grid.n_y_nodes();
    let row = ny * nz;
    let out: Vec<Vec<f64>> = (0..grid.base.axes[0].n)
        .into_par_iter()
        .map(|i| {
            let mut plus = vec![0.0; row];
            let mut minus = vec![0.0; row];
            x_slabs(&feet, next, i, row, &mut plus, &mut minus);
            let mut scratch = Scratch::new(nz, controls.len());
            let mut slab = vec![0.0; row];
            for j in 0..ny {
                ctx.column(
                    &plus,
                    &minus,
                    i,
                    j,
                    &mut slab[j * nz..(j + 1) * nz],
                    &mut scratch,
                );
            }
            slab
        })
        .collect();
    Ok(out.concat())
}

/// Terminal condition `max(z, 0)` on the augmented grid.
pub fn terminal_w(grid: &AugmentedGrid, model: &PriceModel) -> Vec<f64> {
    let t = grid.base.horizon;
    let zeta = grid.zeta.nodes();
    let mut w = Vec::with_capacity(grid.base.len() * zeta.len());
    let ny = grid.n_y_nodes();
    for x in grid.base.axes[0].nodes() {
        let s = grid.scale(model, t, x);
        for _ in 0..ny {
            w.extend(zeta.iter().map(|&v| (v * s).max(0.0)));
        }
    }
    w
}

/// Largest level index `<= zero` with `W <= eps`, refined by inverse linear
/// interpolation towards the next node. `None` if even the lowest level fails.
pub fn threshold_level(col: &[f64], zero: usize, eps: f64) -> Option<f64> {
    let k = col[..=zero].iter().rposition(|&w| w <= eps)?;
    if k == zero {
        return Some(zero as f64);
    }
    let (lo, hi) = (col[k], col[k + 1]);
    let frac = if hi > lo {
        ((eps - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Some(k as f64 + frac)
}

/// Backward recursion for `W` with in-loop reconstruction of `V`, `z*` and the feedback.
pub fn solve_levelset(
    model: &PriceModel,
    system: &HydroSystem,
    setup: &LevelSetSetup,
) -> Result<LevelSetSolution> {
    model.validate()?;
    system.validate()?;
    let grid = &setup.grid;
    grid.validate()?;
    if grid.base.axes.len() != system.n_dams() + 1 {
        return Err(Error::InvalidGrid(format!(
            "expected x plus {} y-axes",
            system.n_dams()
        )));
    }
    if (grid.base.horizon - system.horizon).abs() > 1e-12 {
        return Err(Error::InvalidGrid(
            "grid horizon differs from the system's".into(),
        ));
    }
    if setup.controls.len() >= NO_CONTROL as usize {
        return Err(Error::InvalidGrid(
            "too many controls for a u16 policy".into(),
        ));
    }
    let (need, report) = setup.memory_estimate();
    if need > setup.memory_budget_mib {
        return Err(Error::MemoryBudget {
            required_mib: need,
            budget_mib: setup.memory_budget_mib,
            report,
        });
    }

    let started = std::time::Instant::now();
    let base = &grid.base;
    let nz = grid.zeta.n;
    let ny = grid.n_y_nodes();
    let nx = base.axes[0].n;
    let row = ny * nz;
    let zero = grid.zero_index().expect("validated");
    let dt = base.dt();
    let feet = XFeet::new(&base.axes[0], model, dt, X_EXTRAP);
    let zeta = grid.zeta.nodes();

    let mut w_field = ValueField::new("W", grid.full_grid());
    let mut v_field = ValueField::new("V_reconstructed", base.clone());
    let mut z_field = ValueField::new("z_star", base.clone());
    let mut policy = FeedbackPolicy::new(base.clone(), setup.controls.points.clone());
    policy.indices = vec![Vec::new(); base.n_steps];
    let mut alphas = vec![Vec::new(); base.n_steps];
    let mut z_levels = vec![Vec::new(); base.n_steps];

    let mut diag = LevelSetDiagnostics {
        min_w: f64::INFINITY,
        ..Default::default()
    };

    let mut next = terminal_w(grid, model);
    diag.terminal_exact = next.chunks(nz).enumerate().all(|(node, c)| {
        let s = grid.scale(model, base.horizon, feet.x[node / ny]);
        c.iter()
            .zip(&zeta)
            .all(|(&w, &v)| w == (v * s).max(0.0) && w >= 0.0)
    });
    w_field.insert(base.n_steps, next.clone());
    // At T the value is 0 on K and undefined outside.
    let in_k: Vec<bool> = (0..base.len())
        .map(|node| system.distance_to_k(&base.point(node)[1..]) == 0.0)
        .collect();
    let terminal_v: Vec<f64> = in_k
        .iter()
        .map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    v_field.insert(base.n_steps, terminal_v.clone());
    z_field.insert(base.n_steps, terminal_v);

    for n in (0..base.n_steps).rev() {
        let ctx = StepContext::new(grid, model, system, &setup.controls, &feet, n);
        let t = base.time(n);
        let eps = setup.eps_w;
        let parts: Vec<ColumnBlock> = (0..nx)
            .into_par_iter()
            .map(|i| {
                let mut plus = vec![0.0; row];
                let mut minus = vec![0.0; row];
                x_slabs(&feet, &next, i, row, &mut plus, &mut minus);
                let mut scratch = Scratch::new(nz, setup.controls.len());
                let x = feet.x[i];
                let g = grid.kappa_bar * model.integrated_mean(x, base.horizon - t);
                let mut block = ColumnBlock::new(row, ny);
                for j in 0..ny {
                    let col = &mut block.w[j * nz..(j + 1) * nz];
                    let repair = ctx.column(&plus, &minus, i, j, col, &mut scratch);
                    block.repair = block.repair.max(repair);
                    match threshold_level(col, zero, eps).filter(|_| in_k[i * ny + j]) {
                        Some(q) => {
                            let z_star = (q - zero as f64) * ctx.h_node[i];
                            let (u, a, _) = ctx.feedback(i, j, q, &scratch, nz);
                            block.v[j] = z_star + g;
                            block.z[j] = z_star;
                            block.u[j] = u;
                            block.alpha[j] = a as f32;
                        }
                        None => {
                            block.v[j] = f64::NEG_INFINITY;
                            block.z[j] = f64::NEG_INFINITY;
                            block.u[j] = NO_CONTROL;
                            block.alpha[j] = 0.0;
                        }
                    }
                }
                block
            })
            .collect();

        let mut cur = Vec::with_capacity(nx * row);
        let mut v_slice = Vec::with_capacity(nx * ny);
        let mut z_slice = Vec::with_capacity(nx * ny);
        let mut u_slice = Vec::with_capacity(nx * ny);
        let mut a_slice = Vec::with_capacity(nx * ny);
        for b in parts {
            cur.extend_from_slice(&b.w);
            v_slice.extend_from_slice(&b.v);
            z_slice.extend_from_slice(&b.z);
            u_slice.extend_from_slice(&b.u);
            a_slice.extend_from_slice(&b.alpha);
            diag.max_monotone_repair = diag.max_monotone_repair.max(b.repair);
        }
        for col in cur.chunks(nz) {
            diag.min_w = col.iter().copied().fold(diag.min_w, f64::min);
            diag.z_monotonicity_violations += col.windows(2).filter(|p| p[0] > p[1]).count() as u64;
        }
        if n + 1 == base.n_steps {
            for (node, col) in cur.chunks(nz).enumerate() {
                let p = base.point(node);
                let scale: f64 = 1.0 + p.iter().map(|v| v.abs()).sum::<f64>();
                let h = ctx.h_node[node / ny];
                for (k, &w) in col.iter().enumerate() {
                    let z = (k as f64 - zero as f64) * h;
                    let gap = (w - z.max(0.0)).abs();
                    diag.near_terminal_gap = diag.near_terminal_gap.max(gap);
                    diag.near_terminal_constant =
                        diag.near_terminal_constant.max(gap / (dt * scale));
                }
            }
        }
        policy.indices[n] = u_slice;
        alphas[n] = a_slice;
        z_levels[n] = z_slice.iter().map(|&z| z as f32).collect();
        v_field.insert(n, v_slice);
        z_field.insert(n, z_slice);
        if n == 0 || setup.keep_w_steps.contains(&n) {
            w_field.insert(n, cur.clone());
        }
        next = cur;
    }
    policy.alphas = Some(alphas);
    policy.z_star = Some(z_levels);
    diag.wall_seconds = started.elapsed().as_secs_f64();
    log::info!(
        "level-set: {} x {} nodes x {} steps in {:.1}s",
        base.len(),
        nz,
        base.n_steps,
        diag.wall_seconds
    );
    let meta = serde_json::json!({
        "solver": "levelset",
        "model": model,
        "system": system,
        "kappa_bar": grid.kappa_bar,
        "eps_w": setup.eps_w,
        "alpha_factor": grid.alpha_factor,
        "scale_floor": grid.scale_floor,
        "n_z": nz,
        "n_controls": setup.controls.len(),
        "dt": dt,
    });
    w_field.meta = meta.clone();
    v_field.meta = meta.clone();
    z_field.meta = meta;
    Ok(LevelSetSolution {
        w: w_field,
        reconstruction: ReconstructionResult {
            v: v_field,
            z_star: z_field,
            policy,
            eps_w: setup.eps_w,
        },
        diagnostics: diag,
    })
}

struct ColumnBlock {
    w: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
    u: Vec<u16>,
    alpha: Vec<f32>,
    repair: f64,
}

impl ColumnBlock {
    fn new(row: usize, ny: usize) -> Self {
        ColumnBlock {
            w: vec![0.0; row],
            v: vec![0.0; ny],
            z: vec![0.0; ny],
            u: vec![NO_CONTROL; ny],
            alpha: vec![0.0; ny],
            repair: 0.0,
        }
    }
}

/// Reconstructs `V` and `z*` from the retained `W` slices with threshold `eps`.
pub fn reconstruct_v(
    w: &ValueField,
    grid: &AugmentedGrid,
    model: &PriceModel,
    system: &HydroSystem,
    eps: f64,
) -> Result<(ValueField, ValueField)> {
    let base = &grid.base;
    let nz = grid.zeta.n;
    let zero = grid.zero_index().expect("validated");
    let mut v = ValueField::new("V_reconstructed", base.clone());
    let mut z = ValueField::new("z_star", base.clone());
    for (&n, slice) in w.steps.iter().zip(&w.slices) {
        check_slice(grid, slice)?;
        let t = base.time(n);
        let mut vs = Vec::with_capacity(base.len());
        let mut zs = Vec::with_capacity(base.len());
        for (node, col) in slice.chunks(nz).enumerate() {
            let p = base.point(node);
            let level = (system.distance_to_k(&p[1..]) == 0.0)
                .then(|| threshold_level(col, zero, eps))
                .flatten();
            match level {
                Some(q) if n < base.n_steps => {
                    let z_star = (q - zero as f64) * grid.zeta.step() * grid.scale(model, t, p[0]);
                    let g = model.accumulated_price(grid.kappa_bar, t, p[0], base.horizon)?;
                    vs.push(z_star + g);
                    zs.push(z_star);
                }
                Some(_) => {
                    vs.push(0.0);
                    zs.push(0.0);
                }
                None => {
                    vs.push(f64::NEG_INFINITY);
                    zs.push(f64::NEG_INFINITY);
                }
            }
        }
        v.insert(n, vs);
        z.insert(n, zs);
    }
    v.meta = w.meta.clone();
    z.meta = w.meta.clone();
    Ok((v, z))
}

/// Feedback for step `step` at the given levels `z*`, from the retained `W`
/// slice at `step + 1`. Infeasible nodes get `NO_CONTROL`.
pub fn reconstruct_feedback(
    w: &ValueField,
    z_star: &ValueField,
    model: &PriceModel,
    system: &HydroSystem,
    setup: &LevelSetSetup,
    step: usize,
) -> Result<FeedbackPolicy> {
    let grid = &setup.grid;
    let next = w.slice_at_step(step + 1).ok_or_else(|| {
        Error::InvalidGrid(format!("W slice at step {} was not retained", step + 1))
    })?;
    check_slice(grid, next)?;
    let levels = z_star
        .slice_at_step(step)
        .ok_or_else(|| Error::InvalidGrid(format!("z* slice at step {step} missing")))?;
    let feet = XFeet::new(&grid.base.axes[0], model, grid.base.dt(), X_EXTRAP);
    let ctx = StepContext::new(grid, model, system, &setup.controls, &feet, step);
    let nz = grid.zeta.n;
    let ny = grid.n_y_nodes();
    let row = ny * nz;
    let zero = ctx.zero as f64;
    let mut indices = vec![NO_CONTROL; grid.base.len()];
    let mut alphas = vec![0.0f32; grid.base.len()];
    let mut plus = vec![0.0; row];
    let mut minus = vec![0.0; row];
    let mut scratch = Scratch::new(nz, setup.controls.len());
    for i in 0..grid.base.axes[0].n {
        x_slabs(&feet, next, i, row, &mut plus, &mut minus);
        for j in 0..ny {
            let z = levels[i * ny + j];
            if !z.is_finite() {
                continue;
            }
            for (ku, st) in ctx.stencils[j].iter().enumerate() {
                let (fp, fm) = scratch.lines_mut(ku, nz);
                ctx.line(&plus, st, fp);
                ctx.line(&minus, st, fm);
            }
            let q = zero + z / ctx.h_node[i];
            let (u, a, _) = ctx.feedback(i, j, q, &scratch, nz);
            indices[i * ny + j] = u;
            alphas[i * ny + j] = a as f32;
        }
    }
    let mut policy = FeedbackPolicy::new(grid.base.clone(), setup.controls.points.clone());
    policy.indices = vec![Vec::new(); grid.base.n_steps];
    policy.indices[step] = indices;
    let mut all_alphas = vec![Vec::new(); grid.base.n_steps];
    all_alphas[step] = alphas;
    policy.alphas = Some(all_alphas);
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::system::Inflow;

    fn small(model: &PriceModel, system: &HydroSystem, nx: usize, steps: usize) -> LevelSetSetup {
        let cap = system.capacity[0];
        let base = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 10.0, nx).unwrap(),
                Axis::with_step("y", -0.25 * cap, cap / 20.0, 31).unwrap(),
            ],
            steps,
            system.horizon,
        )
        .unwrap();
        LevelSetSetup::with_base(model, system, base, 41, 11).unwrap()
    }

    #[test]
    fn tilde_l_examples() {
        let s = HydroSystem::reference_single(3.0);
        assert_eq!(tilde_l(&s, 5.0, ControlPoint::single(3.0)).unwrap(), 0.0);
        assert_eq!(tilde_l(&s, 5.0, ControlPoint::single(0.0)).unwrap(), -15.0);
        assert_eq!(tilde_l(&s, 0.0, ControlPoint::single(1.2)).unwrap(), 0.0);
        assert!(tilde_l(&s, -1.0, ControlPoint::single(1.0)).is_err());
    }

    #[test]
    fn level_axis_covers_admissible_range() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(3.0);
        let setup = small(&m, &s, 11, 10);
        let g = &setup.grid;
        assert!(g.zero_index().is_some());
        assert!(g.zeta.max >= 0.1);
        for x in [0.0, 1.0, 5.0, 10.0] {
            let big_g = m.accumulated_price(3.0, 0.0, x, 1.0).unwrap();
            assert!(g.z_value(&m, 0.0, x, 0) <= -big_g);
        }
    }

    #[test]
    fn alpha_grid_validation() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(3.0);
        let mut setup = small(&m, &s, 11, 10);
        setup.grid.n_alpha = 2;
        assert!(setup.grid.validate().is_err());
        setup.grid.n_alpha = 5;
        let a = setup.grid.alphas(&m, 0.0, 5.0);
        assert_eq!(a[2], 0.0);
        assert_relative_eq!(a[0], -a[4]);
    }

    #[test]
    fn eval_line_extension_is_monotone() {
        let line = [0.0, 0.0, 0.3, 1.0];
        let mut prev = f64::NEG_INFINITY;
        for k in -20..80 {
            let v = eval_line(&line, k as f64 * 0.05, 0.5);
            assert!(v >= prev);
            prev = v;
        }
        assert_eq!(eval_line(&line, -3.0, 0.5), 0.0);
        assert_relative_eq!(eval_line(&line, 5.0, 0.5), 2.0);
    }

    #[test]
    fn min_alpha_matches_dense_scan() {
        let fp = [0.0, 0.1, 0.4, 0.9, 1.6, 2.5];
        let fm = [0.0, 0.0, 0.2, 0.3, 1.5, 2.0];
        let (v, a) = StepContext::min_alpha(&fp, &fm, 2.3, 2.6, 0.7, 0.9, 1.5);
        let mut dense = f64::INFINITY;
        for k in 0..=30000 {
            let a = -1.5 + 3.0 * k as f64 / 30000.0;
            let val =
                0.5 * (eval_line(&fp, 2.3 + a / 0.7, 0.7) + eval_line(&fm, 2.6 - a / 0.9, 0.9));
            dense = dense.min(val);
        }
        assert!(v <= dense + 1e-12);
        assert!(dense - v < 1e-3);
        assert!(a.abs() <= 1.5);
    }

    #[test]
    fn one_step_examples() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(3.0);
        let setup = small(&m, &s, 11, 10);
        let g = &setup.grid;
        let w = sl_step_augmented(&terminal_w(g, &m), g, 9, &m, &s, &setup.controls).unwrap();
        let nz = g.zeta.n;
        let ny = g.base.axes[1].n;
        let y = &g.base.axes[1];
        let j_mid = y.nearest(0.5);
        let j_out = y.node_of(1.2, 1e-9).unwrap();
        let dt = g.base.dt();
        for i in 0..g.base.axes[0].n {
            let mid = &w[(i * ny + j_mid) * nz..][..nz];
            // Deep below zero nothing can lift max(z, 0) above 0 in one step.
            assert_eq!(mid[0], 0.0);
            // Outside K every control pays at least the mean distance along
            // its own segment, and full release gives the shortest one.
            let inflow = s.inflows[0].integral(g.base.time(9), g.base.time(10));
            let foot = 1.2 + inflow - 3.0 * dt;
            let floor = s.mean_distance_on_segment(&[1.2], &[foot]) * dt;
            let out = &w[(i * ny + j_out) * nz..][..nz];
            assert!(out.iter().all(|&v| v >= floor - 1e-15));
            assert!(out[0] > 0.0);
        }
    }

    #[test]
    fn threshold_level_examples() {
        let col = [0.0, 0.0, 0.05, 0.5, 1.0, 2.0];
        assert_relative_eq!(threshold_level(&col, 4, 0.1).unwrap(), 2.0 + 0.05 / 0.45);
        assert_eq!(threshold_level(&col, 1, 0.1), Some(1.0));
        assert_eq!(threshold_level(&[0.3, 0.4, 0.5], 2, 0.1), None);
    }

    #[test]
    fn structural_invariants_on_small_grid() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(2.0);
        let setup = small(&m, &s, 11, 20);
        let sol = solve_levelset(&m, &s, &setup).unwrap();
        let d = &sol.diagnostics;
        assert!(d.terminal_exact);
        assert!(d.min_w >= 0.0);
        assert_eq!(d.z_monotonicity_violations, 0);
        assert!(d.max_monotone_repair < 1e-12, "{}", d.max_monotone_repair);
        // Affine in z above 0: W(z) - z is constant over z >= 0 nodes.
        let g = &setup.grid;
        let zero = g.zero_index().unwrap();
        let w0 = sol.w.slice_at_step(0).unwrap();
        let ny = g.base.axes[1].n;
        for (node, col) in w0.chunks(g.zeta.n).enumerate() {
            let x = g.base.axes[0].value(node / ny);
            let off: Vec<f64> = (zero..g.zeta.n)
                .map(|k| col[k] - g.z_value(&m, 0.0, x, k))
                .collect();
            for o in &off {
                assert!((o - off[0]).abs() <= 1e-9 * (1.0 + off[0].abs()), "{off:?}");
            }
        }
    }

    #[test]
    fn outside_k_is_infeasible() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(3.0);
        let setup = small(&m, &s, 11, 20);
        let sol = solve_levelset(&m, &s, &setup).unwrap();
        let v = &sol.reconstruction.v;
        assert_eq!(v.interpolate(0.0, &[5.0, 1.2]).unwrap(), f64::NEG_INFINITY);
        assert!(v.interpolate(0.0, &[5.0, 0.5]).unwrap().is_finite());
        let err = sol.reconstruction.policy.control(0.0, &[5.0, 1.2]);
        assert!(matches!(err, Err(Error::InfeasibleNode { .. })));
    }

    #[test]
    fn standalone_reconstruction_matches_in_loop() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(3.0);
        let mut setup = small(&m, &s, 11, 20);
        setup.keep_w_steps = vec![1];
        let sol = solve_levelset(&m, &s, &setup).unwrap();
        let (v, z) = reconstruct_v(&sol.w, &setup.grid, &m, &s, setup.eps_w).unwrap();
        let a = v.slice_at_step(0).unwrap();
        let b = sol.reconstruction.v.slice_at_step(0).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!(x == y || (x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        let fb = reconstruct_feedback(&sol.w, &z, &m, &s, &setup, 0).unwrap();
        assert_eq!(fb.indices[0], sol.reconstruction.policy.indices[0]);
    }

    #[test]
    fn memory_budget_is_enforced() {
        let m = PriceModel::gbm(0.05, 0.1);
        let s = HydroSystem::reference_single(3.0);
        let mut setup = small(&m, &s, 11, 20);
        setup.memory_budget_mib = 0;
        assert!(matches!(
            solve_levelset(&m, &s, &setup),
            Err(Error::MemoryBudget { .. })
        ));
    }

    #[test]
    fn frozen_price_oracle_on_coarse_grid() {
        // Constant price 5, constant inflow 0.5, full reservoir: V = 5 * 1.5.
        // Coarse in x and t only; a y step of 0.05 smears the onset of W
        // enough to bias V low by about 1.
        let m = PriceModel::gbm(0.0, 0.0);
        let s = HydroSystem::single(Inflow::constant(0.5), 1.0, 3.0, 1.0).unwrap();
        let base = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 10.0, 11).unwrap(),
                Axis::with_step("y", -0.25, 0.01, 151).unwrap(),
            ],
            100,
            1.0,
        )
        .unwrap();
        let setup = LevelSetSetup::with_base(&m, &s, base, 81, 21).unwrap();
        let sol = solve_levelset(&m, &s, &setup).unwrap();
        let v = sol.reconstruction.v.interpolate(0.0, &[5.0, 1.0]).unwrap();
        assert!((v - 7.5).abs() < 0.3, "V = {v}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn augmented_step_is_monotone(seed in 0u64..1000) {
            let m = PriceModel::gbm(0.05, 0.1);
            let s = HydroSystem::reference_single(3.0);
            let setup = small(&m, &s, 7, 10);
            let g = &setup.grid;
            let nz = g.zeta.n;
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            // Random slices nondecreasing in z, then a nonnegative bump away
            // from the two top x columns (extrapolated above x_max).
            let mut base = vec![0.0; g.base.len() * nz];
            let bumpable = (g.base.axes[0].n - 2) * g.n_y_nodes() * nz;
            for col in base.chunks_mut(nz) {
                let mut acc = 0.0;
                for v in col.iter_mut() {
                    acc += rng.random::<f64>();
                    *v = acc;
                }
            }
            let raised: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    if k < bumpable && rng.random::<f64>() < 0.3 {
                        v + rng.random::<f64>()
                    } else {
                        v
                    }
                })
                .collect();
            let a = sl_step_augmented(&base, g, 3, &m, &s, &setup.controls).unwrap();
            let b = sl_step_augmented(&raised, g, 3, &m, &s, &setup.controls).unwrap();
            for (lo, hi) in a.iter().zip(&b) {
                prop_assert!(*hi >= lo - 1e-12);
            }
        }
    }
}
