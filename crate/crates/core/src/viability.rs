//! Controllable region of a single dam when inflow can exceed the discharge bound.
//!
//! Analytically, the level `y` is controllable at `t` iff `y <= hat_y(t)` with
//! `hat_y(t) = y_max - max(int_t^{T* v t} (beta - u_max) ds, 0)`, where `[t*, T*]`
//! is the interval on which `beta >= u_max`. Numerically, the same set is the
//! zero level of `theta(t, y) = inf_u int_t^T d_K(Y_s) ds`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{lerp_clamped, Axis, GridSpec, ValueField};
use crate::system::{ControlGrid, HydroSystem};

/// Samples used to bracket the roots of `beta - u_max`.
const ROOT_SCAN: usize = 10_000;

/// `[t*, T*]`, the closed set where `beta(t) >= u_max`, or `None` if empty.
pub fn excess_interval(system: &HydroSystem) -> Result<Option<(f64, f64)>> {
    single_dam(system)?;
    let beta = &system.inflows[0];
    let excess = |t: f64| beta.rate(t) - system.release_max >= 0.0;
    let horizon = system.horizon;
    let ts: Vec<f64> = (0..=ROOT_SCAN)
        .map(|k| horizon * k as f64 / ROOT_SCAN as f64)
        .collect();
    let flags: Vec<bool> = ts.iter().map(|&t| excess(t)).collect();
    let runs = flags.windows(2).filter(|w| w[1] && !w[0]).count() + flags[0] as usize;
    match runs {
        0 => return Ok(None),
        1 => {}
        n => return Err(Error::MultipleExcessIntervals(n)),
    }
    let first = flags.iter().position(|&f| f).unwrap();
    let last = flags.iter().rposition(|&f| f).unwrap();
    // Bisection between a non-excess and an excess sample.
    let refine = |mut outside: f64, mut inside: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (outside + inside);
            if excess(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
            if (inside - outside).abs() < 1e-15 {
                break;
            }
        }
        inside
    };
    let t_star = if first == 0 {
        0.0
    } else {
        refine(ts[first - 1], ts[first])
    };
    let big_t = if last == ROOT_SCAN {
        horizon
    } else {
        refine(ts[last + 1], ts[last])
    };
    Ok(Some((t_star, big_t)))
}

/// Largest controllable level at `t`. Negative would mean nothing is
/// controllable, which cannot happen when the excess volume is below capacity.
pub fn hat_y(system: &HydroSystem, t: f64) -> Result<f64> {
    single_dam(system)?;
    if t < -1e-12 || t > system.horizon + 1e-12 {
        return Err(Error::OutsideHorizon {
            t,
            horizon: system.horizon,
        });
    }
    let cap = system.capacity[0];
    let Some((_, big_t)) = excess_interval(system)? else {
        return Ok(cap);
    };
    let upper = big_t.max(t);
    if upper <= t {
        return Ok(cap);
    }
    let beta = &system.inflows[0];
    let excess = adaptive_simpson(|s| beta.rate(s) - system.release_max, t, upper, 1e-8);
    Ok(cap - excess.max(0.0))
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(&f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Grid for `theta`: `y` over `[-0.25 y_max, 1.25 y_max]` with spacing `y_max / cells`.
pub fn theta_grid(system: &HydroSystem, cells: usize, n_steps: usize) -> Result<GridSpec> {
    let cap = system.capacity[0];
    let dy = cap / cells as f64;
    let pad = (cells as f64 * 0.25).round() as usize;
    let y = Axis::with_step("y", -(pad as f64) * dy, dy, cells + 2 * pad + 1)?;
    GridSpec::new(vec![y], n_steps, system.horizon)
}

/// Backward semi-Lagrangian recursion for `theta` on a one-axis `y` grid.
pub fn solve_theta(
    system: &HydroSystem,
    grid: &GridSpec,
    controls: &ControlGrid,
) -> Result<ValueField> {
    single_dam(system)?;
    if grid.axes.len() != 1 {
        return Err(Error::InvalidGrid(
            "theta grid must have exactly one (y) axis".into(),
        ));
    }
    let y = &grid.axes[0];
    let cap = system.capacity[0];
    if !(y.min < 0.0 && y.max > cap) {
        return Err(Error::InvalidGrid(format!(
            "theta y-axis [{}, {}] must extend beyond [0, {cap}] on both sides",
            y.min, y.max
        )));
    }
    if (grid.horizon - system.horizon).abs() > 1e-12 {
        return Err(Error::InvalidGrid(
            "theta grid horizon differs from the system's".into(),
        ));
    }
    let dt = grid.dt();
    let dy = y.step();
    let beta = &system.inflows[0];
    let u_max = system.release_max;

    // Work in the frame xi = y - phi(t), phi(t) = int_0^t (beta - u_max), which
    // moves with full discharge. That control then maps nodes onto nodes and
    // only the other controls need interpolation.
    let phi: Vec<f64> = (0..=grid.n_steps)
        .map(|n| beta.integral(0.0, grid.time(n)) - u_max * grid.time(n))
        .collect();
    let phi_lo = phi.iter().copied().fold(0.0, f64::min);
    let phi_hi = phi.iter().copied().fold(0.0, f64::max);
    let below = ((phi_hi / dy).ceil() as usize) + 1;
    let above = ((-phi_lo / dy).ceil() as usize) + 1;
    let xi = Axis::with_step("xi", y.min - below as f64 * dy, dy, y.n + below + above)?;
    let xi_nodes = xi.nodes();

    let to_y = |vals: &[f64], shift: f64| -> Vec<f64> {
        y.nodes()
            .iter()
            .map(|&v| lerp_clamped(vals, (v - shift - xi.min) / dy))
            .collect()
    };

    let mut field = ValueField::new("theta", grid.clone());
    let mut next = vec![0.0; xi.n];
    field.insert(grid.n_steps, vec![0.0; y.n]);
    for n in (0..grid.n_steps).rev() {
        let inflow = beta.integral(grid.time(n), grid.time(n + 1));
        // Foot offsets in xi-cells; zero for u = u_max.
        let lifts: Vec<f64> = controls
            .points
            .iter()
            .map(|u| (u_max - u.u1) * dt / dy)
            .collect();
        let moves: Vec<f64> = controls.points.iter().map(|u| inflow - u.u1 * dt).collect();
        let shift = phi[n];
        let cur: Vec<f64> = (0..xi.n)
            .into_par_iter()
            .map(|j| {
                let here = xi_nodes[j] + shift;
                lifts
                    .iter()
                    .zip(&moves)
                    .map(|(&l, &m)| {
                        lerp_clamped(&next, j as f64 + l)
                            + system.mean_distance_on_segment(&[here], &[here + m]) * dt
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        field.insert(n, to_y(&cur, shift));
        next = cur;
    }
    field.meta = serde_json::json!({
        "field": "theta",
        "dt": dt,
        "dy": dy,
        "n_controls": controls.len(),
    });
    Ok(field)
}

/// One time slice of the controllable-region comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionSlice {
    pub t: f64,
    /// Largest grid `y` with `theta <= tolerance`; `None` if no level is controllable.
    pub boundary: Option<f64>,
}

/// Per-slice upper boundary of the zero level of `theta` inside `[0, y_max]`.
pub fn controllable_region(theta: &ValueField, tolerance: f64, y_max: f64) -> Vec<RegionSlice> {
    let y = &theta.grid.axes[0];
    let top = (((y_max - y.min) / y.step() + 1e-9).floor().max(0.0) as usize).min(y.n - 1);
    theta
        .steps
        .iter()
        .zip(&theta.slices)
        .map(|(&n, slice)| RegionSlice {
            t: theta.grid.time(n),
            boundary: slice[..=top]
                .iter()
                .rposition(|&v| v <= tolerance)
                .map(|j| y.value(j))
                .filter(|&v| v >= 0.0),
        })
        .collect()
}

/// Default zero-level tolerance: `factor * dt * dy`.
pub fn default_tolerance(grid: &GridSpec, factor: f64) -> f64 {
    factor * grid.dt() * grid.axes[0].step()
}

#[derive(Debug, Clone, Serialize)]
pub struct ViabilityResult {
    pub t_star: Option<f64>,
    #[serde(rename = "T_star")]
    pub big_t_star: Option<f64>,
    pub tolerance: f64,
    /// `(t, hat_y analytic, boundary from theta)` per retained slice.
    pub region: Vec<(f64, f64, Option<f64>)>,
    #[serde(skip)]
    pub theta: ValueField,
}

impl ViabilityResult {
    /// Largest `|boundary - min(hat_y, y_max)|` over slices, in grid cells.
    pub fn max_boundary_error_cells(&self) -> f64 {
        let dy = self.theta.grid.axes[0].step();
        self.region
            .iter()
            .map(|&(_, hat, b)| match b {
                Some(b) => (b - hat).abs() / dy,
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

pub fn analyze(
    system: &HydroSystem,
    grid: &GridSpec,
    controls: &ControlGrid,
    tolerance: f64,
) -> Result<ViabilityResult> {
    let interval = excess_interval(system)?;
    let theta = solve_theta(system, grid, controls)?;
    let cap = system.capacity[0];
    let region = controllable_region(&theta, tolerance, cap)
        .into_iter()
        .map(|s| Ok((s.t, hat_y(system, s.t)?.min(cap), s.boundary)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViabilityResult {
        t_star: interval.map(|i| i.0),
        big_t_star: interval.map(|i| i.1),
        tolerance,
        region,
        theta,
    })
}

fn single_dam(system: &HydroSystem) -> Result<()> {
    if system.n_dams() != 1 {
        return Err(Error::InvalidModel(
            "the controllable-region analysis covers a single dam only".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::system::Inflow;

    fn tight() -> HydroSystem {
        HydroSystem::reference_single(2.0)
    }

    #[test]
    fn excess_interval_examples() {
        let (a, b) = excess_interval(&tight()).unwrap().unwrap();
        let expect = 0.75f64.asin() / std::f64::consts::PI;
        assert_relative_eq!(a, expect, epsilon = 1e-12);
        assert_relative_eq!(b, 1.0 - expect, epsilon = 1e-12);
        assert_eq!(
            excess_interval(&HydroSystem::reference_single(3.0)).unwrap(),
            None
        );
        let flat = HydroSystem::single(Inflow::constant(0.5), 1.0, 0.5, 1.0).unwrap();
        assert_eq!(excess_interval(&flat).unwrap(), Some((0.0, 1.0)));
    }

    #[test]
    fn two_bumps_are_rejected() {
        let t = (0..=100).map(|k| k as f64 / 100.0).collect::<Vec<_>>();
        let beta = t
            .iter()
            .map(|&s| 2.0 * (2.0 * std::f64::consts::PI * s).sin().abs() + 0.5)
            .collect();
        let sys = HydroSystem::single(Inflow::table(t, beta).unwrap(), 1.0, 2.0, 1.0).unwrap();
        assert!(matches!(
            excess_interval(&sys),
            Err(Error::MultipleExcessIntervals(2))
        ));
    }

    #[test]
    fn hat_y_examples() {
        let s = tight();
        let (t_star, big_t) = excess_interval(&s).unwrap().unwrap();
        // Closed-form excess volume as an independent oracle.
        let beta = &s.inflows[0];
        let oracle = 1.0 - (beta.integral(t_star, big_t) - 2.0 * (big_t - t_star));
        let got = hat_y(&s, t_star).unwrap();
        assert_relative_eq!(got, oracle, epsilon = 1e-8);
        assert_relative_eq!(got, 0.847, epsilon = 0.01);
        assert_eq!(hat_y(&s, 0.0).unwrap(), 1.0);
        assert_eq!(hat_y(&s, 0.8).unwrap(), 1.0);
        assert_eq!(
            hat_y(&HydroSystem::reference_single(3.0), 0.4).unwrap(),
            1.0
        );
    }

    #[test]
    fn hat_y_minimum_sits_at_t_star() {
        let s = tight();
        let (t_star, big_t) = excess_interval(&s).unwrap().unwrap();
        let samples: Vec<(f64, f64)> = (0..=1000)
            .map(|k| {
                let t = k as f64 / 1000.0;
                (t, hat_y(&s, t).unwrap())
            })
            .collect();
        let (t_min, y_min) =
            samples
                .iter()
                .copied()
                .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        assert!((t_min - t_star).abs() <= 1e-3);
        assert!(y_min < 1.0);
        for &(t, v) in &samples {
            assert!((0.0..=1.0).contains(&v));
            if t >= big_t {
                assert_eq!(v, 1.0);
            }
        }
        // Continuity on the sampling grid.
        for w in samples.windows(2) {
            assert!((w[1].1 - w[0].1).abs() < 0.01);
        }
    }

    #[test]
    fn simpson_integrates_polynomials() {
        assert_relative_eq!(
            adaptive_simpson(|x| x * x * x, 0.0, 2.0, 1e-10),
            4.0,
            epsilon = 1e-10
        );
        assert_relative_eq!(
            adaptive_simpson(f64::sin, 0.0, 3.0, 1e-10),
            1.0 - 3f64.cos(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn theta_requires_padding() {
        let s = tight();
        let controls = ControlGrid::uniform(&s, 21).unwrap();
        let bad = GridSpec::new(vec![Axis::new("y", 0.0, 1.0, 11).unwrap()], 10, 1.0).unwrap();
        assert!(matches!(
            solve_theta(&s, &bad, &controls),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn theta_examples() {
        let s = tight();
        let grid = theta_grid(&s, 100, 200).unwrap();
        let controls = ControlGrid::uniform(&s, 21).unwrap();
        let theta = solve_theta(&s, &grid, &controls).unwrap();
        let tol = default_tolerance(&grid, 10.0);
        assert!(theta.slice_at_step(200).unwrap().iter().all(|&v| v == 0.0));
        assert!(theta.slices.iter().flatten().all(|&v| v >= 0.0));
        let (t_star, _) = excess_interval(&s).unwrap().unwrap();
        let at = |y: f64| theta.interpolate(t_star, &[y]).unwrap();
        assert!(at(0.95) > tol);
        assert!(at(0.5) <= tol);
    }

    #[test]
    fn whole_box_is_controllable_with_margin() {
        let s = HydroSystem::reference_single(3.0);
        let grid = theta_grid(&s, 100, 200).unwrap();
        let controls = ControlGrid::uniform(&s, 21).unwrap();
        let res = analyze(&s, &grid, &controls, default_tolerance(&grid, 10.0)).unwrap();
        for &(_, hat, b) in &res.region {
            assert_eq!(hat, 1.0);
            assert_relative_eq!(b.unwrap(), 1.0, epsilon = 1e-12);
        }
    }
}
