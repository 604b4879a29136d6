//! Direct semi-Lagrangian solver for the state-constrained HJB equation.
//!
//! One backward step at node `(x, y)` and control `u`:
//!
//! ```text
//! V^n = max_u { x kappa(u) dt + 1/2 sum_{+-} V^{n+1}(x + b dt +- sigma sqrt(dt), y + int beta - u dt) }
//! ```
//!
//! Controls whose `y`-foot leaves `K` are dropped at that node, which is how the
//! state constraint enters. The scheme is monotone and needs the
//! controllability margin so that every node keeps at least one control.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, ValueField};
use crate::price::PriceModel;
use crate::system::{ControlGrid, ControlPoint, HydroSystem};

/// Marker for nodes without an admissible (or feasible) control.
pub const NO_CONTROL: u16 = u16::MAX;

/// Slack when testing whether a foot stays in `K`.
const FOOT_SLACK: f64 = 1e-10;

/// Optimal control index per node and time step, with nearest-node lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub grid: GridSpec,
    pub controls: Vec<ControlPoint>,
    /// `indices[n][node]` is the control used on `[t_n, t_{n+1})`.
    pub indices: Vec<Vec<u16>>,
    /// Auxiliary martingale control per node (level-set policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<Vec<f32>>>,
    /// Level `z*` attained at each node (level-set policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_star: Option<Vec<Vec<f32>>>,
}

impl FeedbackPolicy {
    pub fn new(grid: GridSpec, controls: Vec<ControlPoint>) -> Self {
        FeedbackPolicy {
            grid,
            controls,
            indices: Vec::new(),
            alphas: None,
            z_star: None,
        }
    }

    /// Nearest node of `point` and the step covering `t`.
    pub fn locate(&self, t: f64, point: &[f64]) -> (usize, usize) {
        let step = self.grid.step_of(t).min(self.grid.n_steps - 1);
        let idx: Vec<usize> = self
            .grid
            .axes
            .iter()
            .zip(point)
            .map(|(a, &v)| a.nearest(v))
            .collect();
        (step, self.grid.offset(&idx))
    }

    pub fn index_at(&self, step: usize, node: usize) -> u16 {
        self.indices[step][node]
    }

    /// Control at the nearest node; `InfeasibleNode` if that node has none.
    pub fn control(&self, t: f64, point: &[f64]) -> Result<ControlPoint> {
        let (step, node) = self.locate(t, point);
        match self.indices[step][node] {
            NO_CONTROL => Err(Error::InfeasibleNode {
                t,
                x: point[0],
                y: point[1..].to_vec(),
            }),
            k => Ok(self.controls[k as usize]),
        }
    }
}

/// Grid shape and retention for the direct solver.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbSetup {
    pub grid: GridSpec,
    pub controls: ControlGrid,
    /// Keep every `keep_every`-th value slice (step 0 and `T` are always kept).
    pub keep_every: usize,
}

impl HjbSetup {
    /// 101 x 101 over `[0, 20] x [0, y_max]`, 200 steps, 21 controls.
    pub fn default_single(system: &HydroSystem) -> Result<Self> {
        let grid = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 20.0, 101)?,
                Axis::new("y", 0.0, system.capacity[0], 101)?,
            ],
            200,
            system.horizon,
        )?;
        Ok(HjbSetup {
            grid,
            controls: ControlGrid::uniform(system, 21)?,
            keep_every: 1,
        })
    }

    /// 61^3 over `[0, 20] x K`, 100 steps, 21 x 21 controls.
    pub fn default_cascade(system: &HydroSystem) -> Result<Self> {
        let grid = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 20.0, 61)?,
                Axis::new("y1", 0.0, system.capacity[0], 61)?,
                Axis::new("y2", 0.0, system.capacity[1], 61)?,
            ],
            100,
            system.horizon,
        )?;
        Ok(HjbSetup {
            grid,
            controls: ControlGrid::uniform(system, 21)?,
            keep_every: 10,
        })
    }

    fn validate(&self, system: &HydroSystem) -> Result<()> {
        let g = &self.grid;
        if g.axes.len() != system.n_dams() + 1 {
            return Err(Error::InvalidGrid(format!(
                "expected {} axes (x and one per dam), got {}",
                system.n_dams() + 1,
                g.axes.len()
            )));
        }
        if g.axes[0].min != 0.0 {
            return Err(Error::InvalidGrid("x-axis must start at 0".into()));
        }
        for (d, a) in g.axes[1..].iter().enumerate() {
            if a.min != 0.0 || (a.max - system.capacity[d]).abs() > 1e-12 {
                return Err(Error::InvalidGrid(format!(
                    "axis `{}` must span [0, {}] exactly",
                    a.name, system.capacity[d]
                )));
            }
        }
        if (g.horizon - system.horizon).abs() > 1e-12 {
            return Err(Error::InvalidGrid(
                "grid horizon differs from the system's".into(),
            ));
        }
        if self.keep_every == 0 {
            return Err(Error::InvalidGrid("keep_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cell and weights of the two `x`-feet of every `x` node, plus the node value.
pub(crate) struct XFeet {
    pub x: Vec<f64>,
    pub plus: Vec<(usize, f64)>,
    pub minus: Vec<(usize, f64)>,
}

impl XFeet {
    /// `extrapolate` selects linear extrapolation above `x_max`; otherwise the
    /// last column is held constant.
    pub fn new(axis: &Axis, model: &PriceModel, dt: f64, extrapolate: bool) -> Self {
        let sq = dt.sqrt();
        let x = axis.nodes();
        let place = |v: f64| {
            let v = v.max(0.0);
            if extrapolate {
                axis.locate_extrapolating(v)
            } else {
                axis.locate(v)
            }
        };
        let mut plus = Vec::with_capacity(axis.n);
        let mut minus = Vec::with_capacity(axis.n);
        for &xi in &x {
            let centre = xi + model.drift_at(xi) * dt;
            let spread = model.diffusion_at(xi) * sq;
            plus.push(place(centre + spread));
            minus.push(place(centre - spread));
        }
        XFeet { x, plus, minus }
    }

    /// `1/2 (f(x+) + f(x-))` for a slab whose outer axis is `x` and whose
    /// rows have length `row`.
    pub fn average_into(&self, i: usize, next: &[f64], row: usize, out: &mut [f64]) {
        let (ip, wp) = self.plus[i];
        let (im, wm) = self.minus[i];
        let (p0, p1) = (
            &next[ip * row..(ip + 1) * row],
            &next[(ip + 1) * row..(ip + 2) * row],
        );
        let (m0, m1) = (
            &next[im * row..(im + 1) * row],
            &next[(im + 1) * row..(im + 2) * row],
        );
        for k in 0..row {
            let a = p0[k] + wp * (p1[k] - p0[k]);
            let b = m0[k] + wm * (m1[k] - m0[k]);
            out[k] = 0.5 * (a + b);
        }
    }
}

/// Linear interpolation at fractional index `pos`, assumed within `[0, n-1]` up to rounding.
#[inline]
pub(crate) fn lerp_at(line: &[f64], pos: f64) -> f64 {
    let n = line.len();
    let i = (pos.max(0.0) as usize).min(n - 2);
    let w = (pos - i as f64).clamp(0.0, 1.0);
    line[i] + w * (line[i + 1] - line[i])
}

/// Result of one backward step.
pub struct StepOutput {
    pub values: Vec<f64>,
    pub policy: Vec<u16>,
}

/// One backward step from slice `next` (time `t_{step+1}`) to `t_step`.
pub fn sl_step_constrained(
    next: &[f64],
    grid: &GridSpec,
    step: usize,
    model: &PriceModel,
    system: &HydroSystem,
    controls: &ControlGrid,
) -> Result<StepOutput> {
    let feet = XFeet::new(&grid.axes[0], model, grid.dt(), true);
    step_with_feet(next, grid, step, &feet, system, controls)
}

fn step_with_feet(
    next: &[f64],
    grid: &GridSpec,
    step: usize,
    feet: &XFeet,
    system: &HydroSystem,
    controls: &ControlGrid,
) -> Result<StepOutput> {
    if next.len() != grid.len() {
        return Err(Error::InvalidGrid(format!(
            "slice has {} entries, grid has {}",
            next.len(),
            grid.len()
        )));
    }
    let t0 = grid.time(step);
    let t1 = grid.time(step + 1);
    let parts: Vec<(Vec<f64>, Vec<u16>)> = if system.n_dams() == 1 {
        let inflow = system.inflows[0].integral(t0, t1);
        (0..grid.axes[0].n)
            .into_par_iter()
            .map(|i| column_single(next, grid, i, feet, system, controls, inflow))
            .collect()
    } else {
        let inflow = [
            system.inflows[0].integral(t0, t1),
            system.inflows[1].integral(t0, t1),
        ];
        (0..grid.axes[0].n)
            .into_par_iter()
            .map(|i| column_cascade(next, grid, i, feet, system, controls, inflow))
            .collect()
    };
    let mut values = Vec::with_capacity(grid.len());
    let mut policy = Vec::with_capacity(grid.len());
    for (v, p) in parts {
        values.extend(v);
        policy.extend(p);
    }
    if let Some(node) = policy.iter().position(|&k| k == NO_CONTROL) {
        return Err(Error::EmptyControlSet {
            t: t0,
            node: grid.point(node),
        });
    }
    Ok(StepOutput { values, policy })
}

fn column_single(
    next: &[f64],
    grid: &GridSpec,
    i: usize,
    feet: &XFeet,
    system: &HydroSystem,
    controls: &ControlGrid,
    inflow: f64,
) -> (Vec<f64>, Vec<u16>) {
    let y = &grid.axes[1];
    let ny = y.n;
    let dt = grid.dt();
    let mut avg = vec![0.0; ny];
    feet.average_into(i, next, ny, &mut avg);
    let x = feet.x[i];
    let top = (ny - 1) as f64;
    let mut best = vec![f64::NEG_INFINITY; ny];
    let mut arg = vec![NO_CONTROL; ny];
    for (k, u) in controls.points.iter().enumerate() {
        let shift = (inflow - u.u1 * dt) / y.step();
        let reward = x * system.kappa_at(*u) * dt;
        for j in 0..ny {
            let pos = j as f64 + shift;
            if pos < -FOOT_SLACK || pos > top + FOOT_SLACK {
                continue;
            }
            let v = reward + lerp_at(&avg, pos);
            if v > best[j] {
                best[j] = v;
                arg[j] = k as u16;
            }
        }
    }
    (best, arg)
}

fn column_cascade(
    next: &[f64],
    grid: &GridSpec,
    i: usize,
    feet: &XFeet,
    system: &HydroSystem,
    controls: &ControlGrid,
    inflow: [f64; 2],
) -> (Vec<f64>, Vec<u16>) {
    let (a1, a2) = (&grid.axes[1], &grid.axes[2]);
    let (n1, n2) = (a1.n, a2.n);
    let dt = grid.dt();
    let mut avg = vec![0.0; n1 * n2];
    feet.average_into(i, next, n1 * n2, &mut avg);
    let x = feet.x[i];
    let per = controls.per_dim;
    let (top1, top2) = ((n1 - 1) as f64, (n2 - 1) as f64);

    let mut best = vec![f64::NEG_INFINITY; n1 * n2];
    let mut arg = vec![NO_CONTROL; n1 * n2];
    let mut line = vec![0.0; n2];
    for j1 in 0..n1 {
        let row_best = &mut best[j1 * n2..(j1 + 1) * n2];
        let row_arg = &mut arg[j1 * n2..(j1 + 1) * n2];
        for a in 0..per {
            let u1 = controls.points[a * per].u1;
            let pos1 = j1 as f64 + (inflow[0] - u1 * dt) / a1.step();
            if pos1 < -FOOT_SLACK || pos1 > top1 + FOOT_SLACK {
                continue;
            }
            // Interpolate along y1 once; the remaining y2 search is 1-D.
            let r = (pos1.max(0.0) as usize).min(n1 - 2);
            let w = (pos1 - r as f64).clamp(0.0, 1.0);
            let (lo, hi) = (&avg[r * n2..(r + 1) * n2], &avg[(r + 1) * n2..(r + 2) * n2]);
            for k in 0..n2 {
                line[k] = lo[k] + w * (hi[k] - lo[k]);
            }
            for b in 0..per {
                let idx = a * per + b;
                let u = controls.points[idx];
                let shift = (inflow[1] + (u.u1 - u.u2) * dt) / a2.step();
                let reward = x * system.kappa_at(u) * dt;
                for j2 in 0..n2 {
                    let pos = j2 as f64 + shift;
                    if pos < -FOOT_SLACK || pos > top2 + FOOT_SLACK {
                        continue;
                    }
                    let v = reward + lerp_at(&line, pos);
                    if v > row_best[j2] {
                        row_best[j2] = v;
                        row_arg[j2] = idx as u16;
                    }
                }
            }
        }
    }
    (best, arg)
}

/// Backward recursion from `V(T) = 0`. Requires the controllability margin.
pub fn solve_constrained_hjb(
    model: &PriceModel,
    system: &HydroSystem,
    setup: &HjbSetup,
) -> Result<(ValueField, FeedbackPolicy)> {
    model.validate()?;
    system.validate()?;
    setup.validate(system)?;
    let h3 = system.check_h3(10_000);
    if !h3.holds {
        return Err(Error::ControllabilityFails {
            eta_max: h3.eta_max,
        });
    }
    if setup.controls.len() >= NO_CONTROL as usize {
        return Err(Error::InvalidGrid(
            "too many controls for a u16 policy".into(),
        ));
    }
    let grid = &setup.grid;
    let feet = XFeet::new(&grid.axes[0], model, grid.dt(), true);
    let started = std::time::Instant::now();

    let mut field = ValueField::new("V", grid.clone());
    let mut policy = FeedbackPolicy::new(grid.clone(), setup.controls.points.clone());
    policy.indices = vec![Vec::new(); grid.n_steps];
    let mut next = vec![0.0; grid.len()];
    field.insert(grid.n_steps, next.clone());
    for n in (0..grid.n_steps).rev() {
        let out = step_with_feet(&next, grid, n, &feet, system, &setup.controls)?;
        policy.indices[n] = out.policy;
        if n == 0 || n % setup.keep_every == 0 {
            field.insert(n, out.values.clone());
        }
        next = out.values;
    }
    log::info!(
        "direct HJB: {} nodes x {} steps in {:.1?}",
        grid.len(),
        grid.n_steps,
        started.elapsed()
    );
    field.meta = serde_json::json!({
        "solver": "direct",
        "model": model,
        "system": system,
        "kappa_bar": system.kappa_bar(),
        "eta_max": h3.eta_max,
        "n_controls": setup.controls.len(),
        "dt": grid.dt(),
    });
    Ok((field, policy))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::system::Inflow;

    fn small_single(
        model: &PriceModel,
        system: &HydroSystem,
        nx: usize,
        ny: usize,
        steps: usize,
    ) -> HjbSetup {
        let grid = GridSpec::new(
            vec![
                Axis::new("x", 0.0, 20.0, nx).unwrap(),
                Axis::new("y", 0.0, system.capacity[0], ny).unwrap(),
            ],
            steps,
            system.horizon,
        )
        .unwrap();
        let _ = model;
        HjbSetup {
            grid,
            controls: ControlGrid::uniform(system, 21).unwrap(),
            keep_every: 1,
        }
    }

    #[test]
    fn one_step_reward_with_frozen_price() {
        let model = PriceModel::gbm(0.0, 0.0);
        let system = HydroSystem::single(Inflow::constant(0.5), 1.0, 3.0, 1.0).unwrap();
        let setup = small_single(&model, &system, 21, 11, 100);
        let zero = vec![0.0; setup.grid.len()];
        let out =
            sl_step_constrained(&zero, &setup.grid, 99, &model, &system, &setup.controls).unwrap();
        let dt = setup.grid.dt();
        let x_axis = &setup.grid.axes[0];
        let y_axis = &setup.grid.axes[1];
        for i in 0..x_axis.n {
            for j in 0..y_axis.n {
                let node = setup.grid.offset(&[i, j]);
                let y = y_axis.value(j);
                let u = setup.controls.points[out.policy[node] as usize].u1;
                // The best admissible control releases as much as the box allows.
                let u_best = setup
                    .controls
                    .points
                    .iter()
                    .map(|p| p.u1)
                    .filter(|&v| y + (0.5 - v) * dt >= -1e-10)
                    .fold(0.0, f64::max);
                if i > 0 {
                    assert_eq!(u, u_best);
                }
                assert_relative_eq!(
                    out.values[node],
                    dt * x_axis.value(i) * u_best,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn deterministic_water_balance_oracle() {
        let model = PriceModel::gbm(0.0, 0.0);
        let system = HydroSystem::single(Inflow::constant(0.5), 1.0, 3.0, 1.0).unwrap();
        let setup = HjbSetup::default_single(&system).unwrap();
        let (v, _) = solve_constrained_hjb(&model, &system, &setup).unwrap();
        let got = v.interpolate(0.0, &[5.0, 1.0]).unwrap();
        assert_relative_eq!(got, 7.5, max_relative = 0.01);
    }

    #[test]
    fn refuses_without_controllability() {
        let system = HydroSystem::reference_single(2.0);
        let setup = HjbSetup::default_single(&system).unwrap();
        assert!(matches!(
            solve_constrained_hjb(&PriceModel::gbm(0.05, 0.1), &system, &setup),
            Err(Error::ControllabilityFails { .. })
        ));
    }

    #[test]
    fn policy_lookup_is_nearest_node() {
        let model = PriceModel::gbm(0.05, 0.1);
        let system = HydroSystem::reference_single(3.0);
        let setup = small_single(&model, &system, 11, 11, 20);
        let (_, policy) = solve_constrained_hjb(&model, &system, &setup).unwrap();
        let (step, node) = policy.locate(0.12, &[4.1, 0.46]);
        assert_eq!(step, 2);
        assert_eq!(node, setup.grid.offset(&[2, 5]));
        let u = policy.control(0.12, &[4.1, 0.46]).unwrap();
        assert!(system.contains(u));
    }

    #[test]
    fn terminal_slice_is_zero_and_values_bounded() {
        let model = PriceModel::gbm(0.05, 0.1);
        let system = HydroSystem::reference_single(3.0);
        let setup = small_single(&model, &system, 41, 21, 50);
        let (v, _) = solve_constrained_hjb(&model, &system, &setup).unwrap();
        assert!(v.slice_at_step(50).unwrap().iter().all(|&e| e == 0.0));
        for (&n, slice) in v.steps.iter().zip(&v.slices) {
            let t = setup.grid.time(n);
            for (k, &val) in slice.iter().enumerate() {
                let p = setup.grid.point(k);
                let g = model.accumulated_price(3.0, t, p[0], 1.0).unwrap();
                assert!(val >= 0.0);
                assert!(val <= g + 1e-9 * (1.0 + g), "V={val} G={g} at {p:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn step_is_monotone(seed in 0u64..1000, bump in 0.0f64..2.0) {
            let model = PriceModel::gbm(0.05, 0.1);
            let system = HydroSystem::reference_single(3.0);
            let setup = small_single(&model, &system, 21, 21, 40);
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let base: Vec<f64> = (0..setup.grid.len()).map(|_| rng.random::<f64>() * 10.0).collect();
            let mut raised = base.clone();
            let nx = setup.grid.axes[0].n;
            let ny = setup.grid.axes[1].n;
            for (k, v) in raised.iter_mut().enumerate() {
                // Extrapolation above x_max puts a negative weight on the last two columns.
                if k / ny < nx - 2 && rng.random::<f64>() < 0.3 {
                    *v += bump * rng.random::<f64>();
                }
            }
            let a = sl_step_constrained(&base, &setup.grid, 10, &model, &system, &setup.controls).unwrap();
            let b = sl_step_constrained(&raised, &setup.grid, 10, &model, &system, &setup.controls).unwrap();
            for (lo, hi) in a.values.iter().zip(&b.values) {
                prop_assert!(hi >= lo);
            }
        }
    }
}
