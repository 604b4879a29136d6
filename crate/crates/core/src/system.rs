//! Reservoir topology, controls and the production function.
//!
//! A single dam has level `Y` with `dY = (beta(t) - u) dt`, `u in [0, u_max]`.
//! Two dams in cascade have
//!
//! ```text
//! dY1 = (beta1(t) - u1) dt
//! dY2 = (beta2(t) + u1 - u2) dt
//! ```
//!
//! with `u1 in [-pump_max, release_max]` (negative means pumping water back up)
//! and `u2 in [0, release2_max]`. Levels must stay in the box
//! `K = [0, y1_max] x [0, y2_max]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TIME_SLACK: f64 = 1e-9;

/// Deterministic inflow rate of one reservoir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inflow {
    /// `amplitude * sin(pi t) + offset`.
    SineOffset { amplitude: f64, offset: f64 },
    /// Samples `(t_i, beta_i)` joined by straight lines, held constant outside.
    Table { t: Vec<f64>, beta: Vec<f64> },
}

impl Inflow {
    pub fn sine_offset(amplitude: f64, offset: f64) -> Self {
        Inflow::SineOffset { amplitude, offset }
    }

    pub fn constant(rate: f64) -> Self {
        Inflow::SineOffset {
            amplitude: 0.0,
            offset: rate,
        }
    }

    pub fn table(t: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if t.len() < 2 || t.len() != beta.len() {
            return Err(Error::InvalidModel(
                "inflow table needs at least two (t, beta) samples of equal length".into(),
            ));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidModel(
                "inflow table times must increase".into(),
            ));
        }
        Ok(Inflow::Table { t, beta })
    }

    #[inline]
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            Inflow::SineOffset { amplitude, offset } => amplitude * (PI * t).sin() + offset,
            Inflow::Table { t: ts, beta } => {
                let n = ts.len();
                if t <= ts[0] {
                    return beta[0];
                }
                if t >= ts[n - 1] {
                    return beta[n - 1];
                }
                let i = ts.partition_point(|&s| s <= t) - 1;
                let w = (t - ts[i]) / (ts[i + 1] - ts[i]);
                beta[i] + w * (beta[i + 1] - beta[i])
            }
        }
    }

    /// `int_{t0}^{t1} beta(s) ds`, exact for both forms.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        match self {
            Inflow::SineOffset { amplitude, offset } => {
                amplitude / PI * ((PI * t0).cos() - (PI * t1).cos()) + offset * (t1 - t0)
            }
            Inflow::Table { t: ts, .. } => {
                if t1 < t0 {
                    return -self.integral(t1, t0);
                }
                // Breakpoints split the range into pieces where beta is affine.
                let mut knots = vec![t0];
                knots.extend(ts.iter().copied().filter(|&s| s > t0 && s < t1));
                knots.push(t1);
                knots
                    .windows(2)
                    .map(|w| 0.5 * (self.rate(w[0]) + self.rate(w[1])) * (w[1] - w[0]))
                    .sum()
            }
        }
    }
}

/// A point of the control set `U`. `u2` is zero for a single dam.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlPoint {
    pub u1: f64,
    pub u2: f64,
}

impl ControlPoint {
    pub fn single(u: f64) -> Self {
        ControlPoint { u1: u, u2: 0.0 }
    }

    pub fn pair(u1: f64, u2: f64) -> Self {
        ControlPoint { u1, u2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydroSystem {
    pub inflows: Vec<Inflow>,
    pub capacity: Vec<f64>,
    /// Pumping bound: `u1 >= -pump_max`. Zero for a single dam.
    pub pump_max: f64,
    pub release_max: f64,
    /// Discharge bound of the lower dam; unused for a single dam.
    pub release2_max: f64,
    /// Pumping loss factor `gamma > 1` (two dams only).
    pub pump_loss: f64,
    pub horizon: f64,
}

/// Outcome of the controllability scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct H3Report {
    pub holds: bool,
    pub eta_max: f64,
}

impl HydroSystem {
    pub fn single(inflow: Inflow, capacity: f64, release_max: f64, horizon: f64) -> Result<Self> {
        let s = HydroSystem {
            inflows: vec![inflow],
            capacity: vec![capacity],
            pump_max: 0.0,
            release_max,
            release2_max: 0.0,
            pump_loss: 1.0,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn cascade(
        inflows: [Inflow; 2],
        capacity: [f64; 2],
        pump_max: f64,
        release_max: f64,
        release2_max: f64,
        pump_loss: f64,
        horizon: f64,
    ) -> Result<Self> {
        let s = HydroSystem {
            inflows: inflows.to_vec(),
            capacity: capacity.to_vec(),
            pump_max,
            release_max,
            release2_max,
            pump_loss,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    /// The single-dam reference setup: `beta = 2 sin(pi t) + 0.5`, capacity 1, `T = 1`.
    pub fn reference_single(release_max: f64) -> Self {
        HydroSystem::single(Inflow::sine_offset(2.0, 0.5), 1.0, release_max, 1.0)
            .expect("reference system is valid")
    }

    /// The two-dam reference setup: both inflows `2 sin(pi t) + 0.5`,
    /// `u1 in [-1, 3]`, `u2 in [0, 5.5]`, `gamma = 1.5`.
    pub fn reference_cascade() -> Self {
        let beta = Inflow::sine_offset(2.0, 0.5);
        HydroSystem::cascade([beta.clone(), beta], [1.0, 1.0], 1.0, 3.0, 5.5, 1.5, 1.0)
            .expect("reference system is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inflows.len();
        let bad = |m: String| Err(Error::InvalidModel(m));
        if n != 1 && n != 2 {
            return bad(format!("n_dams must be 1 or 2, got {n}"));
        }
        if self.capacity.len() != n {
            return bad(format!(
                "expected {n} capacities, got {}",
                self.capacity.len()
            ));
        }
        if self.capacity.iter().any(|&c| !(c > 0.0)) {
            return bad("capacities y_max must be positive".into());
        }
        if !(self.release_max > 0.0) {
            return bad("u1_max must be positive".into());
        }
        if !(self.horizon > 0.0) {
            return bad("horizon T must be positive".into());
        }
        if n == 1 && self.pump_max != 0.0 {
            return bad("a single dam cannot pump (u1_min must be 0)".into());
        }
        if n == 2 {
            if !(self.pump_loss > 1.0) {
                return bad(format!("gamma must exceed 1, got {}", self.pump_loss));
            }
            if self.pump_max < 0.0 || self.release2_max < 0.0 {
                return bad("u1_min and u2_max must be nonnegative".into());
            }
        }
        for (d, inflow) in self.inflows.iter().enumerate() {
            let lowest = self
                .time_samples(1000)
                .map(|t| inflow.rate(t))
                .fold(f64::INFINITY, f64::min);
            if lowest < 0.0 {
                return bad(format!(
                    "inflow of dam {} becomes negative ({lowest})",
                    d + 1
                ));
            }
        }
        Ok(())
    }

    pub fn n_dams(&self) -> usize {
        self.inflows.len()
    }

    fn time_samples(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        let n = n.max(2);
        (0..n).map(move |k| self.horizon * k as f64 / (n - 1) as f64)
    }

    pub fn inflow(&self, dam: usize, t: f64) -> Result<f64> {
        if t < -TIME_SLACK || t > self.horizon + TIME_SLACK {
            return Err(Error::OutsideHorizon {
                t,
                horizon: self.horizon,
            });
        }
        let inflow = self.inflows.get(dam).ok_or_else(|| {
            Error::InvalidModel(format!(
                "dam index {dam} out of range for {} dams",
                self.n_dams()
            ))
        })?;
        Ok(inflow.rate(t))
    }

    pub fn contains(&self, u: ControlPoint) -> bool {
        const SLACK: f64 = 1e-12;
        let first = u.u1 >= -self.pump_max - SLACK && u.u1 <= self.release_max + SLACK;
        if self.n_dams() == 1 {
            first && u.u2 == 0.0
        } else {
            first && u.u2 >= -SLACK && u.u2 <= self.release2_max + SLACK
        }
    }

    fn check_control(&self, u: ControlPoint) -> Result<()> {
        if self.contains(u) {
            Ok(())
        } else {
            Err(Error::ControlOutOfRange(format!("{u:?}")))
        }
    }

    /// Energy rate `kappa(u)`: `u` for one dam, `u2 + c(u1)` for two, where
    /// pumping costs `gamma` times what releasing earns.
    #[inline]
    pub fn kappa_at(&self, u: ControlPoint) -> f64 {
        if self.n_dams() == 1 {
            u.u1
        } else {
            let c = if u.u1 >= 0.0 {
                u.u1
            } else {
                self.pump_loss * u.u1
            };
            u.u2 + c
        }
    }

    pub fn kappa(&self, u: ControlPoint) -> Result<f64> {
        self.check_control(u)?;
        Ok(self.kappa_at(u))
    }

    /// `max_{u in U} kappa(u)`, attained at the upper corner of `U`.
    pub fn kappa_bar(&self) -> f64 {
        if self.n_dams() == 1 {
            self.release_max
        } else {
            self.release_max + self.release2_max
        }
    }

    /// Level velocities `dY/dt` under control `u`, one entry per dam.
    pub fn drift_y(&self, t: f64, u: ControlPoint) -> Result<Vec<f64>> {
        self.check_control(u)?;
        let b1 = self.inflow(0, t)?;
        if self.n_dams() == 1 {
            Ok(vec![b1 - u.u1])
        } else {
            let b2 = self.inflow(1, t)?;
            Ok(vec![b1 - u.u1, b2 + u.u1 - u.u2])
        }
    }

    /// Euclidean distance from `y` to the capacity box `K`.
    pub fn distance_to_k(&self, y: &[f64]) -> f64 {
        y.iter()
            .zip(&self.capacity)
            .map(|(&v, &cap)| {
                let r = v - v.clamp(0.0, cap);
                r * r
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Mean of `d_K` along the straight segment from `a` to `b`. Exact for
    /// one dam; composite Simpson on 32 panels for two.
    pub fn mean_distance_on_segment(&self, a: &[f64], b: &[f64]) -> f64 {
        if self.n_dams() == 1 {
            let cap = self.capacity[0];
            return ramp_mean(-a[0], -b[0]) + ramp_mean(a[0] - cap, b[0] - cap);
        }
        if self.distance_to_k(a) == 0.0 && self.distance_to_k(b) == 0.0 {
            // K is convex.
            return 0.0;
        }
        const PANELS: usize = 32;
        let at = |s: f64| {
            let p: Vec<f64> = a.iter().zip(b).map(|(&p, &q)| p + s * (q - p)).collect();
            self.distance_to_k(&p)
        };
        let h = 1.0 / PANELS as f64;
        let mut sum = at(0.0) + at(1.0);
        for k in 1..PANELS {
            sum += at(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        sum * h / 3.0
    }

    /// Controllability margin: the largest `eta >= 0` for which the interior
    /// inflow conditions hold on `samples` uniform times.
    pub fn check_h3(&self, samples: usize) -> H3Report {
        let eta = self
            .time_samples(samples)
            .map(|t| self.h3_margin_at(t))
            .fold(f64::INFINITY, f64::min);
        let eta_max = eta.max(0.0);
        H3Report {
            holds: eta_max > 0.0,
            eta_max,
        }
    }

    fn h3_margin_at(&self, t: f64) -> f64 {
        let b1 = self.inflows[0].rate(t);
        if self.n_dams() == 1 {
            return b1.min(self.release_max - b1);
        }
        let b2 = self.inflows[1].rate(t);
        let (lo1, hi1, hi2) = (self.pump_max, self.release_max, self.release2_max);
        [
            b1 + lo1,
            hi1 - b1,
            b2 + hi1.min(lo1),
            hi2 + lo1 - b2,
            b1 + b2,
            hi2 - b1 - b2,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }

    pub fn inflow_max(&self, dam: usize) -> f64 {
        self.time_samples(10_000)
            .map(|t| self.inflows[dam].rate(t))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Uniform discretization of `U`, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub points: Vec<ControlPoint>,
    /// Points per control dimension.
    pub per_dim: usize,
}

impl ControlGrid {
    pub fn uniform(system: &HydroSystem, per_dim: usize) -> Result<Self> {
        if per_dim < 2 {
            return Err(Error::InvalidGrid(
                "control grid needs at least 2 points per dimension".into(),
            ));
        }
        let axis = |lo: f64, hi: f64| -> Vec<f64> {
            (0..per_dim)
                .map(|k| lo + (hi - lo) * k as f64 / (per_dim - 1) as f64)
                .collect()
        };
        let u1 = axis(-system.pump_max, system.release_max);
        let points = if system.n_dams() == 1 {
            u1.into_iter().map(ControlPoint::single).collect()
        } else {
            let u2 = axis(0.0, system.release2_max);
            u1.iter()
                .flat_map(|&a| u2.iter().map(move |&b| ControlPoint::pair(a, b)))
                .collect()
        };
        Ok(ControlGrid { points, per_dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Spacing of the first control dimension.
    pub fn step(&self, system: &HydroSystem) -> f64 {
        (system.release_max + system.pump_max) / (self.per_dim - 1) as f64
    }
}

/// Mean of `max(v, 0)` for `v` running linearly from `p` to `q`.
fn ramp_mean(p: f64, q: f64) -> f64 {
    if p >= 0.0 && q >= 0.0 {
        0.5 * (p + q)
    } else if p <= 0.0 && q <= 0.0 {
        0.0
    } else {
        let hi = p.max(q);
        0.5 * hi * hi / (p - q).abs()
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    fn cascade() -> HydroSystem {
        HydroSystem::reference_cascade()
    }

    #[test]
    fn inflow_examples() {
        let s = HydroSystem::reference_single(3.0);
        assert_relative_eq!(s.inflow(0, 0.0).unwrap(), 0.5);
        assert_relative_eq!(s.inflow(0, 0.5).unwrap(), 2.5);
        let flat = HydroSystem::single(Inflow::constant(0.7), 1.0, 3.0, 1.0).unwrap();
        for t in [0.0, 0.2, 0.9, 1.0] {
            assert_eq!(flat.inflow(0, t).unwrap(), 0.7);
        }
        assert!(matches!(
            s.inflow(0, 1.5),
            Err(Error::OutsideHorizon { .. })
        ));
        assert!(s.inflow(0, -0.1).is_err());
    }

    #[test]
    fn table_inflow_interpolates_and_integrates() {
        let tab = Inflow::table(vec![0.0, 0.5, 1.0], vec![1.0, 3.0, 1.0]).unwrap();
        assert_relative_eq!(tab.rate(0.25), 2.0);
        assert_relative_eq!(tab.integral(0.0, 1.0), 2.0);
        assert_relative_eq!(tab.integral(0.25, 0.75), 1.25);
        assert!(Inflow::table(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn sine_integral_is_exact() {
        let b = Inflow::sine_offset(2.0, 0.5);
        let n = 100_000;
        let (t0, t1) = (0.13, 0.71);
        let h = (t1 - t0) / n as f64;
        let mid: f64 = (0..n).map(|i| b.rate(t0 + (i as f64 + 0.5) * h) * h).sum();
        assert_relative_eq!(b.integral(t0, t1), mid, max_relative = 1e-9);
    }

    #[test]
    fn kappa_examples() {
        let s = HydroSystem::reference_single(3.0);
        assert_eq!(s.kappa(ControlPoint::single(2.0)).unwrap(), 2.0);
        assert!(s.kappa(ControlPoint::single(3.5)).is_err());
        let c = cascade();
        assert_relative_eq!(c.kappa(ControlPoint::pair(-1.0, 2.0)).unwrap(), 0.5);
        assert_relative_eq!(c.kappa(ControlPoint::pair(3.0, 5.5)).unwrap(), 8.5);
        assert!(c.kappa(ControlPoint::pair(-1.5, 0.0)).is_err());
    }

    #[test]
    fn kappa_bar_matches_enumeration() {
        assert_eq!(HydroSystem::reference_single(3.0).kappa_bar(), 3.0);
        let c = cascade();
        assert_eq!(c.kappa_bar(), 8.5);
        let grid = ControlGrid::uniform(&c, 101).unwrap();
        let brute = grid
            .points
            .iter()
            .map(|&u| c.kappa_at(u))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(brute, c.kappa_bar(), max_relative = 1e-12);
    }

    #[test]
    fn drift_y_examples() {
        let s = HydroSystem::reference_single(3.0);
        assert_relative_eq!(s.drift_y(0.5, ControlPoint::single(3.0)).unwrap()[0], -0.5);
        let c = cascade();
        assert_eq!(
            c.drift_y(0.0, ControlPoint::pair(0.0, 0.0)).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            c.drift_y(0.0, ControlPoint::pair(-1.0, 0.0)).unwrap(),
            vec![1.5, -0.5]
        );
    }

    #[test]
    fn drift_y_moves_water_between_dams() {
        let c = cascade();
        let base = c.drift_y(0.3, ControlPoint::pair(0.0, 1.0)).unwrap();
        let moved = c.drift_y(0.3, ControlPoint::pair(1.0, 1.0)).unwrap();
        assert_relative_eq!((moved[0] - base[0]) + (moved[1] - base[1]), 0.0);
    }

    #[test]
    fn distance_examples() {
        let s = HydroSystem::reference_single(3.0);
        assert_eq!(s.distance_to_k(&[0.5]), 0.0);
        assert_relative_eq!(s.distance_to_k(&[1.2]), 0.2, epsilon = 1e-15);
        assert_relative_eq!(cascade().distance_to_k(&[-0.3, 1.4]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn h3_examples() {
        let ok = HydroSystem::reference_single(3.0).check_h3(10_000);
        assert!(ok.holds);
        assert_relative_eq!(ok.eta_max, 0.5, epsilon = 1e-6);
        let bad = HydroSystem::reference_single(2.0).check_h3(10_000);
        assert!(!bad.holds);
        assert_eq!(bad.eta_max, 0.0);
        let two = cascade().check_h3(10_000);
        assert!(two.holds);
        assert_relative_eq!(two.eta_max, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn invalid_systems_rejected() {
        let beta = Inflow::sine_offset(2.0, 0.5);
        assert!(HydroSystem::cascade(
            [beta.clone(), beta.clone()],
            [1.0, 1.0],
            1.0,
            3.0,
            5.5,
            0.9,
            1.0
        )
        .is_err());
        assert!(HydroSystem::single(beta.clone(), 0.0, 3.0, 1.0).is_err());
        assert!(HydroSystem::single(Inflow::sine_offset(2.0, -0.5), 1.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn c_is_dominated_by_identity() {
        let c = cascade();
        for k in 0..=40 {
            let u1 = -1.0 + 4.0 * k as f64 / 40.0;
            let cu = c.kappa_at(ControlPoint::pair(u1, 0.0));
            assert!(cu <= u1 + 1e-15);
            assert_eq!(cu == u1, u1 >= 0.0);
        }
        assert_eq!(c.kappa_at(ControlPoint::pair(0.0, 0.0)), 0.0);
    }

    fn brute_distance(y: [f64; 2], cap: [f64; 2]) -> f64 {
        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let p = [cap[0] * i as f64 / n as f64, cap[1] * j as f64 / n as f64];
                best = best.min(((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2)).sqrt());
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distance_matches_projection(a in -1.0f64..2.0, b in -1.0f64..2.0) {
            let c = cascade();
            let d = c.distance_to_k(&[a, b]);
            prop_assert!((d - brute_distance([a, b], [1.0, 1.0])).abs() <= 2.0 / 400.0);
            let inside = (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b);
            prop_assert_eq!(d == 0.0, inside);
        }

        #[test]
        fn distance_is_lipschitz_and_convex(
            a in -1.0f64..2.0, b in -1.0f64..2.0, c in -1.0f64..2.0, d in -1.0f64..2.0,
            lam in 0.0f64..1.0,
        ) {
            let s = cascade();
            let p = [a, b];
            let q = [c, d];
            let dist = ((a - c).powi(2) + (b - d).powi(2)).sqrt();
            prop_assert!((s.distance_to_k(&p) - s.distance_to_k(&q)).abs() <= dist + 1e-12);
            let m = [lam * a + (1.0 - lam) * c, lam * b + (1.0 - lam) * d];
            prop_assert!(
                s.distance_to_k(&m)
                    <= lam * s.distance_to_k(&p) + (1.0 - lam) * s.distance_to_k(&q) + 1e-12
            );
        }

        #[test]
        fn kappa_is_concave(u in -1.0f64..3.0, v in -1.0f64..3.0, w in 0.0f64..5.5, lam in 0.0f64..1.0) {
            let s = cascade();
            let m = ControlPoint::pair(lam * u + (1.0 - lam) * v, w);
            let lhs = s.kappa_at(m);
            let rhs = lam * s.kappa_at(ControlPoint::pair(u, w))
                + (1.0 - lam) * s.kappa_at(ControlPoint::pair(v, w));
            prop_assert!(lhs >= rhs - 1e-12);
        }

        #[test]
        fn drift_y_is_affine_in_u(u in -1.0f64..3.0, v in -1.0f64..3.0, w in 0.0f64..5.5, lam in 0.0f64..1.0) {
            let s = cascade();
            let a = s.drift_y(0.4, ControlPoint::pair(u, w)).unwrap();
            let b = s.drift_y(0.4, ControlPoint::pair(v, w)).unwrap();
            let m = s.drift_y(0.4, ControlPoint::pair(lam * u + (1.0 - lam) * v, w)).unwrap();
            for d in 0..2 {
                prop_assert!((m[d] - (lam * a[d] + (1.0 - lam) * b[d])).abs() < 1e-12);
            }
        }
    }
}
