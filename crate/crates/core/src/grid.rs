//! Uniform rectilinear grids and the fields stored on them.
//!
//! Fields are row-major with the first axis outermost. The first axis of every
//! spatial grid is the price `x`, starting at 0; queries above its maximum are
//! extrapolated linearly, queries outside any other axis are errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(name: impl Into<String>, min: f64, max: f64, n: usize) -> Result<Self> {
        let name = name.into();
        if n < 2 {
            return Err(Error::InvalidGrid(format!(
                "axis `{name}` needs at least 2 points"
            )));
        }
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::InvalidGrid(format!(
                "axis `{name}` has an empty or non-finite range [{min}, {max}]"
            )));
        }
        Ok(Axis { name, min, max, n })
    }

    /// Axis through `min` with spacing `step` and `n` points.
    pub fn with_step(name: impl Into<String>, min: f64, step: f64, n: usize) -> Result<Self> {
        Axis::new(name, min, min + step * (n - 1) as f64, n)
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.max
        } else {
            self.min + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.value(i)).collect()
    }

    /// Cell index and weight for linear interpolation, clamped to the axis.
    #[inline]
    pub fn locate(&self, v: f64) -> (usize, f64) {
        let s = ((v - self.min) / self.step()).clamp(0.0, (self.n - 1) as f64);
        let i = (s as usize).min(self.n - 2);
        (i, s - i as f64)
    }

    /// Like [`Axis::locate`] but the weight may exceed 1 above the maximum.
    #[inline]
    pub fn locate_extrapolating(&self, v: f64) -> (usize, f64) {
        let s = ((v - self.min) / self.step()).max(0.0);
        let i = (s as usize).min(self.n - 2);
        (i, s - i as f64)
    }

    #[inline]
    pub fn nearest(&self, v: f64) -> usize {
        let s = ((v - self.min) / self.step()).round();
        s.clamp(0.0, (self.n - 1) as f64) as usize
    }

    /// Index of the node equal to `v` within `tol` spacings, if any.
    pub fn node_of(&self, v: f64, tol: f64) -> Option<usize> {
        let s = (v - self.min) / self.step();
        let i = s.round();
        ((s - i).abs() <= tol && i >= 0.0 && i <= (self.n - 1) as f64).then_some(i as usize)
    }
}

/// Spatial axes plus a uniform time grid on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    pub n_steps: usize,
    pub horizon: f64,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>, n_steps: usize, horizon: f64) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        if n_steps == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "time grid needs n_steps >= 1 and T > 0 (got {n_steps}, {horizon})"
            )));
        }
        Ok(GridSpec {
            axes,
            n_steps,
            horizon,
        })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, step: usize) -> f64 {
        if step == self.n_steps {
            self.horizon
        } else {
            step as f64 * self.dt()
        }
    }

    /// Step whose interval `[t_k, t_{k+1})` contains `t`.
    pub fn step_of(&self, t: f64) -> usize {
        let k = (t / self.dt() + 1e-9).floor();
        (k.max(0.0) as usize).min(self.n_steps)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axis(&self, name: &str) -> Option<&Axis> {
        self.axes.iter().find(|a| a.name == name)
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, a)| acc * a.n + i)
    }

    /// Inverse of [`GridSpec::offset`].
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for (d, a) in self.axes.iter().enumerate().rev() {
            idx[d] = flat % a.n;
            flat /= a.n;
        }
        idx
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.value(i))
            .collect()
    }
}

/// Time slices of a scalar field on a [`GridSpec`].
///
/// Entries are finite, except that reconstructed value functions use
/// `f64::NEG_INFINITY` to mark nodes from which the constraint cannot be met.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub name: String,
    pub grid: GridSpec,
    /// Retained time-step indices, ascending.
    pub steps: Vec<usize>,
    pub slices: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ValueField {
    pub fn new(name: impl Into<String>, grid: GridSpec) -> Self {
        ValueField {
            name: name.into(),
            grid,
            steps: Vec::new(),
            slices: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    /// Inserts a slice, keeping `steps` sorted.
    pub fn insert(&mut self, step: usize, slice: Vec<f64>) {
        debug_assert_eq!(slice.len(), self.grid.len());
        match self.steps.binary_search(&step) {
            Ok(k) => self.slices[k] = slice,
            Err(k) => {
                self.steps.insert(k, step);
                self.slices.insert(k, slice);
            }
        }
    }

    pub fn slice_at_step(&self, step: usize) -> Option<&[f64]> {
        self.steps
            .binary_search(&step)
            .ok()
            .map(|k| self.slices[k].as_slice())
    }

    /// Latest retained slice at or before `t`.
    pub fn slice_index_for_time(&self, t: f64) -> Result<usize> {
        let horizon = self.grid.horizon;
        if !(t >= -1e-12 && t <= horizon + 1e-12) || self.steps.is_empty() {
            return Err(Error::OutsideHorizon { t, horizon });
        }
        let tol = 1e-9 * self.grid.dt();
        let k = self
            .steps
            .partition_point(|&s| self.grid.time(s) <= t + tol);
        if k == 0 {
            return Err(Error::OutsideHorizon { t, horizon });
        }
        Ok(k - 1)
    }

    pub fn value_at_node(&self, step: usize, idx: &[usize]) -> Option<f64> {
        self.slice_at_step(step).map(|s| s[self.grid.offset(idx)])
    }

    /// Multilinear interpolation in space, previous retained slice in time.
    pub fn interpolate(&self, t: f64, point: &[f64]) -> Result<f64> {
        if point.len() != self.grid.axes.len() {
            return Err(Error::InvalidGrid(format!(
                "query has {} coordinates, grid has {} axes",
                point.len(),
                self.grid.axes.len()
            )));
        }
        let k = self.slice_index_for_time(t)?;
        interpolate_slice(&self.grid.axes, &self.slices[k], point)
    }
}

/// Multilinear interpolation of one slab. Exact on multilinear functions.
pub fn interpolate_slice(axes: &[Axis], data: &[f64], point: &[f64]) -> Result<f64> {
    let d = axes.len();
    let mut cells = Vec::with_capacity(d);
    for (k, (a, &v)) in axes.iter().zip(point).enumerate() {
        let slack = 1e-12 * a.step();
        if v < a.min - slack || v.is_nan() {
            return Err(Error::BelowAxis {
                axis: a.name.clone(),
                point: point.to_vec(),
            });
        }
        if k == 0 {
            cells.push(a.locate_extrapolating(v));
        } else if v > a.max + slack {
            return Err(Error::AboveAxis {
                axis: a.name.clone(),
                point: point.to_vec(),
            });
        } else {
            cells.push(a.locate(v));
        }
    }
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut flat = 0;
        for (k, (a, &(i, w))) in axes.iter().zip(&cells).enumerate() {
            let upper = (corner >> (d - 1 - k)) & 1 == 1;
            weight *= if upper { w } else { 1.0 - w };
            flat = flat * a.n + i + upper as usize;
        }
        if weight != 0.0 {
            total += weight * data[flat];
        }
    }
    Ok(total)
}

/// Linear interpolation on a uniform line `line[0..]` at fractional index `s`,
/// clamped at both ends.
#[inline]
pub(crate) fn lerp_clamped(line: &[f64], s: f64) -> f64 {
    let n = line.len();
    let s = s.clamp(0.0, (n - 1) as f64);
    let i = (s as usize).min(n - 2);
    let w = s - i as f64;
    line[i] + w * (line[i + 1] - line[i])
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    fn grid3() -> GridSpec {
        GridSpec::new(
            vec![
                Axis::new("x", 0.0, 4.0, 5).unwrap(),
                Axis::new("y", 0.0, 1.0, 3).unwrap(),
                Axis::new("z", -2.0, 1.0, 4).unwrap(),
            ],
            10,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn axis_basics() {
        let a = Axis::new("y", -0.25, 1.25, 151).unwrap();
        assert_relative_eq!(a.step(), 0.01, max_relative = 1e-12);
        assert_eq!(a.node_of(0.0, 1e-6), Some(25));
        assert_eq!(a.node_of(1.0, 1e-6), Some(125));
        assert_eq!(a.nearest(0.504), 75);
        assert_eq!(a.locate(-1.0), (0, 0.0));
        assert_eq!(a.locate(9.0), (149, 1.0));
        assert!(Axis::new("y", 0.0, 1.0, 1).is_err());
        assert!(Axis::new("y", 1.0, 1.0, 3).is_err());
    }

    #[test]
    fn offsets_round_trip() {
        let g = grid3();
        for flat in 0..g.len() {
            assert_eq!(g.offset(&g.unravel(flat)), flat);
        }
        assert_eq!(g.offset(&[1, 2, 3]), 12 + 2 * 4 + 3);
    }

    fn field_from(g: &GridSpec, f: impl Fn(&[f64]) -> f64) -> ValueField {
        let mut field = ValueField::new("f", g.clone());
        let data = (0..g.len()).map(|k| f(&g.point(k))).collect();
        field.insert(0, data);
        field
    }

    #[test]
    fn node_query_returns_stored_value() {
        let g = grid3();
        let f = field_from(&g, |p| (p[0] * 3.1 + p[1]).sin() * p[2]);
        for flat in [0, 7, 33, g.len() - 1] {
            let p = g.point(flat);
            assert_eq!(f.interpolate(0.3, &p).unwrap(), f.slices[0][flat]);
        }
    }

    #[test]
    fn midpoint_of_linear_field_is_mean() {
        let g = grid3();
        let f = field_from(&g, |p| 2.0 * p[0] - p[1] + 0.5 * p[2]);
        let a = [1.0, 0.5, -1.0];
        let b = [2.0, 0.5, -1.0];
        let m = f.interpolate(0.0, &[1.5, 0.5, -1.0]).unwrap();
        let mean = 0.5 * (f.interpolate(0.0, &a).unwrap() + f.interpolate(0.0, &b).unwrap());
        assert_relative_eq!(m, mean, epsilon = 1e-14);
    }

    #[test]
    fn below_axis_is_an_error_and_x_extrapolates() {
        let g = grid3();
        let f = field_from(&g, |p| 1.0 + 2.0 * p[0] + p[1]);
        assert!(matches!(
            f.interpolate(0.0, &[-0.1, 0.5, 0.0]),
            Err(Error::BelowAxis { .. })
        ));
        assert!(matches!(
            f.interpolate(0.0, &[1.0, 1.5, 0.0]),
            Err(Error::AboveAxis { .. })
        ));
        assert_relative_eq!(
            f.interpolate(0.0, &[6.0, 0.5, 0.0]).unwrap(),
            13.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn previous_slice_in_time() {
        let g = grid3();
        let mut f = ValueField::new("f", g.clone());
        f.insert(0, vec![0.0; g.len()]);
        f.insert(5, vec![1.0; g.len()]);
        f.insert(10, vec![2.0; g.len()]);
        let p = [1.0, 0.5, 0.0];
        assert_eq!(f.interpolate(0.49, &p).unwrap(), 0.0);
        assert_eq!(f.interpolate(0.5, &p).unwrap(), 1.0);
        assert_eq!(f.interpolate(0.99, &p).unwrap(), 1.0);
        assert_eq!(f.interpolate(1.0, &p).unwrap(), 2.0);
        assert!(f.interpolate(1.5, &p).is_err());
    }

    proptest! {
        #[test]
        fn exact_on_random_multilinear(
            c in prop::collection::vec(-3.0f64..3.0, 8),
            x in 0.0f64..4.0, y in 0.0f64..1.0, z in -2.0f64..1.0,
        ) {
            let g = grid3();
            let poly = |p: &[f64]| {
                let (x, y, z) = (p[0], p[1], p[2]);
                c[0] + c[1] * x + c[2] * y + c[3] * z
                    + c[4] * x * y + c[5] * x * z + c[6] * y * z + c[7] * x * y * z
            };
            let f = field_from(&g, poly);
            let got = f.interpolate(0.0, &[x, y, z]).unwrap();
            prop_assert!((got - poly(&[x, y, z])).abs() < 1e-10);
        }

        #[test]
        fn lerp_clamped_stays_within_hull(v in prop::collection::vec(-5.0f64..5.0, 2..20), s in -3.0f64..25.0) {
            let got = lerp_clamped(&v, s);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }
}
