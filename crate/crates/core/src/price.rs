//! Electricity price dynamics.
//!
//! Prices follow `dX = b(t, X) dt + sigma(t, X) dB` with one of two affine-drift,
//! multiplicative-noise models:
//!
//! * GBM: `b(t, x) = b x`, `sigma(t, x) = sigma x`
//! * IGBM: `b(t, x) = a - b x`, `sigma(t, x) = sigma x` (mean reverting to `a / b`)
//!
//! Both keep prices nonnegative. Because the drifts are affine, the mean
//! `m(s) = E[X_s | X_t = x]` solves a linear ODE in closed form, and so does the
//! accumulated price `G(t, x) = kappa_bar * E[int_t^T X_s ds]` used by the
//! level-set reconstruction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriceModel {
    Gbm { b: f64, sigma: f64 },
    Igbm { a: f64, b: f64, sigma: f64 },
}

impl PriceModel {
    pub fn gbm(b: f64, sigma: f64) -> Self {
        PriceModel::Gbm { b, sigma }
    }

    pub fn igbm(a: f64, b: f64, sigma: f64) -> Self {
        PriceModel::Igbm { a, b, sigma }
    }

    pub fn validate(&self) -> Result<()> {
        let params: &[(&str, f64)] = match self {
            PriceModel::Gbm { b, sigma } => &[("b", *b), ("sigma", *sigma)],
            PriceModel::Igbm { a, b, sigma } => &[("a", *a), ("b", *b), ("sigma", *sigma)],
        };
        for (name, v) in params {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "price parameter `{name}` must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            PriceModel::Gbm { sigma, .. } | PriceModel::Igbm { sigma, .. } => sigma,
        }
    }

    /// Constant of the Lipschitz / linear-growth bound on the coefficients.
    pub fn growth_constant(&self) -> f64 {
        match *self {
            PriceModel::Gbm { b, sigma } => b.abs().max(sigma),
            PriceModel::Igbm { a, b, sigma } => a.abs().max(b.abs()).max(sigma),
        }
    }

    /// Whether `V(t, x, y) = x v(t, y)` holds for this model.
    pub fn is_homogeneous(&self) -> bool {
        matches!(self, PriceModel::Gbm { .. })
    }

    #[inline]
    pub(crate) fn drift_at(&self, x: f64) -> f64 {
        match *self {
            PriceModel::Gbm { b, .. } => b * x,
            PriceModel::Igbm { a, b, .. } => a - b * x,
        }
    }

    #[inline]
    pub(crate) fn diffusion_at(&self, x: f64) -> f64 {
        self.sigma() * x
    }

    pub fn drift(&self, _t: f64, x: f64) -> Result<f64> {
        check_price(x)?;
        Ok(self.drift_at(x))
    }

    pub fn diffusion(&self, _t: f64, x: f64) -> Result<f64> {
        check_price(x)?;
        Ok(self.diffusion_at(x))
    }

    /// `E[X_s | X_t = x]`, exact for both affine drifts.
    pub fn expected_price(&self, t: f64, x: f64, s: f64) -> Result<f64> {
        check_price(x)?;
        check_order(t, s)?;
        let tau = s - t;
        Ok(match *self {
            PriceModel::Gbm { b, .. } => x * (b * tau).exp(),
            PriceModel::Igbm { a, b, .. } => {
                if b > 0.0 {
                    let mean = a / b;
                    mean + (x - mean) * (-b * tau).exp()
                } else {
                    x + a * tau
                }
            }
        })
    }

    /// `G(t, x) = kappa_bar * int_t^T E[X_s | X_t = x] ds` in closed form.
    pub fn accumulated_price(&self, kappa_bar: f64, t: f64, x: f64, horizon: f64) -> Result<f64> {
        check_price(x)?;
        check_order(t, horizon)?;
        if kappa_bar < 0.0 {
            return Err(Error::InvalidModel(format!(
                "kappa_bar must be nonnegative, got {kappa_bar}"
            )));
        }
        Ok(kappa_bar * self.integrated_mean(x, horizon - t))
    }

    /// `int_0^tau E[X_s | X_0 = x] ds`.
    pub(crate) fn integrated_mean(&self, x: f64, tau: f64) -> f64 {
        match *self {
            PriceModel::Gbm { b, .. } => x * exp_ratio(b, tau),
            PriceModel::Igbm { a, b, .. } => {
                if b > 0.0 {
                    let mean = a / b;
                    mean * tau + (x - mean) * exp_ratio(-b, tau)
                } else {
                    x * tau + 0.5 * a * tau * tau
                }
            }
        }
    }

    /// One Euler-Maruyama step with full truncation at zero.
    #[inline]
    pub fn simulate_step(&self, _t: f64, x: f64, dt: f64, noise: f64) -> f64 {
        let next = x + self.drift_at(x) * dt + self.diffusion_at(x) * dt.sqrt() * noise;
        next.max(0.0)
    }
}

/// `(e^{r tau} - 1) / r`, continuous at `r = 0`.
fn exp_ratio(r: f64, tau: f64) -> f64 {
    let rt = r * tau;
    if rt.abs() < 1e-8 {
        tau * (1.0 + 0.5 * rt)
    } else {
        rt.exp_m1() / r
    }
}

fn check_price(x: f64) -> Result<()> {
    if x < 0.0 || x.is_nan() {
        Err(Error::NegativePrice(x))
    } else {
        Ok(())
    }
}

fn check_order(from: f64, to: f64) -> Result<()> {
    if from > to {
        Err(Error::TimeOrder { from, to })
    } else {
        Ok(())
    }
}

/// Independent random stream for Monte Carlo path `path` under `seed`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    #[test]
    fn drift_examples() {
        assert_relative_eq!(PriceModel::gbm(0.05, 0.1).drift(0.0, 5.0).unwrap(), 0.25);
        assert_eq!(
            PriceModel::igbm(5.0, 1.0, 0.1).drift(0.0, 5.0).unwrap(),
            0.0
        );
        assert_eq!(PriceModel::gbm(0.05, 0.1).drift(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            PriceModel::gbm(0.05, 0.1).drift(0.0, -1.0),
            Err(Error::NegativePrice(_))
        ));
    }

    #[test]
    fn diffusion_examples() {
        assert_relative_eq!(PriceModel::gbm(0.05, 0.1).diffusion(0.0, 5.0).unwrap(), 0.5);
        assert_relative_eq!(
            PriceModel::igbm(5.0, 1.0, 0.1).diffusion(0.3, 5.0).unwrap(),
            0.5
        );
        assert_eq!(PriceModel::gbm(0.05, 0.1).diffusion(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(PriceModel::gbm(0.05, 0.0).diffusion(0.0, 7.0).unwrap(), 0.0);
        assert!(PriceModel::gbm(0.05, 0.1).diffusion(0.0, -0.5).is_err());
    }

    #[test]
    fn expected_price_examples() {
        let gbm = PriceModel::gbm(0.05, 0.1);
        assert_relative_eq!(
            gbm.expected_price(0.0, 5.0, 1.0).unwrap(),
            5.0 * 0.05f64.exp()
        );
        assert_eq!(gbm.expected_price(0.4, 3.0, 0.4).unwrap(), 3.0);
        let igbm = PriceModel::igbm(5.0, 1.0, 0.1);
        for s in [0.0, 0.3, 1.0, 7.0] {
            assert_relative_eq!(igbm.expected_price(0.0, 5.0, s).unwrap(), 5.0);
        }
        assert!(gbm.expected_price(1.0, 5.0, 0.5).is_err());
    }

    #[test]
    fn accumulated_price_examples() {
        let gbm = PriceModel::gbm(0.05, 0.1);
        let g0 = gbm.accumulated_price(3.0, 0.0, 5.0, 1.0).unwrap();
        assert_relative_eq!(
            g0,
            15.0 * (0.05f64.exp() - 1.0) / 0.05,
            max_relative = 1e-12
        );
        assert_relative_eq!(g0, 15.381, epsilon = 1e-3);
        let g_half = gbm.accumulated_price(3.0, 0.5, 5.0, 1.0).unwrap();
        assert_relative_eq!(g_half, 7.595, epsilon = 1e-3);
        assert_eq!(gbm.accumulated_price(3.0, 1.0, 5.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn igbm_accumulated_matches_quadrature_of_mean() {
        let m = PriceModel::igbm(5.0, 1.0, 0.1);
        let (t, x, horizon) = (0.2, 8.0, 1.0);
        let n = 20_000;
        let h = (horizon - t) / n as f64;
        let mut sum = 0.0;
        for i in 0..n {
            let s = t + (i as f64 + 0.5) * h;
            sum += m.expected_price(t, x, s).unwrap() * h;
        }
        assert_relative_eq!(
            m.accumulated_price(2.0, t, x, horizon).unwrap(),
            2.0 * sum,
            max_relative = 1e-8
        );
    }

    #[test]
    fn zero_rate_limits_are_continuous() {
        let a = PriceModel::gbm(0.0, 0.1)
            .accumulated_price(1.0, 0.0, 2.0, 1.0)
            .unwrap();
        let b = PriceModel::gbm(1e-10, 0.1)
            .accumulated_price(1.0, 0.0, 2.0, 1.0)
            .unwrap();
        assert_relative_eq!(a, 2.0);
        assert_relative_eq!(a, b, max_relative = 1e-9);
        let c = PriceModel::igbm(5.0, 0.0, 0.1)
            .expected_price(0.0, 1.0, 2.0)
            .unwrap();
        assert_relative_eq!(c, 11.0);
    }

    #[test]
    fn simulate_step_examples() {
        let det = PriceModel::gbm(0.05, 0.0);
        assert_relative_eq!(det.simulate_step(0.0, 5.0, 0.1, 3.7), 5.025);
        assert_eq!(
            PriceModel::gbm(0.05, 0.1).simulate_step(0.0, 0.0, 0.1, -2.0),
            0.0
        );
        assert_relative_eq!(
            PriceModel::gbm(0.05, 0.1).simulate_step(0.0, 5.0, 0.01, 1.0),
            5.0525,
            max_relative = 1e-14
        );
        // Truncation: a huge negative shock never yields a negative price.
        assert_eq!(
            PriceModel::igbm(5.0, 1.0, 2.0).simulate_step(0.0, 1.0, 1.0, -10.0),
            0.0
        );
    }

    #[test]
    fn gbm_mean_is_linear_in_start() {
        let m = PriceModel::gbm(0.05, 0.1);
        for lambda in [0.5, 2.0, 4.0] {
            let a = m.expected_price(0.1, lambda * 3.0, 0.9).unwrap();
            let b = lambda * m.expected_price(0.1, 3.0, 0.9).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn independent_streams_differ() {
        let mut a = path_rng(7, 0);
        let mut b = path_rng(7, 1);
        let xa: f64 = StandardNormal.sample(&mut a);
        let xb: f64 = StandardNormal.sample(&mut b);
        assert_ne!(xa, xb);
        let mut a2 = path_rng(7, 0);
        let xa2: f64 = StandardNormal.sample(&mut a2);
        assert_eq!(xa, xa2);
    }

    #[test]
    fn config_round_trip() {
        let m: PriceModel =
            toml::from_str("kind = \"igbm\"\na = 5.0\nb = 1.0\nsigma = 0.1").unwrap();
        assert_eq!(m, PriceModel::igbm(5.0, 1.0, 0.1));
        assert!(
            toml::from_str::<PriceModel>("kind = \"gbm\"\nb = 1.0\nsigma = 0.1\nbogus = 1")
                .is_err()
        );
    }
}
