//! Rectified-flow reformulation math.
//!
//! Convention: `y` (clean target) is the data endpoint at `t = 0`, the noise
//! `eps` is the prior endpoint at `t = 1`, and the straight path between them is
//! `y_t = (1 - t) y + t eps`. An x0-predictor `f` induces the velocity
//! `v = (y_t - f) / t`, so the `t`-reweighted pixel residual `(y - f) / t`
//! equals the velocity residual `(eps - y) - v` term by term.
//!
//! Everything here is a pure function of its inputs; randomness enters only
//! through explicitly passed draws.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::tensor::{ImageTensor, Real};

pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TStrategy {
    /// `Beta(p + 1, 1)` through the inverse CDF `u^(1/(p+1))`.
    Beta,
    Uniform,
    LogitNormal,
}

impl TStrategy {
    pub const ALL: [TStrategy; 3] = [TStrategy::Beta, TStrategy::Uniform, TStrategy::LogitNormal];

    pub fn name(self) -> &'static str {
        match self {
            TStrategy::Beta => "beta",
            TStrategy::Uniform => "uniform",
            TStrategy::LogitNormal => "logit_normal",
        }
    }

    /// Whether the strategy consumes a standard-normal draw instead of a uniform one.
    pub fn needs_gaussian(self) -> bool {
        matches!(self, TStrategy::LogitNormal)
    }
}

/// Which straight path the state travels along.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPath {
    /// Noise at `t = 1`; the condition is concatenated to the state.
    #[default]
    Standard,
    /// The degraded input at `t = 1`; the state is the only network input.
    Bridge,
}

impl FlowPath {
    pub fn name(self) -> &'static str {
        match self {
            FlowPath::Standard => "standard",
            FlowPath::Bridge => "bridge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TSamplerConfig {
    pub strategy: TStrategy,
    /// Loss exponent; also sets the Beta shape to `p + 1`.
    pub p: u32,
    pub t_min: f64,
    pub logit_mu: f64,
    pub logit_sigma: f64,
}

impl Default for TSamplerConfig {
    fn default() -> Self {
        Self {
            strategy: TStrategy::Beta,
            p: 1,
            t_min: DEFAULT_T_MIN,
            logit_mu: 0.0,
            logit_sigma: 1.0,
        }
    }
}

impl TSamplerConfig {
    pub fn with_strategy(strategy: TStrategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::config(format!(
                "loss exponent p must be >= 1, got {}",
                self.p
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config(format!(
                "t_min must lie in (0, 1), got {}",
                self.t_min
            )));
        }
        if !(self.logit_sigma > 0.0) || !self.logit_mu.is_finite() {
            return Err(Error::config(
                "logit-normal parameters must be finite with sigma > 0",
            ));
        }
        Ok(())
    }
}

/// Map one draw to an interpolation time in `[t_min, 1]`.
///
/// `draw` is uniform on `[0, 1)` for the beta and uniform strategies and
/// standard normal for logit-normal. The clamp is applied after the transform.
pub fn sample_t(cfg: &TSamplerConfig, draw: f64) -> Result<f64> {
    cfg.validate()?;
    let raw = match cfg.strategy {
        TStrategy::Beta => draw.max(0.0).powf(1.0 / (cfg.p as f64 + 1.0)),
        TStrategy::Uniform => draw,
        TStrategy::LogitNormal => sigmoid(cfg.logit_mu + cfg.logit_sigma * draw),
    };
    Ok(raw.max(cfg.t_min).min(1.0))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Probability density of the unclamped sampler at `t`.
pub fn sampling_density(cfg: &TSamplerConfig, t: f64) -> f64 {
    match cfg.strategy {
        TStrategy::Beta => {
            let a = cfg.p as f64 + 1.0;
            a * t.powf(a - 1.0)
        }
        TStrategy::Uniform => 1.0,
        TStrategy::LogitNormal => {
            let logit = (t / (1.0 - t)).ln();
            let z = (logit - cfg.logit_mu) / cfg.logit_sigma;
            (-0.5 * z * z).exp()
                / (cfg.logit_sigma * (2.0 * std::f64::consts::PI).sqrt() * t * (1.0 - t))
        }
    }
}

/// Sampling density times the `t^-p` loss weight (point mass at `t_min` ignored).
pub fn effective_weight(cfg: &TSamplerConfig, t: f64) -> f64 {
    sampling_density(cfg, t) * t.powi(-(cfg.p as i32))
}

/// `(1 - t) y + t eps`.
pub fn make_state<T: Real>(
    y: &ImageTensor<T>,
    eps: &ImageTensor<T>,
    t: T,
) -> Result<ImageTensor<T>> {
    let keep = T::one() - t;
    y.zip_map(eps, |a, b| keep * a + t * b)
}

/// Bridge path between the clean target and the degraded input: `(1 - t) y + t x`.
pub fn make_bridge_state<T: Real>(
    y: &ImageTensor<T>,
    x: &ImageTensor<T>,
    t: T,
) -> Result<ImageTensor<T>> {
    ensure_same_shape(y.shape(), x.shape())?;
    make_state(y, x, t)
}

fn check_t<T: Real>(t: T, t_min: f64) -> Result<()> {
    if !(t.as_f64() >= t_min * (1.0 - 1e-12)) {
        return Err(Error::Numerical(format!("t = {t} below t_min = {t_min}")));
    }
    Ok(())
}

/// `(y_t - f) / t`, the velocity implied by an x0-prediction.
pub fn induced_velocity<T: Real>(
    y_t: &ImageTensor<T>,
    f_out: &ImageTensor<T>,
    t: T,
    t_min: f64,
) -> Result<ImageTensor<T>> {
    check_t(t, t_min)?;
    y_t.zip_map(f_out, |s, f| (s - f) / t)
}

/// `t`-reweighted pixel loss: per-element mean of `|y - f|^p / t^p`.
pub fn rfr_loss<T: Real>(y: &ImageTensor<T>, f_out: &ImageTensor<T>, t: T, p: u32) -> Result<f64> {
    ensure_same_shape(y.shape(), f_out.shape())?;
    if !(1..=2).contains(&p) {
        return Err(Error::config(format!(
            "loss exponent must be 1 or 2, got {p}"
        )));
    }
    let t = t.as_f64();
    let sum: f64 = y
        .data()
        .iter()
        .zip(f_out.data())
        .map(|(&a, &b)| {
            let r = ((a - b).as_f64() / t).abs();
            if p == 1 {
                r
            } else {
                r * r
            }
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Velocity-prediction loss: per-element mean of `|(e - y) - g|`, where `e` is
/// the prior endpoint (noise for the standard path, the input for the bridge).
pub fn velocity_loss<T: Real>(
    y: &ImageTensor<T>,
    e: &ImageTensor<T>,
    g_out: &ImageTensor<T>,
) -> Result<f64> {
    ensure_same_shape(y.shape(), e.shape())?;
    ensure_same_shape(y.shape(), g_out.shape())?;
    let sum: f64 = y
        .data()
        .iter()
        .zip(e.data())
        .zip(g_out.data())
        .map(|((&a, &b), &g)| ((b - a) - g).as_f64().abs())
        .sum();
    Ok(sum / y.len() as f64)
}

/// One explicit Euler step backward in time: `y_t - dt (y_t - f) / t`.
///
/// When `dt == t` the step lands on `t = 0`, where the update reduces to `f`
/// exactly; that value is returned directly.
pub fn euler_step<T: Real>(
    y_t: &ImageTensor<T>,
    f_out: &ImageTensor<T>,
    t: T,
    dt: T,
) -> Result<ImageTensor<T>> {
    ensure_same_shape(y_t.shape(), f_out.shape())?;
    if !(dt > T::zero()) || !(t >= dt) {
        return Err(Error::Numerical(format!(
            "invalid Euler step: t = {t}, dt = {dt}"
        )));
    }
    if dt == t {
        return Ok(f_out.clone());
    }
    y_t.zip_map(f_out, |s, f| s - dt * ((s - f) / t))
}

/// Euler step with an explicit velocity: `y - dt v`.
pub fn euler_step_velocity<T: Real>(
    y_t: &ImageTensor<T>,
    v: &ImageTensor<T>,
    dt: T,
) -> Result<ImageTensor<T>> {
    y_t.zip_map(v, |s, v| s - dt * v)
}

/// The uniform backward grid `t_n = 1 - n / N`, `n = 0..N`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|n| (steps - n) as f64 / steps as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(Shape::new(1, 1, 1), v)
    }

    #[test]
    fn sample_t_examples() {
        let beta = TSamplerConfig::default();
        assert_eq!(sample_t(&beta, 0.25).unwrap(), 0.5);
        assert_eq!(sample_t(&beta, 1e-8).unwrap(), 1e-3);
        let uni = TSamplerConfig::with_strategy(TStrategy::Uniform);
        assert_eq!(sample_t(&uni, 0.7).unwrap(), 0.7);
        let ln = TSamplerConfig::with_strategy(TStrategy::LogitNormal);
        assert_eq!(sample_t(&ln, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn sample_t_p2_uses_cube_root() {
        let cfg = TSamplerConfig {
            p: 2,
            ..Default::default()
        };
        assert!((sample_t(&cfg, 0.125).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_t_rejects_bad_config() {
        let bad_p = TSamplerConfig {
            p: 0,
            ..Default::default()
        };
        assert!(sample_t(&bad_p, 0.5).is_err());
        for t_min in [0.0, -1.0, 1.0, 2.0] {
            let cfg = TSamplerConfig {
                t_min,
                ..Default::default()
            };
            assert!(sample_t(&cfg, 0.5).is_err(), "t_min = {t_min}");
        }
    }

    #[test]
    fn make_state_examples() {
        let y = scalar(0.5);
        let eps = scalar(0.0);
        assert!((make_state(&y, &eps, 1e-3).unwrap().data()[0] - 0.4995).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = ImageTensor::<f64>::randn(Shape::new(3, 4, 4), &mut rng);
        let eps = ImageTensor::<f64>::randn(Shape::new(3, 4, 4), &mut rng);
        assert_eq!(make_state(&y, &eps, 1.0).unwrap(), eps);

        let zeros = ImageTensor::<f64>::zeros(Shape::new(2, 2, 2));
        let ones = ImageTensor::<f64>::filled(Shape::new(2, 2, 2), 1.0);
        let mid = make_state(&zeros, &ones, 0.5).unwrap();
        assert!(mid.data().iter().all(|&v| v == 0.5));

        let other = ImageTensor::<f64>::zeros(Shape::new(2, 2, 3));
        assert!(make_state(&zeros, &other, 0.5).is_err());
    }

    #[test]
    fn bridge_state_examples() {
        let y = scalar(0.2);
        let x = scalar(0.8);
        assert!((make_bridge_state(&y, &x, 0.5).unwrap().data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(make_bridge_state(&y, &x, 1.0).unwrap(), x);
        let near = make_bridge_state(&y, &x, 1e-3).unwrap().data()[0];
        assert!((near - 0.2).abs() < 1e-3);
        let lr = ImageTensor::<f64>::zeros(Shape::new(1, 2, 2));
        assert!(make_bridge_state(&y, &lr, 0.5).is_err());
    }

    #[test]
    fn induced_velocity_examples() {
        let v = induced_velocity(&scalar(0.6), &scalar(0.2), 0.5, DEFAULT_T_MIN).unwrap();
        assert!((v.data()[0] - 0.8).abs() < 1e-15);
        let s = scalar(0.3);
        assert_eq!(
            induced_velocity(&s, &s, 0.7, DEFAULT_T_MIN).unwrap().data()[0],
            0.0
        );
        assert!(induced_velocity(&s, &s, 1e-4, DEFAULT_T_MIN).is_err());
    }

    #[test]
    fn perfect_predictor_velocity_is_constant_along_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(3, 5, 5);
        for _ in 0..50 {
            let y = ImageTensor::<f64>::randn(shape, &mut rng);
            let eps = ImageTensor::<f64>::randn(shape, &mut rng);
            let target = eps.zip_map(&y, |e, y| e - y).unwrap();
            let t: f64 = rng.random_range(1e-3..=1.0);
            let yt = make_state(&y, &eps, t).unwrap();
            let v = induced_velocity(&yt, &y, t, DEFAULT_T_MIN).unwrap();
            assert!(v.max_abs_diff(&target).unwrap() < 1e-9);
        }
    }

    #[test]
    fn rfr_loss_examples() {
        assert_eq!(rfr_loss(&scalar(1.0), &scalar(0.0), 0.5, 1).unwrap(), 2.0);
        assert_eq!(rfr_loss(&scalar(1.0), &scalar(0.0), 0.5, 2).unwrap(), 4.0);
        let y = scalar(0.4);
        assert_eq!(rfr_loss(&y, &y, 0.1, 1).unwrap(), 0.0);
        assert!(rfr_loss(&y, &ImageTensor::zeros(Shape::new(1, 1, 2)), 0.5, 1).is_err());
    }

    /// Independently coded residual: sum |(eps - y) - (y_t - f)/t| / n.
    fn velocity_residual(y: &[f64], eps: &[f64], f: &[f64], t: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..y.len() {
            let yt = (1.0 - t) * y[i] + t * eps[i];
            let v = (yt - f[i]) / t;
            acc += ((eps[i] - y[i]) - v).abs();
        }
        acc / y.len() as f64
    }

    #[test]
    fn rfr_loss_equals_velocity_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(3, 6, 6);
        for _ in 0..200 {
            let y = ImageTensor::<f64>::randn(shape, &mut rng);
            let eps = ImageTensor::<f64>::randn(shape, &mut rng);
            let f = ImageTensor::<f64>::randn(shape, &mut rng);
            let t: f64 = rng.random_range(1e-3..=1.0);
            let loss = rfr_loss(&y, &f, t, 1).unwrap();
            let resid = velocity_residual(y.data(), eps.data(), f.data(), t);
            assert!((loss - resid).abs() / (loss + 1e-12) < 1e-6);
        }
    }

    #[test]
    fn velocity_loss_examples() {
        let zero = scalar(0.0);
        assert!((velocity_loss(&zero, &zero, &scalar(0.3)).unwrap() - 0.3).abs() < 1e-15);
        let y = scalar(0.25);
        let e = scalar(-1.5);
        let g = e.zip_map(&y, |e, y| e - y).unwrap();
        assert_eq!(velocity_loss(&y, &e, &g).unwrap(), 0.0);
    }

    #[test]
    fn velocity_loss_invariant_under_time_reversal() {
        // swapping endpoints flips the target velocity, so a negated prediction
        // scores the same loss
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape::new(2, 4, 4);
        for _ in 0..100 {
            let y = ImageTensor::<f64>::randn(shape, &mut rng);
            let eps = ImageTensor::<f64>::randn(shape, &mut rng);
            let g = ImageTensor::<f64>::randn(shape, &mut rng);
            let t: f64 = rng.random_range(0.0..1.0);
            // the reversed path passes through the same state at 1 - t
            let fwd = make_state(&y, &eps, t).unwrap();
            let rev = make_state(&eps, &y, 1.0 - t).unwrap();
            assert!(fwd.max_abs_diff(&rev).unwrap() < 1e-12);
            let a = velocity_loss(&y, &eps, &g).unwrap();
            let b = velocity_loss(&eps, &y, &g.map(|v| -v)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = Shape::new(3, 4, 4);
        let s = ImageTensor::<f64>::randn(shape, &mut rng);
        let f = ImageTensor::<f64>::randn(shape, &mut rng);
        assert_eq!(euler_step(&s, &f, 1.0, 1.0).unwrap(), f);
        assert_eq!(euler_step(&s, &s, 0.5, 0.25).unwrap(), s);

        let a = euler_step(&s, &f, 0.8, 0.3).unwrap();
        let b = s.zip_map(&f, |s, f| s + 0.3 * (f - s) / 0.8).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        assert!(euler_step(&s, &f, 0.2, 0.3).is_err());
        assert!(euler_step(&s, &f, 0.2, 0.0).is_err());
    }

    #[test]
    fn euler_on_true_path_stays_on_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(3, 4, 4);
        let y = ImageTensor::<f32>::randn(shape, &mut rng).map(|v| v.abs().min(1.0));
        let eps = ImageTensor::<f32>::randn(shape, &mut rng);
        let steps = 7;
        let dt = 1.0 / steps as f32;
        let mut state = eps.clone();
        for &t in time_grid(steps).iter() {
            let t = t as f32;
            state = euler_step(&state, &y, t, dt.min(t)).unwrap();
            let expected = make_state(&y, &eps, (t - dt).max(0.0)).unwrap();
            assert!(state.max_abs_diff(&expected).unwrap() < 1e-5);
        }
        assert!(state.max_abs_diff(&y).unwrap() < 1e-5);
    }

    #[test]
    fn effective_weight_examples() {
        let beta = TSamplerConfig::default();
        assert!((effective_weight(&beta, 0.3) - 2.0).abs() < 1e-12);
        assert!((effective_weight(&beta, 0.9) - 2.0).abs() < 1e-12);
        let uni = TSamplerConfig::with_strategy(TStrategy::Uniform);
        assert!((effective_weight(&uni, 0.1) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn time_grid_never_touches_zero() {
        for n in 1..=1000 {
            let grid = time_grid(n);
            assert_eq!(grid[0], 1.0);
            let min = grid.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((min - 1.0 / n as f64).abs() < 1e-15);
            assert!(min >= DEFAULT_T_MIN);
        }
    }
}
