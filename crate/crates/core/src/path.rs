//! Continuous-time paths in R^d: sampled paths with cubic Hermite
//! interpolation, and closed-form trigonometric paths.

use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::axpy;

/// A differentiable path `[0, T] → R^d`.
pub trait Curve: Sync {
    fn dim(&self) -> usize;
    fn duration(&self) -> f64;
    fn position(&self, t: f64) -> Vec<f64>;
    fn velocity(&self, t: f64) -> Vec<f64>;
}

/// Number of uniform steps of size `step` in `total`; fails unless the
/// ratio is an integer within 1e-9.
pub fn step_count(total: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) || !(total > 0.0) || !step.is_finite() || !total.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "total {total} and step {step} must be positive and finite"
        )));
    }
    let ratio = total / step;
    let k = ratio.round();
    if (ratio - k).abs() > 1e-9 * k.max(1.0) || k < 1.0 {
        return Err(Error::StepCountMismatch { total, step });
    }
    Ok(k as usize)
}

/// Finite-difference slopes of uniformly sampled values: centered in the
/// interior, second-order one-sided at both ends. Needs at least 3 samples.
pub fn fd_slopes(values: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = values.len();
    assert!(n >= 3, "finite-difference slopes need at least 3 samples");
    let d = values[0].len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = vec![0.0; d];
        if k == 0 {
            axpy(&mut s, -3.0, &values[0]);
            axpy(&mut s, 4.0, &values[1]);
            axpy(&mut s, -1.0, &values[2]);
        } else if k == n - 1 {
            axpy(&mut s, 3.0, &values[n - 1]);
            axpy(&mut s, -4.0, &values[n - 2]);
            axpy(&mut s, 1.0, &values[n - 3]);
        } else {
            axpy(&mut s, 1.0, &values[k + 1]);
            axpy(&mut s, -1.0, &values[k - 1]);
        }
        s.iter_mut().for_each(|x| *x /= 2.0 * dt);
        out.push(s);
    }
    out
}

/// Locates `t` on a uniform grid: interval index and local coordinate in [0, 1].
pub(crate) fn locate(t: f64, dt: f64, steps: usize) -> (usize, f64) {
    let mut u = (t / dt).max(0.0);
    let r = u.round();
    if (u - r).abs() <= 1e-9 * r.max(1.0) {
        u = r;
    }
    let k = (u.floor() as usize).min(steps - 1);
    let theta = (u - k as f64).clamp(0.0, 1.0);
    (k, theta)
}

/// Cubic Hermite position on one interval.
pub(crate) fn hermite_position(x0: &[f64], v0: &[f64], x1: &[f64], v1: &[f64], dt: f64, theta: f64) -> Vec<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    (0..x0.len())
        .map(|i| h00 * x0[i] + h10 * dt * v0[i] + h01 * x1[i] + h11 * dt * v1[i])
        .collect()
}

/// Time derivative of the cubic Hermite interpolant on one interval.
pub(crate) fn hermite_velocity(x0: &[f64], v0: &[f64], x1: &[f64], v1: &[f64], dt: f64, theta: f64) -> Vec<f64> {
    let t2 = theta * theta;
    let d00 = 6.0 * t2 - 6.0 * theta;
    let d10 = 3.0 * t2 - 4.0 * theta + 1.0;
    let d01 = -6.0 * t2 + 6.0 * theta;
    let d11 = 3.0 * t2 - 2.0 * theta;
    (0..x0.len())
        .map(|i| (d00 * x0[i] + d01 * x1[i]) / dt + d10 * v0[i] + d11 * v1[i])
        .collect()
}

/// A path sampled on the uniform grid `t_k = k·dt`, `k = 0..=K`.
///
/// Values are arbitrary ambient vectors (not required to be unit).
/// Between samples the path is the cubic Hermite interpolant with
/// finite-difference slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    dt: f64,
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

impl PathSample {
    pub fn new(dt: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if values.len() < 3 {
            return Err(Error::GridMismatch(format!(
                "a sampled path needs at least 3 samples, got {}",
                values.len()
            )));
        }
        let d = values[0].len();
        if let Some(bad) = values.iter().find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        let slopes = fd_slopes(&values, dt);
        Ok(Self { dt, values, slopes })
    }

    /// Sampled path with known slopes at the samples.
    pub fn with_slopes(dt: f64, values: Vec<Vec<f64>>, slopes: Vec<Vec<f64>>) -> Result<Self> {
        let mut p = Self::new(dt, values)?;
        if slopes.len() != p.values.len() {
            return Err(Error::GridMismatch(format!(
                "{} slopes for {} samples",
                slopes.len(),
                p.values.len()
            )));
        }
        let d = p.values[0].len();
        if let Some(bad) = slopes.iter().find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        p.slopes = slopes;
        Ok(p)
    }

    /// Samples `curve` on a grid of spacing `dt` (which must divide its duration).
    pub fn from_curve(curve: &dyn Curve, dt: f64) -> Result<Self> {
        let k = step_count(curve.duration(), dt)?;
        let values = (0..=k).map(|i| curve.position(i as f64 * dt)).collect();
        Self::new(dt, values)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn slopes(&self) -> &[Vec<f64>] {
        &self.slopes
    }
}

impl Curve for PathSample {
    fn dim(&self) -> usize {
        self.values[0].len()
    }

    fn duration(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    fn position(&self, t: f64) -> Vec<f64> {
        let (k, th) = locate(t, self.dt, self.steps());
        hermite_position(
            &self.values[k],
            &self.slopes[k],
            &self.values[k + 1],
            &self.slopes[k + 1],
            self.dt,
            th,
        )
    }

    fn velocity(&self, t: f64) -> Vec<f64> {
        let (k, th) = locate(t, self.dt, self.steps());
        hermite_velocity(
            &self.values[k],
            &self.slopes[k],
            &self.values[k + 1],
            &self.slopes[k + 1],
            self.dt,
            th,
        )
    }
}

/// One trigonometric mode `a·sin(ωt) + b·cos(ωt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub omega: f64,
    pub sin_coef: Vec<f64>,
    pub cos_coef: Vec<f64>,
}

/// `offset + Σ_k a_k sin(ω_k t) + b_k cos(ω_k t)` on `[0, T]`, with exact derivatives.
///
/// Every derivative is bounded by `Σ_k ω_k^j (‖a_k‖ + ‖b_k‖)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierPath {
    pub offset: Vec<f64>,
    pub modes: Vec<Mode>,
    pub duration: f64,
}

impl FourierPath {
    /// Random smooth path around `center` with `n_modes` modes of frequency
    /// `kπ/T` and Gaussian coefficients of scale `amplitude / k`.
    pub fn random<R: Rng + ?Sized>(center: &[f64], duration: f64, n_modes: usize, amplitude: f64, rng: &mut R) -> Self {
        let d = center.len();
        let modes = (1..=n_modes)
            .map(|k| {
                let s = amplitude / k as f64;
                Mode {
                    omega: k as f64 * PI / duration,
                    sin_coef: (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
                    cos_coef: (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
                }
            })
            .collect();
        Self {
            offset: center.to_vec(),
            modes,
            duration,
        }
    }

    /// Random smooth variation vanishing at both endpoints: pure `sin(kπt/T)` modes.
    pub fn random_bump<R: Rng + ?Sized>(d: usize, duration: f64, n_modes: usize, amplitude: f64, rng: &mut R) -> Self {
        let modes = (1..=n_modes)
            .map(|k| {
                let s = amplitude / k as f64;
                Mode {
                    omega: k as f64 * PI / duration,
                    sin_coef: (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
                    cos_coef: vec![0.0; d],
                }
            })
            .collect();
        Self {
            offset: vec![0.0; d],
            modes,
            duration,
        }
    }

    pub fn constant(value: Vec<f64>, duration: f64) -> Self {
        Self {
            offset: value,
            modes: Vec::new(),
            duration,
        }
    }
}

impl Curve for FourierPath {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn duration(&self) -> f64 {
        self.duration
    }

    fn position(&self, t: f64) -> Vec<f64> {
        let mut out = self.offset.clone();
        for m in &self.modes {
            let (s, c) = (m.omega * t).sin_cos();
            axpy(&mut out, s, &m.sin_coef);
            axpy(&mut out, c, &m.cos_coef);
        }
        out
    }

    fn velocity(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.offset.len()];
        for m in &self.modes {
            let (s, c) = (m.omega * t).sin_cos();
            axpy(&mut out, m.omega * c, &m.sin_coef);
            axpy(&mut out, -m.omega * s, &m.cos_coef);
        }
        out
    }
}

/// `base + weight · direction`, used for directional (Gateaux) differences.
pub struct Shifted<'a> {
    pub base: &'a dyn Curve,
    pub direction: &'a dyn Curve,
    pub weight: f64,
}

impl Curve for Shifted<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn duration(&self) -> f64 {
        self.base.duration()
    }

    fn position(&self, t: f64) -> Vec<f64> {
        let mut p = self.base.position(t);
        axpy(&mut p, self.weight, &self.direction.position(t));
        p
    }

    fn velocity(&self, t: f64) -> Vec<f64> {
        let mut v = self.base.velocity(t);
        axpy(&mut v, self.weight, &self.direction.velocity(t));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_count_accepts_integral_ratios() {
        assert_eq!(step_count(1.0, 0.001).unwrap(), 1000);
        assert_eq!(step_count(1.0, 1.0 / 256.0).unwrap(), 256);
        assert!(matches!(step_count(1.0, 0.3), Err(Error::StepCountMismatch { .. })));
        assert!(step_count(1.0, 0.0).is_err());
    }

    #[test]
    fn fd_slopes_exact_on_quadratics() {
        // centered and one-sided second-order stencils are exact for degree ≤ 2
        let dt = 0.1;
        let values: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                let t = k as f64 * dt;
                vec![t * t, 3.0 * t - 1.0]
            })
            .collect();
        let s = fd_slopes(&values, dt);
        for (k, sk) in s.iter().enumerate() {
            let t = k as f64 * dt;
            assert!((sk[0] - 2.0 * t).abs() < 1e-12);
            assert!((sk[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hermite_reproduces_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FourierPath::random(&[0.0, 0.0, 1.0], 1.0, 3, 0.3, &mut rng);
        let p = PathSample::from_curve(&f, 0.05).unwrap();
        for k in 0..=p.steps() {
            let t = k as f64 * 0.05;
            assert_eq!(p.position(t), p.value(k).to_vec());
        }
    }

    #[test]
    fn sampled_path_converges_to_its_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FourierPath::random(&[1.0, 0.0], 1.0, 3, 0.3, &mut rng);
        let err = |dt: f64| {
            let p = PathSample::from_curve(&f, dt).unwrap();
            (0..97)
                .map(|i| {
                    let t = i as f64 / 96.0 * 0.999;
                    crate::linalg::dist(&p.velocity(t), &f.velocity(t))
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e2 < e1 / 3.0, "velocity error {e1} -> {e2}");
    }

    #[test]
    fn fourier_velocity_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FourierPath::random(&[0.0; 4], 2.0, 4, 1.0, &mut rng);
        let eps = 1e-6;
        for &t in &[0.1, 0.7, 1.9] {
            let fd: Vec<f64> = f
                .position(t + eps)
                .iter()
                .zip(f.position(t - eps))
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            assert!(crate::linalg::dist(&fd, &f.velocity(t)) < 1e-7);
        }
    }

    #[test]
    fn bump_vanishes_at_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = FourierPath::random_bump(3, 1.5, 3, 1.0, &mut rng);
        assert!(crate::linalg::norm(&b.position(0.0)) == 0.0);
        assert!(crate::linalg::norm(&b.position(1.5)) < 1e-14);
    }
}
