//! Extrinsic geometry of the unit sphere S^{d-1} embedded in R^d.
//!
//! Points are [`UnitVector`]s; tangent data is carried by [`TangentVector`]
//! (base point plus an ambient vector orthogonal to it).

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// Tolerance on `‖x‖ = 1` accepted by [`UnitVector::new`].
pub const UNIT_TOLERANCE: f64 = 1e-9;
/// Norms at or below this are refused by [`normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Below this tangent norm, [`exp_map`] switches to its Taylor branch.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Angular margin around π inside which [`log_map`] refuses to answer.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-6;

/// A point on S^{d-1}.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps `coords`, checking `d ≥ 2` and unit norm within [`UNIT_TOLERANCE`].
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidDimension(coords.len()));
        }
        let n = norm(&coords);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnit { norm: n });
        }
        Ok(Self(coords))
    }

    /// The i-th standard basis vector of R^d.
    pub fn basis(d: usize, i: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidDimension(d));
        }
        if i >= d {
            return Err(Error::Domain(format!("basis index {i} out of range for d={d}")));
        }
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn antipode(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A tangent vector `vec ∈ T_base S^{d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: UnitVector,
    pub vec: Vec<f64>,
}

impl TangentVector {
    /// Checks `⟨vec, base⟩ = 0` within `1e-9 · max(1, ‖vec‖)`.
    pub fn new(base: UnitVector, vec: Vec<f64>) -> Result<Self> {
        check_dim(base.dim(), vec.len())?;
        let radial = dot(&vec, base.as_slice());
        if radial.abs() > 1e-9 * norm(&vec).max(1.0) {
            return Err(Error::Domain(format!(
                "vector is not tangent at its base point (radial component {radial:e})"
            )));
        }
        Ok(Self { base, vec })
    }

    pub fn zero(base: UnitVector) -> Self {
        let d = base.dim();
        Self {
            base,
            vec: vec![0.0; d],
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        Err(Error::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

/// `y − ⟨y,p⟩p` without constructing a [`TangentVector`].
pub fn project_raw(p: &[f64], y: &[f64]) -> Vec<f64> {
    let c = dot(y, p);
    let mut out = y.to_vec();
    axpy(&mut out, -c, p);
    out
}

/// Orthogonal projection of an ambient vector onto `T_p S^{d-1}`.
pub fn project_tangent(p: &UnitVector, y: &[f64]) -> Result<TangentVector> {
    check_dim(p.dim(), y.len())?;
    Ok(TangentVector {
        vec: project_raw(p.as_slice(), y),
        base: p.clone(),
    })
}

/// Radial retraction `v / ‖v‖`. Vectors already unit to within a few ulps
/// come back unchanged, so fixed points of a flow stay bitwise fixed.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    if v.len() < 2 {
        return Err(Error::InvalidDimension(v.len()));
    }
    let n = norm(v);
    if !(n > NORMALIZE_EPS) {
        return Err(Error::NearZeroVector { norm: n });
    }
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(UnitVector(v.to_vec()));
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Geodesic distance `arccos⟨p,q⟩` with the inner product clamped to [−1, 1].
pub fn geodesic_distance(p: &UnitVector, q: &UnitVector) -> f64 {
    geodesic_distance_raw(p.as_slice(), q.as_slice())
}

pub(crate) fn geodesic_distance_raw(p: &[f64], q: &[f64]) -> f64 {
    dot(p, q).clamp(-1.0, 1.0).acos()
}

/// Riemannian exponential map `cos(‖h‖)p + sin(‖h‖)h/‖h‖`.
///
/// Uses the second-order Taylor expansion when `‖h‖ < 1e-8`.
pub fn exp_map(p: &UnitVector, h: &TangentVector) -> Result<UnitVector> {
    check_dim(p.dim(), h.vec.len())?;
    Ok(UnitVector(exp_map_raw(p.as_slice(), &h.vec)))
}

pub(crate) fn exp_map_raw(p: &[f64], h: &[f64]) -> Vec<f64> {
    let theta = norm(h);
    let (c, s_over) = if theta < SMALL_ANGLE {
        (1.0 - 0.5 * theta * theta, 1.0 - theta * theta / 6.0)
    } else {
        (theta.cos(), theta.sin() / theta)
    };
    let mut out: Vec<f64> = p.iter().map(|x| c * x).collect();
    axpy(&mut out, s_over, h);
    // keep the result on the sphere to rounding
    let n = norm(&out);
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Riemannian logarithm: the tangent vector at `p` pointing to `q` with length `d_g(p,q)`.
pub fn log_map(p: &UnitVector, q: &UnitVector) -> Result<TangentVector> {
    check_dim(p.dim(), q.dim())?;
    let dist = geodesic_distance(p, q);
    if dist > PI - ANTIPODAL_TOLERANCE {
        return Err(Error::AntipodalPoints { distance: dist });
    }
    let w = project_raw(p.as_slice(), q.as_slice());
    let wn = norm(&w);
    let vec = if wn == 0.0 {
        vec![0.0; p.dim()]
    } else {
        // atan2 is better conditioned than arccos near 0
        let theta = wn.atan2(dot(p.as_slice(), q.as_slice()));
        w.iter().map(|x| x * theta / wn).collect()
    };
    Ok(TangentVector { base: p.clone(), vec })
}

/// `ln |S^{k}|` for the unit k-sphere in R^{k+1}: `ln(2π^{(k+1)/2} / Γ((k+1)/2))`.
pub fn ln_sphere_area(k: usize) -> f64 {
    let a = (k as f64 + 1.0) / 2.0;
    (2.0f64).ln() + a * PI.ln() - ln_gamma(a)
}

/// Surface area of S^{d-1}.
pub fn sphere_area(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    Ok(ln_sphere_area(d - 1).exp())
}

/// Fraction of S^{d-1} covered by a geodesic ball of radius `r`.
///
/// `∫₀^r sin^{d-2}` normalized by its value at π equals half a regularized
/// incomplete beta function in `sin² r`.
pub fn geodesic_ball_fraction(d: usize, r: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    if !(0.0..=PI).contains(&r) {
        return Err(Error::Domain(format!("ball radius {r} outside [0, π]")));
    }
    let a = (d as f64 - 1.0) / 2.0;
    let half = |s: f64| {
        let x = s.sin().powi(2).min(1.0);
        0.5 * beta_reg(a, 0.5, x)
    };
    Ok(if r <= PI / 2.0 { half(r) } else { 1.0 - half(PI - r) })
}

/// Surface (Hausdorff) measure of a geodesic ball of radius `r` on S^{d-1}:
/// `|S^{d-2}| ∫₀^r sin^{d-2}(s) ds`.
pub fn geodesic_ball_area(d: usize, r: f64) -> Result<f64> {
    Ok(sphere_area(d)? * geodesic_ball_fraction(d, r)?)
}

/// A uniformly distributed point on S^{d-1}.
pub fn sample_uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<UnitVector> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&g) {
            return Ok(u);
        }
    }
}

/// A uniform unit tangent direction at `p`.
pub fn sample_tangent_direction<R: Rng + ?Sized>(p: &UnitVector, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..p.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let t = project_raw(p.as_slice(), &g);
        let n = norm(&t);
        if n > 1e-6 {
            return t.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform sample from the geodesic ball `{q : d_g(p,q) ≤ r}`.
///
/// The radius is drawn by inverting its CDF (density ∝ sin^{d-2}) with
/// bisection; the direction is uniform in the tangent space.
pub fn sample_geodesic_ball<R: Rng + ?Sized>(p: &UnitVector, r: f64, rng: &mut R) -> Result<UnitVector> {
    if !(r > 0.0 && r <= PI) {
        return Err(Error::Domain(format!("ball radius {r} outside (0, π]")));
    }
    let d = p.dim();
    let total = geodesic_ball_fraction(d, r)?;
    let u: f64 = rng.random::<f64>() * total;
    let (mut lo, mut hi) = (0.0f64, r);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if geodesic_ball_fraction(d, mid)? < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let dir = sample_tangent_direction(p, rng);
    let h: Vec<f64> = dir.iter().map(|x| x * s).collect();
    Ok(UnitVector(exp_map_raw(p.as_slice(), &h)))
}

/// Rejection-sampling variant of [`sample_geodesic_ball`]; intended for d ≤ 4.
pub fn sample_geodesic_ball_rejection<R: Rng + ?Sized>(p: &UnitVector, r: f64, rng: &mut R) -> Result<UnitVector> {
    if !(r > 0.0 && r <= PI) {
        return Err(Error::Domain(format!("ball radius {r} outside (0, π]")));
    }
    let cos_r = r.cos();
    loop {
        let q = sample_uniform(p.dim(), rng)?;
        if dot(q.as_slice(), p.as_slice()) >= cos_r {
            return Ok(q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn e(d: usize, i: usize) -> UnitVector {
        UnitVector::basis(d, i).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_examples() {
        let p = e(3, 0);
        assert!(close(
            &project_tangent(&p, &[1.0, 0.0, 0.0]).unwrap().vec,
            &[0.0; 3],
            0.0
        ));
        assert!(close(
            &project_tangent(&p, &[0.0, 1.0, 0.0]).unwrap().vec,
            &[0.0, 1.0, 0.0],
            0.0
        ));
        let t = project_tangent(&p, &[FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0]).unwrap();
        assert!(close(&t.vec, &[0.0, FRAC_1_SQRT_2, 0.0], 1e-16));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let err = project_tangent(&e(3, 0), &[1.0, 2.0]).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 3, found: 2 });
    }

    #[test]
    fn normalize_examples() {
        assert!(close(normalize(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8], 1e-16));
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap(), e(3, 0));
        assert!(matches!(normalize(&[1e-15, 0.0]), Err(Error::NearZeroVector { .. })));
    }

    #[test]
    fn unit_vector_rejects_bad_input() {
        assert!(matches!(UnitVector::new(vec![1.0]), Err(Error::InvalidDimension(1))));
        assert!(matches!(UnitVector::new(vec![1.0, 1.0]), Err(Error::NotUnit { .. })));
    }

    #[test]
    fn exp_map_examples() {
        let p = e(3, 0);
        let h = TangentVector::new(p.clone(), vec![0.0, PI / 2.0, 0.0]).unwrap();
        assert!(close(exp_map(&p, &h).unwrap().as_slice(), &[0.0, 1.0, 0.0], 1e-15));
        let zero = TangentVector::zero(p.clone());
        assert_eq!(exp_map(&p, &zero).unwrap(), p);
        let h = TangentVector::new(p.clone(), vec![0.0, PI, 0.0]).unwrap();
        assert!(close(exp_map(&p, &h).unwrap().as_slice(), &[-1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn exp_map_small_angle_branch_is_continuous() {
        let p = e(3, 2);
        let below = TangentVector::new(p.clone(), vec![0.99e-8, 0.0, 0.0]).unwrap();
        let above = TangentVector::new(p.clone(), vec![1.01e-8, 0.0, 0.0]).unwrap();
        let a = exp_map(&p, &below).unwrap();
        let b = exp_map(&p, &above).unwrap();
        assert!((a.as_slice()[0] - 0.99e-8).abs() < 1e-20);
        assert!((b.as_slice()[0] - 1.01e-8).abs() < 1e-20);
    }

    #[test]
    fn log_map_examples() {
        let p = e(3, 0);
        let l = log_map(&p, &e(3, 1)).unwrap();
        assert!(close(&l.vec, &[0.0, PI / 2.0, 0.0], 1e-15));
        assert!(close(&log_map(&p, &p).unwrap().vec, &[0.0; 3], 0.0));
        assert!(matches!(log_map(&p, &p.antipode()), Err(Error::AntipodalPoints { .. })));
    }

    #[test]
    fn distance_examples() {
        let p = e(3, 0);
        assert_eq!(geodesic_distance(&p, &p), 0.0);
        assert!((geodesic_distance(&p, &p.antipode()) - PI).abs() < 1e-15);
        assert!((geodesic_distance(&p, &e(3, 1)) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ball_area_examples() {
        assert!((geodesic_ball_area(3, PI).unwrap() - 4.0 * PI).abs() < 1e-12);
        assert!((geodesic_ball_area(3, PI / 2.0).unwrap() - 2.0 * PI).abs() < 1e-12);
        assert!((geodesic_ball_area(2, 1.3).unwrap() - 2.6).abs() < 1e-12);
        assert!(geodesic_ball_area(3, -0.1).is_err());
        assert!(geodesic_ball_area(3, 3.2).is_err());
    }

    #[test]
    fn ball_area_matches_cap_formula_in_three_dimensions() {
        for i in 0..=100 {
            let r = PI * i as f64 / 100.0;
            let want = 2.0 * PI * (1.0 - r.cos());
            assert!((geodesic_ball_area(3, r).unwrap() - want).abs() <= 1e-10, "r={r}");
        }
    }

    #[test]
    fn full_sphere_areas() {
        // |S^1| = 2π, |S^2| = 4π, |S^3| = 2π²
        assert!((sphere_area(2).unwrap() - 2.0 * PI).abs() < 1e-12);
        assert!((sphere_area(3).unwrap() - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(4).unwrap() - 2.0 * PI * PI).abs() < 1e-12);
        assert!(sphere_area(400).unwrap().is_finite());
    }

    #[test]
    fn uniform_samples_are_unit_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = sample_uniform(3, &mut rng).unwrap();
        let b = sample_uniform(3, &mut rng).unwrap();
        assert!((norm(a.as_slice()) - 1.0).abs() < 1e-15);
        assert!((norm(b.as_slice()) - 1.0).abs() < 1e-15);
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_mean_is_near_zero() {
        // CLT: each coordinate of the mean has sd 1/sqrt(3N); 3σ·√3 ≈ 0.0164 < 0.02
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let u = sample_uniform(3, &mut rng).unwrap();
            axpy(&mut mean, 1.0 / n as f64, u.as_slice());
        }
        assert!(norm(&mean) <= 0.02, "‖mean‖ = {}", norm(&mean));
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = e(3, 0);
        for _ in 0..2000 {
            let q = sample_geodesic_ball(&p, 0.1, &mut rng).unwrap();
            assert!(geodesic_distance(&p, &q) <= 0.1 + 1e-12);
        }
        let p = e(20, 4);
        for _ in 0..200 {
            let q = sample_geodesic_ball(&p, 0.5, &mut rng).unwrap();
            assert!(geodesic_distance(&p, &q) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn inversion_and_rejection_agree_on_mean_radius() {
        // E[d_g] for a cap of radius r on S²: ∫ s sin s / (1 - cos r) over [0, r]
        let r: f64 = 0.8;
        let exact = (r.sin() - r * r.cos()) / (1.0 - r.cos());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = e(3, 1);
        let n = 20_000;
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..n {
            a += geodesic_distance(&p, &sample_geodesic_ball(&p, r, &mut rng).unwrap());
            b += geodesic_distance(&p, &sample_geodesic_ball_rejection(&p, r, &mut rng).unwrap());
        }
        a /= n as f64;
        b /= n as f64;
        assert!((a - exact).abs() < 0.01, "inversion mean {a} vs {exact}");
        assert!((b - exact).abs() < 0.01, "rejection mean {b} vs {exact}");
    }
}
