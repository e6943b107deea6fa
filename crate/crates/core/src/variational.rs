//! Euler-Lagrange residuals, first variations, perturbed-path landscapes
//! and the geodesic residual pairing.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::io::Write;

use crate::dynamics::{flow_field_raw, TokenConfiguration, Trajectory};
use crate::error::{Error, Result};
use crate::functionals::{
    action, drift, midpoint_quadrature, transformer_action, ActionContext, LagrangianKind, FD_EPS,
};
use crate::linalg::{dist, dot, norm, norm_sq, pairwise_sum, sub};
use crate::path::{fd_slopes, Curve, PathSample, Shifted};
use crate::sphere::{normalize, project_raw, UnitVector};

/// Residual vectors on the interior grid points of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub times: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
    pub norm_profile: Vec<f64>,
    /// Set when some partial derivative came from finite differences.
    pub approximate: bool,
}

impl ResidualSeries {
    fn new(times: Vec<f64>, residuals: Vec<Vec<f64>>, approximate: bool) -> Self {
        let norm_profile = residuals.iter().map(|r| norm(r)).collect();
        Self {
            times,
            residuals,
            norm_profile,
            approximate,
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.norm_profile.iter().copied().fold(0.0, f64::max)
    }

    /// CSV `t,r0..r{d-1},norm`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.residuals.first().map_or(0, |r| r.len());
        let mut header = String::from("t");
        for c in 0..d {
            header.push_str(&format!(",r{c}"));
        }
        writeln!(w, "{header},norm")?;
        for ((t, r), n) in self.times.iter().zip(&self.residuals).zip(&self.norm_profile) {
            write!(w, "{}", crate::fmt_f64(*t))?;
            for c in r {
                write!(w, ",{}", crate::fmt_f64(*c))?;
            }
            writeln!(w, ",{}", crate::fmt_f64(*n))?;
        }
        Ok(())
    }
}

/// `∂L/∂x − d/dt ∂L/∂ẋ` along token `token` of `x`, at interior grid points.
///
/// Positions and velocities are the stored grid values; `d/dt` is a
/// centered difference of `∂L/∂ẋ`. Time-dependent data of `kind` (ensemble,
/// drift) is taken from `x` itself.
pub fn el_residual(kind: &LagrangianKind<'_>, x: &Trajectory, token: usize, beta: f64) -> Result<ResidualSeries> {
    if token >= x.n_tokens() {
        return Err(Error::InvalidParameter(format!("token {token} out of range")));
    }
    if let LagrangianKind::TokenSelection { target, .. } = kind {
        if target.dt() != x.dt() || target.steps() != x.steps() {
            return Err(Error::GridMismatch("trajectory and target use different grids".into()));
        }
    }
    let ctx = ActionContext::new(x, token, beta);
    let dt = x.dt();
    let steps = x.steps();
    let point = |k: usize| x.snapshot(k).point(token).as_slice();
    let vel = |k: usize| x.velocity_at(k, token);
    let momenta: Vec<(Vec<f64>, bool)> = (0..=steps)
        .map(|k| kind.grad_v(&ctx, k as f64 * dt, point(k), vel(k)))
        .collect();
    let mut approximate = momenta.iter().any(|m| m.1);
    let mut times = Vec::with_capacity(steps.saturating_sub(1));
    let mut residuals = Vec::with_capacity(steps.saturating_sub(1));
    for k in 1..steps {
        let t = k as f64 * dt;
        let (gx, fd) = kind.grad_x(&ctx, t, point(k), vel(k));
        approximate |= fd;
        let r: Vec<f64> = gx
            .iter()
            .zip(momenta[k + 1].0.iter().zip(&momenta[k - 1].0))
            .map(|(g, (pp, pm))| g - (pp - pm) / (2.0 * dt))
            .collect();
        times.push(t);
        residuals.push(r);
    }
    Ok(ResidualSeries::new(times, residuals, approximate))
}

/// [`el_residual`] projected onto the tangent space at each grid point.
pub fn projected_el_residual(
    kind: &LagrangianKind<'_>,
    x: &Trajectory,
    token: usize,
    beta: f64,
) -> Result<ResidualSeries> {
    let plain = el_residual(kind, x, token, beta)?;
    let residuals = plain
        .residuals
        .iter()
        .enumerate()
        .map(|(i, r)| project_raw(x.snapshot(i + 1).point(token).as_slice(), r))
        .collect();
    Ok(ResidualSeries::new(plain.times, residuals, plain.approximate))
}

/// Gateaux derivative of the action of `kind` at `h` in direction `delta`.
///
/// For the Transformer action this is the closed form
/// `∫⟨ḣ − D, δ̇⟩ dt + ⟨h(0) − x(0), δ(0)⟩`; other kinds use a central
/// difference of the action with step [`FD_EPS`].
pub fn first_variation(
    kind: &LagrangianKind<'_>,
    h: &dyn Curve,
    delta: &dyn Curve,
    ctx: &ActionContext<'_>,
    quad_dt: f64,
) -> Result<f64> {
    if delta.dim() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            found: delta.dim(),
        });
    }
    if (delta.duration() - h.duration()).abs() > 1e-9 * h.duration().max(1.0) {
        return Err(Error::GridMismatch(
            "variation and path span different intervals".into(),
        ));
    }
    match kind {
        LagrangianKind::TransformerAction => {
            // validates the grids
            action(kind, h, ctx, quad_dt)?;
            let reference = ctx.reference.expect("checked by action");
            let token = ctx.token;
            let integral = midpoint_quadrature(h.duration(), quad_dt, |t| {
                let g = sub(&h.velocity(t), &reference.token_velocity(token, t));
                dot(&g, &delta.velocity(t))
            })?;
            let x0 = reference.snapshot(0).point(token);
            Ok(integral + dot(&sub(&h.position(0.0), x0.as_slice()), &delta.position(0.0)))
        }
        _ => first_variation_fd(kind, h, delta, ctx, quad_dt),
    }
}

/// Central-difference Gateaux derivative, for any kind.
pub fn first_variation_fd(
    kind: &LagrangianKind<'_>,
    h: &dyn Curve,
    delta: &dyn Curve,
    ctx: &ActionContext<'_>,
    quad_dt: f64,
) -> Result<f64> {
    let plus = Shifted {
        base: h,
        direction: delta,
        weight: FD_EPS,
    };
    let minus = Shifted {
        base: h,
        direction: delta,
        weight: -FD_EPS,
    };
    Ok((action(kind, &plus, ctx, quad_dt)? - action(kind, &minus, ctx, quad_dt)?) / (2.0 * FD_EPS))
}

/// A noisy copy of one token's path, projected back onto the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPath {
    pub token: usize,
    pub path: PathSample,
    pub sigma: f64,
    pub seed: u64,
    pub l2_distance: f64,
    /// Filled in by [`energy_landscape`]; zero for a lone path.
    pub pca_deviation: f64,
}

/// `sqrt(Δt Σᵢ ‖h(tᵢ) − x(tᵢ)‖²)` over the grid of `base`.
pub fn l2_distance(h: &PathSample, base: &Trajectory, token: usize) -> Result<f64> {
    if h.steps() != base.steps() {
        return Err(Error::GridMismatch("path and trajectory use different grids".into()));
    }
    let sq: Vec<f64> = (0..=h.steps())
        .map(|k| norm_sq(&sub(h.value(k), base.snapshot(k).point(token).as_slice())))
        .collect();
    Ok((base.dt() * pairwise_sum(&sq)).sqrt())
}

/// Perturbs token `token` of `base`: i.i.d. standard normal vectors per
/// grid point, smoothed by a 3-point moving average (2-point at the ends),
/// scaled by `sigma`, added to the path and renormalized.
///
/// `sigma = 0` reproduces the base path exactly, including its velocities.
pub fn perturb_trajectory(base: &Trajectory, token: usize, sigma: f64, seed: u64) -> Result<PerturbedPath> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    if token >= base.n_tokens() {
        return Err(Error::InvalidParameter(format!("token {token} out of range")));
    }
    let n = base.steps() + 1;
    let d = base.dim();
    let values: Vec<Vec<f64>> = (0..n)
        .map(|k| base.snapshot(k).point(token).as_slice().to_vec())
        .collect();
    let path = if sigma == 0.0 {
        let slopes = (0..n).map(|k| base.velocity_at(k, token).to_vec()).collect();
        PathSample::with_slopes(base.dt(), values, slopes)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let smooth = |k: usize, c: usize| -> f64 {
            let lo = k.saturating_sub(1);
            let hi = (k + 1).min(n - 1);
            (lo..=hi).map(|j| raw[j][c]).sum::<f64>() / (hi - lo + 1) as f64
        };
        let noisy = values
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let y: Vec<f64> = x.iter().enumerate().map(|(c, v)| v + sigma * smooth(k, c)).collect();
                normalize(&y).map(UnitVector::into_inner)
            })
            .collect::<Result<Vec<_>>>()?;
        PathSample::new(base.dt(), noisy)?
    };
    let l2 = l2_distance(&path, base, token)?;
    Ok(PerturbedPath {
        token,
        path,
        sigma,
        seed,
        l2_distance: l2,
        pca_deviation: 0.0,
    })
}

/// One row of the energy landscape table.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeRow {
    pub trial: usize,
    pub sigma: f64,
    pub l2_distance: f64,
    pub pca_deviation: f64,
    pub action: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub rows: Vec<LandscapeRow>,
}

impl Landscape {
    /// Index of the row with the smallest action (lowest trial on ties).
    pub fn argmin_action(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.action < self.rows[best].action {
                best = i;
            }
        }
        best
    }

    pub fn spearman_distance_action(&self) -> f64 {
        let x: Vec<f64> = self.rows.iter().map(|r| r.l2_distance).collect();
        let y: Vec<f64> = self.rows.iter().map(|r| r.action).collect();
        spearman(&x, &y)
    }

    /// CSV `trial,sigma,l2_distance,pca_deviation,action`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial,sigma,l2_distance,pca_deviation,action")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.trial,
                crate::fmt_f64(r.sigma),
                crate::fmt_f64(r.l2_distance),
                crate::fmt_f64(r.pca_deviation),
                crate::fmt_f64(r.action)
            )?;
        }
        Ok(())
    }
}

/// Perturbs token `token` of `base` at each sigma (`trials_per_sigma`
/// trials each) and evaluates the Transformer action of every perturbed
/// path. Trial `i` (sigma-major order) uses seed `seed0 + i`.
pub fn energy_landscape(
    base: &Trajectory,
    token: usize,
    beta: f64,
    sigmas: &[f64],
    trials_per_sigma: usize,
    seed0: u64,
    quad_dt: f64,
) -> Result<Landscape> {
    let trials = sigmas.len() * trials_per_sigma;
    if trials < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 trials, got {trials}")));
    }
    let paths = (0..trials)
        .into_par_iter()
        .map(|i| {
            let sigma = sigmas[i / trials_per_sigma];
            let p = perturb_trajectory(base, token, sigma, seed0.wrapping_add(i as u64))?;
            let a = transformer_action(&p.path, base, token, beta, quad_dt)?;
            Ok((p, a))
        })
        .collect::<Result<Vec<_>>>()?;
    let deviations: Vec<Vec<f64>> = paths
        .iter()
        .map(|(p, _)| {
            (0..=base.steps())
                .flat_map(|k| sub(p.path.value(k), base.snapshot(k).point(token).as_slice()))
                .collect()
        })
        .collect();
    let scores = signed_pca_scores(&deviations);
    let rows = paths
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(trial, ((p, a), s))| LandscapeRow {
            trial,
            sigma: p.sigma,
            l2_distance: p.l2_distance,
            pca_deviation: s,
            action: a,
        })
        .collect();
    Ok(Landscape { rows })
}

/// Projections of the rows of `x` onto the first principal component of
/// the centered rows. The component's sign makes its largest-magnitude
/// loading positive.
pub fn signed_pca_scores(x: &[Vec<f64>]) -> Vec<f64> {
    let m = x.len();
    if m == 0 {
        return Vec::new();
    }
    let p = x[0].len();
    let mean: Vec<f64> = (0..p).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / m as f64).collect();
    let centered: Vec<Vec<f64>> = x.iter().map(|r| sub(r, &mean)).collect();
    let gram = DMatrix::from_fn(m, m, |i, j| dot(&centered[i], &centered[j]));
    let eig = SymmetricEigen::new(gram);
    let top = (0..m)
        .max_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]))
        .unwrap_or(0);
    if !(eig.eigenvalues[top] > 0.0) {
        return vec![0.0; m];
    }
    let u = eig.eigenvectors.column(top);
    let mut loading = vec![0.0; p];
    for (i, row) in centered.iter().enumerate() {
        for (l, v) in loading.iter_mut().zip(row) {
            *l += u[i] * v;
        }
    }
    let ln = norm(&loading);
    loading.iter_mut().for_each(|l| *l /= ln);
    let lead = loading
        .iter()
        .copied()
        .fold(0.0f64, |acc, l| if l.abs() > acc.abs() { l } else { acc });
    if lead < 0.0 {
        loading.iter_mut().for_each(|l| *l = -*l);
    }
    x.iter().map(|r| dot(r, &loading)).collect()
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation, ties receiving average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

fn second_differences(values: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = values.len();
    assert!(n >= 4, "second differences need at least 4 samples");
    let d = values[0].len();
    let dt2 = dt * dt;
    (0..n)
        .map(|k| {
            (0..d)
                .map(|c| {
                    let v = |j: usize| values[j][c];
                    if k == 0 {
                        (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) / dt2
                    } else if k == n - 1 {
                        (2.0 * v(n - 1) - 5.0 * v(n - 2) + 4.0 * v(n - 3) - v(n - 4)) / dt2
                    } else {
                        (v(k + 1) - 2.0 * v(k) + v(k - 1)) / dt2
                    }
                })
                .collect()
        })
        .collect()
}

/// `∫₀ᵀ ⟨z̃ − x*, P_{x*}(z̃̈ + ‖ż̃‖² z̃)⟩ dt` for token `token`, with `z̃` the
/// samplewise normalization of `z`.
///
/// Derivatives are finite differences on the grid; the integral is the
/// trapezoid rule on every `quad_dt / dt`-th grid point.
pub fn geodesic_residual_pairing(z: &Trajectory, xstar: &Trajectory, token: usize, quad_dt: f64) -> Result<f64> {
    if z.steps() != xstar.steps() || (z.dt() - xstar.dt()).abs() > 1e-15 * z.dt() {
        return Err(Error::GridMismatch("z and x* use different grids".into()));
    }
    if z.dim() != xstar.dim() {
        return Err(Error::DimensionMismatch {
            expected: xstar.dim(),
            found: z.dim(),
        });
    }
    if z.steps() < 3 {
        return Err(Error::GridMismatch("need at least 4 grid points".into()));
    }
    let dt = z.dt();
    let stride = crate::path::step_count(quad_dt, dt)?;
    if z.steps() % stride != 0 {
        return Err(Error::GridMismatch(format!(
            "quad_dt {quad_dt} does not divide the horizon"
        )));
    }
    let zt = (0..=z.steps())
        .map(|k| normalize(z.snapshot(k).point(token).as_slice()).map(UnitVector::into_inner))
        .collect::<Result<Vec<_>>>()?;
    let vel = fd_slopes(&zt, dt);
    let acc = second_differences(&zt, dt);
    let integrand: Vec<f64> = (0..=z.steps())
        .step_by(stride)
        .map(|k| {
            let xs = xstar.snapshot(k).point(token).as_slice();
            let speed = norm_sq(&vel[k]);
            let op: Vec<f64> = acc[k].iter().zip(&zt[k]).map(|(a, p)| a + speed * p).collect();
            dot(&sub(&zt[k], xs), &project_raw(xs, &op))
        })
        .collect();
    let last = integrand.len() - 1;
    let inner = pairwise_sum(&integrand[1..last]);
    Ok(quad_dt * (inner + 0.5 * (integrand[0] + integrand[last])))
}

/// Largest gradient-flow identity defect `‖𝒳[μ](x) − (1/β)P_x^⊥(∇Φ(x))‖`
/// and largest tangency defect `|⟨𝒳[μ](x), x⟩|` over the queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub max_identity: f64,
    pub max_tangency: f64,
}

pub fn gradient_flow_identity_check(queries: &[(UnitVector, TokenConfiguration)], beta: f64) -> IdentityCheck {
    let (max_identity, max_tangency) = queries
        .par_iter()
        .map(|(x, mu)| {
            let f = flow_field_raw(x.as_slice(), mu, beta);
            let g = drift(x.as_slice(), mu, beta);
            (dist(&f, &g), dot(&f, x.as_slice()).abs())
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    IdentityCheck {
        max_identity,
        max_tangency,
    }
}
