//! Discrete measures on the sphere: energies, pushforwards, Dirac
//! optimality, the mean-ball certificate and the Monte Carlo measure of
//! ε-optimal starting sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use std::io::Write;

use crate::dynamics::{integrate, pushforward_points, Advection, AttentionParams, Scheme, TokenConfiguration};
use crate::error::{Error, Result};
use crate::functionals::{action, ActionContext, LagrangianKind};
use crate::linalg::{axpy, dist, norm};
use crate::sphere::{
    check_dim, exp_map_raw, geodesic_ball_area, geodesic_distance, normalize, project_raw, sample_uniform, sphere_area,
    UnitVector,
};

/// Atoms closer than this are merged when a measure is built.
pub const ATOM_MERGE: f64 = 1e-12;
/// Atoms closer than this are merged after a pushforward.
pub const PUSHFORWARD_MERGE: f64 = 1e-9;

/// `Σ wⱼ δ_{pⱼ}` with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<UnitVector>,
    weights: Vec<f64>,
}

fn merge_atoms(atoms: Vec<UnitVector>, weights: Vec<f64>, tol: f64) -> (Vec<UnitVector>, Vec<f64>) {
    let mut out_a: Vec<UnitVector> = Vec::with_capacity(atoms.len());
    let mut out_w: Vec<f64> = Vec::with_capacity(atoms.len());
    for (a, w) in atoms.into_iter().zip(weights) {
        match out_a.iter().position(|b| dist(a.as_slice(), b.as_slice()) < tol) {
            Some(i) => out_w[i] += w,
            None => {
                out_a.push(a);
                out_w.push(w);
            }
        }
    }
    (out_a, out_w)
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<UnitVector>, weights: Vec<f64>) -> Result<Self> {
        // validates dimensions and weights
        TokenConfiguration::new(atoms.clone(), weights.clone())?;
        let (atoms, weights) = merge_atoms(atoms, weights, ATOM_MERGE);
        Ok(Self { atoms, weights })
    }

    pub fn dirac(p: UnitVector) -> Self {
        Self {
            atoms: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn uniform(atoms: Vec<UnitVector>) -> Result<Self> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub fn atoms(&self) -> &[UnitVector] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn as_configuration(&self) -> TokenConfiguration {
        TokenConfiguration::new(self.atoms.clone(), self.weights.clone())
            .expect("a valid measure is a valid configuration")
    }
}

/// `∫ L dμ = Σⱼ wⱼ L(pⱼ)`, summed in atom order.
pub fn measure_energy(cost: &dyn Fn(&UnitVector) -> f64, mu: &DiscreteMeasure) -> f64 {
    mu.atoms.iter().zip(&mu.weights).map(|(p, w)| w * cost(p)).sum()
}

/// Advects every atom through the time-1 map of the co-evolving ensemble
/// `μ₀` itself. Weights are carried over; atoms that end within
/// [`PUSHFORWARD_MERGE`] of each other are merged.
pub fn pushforward_measure(
    mu0: &DiscreteMeasure,
    params: &AttentionParams,
    dt: f64,
    scheme: Scheme,
) -> Result<DiscreteMeasure> {
    let cfg = mu0.as_configuration();
    let images = pushforward_points(mu0.atoms(), &cfg, params, dt, scheme, Advection::CoEvolving)?;
    let (atoms, weights) = merge_atoms(images, mu0.weights.clone(), PUSHFORWARD_MERGE);
    Ok(DiscreteMeasure { atoms, weights })
}

/// Outcome of comparing random mixtures with Dirac measures on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracReport {
    pub dirac_argmin: usize,
    pub dirac_min: f64,
    pub mixture_min: f64,
    /// `mixture_min ≥ dirac_min`, compared exactly.
    pub holds: bool,
    /// All grid values coincide: every measure has the same energy.
    pub degenerate_tie: bool,
    pub mixtures: usize,
}

/// Samples `n_mixtures` Dirichlet(1, …, 1) weightings of the grid and
/// compares their energies with the best Dirac.
///
/// Mixture energies are formed as `L_min + Σ wⱼ (L(pⱼ) − L_min)`, which is
/// algebraically `Σ wⱼ L(pⱼ)` but cannot round below `L_min`.
pub fn brute_force_dirac_optimality(
    grid: &[UnitVector],
    cost: &(dyn Fn(&UnitVector) -> f64 + Sync),
    n_mixtures: usize,
    seed: u64,
) -> Result<DiracReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("the grid is empty".into()));
    }
    let values: Vec<f64> = grid.iter().map(cost).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cost is not finite on the grid".into()));
    }
    let mut argmin = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[argmin] {
            argmin = i;
        }
    }
    let lmin = values[argmin];
    let degenerate_tie = values.iter().all(|v| *v == lmin);
    let excess: Vec<f64> = values.iter().map(|v| v - lmin).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixture_min = f64::INFINITY;
    for _ in 0..n_mixtures {
        let raw: Vec<f64> = (0..grid.len()).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = raw.iter().sum();
        let e: f64 = raw.iter().zip(&excess).map(|(r, x)| (r / s) * x).sum();
        mixture_min = mixture_min.min(lmin + e);
    }
    Ok(DiracReport {
        dirac_argmin: argmin,
        dirac_min: lmin,
        mixture_min,
        holds: mixture_min >= lmin,
        degenerate_tie,
        mixtures: n_mixtures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem7Report {
    pub mean_condition: bool,
    pub per_particle_condition: bool,
    pub energy: f64,
    pub bound: f64,
    pub inequality_holds: bool,
}

/// Checks the ball conditions of particles around `xstar` with radius
/// `epsilon / lipschitz` and whether `(1/n)Σ L(xᵢ) ≤ L(xstar) + ε`.
pub fn theorem7_certificate(
    particles: &[UnitVector],
    xstar: &UnitVector,
    lipschitz: f64,
    epsilon: f64,
    cost: &dyn Fn(&UnitVector) -> f64,
) -> Result<Theorem7Report> {
    if particles.is_empty() {
        return Err(Error::InvalidParameter("no particles".into()));
    }
    if !(lipschitz > 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("lipschitz and epsilon must be positive".into()));
    }
    let d = xstar.dim();
    let mut mean = vec![0.0; d];
    for p in particles {
        check_dim(d, p.dim())?;
        axpy(&mut mean, 1.0 / particles.len() as f64, p.as_slice());
    }
    let m = norm(&mean);
    if m <= 1e-12 {
        return Err(Error::ZeroMeanParticles { norm: m });
    }
    let xbar = normalize(&mean)?;
    let radius = epsilon / lipschitz;
    let mean_condition = geodesic_distance(&xbar, xstar) <= radius;
    let per_particle_condition = particles.iter().all(|p| geodesic_distance(p, xstar) <= radius);
    let energy = particles.iter().map(cost).sum::<f64>() / particles.len() as f64;
    let bound = cost(xstar) + epsilon;
    Ok(Theorem7Report {
        mean_condition,
        per_particle_condition,
        energy,
        bound,
        inequality_holds: energy <= bound,
    })
}

/// A particle cloud whose mean lies in the ball but whose particles need not.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanConditionProbe {
    pub particles: Vec<UnitVector>,
    pub report: Theorem7Report,
}

/// Random search for clouds that satisfy the mean condition while their
/// particles spread far from `xstar`. Clouds are symmetric pairs
/// `exp(±r·u)` around `xstar`, so their mean direction is `xstar`.
pub fn probe_mean_condition(
    xstar: &UnitVector,
    lipschitz: f64,
    epsilon: f64,
    cost: &dyn Fn(&UnitVector) -> f64,
    n_clouds: usize,
    pairs_per_cloud: usize,
    seed: u64,
) -> Result<Vec<MeanConditionProbe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_min = (epsilon / lipschitz).min(1.5);
    let mut probes = Vec::with_capacity(n_clouds);
    for _ in 0..n_clouds {
        let r = rng.random_range(r_min..1.5);
        let mut particles = Vec::with_capacity(2 * pairs_per_cloud);
        for _ in 0..pairs_per_cloud {
            let u = crate::sphere::sample_tangent_direction(xstar, &mut rng);
            for s in [r, -r] {
                let h: Vec<f64> = u.iter().map(|c| s * c).collect();
                particles.push(normalize(&exp_map_raw(xstar.as_slice(), &h))?);
            }
        }
        let report = theorem7_certificate(&particles, xstar, lipschitz, epsilon, cost)?;
        probes.push(MeanConditionProbe { particles, report });
    }
    Ok(probes)
}

/// `probes.csv`: one row per particle, with the probe's flags repeated.
pub fn write_probes_csv<W: Write>(probes: &[MeanConditionProbe], mut w: W) -> std::io::Result<()> {
    let d = probes.first().and_then(|p| p.particles.first()).map_or(0, |p| p.dim());
    let mut header = String::from("probe,particle,mean_condition,per_particle_condition,inequality_holds,energy,bound");
    for c in 0..d {
        header.push_str(&format!(",c{c}"));
    }
    writeln!(w, "{header}")?;
    for (i, p) in probes.iter().enumerate() {
        for (j, x) in p.particles.iter().enumerate() {
            write!(
                w,
                "{i},{j},{},{},{},{},{}",
                p.report.mean_condition,
                p.report.per_particle_condition,
                p.report.inequality_holds,
                crate::fmt_f64(p.report.energy),
                crate::fmt_f64(p.report.bound)
            )?;
            for c in x.as_slice() {
                write!(w, ",{}", crate::fmt_f64(*c))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Lower estimate of the Lipschitz constant of `cost` with respect to
/// geodesic distance: the largest difference quotient over `n_pairs`
/// seeded uniform pairs at distance at least 1e-3. Pairs come from one
/// sequential stream, so more pairs never lower the estimate.
pub fn lipschitz_estimate(cost: &dyn Fn(&UnitVector) -> f64, d: usize, n_pairs: usize, seed: u64) -> Result<f64> {
    if n_pairs < 100 {
        return Err(Error::InvalidParameter(format!(
            "need at least 100 pairs, got {n_pairs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let (p, q, g) = loop {
            let p = sample_uniform(d, &mut rng)?;
            let q = sample_uniform(d, &mut rng)?;
            let g = geodesic_distance(&p, &q);
            if g >= 1e-3 {
                break (p, q, g);
            }
        };
        best = best.max((cost(&p) - cost(&q)).abs() / g);
    }
    Ok(best)
}

/// `min{R, √(6ε / (3(μ+α)(sin R/R)^{d−1}(d−1)/(d+1) − M))}`.
pub fn theorem4_radius(epsilon: f64, mu_sc: f64, alpha: f64, d: usize, r_cap: f64, m_third: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    if !(epsilon > 0.0) || !(r_cap > 0.0) || r_cap > std::f64::consts::PI {
        return Err(Error::InvalidParameter(format!(
            "need epsilon > 0 and 0 < R ≤ π, got epsilon {epsilon}, R {r_cap}"
        )));
    }
    let k = (d - 1) as f64;
    let denominator = 3.0 * (mu_sc + alpha) * (r_cap.sin() / r_cap).powf(k) * k / (d as f64 + 1.0) - m_third;
    if !(denominator > 0.0) {
        return Err(Error::IllPosedBound { denominator });
    }
    Ok(r_cap.min((6.0 * epsilon / denominator).sqrt()))
}

/// Third-derivative bound used in the radius formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThirdDerivative {
    Given(f64),
    /// Largest finite-difference third directional derivative of `L(x, v)`
    /// over a seeded sweep of points and directions.
    Estimate,
}

/// Settings of the ε-optimal start set experiment.
#[derive(Debug, Clone)]
pub struct BallBoundSetup {
    pub anchor: UnitVector,
    pub mu_sc: f64,
    pub alpha: f64,
    pub r_cap: f64,
    pub m_third: ThirdDerivative,
    pub beta: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Tokens that share the flow with the probe; empty leaves the probe
    /// alone (and therefore stationary).
    pub context: Vec<UnitVector>,
    pub n_samples: usize,
    pub workers: usize,
    pub seed: u64,
}

impl BallBoundSetup {
    pub fn new(anchor: UnitVector, epsilon: f64) -> Self {
        Self {
            anchor,
            mu_sc: 1.0,
            alpha: 0.0,
            r_cap: 1.0,
            m_third: ThirdDerivative::Given(0.0),
            beta: 1.0,
            epsilon,
            horizon: 1.0,
            dt: 0.01,
            context: Vec::new(),
            n_samples: 10_000,
            workers: 4,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor.dim()
    }

    /// Action of the harness Lagrangian along the flow started at `p`.
    pub fn start_action(&self, p: &UnitVector) -> Result<f64> {
        let mut points = self.context.clone();
        points.push(p.clone());
        let cfg = TokenConfiguration::uniform(points)?;
        let params = AttentionParams::new(self.beta)?;
        let tr = integrate(&cfg, &params, self.horizon, self.dt, Scheme::Midpoint)?;
        let token = tr.n_tokens() - 1;
        let kind = LagrangianKind::StronglyConvexTest {
            anchor: &self.anchor,
            mu_sc: self.mu_sc,
        };
        action(&kind, &tr.token_path(token), &ActionContext::free(self.beta), self.dt)
    }
}

/// Monte Carlo area of the ε-optimal start set against the ball bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BallBoundReport {
    pub epsilon: f64,
    pub mu_sc: f64,
    pub alpha: f64,
    pub d: usize,
    pub r_cap: f64,
    pub m_third: f64,
    pub radius: f64,
    pub bound_area: f64,
    pub mc_area: f64,
    pub mc_stderr: f64,
    pub samples: usize,
    pub infimum: f64,
    pub horizon: f64,
}

impl BallBoundReport {
    /// `mc_area ≥ bound_area − 3·mc_stderr`.
    pub fn bound_holds(&self) -> bool {
        self.mc_area >= self.bound_area - 3.0 * self.mc_stderr
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let f = crate::fmt_f64;
        vec![
            ("epsilon", f(self.epsilon)),
            ("mu_sc", f(self.mu_sc)),
            ("alpha", f(self.alpha)),
            ("d", self.d.to_string()),
            ("R_cap", f(self.r_cap)),
            ("M_third", f(self.m_third)),
            ("radius", f(self.radius)),
            ("bound_area", f(self.bound_area)),
            ("mc_area", f(self.mc_area)),
            ("mc_stderr", f(self.mc_stderr)),
            ("samples", self.samples.to_string()),
            ("infimum", f(self.infimum)),
            ("T", f(self.horizon)),
        ]
    }

    pub fn to_key_value(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header() -> String {
        "epsilon,mu_sc,alpha,d,R_cap,M_third,radius,bound_area,mc_area,mc_stderr,samples,infimum,T".into()
    }

    pub fn to_csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}

const INF_STARTS: usize = 64;
const INF_TOL: f64 = 1e-10;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

fn tangent_basis(p: &[f64]) -> Vec<Vec<f64>> {
    let d = p.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        let mut v = project_raw(p, &e);
        for b in &basis {
            let c = crate::linalg::dot(&v, b);
            axpy(&mut v, -c, b);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|c| c / n).collect());
        }
        if basis.len() == d - 1 {
            break;
        }
    }
    basis
}

/// Golden-section minimization of `f` on `[a, b]` to width `tol`.
fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Cyclic line searches along geodesics through a tangent basis, starting
/// from `p` with value `fp`.
fn refine(setup: &BallBoundSetup, p: &UnitVector, fp: f64) -> Result<(UnitVector, f64)> {
    let eval = |q: &[f64]| -> f64 {
        normalize(q)
            .and_then(|u| setup.start_action(&u))
            .unwrap_or(f64::INFINITY)
    };
    let mut x = p.as_slice().to_vec();
    let mut fx = fp;
    let mut width = 0.5;
    for _ in 0..60 {
        let before = fx;
        for dir in tangent_basis(&x) {
            let line = |s: f64| eval(&exp_map_raw(&x, &dir.iter().map(|c| s * c).collect::<Vec<_>>()));
            let (s, fs) = golden_section(&line, -width, width, INF_TOL);
            if fs < fx {
                x = normalize(&exp_map_raw(&x, &dir.iter().map(|c| s * c).collect::<Vec<_>>()))?.into_inner();
                fx = fs;
            }
        }
        if before - fx <= INF_TOL {
            break;
        }
        width = (width * 0.5).max(1e-3);
    }
    Ok((normalize(&x)?, fx))
}

fn worker_counts(total: usize, workers: usize) -> Vec<usize> {
    (0..workers)
        .map(|w| total / workers + usize::from(w < total % workers))
        .collect()
}

/// Samples uniform starts with one ChaCha stream per worker.
fn sample_starts(setup: &BallBoundSetup) -> Result<Vec<(UnitVector, f64)>> {
    let workers = setup.workers.max(1);
    let chunks = worker_counts(setup.n_samples, workers)
        .into_par_iter()
        .enumerate()
        .map(|(w, count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
            rng.set_stream(w as u64);
            (0..count)
                .map(|_| {
                    let p = sample_uniform(setup.dim(), &mut rng)?;
                    let a = setup.start_action(&p)?;
                    Ok((p, a))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn third_derivative_sweep(setup: &BallBoundSetup) -> Result<f64> {
    let kind = LagrangianKind::StronglyConvexTest {
        anchor: &setup.anchor,
        mu_sc: setup.mu_sc,
    };
    let ctx = ActionContext::free(setup.beta);
    let d = setup.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x74_6869_7264);
    let h = 1e-2;
    let mut best = 0.0f64;
    for _ in 0..256 {
        let x = sample_uniform(d, &mut rng)?.into_inner();
        let v: Vec<f64> = sample_uniform(d, &mut rng)?.into_inner();
        let dx = sample_uniform(d, &mut rng)?.into_inner();
        let dv = sample_uniform(d, &mut rng)?.into_inner();
        let f = |s: f64| {
            let xs: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
            let vs: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a + s * b).collect();
            kind.value(&ctx, 0.0, &xs, &vs)
        };
        let third = (f(2.0 * h) - 2.0 * f(h) + 2.0 * f(-h) - f(-2.0 * h)) / (2.0 * h * h * h);
        best = best.max(third.abs());
    }
    Ok(best)
}

/// Measures the set of starts whose harness action is within ε of the
/// infimum and compares its area with the geodesic-ball lower bound.
///
/// The infimum is the best of 64 line-search refinements started from the
/// best Monte Carlo samples. Results are reproducible for a fixed
/// `(seed, workers)` pair.
pub fn epsilon_optimal_set_measure(setup: &BallBoundSetup) -> Result<BallBoundReport> {
    if setup.n_samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    if !(setup.epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    for c in &setup.context {
        check_dim(setup.dim(), c.dim())?;
    }
    let d = setup.dim();
    let m_third = match setup.m_third {
        ThirdDerivative::Given(m) => m,
        ThirdDerivative::Estimate => third_derivative_sweep(setup)?,
    };
    let radius = theorem4_radius(setup.epsilon, setup.mu_sc, setup.alpha, d, setup.r_cap, m_third)?;
    let samples = sample_starts(setup)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|a, b| samples[*a].1.total_cmp(&samples[*b].1).then(a.cmp(b)));
    let refined = order
        .iter()
        .take(INF_STARTS)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| refine(setup, &samples[*i].0, samples[*i].1).map(|r| r.1))
        .collect::<Result<Vec<f64>>>()?;
    let infimum = refined.into_iter().fold(samples[order[0]].1, f64::min);
    let hits = samples.iter().filter(|(_, a)| *a <= infimum + setup.epsilon).count();
    let n = samples.len() as f64;
    let frac = hits as f64 / n;
    let full = sphere_area(d)?;
    Ok(BallBoundReport {
        epsilon: setup.epsilon,
        mu_sc: setup.mu_sc,
        alpha: setup.alpha,
        d,
        r_cap: setup.r_cap,
        m_third,
        radius,
        bound_area: geodesic_ball_area(d, radius)?,
        mc_area: frac * full,
        mc_stderr: full * (frac * (1.0 - frac) / n).sqrt(),
        samples: samples.len(),
        infimum,
        horizon: setup.horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use crate::sphere::sample_geodesic_ball;
    use rand::Rng;

    fn e(d: usize, i: usize) -> UnitVector {
        UnitVector::basis(d, i).unwrap()
    }

    #[test]
    fn measure_energy_examples() {
        let p = normalize(&[0.3, 0.4, 0.5]).unwrap();
        let cost = |x: &UnitVector| x.as_slice()[0] * 2.0 + 1.0;
        assert_eq!(measure_energy(&cost, &DiscreteMeasure::dirac(p.clone())), cost(&p));

        let (a, b) = (e(3, 0), e(3, 1));
        let two = |x: &UnitVector| if x == &e(3, 0) { 0.2 } else { 0.5 };
        let mu = DiscreteMeasure::uniform(vec![a, b]).unwrap();
        assert!((measure_energy(&two, &mu) - 0.35).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let atoms: Vec<UnitVector> = (0..20).map(|_| sample_uniform(4, &mut rng).unwrap()).collect();
        let raw: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let mu = DiscreteMeasure::new(atoms.clone(), w.clone()).unwrap();
        let c = |x: &UnitVector| x.as_slice()[1].sin();
        let mut naive = 0.0;
        for (x, wi) in atoms.iter().zip(&w) {
            naive += wi * c(x);
        }
        assert_eq!(measure_energy(&c, &mu), naive);
    }

    #[test]
    fn energy_is_linear_in_the_measure() {
        let (a, b, c) = (e(3, 0), e(3, 1), e(3, 2));
        let cost = |x: &UnitVector| [0.25, 0.5, 1.0][x.as_slice().iter().position(|v| *v == 1.0).unwrap()];
        let mu = DiscreteMeasure::new(vec![a.clone(), b.clone()], vec![0.5, 0.5]).unwrap();
        let nu = DiscreteMeasure::new(vec![b.clone(), c.clone()], vec![0.25, 0.75]).unwrap();
        let mix = DiscreteMeasure::new(vec![a, b, c], vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(
            measure_energy(&cost, &mix),
            0.5 * measure_energy(&cost, &mu) + 0.5 * measure_energy(&cost, &nu)
        );
    }

    #[test]
    fn construction_merges_duplicates_and_checks_weights() {
        let p = e(3, 0);
        let mu = DiscreteMeasure::new(vec![p.clone(), p.clone(), e(3, 1)], vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.weights(), &[0.5, 0.5]);
        assert!(DiscreteMeasure::new(vec![p.clone()], vec![0.9]).is_err());
        assert!(DiscreteMeasure::new(vec![p.clone(), e(3, 1)], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let params = AttentionParams::new(1.0).unwrap();
        let p = normalize(&[0.1, 0.7, -0.2]).unwrap();
        let img = pushforward_measure(&DiscreteMeasure::dirac(p.clone()), &params, 0.01, Scheme::Midpoint).unwrap();
        assert_eq!(img.len(), 1);
        assert!(dist(img.atoms()[0].as_slice(), p.as_slice()) <= 1e-15);

        let (a, b) = (
            normalize(&[1.0, 0.2, 0.0]).unwrap(),
            normalize(&[0.1, 1.0, 0.3]).unwrap(),
        );
        let mu = DiscreteMeasure::new(vec![a.clone(), b.clone()], vec![0.3, 0.7]).unwrap();
        let img = pushforward_measure(&mu, &params, 0.01, Scheme::Midpoint).unwrap();
        let fine = pushforward_measure(&mu, &params, 0.001, Scheme::Midpoint).unwrap();
        let before = geodesic_distance(&a, &b);
        let after = geodesic_distance(&img.atoms()[0], &img.atoms()[1]);
        assert!(after < before);
        assert!((after - geodesic_distance(&fine.atoms()[0], &fine.atoms()[1])).abs() < 1e-5);
        assert_eq!(img.weights(), &[0.3, 0.7]);
        assert!((img.total_mass() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dirac_examples() {
        let grid = vec![e(3, 0), e(3, 1)];
        let cost = |x: &UnitVector| if x.as_slice()[0] == 1.0 { 0.2 } else { 0.5 };
        let r = brute_force_dirac_optimality(&grid, &cost, 200, 3).unwrap();
        assert_eq!(r.dirac_min, 0.2);
        assert_eq!(r.dirac_argmin, 0);
        assert!(r.holds && r.mixture_min >= 0.2);
        assert!(!r.degenerate_tie);

        let r = brute_force_dirac_optimality(&grid, &|_| 1.25, 50, 3).unwrap();
        assert!(r.degenerate_tie);
        assert_eq!(r.dirac_argmin, 0);
        assert_eq!(r.mixture_min, 1.25);
        assert!(brute_force_dirac_optimality(&[], &|_| 0.0, 5, 0).is_err());
    }

    #[test]
    fn dirac_optimality_on_a_random_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid: Vec<UnitVector> = (0..100).map(|_| sample_uniform(3, &mut rng).unwrap()).collect();
        let a = sample_uniform(3, &mut rng).unwrap();
        let cost = move |x: &UnitVector| (3.0 * dot(x.as_slice(), a.as_slice())).sin();
        let r = brute_force_dirac_optimality(&grid, &cost, 1000, 5).unwrap();
        assert!(r.holds);
        let best = grid.iter().map(|g| cost(g)).fold(f64::INFINITY, f64::min);
        assert_eq!(r.dirac_min, best);
    }

    #[test]
    fn certificate_examples() {
        let xs = normalize(&[0.2, 0.3, 0.9]).unwrap();
        let a = normalize(&[1.0, -1.0, 0.5]).unwrap();
        let cost = |x: &UnitVector| dot(x.as_slice(), a.as_slice());
        let same = vec![xs.clone(); 5];
        let r = theorem7_certificate(&same, &xs, 1.0, 0.1, &cost).unwrap();
        assert_eq!(r.energy, cost(&xs));
        assert!(r.mean_condition && r.per_particle_condition && r.inequality_holds);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let eps = rng.random_range(0.01..0.3);
            let cloud: Vec<UnitVector> = (0..10)
                .map(|_| sample_geodesic_ball(&xs, eps, &mut rng).unwrap())
                .collect();
            let r = theorem7_certificate(&cloud, &xs, 1.0, eps, &cost).unwrap();
            assert!(r.per_particle_condition);
            assert!(r.inequality_holds);
        }

        let pair = vec![e(3, 0), e(3, 0).antipode()];
        assert!(matches!(
            theorem7_certificate(&pair, &xs, 1.0, 0.1, &cost),
            Err(Error::ZeroMeanParticles { .. })
        ));
    }

    #[test]
    fn mean_condition_probe_finds_counterexamples() {
        // L has a strict minimum at xstar, so spread clouds cost more.
        let xs = e(3, 2);
        let cost = |x: &UnitVector| -dot(x.as_slice(), xs.as_slice());
        let probes = probe_mean_condition(&xs, 1.0, 0.05, &cost, 20, 3, 7).unwrap();
        assert!(probes.iter().all(|p| p.report.mean_condition));
        assert!(probes.iter().any(|p| !p.report.inequality_holds));
        let mut buf = Vec::new();
        write_probes_csv(&probes, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 20 * 6);
        assert!(text.starts_with(
            "probe,particle,mean_condition,per_particle_condition,inequality_holds,energy,bound,c0,c1,c2\n"
        ));
    }

    #[test]
    fn lipschitz_examples() {
        let a = normalize(&[0.3, -0.5, 0.2, 0.7]).unwrap();
        let lin = |x: &UnitVector| dot(x.as_slice(), a.as_slice());
        let est = lipschitz_estimate(&lin, 4, 10_000, 8).unwrap();
        assert!((0.9..=1.0).contains(&est), "{est}");
        assert_eq!(lipschitz_estimate(&|_| 3.0, 4, 500, 8).unwrap(), 0.0);
        let mut prev = 0.0;
        for n in [100, 200, 400, 800, 1600] {
            let v = lipschitz_estimate(&lin, 4, n, 9).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(lipschitz_estimate(&lin, 4, 99, 9).is_err());
    }

    #[test]
    fn radius_examples() {
        let r = theorem4_radius(0.01, 1.0, 0.0, 3, 1.0, 0.0).unwrap();
        let s1 = 1f64.sin();
        let want = (0.06 / (3.0 * s1 * s1 * 0.5)).sqrt();
        assert!((r - want).abs() < 1e-15);
        assert!((r - 0.2377).abs() < 5e-5);
        let m_zero = 3.0 * s1 * s1 * 0.5;
        assert!(matches!(
            theorem4_radius(0.01, 1.0, 0.0, 3, 1.0, m_zero * (1.0 + 1e-12)),
            Err(Error::IllPosedBound { .. })
        ));
        assert!(matches!(
            theorem4_radius(0.01, 1.0, 0.0, 3, 1.0, 5.0),
            Err(Error::IllPosedBound { .. })
        ));
        assert_eq!(theorem4_radius(1e9, 1.0, 0.0, 3, 1.0, 0.0).unwrap(), 1.0);
    }

    fn quick_setup(epsilon: f64, horizon: f64) -> BallBoundSetup {
        let mut s = BallBoundSetup::new(e(3, 0), epsilon);
        s.horizon = horizon;
        s.dt = 0.05;
        s.n_samples = 2000;
        s.seed = 11;
        s
    }

    #[test]
    fn epsilon_optimal_set_matches_the_exact_cap() {
        // Lone probe: stationary, action T·(1 − cos θ) with θ the distance to
        // the anchor, so the ε-optimal set is the cap of radius
        // arccos(1 − ε/T).
        let s = quick_setup(0.05, 0.25);
        let rep = epsilon_optimal_set_measure(&s).unwrap();
        assert!(rep.infimum.abs() < 1e-15);
        let exact = geodesic_ball_area(3, (1.0 - 0.05 / 0.25f64).acos()).unwrap();
        assert!((rep.mc_area - exact).abs() <= 4.0 * rep.mc_stderr);
        assert_eq!(rep.samples, 2000);
    }

    #[test]
    fn huge_epsilon_covers_the_sphere() {
        let rep = epsilon_optimal_set_measure(&quick_setup(1e6, 1.0)).unwrap();
        assert!((rep.mc_area - 4.0 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(rep.radius, 1.0);
    }

    #[test]
    fn ball_bound_is_reproducible_per_worker_count() {
        let mut s = quick_setup(0.1, 0.5);
        s.n_samples = 500;
        let a = epsilon_optimal_set_measure(&s).unwrap();
        let b = epsilon_optimal_set_measure(&s).unwrap();
        assert_eq!(a, b);
        s.workers = 3;
        let c = epsilon_optimal_set_measure(&s).unwrap();
        assert_eq!(c.samples, 500);
    }

    #[test]
    fn third_derivative_sweep_vanishes_for_the_quadratic_harness() {
        let mut s = quick_setup(0.1, 0.5);
        s.m_third = ThirdDerivative::Estimate;
        s.n_samples = 200;
        let rep = epsilon_optimal_set_measure(&s).unwrap();
        assert!(rep.m_third < 1e-8, "{}", rep.m_third);
    }

    #[test]
    fn context_tokens_move_the_probe() {
        let mut s = quick_setup(0.1, 0.5);
        let p = normalize(&[0.0, 1.0, 0.2]).unwrap();
        let alone = s.start_action(&p).unwrap();
        s.context = vec![e(3, 0)];
        let with = s.start_action(&p).unwrap();
        // attraction towards the anchor lowers the cost
        assert!(with < alone);
    }

    #[test]
    fn report_serialization() {
        let rep = epsilon_optimal_set_measure(&quick_setup(0.5, 0.25)).unwrap();
        let kv = rep.to_key_value();
        assert!(kv.starts_with("epsilon=5.0000000000000000e-1\n"));
        assert_eq!(kv.lines().count(), 13);
        assert_eq!(
            BallBoundReport::csv_header().split(',').count(),
            rep.to_csv_row().split(',').count()
        );
    }
}
