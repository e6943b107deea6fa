//! Attention dynamics of tokens on the sphere.
//!
//! Each token moves along the tangent projection of the softmax-weighted
//! mean of the ensemble,
//!
//! ```text
//! ẋ = P_x^⊥( Σ_j w_j e^{β⟨x,y_j⟩} y_j / Z ),   Z = Σ_j w_j e^{β⟨x,y_j⟩},
//! ```
//!
//! and all tokens advance simultaneously. Softmax weights are evaluated in
//! log-sum-exp form, so large `β` does not overflow the weights.

use nalgebra::DMatrix;
use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::path::{fd_slopes, hermite_position, hermite_velocity, locate, step_count, Curve};
use crate::sphere::{check_dim, normalize, project_raw, TangentVector, UnitVector};

/// Tolerance on `Σ w = 1`.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Query, key and value matrices, held constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
}

impl Qkv {
    pub fn identity(d: usize) -> Self {
        Self {
            query: DMatrix::identity(d, d),
            key: DMatrix::identity(d, d),
            value: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    beta: f64,
    qkv: Option<Qkv>,
}

impl AttentionParams {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta, qkv: None })
    }

    pub fn with_qkv(beta: f64, qkv: Qkv) -> Result<Self> {
        let d = qkv.query.nrows();
        for m in [&qkv.query, &qkv.key, &qkv.value] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.ncols().max(m.nrows()),
                });
            }
        }
        let mut p = Self::new(beta)?;
        p.qkv = Some(qkv);
        Ok(p)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn qkv(&self) -> Option<&Qkv> {
        self.qkv.as_ref()
    }
}

/// `n` weighted tokens on the sphere: the empirical measure `Σ_j w_j δ_{y_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConfiguration {
    points: Vec<UnitVector>,
    weights: Vec<f64>,
}

impl TokenConfiguration {
    /// Equal weights `1/n`.
    pub fn uniform(points: Vec<UnitVector>) -> Result<Self> {
        let n = points.len();
        let w = vec![1.0 / n as f64; n];
        Self::new(points, w)
    }

    pub fn new(points: Vec<UnitVector>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidWeights("configuration needs at least one token".into()));
        }
        if weights.len() != points.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} tokens",
                weights.len(),
                points.len()
            )));
        }
        let d = points[0].dim();
        for p in &points {
            check_dim(d, p.dim())?;
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn points(&self) -> &[UnitVector] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &UnitVector {
        &self.points[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same weights, new positions.
    pub(crate) fn with_points(&self, points: Vec<UnitVector>) -> Self {
        debug_assert_eq!(points.len(), self.weights.len());
        Self {
            points,
            weights: self.weights.clone(),
        }
    }

    /// Copy with token `i` moved to `p`.
    pub fn replace(&self, i: usize, p: UnitVector) -> Result<Self> {
        check_dim(self.dim(), p.dim())?;
        let mut points = self.points.clone();
        points[i] = p;
        Ok(Self {
            points,
            weights: self.weights.clone(),
        })
    }

    /// Applies a permutation: token `k` of the result is token `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i].clone()).collect(),
            weights: perm.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

/// Softmax weights of a query point against a configuration.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// `log Z`
    pub log_partition: f64,
    /// `w_j e^{β⟨x,y_j⟩} / Z`
    pub probs: Vec<f64>,
}

fn softmax_from_logits(logits: &[f64], weights: &[f64]) -> AttentionWeights {
    let max = logits
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(weights)
        .map(|(l, w)| if *w > 0.0 { w * (l - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    AttentionWeights {
        log_partition: max + s.ln(),
        probs,
    }
}

/// Stabilized softmax of `β⟨x, y_j⟩` under the token weights.
pub fn attention_weights(x: &[f64], mu: &TokenConfiguration, beta: f64) -> AttentionWeights {
    assert_eq!(x.len(), mu.dim(), "query and configuration dimensions differ");
    let logits: Vec<f64> = mu.points.iter().map(|y| beta * dot(x, y.as_slice())).collect();
    softmax_from_logits(&logits, &mu.weights)
}

/// `log Z_{β,μ}(x)`.
pub fn log_partition_function(x: &[f64], mu: &TokenConfiguration, beta: f64) -> f64 {
    attention_weights(x, mu, beta).log_partition
}

/// `Z_{β,μ}(x) = Σ_j w_j e^{β⟨x,y_j⟩}`. Overflows to infinity for very large β;
/// use [`log_partition_function`] there.
pub fn partition_function(x: &[f64], mu: &TokenConfiguration, beta: f64) -> f64 {
    log_partition_function(x, mu, beta).exp()
}

fn weighted_mean(probs: &[f64], mu: &TokenConfiguration) -> Vec<f64> {
    let mut m = vec![0.0; mu.dim()];
    for (p, y) in probs.iter().zip(&mu.points) {
        axpy(&mut m, *p, y.as_slice());
    }
    m
}

/// Mean field `m = (1/Z) Σ_j w_j e^{β⟨x,y_j⟩} y_j`.
pub fn mean_field(x: &[f64], mu: &TokenConfiguration, beta: f64) -> Vec<f64> {
    let aw = attention_weights(x, mu, beta);
    weighted_mean(&aw.probs, mu)
}

/// Second moment `Θ = (1/Z) Σ_j w_j e^{β⟨x,y_j⟩} y_j y_jᵀ` (no inner β factor).
pub fn second_moment(x: &[f64], mu: &TokenConfiguration, beta: f64) -> DMatrix<f64> {
    let aw = attention_weights(x, mu, beta);
    let d = mu.dim();
    let mut theta = DMatrix::zeros(d, d);
    for (p, y) in aw.probs.iter().zip(&mu.points) {
        let y = y.as_slice();
        for r in 0..d {
            for c in 0..=r {
                theta[(r, c)] += p * y[r] * y[c];
            }
        }
    }
    theta.fill_upper_triangle_with_lower_triangle();
    theta
}

pub(crate) fn flow_field_raw(x: &[f64], mu: &TokenConfiguration, beta: f64) -> Vec<f64> {
    project_raw(x, &mean_field(x, mu, beta))
}

/// The velocity field `𝒳[μ](x) = P_x^⊥(m)`.
pub fn flow_field(x: &UnitVector, mu: &TokenConfiguration, beta: f64) -> TangentVector {
    TangentVector {
        vec: flow_field_raw(x.as_slice(), mu, beta),
        base: x.clone(),
    }
}

/// Field with softmax weights `β⟨Qx, K y_j⟩` and values `V y_j`.
pub fn flow_field_qkv(x: &UnitVector, mu: &TokenConfiguration, params: &AttentionParams) -> Result<TangentVector> {
    let qkv = params
        .qkv()
        .ok_or_else(|| Error::InvalidParameter("attention parameters carry no Q, K, V".into()))?;
    check_dim(qkv.dim(), x.dim())?;
    check_dim(qkv.dim(), mu.dim())?;
    let field = FieldEvaluator::new(mu.points(), mu.weights(), params);
    Ok(TangentVector {
        vec: field.eval(x.as_slice()),
        base: x.clone(),
    })
}

/// `Γ(h) = β(Θ − m mᵀ)h`: the derivative of the mean field in direction `h`.
pub fn gamma_linearization(x: &[f64], mu: &TokenConfiguration, beta: f64, h: &[f64]) -> Vec<f64> {
    assert_eq!(h.len(), mu.dim());
    let aw = attention_weights(x, mu, beta);
    let m = weighted_mean(&aw.probs, mu);
    let mut out = vec![0.0; mu.dim()];
    for (p, y) in aw.probs.iter().zip(&mu.points) {
        axpy(&mut out, p * dot(y.as_slice(), h), y.as_slice());
    }
    axpy(&mut out, -dot(&m, h), &m);
    out.iter_mut().for_each(|v| *v *= beta);
    out
}

/// `Ψ = −β(Θ − m mᵀ) + m xᵀ + ⟨m, x⟩ I`.
pub fn psi_matrix(x: &[f64], mu: &TokenConfiguration, beta: f64) -> DMatrix<f64> {
    let d = mu.dim();
    let theta = second_moment(x, mu, beta);
    let m = mean_field(x, mu, beta);
    let mx = dot(&m, x);
    DMatrix::from_fn(d, d, |r, c| {
        let diag = if r == c { mx } else { 0.0 };
        -beta * (theta[(r, c)] - m[r] * m[c]) + m[r] * x[c] + diag
    })
}

/// Evaluates the field of one ensemble snapshot at arbitrary points.
pub(crate) struct FieldEvaluator<'a> {
    points: &'a [UnitVector],
    weights: &'a [f64],
    beta: f64,
    qkv: Option<(&'a Qkv, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum())
        .collect()
}

impl<'a> FieldEvaluator<'a> {
    pub(crate) fn new(points: &'a [UnitVector], weights: &'a [f64], params: &'a AttentionParams) -> Self {
        let qkv = params.qkv().map(|q| {
            let keys = points.iter().map(|y| mat_vec(&q.key, y.as_slice())).collect();
            let values = points.iter().map(|y| mat_vec(&q.value, y.as_slice())).collect();
            (q, keys, values)
        });
        Self {
            points,
            weights,
            beta: params.beta(),
            qkv,
        }
    }

    pub(crate) fn eval(&self, x: &[f64]) -> Vec<f64> {
        match &self.qkv {
            None => {
                let logits: Vec<f64> = self.points.iter().map(|y| self.beta * dot(x, y.as_slice())).collect();
                let aw = softmax_from_logits(&logits, self.weights);
                let mut m = vec![0.0; x.len()];
                for (p, y) in aw.probs.iter().zip(self.points) {
                    axpy(&mut m, *p, y.as_slice());
                }
                project_raw(x, &m)
            }
            Some((q, keys, values)) => {
                let qx = mat_vec(&q.query, x);
                let logits: Vec<f64> = keys.iter().map(|k| self.beta * dot(&qx, k)).collect();
                let aw = softmax_from_logits(&logits, self.weights);
                let mut m = vec![0.0; x.len()];
                for (p, v) in aw.probs.iter().zip(values) {
                    axpy(&mut m, *p, v);
                }
                project_raw(x, &m)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Midpoint,
    /// Built from externally supplied samples rather than integrated.
    Sampled,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Scheme::Euler),
            "midpoint" => Ok(Scheme::Midpoint),
            other => Err(Error::InvalidParameter(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Token states on the uniform grid `t_k = k·dt`, with a velocity per state.
///
/// For integrated trajectories the stored velocity is the field evaluated at
/// the stored state; between grid points states are cubic Hermite
/// interpolants of (state, velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    states: Vec<TokenConfiguration>,
    velocities: Vec<Vec<Vec<f64>>>,
    scheme: Scheme,
    params: Option<AttentionParams>,
}

impl Trajectory {
    /// Wraps sampled states; velocities come from finite differences.
    pub fn from_samples(dt: f64, states: Vec<TokenConfiguration>) -> Result<Self> {
        if states.len() < 3 {
            return Err(Error::GridMismatch("need at least 3 snapshots".into()));
        }
        let n = states[0].len();
        let mut velocities = vec![Vec::with_capacity(n); states.len()];
        for i in 0..n {
            let series: Vec<Vec<f64>> = states.iter().map(|s| s.point(i).as_slice().to_vec()).collect();
            for (k, v) in fd_slopes(&series, dt).into_iter().enumerate() {
                velocities[k].push(v);
            }
        }
        Self::from_parts(dt, states, velocities, Scheme::Sampled, None)
    }

    /// Wraps sampled states with known velocities.
    pub fn from_samples_with_velocities(
        dt: f64,
        states: Vec<TokenConfiguration>,
        velocities: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        Self::from_parts(dt, states, velocities, Scheme::Sampled, None)
    }

    fn from_parts(
        dt: f64,
        states: Vec<TokenConfiguration>,
        velocities: Vec<Vec<Vec<f64>>>,
        scheme: Scheme,
        params: Option<AttentionParams>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if states.len() < 2 || velocities.len() != states.len() {
            return Err(Error::GridMismatch("states and velocities must cover the grid".into()));
        }
        let (n, d) = (states[0].len(), states[0].dim());
        for (s, v) in states.iter().zip(&velocities) {
            if s.len() != n || v.len() != n {
                return Err(Error::GridMismatch("token count changes along the trajectory".into()));
            }
            check_dim(d, s.dim())?;
            for vi in v {
                check_dim(d, vi.len())?;
            }
        }
        Ok(Self {
            dt,
            states,
            velocities,
            scheme,
            params,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.states[0].len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn params(&self) -> Option<&AttentionParams> {
        self.params.as_ref()
    }

    pub fn snapshot(&self, k: usize) -> &TokenConfiguration {
        &self.states[k]
    }

    pub fn snapshots(&self) -> &[TokenConfiguration] {
        &self.states
    }

    pub fn last(&self) -> &TokenConfiguration {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn velocity_at(&self, k: usize, token: usize) -> &[f64] {
        &self.velocities[k][token]
    }

    pub fn token_position(&self, token: usize, t: f64) -> Vec<f64> {
        let (k, th) = locate(t, self.dt, self.steps());
        hermite_position(
            self.states[k].point(token).as_slice(),
            &self.velocities[k][token],
            self.states[k + 1].point(token).as_slice(),
            &self.velocities[k + 1][token],
            self.dt,
            th,
        )
    }

    pub fn token_velocity(&self, token: usize, t: f64) -> Vec<f64> {
        let (k, th) = locate(t, self.dt, self.steps());
        hermite_velocity(
            self.states[k].point(token).as_slice(),
            &self.velocities[k][token],
            self.states[k + 1].point(token).as_slice(),
            &self.velocities[k + 1][token],
            self.dt,
            th,
        )
    }

    /// Interpolated ensemble at time `t`, each point renormalized.
    pub fn configuration_at(&self, t: f64) -> TokenConfiguration {
        let (k, th) = locate(t, self.dt, self.steps());
        if th == 0.0 {
            return self.states[k].clone();
        }
        if th == 1.0 {
            return self.states[k + 1].clone();
        }
        let points = (0..self.n_tokens())
            .map(|i| {
                let p = self.token_position(i, t);
                normalize(&p).expect("interpolated state stays near the sphere")
            })
            .collect();
        self.states[k].with_points(points)
    }

    /// The path of one token as a [`Curve`].
    pub fn token_path(&self, token: usize) -> TokenPath<'_> {
        assert!(token < self.n_tokens(), "token index out of range");
        TokenPath {
            trajectory: self,
            token,
        }
    }

    /// Largest deviation of any stored state from unit norm.
    pub fn max_norm_deviation(&self) -> f64 {
        self.states
            .iter()
            .flat_map(|s| s.points().iter().map(|p| (norm(p.as_slice()) - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// CSV with header `t,token_id,c0..c{d-1}`, one row per (time, token).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.dim();
        let mut header = String::from("t,token_id");
        for c in 0..d {
            header.push_str(&format!(",c{c}"));
        }
        writeln!(w, "{header}")?;
        for (k, s) in self.states.iter().enumerate() {
            let t = k as f64 * self.dt;
            for (i, p) in s.points().iter().enumerate() {
                write!(w, "{},{}", crate::fmt_f64(t), i)?;
                for c in p.as_slice() {
                    write!(w, ",{}", crate::fmt_f64(*c))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// One token of a [`Trajectory`], viewed as a path.
#[derive(Clone, Copy)]
pub struct TokenPath<'a> {
    trajectory: &'a Trajectory,
    token: usize,
}

impl Curve for TokenPath<'_> {
    fn dim(&self) -> usize {
        self.trajectory.dim()
    }

    fn duration(&self) -> f64 {
        self.trajectory.duration()
    }

    fn position(&self, t: f64) -> Vec<f64> {
        self.trajectory.token_position(self.token, t)
    }

    fn velocity(&self, t: f64) -> Vec<f64> {
        self.trajectory.token_velocity(self.token, t)
    }
}

fn points_to_raw(c: &TokenConfiguration) -> Vec<Vec<f64>> {
    c.points().iter().map(|p| p.as_slice().to_vec()).collect()
}

fn retract(x: &[f64], v: &[f64], h: f64) -> UnitVector {
    let mut y = x.to_vec();
    axpy(&mut y, h, v);
    normalize(&y).expect("an explicit step of a bounded field stays away from the origin")
}

fn ensemble_field(c: &TokenConfiguration, params: &AttentionParams) -> Vec<Vec<f64>> {
    let f = FieldEvaluator::new(c.points(), c.weights(), params);
    c.points().iter().map(|p| f.eval(p.as_slice())).collect()
}

/// How a passive probe sees the ensemble while being advected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Advection {
    /// The ensemble evolves alongside the probe.
    #[default]
    CoEvolving,
    /// The ensemble is held at its initial configuration.
    Frozen,
}

/// One step of the ensemble and optional passive probes.
struct Stepper<'a> {
    params: &'a AttentionParams,
    dt: f64,
    scheme: Scheme,
    frozen: Option<&'a TokenConfiguration>,
}

impl Stepper<'_> {
    /// Advances `state` and `probes` by one step; returns the new state.
    fn step(&self, state: &TokenConfiguration, probes: &mut [UnitVector]) -> TokenConfiguration {
        let raw = points_to_raw(state);
        let probe_field = |ens: &TokenConfiguration, x: &[f64]| {
            let ens = self.frozen.unwrap_or(ens);
            FieldEvaluator::new(ens.points(), ens.weights(), self.params).eval(x)
        };
        match self.scheme {
            Scheme::Euler | Scheme::Sampled => {
                let k1 = ensemble_field(state, self.params);
                for p in probes.iter_mut() {
                    let v = probe_field(state, p.as_slice());
                    *p = retract(p.as_slice(), &v, self.dt);
                }
                let pts = raw.iter().zip(&k1).map(|(x, v)| retract(x, v, self.dt)).collect();
                state.with_points(pts)
            }
            Scheme::Midpoint => {
                let k1 = ensemble_field(state, self.params);
                let mid_pts = raw.iter().zip(&k1).map(|(x, v)| retract(x, v, 0.5 * self.dt)).collect();
                let mid = state.with_points(mid_pts);
                let k2 = ensemble_field(&mid, self.params);
                for p in probes.iter_mut() {
                    let v1 = probe_field(state, p.as_slice());
                    let pm = retract(p.as_slice(), &v1, 0.5 * self.dt);
                    let v2 = probe_field(&mid, pm.as_slice());
                    *p = retract(p.as_slice(), &v2, self.dt);
                }
                let pts = raw.iter().zip(&k2).map(|(x, v)| retract(x, v, self.dt)).collect();
                state.with_points(pts)
            }
        }
    }
}

/// Integrates all tokens of `config` over `[0, T]` with step `dt`.
///
/// Euler: `x⁺ = normalize(x + dt·𝒳(x))`. Midpoint: the stage point
/// `normalize(x + dt/2·𝒳(x))` supplies the slope of the full step, which is
/// then renormalized.
pub fn integrate(
    config: &TokenConfiguration,
    params: &AttentionParams,
    duration: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<Trajectory> {
    if scheme == Scheme::Sampled {
        return Err(Error::InvalidParameter("choose Euler or Midpoint to integrate".into()));
    }
    if let Some(q) = params.qkv() {
        check_dim(q.dim(), config.dim())?;
    }
    if dt > duration {
        return Err(Error::InvalidParameter(format!(
            "dt {dt} exceeds the horizon {duration}"
        )));
    }
    let steps = step_count(duration, dt)?;
    let stepper = Stepper {
        params,
        dt,
        scheme,
        frozen: None,
    };
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    let mut current = config.clone();
    for _ in 0..steps {
        let next = stepper.step(&current, &mut []);
        velocities.push(ensemble_field(&current, params));
        states.push(std::mem::replace(&mut current, next));
    }
    velocities.push(ensemble_field(&current, params));
    states.push(current);
    Trajectory::from_parts(dt, states, velocities, scheme, Some(params.clone()))
}

/// Time-1 image `φ(x0)` of a passive probe advected by the ensemble field.
pub fn pushforward_point(
    x0: &UnitVector,
    mu: &TokenConfiguration,
    params: &AttentionParams,
    dt: f64,
    scheme: Scheme,
    advection: Advection,
) -> Result<UnitVector> {
    Ok(
        pushforward_points(std::slice::from_ref(x0), mu, params, dt, scheme, advection)?
            .pop()
            .expect("one probe in, one probe out"),
    )
}

/// [`pushforward_point`] for several probes sharing one ensemble run.
pub fn pushforward_points(
    probes: &[UnitVector],
    mu: &TokenConfiguration,
    params: &AttentionParams,
    dt: f64,
    scheme: Scheme,
    advection: Advection,
) -> Result<Vec<UnitVector>> {
    if scheme == Scheme::Sampled {
        return Err(Error::InvalidParameter("choose Euler or Midpoint to integrate".into()));
    }
    for p in probes {
        check_dim(mu.dim(), p.dim())?;
    }
    let steps = step_count(1.0, dt)?;
    let frozen = match advection {
        Advection::Frozen => Some(mu),
        Advection::CoEvolving => None,
    };
    let stepper = Stepper {
        params,
        dt,
        scheme,
        frozen,
    };
    let mut current = mu.clone();
    let mut probes = probes.to_vec();
    for _ in 0..steps {
        current = stepper.step(&current, &mut probes);
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{geodesic_distance, sample_uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(d: usize, i: usize) -> UnitVector {
        UnitVector::basis(d, i).unwrap()
    }

    fn random_config(n: usize, d: usize, rng: &mut ChaCha8Rng) -> TokenConfiguration {
        TokenConfiguration::uniform((0..n).map(|_| sample_uniform(d, rng).unwrap()).collect()).unwrap()
    }

    // Naive oracle: direct exponentials, no stabilization.
    fn naive_z_and_m(x: &[f64], mu: &TokenConfiguration, beta: f64) -> (f64, Vec<f64>) {
        let mut z = 0.0;
        let mut m = vec![0.0; x.len()];
        for (y, w) in mu.points().iter().zip(mu.weights()) {
            let e = w * (beta * dot(x, y.as_slice())).exp();
            z += e;
            for (mi, yi) in m.iter_mut().zip(y.as_slice()) {
                *mi += e * yi;
            }
        }
        (z, m.into_iter().map(|v| v / z).collect())
    }

    #[test]
    fn partition_function_examples() {
        let x = e(3, 0);
        let one = TokenConfiguration::uniform(vec![x.clone()]).unwrap();
        assert!((partition_function(x.as_slice(), &one, 1.0) - std::f64::consts::E).abs() < 1e-15);
        let pair = TokenConfiguration::uniform(vec![x.clone(), x.antipode()]).unwrap();
        assert!((partition_function(x.as_slice(), &pair, 1.0) - 1f64.cosh()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = random_config(5, 4, &mut rng);
        let q = sample_uniform(4, &mut rng).unwrap();
        let (z, _) = naive_z_and_m(q.as_slice(), &mu, 0.5);
        assert!((partition_function(q.as_slice(), &mu, 0.5) - z).abs() <= 1e-14);
    }

    #[test]
    fn mean_field_examples() {
        let x = e(3, 0);
        let y = e(3, 2);
        let one = TokenConfiguration::uniform(vec![y.clone()]).unwrap();
        assert_eq!(mean_field(x.as_slice(), &one, 2.0), y.as_slice().to_vec());
        let pair = TokenConfiguration::uniform(vec![x.clone(), x.antipode()]).unwrap();
        for beta in [0.3, 1.0, 4.0] {
            let m = mean_field(x.as_slice(), &pair, beta);
            assert!((m[0] - beta.tanh()).abs() < 1e-15);
            assert!(m[1].abs() < 1e-16 && m[2].abs() < 1e-16);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mu = random_config(7, 5, &mut rng);
            let q = sample_uniform(5, &mut rng).unwrap();
            let (_, m_naive) = naive_z_and_m(q.as_slice(), &mu, 1.7);
            let m = mean_field(q.as_slice(), &mu, 1.7);
            assert!(crate::linalg::dist(&m, &m_naive) <= 1e-14);
            assert!(norm(&m) <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn second_moment_properties() {
        let y = e(3, 1);
        let one = TokenConfiguration::uniform(vec![y.clone()]).unwrap();
        let th = second_moment(e(3, 0).as_slice(), &one, 1.0);
        assert_eq!(
            th,
            DMatrix::from_fn(3, 3, |r, c| if r == 1 && c == 1 { 1.0 } else { 0.0 })
        );

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mu = random_config(6, 4, &mut rng);
            let q = sample_uniform(4, &mut rng).unwrap();
            let th = second_moment(q.as_slice(), &mu, 2.0);
            assert!((th.trace() - 1.0).abs() < 1e-12);
            assert!((&th - th.transpose()).abs().max() == 0.0);
            let eig = nalgebra::SymmetricEigen::new(th);
            assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-12));
        }
    }

    #[test]
    fn flow_field_examples() {
        let x = e(3, 0);
        let single = TokenConfiguration::uniform(vec![x.clone()]).unwrap();
        assert!(flow_field(&x, &single, 1.0).norm() == 0.0);
        let pair = TokenConfiguration::uniform(vec![x.clone(), x.antipode()]).unwrap();
        assert!(flow_field(&x, &pair, 1.0).norm() < 1e-16);

        let pts = vec![
            normalize(&[1.0, 0.2, -0.3]).unwrap(),
            normalize(&[0.1, 1.0, 0.4]).unwrap(),
            normalize(&[-0.5, 0.3, 1.0]).unwrap(),
        ];
        let mu = TokenConfiguration::uniform(pts).unwrap();
        let q = normalize(&[0.3, -0.4, 0.8]).unwrap();
        let (_, m) = naive_z_and_m(q.as_slice(), &mu, 1.0);
        let c = dot(&m, q.as_slice());
        let want: Vec<f64> = m.iter().zip(q.as_slice()).map(|(mi, xi)| mi - c * xi).collect();
        let got = flow_field(&q, &mu, 1.0);
        assert!(crate::linalg::dist(&got.vec, &want) <= 1e-14);
    }

    #[test]
    fn flow_field_qkv_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu = random_config(4, 3, &mut rng);
        let x = sample_uniform(3, &mut rng).unwrap();
        let ident = AttentionParams::with_qkv(1.3, Qkv::identity(3)).unwrap();
        let a = flow_field_qkv(&x, &mu, &ident).unwrap();
        let b = flow_field(&x, &mu, 1.3);
        assert!(crate::linalg::dist(&a.vec, &b.vec) <= 1e-15);

        let mut zero_v = Qkv::identity(3);
        zero_v.value = DMatrix::zeros(3, 3);
        let p = AttentionParams::with_qkv(1.0, zero_v).unwrap();
        assert!(flow_field_qkv(&x, &mu, &p).unwrap().norm() == 0.0);

        assert!(flow_field_qkv(&x, &mu, &AttentionParams::new(1.0).unwrap()).is_err());
        let wrong = AttentionParams::with_qkv(1.0, Qkv::identity(4)).unwrap();
        assert!(matches!(
            flow_field_qkv(&x, &mu, &wrong),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn flow_field_qkv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mu = random_config(4, 3, &mut rng);
        let x = sample_uniform(3, &mut rng).unwrap();
        let mut r = || DMatrix::from_fn(3, 3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let qkv = Qkv {
            query: r(),
            key: r(),
            value: r(),
        };
        let params = AttentionParams::with_qkv(0.8, qkv.clone()).unwrap();
        let got = flow_field_qkv(&x, &mu, &params).unwrap();

        let xv = nalgebra::DVector::from_column_slice(x.as_slice());
        let qx = &qkv.query * &xv;
        let mut z = 0.0;
        let mut m = nalgebra::DVector::zeros(3);
        for (y, w) in mu.points().iter().zip(mu.weights()) {
            let yv = nalgebra::DVector::from_column_slice(y.as_slice());
            let e = w * (0.8 * qx.dot(&(&qkv.key * &yv))).exp();
            z += e;
            m += e * (&qkv.value * &yv);
        }
        m /= z;
        let want = &m - xv.dot(&m) * &xv;
        assert!(crate::linalg::dist(&got.vec, want.as_slice()) <= 1e-13);
    }

    #[test]
    fn gamma_examples_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu = random_config(5, 4, &mut rng);
        let x = sample_uniform(4, &mut rng).unwrap();
        assert!(norm(&gamma_linearization(x.as_slice(), &mu, 1.0, &[0.0; 4])) == 0.0);
        let single = TokenConfiguration::uniform(vec![e(4, 2)]).unwrap();
        assert!(norm(&gamma_linearization(x.as_slice(), &single, 2.0, &[0.3, 0.1, -0.2, 0.5])) < 1e-16);

        let h = [0.3, -0.7, 0.2, 0.5];
        let eps = 1e-5;
        let xp: Vec<f64> = x.as_slice().iter().zip(&h).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.as_slice().iter().zip(&h).map(|(a, b)| a - eps * b).collect();
        let fd: Vec<f64> = mean_field(&xp, &mu, 1.5)
            .iter()
            .zip(mean_field(&xm, &mu, 1.5))
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        let g = gamma_linearization(x.as_slice(), &mu, 1.5, &h);
        assert!(crate::linalg::dist(&fd, &g) <= 1e-6 * norm(&g));
    }

    #[test]
    fn psi_examples() {
        let x = e(3, 0);
        let single = TokenConfiguration::uniform(vec![x.clone()]).unwrap();
        let psi = psi_matrix(x.as_slice(), &single, 1.0);
        let want = DMatrix::from_fn(3, 3, |r, c| {
            (if r == 0 && c == 0 { 1.0 } else { 0.0 }) + if r == c { 1.0 } else { 0.0 }
        });
        assert!((&psi - &want).abs().max() < 1e-15);

        // antipodal pair at x: Θ = x xᵀ, m = tanh(β) x
        let beta: f64 = 0.7;
        let pair = TokenConfiguration::uniform(vec![x.clone(), x.antipode()]).unwrap();
        let psi = psi_matrix(x.as_slice(), &pair, beta);
        let t = beta.tanh();
        let want = DMatrix::from_fn(3, 3, |r, c| {
            let xx = if r == 0 && c == 0 { 1.0 } else { 0.0 };
            let id = if r == c { 1.0 } else { 0.0 };
            -beta * (xx - t * t * xx) + t * (xx + id)
        });
        assert!((&psi - &want).abs().max() < 1e-15);
    }

    #[test]
    fn psi_matches_elementwise_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let mu = random_config(6, 3, &mut rng);
            let x = sample_uniform(3, &mut rng).unwrap();
            let beta = 1.2;
            let (z, m) = naive_z_and_m(x.as_slice(), &mu, beta);
            let xs = x.as_slice();
            let mx = dot(&m, xs);
            let psi = psi_matrix(xs, &mu, beta);
            for r in 0..3 {
                for c in 0..3 {
                    let mut th = 0.0;
                    for (y, w) in mu.points().iter().zip(mu.weights()) {
                        let y = y.as_slice();
                        th += w * (beta * dot(xs, y)).exp() * y[r] * y[c];
                    }
                    th /= z;
                    let want = -beta * (th - m[r] * m[c]) + m[r] * xs[c] + if r == c { mx } else { 0.0 };
                    assert!((psi[(r, c)] - want).abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn stabilized_softmax_survives_large_beta() {
        let mu = TokenConfiguration::uniform(vec![e(3, 0), e(3, 1)]).unwrap();
        let x = normalize(&[1.0, 0.9, 0.0]).unwrap();
        let lz = log_partition_function(x.as_slice(), &mu, 2000.0);
        assert!(lz.is_finite());
        let m = mean_field(x.as_slice(), &mu, 2000.0);
        assert!(m.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_token_is_stationary() {
        let x = normalize(&[0.2, -0.5, 0.7, 0.1]).unwrap();
        let cfg = TokenConfiguration::uniform(vec![x.clone()]).unwrap();
        let p = AttentionParams::new(1.0).unwrap();
        for scheme in [Scheme::Euler, Scheme::Midpoint] {
            let tr = integrate(&cfg, &p, 2.0, 0.01, scheme).unwrap();
            for s in tr.snapshots() {
                assert!(crate::linalg::dist(s.point(0).as_slice(), x.as_slice()) <= 1e-15);
            }
        }
    }

    #[test]
    fn step_count_mismatch_is_reported() {
        let cfg = TokenConfiguration::uniform(vec![e(3, 0)]).unwrap();
        let p = AttentionParams::new(1.0).unwrap();
        assert!(matches!(
            integrate(&cfg, &p, 1.0, 0.3, Scheme::Euler),
            Err(Error::StepCountMismatch { .. })
        ));
    }

    #[test]
    fn two_tokens_cluster_monotonically() {
        let a = normalize(&[1.0, 0.1, 0.0]).unwrap();
        let b = normalize(&[0.0, 1.0, 0.3]).unwrap();
        let cfg = TokenConfiguration::uniform(vec![a, b]).unwrap();
        let p = AttentionParams::new(1.0).unwrap();
        let coarse = integrate(&cfg, &p, 1.0, 0.01, Scheme::Midpoint).unwrap();
        let fine = integrate(&cfg, &p, 1.0, 0.001, Scheme::Midpoint).unwrap();
        let dist = |s: &TokenConfiguration| geodesic_distance(s.point(0), s.point(1));
        let dists: Vec<f64> = coarse.snapshots().iter().map(dist).collect();
        assert!(dists.windows(2).all(|w| w[1] < w[0]));
        for k in 0..=100 {
            assert!((dists[k] - dist(fine.snapshot(10 * k))).abs() < 1e-5);
        }
    }

    #[test]
    fn midpoint_and_euler_gap_is_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = random_config(5, 3, &mut rng);
        let p = AttentionParams::new(1.0).unwrap();
        let gap = |dt: f64| {
            let a = integrate(&cfg, &p, 1.0, dt, Scheme::Euler).unwrap();
            let b = integrate(&cfg, &p, 1.0, dt, Scheme::Midpoint).unwrap();
            (0..=a.steps())
                .flat_map(|k| (0..5).map(move |i| (k, i)))
                .map(|(k, i)| crate::linalg::dist(a.snapshot(k).point(i).as_slice(), b.snapshot(k).point(i).as_slice()))
                .fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(0.01), gap(0.005));
        assert!(g1 <= 0.5 * 0.01, "gap {g1}");
        assert!((g1 / g2 - 2.0).abs() < 0.2, "ratio {}", g1 / g2);
    }

    #[test]
    fn pushforward_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = random_config(4, 3, &mut rng);
        let p = AttentionParams::new(1.0).unwrap();
        let tr = integrate(&cfg, &p, 1.0, 0.01, Scheme::Midpoint).unwrap();
        for i in 0..4 {
            let img = pushforward_point(cfg.point(i), &cfg, &p, 0.01, Scheme::Midpoint, Advection::CoEvolving).unwrap();
            assert_eq!(&img, tr.last().point(i));
        }
        let x0 = sample_uniform(3, &mut rng).unwrap();
        let a = pushforward_point(&x0, &cfg, &p, 0.01, Scheme::Midpoint, Advection::Frozen).unwrap();
        let b = pushforward_point(&x0, &cfg, &p, 0.01, Scheme::Midpoint, Advection::Frozen).unwrap();
        assert_eq!(a, b);
        let single = TokenConfiguration::uniform(vec![x0.clone()]).unwrap();
        let img = pushforward_point(&x0, &single, &p, 0.01, Scheme::Midpoint, Advection::CoEvolving).unwrap();
        assert!(crate::linalg::dist(img.as_slice(), x0.as_slice()) <= 1e-15);
    }

    #[test]
    fn hermite_interpolation_of_integrated_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = random_config(3, 3, &mut rng);
        let p = AttentionParams::new(1.0).unwrap();
        let coarse = integrate(&cfg, &p, 1.0, 0.02, Scheme::Midpoint).unwrap();
        let fine = integrate(&cfg, &p, 1.0, 0.01, Scheme::Midpoint).unwrap();
        // odd fine samples fall halfway between coarse knots
        for k in (1..100).step_by(2) {
            let t = k as f64 * 0.01;
            let a = coarse.token_position(1, t);
            let b = fine.snapshot(k).point(1).as_slice();
            assert!(crate::linalg::dist(&a, b) < 1e-5);
        }
    }

    #[test]
    fn csv_layout() {
        let cfg = TokenConfiguration::uniform(vec![e(2, 0), e(2, 1)]).unwrap();
        let p = AttentionParams::new(1.0).unwrap();
        let tr = integrate(&cfg, &p, 0.5, 0.25, Scheme::Euler).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,token_id,c0,c1");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[1].starts_with("0.0000000000000000e0,0,1.0000000000000000e0,"));
    }
}
