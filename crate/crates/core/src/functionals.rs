//! Lagrangians, action functionals and the potential `Φ = log Z`.
//!
//! Continuous actions are evaluated by composite midpoint quadrature on a
//! fine grid `quad_dt`, with both the varied path and the reference
//! trajectory evaluated through their cubic Hermite interpolants. Node
//! values are computed in parallel and reduced by pairwise summation, so
//! results do not depend on the thread count.
//!
//! The drift paired with `ḣ` in the Transformer functional is
//! `(1/β)P_x^⊥(∇Φ(x)) = 𝒳[μ](x)`, i.e. the velocity of the reference token.

use rayon::prelude::*;
use std::io::Write;

use crate::dynamics::{
    integrate, log_partition_function, mean_field, AttentionParams, Scheme, TokenConfiguration, Trajectory,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, ls_slope, norm_sq, pairwise_sum, sub};
use crate::path::{step_count, Curve, PathSample};
use crate::sphere::{check_dim, project_raw, UnitVector};

/// Step used by central finite differences of Lagrangians and actions.
pub const FD_EPS: f64 = 1e-5;

/// Errors at or below this level are treated as exact zeros by the
/// quadrature study.
pub const DEGENERATE_ERROR: f64 = 1e-12;

/// `Φ(x) = log Z_{β,μ}(x)`, stabilized.
pub fn potential(x: &[f64], mu: &TokenConfiguration, beta: f64) -> f64 {
    log_partition_function(x, mu, beta)
}

/// `∇Φ(x) = β·m(x)`.
pub fn grad_potential(x: &[f64], mu: &TokenConfiguration, beta: f64) -> Vec<f64> {
    mean_field(x, mu, beta).into_iter().map(|v| beta * v).collect()
}

/// `(1/β)P_x^⊥(∇Φ(x))`.
pub fn drift(x: &[f64], mu: &TokenConfiguration, beta: f64) -> Vec<f64> {
    let g = grad_potential(x, mu, beta);
    project_raw(x, &g).into_iter().map(|v| v / beta).collect()
}

/// A smooth feature map `F: R^d → R^k` for the token-selection loss.
pub trait FeatureMap: Sync {
    fn eval(&self, x: &[f64]) -> Vec<f64>;

    /// Directional derivative `DF(x)·v`. Defaults to central differences.
    fn jvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        self.eval(&xp)
            .iter()
            .zip(self.eval(&xm))
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect()
    }
}

/// The Lagrangians studied here. Pointwise values take the time `t`, an
/// ambient position `x` and velocity `v`; data that depends on time (the
/// ensemble, the drift, a target path) comes from an [`ActionContext`].
#[derive(Clone, Copy)]
pub enum LagrangianKind<'a> {
    /// `½‖v‖² − ⟨v, D(t)⟩`, `D` the reference token velocity, plus the
    /// boundary term `½‖h(0) − x(0)‖²`.
    TransformerAction,
    /// `‖v‖² + Φ(x)` against the reference ensemble at time `t`.
    KineticPotential,
    /// `‖v‖²`.
    GeodesicAction,
    /// `‖DF(x)v − DF(x*)v*‖²` against a target token path, plus
    /// `½‖x(0) − x*(0)‖²`. Without a map `F` is the identity.
    TokenSelection {
        target: &'a Trajectory,
        map: Option<&'a dyn FeatureMap>,
    },
    /// `(mu_sc/2)‖x − a‖² + ½‖v‖²`.
    StronglyConvexTest { anchor: &'a UnitVector, mu_sc: f64 },
}

impl std::fmt::Debug for LagrangianKind<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl LagrangianKind<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            LagrangianKind::TransformerAction => "TransformerAction",
            LagrangianKind::KineticPotential => "KineticPotential",
            LagrangianKind::GeodesicAction => "GeodesicAction",
            LagrangianKind::TokenSelection { .. } => "TokenSelection",
            LagrangianKind::StronglyConvexTest { .. } => "StronglyConvexTest",
        }
    }

    /// True when both partial gradients have closed forms.
    pub fn has_analytic_gradients(&self) -> bool {
        !matches!(self, LagrangianKind::TokenSelection { map: Some(_), .. })
    }

    fn needs_reference(&self) -> bool {
        matches!(
            self,
            LagrangianKind::TransformerAction | LagrangianKind::KineticPotential
        )
    }

    fn check(&self, ctx: &ActionContext<'_>, dim: usize, duration: f64) -> Result<()> {
        if self.needs_reference() && ctx.reference.is_none() {
            return Err(Error::InvalidParameter(format!(
                "{} needs a reference trajectory",
                self.name()
            )));
        }
        if let Some(r) = ctx.reference {
            check_grid(r, dim, duration)?;
            if ctx.token >= r.n_tokens() {
                return Err(Error::InvalidParameter(format!("token {} out of range", ctx.token)));
            }
        }
        match self {
            LagrangianKind::TokenSelection { target, .. } => {
                check_grid(target, dim, duration)?;
                if ctx.token >= target.n_tokens() {
                    return Err(Error::InvalidParameter(format!("token {} out of range", ctx.token)));
                }
            }
            LagrangianKind::StronglyConvexTest { anchor, mu_sc } => {
                check_dim(dim, anchor.dim())?;
                if !(*mu_sc > 0.0) {
                    return Err(Error::InvalidParameter(format!("mu_sc must be positive, got {mu_sc}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// `L(t, x, v)` without boundary terms.
    pub fn value(&self, ctx: &ActionContext<'_>, t: f64, x: &[f64], v: &[f64]) -> f64 {
        match self {
            LagrangianKind::TransformerAction => {
                let d = ctx.reference().token_velocity(ctx.token, t);
                0.5 * norm_sq(v) - dot(v, &d)
            }
            LagrangianKind::KineticPotential => {
                let mu = ctx.reference().configuration_at(t);
                norm_sq(v) + potential(x, &mu, ctx.beta)
            }
            LagrangianKind::GeodesicAction => norm_sq(v),
            LagrangianKind::TokenSelection { target, map } => {
                let xs = target.token_position(ctx.token, t);
                let vs = target.token_velocity(ctx.token, t);
                match map {
                    None => norm_sq(&sub(v, &vs)),
                    Some(f) => norm_sq(&sub(&f.jvp(x, v), &f.jvp(&xs, &vs))),
                }
            }
            LagrangianKind::StronglyConvexTest { anchor, mu_sc } => {
                0.5 * mu_sc * norm_sq(&sub(x, anchor.as_slice())) + 0.5 * norm_sq(v)
            }
        }
    }

    /// Boundary contribution given the path's initial point.
    pub fn boundary(&self, ctx: &ActionContext<'_>, h0: &[f64]) -> f64 {
        match self {
            LagrangianKind::TransformerAction => {
                let x0 = ctx.reference().snapshot(0).point(ctx.token);
                0.5 * norm_sq(&sub(h0, x0.as_slice()))
            }
            LagrangianKind::TokenSelection { target, .. } => {
                let x0 = target.snapshot(0).point(ctx.token);
                0.5 * norm_sq(&sub(h0, x0.as_slice()))
            }
            _ => 0.0,
        }
    }

    /// `∂L/∂x` and whether it came from finite differences.
    pub fn grad_x(&self, ctx: &ActionContext<'_>, t: f64, x: &[f64], v: &[f64]) -> (Vec<f64>, bool) {
        match self {
            LagrangianKind::TransformerAction
            | LagrangianKind::GeodesicAction
            | LagrangianKind::TokenSelection { map: None, .. } => (vec![0.0; x.len()], false),
            LagrangianKind::KineticPotential => {
                let mu = ctx.reference().configuration_at(t);
                (grad_potential(x, &mu, ctx.beta), false)
            }
            LagrangianKind::StronglyConvexTest { anchor, mu_sc } => (
                sub(x, anchor.as_slice()).into_iter().map(|c| mu_sc * c).collect(),
                false,
            ),
            LagrangianKind::TokenSelection { map: Some(_), .. } => (fd_gradient(|y| self.value(ctx, t, y, v), x), true),
        }
    }

    /// `∂L/∂v` and whether it came from finite differences.
    pub fn grad_v(&self, ctx: &ActionContext<'_>, t: f64, x: &[f64], v: &[f64]) -> (Vec<f64>, bool) {
        match self {
            LagrangianKind::TransformerAction => {
                let d = ctx.reference().token_velocity(ctx.token, t);
                (sub(v, &d), false)
            }
            LagrangianKind::KineticPotential | LagrangianKind::GeodesicAction => {
                (v.iter().map(|c| 2.0 * c).collect(), false)
            }
            LagrangianKind::TokenSelection { target, map: None } => {
                let vs = target.token_velocity(ctx.token, t);
                (sub(v, &vs).into_iter().map(|c| 2.0 * c).collect(), false)
            }
            LagrangianKind::StronglyConvexTest { .. } => (v.to_vec(), false),
            LagrangianKind::TokenSelection { map: Some(_), .. } => (fd_gradient(|w| self.value(ctx, t, x, w), v), true),
        }
    }
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + FD_EPS;
            let fp = f(&y);
            y[i] = x[i] - FD_EPS;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Time-dependent data a Lagrangian is evaluated against.
#[derive(Clone, Copy)]
pub struct ActionContext<'a> {
    pub reference: Option<&'a Trajectory>,
    pub token: usize,
    pub beta: f64,
}

impl<'a> ActionContext<'a> {
    pub fn new(reference: &'a Trajectory, token: usize, beta: f64) -> Self {
        Self {
            reference: Some(reference),
            token,
            beta,
        }
    }

    /// No reference trajectory: enough for geodesic and harness Lagrangians.
    pub fn free(beta: f64) -> Self {
        Self {
            reference: None,
            token: 0,
            beta,
        }
    }

    fn reference(&self) -> &'a Trajectory {
        self.reference.expect("checked before evaluation")
    }
}

fn check_grid(tr: &Trajectory, dim: usize, duration: f64) -> Result<()> {
    check_dim(tr.dim(), dim)?;
    if (tr.duration() - duration).abs() > 1e-9 * duration.max(1.0) {
        return Err(Error::GridMismatch(format!(
            "path spans {duration} but the trajectory spans {}",
            tr.duration()
        )));
    }
    Ok(())
}

/// Composite midpoint rule on `[0, T]` with step `q`.
pub fn midpoint_quadrature<F>(duration: f64, q: f64, f: F) -> Result<f64>
where
    F: Fn(f64) -> f64 + Sync,
{
    let n = step_count(duration, q)?;
    let vals: Vec<f64> = (0..n).into_par_iter().map(|k| f((k as f64 + 0.5) * q)).collect();
    Ok(q * pairwise_sum(&vals))
}

fn check_quad_dt(quad_dt: f64, grids: &[f64]) -> Result<()> {
    if let Some(g) = grids.iter().find(|g| quad_dt > **g * (1.0 + 1e-12)) {
        return Err(Error::GridMismatch(format!(
            "quad_dt {quad_dt} exceeds the grid spacing {g}"
        )));
    }
    Ok(())
}

/// `∫₀ᵀ L(t, h, ḣ) dt` plus the boundary term of `kind`.
pub fn action(kind: &LagrangianKind<'_>, h: &dyn Curve, ctx: &ActionContext<'_>, quad_dt: f64) -> Result<f64> {
    let duration = h.duration();
    kind.check(ctx, h.dim(), duration)?;
    let mut grids = Vec::new();
    if let Some(r) = ctx.reference {
        grids.push(r.dt());
    }
    if let LagrangianKind::TokenSelection { target, .. } = kind {
        grids.push(target.dt());
    }
    check_quad_dt(quad_dt, &grids)?;
    let integral = midpoint_quadrature(duration, quad_dt, |t| {
        kind.value(ctx, t, &h.position(t), &h.velocity(t))
    })?;
    Ok(integral + kind.boundary(ctx, &h.position(0.0)))
}

fn check_beta(reference: &Trajectory, beta: f64) -> Result<()> {
    match reference.params() {
        Some(p) if p.beta() != beta => Err(Error::InvalidParameter(format!(
            "beta {beta} differs from the reference trajectory's beta {}",
            p.beta()
        ))),
        _ => Ok(()),
    }
}

/// Transformer action of a path `h` against token `token` of `reference`.
pub fn transformer_action(h: &dyn Curve, reference: &Trajectory, token: usize, beta: f64, quad_dt: f64) -> Result<f64> {
    check_beta(reference, beta)?;
    action(
        &LagrangianKind::TransformerAction,
        h,
        &ActionContext::new(reference, token, beta),
        quad_dt,
    )
}

/// Midpoint-discretized Transformer action on the grid of `h`:
///
/// ```text
/// Δt Σᵢ ( ½‖(hᵢ₊₁−hᵢ)/Δt‖² − ⟨(hᵢ₊₁−hᵢ)/Δt, D(x_{i+½})⟩ ) + ½‖h₀ − x₀‖²
/// ```
///
/// The midpoint states are snapshots of `reference`, whose spacing must be
/// `Δt/(2j)` for an integer `j ≥ 1`.
pub fn discrete_action(h: &PathSample, reference: &Trajectory, token: usize, beta: f64) -> Result<f64> {
    check_beta(reference, beta)?;
    check_grid(reference, h.dim(), h.duration())?;
    if token >= reference.n_tokens() {
        return Err(Error::InvalidParameter(format!("token {token} out of range")));
    }
    let ratio = h.dt() / reference.dt();
    let two_j = ratio.round();
    if two_j < 2.0 || (ratio - two_j).abs() > 1e-9 * two_j || !(two_j as usize).is_multiple_of(2) {
        return Err(Error::GridMismatch(format!(
            "reference spacing {} is not Δt/(2j) for Δt = {}",
            reference.dt(),
            h.dt()
        )));
    }
    let j = two_j as usize / 2;
    let dt = h.dt();
    let terms: Vec<f64> = (0..h.steps())
        .map(|i| {
            let slope: Vec<f64> = sub(h.value(i + 1), h.value(i)).into_iter().map(|c| c / dt).collect();
            let d = reference.velocity_at((2 * i + 1) * j, token);
            0.5 * norm_sq(&slope) - dot(&slope, d)
        })
        .collect();
    let x0 = reference.snapshot(0).point(token);
    Ok(dt * pairwise_sum(&terms) + 0.5 * norm_sq(&sub(h.value(0), x0.as_slice())))
}

/// Actions of every token of a trajectory, and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PerTokenActions {
    pub per_token: Vec<f64>,
    pub mean: f64,
}

impl PerTokenActions {
    fn new(per_token: Vec<f64>) -> Self {
        let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
        Self { per_token, mean }
    }

    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }
}

/// `∫₀ᵀ ‖ẋᵢ‖² + Φ(xᵢ)` for every token `i`, with `Φ` taken against the
/// trajectory's own ensemble.
pub fn kinetic_potential_action(x: &Trajectory, beta: f64, quad_dt: f64) -> Result<PerTokenActions> {
    check_quad_dt(quad_dt, &[x.dt()])?;
    let n = step_count(x.duration(), quad_dt)?;
    let node_values: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = (k as f64 + 0.5) * quad_dt;
            let mu = x.configuration_at(t);
            (0..x.n_tokens())
                .map(|i| {
                    let p = x.token_position(i, t);
                    norm_sq(&x.token_velocity(i, t)) + potential(&p, &mu, beta)
                })
                .collect()
        })
        .collect();
    Ok(per_token_sums(&node_values, x.n_tokens(), quad_dt))
}

fn per_token_sums(node_values: &[Vec<f64>], n_tokens: usize, q: f64) -> PerTokenActions {
    let per_token = (0..n_tokens)
        .map(|i| {
            let col: Vec<f64> = node_values.iter().map(|row| row[i]).collect();
            q * pairwise_sum(&col)
        })
        .collect();
    PerTokenActions::new(per_token)
}

/// `∫₀ᵀ ‖ẋᵢ‖² dt` for every token: the extrinsic form of `∫ g(ẋ, ẋ)`.
pub fn geodesic_action(x: &Trajectory, quad_dt: f64) -> Result<PerTokenActions> {
    check_quad_dt(quad_dt, &[x.dt()])?;
    let n = step_count(x.duration(), quad_dt)?;
    let node_values: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = (k as f64 + 0.5) * quad_dt;
            (0..x.n_tokens()).map(|i| norm_sq(&x.token_velocity(i, t))).collect()
        })
        .collect();
    Ok(per_token_sums(&node_values, x.n_tokens(), quad_dt))
}

/// Token-selection loss of token `token` of `x` against the same token of
/// `target`:
///
/// ```text
/// ∫₀ᵀ ‖DF(x)ẋ − DF(x*)ẋ*‖² dt + ½‖x(0) − x*(0)‖²
/// ```
pub fn token_selection_action(
    x: &Trajectory,
    token: usize,
    target: &Trajectory,
    map: Option<&dyn FeatureMap>,
    beta: f64,
    quad_dt: f64,
) -> Result<f64> {
    if x.dt() != target.dt() || x.steps() != target.steps() {
        return Err(Error::GridMismatch("trajectory and target use different grids".into()));
    }
    let kind = LagrangianKind::TokenSelection { target, map };
    action(
        &kind,
        &x.token_path(token),
        &ActionContext::new(x, token, beta),
        quad_dt,
    )
}

/// Fixed ensemble and integration settings for token-selection searches:
/// token `token` of `config` is replaced by a candidate start and the
/// ensemble is integrated.
#[derive(Debug, Clone)]
pub struct SelectionSetup {
    pub config: TokenConfiguration,
    pub token: usize,
    pub params: AttentionParams,
    pub duration: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub quad_dt: f64,
}

impl SelectionSetup {
    pub fn trajectory_from(&self, start: &UnitVector) -> Result<Trajectory> {
        let cfg = self.config.replace(self.token, start.clone())?;
        integrate(&cfg, &self.params, self.duration, self.dt, self.scheme)
    }

    pub fn action(&self, start: &UnitVector, target: &Trajectory, map: Option<&dyn FeatureMap>) -> Result<f64> {
        let x = self.trajectory_from(start)?;
        token_selection_action(&x, self.token, target, map, self.params.beta(), self.quad_dt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: usize,
    pub values: Vec<f64>,
}

/// Exhaustive search over candidate starts for the smallest token-selection
/// loss against the trajectory started at `target_start`. Ties go to the
/// lowest index.
pub fn token_selection_grid_search(
    setup: &SelectionSetup,
    candidates: &[UnitVector],
    target_start: &UnitVector,
    map: Option<&dyn FeatureMap>,
) -> Result<GridSearchResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no candidates".into()));
    }
    let target = setup.trajectory_from(target_start)?;
    let values = candidates
        .par_iter()
        .map(|c| setup.action(c, &target, map))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    Ok(GridSearchResult { best, values })
}

/// Errors `|𝒜 − Ã_Δt|` over a list of step sizes and the fitted log-log slope.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureStudy {
    pub truth: f64,
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    /// `None` when every error is at rounding level.
    pub slope: Option<f64>,
}

impl QuadratureStudy {
    pub fn is_degenerate(&self) -> bool {
        self.slope.is_none()
    }

    /// CSV `dt,abs_error,log10_dt,log10_err` with a trailing `# slope=` line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dt,abs_error,log10_dt,log10_err")?;
        for (dt, e) in self.dts.iter().zip(&self.errors) {
            writeln!(
                w,
                "{},{},{},{}",
                crate::fmt_f64(*dt),
                crate::fmt_f64(*e),
                crate::fmt_f64(dt.log10()),
                crate::fmt_f64(e.log10())
            )?;
        }
        match self.slope {
            Some(s) => writeln!(w, "# slope={}", crate::fmt_f64(s)),
            None => writeln!(w, "# slope=degenerate"),
        }
    }
}

/// Compares the discrete action on each grid in `dts` with a Richardson
/// extrapolated continuous action (midpoint quadrature at `q` and `2q`,
/// `q = min(dts)/100`).
///
/// `reference` must be sampled at spacing `min(dts)/2` or a divisor of it.
pub fn quadrature_error_study(
    h: &dyn Curve,
    reference: &Trajectory,
    token: usize,
    beta: f64,
    dts: &[f64],
) -> Result<QuadratureStudy> {
    if dts.len() < 2 {
        return Err(Error::InvalidParameter("need at least two step sizes".into()));
    }
    if dts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("step sizes must be strictly decreasing".into()));
    }
    let dt_min = dts[dts.len() - 1];
    let q = dt_min / 100.0;
    let fine = transformer_action(h, reference, token, beta, q)?;
    let coarse = transformer_action(h, reference, token, beta, 2.0 * q)?;
    let truth = (4.0 * fine - coarse) / 3.0;
    let mut errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        let sample = PathSample::from_curve(h, dt)?;
        errors.push((truth - discrete_action(&sample, reference, token, beta)?).abs());
    }
    let slope = if errors.iter().all(|e| *e <= DEGENERATE_ERROR) {
        None
    } else {
        let lx: Vec<f64> = dts.iter().map(|d| d.log10()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.max(f64::MIN_POSITIVE).log10()).collect();
        ls_slope(&lx, &ly)
    };
    Ok(QuadratureStudy {
        truth,
        dts: dts.to_vec(),
        errors,
        slope,
    })
}
