//! Experiment runner behind the `sphereflow` binary.
//!
//! A configuration is a flat `key=value` file (`#` starts a comment) plus
//! `--key value` overrides. Each experiment declares its fields; unknown
//! keys are rejected. Outputs go to `<out_dir>/<experiment>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{integrate, AttentionParams, Scheme, TokenConfiguration, Trajectory};
use crate::error::Error;
use crate::functionals::{quadrature_error_study, LagrangianKind};
use crate::linalg::{dot, ls_slope};
use crate::measures::{
    brute_force_dirac_optimality, epsilon_optimal_set_measure, probe_mean_condition, theorem7_certificate,
    write_probes_csv, BallBoundReport, BallBoundSetup, ThirdDerivative,
};
use crate::path::{step_count, FourierPath};
use crate::sphere::{exp_map, normalize, sample_geodesic_ball, sample_uniform, TangentVector, UnitVector};
use crate::variational::{el_residual, energy_landscape, geodesic_residual_pairing, projected_el_residual};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "SPHEREFLOW_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Landscape,
    QuadOrder,
    ElResidual,
    BallBound,
    Dirac,
    Theorem7,
    GeodesicPairing,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Simulate,
        Experiment::Landscape,
        Experiment::QuadOrder,
        Experiment::ElResidual,
        Experiment::BallBound,
        Experiment::Dirac,
        Experiment::Theorem7,
        Experiment::GeodesicPairing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Landscape => "landscape",
            Experiment::QuadOrder => "quad-order",
            Experiment::ElResidual => "el-residual",
            Experiment::BallBound => "ball-bound",
            Experiment::Dirac => "dirac",
            Experiment::Theorem7 => "theorem7",
            Experiment::GeodesicPairing => "geodesic-pairing",
        }
    }

    fn fields(self) -> &'static [Field] {
        use Kind::*;
        const SIMULATE: &[Field] = &[
            Field::req("d", Int(2)),
            Field::req("n", Int(1)),
            Field::req("beta", Positive),
            Field::opt("T", Positive, "1"),
            Field::opt("dt", Positive, "0.001"),
            Field::opt("scheme", Choice(&["euler", "midpoint"]), "midpoint"),
            Field::seed(),
        ];
        const LANDSCAPE: &[Field] = &[
            Field::req("d", Int(2)),
            Field::opt("n", Int(1), "8"),
            Field::opt("beta", Positive, "1"),
            Field::opt("T", Positive, "1"),
            Field::opt("dt", Positive, "0.01"),
            Field::opt("quad_dt", Positive, "0.0025"),
            Field::opt("trials", Int(2), "200"),
            Field::opt("sigma_min", Positive, "0.005"),
            Field::opt("sigma_max", Positive, "0.5"),
            Field::opt("token", Int(0), "0"),
            Field::seed(),
        ];
        const QUAD_ORDER: &[Field] = &[
            Field::opt("d", Int(2), "3"),
            Field::opt("n", Int(1), "8"),
            Field::opt("beta", Positive, "1"),
            Field::opt("T", Positive, "1"),
            Field::opt("dt_list", List, "0.125,0.0625,0.03125,0.015625,0.0078125,0.00390625"),
            Field::opt("modes", Int(1), "3"),
            Field::opt("amplitude", Positive, "0.3"),
            Field::opt("token", Int(0), "0"),
            Field::seed(),
        ];
        const EL_RESIDUAL: &[Field] = &[
            Field::opt("d", Int(2), "3"),
            Field::opt("n", Int(1), "4"),
            Field::opt("beta", Positive, "1"),
            Field::opt("T", Positive, "1"),
            Field::opt("dt", Positive, "0.01"),
            Field::opt("lagrangian", Choice(&["kinetic", "geodesic", "transformer"]), "kinetic"),
            Field::opt("projected", Choice(&["true", "false"]), "true"),
            Field::opt("token", Int(0), "0"),
            Field::seed(),
        ];
        const BALL_BOUND: &[Field] = &[
            Field::opt("d", Int(2), "3"),
            Field::req("epsilon", Positive),
            Field::opt("mu_sc", Positive, "1"),
            Field::opt("alpha", NonNegative, "0"),
            Field::opt("R", Positive, "1"),
            Field::opt("M", FloatOrEstimate, "0"),
            Field::opt("beta", Positive, "1"),
            Field::opt("T", Positive, "1"),
            Field::opt("dt", Positive, "0.01"),
            Field::opt("samples", Int(1), "10000"),
            Field::seed(),
        ];
        const DIRAC: &[Field] = &[
            Field::opt("d", Int(2), "3"),
            Field::opt("grid", Int(1), "100"),
            Field::opt("mixtures", Int(1), "1000"),
            Field::seed(),
        ];
        const THEOREM7: &[Field] = &[
            Field::opt("d", Int(2), "3"),
            Field::opt("epsilon", Positive, "0.1"),
            Field::opt("clouds", Int(1), "100"),
            Field::opt("particles", Int(1), "10"),
            Field::opt("probes", Int(0), "20"),
            Field::seed(),
        ];
        const GEODESIC_PAIRING: &[Field] = &[
            Field::opt("T", Positive, "1"),
            Field::opt("dt", Positive, "0.001"),
            Field::opt("quad_dt", Positive, "0.001"),
            Field::opt("s_max", Positive, "0.3"),
            Field::opt("levels", Int(2), "7"),
        ];
        match self {
            Experiment::Simulate => SIMULATE,
            Experiment::Landscape => LANDSCAPE,
            Experiment::QuadOrder => QUAD_ORDER,
            Experiment::ElResidual => EL_RESIDUAL,
            Experiment::BallBound => BALL_BOUND,
            Experiment::Dirac => DIRAC,
            Experiment::Theorem7 => THEOREM7,
            Experiment::GeodesicPairing => GEODESIC_PAIRING,
        }
    }

    fn plotted(self) -> Option<&'static str> {
        match self {
            Experiment::Landscape => Some("plot 'landscape.csv' using 3:5 with points title 'action vs L2 distance'"),
            Experiment::QuadOrder => {
                Some("set logscale xy\nplot 'quad_order.csv' using 1:2 with linespoints title 'error'")
            }
            Experiment::ElResidual => Some("plot 'residual.csv' using 1:(column('norm')) with lines title 'residual'"),
            Experiment::GeodesicPairing => {
                Some("set logscale xy\nplot 'pairing.csv' using 1:(abs($2)) with linespoints title 'pairing'")
            }
            _ => None,
        }
    }
}

impl FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment '{s}'"))
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Integer with a minimum.
    Int(u64),
    Positive,
    NonNegative,
    /// Comma-separated positive numbers.
    List,
    Choice(&'static [&'static str]),
    FloatOrEstimate,
}

#[derive(Debug, Clone, Copy)]
struct Field {
    key: &'static str,
    kind: Kind,
    default: Option<&'static str>,
}

impl Field {
    const fn req(key: &'static str, kind: Kind) -> Self {
        Self {
            key,
            kind,
            default: None,
        }
    }
    const fn opt(key: &'static str, kind: Kind, default: &'static str) -> Self {
        Self {
            key,
            kind,
            default: Some(default),
        }
    }
    const fn seed() -> Self {
        Self::req("seed", Kind::Int(0))
    }

    fn check(&self, value: &str) -> Option<String> {
        let bad = |why: &str| Some(format!("invalid value '{value}' for '{}': {why}", self.key));
        match self.kind {
            Kind::Int(min) => match value.parse::<u64>() {
                Ok(v) if v >= min => None,
                Ok(_) => bad(&format!("must be at least {min}")),
                Err(_) => bad("expected a nonnegative integer"),
            },
            Kind::Positive => match value.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => None,
                _ => bad("expected a positive number"),
            },
            Kind::NonNegative => match value.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => None,
                _ => bad("expected a nonnegative number"),
            },
            Kind::List => {
                let parsed: Result<Vec<f64>, _> = value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                match parsed {
                    Ok(v) if v.len() >= 2 && v.iter().all(|x| *x > 0.0 && x.is_finite()) => {
                        if v.windows(2).all(|w| w[1] < w[0]) {
                            None
                        } else {
                            bad("values must be strictly decreasing")
                        }
                    }
                    _ => bad("expected at least two comma-separated positive numbers"),
                }
            }
            Kind::Choice(options) => {
                if options.contains(&value) {
                    None
                } else {
                    bad(&format!("expected one of {}", options.join(", ")))
                }
            }
            Kind::FloatOrEstimate => {
                if value == "estimate" || value.parse::<f64>().is_ok_and(|v| v.is_finite()) {
                    None
                } else {
                    bad("expected a number or 'estimate'")
                }
            }
        }
    }
}

/// Keys accepted by every experiment.
const COMMON: &[Field] = &[
    Field::opt("out_dir", Kind::Choice(&[]), "out"),
    Field::opt("workers", Kind::Int(1), "4"),
];

/// A parsed experiment configuration: the experiment and its raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('-', "_")
}

/// Parses `key=value` lines. Blank lines and `#` comments are ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Turns `--key value` pairs into a map.
pub fn parse_overrides(args: &[String]) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        if !flag.starts_with("--") || flag.len() < 3 {
            return Err(format!("expected --key, found '{flag}'"));
        }
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("missing value for '{flag}'"))?;
                (flag.clone(), v.clone())
            }
        };
        out.insert(normalize_key(&key), value);
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Merges file values, overrides (which win) and the seed fallback.
    pub fn from_sources(
        experiment: Experiment,
        file: BTreeMap<String, String>,
        overrides: BTreeMap<String, String>,
        env_seed: Option<String>,
    ) -> Self {
        let mut values = file;
        values.extend(overrides);
        if !values.contains_key("seed") {
            if let Some(s) = env_seed {
                if experiment.fields().iter().any(|f| f.key == "seed") {
                    values.insert("seed".into(), s);
                }
            }
        }
        Self { experiment, values }
    }

    fn field(&self, key: &str) -> Option<&Field> {
        self.experiment.fields().iter().chain(COMMON).find(|f| f.key == key)
    }

    fn raw(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => self
                .field(key)
                .and_then(|f| f.default)
                .expect("validated configuration"),
        }
    }

    fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated configuration")
    }

    fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated configuration")
    }

    fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated configuration")
    }

    fn list(&self, key: &str) -> Vec<f64> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().expect("validated configuration"))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir")).join(self.experiment.name())
    }

    pub fn workers(&self) -> usize {
        self.usize("workers")
    }

    /// The effective configuration, defaults included, as `key=value` lines.
    pub fn echo(&self) -> String {
        let mut keys: Vec<&str> = self.experiment.fields().iter().chain(COMMON).map(|f| f.key).collect();
        keys.sort_unstable();
        keys.into_iter()
            .filter(|k| self.values.contains_key(*k) || self.field(k).is_some_and(|f| f.default.is_some()))
            .map(|k| format!("{k}={}\n", self.raw(k)))
            .collect()
    }
}

/// Diagnostics for a configuration; empty iff [`run`] would accept it.
pub fn validate(config: &ExperimentConfig) -> Vec<String> {
    let exp = config.experiment;
    let mut diags = Vec::new();
    for key in config.values.keys() {
        if config.field(key).is_none() {
            diags.push(format!("unknown key '{key}' for {exp}"));
        }
    }
    for f in exp.fields().iter().chain(COMMON) {
        match config.values.get(f.key) {
            None if f.default.is_none() => diags.push(format!("missing required field '{}' for {exp}", f.key)),
            Some(v) if f.key != "out_dir" => diags.extend(f.check(v)),
            Some(v) if v.is_empty() => diags.push("invalid value '' for 'out_dir': expected a path".into()),
            _ => {}
        }
    }
    if !diags.is_empty() {
        return diags;
    }
    let divides = |total_key: &str, step_key: &str, diags: &mut Vec<String>| {
        let (total, step) = (config.f64(total_key), config.f64(step_key));
        if let Err(e) = step_count(total, step) {
            diags.push(format!(
                "{}: {total_key}={total} is not a multiple of {step_key}={step} ({e})",
                e.name()
            ));
        } else if step > total {
            diags.push(format!("{step_key}={step} exceeds {total_key}={total}"));
        }
    };
    match exp {
        Experiment::Simulate | Experiment::ElResidual | Experiment::BallBound => {
            divides("T", "dt", &mut diags);
        }
        Experiment::Landscape => {
            divides("T", "dt", &mut diags);
            divides("dt", "quad_dt", &mut diags);
            if config.f64("sigma_min") >= config.f64("sigma_max") {
                diags.push("sigma_min must be below sigma_max".into());
            }
            if config.usize("token") >= config.usize("n") {
                diags.push("token must be below n".into());
            }
        }
        Experiment::QuadOrder => {
            let total = config.f64("T");
            for dt in config.list("dt_list") {
                if let Err(e) = step_count(total, dt) {
                    diags.push(format!(
                        "{}: T={total} is not a multiple of dt_list entry {dt}",
                        e.name()
                    ));
                }
            }
            if config.usize("token") >= config.usize("n") {
                diags.push("token must be below n".into());
            }
        }
        Experiment::GeodesicPairing => {
            divides("T", "dt", &mut diags);
            divides("quad_dt", "dt", &mut diags);
            if diags.is_empty() && step_count(config.f64("T"), config.f64("quad_dt")).is_err() {
                diags.push("StepCountMismatch: quad_dt must divide T".into());
            }
            if config.f64("s_max") > 1.0 {
                diags.push("s_max must not exceed 1".into());
            }
        }
        _ => {}
    }
    if exp == Experiment::ElResidual && config.usize("token") >= config.usize("n") {
        diags.push("token must be below n".into());
    }
    if exp == Experiment::BallBound && config.f64("R") > std::f64::consts::PI {
        diags.push("R must not exceed pi".into());
    }
    diags
}

/// Failure of an experiment run.
#[derive(Debug)]
pub enum RunError {
    Invalid(Vec<String>),
    Numerical(Error),
    Other(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Invalid(d) => write!(f, "invalid configuration: {}", d.join("; ")),
            RunError::Numerical(e) => write!(f, "numerical guard {} failed: {e}", e.name()),
            RunError::Other(m) => f.write_str(m),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        if e.is_numerical_guard() {
            RunError::Numerical(e)
        } else {
            RunError::Other(format!("{}: {e}", e.name()))
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Other(format!("io error: {e}"))
    }
}

/// Files written by a run, relative to its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

/// Validates `config`, executes the experiment in a pool of
/// `workers` threads, and writes its outputs plus `manifest.txt`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let diags = validate(config);
    if !diags.is_empty() {
        return Err(RunError::Invalid(diags));
    }
    let dir = config.out_dir();
    fs::create_dir_all(&dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers())
        .build()
        .map_err(|e| RunError::Other(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let mut files = pool.install(|| execute(config, &dir))?;
    if let Some(script) = config.experiment.plotted() {
        fs::write(
            dir.join("plot.gp"),
            format!("set datafile separator ','\nset key autotitle columnhead\n{script}\n"),
        )?;
        files.push("plot.gp".into());
    }
    let mut manifest = format!(
        "experiment={}\nversion={}\nwall_clock_seconds={:.3}\n",
        config.experiment,
        env!("CARGO_PKG_VERSION"),
        start.elapsed().as_secs_f64()
    );
    manifest.push_str("# config\n");
    manifest.push_str(&config.echo());
    fs::write(dir.join("manifest.txt"), manifest)?;
    files.push("manifest.txt".into());
    Ok(RunOutput { dir, files })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn random_configuration(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<TokenConfiguration, Error> {
    TokenConfiguration::uniform((0..n).map(|_| sample_uniform(d, rng)).collect::<Result<Vec<_>, _>>()?)
}

fn seeded_trajectory(config: &ExperimentConfig, dt: f64) -> Result<Trajectory, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.u64("seed"));
    let cfg = random_configuration(config.usize("n"), config.usize("d"), &mut rng)?;
    let params = AttentionParams::new(config.f64("beta"))?;
    integrate(&cfg, &params, config.f64("T"), dt, Scheme::Midpoint)
}

fn execute(config: &ExperimentConfig, dir: &Path) -> Result<Vec<String>, RunError> {
    let f = crate::fmt_f64;
    match config.experiment {
        Experiment::Simulate => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.u64("seed"));
            let cfg = random_configuration(config.usize("n"), config.usize("d"), &mut rng)?;
            let params = AttentionParams::new(config.f64("beta"))?;
            let scheme: Scheme = config.raw("scheme").parse()?;
            let tr = integrate(&cfg, &params, config.f64("T"), config.f64("dt"), scheme)?;
            let mut w = create(dir, "trajectory.csv")?;
            tr.write_csv(&mut w)?;
            w.flush()?;
            Ok(vec!["trajectory.csv".into()])
        }
        Experiment::Landscape => {
            let base = seeded_trajectory(config, config.f64("dt"))?;
            let trials = config.usize("trials");
            let (lo, hi) = (config.f64("sigma_min"), config.f64("sigma_max"));
            let mut sigmas = vec![0.0];
            let m = trials - 1;
            sigmas.extend((0..m).map(|i| {
                let frac = if m > 1 { i as f64 / (m - 1) as f64 } else { 0.0 };
                lo * (hi / lo).powf(frac)
            }));
            let land = energy_landscape(
                &base,
                config.usize("token"),
                config.f64("beta"),
                &sigmas,
                1,
                config.u64("seed"),
                config.f64("quad_dt"),
            )?;
            let mut w = create(dir, "landscape.csv")?;
            land.write_csv(&mut w)?;
            w.flush()?;
            Ok(vec!["landscape.csv".into()])
        }
        Experiment::QuadOrder => {
            let dts = config.list("dt_list");
            let dt_min = dts.iter().copied().fold(f64::INFINITY, f64::min);
            let reference = seeded_trajectory(config, dt_min / 2.0)?;
            let token = config.usize("token");
            let mut rng = ChaCha8Rng::seed_from_u64(config.u64("seed").wrapping_add(1));
            let h = FourierPath::random(
                reference.snapshot(0).point(token).as_slice(),
                config.f64("T"),
                config.usize("modes"),
                config.f64("amplitude"),
                &mut rng,
            );
            let study = quadrature_error_study(&h, &reference, token, config.f64("beta"), &dts)?;
            let mut w = create(dir, "quad_order.csv")?;
            study.write_csv(&mut w)?;
            w.flush()?;
            Ok(vec!["quad_order.csv".into()])
        }
        Experiment::ElResidual => {
            let tr = seeded_trajectory(config, config.f64("dt"))?;
            let kind = match config.raw("lagrangian") {
                "kinetic" => LagrangianKind::KineticPotential,
                "geodesic" => LagrangianKind::GeodesicAction,
                _ => LagrangianKind::TransformerAction,
            };
            let token = config.usize("token");
            let beta = config.f64("beta");
            let series = if config.raw("projected") == "true" {
                projected_el_residual(&kind, &tr, token, beta)?
            } else {
                el_residual(&kind, &tr, token, beta)?
            };
            let mut w = create(dir, "residual.csv")?;
            series.write_csv(&mut w)?;
            w.flush()?;
            Ok(vec!["residual.csv".into()])
        }
        Experiment::BallBound => {
            let d = config.usize("d");
            let anchor = UnitVector::basis(d, 0)?;
            let mut setup = BallBoundSetup::new(anchor, config.f64("epsilon"));
            setup.mu_sc = config.f64("mu_sc");
            setup.alpha = config.f64("alpha");
            setup.r_cap = config.f64("R");
            setup.m_third = match config.raw("M") {
                "estimate" => ThirdDerivative::Estimate,
                v => ThirdDerivative::Given(v.parse().expect("validated configuration")),
            };
            setup.beta = config.f64("beta");
            setup.horizon = config.f64("T");
            setup.dt = config.f64("dt");
            setup.n_samples = config.usize("samples");
            setup.workers = config.workers();
            setup.seed = config.u64("seed");
            let rep = epsilon_optimal_set_measure(&setup)?;
            let mut text = rep.to_key_value();
            text.push_str(&format!("bound_holds={}\n", rep.bound_holds()));
            fs::write(dir.join("ball_bound.txt"), text)?;
            fs::write(
                dir.join("ball_bound.csv"),
                format!("{}\n{}\n", BallBoundReport::csv_header(), rep.to_csv_row()),
            )?;
            Ok(vec!["ball_bound.txt".into(), "ball_bound.csv".into()])
        }
        Experiment::Dirac => {
            let d = config.usize("d");
            let mut rng = ChaCha8Rng::seed_from_u64(config.u64("seed"));
            let grid = (0..config.usize("grid"))
                .map(|_| sample_uniform(d, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let a = sample_uniform(d, &mut rng)?;
            let b = sample_uniform(d, &mut rng)?;
            let freq = rng.random_range(1.0..4.0);
            let cost = move |x: &UnitVector| {
                (freq * dot(x.as_slice(), a.as_slice())).sin() + 0.5 * dot(x.as_slice(), b.as_slice()).powi(2)
            };
            let rep = brute_force_dirac_optimality(&grid, &cost, config.usize("mixtures"), config.u64("seed"))?;
            let mut w = create(dir, "dirac.csv")?;
            writeln!(
                w,
                "grid,mixtures,dirac_argmin,dirac_min,mixture_min,holds,degenerate_tie"
            )?;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                grid.len(),
                rep.mixtures,
                rep.dirac_argmin,
                f(rep.dirac_min),
                f(rep.mixture_min),
                rep.holds,
                rep.degenerate_tie
            )?;
            w.flush()?;
            Ok(vec!["dirac.csv".into()])
        }
        Experiment::Theorem7 => {
            let d = config.usize("d");
            let eps = config.f64("epsilon");
            let mut rng = ChaCha8Rng::seed_from_u64(config.u64("seed"));
            let a = sample_uniform(d, &mut rng)?;
            // Lipschitz constant 1: the gradient of ⟨x, a⟩ has norm at most 1.
            let cost = move |x: &UnitVector| dot(x.as_slice(), a.as_slice());
            let mut w = create(dir, "theorem7.csv")?;
            writeln!(
                w,
                "cloud,mean_condition,per_particle_condition,energy,bound,inequality_holds"
            )?;
            for c in 0..config.usize("clouds") {
                let xstar = sample_uniform(d, &mut rng)?;
                let cloud = (0..config.usize("particles"))
                    .map(|_| sample_geodesic_ball(&xstar, eps, &mut rng))
                    .collect::<Result<Vec<_>, _>>()?;
                let r = theorem7_certificate(&cloud, &xstar, 1.0, eps, &cost)?;
                writeln!(
                    w,
                    "{c},{},{},{},{},{}",
                    r.mean_condition,
                    r.per_particle_condition,
                    f(r.energy),
                    f(r.bound),
                    r.inequality_holds
                )?;
            }
            w.flush()?;
            let xstar = sample_uniform(d, &mut rng)?;
            let spread = |x: &UnitVector| -dot(x.as_slice(), xstar.as_slice());
            let probes =
                probe_mean_condition(&xstar, 1.0, eps, &spread, config.usize("probes"), 3, config.u64("seed"))?;
            let mut w = create(dir, "probes.csv")?;
            write_probes_csv(&probes, &mut w)?;
            w.flush()?;
            Ok(vec!["theorem7.csv".into(), "probes.csv".into()])
        }
        Experiment::GeodesicPairing => {
            let (t_end, dt, q) = (config.f64("T"), config.f64("dt"), config.f64("quad_dt"));
            let levels = config.usize("levels");
            let s_max = config.f64("s_max");
            let scales: Vec<f64> = (0..levels).map(|i| s_max / 2f64.powi(i as i32)).collect();
            let mut values = Vec::with_capacity(levels);
            for s in &scales {
                let (z, xstar) = bump_pair(*s, t_end, dt)?;
                values.push(geodesic_residual_pairing(&z, &xstar, 0, q)?);
            }
            let lx: Vec<f64> = scales.iter().map(|s| s.log10()).collect();
            let ly: Vec<f64> = values.iter().map(|v| v.abs().max(f64::MIN_POSITIVE).log10()).collect();
            let mut w = create(dir, "pairing.csv")?;
            writeln!(w, "s,pairing,log10_s,log10_abs_pairing")?;
            for (i, s) in scales.iter().enumerate() {
                writeln!(w, "{},{},{},{}", f(*s), f(values[i]), f(lx[i]), f(ly[i]))?;
            }
            match ls_slope(&lx, &ly) {
                Some(p) => writeln!(w, "# exponent={}", f(p))?,
                None => writeln!(w, "# exponent=degenerate")?,
            }
            w.flush()?;
            Ok(vec!["pairing.csv".into()])
        }
    }
}

/// A unit-speed great circle `x*` in the (e₀, e₁) plane and its
/// perturbation `z = exp_{x*}(s·sin(πt/T)·e₂)`, sampled on a grid of `dt`.
pub fn bump_pair(s: f64, duration: f64, dt: f64) -> Result<(Trajectory, Trajectory), Error> {
    let steps = step_count(duration, dt)?;
    let mut xs = Vec::with_capacity(steps + 1);
    let mut zs = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let base = normalize(&[t.cos(), t.sin(), 0.0])?;
        let h = TangentVector::new(
            base.clone(),
            vec![0.0, 0.0, s * (std::f64::consts::PI * t / duration).sin()],
        )?;
        zs.push(TokenConfiguration::uniform(vec![exp_map(&base, &h)?])?);
        xs.push(TokenConfiguration::uniform(vec![base])?);
    }
    Ok((Trajectory::from_samples(dt, zs)?, Trajectory::from_samples(dt, xs)?))
}
