//! Config-driven front end: hypothesis checks, single steering runs,
//! Monte-Carlo batches, and noise-only sampling.
//!
//! The config format is sectioned `key = value` text. Unknown keys are hard
//! errors with the offending line number, since a silently ignored
//! misspelled tolerance is the classic failure mode. Floats in CSV output
//! are serialized with 17 significant digits so identical runs are
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::control::{steer, ControlError, SteerParams, SteeringResult};
use crate::fbm::{derive_seed, FgnMethod, FgnSampler, HurstParam};
use crate::model::{
    hypothesis_report, DeclaredConstants, FieldMap, HistoryKernel, HypothesisReport, Impulse,
    ImpulseMap, KernelXi, ModelError, ProblemSpec, ProblemSpecParams, ScalarMap, SigmaSpec,
    TimeProfile,
};
use crate::phase_space::{ExpTerm, InitialFunction, PhaseError, PhaseWeight};
use crate::solver::{sample_noise, Grid, SolverError, SolverParams, Trajectory};
use crate::spectral::{FracPower, SpectralError, SpectralVector};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("config: {0}")]
    ConfigGeneral(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("noise sampling: {0}")]
    Fbm(#[from] crate::fbm::FbmError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

fn cfg_err(line: usize, msg: impl Into<String>) -> CliError {
    CliError::Config {
        line,
        msg: msg.into(),
    }
}

/// 17 significant digits, fixed scientific form: the byte-reproducible
/// float serialization used by every CSV and JSON writer here.
pub fn fmt_float(x: f64) -> String {
    format!("{:.16e}", x)
}

#[derive(Debug, Clone)]
enum LambdaRaw {
    Constant(f64),
    Power { amp: f64, exponent: f64 },
    List(Vec<f64>),
}

#[derive(Debug, Clone, Default)]
enum FieldRaw {
    #[default]
    Zero,
    Point {
        gain: Option<f64>,
    },
    Kernel {
        amp: Option<f64>,
        decay: Option<f64>,
        xi: KernelXi,
        map: ScalarMap,
    },
}

/// Fully parsed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n_modes: usize,
    pub horizon: f64,
    pub hurst: f64,
    pub beta: f64,
    pub weight_rate: f64,
    pub lambdas: Vec<f64>,
    pub sigma: SigmaSpec,
    pub neutral_g: FieldMap,
    pub drift_f: FieldMap,
    pub c0: f64,
    pub c1: f64,
    pub impulses: Vec<Impulse>,
    pub allow_history_impulses: bool,
    pub phi_terms: Vec<ExpTerm>,
    pub x1: SpectralVector,
    pub declared: DeclaredConstants,
    pub xi_panels: usize,
    pub dt: f64,
    pub inner_tol: f64,
    pub max_inner: usize,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub fgn_method: FgnMethod,
    pub steer_tol: f64,
    pub max_outer: usize,
    pub ridge_epsilon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub write_trajectory: bool,
}

impl ExperimentConfig {
    pub fn to_spec(&self) -> Result<ProblemSpec, CliError> {
        let hurst = HurstParam::new(self.hurst)?;
        let beta = FracPower::new(self.beta)?;
        let weight = PhaseWeight::new(self.weight_rate)?;
        let phi = InitialFunction::new(self.n_modes, self.phi_terms.clone(), None)?;
        Ok(ProblemSpec::new(ProblemSpecParams {
            n_modes: self.n_modes,
            horizon: self.horizon,
            hurst,
            beta,
            neutral_g: self.neutral_g.clone(),
            drift_f: self.drift_f.clone(),
            sigma: self.sigma.clone(),
            lambdas: self.lambdas.clone(),
            b_c0: self.c0,
            b_c1: self.c1,
            impulses: self.impulses.clone(),
            allow_history_impulses: self.allow_history_impulses,
            phi,
            weight,
            declared: self.declared.clone(),
            xi_panels: self.xi_panels,
        })?)
    }

    pub fn grid(&self, spec: &ProblemSpec) -> Result<Grid, CliError> {
        Ok(Grid::for_spec(spec, self.dt)?)
    }

    pub fn steer_params(&self) -> SteerParams {
        SteerParams {
            steer_tol: self.steer_tol,
            max_outer: self.max_outer,
            epsilon_rel: self.ridge_epsilon,
            solver: SolverParams {
                inner_tol: self.inner_tol,
                max_inner: self.max_inner,
            },
        }
    }
}

struct RawConfig {
    n_modes: Option<usize>,
    horizon: Option<f64>,
    hurst: Option<f64>,
    beta: f64,
    weight_rate: f64,
    lambda: LambdaRaw,
    sigma_profile: TimeProfile,
    sigma_weights: Option<Vec<f64>>,
    g: FieldRaw,
    f: FieldRaw,
    c0: f64,
    c1: f64,
    impulses: Vec<(usize, usize, Impulse)>,
    allow_history_impulses: bool,
    phi_terms: Vec<(usize, usize, f64, f64, PhiVectorRaw)>,
    x1: Vec<f64>,
    declared: DeclaredConstants,
    xi_panels: usize,
    dt: Option<f64>,
    inner_tol: f64,
    max_inner: usize,
    picard_tol: f64,
    max_picard: usize,
    fgn_method: FgnMethod,
    steer_tol: f64,
    max_outer: usize,
    ridge_epsilon: f64,
    n_paths: usize,
    master_seed: u64,
    jobs: usize,
    out_dir: PathBuf,
    write_trajectory: bool,
}

#[derive(Debug, Clone)]
enum PhiVectorRaw {
    Mode(usize),
    Vec(Vec<f64>),
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            n_modes: None,
            horizon: None,
            hurst: None,
            beta: 0.75,
            weight_rate: 4.0,
            lambda: LambdaRaw::Constant(1.0),
            sigma_profile: TimeProfile::Zero,
            sigma_weights: None,
            g: FieldRaw::Zero,
            f: FieldRaw::Zero,
            c0: 1.0,
            c1: 0.0,
            impulses: Vec::new(),
            allow_history_impulses: false,
            phi_terms: Vec::new(),
            x1: Vec::new(),
            declared: DeclaredConstants::default(),
            xi_panels: 256,
            dt: None,
            inner_tol: 1e-12,
            max_inner: 60,
            picard_tol: 1e-10,
            max_picard: 200,
            fgn_method: FgnMethod::Circulant,
            steer_tol: 1e-16,
            max_outer: 20,
            ridge_epsilon: 1e-12,
            n_paths: 1,
            master_seed: 1,
            jobs: 1,
            out_dir: PathBuf::from("out"),
            write_trajectory: true,
        }
    }
}

fn parse_f64(value: &str, line: usize) -> Result<f64, CliError> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| cfg_err(line, format!("expected a number, got `{value}`")))
}

fn parse_usize(value: &str, line: usize) -> Result<usize, CliError> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| cfg_err(line, format!("expected a nonnegative integer, got `{value}`")))
}

fn parse_u64(value: &str, line: usize) -> Result<u64, CliError> {
    value
        .trim()
        .parse::<u64>()
        .map_err(|_| cfg_err(line, format!("expected an unsigned integer, got `{value}`")))
}

fn parse_bool(value: &str, line: usize) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(cfg_err(line, format!("expected true/false, got `{other}`"))),
    }
}

fn parse_list(value: &str, line: usize) -> Result<Vec<f64>, CliError> {
    value
        .split(',')
        .map(|v| parse_f64(v, line))
        .collect::<Result<Vec<f64>, _>>()
}

fn parse_scalar_map(value: &str, line: usize) -> Result<ScalarMap, CliError> {
    let parts: Vec<&str> = value.trim().split(':').collect();
    match parts.as_slice() {
        ["zero"] => Ok(ScalarMap::Zero),
        ["linear", g] => Ok(ScalarMap::Linear(parse_f64(g, line)?)),
        ["tanh", g] => Ok(ScalarMap::Tanh(parse_f64(g, line)?)),
        _ => Err(cfg_err(
            line,
            format!("expected zero | linear:G | tanh:G, got `{value}`"),
        )),
    }
}

fn parse_kernel_xi(value: &str, line: usize) -> Result<KernelXi, CliError> {
    let parts: Vec<&str> = value.trim().split(':').collect();
    match parts.as_slice() {
        ["const", c] => Ok(KernelXi::Const(parse_f64(c, line)?)),
        ["sin", k] => Ok(KernelXi::Sin(
            k.parse::<u32>()
                .map_err(|_| cfg_err(line, format!("bad sine index `{k}`")))?,
        )),
        _ => Err(cfg_err(
            line,
            format!("expected const:C | sin:K, got `{value}`"),
        )),
    }
}

fn parse_impulse(value: &str, line: usize) -> Result<Impulse, CliError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() < 2 {
        return Err(cfg_err(line, "impulse needs `TIME KIND [ARGS]`"));
    }
    let time = parse_f64(parts[0], line)?;
    let map = match parts[1] {
        "zero" => ImpulseMap::Zero,
        "scale" => {
            let g = parts
                .get(2)
                .ok_or_else(|| cfg_err(line, "scale impulse needs a gain"))?;
            ImpulseMap::Scale(parse_f64(g, line)?)
        }
        "const" => {
            let v = parts
                .get(2)
                .ok_or_else(|| cfg_err(line, "const impulse needs a coefficient list"))?;
            ImpulseMap::Constant(SpectralVector::from_coeffs(parse_list(v, line)?))
        }
        "history" => {
            if parts.len() < 5 {
                return Err(cfg_err(line, "history impulse needs `AMP DECAY MAP`"));
            }
            ImpulseMap::History {
                amp: parse_f64(parts[2], line)?,
                decay: parse_f64(parts[3], line)?,
                map: parse_scalar_map(parts[4], line)?,
            }
        }
        other => {
            return Err(cfg_err(
                line,
                format!("unknown impulse kind `{other}` (zero | scale | const | history)"),
            ))
        }
    };
    Ok(Impulse { time, map })
}

fn set_field_key(
    field: &mut FieldRaw,
    attr: &str,
    value: &str,
    line: usize,
) -> Result<(), CliError> {
    match attr {
        "form" => {
            *field = match value.trim() {
                "zero" => FieldRaw::Zero,
                "point" => FieldRaw::Point { gain: None },
                "kernel" => FieldRaw::Kernel {
                    amp: None,
                    decay: None,
                    xi: KernelXi::Const(1.0),
                    map: ScalarMap::Linear(1.0),
                },
                other => return Err(cfg_err(line, format!("unknown form `{other}`"))),
            };
            Ok(())
        }
        "gain" => {
            if let FieldRaw::Point { gain } = field {
                *gain = Some(parse_f64(value, line)?);
                Ok(())
            } else {
                Err(cfg_err(line, "gain only applies to form = point"))
            }
        }
        "amp" | "decay" | "xi" | "map" => {
            if let FieldRaw::Kernel { amp, decay, xi, map } = field {
                match attr {
                    "amp" => *amp = Some(parse_f64(value, line)?),
                    "decay" => *decay = Some(parse_f64(value, line)?),
                    "xi" => *xi = parse_kernel_xi(value, line)?,
                    "map" => *map = parse_scalar_map(value, line)?,
                    _ => unreachable!(),
                }
                Ok(())
            } else {
                Err(cfg_err(line, format!("{attr} only applies to form = kernel")))
            }
        }
        other => Err(cfg_err(line, format!("unknown field attribute `{other}`"))),
    }
}

fn finish_field(raw: &FieldRaw, what: &str) -> Result<FieldMap, CliError> {
    match raw {
        FieldRaw::Zero => Ok(FieldMap::Zero),
        FieldRaw::Point { gain } => gain
            .map(FieldMap::PointScale)
            .ok_or_else(|| CliError::ConfigGeneral(format!("{what}_gain is required for point form"))),
        FieldRaw::Kernel { amp, decay, xi, map } => {
            let amp = amp
                .ok_or_else(|| CliError::ConfigGeneral(format!("{what}_amp is required for kernel form")))?;
            let decay = decay
                .ok_or_else(|| CliError::ConfigGeneral(format!("{what}_decay is required for kernel form")))?;
            Ok(FieldMap::Kernel(HistoryKernel {
                amp,
                decay,
                xi: *xi,
                map: *map,
            }))
        }
    }
}

/// Parse config text. Unknown keys, malformed values and missing required
/// keys are errors carrying the offending line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut raw = RawConfig::default();
    let mut section = String::new();
    for (idx, full_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match full_line.find('#') {
            Some(pos) => &full_line[..pos],
            None => full_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(line_no, "unterminated section header"))?;
            section = name.trim().to_string();
            match section.as_str() {
                "problem" | "solver" | "control" | "mc" | "output" => {}
                other => return Err(cfg_err(line_no, format!("unknown section `[{other}]`"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        match section.as_str() {
            "problem" => set_problem_key(&mut raw, key, value, line_no)?,
            "solver" => set_solver_key(&mut raw, key, value, line_no)?,
            "control" => set_control_key(&mut raw, key, value, line_no)?,
            "mc" => set_mc_key(&mut raw, key, value, line_no)?,
            "output" => set_output_key(&mut raw, key, value, line_no)?,
            _ => {
                return Err(cfg_err(
                    line_no,
                    format!("key `{key}` appears before any [section] header"),
                ))
            }
        }
    }
    finish_config(raw)
}

fn set_problem_key(raw: &mut RawConfig, key: &str, value: &str, line: usize) -> Result<(), CliError> {
    if let Some(rest) = key.strip_prefix("impulse_") {
        let idx = rest
            .parse::<usize>()
            .map_err(|_| cfg_err(line, format!("bad impulse index in `{key}`")))?;
        let imp = parse_impulse(value, line)?;
        raw.impulses.push((idx, line, imp));
        return Ok(());
    }
    if let Some(rest) = key.strip_prefix("phi_") {
        let idx = rest
            .parse::<usize>()
            .map_err(|_| cfg_err(line, format!("bad initial-function index in `{key}`")))?;
        let parts: Vec<&str> = value.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(cfg_err(line, "phi term needs `COEFF DECAY mode:K|vec:v1,v2,...`"));
        }
        let coeff = parse_f64(parts[0], line)?;
        let decay = parse_f64(parts[1], line)?;
        let vector = if let Some(m) = parts[2].strip_prefix("mode:") {
            PhiVectorRaw::Mode(parse_usize(m, line)?)
        } else if let Some(v) = parts[2].strip_prefix("vec:") {
            PhiVectorRaw::Vec(parse_list(v, line)?)
        } else {
            return Err(cfg_err(line, "phi vector must be mode:K or vec:v1,v2,..."));
        };
        raw.phi_terms.push((idx, line, coeff, decay, vector));
        return Ok(());
    }
    if let Some(attr) = key.strip_prefix("g_") {
        return set_field_key(&mut raw.g, attr, value, line);
    }
    if let Some(attr) = key.strip_prefix("f_") {
        return set_field_key(&mut raw.f, attr, value, line);
    }
    match key {
        "n_modes" => raw.n_modes = Some(parse_usize(value, line)?),
        "horizon" => raw.horizon = Some(parse_f64(value, line)?),
        "hurst" => raw.hurst = Some(parse_f64(value, line)?),
        "beta" => raw.beta = parse_f64(value, line)?,
        "weight_rate" => raw.weight_rate = parse_f64(value, line)?,
        "lambda" => {
            let parts: Vec<&str> = value.split(':').collect();
            raw.lambda = match parts.as_slice() {
                ["constant", c] => LambdaRaw::Constant(parse_f64(c, line)?),
                ["power", amp, exp] => LambdaRaw::Power {
                    amp: parse_f64(amp, line)?,
                    exponent: parse_f64(exp, line)?,
                },
                ["list", list] => LambdaRaw::List(parse_list(list, line)?),
                _ => {
                    return Err(cfg_err(
                        line,
                        "lambda must be constant:C | power:AMP:EXP | list:v1,v2,...",
                    ))
                }
            };
        }
        "sigma" => {
            let parts: Vec<&str> = value.split(':').collect();
            raw.sigma_profile = match parts.as_slice() {
                ["zero"] => TimeProfile::Zero,
                ["constant", c] => TimeProfile::Const(parse_f64(c, line)?),
                ["exp", amp, rate] => TimeProfile::Exp {
                    amp: parse_f64(amp, line)?,
                    rate: parse_f64(rate, line)?,
                },
                _ => {
                    return Err(cfg_err(
                        line,
                        "sigma must be zero | constant:C | exp:AMP:RATE",
                    ))
                }
            };
        }
        "sigma_mode_weights" => raw.sigma_weights = Some(parse_list(value, line)?),
        "c0" => raw.c0 = parse_f64(value, line)?,
        "c1" => raw.c1 = parse_f64(value, line)?,
        "allow_history_impulses" => raw.allow_history_impulses = parse_bool(value, line)?,
        "x1" => raw.x1 = parse_list(value, line)?,
        "m_g" => raw.declared.m_g = parse_f64(value, line)?,
        "m_g_bar" => raw.declared.m_g_bar = parse_f64(value, line)?,
        "m_f" => raw.declared.m_f = parse_f64(value, line)?,
        "m_f_bar" => raw.declared.m_f_bar = parse_f64(value, line)?,
        "m_b" => raw.declared.m_b = parse_f64(value, line)?,
        "m_w" => raw.declared.m_w = parse_f64(value, line)?,
        "m_k" => raw.declared.m_k = parse_list(value, line)?,
        "m_k_tilde" => raw.declared.m_k_tilde = parse_list(value, line)?,
        "xi_panels" => raw.xi_panels = parse_usize(value, line)?,
        other => {
            return Err(cfg_err(
                line,
                format!("unknown key `{other}` in [problem]"),
            ))
        }
    }
    Ok(())
}

fn set_solver_key(raw: &mut RawConfig, key: &str, value: &str, line: usize) -> Result<(), CliError> {
    match key {
        "dt" => raw.dt = Some(parse_f64(value, line)?),
        "inner_tol" => raw.inner_tol = parse_f64(value, line)?,
        "max_inner" => raw.max_inner = parse_usize(value, line)?,
        "picard_tol" => raw.picard_tol = parse_f64(value, line)?,
        "max_picard" => raw.max_picard = parse_usize(value, line)?,
        "fgn_method" => {
            raw.fgn_method = match value {
                "cholesky" => FgnMethod::Cholesky,
                "circulant" => FgnMethod::Circulant,
                "hosking" => FgnMethod::Hosking,
                other => {
                    return Err(cfg_err(
                        line,
                        format!("unknown fgn_method `{other}` (cholesky | circulant | hosking)"),
                    ))
                }
            };
        }
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [solver]"))),
    }
    Ok(())
}

fn set_control_key(raw: &mut RawConfig, key: &str, value: &str, line: usize) -> Result<(), CliError> {
    match key {
        "steer_tol" => raw.steer_tol = parse_f64(value, line)?,
        "max_outer" => raw.max_outer = parse_usize(value, line)?,
        "ridge_epsilon" => raw.ridge_epsilon = parse_f64(value, line)?,
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [control]"))),
    }
    Ok(())
}

fn set_mc_key(raw: &mut RawConfig, key: &str, value: &str, line: usize) -> Result<(), CliError> {
    match key {
        "n_paths" => raw.n_paths = parse_usize(value, line)?,
        "master_seed" => raw.master_seed = parse_u64(value, line)?,
        "jobs" => raw.jobs = parse_usize(value, line)?.max(1),
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [mc]"))),
    }
    Ok(())
}

fn set_output_key(raw: &mut RawConfig, key: &str, value: &str, line: usize) -> Result<(), CliError> {
    match key {
        "dir" => raw.out_dir = PathBuf::from(value),
        "write_trajectory" => raw.write_trajectory = parse_bool(value, line)?,
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [output]"))),
    }
    Ok(())
}

fn finish_config(raw: RawConfig) -> Result<ExperimentConfig, CliError> {
    let need = |name: &str| CliError::ConfigGeneral(format!("missing required key `{name}`"));
    let n_modes = raw.n_modes.ok_or_else(|| need("[problem] n_modes"))?;
    if n_modes == 0 {
        return Err(CliError::ConfigGeneral("n_modes must be at least 1".into()));
    }
    let horizon = raw.horizon.ok_or_else(|| need("[problem] horizon"))?;
    let hurst = raw.hurst.ok_or_else(|| need("[problem] hurst"))?;
    let dt = raw.dt.ok_or_else(|| need("[solver] dt"))?;
    for (name, v) in [
        ("inner_tol", raw.inner_tol),
        ("picard_tol", raw.picard_tol),
        ("steer_tol", raw.steer_tol),
        ("ridge_epsilon", raw.ridge_epsilon),
    ] {
        if v <= 0.0 {
            return Err(CliError::ConfigGeneral(format!("{name} must be positive")));
        }
    }
    if raw.n_paths == 0 {
        return Err(CliError::ConfigGeneral("n_paths must be at least 1".into()));
    }

    let lambdas = match &raw.lambda {
        LambdaRaw::Constant(c) => vec![*c; n_modes],
        LambdaRaw::Power { amp, exponent } => (1..=n_modes)
            .map(|n| amp * (n as f64).powf(-exponent))
            .collect(),
        LambdaRaw::List(list) => {
            if list.len() != n_modes {
                return Err(CliError::ConfigGeneral(format!(
                    "lambda list has {} entries, n_modes = {}",
                    list.len(),
                    n_modes
                )));
            }
            list.clone()
        }
    };

    let sigma_weights = match raw.sigma_weights {
        None => vec![1.0; n_modes],
        Some(w) => {
            if w.len() != n_modes {
                return Err(CliError::ConfigGeneral(format!(
                    "sigma_mode_weights has {} entries, n_modes = {}",
                    w.len(),
                    n_modes
                )));
            }
            w
        }
    };

    let mut impulses = raw.impulses;
    impulses.sort_by_key(|(idx, _, _)| *idx);
    for (pos, (idx, line, _)) in impulses.iter().enumerate() {
        if *idx != pos + 1 {
            return Err(cfg_err(
                *line,
                format!("impulse indices must be contiguous from 1; found impulse_{idx}"),
            ));
        }
    }
    let impulses: Vec<Impulse> = impulses.into_iter().map(|(_, _, imp)| imp).collect();

    let mut phi_raw = raw.phi_terms;
    phi_raw.sort_by_key(|(idx, _, _, _, _)| *idx);
    let mut phi_terms = Vec::with_capacity(phi_raw.len());
    for (pos, (idx, line, coeff, decay, vector)) in phi_raw.into_iter().enumerate() {
        if idx != pos + 1 {
            return Err(cfg_err(
                line,
                format!("phi indices must be contiguous from 1; found phi_{idx}"),
            ));
        }
        let v = match vector {
            PhiVectorRaw::Mode(m) => {
                if m < 1 || m > n_modes {
                    return Err(cfg_err(line, format!("phi mode {m} outside 1..={n_modes}")));
                }
                SpectralVector::unit(n_modes, m)
            }
            PhiVectorRaw::Vec(list) => {
                if list.len() > n_modes {
                    return Err(cfg_err(line, "phi vector longer than n_modes"));
                }
                let mut c = list;
                c.resize(n_modes, 0.0);
                SpectralVector::from_coeffs(c)
            }
        };
        phi_terms.push(ExpTerm {
            coeff,
            decay,
            vector: v,
        });
    }

    let mut x1 = raw.x1;
    if x1.len() > n_modes {
        return Err(CliError::ConfigGeneral("x1 longer than n_modes".into()));
    }
    x1.resize(n_modes, 0.0);

    Ok(ExperimentConfig {
        n_modes,
        horizon,
        hurst,
        beta: raw.beta,
        weight_rate: raw.weight_rate,
        lambdas,
        sigma: SigmaSpec {
            profile: raw.sigma_profile,
            mode_weights: sigma_weights,
        },
        neutral_g: finish_field(&raw.g, "g")?,
        drift_f: finish_field(&raw.f, "f")?,
        c0: raw.c0,
        c1: raw.c1,
        impulses,
        allow_history_impulses: raw.allow_history_impulses,
        phi_terms,
        x1: SpectralVector::from_coeffs(x1),
        declared: raw.declared,
        xi_panels: raw.xi_panels,
        dt,
        inner_tol: raw.inner_tol,
        max_inner: raw.max_inner,
        picard_tol: raw.picard_tol,
        max_picard: raw.max_picard,
        fgn_method: raw.fgn_method,
        steer_tol: raw.steer_tol,
        max_outer: raw.max_outer,
        ridge_epsilon: raw.ridge_epsilon,
        n_paths: raw.n_paths,
        master_seed: raw.master_seed,
        jobs: raw.jobs,
        out_dir: raw.out_dir,
        write_trajectory: raw.write_trajectory,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct CheckJson {
    pub m: f64,
    pub m_one_minus_beta: f64,
    pub c1: f64,
    pub l: f64,
    pub m_g: f64,
    pub m_f: f64,
    pub m_b: f64,
    pub m_w: f64,
    pub sum_m_k: f64,
    pub sum_m_k_tilde: f64,
    pub nu: f64,
    pub cond32: f64,
    pub cond_example: f64,
    pub m_g_probe: f64,
    pub m_f_probe: f64,
    pub m_b_actual: f64,
    pub m_w_actual: f64,
    pub carath_sup: f64,
    pub carath_q: f64,
    pub nu_ok: bool,
    pub cond32_ok: bool,
    pub example_ok: bool,
    pub all_ok: bool,
}

impl CheckJson {
    fn from_report(report: &HypothesisReport) -> Self {
        let c = &report.constants;
        let e = &report.empirical;
        let v = &report.verdicts;
        Self {
            m: c.m,
            m_one_minus_beta: c.m_one_minus_beta,
            c1: c.c1,
            l: c.l,
            m_g: c.m_g,
            m_f: c.m_f,
            m_b: c.m_b,
            m_w: c.m_w,
            sum_m_k: c.sum_m_k,
            sum_m_k_tilde: c.sum_m_k_tilde,
            nu: c.nu,
            cond32: c.cond32,
            cond_example: c.cond_example,
            m_g_probe: e.m_g_probe,
            m_f_probe: e.m_f_probe,
            m_b_actual: e.m_b_actual,
            m_w_actual: e.m_w_actual,
            carath_sup: e.carath_sup,
            carath_q: e.carath_q,
            nu_ok: v.nu_ok,
            cond32_ok: v.cond32_ok,
            example_ok: v.example_ok,
            all_ok: report.all_ok(),
        }
    }
}

pub struct CheckOutcome {
    pub report: HypothesisReport,
    pub rendered: String,
    pub all_ok: bool,
}

/// Evaluate the hypothesis constants and verdicts; write `check.json` to the
/// output directory and return the rendered table.
pub fn run_check(config: &ExperimentConfig) -> Result<CheckOutcome, CliError> {
    let spec = config.to_spec()?;
    let report = hypothesis_report(&spec);
    let c = &report.constants;
    let e = &report.empirical;
    let verdict = |ok: bool| if ok { "ok" } else { "VIOLATED" };
    let mut out = String::new();
    out.push_str("hypothesis constants\n");
    out.push_str(&format!("  M                = {:.12e}\n", c.m));
    out.push_str(&format!("  M_(1-beta)       = {:.12e}\n", c.m_one_minus_beta));
    out.push_str(&format!("  c1               = {:.12e}\n", c.c1));
    out.push_str(&format!("  l                = {:.12e}\n", c.l));
    out.push_str(&format!(
        "  M_g              = {:.12e}   (declared {:.3e}, probe {:.3e})\n",
        c.m_g, spec.declared.m_g, e.m_g_probe
    ));
    out.push_str(&format!(
        "  M_f              = {:.12e}   (declared {:.3e}, probe {:.3e})\n",
        c.m_f, spec.declared.m_f, e.m_f_probe
    ));
    out.push_str(&format!(
        "  M_b              = {:.12e}   (declared {:.3e}, actual {:.3e})\n",
        c.m_b, spec.declared.m_b, e.m_b_actual
    ));
    out.push_str(&format!(
        "  M_w              = {:.12e}   (declared {:.3e}, actual {:.3e})\n",
        c.m_w, spec.declared.m_w, e.m_w_actual
    ));
    out.push_str(&format!("  sum M_k          = {:.12e}\n", c.sum_m_k));
    out.push_str(&format!("  sum M~_k         = {:.12e}\n", c.sum_m_k_tilde));
    out.push_str(&format!(
        "  drift majorant   = {:.12e} on ball q = {:.3e}\n",
        e.carath_sup, e.carath_q
    ));
    out.push_str("conditions\n");
    out.push_str(&format!(
        "  nu               = {:.12e}   [{}]\n",
        c.nu,
        verdict(report.verdicts.nu_ok)
    ));
    out.push_str(&format!(
        "  steering bound   = {:.12e}   [{}]\n",
        c.cond32,
        verdict(report.verdicts.cond32_ok)
    ));
    out.push_str(&format!(
        "  example bound    = {:.12e}   [{}]\n",
        c.cond_example,
        verdict(report.verdicts.example_ok)
    ));
    fs::create_dir_all(&config.out_dir)?;
    let json = serde_json::to_string_pretty(&CheckJson::from_report(&report))
        .expect("check report serializes");
    fs::write(config.out_dir.join("check.json"), json)?;
    let all_ok = report.all_ok();
    Ok(CheckOutcome {
        report,
        rendered: out,
        all_ok,
    })
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Clone)]
pub struct SteerRecord {
    pub seed: u64,
    pub terminal_error_sq: f64,
    pub energy: f64,
    pub outer_iters: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub regularized: bool,
    pub unreachable_residual: f64,
    pub snapped_impulse_times: Vec<f64>,
    pub error_history: Vec<f64>,
    pub nu: f64,
    pub cond32: f64,
}

fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let n = traj.value(0).dim();
    let mut f = fs::File::create(path)?;
    let mut header = String::from("time,side");
    for m in 1..=n {
        header.push_str(&format!(",c{m}"));
    }
    writeln!(f, "{header}")?;
    for idx in 0..traj.n_nodes() {
        let mut row = format!("{},L", fmt_float(traj.times[idx]));
        for c in traj.value(idx).as_slice() {
            row.push(',');
            row.push_str(&fmt_float(*c));
        }
        writeln!(f, "{row}")?;
        if let Some(post) = traj.post_opt(idx) {
            let mut row = format!("{},R", fmt_float(traj.times[idx]));
            for c in post.as_slice() {
                row.push(',');
                row.push_str(&fmt_float(*c));
            }
            writeln!(f, "{row}")?;
        }
    }
    Ok(())
}

fn write_control_csv(path: &Path, control: &crate::control::ControlSignal) -> Result<(), CliError> {
    let n = control.values[0].dim();
    let mut f = fs::File::create(path)?;
    let mut header = String::from("time");
    for m in 1..=n {
        header.push_str(&format!(",u{m}"));
    }
    header.push_str(",cum_energy");
    writeln!(f, "{header}")?;
    let cum = control.cumulative_energy();
    for (idx, &t) in control.times.iter().enumerate() {
        let mut row = fmt_float(t);
        for c in control.values[idx].as_slice() {
            row.push(',');
            row.push_str(&fmt_float(*c));
        }
        row.push(',');
        row.push_str(&fmt_float(cum[idx]));
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn steer_once(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    grid: &Grid,
    seed: u64,
) -> Result<SteeringResult, CliError> {
    let noise = sample_noise(spec, grid, seed, config.fgn_method)?;
    match steer(spec, &config.x1, &noise, grid, &config.steer_params()) {
        Ok(result) => Ok(result),
        Err(ControlError::NonConvergence(result)) => Ok(*result),
        Err(other) => Err(other.into()),
    }
}

/// One full steering run: writes `trajectory.csv`, `control.csv` and
/// `summary.json`; deterministic for a given `(config, seed)`.
pub fn run_steer(
    config: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<SteerRecord, CliError> {
    let spec = config.to_spec()?;
    let grid = config.grid(&spec)?;
    let seed = seed_override.unwrap_or(config.master_seed);
    let result = steer_once(config, &spec, &grid, seed)?;
    let report = hypothesis_report(&spec);
    let record = SteerRecord {
        seed,
        terminal_error_sq: result.terminal_error_sq,
        energy: result.control.energy,
        outer_iters: result.outer_iters,
        evaluations: result.evaluations,
        converged: result.converged,
        regularized: result.regularized,
        unreachable_residual: result.unreachable_residual,
        snapped_impulse_times: grid.snapped_times(),
        error_history: result.error_history.clone(),
        nu: report.constants.nu,
        cond32: report.constants.cond32,
    };
    fs::create_dir_all(&config.out_dir)?;
    if config.write_trajectory {
        write_trajectory_csv(&config.out_dir.join("trajectory.csv"), &result.trajectory)?;
    }
    write_control_csv(&config.out_dir.join("control.csv"), &result.control)?;
    let json = serde_json::to_string_pretty(&record).expect("steer record serializes");
    fs::write(config.out_dir.join("summary.json"), json)?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// mc
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Clone)]
pub struct PathRow {
    pub path_id: usize,
    pub seed: u64,
    pub terminal_error_sq: f64,
    pub energy: f64,
    pub outer_iters: usize,
    pub converged: bool,
}

#[derive(Debug, Serialize, Clone)]
pub struct McFailure {
    pub path_id: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Serialize, Clone)]
pub struct McSummary {
    pub n_paths: usize,
    pub n_converged: usize,
    pub mean_terminal_error_sq: f64,
    pub median_terminal_error_sq: f64,
    pub max_terminal_error_sq: f64,
    pub mean_energy: f64,
    pub mean_outer_iters: f64,
    pub nu: f64,
    pub cond32: f64,
    pub nu_ok: bool,
    pub cond32_ok: bool,
    pub example_ok: bool,
    pub failures: Vec<McFailure>,
}

/// Run `n_paths` steering experiments with per-path seeds derived from the
/// master seed by index (order-independent), aggregate, and write
/// `paths.csv` plus `mc_summary.json`. Individual failures are recorded and
/// do not abort the batch.
pub fn run_mc(config: &ExperimentConfig) -> Result<McSummary, CliError> {
    let spec = config.to_spec()?;
    let grid = config.grid(&spec)?;
    let n_paths = config.n_paths;
    let jobs = config.jobs.min(n_paths);

    let results: Vec<Mutex<Option<Result<PathRow, McFailure>>>> =
        (0..n_paths).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_paths {
                    break;
                }
                let seed = derive_seed(config.master_seed, i as u64);
                let outcome = match steer_once(config, &spec, &grid, seed) {
                    Ok(result) if result.converged => Ok(PathRow {
                        path_id: i,
                        seed,
                        terminal_error_sq: result.terminal_error_sq,
                        energy: result.control.energy,
                        outer_iters: result.outer_iters,
                        converged: true,
                    }),
                    Ok(result) => Err(McFailure {
                        path_id: i,
                        seed,
                        reason: format!(
                            "not converged: terminal_error_sq {:.3e} after {} updates",
                            result.terminal_error_sq, result.outer_iters
                        ),
                    }),
                    Err(err) => Err(McFailure {
                        path_id: i,
                        seed,
                        reason: err.to_string(),
                    }),
                };
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(n_paths);
    let mut failures = Vec::new();
    for cell in results {
        match cell.into_inner().unwrap().expect("every path completed") {
            Ok(row) => rows.push(row),
            Err(fail) => failures.push(fail),
        }
    }

    let report = hypothesis_report(&spec);
    let mut errors: Vec<f64> = rows.iter().map(|r| r.terminal_error_sq).collect();
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = rows.len().max(1) as f64;
    let summary = McSummary {
        n_paths,
        n_converged: rows.len(),
        mean_terminal_error_sq: rows.iter().map(|r| r.terminal_error_sq).sum::<f64>() / count,
        median_terminal_error_sq: if errors.is_empty() {
            0.0
        } else {
            errors[errors.len() / 2]
        },
        max_terminal_error_sq: errors.last().copied().unwrap_or(0.0),
        mean_energy: rows.iter().map(|r| r.energy).sum::<f64>() / count,
        mean_outer_iters: rows.iter().map(|r| r.outer_iters as f64).sum::<f64>() / count,
        nu: report.constants.nu,
        cond32: report.constants.cond32,
        nu_ok: report.verdicts.nu_ok,
        cond32_ok: report.verdicts.cond32_ok,
        example_ok: report.verdicts.example_ok,
        failures,
    };

    fs::create_dir_all(&config.out_dir)?;
    let mut f = fs::File::create(config.out_dir.join("paths.csv"))?;
    writeln!(f, "path_id,seed,terminal_error_sq,energy,outer_iters,converged")?;
    let mut all: Vec<(usize, String)> = rows
        .iter()
        .map(|r| {
            (
                r.path_id,
                format!(
                    "{},{},{},{},{},{}",
                    r.path_id,
                    r.seed,
                    fmt_float(r.terminal_error_sq),
                    fmt_float(r.energy),
                    r.outer_iters,
                    r.converged
                ),
            )
        })
        .collect();
    for fail in &summary.failures {
        all.push((
            fail.path_id,
            format!("{},{},nan,nan,0,false", fail.path_id, fail.seed),
        ));
    }
    all.sort_by_key(|(id, _)| *id);
    for (_, row) in all {
        writeln!(f, "{row}")?;
    }
    let json = serde_json::to_string_pretty(&summary).expect("mc summary serializes");
    fs::write(config.out_dir.join("mc_summary.json"), json)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// fbm
// ---------------------------------------------------------------------------

/// Noise-only sampling: `n_paths` scalar fBm paths on the solver grid,
/// written in long form to `fbm_paths.csv`.
pub fn run_fbm(config: &ExperimentConfig) -> Result<usize, CliError> {
    let hurst = HurstParam::new(config.hurst)?;
    let cells = (config.horizon / config.dt).round().max(1.0) as usize;
    let dt = config.horizon / cells as f64;
    let sampler = FgnSampler::new(cells, dt, hurst, config.fgn_method)?;
    fs::create_dir_all(&config.out_dir)?;
    let mut f = fs::File::create(config.out_dir.join("fbm_paths.csv"))?;
    writeln!(f, "path_id,seed,time,value")?;
    for i in 0..config.n_paths {
        let seed = derive_seed(config.master_seed, i as u64);
        let path = sampler.sample(seed);
        for (t, v) in path.times.iter().zip(&path.values) {
            writeln!(f, "{},{},{},{}", i, seed, fmt_float(*t), fmt_float(*v))?;
        }
    }
    Ok(config.n_paths)
}

/// CSV column orders and exit codes, printed by `--schema`.
pub fn schema_text() -> &'static str {
    "output files
  trajectory.csv   time, side (L = arrival/left value, R = post-impulse), c1..cN
                   one row per node; impulse nodes emit both L and R rows
  control.csv      time, u1..uN, cum_energy
                   left-point control values; cum_energy is sum dt*|u|^2 up to the row
  paths.csv        path_id, seed, terminal_error_sq, energy, outer_iters, converged
                   one row per Monte-Carlo path, ordered by path_id
  fbm_paths.csv    path_id, seed, time, value (long form, one row per node)
  summary.json     single steering record (terminal_error_sq, energy, iterations, flags)
  mc_summary.json  batch statistics, verdicts and per-path failures
  check.json       hypothesis constants, probe estimates and verdicts

floats are serialized with 17 significant digits for byte reproducibility

exit codes
  0  success, all verdicts true
  1  config error
  2  check ran but a verdict is false
  3  steering did not converge (artifacts still written)
"
}
