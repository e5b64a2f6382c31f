//! Problem data: the abstract equation ingredients (neutral map `g`, drift
//! `f`, noise coefficient `σ`, control operator `B`, impulses `I_k`, initial
//! function `φ`), the concrete heat-equation instance with history kernels,
//! and the audit of every constant the steering analysis depends on.
//!
//! History kernels have the separable exponential form
//! `K(t, ξ, ϑ) = amp · xi(ξ) · e^{decay·ϑ}` evaluated at `ϑ = θ − t`, so
//! `g(t, ψ)(ξ) = amp · xi(ξ) ∫_{−∞}^0 map(ψ(θ)(ξ)) e^{decay (θ−t)} dθ`.
//! Substituting `r = t + θ` turns the integral into
//! `e^{−2·decay·t} [Φ(ξ) + ∫_0^t map(x(r)(ξ)) e^{decay·r} dr]` with a
//! t-independent initial-history part `Φ`, which is what makes the solver's
//! incremental evaluation possible.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fbm::{HurstParam, QfbmSpec};
use crate::phase_space::{bh_norm_phi, ExpTerm, History, InitialFunction, PhaseWeight};
use crate::quad::composite_simpson;
use crate::spectral::{
    analytic_power_bound, frac_power_apply, FracPower, PowerSign, SpectralVector,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("impulse times must satisfy 0 < t_1 < ... < t_m < T, offending time {0}")]
    ImpulseOrdering(f64),
    #[error("impulse index {0} out of range (m = {1})")]
    ImpulseOutOfRange(usize, usize),
    #[error("history kernel with decay {0} fails the integrability requirement")]
    KernelNotIntegrable(f64),
    #[error("neutral exponent must lie in (1/2, 1) so that 2β−1 > 0, got {0}")]
    BadBeta(f64),
    #[error("history-dependent impulses require the explicit nonconforming flag")]
    HistoryImpulseNotAllowed,
    #[error("history-dependent impulse cannot be applied to a bare state value")]
    HistoryImpulseNeedsSegment,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
}

/// Uniform ξ-grid on `[0, π]` with trapezoid weights and the sine basis
/// tabulated. The trapezoid rule is exact for the trigonometric polynomials
/// produced by products of retained modes, so Galerkin projections of linear
/// expressions are exact; nonlinear maps are defined through this grid.
#[derive(Debug, Clone)]
pub struct XiGrid {
    n_modes: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    basis: Vec<Vec<f64>>,
}

impl XiGrid {
    pub fn new(n_modes: usize, panels: usize) -> Self {
        let panels = panels.max(4 * n_modes).max(64);
        let h = std::f64::consts::PI / panels as f64;
        let points: Vec<f64> = (0..=panels).map(|i| i as f64 * h).collect();
        let mut weights = vec![h; panels + 1];
        weights[0] = 0.5 * h;
        weights[panels] = 0.5 * h;
        let norm = (2.0 / std::f64::consts::PI).sqrt();
        let basis = (1..=n_modes)
            .map(|n| points.iter().map(|&x| norm * (n as f64 * x).sin()).collect())
            .collect();
        Self {
            n_modes,
            points,
            weights,
            basis,
        }
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Physical values `Σ_n c_n e_n(ξ_i)`.
    pub fn synth(&self, v: &SpectralVector) -> Vec<f64> {
        assert_eq!(v.dim(), self.n_modes);
        let mut out = vec![0.0; self.points.len()];
        for (n, row) in self.basis.iter().enumerate() {
            let c = v.as_slice()[n];
            if c != 0.0 {
                for (o, b) in out.iter_mut().zip(row) {
                    *o += c * b;
                }
            }
        }
        out
    }

    /// Galerkin coefficients `⟨f, e_n⟩` of tabulated physical values.
    pub fn project(&self, phys: &[f64]) -> SpectralVector {
        assert_eq!(phys.len(), self.points.len());
        let coeffs = self
            .basis
            .iter()
            .map(|row| {
                row.iter()
                    .zip(phys)
                    .zip(&self.weights)
                    .map(|((b, f), w)| b * f * w)
                    .sum()
            })
            .collect();
        SpectralVector::from_coeffs(coeffs)
    }

    /// Galerkin matrix of multiplication by `c(ξ) = c0 + c1 cos ξ`.
    pub fn multiplication_matrix(&self, c0: f64, c1: f64) -> DMatrix<f64> {
        let c: Vec<f64> = self.points.iter().map(|&x| c0 + c1 * x.cos()).collect();
        DMatrix::from_fn(self.n_modes, self.n_modes, |m, n| {
            self.basis[m]
                .iter()
                .zip(&self.basis[n])
                .zip(&c)
                .zip(&self.weights)
                .map(|(((bm, bn), cv), w)| bm * bn * cv * w)
                .sum()
        })
    }
}

/// Pointwise scalar map applied to history values inside kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarMap {
    Zero,
    Linear(f64),
    Tanh(f64),
}

impl ScalarMap {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ScalarMap::Zero => 0.0,
            ScalarMap::Linear(gain) => gain * x,
            ScalarMap::Tanh(gain) => gain * x.tanh(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            ScalarMap::Zero => 0.0,
            ScalarMap::Linear(gain) | ScalarMap::Tanh(gain) => gain.abs(),
        }
    }

    fn is_linear(&self) -> bool {
        matches!(self, ScalarMap::Zero | ScalarMap::Linear(_))
    }
}

/// ξ-profile of a history kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelXi {
    Const(f64),
    Sin(u32),
}

impl KernelXi {
    pub fn value(&self, xi: f64) -> f64 {
        match self {
            KernelXi::Const(c) => *c,
            KernelXi::Sin(k) => (*k as f64 * xi).sin(),
        }
    }
}

/// Separable exponential history kernel with a pointwise map.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryKernel {
    pub amp: f64,
    pub decay: f64,
    pub xi: KernelXi,
    pub map: ScalarMap,
}

const PHI_QUAD_PANELS: usize = 2048;

impl HistoryKernel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.decay > 0.0 && self.decay.is_finite() && self.amp.is_finite() {
            Ok(())
        } else {
            Err(ModelError::KernelNotIntegrable(self.decay))
        }
    }

    /// `amp · xi(ξ_i)` tabulated on the grid.
    pub fn xi_values(&self, grid: &XiGrid) -> Vec<f64> {
        grid.points.iter().map(|&x| self.amp * self.xi.value(x)).collect()
    }

    /// Head window beyond which `e^{decay·θ}` is negligible.
    fn quad_window(&self) -> f64 {
        -45.0 / self.decay
    }

    /// `Φ(ξ_i) = ∫_{−∞}^0 map(φ(θ)(ξ_i)) e^{decay·θ} dθ`, exact tail.
    ///
    /// Linear maps commute with the exponential sum defining φ and integrate
    /// in closed form; nonlinear maps fall back to Simpson quadrature on the
    /// head window plus the asymptotic constant tail.
    pub fn phi_weighted_integral(&self, phi: &InitialFunction, grid: &XiGrid) -> Vec<f64> {
        let lambda = self.decay;
        if self.map.is_linear() {
            let gain = match self.map {
                ScalarMap::Zero => return vec![0.0; grid.n_points()],
                ScalarMap::Linear(g) => g,
                ScalarMap::Tanh(_) => unreachable!(),
            };
            // Closed form on parametric terms: ∫ e^{(λ+a)θ} dθ = 1/(λ+a).
            let mut coeffs = SpectralVector::zeros(phi.dim());
            for term in phi.terms() {
                coeffs.add_scaled(term.coeff / (lambda + term.decay), &term.vector);
            }
            let mut out = grid.synth(&coeffs);
            for v in &mut out {
                *v *= gain;
            }
            // Tabulated correction integrates exactly cell by cell
            // (linear · exponential).
            self.add_table_integral(phi, grid, gain, &mut out);
            out
        } else {
            let w = self.quad_window();
            let mut out = vec![0.0; grid.n_points()];
            // Asymptotic constant part of φ gives the exact tail.
            let mut v_inf = SpectralVector::zeros(phi.dim());
            for term in phi.terms() {
                if term.decay == 0.0 {
                    v_inf.add_scaled(term.coeff, &term.vector);
                }
            }
            let tail_phys = grid.synth(&v_inf);
            let tail_weight = (lambda * w).exp() / lambda;
            for (o, tv) in out.iter_mut().zip(&tail_phys) {
                *o += self.map.apply(*tv) * tail_weight;
            }
            // Head window: Simpson against e^{λθ} with φ synthesized per node.
            let panels = PHI_QUAD_PANELS;
            let h = -w / panels as f64;
            for k in 0..=panels {
                let theta = w + k as f64 * h;
                let weight = if k == 0 || k == panels {
                    h / 3.0
                } else if k % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                };
                let phys = grid.synth(&phi.eval(theta.min(0.0)));
                let e = (lambda * theta).exp() * weight;
                for (o, pv) in out.iter_mut().zip(&phys) {
                    *o += self.map.apply(*pv) * e;
                }
            }
            out
        }
    }

    fn add_table_integral(&self, phi: &InitialFunction, grid: &XiGrid, gain: f64, out: &mut [f64]) {
        let lambda = self.decay;
        let Some(table) = phi.table() else { return };
        let m = table.values.len() - 1;
        let step = -table.start / m as f64;
        for cell in 0..m {
            let a = table.start + cell as f64 * step;
            let b = a + step;
            // ∫_a^b [(1−s)v_c + s v_{c+1}] e^{λθ} dθ with s = (θ−a)/step.
            let ea = (lambda * a).exp();
            let eb = (lambda * b).exp();
            let int_e = (eb - ea) / lambda;
            let int_theta_e = (b * eb - a * ea) / lambda - int_e / lambda;
            let w_left = ((b * int_e - int_theta_e) / step) * gain;
            let w_right = ((int_theta_e - a * int_e) / step) * gain;
            let pa = grid.synth(&table.values[cell]);
            let pb = grid.synth(&table.values[cell + 1]);
            for ((o, va), vb) in out.iter_mut().zip(&pa).zip(&pb) {
                *o += w_left * va + w_right * vb;
            }
        }
    }

    /// Reference quadrature evaluation against an arbitrary recorded segment.
    /// Slow path used by oracles and probes; the solver keeps incremental
    /// accumulators instead.
    pub fn eval_history_ref(&self, t: f64, hist: &History, grid: &XiGrid) -> SpectralVector {
        let lambda = self.decay;
        let w = self.quad_window() - hist.anchor_time();
        let panels = PHI_QUAD_PANELS;
        let h = -w / panels as f64;
        let mut acc = vec![0.0; grid.n_points()];
        for k in 0..=panels {
            let theta = (w + k as f64 * h).min(0.0);
            let weight = if k == 0 || k == panels {
                h / 3.0
            } else if k % 2 == 1 {
                4.0 * h / 3.0
            } else {
                2.0 * h / 3.0
            };
            let phys = grid.synth(&hist.eval(theta));
            let e = (lambda * (theta - t)).exp() * weight;
            for (o, pv) in acc.iter_mut().zip(&phys) {
                *o += self.map.apply(*pv) * e;
            }
        }
        // Exact constant tail below the window.
        let mut v_inf = SpectralVector::zeros(hist.phi().dim());
        for term in hist.phi().terms() {
            if term.decay == 0.0 {
                v_inf.add_scaled(term.coeff, &term.vector);
            }
        }
        let tail_phys = grid.synth(&v_inf);
        let tail_weight = (lambda * (w - t)).exp() / lambda;
        for (o, tv) in acc.iter_mut().zip(&tail_phys) {
            *o += self.map.apply(*tv) * tail_weight;
        }
        let xi_vals = self.xi_values(grid);
        for (a, x) in acc.iter_mut().zip(&xi_vals) {
            *a *= x;
        }
        grid.project(&acc)
    }

    /// Evaluation against a pure initial-function segment: the history part
    /// is `Φ` and only the prefactor depends on `t`.
    pub fn eval_phi_segment(
        &self,
        t: f64,
        phi: &InitialFunction,
        grid: &XiGrid,
    ) -> SpectralVector {
        let phi_int = self.phi_weighted_integral(phi, grid);
        let xi_vals = self.xi_values(grid);
        let scale = (-self.decay * t).exp();
        let phys: Vec<f64> = phi_int
            .iter()
            .zip(&xi_vals)
            .map(|(p, x)| p * x * scale)
            .collect();
        grid.project(&phys)
    }
}

/// The abstract maps `g` and `f` of the equation.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldMap {
    Zero,
    /// `γ · x_t(0)`: depends on the history only through the current value.
    PointScale(f64),
    /// Distributed delay through a history kernel.
    Kernel(HistoryKernel),
}

impl FieldMap {
    pub fn is_zero(&self) -> bool {
        matches!(self, FieldMap::Zero)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            FieldMap::Kernel(k) => k.validate(),
            _ => Ok(()),
        }
    }

    /// Reference evaluation on a recorded segment (slow path).
    pub fn eval_history_ref(&self, t: f64, hist: &History, grid: &XiGrid) -> SpectralVector {
        match self {
            FieldMap::Zero => SpectralVector::zeros(hist.phi().dim()),
            FieldMap::PointScale(gain) => hist.anchor_value().scaled(*gain),
            FieldMap::Kernel(k) => k.eval_history_ref(t, hist, grid),
        }
    }

    /// Evaluation on a pure initial-function segment.
    pub fn eval_phi_segment(&self, t: f64, phi: &InitialFunction, grid: &XiGrid) -> SpectralVector {
        match self {
            FieldMap::Zero => SpectralVector::zeros(phi.dim()),
            FieldMap::PointScale(gain) => phi.phi0().scaled(*gain),
            FieldMap::Kernel(k) => k.eval_phi_segment(t, phi, grid),
        }
    }
}

/// Deterministic noise coefficient profile in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeProfile {
    Zero,
    Const(f64),
    Exp { amp: f64, rate: f64 },
}

impl TimeProfile {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            TimeProfile::Zero => 0.0,
            TimeProfile::Const(c) => *c,
            TimeProfile::Exp { amp, rate } => amp * (rate * t).exp(),
        }
    }
}

/// Mode-diagonal noise coefficient `σ_n(t) = profile(t) · weight_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSpec {
    pub profile: TimeProfile,
    pub mode_weights: Vec<f64>,
}

impl SigmaSpec {
    pub fn zero(n_modes: usize) -> Self {
        Self {
            profile: TimeProfile::Zero,
            mode_weights: vec![1.0; n_modes],
        }
    }

    pub fn constant(level: f64, n_modes: usize) -> Self {
        Self {
            profile: TimeProfile::Const(level),
            mode_weights: vec![1.0; n_modes],
        }
    }

    pub fn value(&self, t: f64, mode_idx: usize) -> f64 {
        self.profile.value(t) * self.mode_weights[mode_idx]
    }
}

/// Jump map at one impulse time.
#[derive(Debug, Clone, PartialEq)]
pub enum ImpulseMap {
    Zero,
    Scale(f64),
    Constant(SpectralVector),
    /// Nonconforming variant depending on the full history through
    /// `∫_{−∞}^{t_k} amp · e^{−decay (t_k − s)} map(x(s, ξ)) ds`.
    History {
        amp: f64,
        decay: f64,
        map: ScalarMap,
    },
}

impl ImpulseMap {
    pub fn is_history(&self) -> bool {
        matches!(self, ImpulseMap::History { .. })
    }

    /// Squared Lipschitz constant where the map is globally Lipschitz.
    pub fn lipschitz_sq(&self) -> Option<f64> {
        match self {
            ImpulseMap::Zero | ImpulseMap::Constant(_) => Some(0.0),
            ImpulseMap::Scale(g) => Some(g * g),
            ImpulseMap::History { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Impulse {
    pub time: f64,
    pub map: ImpulseMap,
}

/// User-declared hypothesis constants; empirical probes are reported next to
/// them and verdicts use the elementwise maximum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeclaredConstants {
    pub m_g: f64,
    pub m_g_bar: f64,
    pub m_f: f64,
    pub m_f_bar: f64,
    pub m_b: f64,
    pub m_w: f64,
    pub m_k: Vec<f64>,
    pub m_k_tilde: Vec<f64>,
}

/// Construction parameters for [`ProblemSpec`].
#[derive(Debug, Clone)]
pub struct ProblemSpecParams {
    pub n_modes: usize,
    pub horizon: f64,
    pub hurst: HurstParam,
    pub beta: FracPower,
    pub neutral_g: FieldMap,
    pub drift_f: FieldMap,
    pub sigma: SigmaSpec,
    pub lambdas: Vec<f64>,
    pub b_c0: f64,
    pub b_c1: f64,
    pub impulses: Vec<Impulse>,
    pub allow_history_impulses: bool,
    pub phi: InitialFunction,
    pub weight: PhaseWeight,
    pub declared: DeclaredConstants,
    pub xi_panels: usize,
}

/// Complete immutable problem description.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub n_modes: usize,
    pub horizon: f64,
    pub hurst: HurstParam,
    pub beta: FracPower,
    pub neutral_g: FieldMap,
    pub drift_f: FieldMap,
    pub sigma: SigmaSpec,
    pub qfbm: QfbmSpec,
    pub impulses: Vec<Impulse>,
    pub allow_history_impulses: bool,
    pub phi: InitialFunction,
    pub weight: PhaseWeight,
    pub declared: DeclaredConstants,
    pub xi_panels: usize,
    b_c0: f64,
    b_c1: f64,
    b_matrix: DMatrix<f64>,
}

impl ProblemSpec {
    pub fn new(params: ProblemSpecParams) -> Result<Self, ModelError> {
        let ProblemSpecParams {
            n_modes,
            horizon,
            hurst,
            beta,
            neutral_g,
            drift_f,
            sigma,
            lambdas,
            b_c0,
            b_c1,
            impulses,
            allow_history_impulses,
            phi,
            weight,
            declared,
            xi_panels,
        } = params;
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(ModelError::BadHorizon(horizon));
        }
        if beta.alpha() <= 0.5 || beta.alpha() >= 1.0 {
            return Err(ModelError::BadBeta(beta.alpha()));
        }
        neutral_g.validate()?;
        drift_f.validate()?;
        if phi.dim() != n_modes {
            return Err(ModelError::DimensionMismatch(phi.dim(), n_modes));
        }
        if sigma.mode_weights.len() != n_modes {
            return Err(ModelError::DimensionMismatch(
                sigma.mode_weights.len(),
                n_modes,
            ));
        }
        if lambdas.len() != n_modes {
            return Err(ModelError::DimensionMismatch(lambdas.len(), n_modes));
        }
        let mut prev = 0.0;
        for imp in &impulses {
            if imp.time <= prev || imp.time >= horizon {
                return Err(ModelError::ImpulseOrdering(imp.time));
            }
            prev = imp.time;
            if imp.map.is_history() && !allow_history_impulses {
                return Err(ModelError::HistoryImpulseNotAllowed);
            }
            if let ImpulseMap::Constant(v) = &imp.map {
                if v.dim() != n_modes {
                    return Err(ModelError::DimensionMismatch(v.dim(), n_modes));
                }
            }
        }
        let qfbm =
            QfbmSpec::new(lambdas, hurst).map_err(|_| ModelError::DimensionMismatch(0, n_modes))?;
        let grid = XiGrid::new(n_modes, xi_panels);
        let b_matrix = grid.multiplication_matrix(b_c0, b_c1);
        Ok(Self {
            n_modes,
            horizon,
            hurst,
            beta,
            neutral_g,
            drift_f,
            sigma,
            qfbm,
            impulses,
            allow_history_impulses,
            phi,
            weight,
            declared,
            xi_panels,
            b_c0,
            b_c1,
            b_matrix,
        })
    }

    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    pub fn b_profile(&self) -> (f64, f64) {
        (self.b_c0, self.b_c1)
    }

    pub fn xi_grid(&self) -> XiGrid {
        XiGrid::new(self.n_modes, self.xi_panels)
    }

    pub fn n_impulses(&self) -> usize {
        self.impulses.len()
    }

    /// Spectral norm squared of `B`, computed from the symmetric eigenvalues.
    pub fn b_norm_sq(&self) -> f64 {
        let eig = self.b_matrix.clone().symmetric_eigen();
        eig.eigenvalues
            .iter()
            .map(|e| e.abs())
            .fold(0.0, f64::max)
            .powi(2)
    }

    /// Apply `B` in spectral coordinates.
    pub fn b_apply(&self, u: &SpectralVector) -> SpectralVector {
        let mut out = vec![0.0; self.n_modes];
        for m in 0..self.n_modes {
            let mut acc = 0.0;
            for n in 0..self.n_modes {
                acc += self.b_matrix[(m, n)] * u.as_slice()[n];
            }
            out[m] = acc;
        }
        SpectralVector::from_coeffs(out)
    }
}

/// `x(t_k^+) = x(t_k^−) + I_k(x(t_k^−))` for the abstract (memoryless)
/// impulse forms; `k` is 0-based.
pub fn apply_impulse(
    spec: &ProblemSpec,
    k: usize,
    v_minus: &SpectralVector,
) -> Result<SpectralVector, ModelError> {
    let m = spec.impulses.len();
    let imp = spec
        .impulses
        .get(k)
        .ok_or(ModelError::ImpulseOutOfRange(k, m))?;
    match &imp.map {
        ImpulseMap::Zero => Ok(v_minus.clone()),
        ImpulseMap::Scale(g) => Ok(v_minus.scaled(1.0 + g)),
        ImpulseMap::Constant(c) => Ok(v_minus.add(c)),
        ImpulseMap::History { .. } => Err(ModelError::HistoryImpulseNeedsSegment),
    }
}

/// Parameters of the concrete heat-equation instance.
#[derive(Debug, Clone)]
pub struct ExampleParams {
    pub n_modes: usize,
    pub horizon: f64,
    pub hurst: HurstParam,
    pub beta: FracPower,
    pub weight_rate: f64,
    pub lambdas: Vec<f64>,
    pub sigma: SigmaSpec,
    pub neutral: Option<HistoryKernel>,
    pub drift: Option<HistoryKernel>,
    pub c0: f64,
    pub c1: f64,
    pub impulses: Vec<Impulse>,
    pub allow_history_impulses: bool,
    pub phi: InitialFunction,
    pub declared: DeclaredConstants,
    pub xi_panels: usize,
}

/// Assemble the worked example: distributed-delay kernels for `g` and `f`,
/// multiplication control operator, exponential phase weight. The kernel
/// integrability requirement `∫_0^π (∫_{−∞}^0 |K| dθ)² dξ < ∞` is verified
/// numerically at sampled times before construction.
pub fn build_example(params: ExampleParams) -> Result<ProblemSpec, ModelError> {
    let weight = PhaseWeight::new(params.weight_rate)
        .map_err(|_| ModelError::BadHorizon(params.weight_rate))?;
    for kernel in [&params.neutral, &params.drift].into_iter().flatten() {
        kernel.validate()?;
        // Quadrature check of the square-integrated absolute θ-mass.
        for step in 0..=4 {
            let t = params.horizon * step as f64 / 4.0;
            let theta_mass = |xi: f64| {
                let inner = kernel.amp.abs() * kernel.xi.value(xi).abs()
                    * (-kernel.decay * t).exp()
                    / kernel.decay;
                inner * inner
            };
            let total = composite_simpson(&theta_mass, 0.0, std::f64::consts::PI, 64);
            if !total.is_finite() {
                return Err(ModelError::KernelNotIntegrable(kernel.decay));
            }
        }
    }
    let to_field = |k: Option<HistoryKernel>| match k {
        None => FieldMap::Zero,
        Some(k) if k.map == ScalarMap::Zero || k.amp == 0.0 => FieldMap::Zero,
        Some(k) => FieldMap::Kernel(k),
    };
    ProblemSpec::new(ProblemSpecParams {
        n_modes: params.n_modes,
        horizon: params.horizon,
        hurst: params.hurst,
        beta: params.beta,
        neutral_g: to_field(params.neutral),
        drift_f: to_field(params.drift),
        sigma: params.sigma,
        lambdas: params.lambdas,
        b_c0: params.c0,
        b_c1: params.c1,
        impulses: params.impulses,
        allow_history_impulses: params.allow_history_impulses,
        phi: params.phi,
        weight,
        declared: params.declared,
        xi_panels: params.xi_panels,
    })
}

/// Closed-form controllability Gramian
/// `Γ_mn = (BBᵀ)_mn (1 − e^{−(m²+n²)T}) / (m² + n²)` (modes 1-indexed).
pub fn closed_gramian_matrix(b: &DMatrix<f64>, horizon: f64) -> DMatrix<f64> {
    let n = b.nrows();
    let bbt = b * b.transpose();
    DMatrix::from_fn(n, n, |m, k| {
        let sum_sq = ((m + 1) * (m + 1) + (k + 1) * (k + 1)) as f64;
        bbt[(m, k)] * (1.0 - (-sum_sq * horizon).exp()) / sum_sq
    })
}

/// Contraction constant `ν = 4 M_g l² (c₁² + (M_{1−β} T^β)² / (2β − 1))`.
pub fn nu_value(m_g: f64, l: f64, c1: f64, m_1mb: f64, beta: f64, horizon: f64) -> f64 {
    4.0 * m_g * l * l * (c1 * c1 + (m_1mb * horizon.powf(beta)).powi(2) / (2.0 * beta - 1.0))
}

/// The scalar steering condition
/// `7 l² (1 + 8 M M_b M_w T²) {8 (c₁² + (M_{1−β}T^β)²/(2β−1)) M_g + 8 M T² M_f}`.
#[allow(clippy::too_many_arguments)]
pub fn cond32_value(
    m_g: f64,
    m_f: f64,
    m_b: f64,
    m_w: f64,
    m: f64,
    l: f64,
    c1: f64,
    m_1mb: f64,
    beta: f64,
    horizon: f64,
) -> f64 {
    let bracket = 8.0 * (c1 * c1 + (m_1mb * horizon.powf(beta)).powi(2) / (2.0 * beta - 1.0)) * m_g
        + 8.0 * m * horizon * horizon * m_f;
    7.0 * l * l * (1.0 + 8.0 * m * m_b * m_w * horizon * horizon) * bracket
}

/// The example-specific sufficient condition as printed for β = 3/4:
/// `(7/2)(1 + 8 M M_b M_w T²){(1 + 2 M_{1/4}² T^{3/2}) M_g + M T² M_f}`.
pub fn example_condition_value(
    m_g: f64,
    m_f: f64,
    m_b: f64,
    m_w: f64,
    m: f64,
    horizon: f64,
) -> f64 {
    let m14 = analytic_power_bound(0.25);
    3.5 * (1.0 + 8.0 * m * m_b * m_w * horizon * horizon)
        * ((1.0 + 2.0 * m14 * m14 * horizon.powf(1.5)) * m_g + m * horizon * horizon * m_f)
}

/// Every constant of the analysis, evaluated for one problem.
#[derive(Debug, Clone)]
pub struct HypothesisConstants {
    pub m: f64,
    pub m_one_minus_beta: f64,
    pub c1: f64,
    pub l: f64,
    pub m_g: f64,
    pub m_g_bar: f64,
    pub m_f: f64,
    pub m_f_bar: f64,
    pub m_b: f64,
    pub m_w: f64,
    pub sum_m_k: f64,
    pub sum_m_k_tilde: f64,
    pub nu: f64,
    pub cond32: f64,
    pub cond_example: f64,
}

/// Probe-based estimates reported alongside the declared constants.
#[derive(Debug, Clone)]
pub struct EmpiricalEstimates {
    pub m_g_probe: f64,
    pub m_f_probe: f64,
    pub m_b_actual: f64,
    pub m_w_actual: f64,
    /// sup over probes of ‖f(t, x)‖² within the probed ball of radius
    /// `carath_q`: the constant majorant fitted to the probes.
    pub carath_sup: f64,
    pub carath_q: f64,
    pub n_probes: usize,
}

#[derive(Debug, Clone)]
pub struct Verdicts {
    pub nu_ok: bool,
    pub cond32_ok: bool,
    pub example_ok: bool,
}

#[derive(Debug, Clone)]
pub struct HypothesisReport {
    pub constants: HypothesisConstants,
    pub empirical: EmpiricalEstimates,
    pub verdicts: Verdicts,
}

impl HypothesisReport {
    pub fn all_ok(&self) -> bool {
        self.verdicts.nu_ok && self.verdicts.cond32_ok && self.verdicts.example_ok
    }
}

/// Audit the hypothesis constants: exact spectral quantities, declared
/// Lipschitz data, empirical Lipschitz quotients from random history pairs,
/// and the resulting scalar conditions. Verdicts use the maximum of declared
/// and empirical values.
pub fn hypothesis_report(spec: &ProblemSpec) -> HypothesisReport {
    hypothesis_report_with(spec, 0xA11CE, 48)
}

pub fn hypothesis_report_with(
    spec: &ProblemSpec,
    probe_seed: u64,
    n_probes: usize,
) -> HypothesisReport {
    let beta = spec.beta.alpha();
    let m = 1.0;
    let m1b = analytic_power_bound(1.0 - beta);
    let c1 = 1.0;
    let l = spec.weight.l();

    let m_b_actual = spec.b_norm_sq();
    let gamma = closed_gramian_matrix(spec.b_matrix(), spec.horizon);
    let eig = gamma.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let m_w_actual = if min_eig > 0.0 {
        1.0 / min_eig
    } else {
        f64::INFINITY
    };

    let probes = probe_lipschitz(spec, probe_seed, n_probes);

    let m_g = spec.declared.m_g.max(probes.m_g_probe);
    let m_f = spec.declared.m_f.max(probes.m_f_probe);
    let m_b = spec.declared.m_b.max(m_b_actual);
    let m_w = spec.declared.m_w.max(m_w_actual);

    let nu = nu_value(m_g, l, c1, m1b, beta, spec.horizon);
    let cond32 = cond32_value(m_g, m_f, m_b, m_w, m, l, c1, m1b, beta, spec.horizon);
    let cond_example = example_condition_value(m_g, m_f, m_b, m_w, m, spec.horizon);

    let constants = HypothesisConstants {
        m,
        m_one_minus_beta: m1b,
        c1,
        l,
        m_g,
        m_g_bar: spec.declared.m_g_bar,
        m_f,
        m_f_bar: spec.declared.m_f_bar,
        m_b,
        m_w,
        sum_m_k: effective_m_k(spec).iter().sum(),
        sum_m_k_tilde: spec.declared.m_k_tilde.iter().sum(),
        nu,
        cond32,
        cond_example,
    };
    let verdicts = Verdicts {
        nu_ok: nu < 1.0,
        cond32_ok: cond32 < 1.0,
        example_ok: cond_example < 1.0,
    };
    HypothesisReport {
        constants,
        empirical: EmpiricalEstimates {
            m_b_actual,
            m_w_actual,
            ..probes
        },
        verdicts,
    }
}

fn effective_m_k(spec: &ProblemSpec) -> Vec<f64> {
    spec.impulses
        .iter()
        .enumerate()
        .map(|(k, imp)| {
            let declared = spec.declared.m_k.get(k).copied().unwrap_or(0.0);
            imp.map.lipschitz_sq().unwrap_or(0.0).max(declared)
        })
        .collect()
}

fn random_phi(rng: &mut ChaCha8Rng, n_modes: usize) -> InitialFunction {
    let mut terms = Vec::new();
    for decay in [0.0, rng.gen_range(0.2..3.0)] {
        let v: Vec<f64> = (0..n_modes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        terms.push(ExpTerm {
            coeff: rng.gen_range(-1.0..1.0f64),
            decay,
            vector: SpectralVector::from_coeffs(v.iter().map(|x| x / norm).collect()),
        });
    }
    InitialFunction::new(n_modes, terms, None).unwrap()
}

fn probe_lipschitz(spec: &ProblemSpec, seed: u64, n_probes: usize) -> EmpiricalEstimates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = spec.xi_grid();
    let mut m_g_probe: f64 = 0.0;
    let mut m_f_probe: f64 = 0.0;
    let mut carath_sup: f64 = 0.0;
    let mut carath_q: f64 = 0.0;
    for _ in 0..n_probes {
        let x = random_phi(&mut rng, spec.n_modes);
        let y = random_phi(&mut rng, spec.n_modes);
        let t = rng.gen_range(0.0..spec.horizon);
        let delta = x.difference(&y);
        let denom = bh_norm_phi(&delta, &spec.weight).powi(2);
        if denom > 1e-18 {
            let dg = field_phi_difference(&spec.neutral_g, t, &x, &y, &grid);
            let dg_beta = frac_power_apply(spec.beta, PowerSign::Positive, &dg);
            m_g_probe = m_g_probe.max(dg_beta.norm_sq() / denom);
            let df = field_phi_difference(&spec.drift_f, t, &x, &y, &grid);
            m_f_probe = m_f_probe.max(df.norm_sq() / denom);
        }
        let x_norm_sq = bh_norm_phi(&x, &spec.weight).powi(2);
        carath_q = carath_q.max(x_norm_sq);
        carath_sup = carath_sup.max(spec.drift_f.eval_phi_segment(t, &x, &grid).norm_sq());
    }
    EmpiricalEstimates {
        m_g_probe,
        m_f_probe,
        m_b_actual: 0.0,
        m_w_actual: 0.0,
        carath_sup,
        carath_q,
        n_probes,
    }
}

fn field_phi_difference(
    field: &FieldMap,
    t: f64,
    x: &InitialFunction,
    y: &InitialFunction,
    grid: &XiGrid,
) -> SpectralVector {
    field
        .eval_phi_segment(t, x, grid)
        .sub(&field.eval_phi_segment(t, y, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hurst() -> HurstParam {
        HurstParam::new(0.7).unwrap()
    }

    fn beta34() -> FracPower {
        FracPower::new(0.75).unwrap()
    }

    fn unit_phi(n: usize) -> InitialFunction {
        InitialFunction::constant(SpectralVector::unit(n, 1))
    }

    fn base_params(n: usize) -> ProblemSpecParams {
        ProblemSpecParams {
            n_modes: n,
            horizon: 1.0,
            hurst: hurst(),
            beta: beta34(),
            neutral_g: FieldMap::Zero,
            drift_f: FieldMap::Zero,
            sigma: SigmaSpec::zero(n),
            lambdas: vec![1.0; n],
            b_c0: 1.0,
            b_c1: 0.0,
            impulses: Vec::new(),
            allow_history_impulses: false,
            phi: unit_phi(n),
            weight: PhaseWeight::new(4.0).unwrap(),
            declared: DeclaredConstants::default(),
            xi_panels: 256,
        }
    }

    #[test]
    fn xi_grid_projection_round_trip() {
        let grid = XiGrid::new(6, 256);
        let v = SpectralVector::from_coeffs(vec![0.3, -1.0, 0.5, 0.0, 2.0, -0.25]);
        let back = grid.project(&grid.synth(&v));
        for n in 1..=6 {
            assert_relative_eq!(back.coeff(n), v.coeff(n), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_multiplier_gives_identity() {
        let grid = XiGrid::new(5, 256);
        let b = grid.multiplication_matrix(1.0, 0.0);
        for m in 0..5 {
            for n in 0..5 {
                let expect = if m == n { 1.0 } else { 0.0 };
                assert_relative_eq!(b[(m, n)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cosine_multiplier_is_tridiagonal() {
        // ⟨cos ξ e_m, e_n⟩ = ½ on |m−n| = 1 and 0 otherwise.
        let grid = XiGrid::new(6, 256);
        let b = grid.multiplication_matrix(0.75, 0.5);
        for m in 0..6usize {
            for n in 0..6usize {
                let expect = if m == n {
                    0.75
                } else if m.abs_diff(n) == 1 {
                    0.25
                } else {
                    0.0
                };
                assert_relative_eq!(b[(m, n)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_kernels_give_zero_fields() {
        let spec = build_example(ExampleParams {
            n_modes: 3,
            horizon: 1.0,
            hurst: hurst(),
            beta: beta34(),
            weight_rate: 4.0,
            lambdas: vec![1.0, 0.5, 0.25],
            sigma: SigmaSpec::zero(3),
            neutral: Some(HistoryKernel {
                amp: 0.0,
                decay: 1.0,
                xi: KernelXi::Const(1.0),
                map: ScalarMap::Linear(1.0),
            }),
            drift: None,
            c0: 1.0,
            c1: 0.0,
            impulses: Vec::new(),
            allow_history_impulses: false,
            phi: unit_phi(3),
            declared: DeclaredConstants::default(),
            xi_panels: 256,
        })
        .unwrap();
        assert!(spec.neutral_g.is_zero());
        assert!(spec.drift_f.is_zero());
    }

    #[test]
    fn nonpositive_decay_fails_integrability() {
        let bad = HistoryKernel {
            amp: 1.0,
            decay: 0.0,
            xi: KernelXi::Const(1.0),
            map: ScalarMap::Linear(1.0),
        };
        assert_eq!(bad.validate(), Err(ModelError::KernelNotIntegrable(0.0)));
    }

    #[test]
    fn drift_kernel_matches_closed_form_on_first_mode_field() {
        // F(t, ξ, θ) = e^θ sin ξ, Q identity, ψ ≡ c e₁ constant in time:
        // f(0, ψ)(ξ) = c (∫ e^θ dθ) sin ξ · e₁(ξ) = c √(2/π) sin²ξ, whose
        // sine coefficients are exactly 8c/(3π) on mode 1, −8c/(15π) on
        // mode 3, zero on even modes.
        let n = 4;
        let grid = XiGrid::new(n, 256);
        let c = 0.8;
        let phi = InitialFunction::constant(SpectralVector::unit(n, 1).scaled(c));
        let kernel = HistoryKernel {
            amp: 1.0,
            decay: 1.0,
            xi: KernelXi::Sin(1),
            map: ScalarMap::Linear(1.0),
        };
        let pi = std::f64::consts::PI;
        let expect1 = 8.0 * c / (3.0 * pi);
        let expect3 = -8.0 * c / (15.0 * pi);
        let got = kernel.eval_phi_segment(0.0, &phi, &grid);
        assert_relative_eq!(got.coeff(1), expect1, max_relative = 1e-6);
        assert_relative_eq!(got.coeff(3), expect3, max_relative = 1e-6);
        assert!(got.coeff(2).abs() < 1e-10 && got.coeff(4).abs() < 1e-10);
        // Reference quadrature route agrees.
        let times = [0.0];
        let values = [phi.phi0()];
        let posts = [None];
        let hist =
            History::new(&phi, &times, &values, &posts, 0, crate::phase_space::Side::Left)
                .unwrap();
        let slow = kernel.eval_history_ref(0.0, &hist, &grid);
        assert_relative_eq!(slow.coeff(1), expect1, max_relative = 1e-6);
        assert_relative_eq!(slow.coeff(3), expect3, max_relative = 1e-6);
    }

    #[test]
    fn nonlinear_phi_integral_matches_linear_at_small_argument() {
        // tanh ≈ identity for small values, so the two paths must agree.
        let n = 3;
        let grid = XiGrid::new(n, 256);
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![1e-4, 0.0, 0.0]));
        let lin = HistoryKernel {
            amp: 1.0,
            decay: 2.0,
            xi: KernelXi::Const(1.0),
            map: ScalarMap::Linear(1.0),
        };
        let tan = HistoryKernel {
            map: ScalarMap::Tanh(1.0),
            ..lin.clone()
        };
        let a = lin.eval_phi_segment(0.3, &phi, &grid);
        let b = tan.eval_phi_segment(0.3, &phi, &grid);
        assert_relative_eq!(a.coeff(1), b.coeff(1), max_relative = 1e-6);
    }

    #[test]
    fn apply_impulse_identities() {
        let n = 3;
        let mut params = base_params(n);
        params.impulses = vec![
            Impulse {
                time: 0.25,
                map: ImpulseMap::Zero,
            },
            Impulse {
                time: 0.5,
                map: ImpulseMap::Scale(-1.0),
            },
            Impulse {
                time: 0.75,
                map: ImpulseMap::Scale(0.1),
            },
        ];
        let spec = ProblemSpec::new(params).unwrap();
        let v = SpectralVector::from_coeffs(vec![1.0, 0.0, 0.0]);
        assert_eq!(apply_impulse(&spec, 0, &v).unwrap(), v);
        assert_eq!(
            apply_impulse(&spec, 1, &v).unwrap(),
            SpectralVector::zeros(n)
        );
        let bumped = apply_impulse(&spec, 2, &v).unwrap();
        assert_relative_eq!(bumped.coeff(1), 1.1, max_relative = 1e-15);
        assert!(matches!(
            apply_impulse(&spec, 3, &v),
            Err(ModelError::ImpulseOutOfRange(3, 3))
        ));
    }

    #[test]
    fn impulse_ordering_is_enforced() {
        let mut params = base_params(2);
        params.impulses = vec![Impulse {
            time: 1.5,
            map: ImpulseMap::Zero,
        }];
        assert!(matches!(
            ProblemSpec::new(params),
            Err(ModelError::ImpulseOrdering(_))
        ));
        let mut params = base_params(2);
        params.impulses = vec![
            Impulse {
                time: 0.5,
                map: ImpulseMap::Zero,
            },
            Impulse {
                time: 0.5,
                map: ImpulseMap::Zero,
            },
        ];
        assert!(matches!(
            ProblemSpec::new(params),
            Err(ModelError::ImpulseOrdering(_))
        ));
    }

    #[test]
    fn history_impulse_needs_flag() {
        let mut params = base_params(2);
        params.impulses = vec![Impulse {
            time: 0.5,
            map: ImpulseMap::History {
                amp: 1.0,
                decay: 2.0,
                map: ScalarMap::Linear(1.0),
            },
        }];
        assert_eq!(
            ProblemSpec::new(params.clone()).unwrap_err(),
            ModelError::HistoryImpulseNotAllowed
        );
        params.allow_history_impulses = true;
        assert!(ProblemSpec::new(params).is_ok());
    }

    #[test]
    fn trivial_constants_give_zero_conditions() {
        let spec = ProblemSpec::new(base_params(2)).unwrap();
        let report = hypothesis_report(&spec);
        assert_eq!(report.constants.nu, 0.0);
        assert_eq!(report.constants.cond32, 0.0);
        assert!(report.verdicts.nu_ok && report.verdicts.cond32_ok && report.verdicts.example_ok);
    }

    #[test]
    fn cond32_matches_independent_arithmetic() {
        // β = 3/4, T = 1, l = 1/4, M = M_b = M_w = c₁ = 1, M_g = M_f = 0.001.
        let m14 = (0.25f64 / std::f64::consts::E).powf(0.25);
        let expect =
            7.0 * (1.0 / 16.0) * 9.0 * (8.0 * (1.0 + 2.0 * m14 * m14) * 0.001 + 8.0 * 0.001);
        let got = cond32_value(0.001, 0.001, 1.0, 1.0, 1.0, 0.25, 1.0, m14, 0.75, 1.0);
        assert_relative_eq!(got, expect, max_relative = 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn conditions_are_monotone_in_each_constant() {
        let m14 = analytic_power_bound(0.25);
        let (m_g, m_f, m_b, m_w, t) = (0.02, 0.03, 1.2, 2.0, 1.0);
        let f0 = cond32_value(m_g, m_f, m_b, m_w, 1.0, 0.25, 1.0, m14, 0.75, t);
        let bump = 1e-4;
        assert!(cond32_value(m_g + bump, m_f, m_b, m_w, 1.0, 0.25, 1.0, m14, 0.75, t) >= f0);
        assert!(cond32_value(m_g, m_f + bump, m_b, m_w, 1.0, 0.25, 1.0, m14, 0.75, t) >= f0);
        assert!(cond32_value(m_g, m_f, m_b + bump, m_w, 1.0, 0.25, 1.0, m14, 0.75, t) >= f0);
        assert!(cond32_value(m_g, m_f, m_b, m_w + bump, 1.0, 0.25, 1.0, m14, 0.75, t) >= f0);
        assert!(cond32_value(m_g, m_f, m_b, m_w, 1.0, 0.25, 1.0, m14, 0.75, t + bump) >= f0);
        let n0 = nu_value(m_g, 0.25, 1.0, m14, 0.75, t);
        assert!(nu_value(m_g + bump, 0.25, 1.0, m14, 0.75, t) >= n0);
        assert!(nu_value(m_g, 0.25, 1.0, m14, 0.75, t + bump) >= n0);
    }

    #[test]
    fn empirical_probe_stays_below_generous_declaration() {
        // T(·) identity, G bounded by e^θ: declared constant chosen from the
        // analytic bound, probes must stay below it.
        let n = 4;
        let mut params = base_params(n);
        params.neutral_g = FieldMap::Kernel(HistoryKernel {
            amp: 0.05,
            decay: 4.0,
            xi: KernelXi::Const(1.0),
            map: ScalarMap::Linear(1.0),
        });
        params.declared.m_g = 4.0 * 0.05 * 0.05 * n as f64 * 64.0;
        let spec = ProblemSpec::new(params).unwrap();
        let report = hypothesis_report(&spec);
        assert!(
            report.empirical.m_g_probe <= spec.declared.m_g,
            "probe {} exceeds declared {}",
            report.empirical.m_g_probe,
            spec.declared.m_g
        );
        assert_eq!(report.constants.m_g, spec.declared.m_g);
    }

    #[test]
    fn carath_majorant_covers_probes() {
        let n = 3;
        let mut params = base_params(n);
        params.drift_f = FieldMap::Kernel(HistoryKernel {
            amp: 0.2,
            decay: 2.0,
            xi: KernelXi::Sin(1),
            map: ScalarMap::Tanh(1.0),
        });
        let spec = ProblemSpec::new(params).unwrap();
        let report = hypothesis_report(&spec);
        assert!(report.empirical.carath_sup.is_finite());
        assert!(report.empirical.carath_q > 0.0);
    }
}
