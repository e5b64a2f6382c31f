//! Mild-solution integrator for the impulsive neutral equation.
//!
//! On the spectral truncation the state at a node `t` is assembled per mode
//! from exact exponential convolution weights:
//!
//! `x_n(t) = e^{−n²t}(φ_n(0) − g_n(0, φ)) + g_n(t, x_t)
//!          + Σ_j w_AS g_n(s_j, x_{s_j}) + Σ_j w_S f_n(s_j, x_{s_j})
//!          + Σ_j w_S (B u(s_j))_n + Σ_j e^{−n²(t−s_j)} σ_n(s_j) ΔB^H_{n,j}
//!          + Σ_{t_k<t} e^{−n²(t−t_k)} I_k(x(t_k^−))_n`
//!
//! with left-point data on each cell and `w_S`, `w_AS` the exact cell
//! integrals of `S(t−s)` and `AS(t−s)`. Every sum obeys the one-step
//! recurrence `Σ(t_{i+1}) = e^{−n² Δ} Σ(t_i) + (new cell)`, so the sweep is
//! O(nodes) per mode. History kernels are accumulated the same way through
//! the substitution `r = t + θ` (see the model module), which leaves only
//! the standalone neutral term `g_n(t, x_t)` implicit in `x(t)`; that is
//! resolved by a per-node fixed-point iteration, with damping before
//! reporting a neutral non-contraction.
//!
//! The Picard route re-evaluates the same formula with every segment taken
//! from the previous iterate, mirroring the fixed-point operator whose
//! iteration the diagnostics measure.

use thiserror::Error;

use crate::fbm::QfbmPath;
use crate::model::{FieldMap, HistoryKernel, ImpulseMap, ProblemSpec, ScalarMap, XiGrid};
use crate::phase_space::{History, PhaseError, Side};
use crate::spectral::SpectralVector;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("time step must be positive and at most the horizon, got {0}")]
    BadStep(f64),
    #[error("impulse times {0} and {1} snap onto the same grid node")]
    ImpulseCollision(f64, f64),
    #[error("noise path does not match the integration grid")]
    NoiseGridMismatch,
    #[error("control carries {0} nodes, grid has {1}")]
    ControlLengthMismatch(usize, usize),
    #[error("spec declares {0} impulses, grid carries {1}")]
    ImpulseCountMismatch(usize, usize),
    #[error(
        "neutral term is not a contraction at t = {t}: observed quotient {quotient:.3e} \
         after {iterations} iterations"
    )]
    NeutralNonContraction {
        t: f64,
        quotient: f64,
        iterations: usize,
    },
    #[error("fixed-point iteration diverged: last ratio {last_ratio:.3e} after {} sweeps", .diagnostics.iterations)]
    PicardDivergence {
        last_ratio: f64,
        diagnostics: PicardDiagnostics,
    },
    #[error("fixed-point iteration did not reach tolerance within {} sweeps", .diagnostics.iterations)]
    PicardMaxIter { diagnostics: PicardDiagnostics },
    #[error(transparent)]
    Phase(#[from] PhaseError),
}

/// Uniform integration grid with impulse times snapped onto nodes.
#[derive(Debug, Clone)]
pub struct Grid {
    times: Vec<f64>,
    dt: f64,
    impulse_nodes: Vec<usize>,
}

impl Grid {
    /// Build a uniform grid of step ≈ `dt` on `[0, horizon]` and snap each
    /// impulse time to its nearest interior node.
    pub fn new(horizon: f64, dt: f64, impulse_times: &[f64]) -> Result<Self, SolverError> {
        if !(dt > 0.0) || dt > horizon || !horizon.is_finite() {
            return Err(SolverError::BadStep(dt));
        }
        let cells = (horizon / dt).round().max(1.0) as usize;
        let dt_actual = horizon / cells as f64;
        let mut times: Vec<f64> = (0..=cells).map(|i| i as f64 * dt_actual).collect();
        times[cells] = horizon;
        let mut impulse_nodes = Vec::with_capacity(impulse_times.len());
        for (k, &t) in impulse_times.iter().enumerate() {
            let idx = ((t / dt_actual).round() as usize).clamp(1, cells - 1);
            if let Some(&prev) = impulse_nodes.last() {
                if idx <= prev {
                    return Err(SolverError::ImpulseCollision(impulse_times[k - 1], t));
                }
            }
            impulse_nodes.push(idx);
        }
        Ok(Self {
            times,
            dt: dt_actual,
            impulse_nodes,
        })
    }

    pub fn for_spec(spec: &ProblemSpec, dt: f64) -> Result<Self, SolverError> {
        let times: Vec<f64> = spec.impulses.iter().map(|i| i.time).collect();
        Self::new(spec.horizon, dt, &times)
    }

    /// Same horizon and impulse nodes at `factor`-times finer resolution.
    pub fn refined(&self, factor: usize) -> Grid {
        assert!(factor >= 1);
        let cells = (self.times.len() - 1) * factor;
        let horizon = *self.times.last().unwrap();
        let dt = horizon / cells as f64;
        let mut times: Vec<f64> = (0..=cells).map(|i| i as f64 * dt).collect();
        times[cells] = horizon;
        Grid {
            times,
            dt,
            impulse_nodes: self.impulse_nodes.iter().map(|i| i * factor).collect(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn impulse_nodes(&self) -> &[usize] {
        &self.impulse_nodes
    }

    /// Impulse times after snapping.
    pub fn snapped_times(&self) -> Vec<f64> {
        self.impulse_nodes.iter().map(|&i| self.times[i]).collect()
    }

    fn impulse_index_at(&self, node: usize) -> Option<usize> {
        self.impulse_nodes.iter().position(|&i| i == node)
    }
}

/// Integrated path: arrival (left) value per node, plus the post-impulse
/// value at impulse nodes.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    values: Vec<SpectralVector>,
    posts: Vec<Option<SpectralVector>>,
    pub impulse_nodes: Vec<usize>,
    pub noise_seed: Option<u64>,
}

impl Trajectory {
    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    /// Arrival (left-limit) value at a node.
    pub fn value(&self, idx: usize) -> &SpectralVector {
        &self.values[idx]
    }

    /// Value carried on the cell to the right of the node.
    pub fn post(&self, idx: usize) -> &SpectralVector {
        self.posts[idx].as_ref().unwrap_or(&self.values[idx])
    }

    pub fn post_opt(&self, idx: usize) -> Option<&SpectralVector> {
        self.posts[idx].as_ref()
    }

    pub fn final_value(&self) -> &SpectralVector {
        self.values.last().unwrap()
    }

    /// Segment `x_t` anchored at node `idx`.
    pub fn segment<'a>(
        &'a self,
        spec: &'a ProblemSpec,
        idx: usize,
        side: Side,
    ) -> Result<History<'a>, PhaseError> {
        History::new(&spec.phi, &self.times, &self.values, &self.posts, idx, side)
    }

    /// Free evolution `y(t) = S(t)φ(0)` at a node.
    pub fn free_part(&self, spec: &ProblemSpec, idx: usize) -> SpectralVector {
        crate::spectral::semigroup_apply(self.times[idx], &spec.phi.phi0()).unwrap()
    }

    /// `z(t) = x(t) − y(t)`, the translated unknown of the fixed-point map.
    pub fn z_part(&self, spec: &ProblemSpec, idx: usize) -> SpectralVector {
        self.values[idx].sub(&self.free_part(spec, idx))
    }

    /// Supremum over nodes of the state distance, including post values.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.values.len() {
            d = d.max(self.values[i].sub(&other.values[i]).norm());
            d = d.max(self.post(i).sub(other.post(i)).norm());
        }
        d
    }
}

/// Inner (neutral) fixed-point controls.
#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    pub inner_tol: f64,
    pub max_inner: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            inner_tol: 1e-12,
            max_inner: 60,
        }
    }
}

/// The mild-formula terms evaluated at the horizon, split by origin:
/// `x(T) = free + g_anchor + as_g + conv_f + conv_u + conv_noise + impulses`.
#[derive(Debug, Clone)]
pub struct MildTerms {
    pub free: SpectralVector,
    pub g_anchor: SpectralVector,
    pub as_g: SpectralVector,
    pub conv_f: SpectralVector,
    pub conv_u: SpectralVector,
    pub conv_noise: SpectralVector,
    pub impulses: SpectralVector,
}

impl MildTerms {
    /// Everything the control convolution must complement to reach a target.
    pub fn non_control_sum(&self) -> SpectralVector {
        let mut s = self.free.clone();
        s.add_scaled(1.0, &self.g_anchor);
        s.add_scaled(1.0, &self.as_g);
        s.add_scaled(1.0, &self.conv_f);
        s.add_scaled(1.0, &self.conv_noise);
        s.add_scaled(1.0, &self.impulses);
        s
    }

    pub fn total(&self) -> SpectralVector {
        self.non_control_sum().add(&self.conv_u)
    }
}

/// All-zero control on a grid.
pub fn zero_control(n_modes: usize, grid: &Grid) -> Vec<SpectralVector> {
    vec![SpectralVector::zeros(n_modes); grid.n_nodes()]
}

/// Sample the problem's Q-fBm on the grid.
pub fn sample_noise(
    spec: &ProblemSpec,
    grid: &Grid,
    seed: u64,
    method: crate::fbm::FgnMethod,
) -> Result<QfbmPath, crate::fbm::FbmError> {
    crate::fbm::sample_qfbm(&spec.qfbm, grid.times(), seed, method)
}

// ---------------------------------------------------------------------------
// History-kernel accumulator: R(t)(ξ) = ∫_0^t map(x(r, ξ)) e^{λr} dr with the
// trapezoid cell ending at the current anchor candidate.
// ---------------------------------------------------------------------------

struct KernelAccum {
    lambda: f64,
    map: ScalarMap,
    xi_scaled: Vec<f64>,
    phi_int: Vec<f64>,
    locked: Vec<f64>,
    prev_t: f64,
    prev_weighted: Vec<f64>,
}

impl KernelAccum {
    fn new(kernel: &HistoryKernel, spec: &ProblemSpec, xi: &XiGrid, phi0_phys: &[f64]) -> Self {
        let prev_weighted = phi0_phys.iter().map(|&v| kernel.map.apply(v)).collect();
        Self {
            lambda: kernel.decay,
            map: kernel.map,
            xi_scaled: kernel.xi_values(xi),
            phi_int: kernel.phi_weighted_integral(&spec.phi, xi),
            locked: vec![0.0; xi.n_points()],
            prev_t: 0.0,
            prev_weighted,
        }
    }

    /// Kernel value at time `t` with the last half-cell closed by the given
    /// anchor candidate (physical values).
    fn eval_with_anchor(&self, t: f64, anchor_phys: &[f64], xi: &XiGrid) -> SpectralVector {
        let damp = (-2.0 * self.lambda * t).exp();
        let half = 0.5 * (t - self.prev_t);
        let e_t = (self.lambda * t).exp();
        let phys: Vec<f64> = self
            .phi_int
            .iter()
            .zip(&self.locked)
            .zip(&self.prev_weighted)
            .zip(anchor_phys)
            .zip(&self.xi_scaled)
            .map(|((((phi, locked), prev), a), scale)| {
                let r = locked + half * (prev + self.map.apply(*a) * e_t);
                scale * damp * (phi + r)
            })
            .collect();
        xi.project(&phys)
    }

    /// Kernel value at the locked front `prev_t` (used as the left-point
    /// sample of the next cell).
    fn eval_closed(&self, xi: &XiGrid) -> SpectralVector {
        let damp = (-2.0 * self.lambda * self.prev_t).exp();
        let phys: Vec<f64> = self
            .phi_int
            .iter()
            .zip(&self.locked)
            .zip(&self.xi_scaled)
            .map(|((phi, locked), scale)| scale * damp * (phi + locked))
            .collect();
        xi.project(&phys)
    }

    /// Close the cell `[prev_t, t]` with the arrival value at `t`.
    fn lock_to(&mut self, t: f64, arrival_phys: &[f64]) {
        let half = 0.5 * (t - self.prev_t);
        let e_t = (self.lambda * t).exp();
        for ((locked, prev), a) in self
            .locked
            .iter_mut()
            .zip(&self.prev_weighted)
            .zip(arrival_phys)
        {
            *locked += half * (prev + self.map.apply(*a) * e_t);
        }
        self.prev_t = t;
        self.prev_weighted = arrival_phys
            .iter()
            .map(|&v| self.map.apply(v) * e_t)
            .collect();
    }

    /// Replace the cell-left sample after an impulse.
    fn reset_front(&mut self, t: f64, post_phys: &[f64]) {
        let e_t = (self.lambda * t).exp();
        self.prev_weighted = post_phys.iter().map(|&v| self.map.apply(v) * e_t).collect();
    }
}

enum FieldAccum {
    Zero,
    Point(f64),
    Kernel(KernelAccum),
}

impl FieldAccum {
    fn new(field: &FieldMap, spec: &ProblemSpec, xi: &XiGrid, phi0_phys: &[f64]) -> Self {
        match field {
            FieldMap::Zero => FieldAccum::Zero,
            FieldMap::PointScale(g) => FieldAccum::Point(*g),
            FieldMap::Kernel(k) => FieldAccum::Kernel(KernelAccum::new(k, spec, xi, phi0_phys)),
        }
    }

    fn is_implicit(&self) -> bool {
        !matches!(self, FieldAccum::Zero)
    }

    /// Field value at time `t` for the given anchor candidate.
    fn anchor_eval(
        &self,
        t: f64,
        anchor: &SpectralVector,
        xi: &XiGrid,
        n_modes: usize,
    ) -> SpectralVector {
        match self {
            FieldAccum::Zero => SpectralVector::zeros(n_modes),
            FieldAccum::Point(g) => anchor.scaled(*g),
            FieldAccum::Kernel(k) => {
                let phys = xi.synth(anchor);
                k.eval_with_anchor(t, &phys, xi)
            }
        }
    }

    /// Left-point sample carried over the next cell; `cell_value` is the
    /// state on that cell (post-impulse at impulse nodes).
    fn left_sample(
        &self,
        cell_value: &SpectralVector,
        xi: &XiGrid,
        n_modes: usize,
    ) -> SpectralVector {
        match self {
            FieldAccum::Zero => SpectralVector::zeros(n_modes),
            FieldAccum::Point(g) => cell_value.scaled(*g),
            FieldAccum::Kernel(k) => k.eval_closed(xi),
        }
    }

    fn lock_to(&mut self, t: f64, arrival_phys: &[f64]) {
        if let FieldAccum::Kernel(k) = self {
            k.lock_to(t, arrival_phys);
        }
    }

    fn reset_front(&mut self, t: f64, post_phys: &[f64]) {
        if let FieldAccum::Kernel(k) = self {
            k.reset_front(t, post_phys);
        }
    }
}

enum SweepSource<'a> {
    /// Resolve the implicit neutral term per node.
    Implicit(SolverParams),
    /// Take every segment from a given trajectory (fixed-point re-evaluation).
    Given(&'a Trajectory),
}

struct SweepOut {
    traj: Trajectory,
    terms: MildTerms,
}

fn validate_inputs(
    spec: &ProblemSpec,
    control: &[SpectralVector],
    noise: &QfbmPath,
    grid: &Grid,
) -> Result<(), SolverError> {
    if noise.n_nodes() != grid.n_nodes() || noise.n_modes() != spec.n_modes {
        return Err(SolverError::NoiseGridMismatch);
    }
    for (a, b) in noise.times.iter().zip(grid.times()) {
        if (a - b).abs() > 1e-9 {
            return Err(SolverError::NoiseGridMismatch);
        }
    }
    if control.len() != grid.n_nodes() {
        return Err(SolverError::ControlLengthMismatch(
            control.len(),
            grid.n_nodes(),
        ));
    }
    if spec.impulses.len() != grid.impulse_nodes().len() {
        return Err(SolverError::ImpulseCountMismatch(
            spec.impulses.len(),
            grid.impulse_nodes().len(),
        ));
    }
    Ok(())
}

fn sweep(
    spec: &ProblemSpec,
    control: &[SpectralVector],
    noise: &QfbmPath,
    grid: &Grid,
    source: SweepSource,
) -> Result<SweepOut, SolverError> {
    validate_inputs(spec, control, noise, grid)?;
    let n = spec.n_modes;
    let xi = spec.xi_grid();
    let phi0 = spec.phi.phi0();
    let phi0_phys = xi.synth(&phi0);
    let g0 = spec.neutral_g.eval_phi_segment(0.0, &spec.phi, &xi);

    let mut g_acc = FieldAccum::new(&spec.neutral_g, spec, &xi, &phi0_phys);
    let mut f_acc = FieldAccum::new(&spec.drift_f, spec, &xi, &phi0_phys);

    let mut free: Vec<f64> = phi0.sub(&g0).as_slice().to_vec();
    let mut as_g = vec![0.0; n];
    let mut conv_f = vec![0.0; n];
    let mut conv_u = vec![0.0; n];
    let mut conv_noise = vec![0.0; n];
    let mut imp_sum = vec![0.0; n];

    let j_cells = grid.n_nodes() - 1;
    let mut values: Vec<SpectralVector> = Vec::with_capacity(grid.n_nodes());
    let mut posts: Vec<Option<SpectralVector>> = vec![None; grid.n_nodes()];
    values.push(phi0.clone());

    // Left-point samples carried over the upcoming cell.
    let mut g_left = g_acc.left_sample(&phi0, &xi, n);
    let mut f_left = f_acc.left_sample(&phi0, &xi, n);
    let mut g_anchor_last = g0.clone();

    for i in 0..j_cells {
        let t0 = grid.times[i];
        let t1 = grid.times[i + 1];
        let dt_cell = t1 - t0;
        let bu = spec.b_apply(&control[i]);
        let mut base = vec![0.0; n];
        for m in 0..n {
            let n2 = ((m + 1) * (m + 1)) as f64;
            let decay = (-n2 * dt_cell).exp();
            let w_s = (1.0 - decay) / n2;
            free[m] *= decay;
            // Exact cell weight of ∫ AS(t−s) ds is decay − 1 at t = t1.
            as_g[m] = decay * as_g[m] + (decay - 1.0) * g_left.as_slice()[m];
            conv_f[m] = decay * conv_f[m] + w_s * f_left.as_slice()[m];
            conv_u[m] = decay * conv_u[m] + w_s * bu.as_slice()[m];
            conv_noise[m] =
                decay * (conv_noise[m] + spec.sigma.value(t0, m) * noise.increment(m, i));
            imp_sum[m] *= decay;
            base[m] = free[m] + as_g[m] + conv_f[m] + conv_u[m] + conv_noise[m] + imp_sum[m];
        }
        let base = SpectralVector::from_coeffs(base);

        // Arrival value at t1.
        let (arrival, g_term) = match &source {
            SweepSource::Implicit(params) => {
                let predictor = posts[i].clone().unwrap_or_else(|| values[i].clone());
                inner_solve(t1, &base, &g_acc, &xi, &predictor, params, n)?
            }
            SweepSource::Given(prev) => {
                let g_term = g_acc.anchor_eval(t1, prev.value(i + 1), &xi, n);
                (base.add(&g_term), g_term)
            }
        };
        g_anchor_last = g_term;
        values.push(arrival);

        // Impulse at this node?
        if let Some(k) = grid.impulse_index_at(i + 1) {
            let jump_arg = match &source {
                SweepSource::Implicit(_) => values[i + 1].clone(),
                SweepSource::Given(prev) => prev.value(i + 1).clone(),
            };
            let jump = impulse_value(spec, k, &jump_arg, &xi, &grid.times[..=i + 1], &values, &posts);
            let mut post = values[i + 1].clone();
            post.add_scaled(1.0, &jump);
            for m in 0..n {
                imp_sum[m] += jump.as_slice()[m];
            }
            posts[i + 1] = Some(post);
        }

        // Close the kernel cells with the arrival value, then move the cell
        // front to the value carried on the next cell. Segments come from
        // the given trajectory when re-evaluating the fixed point.
        let (arrival_for_cells, cell_value) = match &source {
            SweepSource::Implicit(_) => (
                values[i + 1].clone(),
                posts[i + 1].clone().unwrap_or_else(|| values[i + 1].clone()),
            ),
            SweepSource::Given(prev) => (prev.value(i + 1).clone(), prev.post(i + 1).clone()),
        };
        let arrival_phys = xi.synth(&arrival_for_cells);
        g_acc.lock_to(t1, &arrival_phys);
        f_acc.lock_to(t1, &arrival_phys);
        if cell_value != arrival_for_cells {
            let post_phys = xi.synth(&cell_value);
            g_acc.reset_front(t1, &post_phys);
            f_acc.reset_front(t1, &post_phys);
        }
        g_left = g_acc.left_sample(&cell_value, &xi, n);
        f_left = f_acc.left_sample(&cell_value, &xi, n);
    }

    let traj = Trajectory {
        times: grid.times.clone(),
        values,
        posts,
        impulse_nodes: grid.impulse_nodes.clone(),
        noise_seed: Some(noise.master_seed),
    };
    let terms = MildTerms {
        free: SpectralVector::from_coeffs(free),
        g_anchor: g_anchor_last,
        as_g: SpectralVector::from_coeffs(as_g),
        conv_f: SpectralVector::from_coeffs(conv_f),
        conv_u: SpectralVector::from_coeffs(conv_u),
        conv_noise: SpectralVector::from_coeffs(conv_noise),
        impulses: SpectralVector::from_coeffs(imp_sum),
    };
    Ok(SweepOut { traj, terms })
}

/// Resolve `x = base + g(t, x)` by fixed-point iteration; relax by 0.5 on
/// apparent non-contraction before giving up.
fn inner_solve(
    t: f64,
    base: &SpectralVector,
    g_acc: &FieldAccum,
    xi: &XiGrid,
    predictor: &SpectralVector,
    params: &SolverParams,
    n_modes: usize,
) -> Result<(SpectralVector, SpectralVector), SolverError> {
    if !g_acc.is_implicit() {
        return Ok((base.clone(), SpectralVector::zeros(n_modes)));
    }
    let mut v = predictor.clone();
    let mut last_delta = f64::INFINITY;
    let mut quotient = f64::NAN;
    for phase in 0..2 {
        let damping = if phase == 0 { 1.0 } else { 0.5 };
        for iter in 0..params.max_inner {
            let g_term = g_acc.anchor_eval(t, &v, xi, n_modes);
            let mut next = base.add(&g_term);
            if damping != 1.0 {
                next = next.scaled(damping);
                next.add_scaled(1.0 - damping, &v);
            }
            let delta = next.sub(&v).norm();
            if delta.is_finite() && delta <= params.inner_tol * (1.0 + next.norm()) {
                let g_final = g_acc.anchor_eval(t, &next, xi, n_modes);
                return Ok((base.add(&g_final), g_final));
            }
            if iter > 0 && last_delta > 0.0 && last_delta.is_finite() {
                quotient = delta / last_delta;
            }
            if !delta.is_finite() {
                break;
            }
            last_delta = delta;
            v = next;
        }
    }
    Err(SolverError::NeutralNonContraction {
        t,
        quotient,
        iterations: 2 * params.max_inner,
    })
}

/// Evaluate the jump at impulse `k` from the pre-impulse value and, for the
/// nonconforming history form, the recorded path so far.
fn impulse_value(
    spec: &ProblemSpec,
    k: usize,
    v_minus: &SpectralVector,
    xi: &XiGrid,
    times: &[f64],
    values: &[SpectralVector],
    posts: &[Option<SpectralVector>],
) -> SpectralVector {
    match &spec.impulses[k].map {
        ImpulseMap::Zero => SpectralVector::zeros(spec.n_modes),
        ImpulseMap::Scale(g) => v_minus.scaled(*g),
        ImpulseMap::Constant(c) => c.clone(),
        ImpulseMap::History { amp, decay, map } => {
            // ∫_{−∞}^{t_k} amp e^{−decay (t_k − s)} map(x(s, ξ)) ds projected:
            // the initial part plus a trapezoid over the recorded cells, with
            // the pre-impulse value closing the last cell.
            let t_k = *times.last().unwrap();
            let kernel = HistoryKernel {
                amp: 1.0,
                decay: *decay,
                xi: crate::model::KernelXi::Const(1.0),
                map: *map,
            };
            let mut acc = kernel.phi_weighted_integral(&spec.phi, xi);
            for i in 1..times.len() {
                let cell_left = posts[i - 1].as_ref().unwrap_or(&values[i - 1]);
                let cell_right = if i == times.len() - 1 {
                    v_minus
                } else {
                    &values[i]
                };
                let left_phys = xi.synth(cell_left);
                let right_phys = xi.synth(cell_right);
                let half = 0.5 * (times[i] - times[i - 1]);
                let e_left = (decay * times[i - 1]).exp();
                let e_right = (decay * times[i]).exp();
                for (a, (p, h)) in acc.iter_mut().zip(left_phys.iter().zip(&right_phys)) {
                    *a += half * (map.apply(*p) * e_left + map.apply(*h) * e_right);
                }
            }
            let scale = amp * (-decay * t_k).exp();
            let phys: Vec<f64> = acc.iter().map(|a| a * scale).collect();
            xi.project(&phys)
        }
    }
}

/// Integrate the mild formula for a given control and noise realization,
/// resolving the implicit neutral term per node.
pub fn simulate_mild(
    spec: &ProblemSpec,
    control: &[SpectralVector],
    noise: &QfbmPath,
    grid: &Grid,
    params: &SolverParams,
) -> Result<Trajectory, SolverError> {
    sweep(spec, control, noise, grid, SweepSource::Implicit(*params)).map(|o| o.traj)
}

/// As [`simulate_mild`] but also return the terminal term split.
pub fn simulate_mild_with_terms(
    spec: &ProblemSpec,
    control: &[SpectralVector],
    noise: &QfbmPath,
    grid: &Grid,
    params: &SolverParams,
) -> Result<(Trajectory, MildTerms), SolverError> {
    sweep(spec, control, noise, grid, SweepSource::Implicit(*params)).map(|o| (o.traj, o.terms))
}

/// Evaluate the mild-formula terms at the horizon for an existing trajectory
/// (all segments taken from it, no inner solves).
pub fn terms_for_trajectory(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &[SpectralVector],
    noise: &QfbmPath,
    grid: &Grid,
) -> Result<MildTerms, SolverError> {
    sweep(spec, control, noise, grid, SweepSource::Given(traj)).map(|o| o.terms)
}

#[derive(Debug, Clone, Default)]
pub struct PicardDiagnostics {
    /// Productive fixed-point updates before the stopping test fired.
    pub iterations: usize,
    pub sup_distances: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
}

/// Free evolution `y`: the zero-iterate of the fixed-point map.
pub fn free_trajectory(spec: &ProblemSpec, grid: &Grid) -> Trajectory {
    let phi0 = spec.phi.phi0();
    let values: Vec<SpectralVector> = grid
        .times()
        .iter()
        .map(|&t| crate::spectral::semigroup_apply(t, &phi0).unwrap())
        .collect();
    Trajectory {
        times: grid.times().to_vec(),
        posts: vec![None; values.len()],
        values,
        impulse_nodes: grid.impulse_nodes().to_vec(),
        noise_seed: None,
    }
}

/// Iterate the full mild-formula map from the free evolution until the
/// sup-distance between successive iterates drops below `tol`, recording
/// distances and their ratios. Agrees with [`simulate_mild`] at the fixed
/// point; reports divergence instead of returning silently when the map
/// expands.
pub fn picard_solve(
    spec: &ProblemSpec,
    control: &[SpectralVector],
    noise: &QfbmPath,
    grid: &Grid,
    tol: f64,
    max_iter: usize,
) -> Result<(Trajectory, PicardDiagnostics), SolverError> {
    let mut prev = free_trajectory(spec, grid);
    let mut diag = PicardDiagnostics::default();
    for app in 1..=max_iter {
        let out = sweep(spec, control, noise, grid, SweepSource::Given(&prev))?;
        let d = out.traj.sup_distance(&prev);
        if let Some(&last) = diag.sup_distances.last() {
            if last > 0.0 {
                diag.contraction_ratios.push(d / last);
            }
        }
        diag.sup_distances.push(d);
        if !d.is_finite() {
            diag.iterations = app;
            return Err(SolverError::PicardDivergence {
                last_ratio: f64::INFINITY,
                diagnostics: diag,
            });
        }
        if d < tol {
            diag.iterations = app - 1;
            return Ok((out.traj, diag));
        }
        prev = out.traj;
    }
    diag.iterations = max_iter;
    let last_ratio = diag.contraction_ratios.last().copied().unwrap_or(f64::NAN);
    if last_ratio >= 1.0 || !last_ratio.is_finite() {
        Err(SolverError::PicardDivergence {
            last_ratio,
            diagnostics: diag,
        })
    } else {
        Err(SolverError::PicardMaxIter { diagnostics: diag })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{FgnMethod, HurstParam};
    use crate::model::{DeclaredConstants, Impulse, ProblemSpecParams, SigmaSpec};
    use crate::phase_space::{InitialFunction, PhaseWeight};
    use crate::spectral::FracPower;
    use approx::assert_relative_eq;

    fn spec_with(
        n: usize,
        g: FieldMap,
        f: FieldMap,
        sigma_level: f64,
        impulses: Vec<Impulse>,
        phi: InitialFunction,
    ) -> ProblemSpec {
        ProblemSpec::new(ProblemSpecParams {
            n_modes: n,
            horizon: 1.0,
            hurst: HurstParam::new(0.7).unwrap(),
            beta: FracPower::new(0.75).unwrap(),
            neutral_g: g,
            drift_f: f,
            sigma: if sigma_level == 0.0 {
                SigmaSpec::zero(n)
            } else {
                SigmaSpec::constant(sigma_level, n)
            },
            lambdas: vec![1.0; n],
            b_c0: 1.0,
            b_c1: 0.0,
            impulses,
            allow_history_impulses: false,
            phi,
            weight: PhaseWeight::new(4.0).unwrap(),
            declared: DeclaredConstants::default(),
            xi_panels: 256,
        })
        .unwrap()
    }

    fn run(spec: &ProblemSpec, grid: &Grid, seed: u64) -> Trajectory {
        let noise = sample_noise(spec, grid, seed, FgnMethod::Circulant).unwrap();
        let u = zero_control(spec.n_modes, grid);
        simulate_mild(spec, &u, &noise, grid, &SolverParams::default()).unwrap()
    }

    #[test]
    fn grid_snaps_impulses_onto_nodes() {
        let grid = Grid::new(1.0, 1.0 / 8.0, &[0.3, 0.76]).unwrap();
        assert_eq!(grid.impulse_nodes(), &[2, 6]);
        let snapped = grid.snapped_times();
        assert_relative_eq!(snapped[0], 0.25);
        assert_relative_eq!(snapped[1], 0.75);
        assert!(Grid::new(1.0, 0.5, &[0.49, 0.51]).is_err());
    }

    #[test]
    fn zero_data_evolves_by_the_semigroup() {
        let n = 4;
        let phi =
            InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0, -0.5, 0.25, 0.1]));
        let spec = spec_with(n, FieldMap::Zero, FieldMap::Zero, 0.0, vec![], phi.clone());
        let grid = Grid::for_spec(&spec, 1.0 / 64.0).unwrap();
        let traj = run(&spec, &grid, 1);
        for (idx, &t) in grid.times().iter().enumerate() {
            for m in 1..=n {
                let expect = phi.phi0().coeff(m) * crate::spectral::semigroup_factor(m, t);
                assert_relative_eq!(traj.value(idx).coeff(m), expect, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn single_impulse_restarts_the_semigroup() {
        let n = 3;
        let v0 = SpectralVector::from_coeffs(vec![0.5, 0.2, -0.1]);
        let spec = spec_with(
            n,
            FieldMap::Zero,
            FieldMap::Zero,
            0.0,
            vec![Impulse {
                time: 0.5,
                map: ImpulseMap::Constant(v0.clone()),
            }],
            InitialFunction::zero(n),
        );
        let grid = Grid::for_spec(&spec, 1.0 / 64.0).unwrap();
        let traj = run(&spec, &grid, 2);
        let k_node = grid.impulse_nodes()[0];
        for idx in 0..=k_node {
            assert!(traj.value(idx).norm() < 1e-14);
        }
        assert_relative_eq!(traj.post(k_node).coeff(1), 0.5, epsilon = 1e-14);
        for idx in k_node + 1..grid.n_nodes() {
            let dt = grid.times()[idx] - grid.times()[k_node];
            for m in 1..=n {
                let expect = v0.coeff(m) * crate::spectral::semigroup_factor(m, dt);
                assert_relative_eq!(traj.value(idx).coeff(m), expect, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn jump_identity_holds_exactly() {
        let n = 2;
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0, 0.3]));
        let spec = spec_with(
            n,
            FieldMap::PointScale(0.1),
            FieldMap::PointScale(0.2),
            0.05,
            vec![
                Impulse {
                    time: 0.25,
                    map: ImpulseMap::Scale(0.1),
                },
                Impulse {
                    time: 0.75,
                    map: ImpulseMap::Scale(-0.2),
                },
            ],
            phi,
        );
        let grid = Grid::for_spec(&spec, 1.0 / 32.0).unwrap();
        let traj = run(&spec, &grid, 77);
        for (k, &node) in grid.impulse_nodes().iter().enumerate() {
            let left = traj.value(node);
            let right = traj.post(node);
            let expect = crate::model::apply_impulse(&spec, k, left).unwrap();
            assert!(right.sub(&expect).norm() < 1e-14);
        }
    }

    #[test]
    fn linear_drift_matches_scalar_ode() {
        // f(t, x_t) = a x(t) on one mode: x(t) = e^{(a−1)t} φ(0); the
        // left-point scheme converges at first order.
        let a = 0.8;
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0]));
        let spec = spec_with(1, FieldMap::Zero, FieldMap::PointScale(a), 0.0, vec![], phi);
        let exact = ((a - 1.0) * 1.0f64).exp();
        let mut errors = Vec::new();
        for cells in [128usize, 256, 512] {
            let grid = Grid::for_spec(&spec, 1.0 / cells as f64).unwrap();
            let traj = run(&spec, &grid, 3);
            errors.push((traj.final_value().coeff(1) - exact).abs());
        }
        let r1 = errors[0] / errors[1];
        let r2 = errors[1] / errors[2];
        assert!(r1 > 1.6 && r1 < 2.6, "first-order ratio {r1}");
        assert!(r2 > 1.6 && r2 < 2.6, "first-order ratio {r2}");
    }

    #[test]
    fn neutral_point_term_resolves_implicitly() {
        let gamma = 0.3;
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0, -0.4]));
        let spec = spec_with(
            2,
            FieldMap::PointScale(gamma),
            FieldMap::Zero,
            0.0,
            vec![],
            phi,
        );
        let grid = Grid::for_spec(&spec, 1.0 / 128.0).unwrap();
        let noise = sample_noise(&spec, &grid, 5, FgnMethod::Circulant).unwrap();
        let u = zero_control(2, &grid);
        let (traj, terms) =
            simulate_mild_with_terms(&spec, &u, &noise, &grid, &SolverParams::default()).unwrap();
        // x(T) equals the term split total.
        assert!(terms.total().sub(traj.final_value()).norm() < 1e-11);
        // Implicit relation: (1 − γ) x(T) = all terms except the anchor.
        let residual = traj
            .final_value()
            .scaled(1.0 - gamma)
            .sub(&terms.total().sub(&terms.g_anchor));
        assert!(residual.norm() < 1e-11);
    }

    #[test]
    fn control_superposition_is_exact_per_mode() {
        // On the linear problem the control convolution superposes exactly
        // and is independent of the noise realization.
        let n = 3;
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![0.2, 0.1, 0.0]));
        let spec = spec_with(n, FieldMap::Zero, FieldMap::Zero, 0.3, vec![], phi);
        let grid = Grid::for_spec(&spec, 1.0 / 32.0).unwrap();
        let noise_a = sample_noise(&spec, &grid, 11, FgnMethod::Circulant).unwrap();
        let noise_b = sample_noise(&spec, &grid, 12, FgnMethod::Circulant).unwrap();
        let mk = |seed: u64, scale: f64| -> Vec<SpectralVector> {
            let mut state = seed;
            (0..grid.n_nodes())
                .map(|_| {
                    SpectralVector::from_coeffs(
                        (0..n)
                            .map(|_| {
                                state ^= state << 13;
                                state ^= state >> 7;
                                state ^= state << 17;
                                scale * ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
                            })
                            .collect(),
                    )
                })
                .collect()
        };
        let u1 = mk(100, 1.0);
        let u2 = mk(200, 0.7);
        let u12: Vec<SpectralVector> = u1.iter().zip(&u2).map(|(a, b)| a.add(b)).collect();
        let p = SolverParams::default();
        let x_u12_a = simulate_mild(&spec, &u12, &noise_a, &grid, &p).unwrap();
        let x_u2_a = simulate_mild(&spec, &u2, &noise_a, &grid, &p).unwrap();
        let x_u12_b = simulate_mild(&spec, &u12, &noise_b, &grid, &p).unwrap();
        let x_u2_b = simulate_mild(&spec, &u2, &noise_b, &grid, &p).unwrap();
        for idx in [8, 16, 32] {
            let diff_a = x_u12_a.value(idx).sub(x_u2_a.value(idx));
            let diff_b = x_u12_b.value(idx).sub(x_u2_b.value(idx));
            assert!(diff_a.sub(&diff_b).norm() < 1e-13);
        }
        // And it equals the control term of u1 alone on zero data.
        let zero_spec = spec_with(
            n,
            FieldMap::Zero,
            FieldMap::Zero,
            0.0,
            vec![],
            InitialFunction::zero(n),
        );
        let noise_zero = sample_noise(&zero_spec, &grid, 1, FgnMethod::Circulant).unwrap();
        let x_u1_only = simulate_mild(&zero_spec, &u1, &noise_zero, &grid, &p).unwrap();
        for idx in [8, 16, 32] {
            let diff_a = x_u12_a.value(idx).sub(x_u2_a.value(idx));
            assert!(diff_a.sub(x_u1_only.value(idx)).norm() < 1e-13);
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let n = 2;
        let spec = spec_with(
            n,
            FieldMap::PointScale(0.2),
            FieldMap::PointScale(0.3),
            0.0,
            vec![],
            InitialFunction::zero(n),
        );
        let grid = Grid::for_spec(&spec, 1.0 / 16.0).unwrap();
        let traj = run(&spec, &grid, 4);
        for idx in 0..grid.n_nodes() {
            assert!(traj.value(idx).norm() < 1e-14);
        }
    }

    #[test]
    fn neutral_non_contraction_is_reported() {
        // |γ| > 1 makes the inner map expansive; damping cannot save it and
        // the error carries the observed quotient.
        let spec = spec_with(
            1,
            FieldMap::PointScale(1.2),
            FieldMap::Zero,
            0.0,
            vec![],
            InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0])),
        );
        let grid = Grid::for_spec(&spec, 0.25).unwrap();
        let noise = sample_noise(&spec, &grid, 6, FgnMethod::Cholesky).unwrap();
        let u = zero_control(1, &grid);
        let err = simulate_mild(
            &spec,
            &u,
            &noise,
            &grid,
            &SolverParams {
                inner_tol: 1e-12,
                max_inner: 30,
            },
        )
        .unwrap_err();
        match err {
            SolverError::NeutralNonContraction { quotient, .. } => {
                assert!(quotient > 1.0, "quotient {quotient}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn picard_state_independent_rhs_converges_in_one_update() {
        let n = 2;
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![0.5, 0.2]));
        let spec = spec_with(n, FieldMap::Zero, FieldMap::Zero, 0.4, vec![], phi);
        let grid = Grid::for_spec(&spec, 1.0 / 32.0).unwrap();
        let noise = sample_noise(&spec, &grid, 21, FgnMethod::Circulant).unwrap();
        let u = zero_control(n, &grid);
        let (_, diag) = picard_solve(&spec, &u, &noise, &grid, 1e-12, 20).unwrap();
        assert_eq!(diag.iterations, 1);
        assert_eq!(diag.sup_distances.len(), 2);
        assert_eq!(diag.sup_distances[1], 0.0);
    }

    #[test]
    fn picard_agrees_with_inner_solve_route() {
        let n = 2;
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0, -0.3]));
        let spec = spec_with(
            n,
            FieldMap::PointScale(0.25),
            FieldMap::PointScale(0.4),
            0.1,
            vec![Impulse {
                time: 0.5,
                map: ImpulseMap::Scale(0.05),
            }],
            phi,
        );
        let grid = Grid::for_spec(&spec, 1.0 / 64.0).unwrap();
        let noise = sample_noise(&spec, &grid, 31, FgnMethod::Circulant).unwrap();
        let u = zero_control(n, &grid);
        let tol = 1e-11;
        let direct = simulate_mild(&spec, &u, &noise, &grid, &SolverParams::default()).unwrap();
        let (fixed, diag) = picard_solve(&spec, &u, &noise, &grid, tol, 200).unwrap();
        assert!(
            direct.sup_distance(&fixed) < 50.0 * tol,
            "routes differ by {}",
            direct.sup_distance(&fixed)
        );
        assert!(diag.iterations >= 2);
    }

    #[test]
    fn picard_divergence_is_reported_not_returned() {
        let spec = spec_with(
            1,
            FieldMap::PointScale(2.0),
            FieldMap::Zero,
            0.0,
            vec![],
            InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0])),
        );
        let grid = Grid::for_spec(&spec, 1.0 / 16.0).unwrap();
        let noise = sample_noise(&spec, &grid, 41, FgnMethod::Cholesky).unwrap();
        let u = zero_control(1, &grid);
        match picard_solve(&spec, &u, &noise, &grid, 1e-10, 50) {
            Err(SolverError::PicardDivergence { last_ratio, .. }) => {
                assert!(last_ratio >= 1.0 || !last_ratio.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stochastic_convolution_couples_across_refinement() {
        // The same underlying draws on a fine grid, restricted to the coarse
        // one, give convolution errors that shrink with the step.
        let n = 2;
        let phi = InitialFunction::zero(n);
        let spec = spec_with(n, FieldMap::Zero, FieldMap::Zero, 0.5, vec![], phi);
        let coarse = Grid::for_spec(&spec, 1.0 / 64.0).unwrap();
        let mid = coarse.refined(2);
        let fine = coarse.refined(8);
        let noise_fine = sample_noise(&spec, &fine, 55, FgnMethod::Circulant).unwrap();
        let noise_mid = noise_fine.restrict(4);
        let noise_coarse = noise_fine.restrict(8);
        let p = SolverParams::default();
        let xt = |grid: &Grid, noise: &QfbmPath| {
            let u = zero_control(n, grid);
            simulate_mild(&spec, &u, noise, grid, &p)
                .unwrap()
                .final_value()
                .clone()
        };
        let ref_val = xt(&fine, &noise_fine);
        let e_coarse = xt(&coarse, &noise_coarse).sub(&ref_val).norm();
        let e_mid = xt(&mid, &noise_mid).sub(&ref_val).norm();
        assert!(
            e_mid < e_coarse,
            "refinement did not reduce error: {e_mid} vs {e_coarse}"
        );
    }

    #[test]
    fn z_view_vanishes_at_origin() {
        let phi = InitialFunction::constant(SpectralVector::from_coeffs(vec![1.0, 2.0]));
        let spec = spec_with(2, FieldMap::Zero, FieldMap::PointScale(0.3), 0.0, vec![], phi);
        let grid = Grid::for_spec(&spec, 0.125).unwrap();
        let traj = run(&spec, &grid, 8);
        assert!(traj.z_part(&spec, 0).norm() < 1e-14);
        let y = traj.free_part(&spec, 4);
        let z = traj.z_part(&spec, 4);
        assert!(y.add(&z).sub(traj.value(4)).norm() < 1e-14);
    }
}
