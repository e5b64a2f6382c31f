//! Infinite-delay phase space with exponential weight `h(s) = e^{rate·s}`
//! on `(−∞, 0]`, history segments `x_t(θ) = x(t+θ)`, and the standard
//! phase-space inequality as a runtime check.
//!
//! The norm is `‖ψ‖ = ∫_{−∞}^0 h(θ) sup_{θ≤s≤0} ‖ψ(s)‖ dθ`, read pathwise
//! during simulation (one realization at a time). Initial functions are
//! restricted to finite sums `Σ c_i e^{a_i θ} v_i` with `a_i ≥ 0`, plus an
//! optional tabulated correction of compact support, so the infinite tail is
//! never discretized: beyond a finite head window the running supremum is
//! bounded in closed form and the weighted tail integral is exact.

use thiserror::Error;

use crate::spectral::SpectralVector;

#[derive(Debug, Error, PartialEq)]
pub enum PhaseError {
    #[error("phase weight rate must be positive, got {0}")]
    BadRate(f64),
    #[error("initial-function term decays like e^{{{0}θ}} with θ ≤ 0: tail is not integrable")]
    NonIntegrableTail(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("tabulated history needs at least two samples on [start, 0], start < 0")]
    BadTable,
    #[error("time {0} is outside the recorded horizon")]
    BeyondHorizon(f64),
    #[error("time {0} is not a trajectory node")]
    NotANode(f64),
    #[error("history needs at least the node at t = 0")]
    EmptyHistory,
}

/// Which of the two values a segment anchored at an impulse node exposes
/// at `θ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Exponential phase weight `h(s) = e^{rate·s}`, `s ≤ 0`, with
/// `l = ∫_{−∞}^0 h = 1/rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseWeight {
    rate: f64,
}

impl PhaseWeight {
    pub fn new(rate: f64) -> Result<Self, PhaseError> {
        if rate > 0.0 && rate.is_finite() {
            Ok(Self { rate })
        } else {
            Err(PhaseError::BadRate(rate))
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn l(&self) -> f64 {
        1.0 / self.rate
    }
}

/// One parametric history term `coeff · e^{decay·θ} · vector`, `decay ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpTerm {
    pub coeff: f64,
    pub decay: f64,
    pub vector: SpectralVector,
}

/// Tabulated correction on `[start, 0]`, uniform step, added to the
/// parametric part and zero outside its window.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiTable {
    pub start: f64,
    pub values: Vec<SpectralVector>,
}

/// Initial function φ on `(−∞, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialFunction {
    terms: Vec<ExpTerm>,
    table: Option<PhiTable>,
    dim: usize,
}

/// Head-window sample count used by the norm quadrature.
const HEAD_SAMPLES: usize = 4096;

impl InitialFunction {
    pub fn new(
        dim: usize,
        terms: Vec<ExpTerm>,
        table: Option<PhiTable>,
    ) -> Result<Self, PhaseError> {
        for term in &terms {
            if term.decay < 0.0 || !term.decay.is_finite() {
                return Err(PhaseError::NonIntegrableTail(term.decay));
            }
            if term.vector.dim() != dim {
                return Err(PhaseError::DimensionMismatch(term.vector.dim(), dim));
            }
            if !term.coeff.is_finite() || !term.vector.is_finite() {
                return Err(PhaseError::NonIntegrableTail(f64::NAN));
            }
        }
        if let Some(t) = &table {
            if t.values.len() < 2 || t.start >= 0.0 {
                return Err(PhaseError::BadTable);
            }
            for v in &t.values {
                if v.dim() != dim {
                    return Err(PhaseError::DimensionMismatch(v.dim(), dim));
                }
            }
        }
        Ok(Self { terms, table, dim })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            terms: Vec::new(),
            table: None,
            dim,
        }
    }

    /// Constant history `v` (single term with zero decay).
    pub fn constant(v: SpectralVector) -> Self {
        let dim = v.dim();
        Self {
            terms: vec![ExpTerm {
                coeff: 1.0,
                decay: 0.0,
                vector: v,
            }],
            table: None,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[ExpTerm] {
        &self.terms
    }

    pub fn table(&self) -> Option<&PhiTable> {
        self.table.as_ref()
    }

    pub fn eval(&self, theta: f64) -> SpectralVector {
        debug_assert!(theta <= 1e-12);
        let mut out = SpectralVector::zeros(self.dim);
        for term in &self.terms {
            out.add_scaled(term.coeff * (term.decay * theta).exp(), &term.vector);
        }
        if let Some(table) = &self.table {
            if theta >= table.start {
                let m = table.values.len() - 1;
                let step = -table.start / m as f64;
                let pos = (theta - table.start) / step;
                let idx = (pos.floor() as usize).min(m - 1);
                let frac = pos - idx as f64;
                out.add_scaled(1.0 - frac, &table.values[idx]);
                out.add_scaled(frac, &table.values[idx + 1]);
            }
        }
        out
    }

    pub fn phi0(&self) -> SpectralVector {
        self.eval(0.0)
    }

    pub fn value_norm(&self, theta: f64) -> f64 {
        self.eval(theta).norm()
    }

    /// Formal difference `self − other`, used for Lipschitz probing.
    pub fn difference(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        assert!(self.table.is_none() && other.table.is_none());
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|t| ExpTerm {
            coeff: -t.coeff,
            decay: t.decay,
            vector: t.vector.clone(),
        }));
        Self {
            terms,
            table: None,
            dim: self.dim,
        }
    }

    /// Upper bound for `sup_{θ ≤ w} ‖φ(θ)‖` valid whenever `w` is at or below
    /// the table window: the zero-decay part is constant and every decaying
    /// term is dominated by its value at `w`.
    fn tail_sup_bound(&self, w: f64) -> f64 {
        let mut constant = SpectralVector::zeros(self.dim);
        let mut decaying = 0.0;
        for term in &self.terms {
            if term.decay == 0.0 {
                constant.add_scaled(term.coeff, &term.vector);
            } else {
                decaying += term.coeff.abs() * term.vector.norm() * (term.decay * w).exp();
            }
        }
        constant.norm() + decaying
    }

    /// Head window for norm quadrature: deep enough that the weight has
    /// decayed below any useful resolution and the table is covered.
    /// Scale-invariant, so the norm stays absolutely homogeneous.
    fn head_window(&self, weight: &PhaseWeight) -> f64 {
        let mut w: f64 = -1.0;
        if let Some(t) = &self.table {
            w = w.min(t.start);
        }
        w.min(-50.0 / weight.rate())
    }
}

/// Ascending `(θ, ‖·‖)` samples with the right-to-left running supremum
/// integrated cell-exactly against `h(θ) = e^{rθ}`, plus the closed-form
/// tail below the first sample.
fn weighted_sup_integral(samples: &mut [(f64, f64)], tail_bound: f64, rate: f64) -> f64 {
    debug_assert!(!samples.is_empty());
    // Running supremum, right to left.
    for i in (0..samples.len() - 1).rev() {
        samples[i].1 = samples[i].1.max(samples[i + 1].1);
    }
    let mut total = 0.0;
    for pair in samples.windows(2) {
        let (t0, m0) = pair[0];
        let (t1, m1) = pair[1];
        if t1 <= t0 {
            continue;
        }
        let cell = ((rate * t1).exp() - (rate * t0).exp()) / rate;
        total += 0.5 * (m0 + m1) * cell;
    }
    let (w, m_head) = samples[0];
    total + m_head.max(tail_bound) * (rate * w).exp() / rate
}

/// `‖φ‖` in the weighted phase space, exact on the tail.
pub fn bh_norm_phi(phi: &InitialFunction, weight: &PhaseWeight) -> f64 {
    bh_norm_phi_with(phi, weight, HEAD_SAMPLES)
}

/// Resolution-controlled variant for discretization studies.
pub fn bh_norm_phi_with(phi: &InitialFunction, weight: &PhaseWeight, head_samples: usize) -> f64 {
    let w = phi.head_window(weight);
    let mut samples = phi_head_samples(phi, w, head_samples);
    weighted_sup_integral(&mut samples, phi.tail_sup_bound(w), weight.rate())
}

fn phi_head_samples(phi: &InitialFunction, w: f64, n: usize) -> Vec<(f64, f64)> {
    let step = -w / n as f64;
    (0..=n)
        .map(|k| {
            let theta = (w + k as f64 * step).min(0.0);
            (theta, phi.value_norm(theta))
        })
        .collect()
}

/// A history segment `x_t`: initial function plus the recorded trajectory up
/// to the anchor node, with left/right values at impulse nodes.
#[derive(Debug, Clone)]
pub struct History<'a> {
    phi: &'a InitialFunction,
    times: &'a [f64],
    values: &'a [SpectralVector],
    posts: &'a [Option<SpectralVector>],
    anchor: usize,
    side: Side,
}

impl<'a> History<'a> {
    pub fn new(
        phi: &'a InitialFunction,
        times: &'a [f64],
        values: &'a [SpectralVector],
        posts: &'a [Option<SpectralVector>],
        anchor: usize,
        side: Side,
    ) -> Result<Self, PhaseError> {
        if times.is_empty() || values.len() != times.len() || posts.len() != times.len() {
            return Err(PhaseError::EmptyHistory);
        }
        if anchor >= times.len() {
            return Err(PhaseError::BeyondHorizon(f64::NAN));
        }
        if values[0].dim() != phi.dim() {
            return Err(PhaseError::DimensionMismatch(values[0].dim(), phi.dim()));
        }
        Ok(Self {
            phi,
            times,
            values,
            posts,
            anchor,
            side,
        })
    }

    pub fn anchor_time(&self) -> f64 {
        self.times[self.anchor]
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn phi(&self) -> &InitialFunction {
        self.phi
    }

    /// Value the segment exposes at `θ = 0`.
    pub fn anchor_value(&self) -> &SpectralVector {
        match self.side {
            Side::Left => &self.values[self.anchor],
            Side::Right => self.posts[self.anchor]
                .as_ref()
                .unwrap_or(&self.values[self.anchor]),
        }
    }

    /// Value carried on the cell to the right of node `idx` (post-impulse
    /// when the node jumps).
    fn cell_value(&self, idx: usize) -> &SpectralVector {
        self.posts[idx].as_ref().unwrap_or(&self.values[idx])
    }

    /// Evaluate `x_t(θ) = x(t + θ)` for `θ ≤ 0`. Interior nodes follow the
    /// left-limit convention `x(t_k) = x(t_k^−)`; between nodes the recorded
    /// trajectory is interpolated linearly within each cell.
    pub fn eval(&self, theta: f64) -> SpectralVector {
        let t_abs = self.anchor_time() + theta;
        let tol = 1e-12 * self.anchor_time().max(1.0);
        if t_abs < -tol {
            return self.phi.eval(t_abs);
        }
        if t_abs <= tol {
            return self.values[0].clone();
        }
        let anchor_t = self.anchor_time();
        if t_abs >= anchor_t - tol {
            return self.anchor_value().clone();
        }
        // Locate the cell containing t_abs among nodes 0..=anchor.
        let mut lo = 0usize;
        let mut hi = self.anchor;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.times[mid] <= t_abs {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (self.times[lo] - t_abs).abs() <= tol {
            return self.values[lo].clone();
        }
        if (self.times[hi] - t_abs).abs() <= tol {
            return self.values[hi].clone();
        }
        let frac = (t_abs - self.times[lo]) / (self.times[hi] - self.times[lo]);
        let mut out = self.cell_value(lo).scaled(1.0 - frac);
        out.add_scaled(frac, &self.values[hi]);
        out
    }

    /// Norm samples attained by the path on `[0, t]`: both sides at interior
    /// impulse nodes, the side-dependent value at the anchor (plus the left
    /// limit, which is always attained from below).
    fn trajectory_norm_samples(&self) -> Vec<(f64, f64)> {
        let t = self.anchor_time();
        let mut out = Vec::with_capacity(self.anchor + 1);
        for i in 0..=self.anchor {
            let mut m = self.values[i].norm();
            if i < self.anchor {
                if let Some(post) = &self.posts[i] {
                    m = m.max(post.norm());
                }
            } else if self.side == Side::Right {
                if let Some(post) = &self.posts[i] {
                    m = m.max(post.norm());
                }
            }
            out.push((self.times[i] - t, m));
        }
        out
    }

    fn sup_on_zero_t(&self) -> f64 {
        self.trajectory_norm_samples()
            .iter()
            .map(|&(_, m)| m)
            .fold(0.0, f64::max)
    }
}

/// Build the segment anchored at trajectory time `t` (must be a node).
pub fn segment_at<'a>(
    phi: &'a InitialFunction,
    times: &'a [f64],
    values: &'a [SpectralVector],
    posts: &'a [Option<SpectralVector>],
    t: f64,
    side: Side,
) -> Result<History<'a>, PhaseError> {
    if times.is_empty() {
        return Err(PhaseError::EmptyHistory);
    }
    if t > *times.last().unwrap() + 1e-12 {
        return Err(PhaseError::BeyondHorizon(t));
    }
    let tol = 1e-9 * t.abs().max(1.0);
    let anchor = times
        .iter()
        .position(|&x| (x - t).abs() <= tol)
        .ok_or(PhaseError::NotANode(t))?;
    History::new(phi, times, values, posts, anchor, side)
}

/// `‖x_t‖` for a recorded segment: running supremum over the trajectory part
/// and the initial function's head window, exact exponential tail.
pub fn bh_norm_segment(hist: &History, weight: &PhaseWeight) -> f64 {
    let t = hist.anchor_time();
    let w = hist.phi.head_window(weight);
    let mut samples = Vec::new();
    // φ part, θ' ∈ [w, 0) mapped to θ = θ' − t; θ' = 0 duplicates node 0.
    let n = HEAD_SAMPLES;
    let step = -w / n as f64;
    for k in 0..n {
        let theta_phi = w + k as f64 * step;
        samples.push((theta_phi - t, hist.phi.value_norm(theta_phi)));
    }
    samples.extend(hist.trajectory_norm_samples());
    samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    weighted_sup_integral(&mut samples, hist.phi.tail_sup_bound(w), weight.rate())
}

/// The two-sided phase-space inequality
/// `l ‖x(t)‖ ≤ ‖x_t‖ ≤ l sup_{0≤s≤t} ‖x(s)‖ + ‖x_0‖`
/// evaluated with one shared discretization so that it holds cell by cell.
#[derive(Debug, Clone)]
pub struct Lemma24Report {
    pub lhs: f64,
    pub mid: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn check_lemma24(hist: &History, weight: &PhaseWeight) -> Lemma24Report {
    let l = weight.l();
    let lhs = l * hist.anchor_value().norm();
    let mid = bh_norm_segment(hist, weight);
    let w = hist.phi.head_window(weight);
    let mut phi_samples = phi_head_samples(hist.phi, w, HEAD_SAMPLES);
    let phi_norm =
        weighted_sup_integral(&mut phi_samples, hist.phi.tail_sup_bound(w), weight.rate());
    let rhs = l * hist.sup_on_zero_t() + phi_norm;
    let scale = lhs.abs().max(mid.abs()).max(rhs.abs()).max(1e-300);
    let tol = 1e-10 * scale;
    Lemma24Report {
        lhs,
        mid,
        rhs,
        holds: lhs <= mid + tol && mid <= rhs + tol,
    }
}

/// Seminorm of the delay–impulse space: `‖x_0‖ + sup_{0≤t≤T} ‖x(t)‖`.
/// Diagnostic only; the solver never gates on it.
pub fn bdi_seminorm(hist: &History, weight: &PhaseWeight) -> f64 {
    bh_norm_phi(hist.phi, weight) + hist.sup_on_zero_t()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sv(coeffs: &[f64]) -> SpectralVector {
        SpectralVector::from_coeffs(coeffs.to_vec())
    }

    fn weight4() -> PhaseWeight {
        PhaseWeight::new(4.0).unwrap()
    }

    #[test]
    fn weight_l_is_reciprocal_rate() {
        assert_eq!(weight4().l(), 0.25);
        assert!(PhaseWeight::new(0.0).is_err());
        assert!(PhaseWeight::new(-1.0).is_err());
    }

    #[test]
    fn rejects_growing_tail() {
        let err = InitialFunction::new(
            1,
            vec![ExpTerm {
                coeff: 1.0,
                decay: -0.5,
                vector: sv(&[1.0]),
            }],
            None,
        )
        .unwrap_err();
        assert_eq!(err, PhaseError::NonIntegrableTail(-0.5));
    }

    #[test]
    fn norm_of_zero_is_zero() {
        let phi = InitialFunction::zero(3);
        assert_eq!(bh_norm_phi(&phi, &weight4()), 0.0);
    }

    #[test]
    fn norm_of_constant_is_scaled_l() {
        // ψ ≡ c: ∫ e^{4θ} |c| dθ = |c| / 4, exact under the cell rule.
        let c = -3.0;
        let phi = InitialFunction::constant(sv(&[c]));
        assert_relative_eq!(
            bh_norm_phi(&phi, &weight4()),
            c.abs() / 4.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn norm_of_decaying_exponential() {
        // ψ(θ) = e^{θ} c: the running sup over [θ, 0] is |c|, so the norm is
        // again |c| / 4.
        let phi = InitialFunction::new(
            1,
            vec![ExpTerm {
                coeff: 2.5,
                decay: 1.0,
                vector: sv(&[1.0]),
            }],
            None,
        )
        .unwrap();
        assert_relative_eq!(bh_norm_phi(&phi, &weight4()), 2.5 / 4.0, max_relative = 1e-13);
    }

    #[test]
    fn norm_is_absolutely_homogeneous() {
        let base = InitialFunction::new(
            2,
            vec![
                ExpTerm {
                    coeff: 1.0,
                    decay: 0.7,
                    vector: sv(&[1.0, -0.3]),
                },
                ExpTerm {
                    coeff: -0.4,
                    decay: 0.0,
                    vector: sv(&[0.2, 0.9]),
                },
            ],
            None,
        )
        .unwrap();
        let w = weight4();
        let n1 = bh_norm_phi(&base, &w);
        for &alpha in &[2.0, -3.5, 0.125] {
            let scaled = InitialFunction::new(
                2,
                base.terms()
                    .iter()
                    .map(|t| ExpTerm {
                        coeff: alpha * t.coeff,
                        decay: t.decay,
                        vector: t.vector.clone(),
                    })
                    .collect(),
                None,
            )
            .unwrap();
            assert_relative_eq!(
                bh_norm_phi(&scaled, &w),
                alpha.abs() * n1,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn norm_satisfies_triangle_inequality() {
        // Random pairs sharing the decay structure, so all three norms see
        // identical sample grids and the inequality holds cell by cell.
        let w = weight4();
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let decays = [0.0, 0.6, 2.3];
        for _ in 0..40 {
            let make = |rng: &mut dyn FnMut() -> f64| {
                InitialFunction::new(
                    2,
                    decays
                        .iter()
                        .map(|&d| ExpTerm {
                            coeff: rng(),
                            decay: d,
                            vector: sv(&[rng(), rng()]),
                        })
                        .collect(),
                    None,
                )
                .unwrap()
            };
            let x = make(&mut next);
            let y = make(&mut next);
            let sum = x.difference(&InitialFunction::new(
                2,
                y.terms()
                    .iter()
                    .map(|t| ExpTerm {
                        coeff: -t.coeff,
                        decay: t.decay,
                        vector: t.vector.clone(),
                    })
                    .collect(),
                None,
            )
            .unwrap());
            let nx = bh_norm_phi(&x, &w);
            let ny = bh_norm_phi(&y, &w);
            let ns = bh_norm_phi(&sum, &w);
            assert!(
                ns <= nx + ny + 1e-10 * (nx + ny).max(1.0),
                "triangle violated: {ns} > {nx} + {ny}"
            );
        }
    }

    #[test]
    fn discretization_error_shrinks_linearly() {
        // A kinked running sup: coefficients chosen so the sup moves.
        let phi = InitialFunction::new(
            1,
            vec![
                ExpTerm {
                    coeff: 1.0,
                    decay: 0.0,
                    vector: sv(&[0.4]),
                },
                ExpTerm {
                    coeff: 1.0,
                    decay: 2.0,
                    vector: sv(&[1.0]),
                },
            ],
            None,
        )
        .unwrap();
        let w = weight4();
        let coarse = bh_norm_phi_with(&phi, &w, 256);
        let medium = bh_norm_phi_with(&phi, &w, 512);
        let fine = bh_norm_phi_with(&phi, &w, 1024);
        let d1 = (coarse - medium).abs();
        let d2 = (medium - fine).abs();
        assert!(d2 <= 0.8 * d1 + 1e-13, "d1 = {d1}, d2 = {d2}");
    }

    fn flat_posts(n: usize) -> Vec<Option<SpectralVector>> {
        vec![None; n]
    }

    #[test]
    fn segment_at_zero_is_phi() {
        let phi = InitialFunction::constant(sv(&[2.0]));
        let times = [0.0];
        let values = [phi.phi0()];
        let posts = flat_posts(1);
        let hist = segment_at(&phi, &times, &values, &posts, 0.0, Side::Left).unwrap();
        for &theta in &[-3.0, -0.7, 0.0] {
            assert_eq!(hist.eval(theta), phi.eval(theta));
        }
    }

    #[test]
    fn segment_left_flag_exposes_pre_impulse_value() {
        let phi = InitialFunction::constant(sv(&[1.0]));
        let times = [0.0, 0.5, 1.0];
        let values = [sv(&[1.0]), sv(&[0.8]), sv(&[0.9])];
        let mut posts = flat_posts(3);
        posts[1] = Some(sv(&[1.3]));
        let left = segment_at(&phi, &times, &values, &posts, 0.5, Side::Left).unwrap();
        assert_eq!(left.anchor_value(), &sv(&[0.8]));
        let right = segment_at(&phi, &times, &values, &posts, 0.5, Side::Right).unwrap();
        assert_eq!(right.anchor_value(), &sv(&[1.3]));
    }

    #[test]
    fn segment_reindexing_identity() {
        // x_t(θ) = x_{t+δ}(θ − δ) wherever both are defined.
        let phi = InitialFunction::new(
            1,
            vec![ExpTerm {
                coeff: 1.0,
                decay: 0.5,
                vector: sv(&[1.0]),
            }],
            None,
        )
        .unwrap();
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let values: Vec<SpectralVector> =
            (0..=10).map(|i| sv(&[(i as f64 * 0.37).sin()])).collect();
        let posts = flat_posts(11);
        let at6 = segment_at(&phi, &times, &values, &posts, 0.6, Side::Left).unwrap();
        let at9 = segment_at(&phi, &times, &values, &posts, 0.9, Side::Left).unwrap();
        for &theta in &[-0.9, -0.45, -0.3, -0.05, 0.0] {
            let a = at6.eval(theta);
            let b = at9.eval(theta - 0.3);
            assert_relative_eq!(a.coeff(1), b.coeff(1), max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn segment_beyond_horizon_is_rejected() {
        let phi = InitialFunction::constant(sv(&[1.0]));
        let times = [0.0, 0.5];
        let values = [sv(&[1.0]), sv(&[1.0])];
        let posts = flat_posts(2);
        assert!(matches!(
            segment_at(&phi, &times, &values, &posts, 0.75, Side::Left),
            Err(PhaseError::BeyondHorizon(_))
        ));
        assert!(matches!(
            segment_at(&phi, &times, &values, &posts, 0.25, Side::Left),
            Err(PhaseError::NotANode(_))
        ));
    }

    #[test]
    fn lemma24_constant_path_is_tight_on_the_left() {
        // Constant path c with φ ≡ c: lhs = l|c| exactly, mid = l|c|.
        let c = 1.7;
        let phi = InitialFunction::constant(sv(&[c]));
        let times: Vec<f64> = (0..=8).map(|i| i as f64 * 0.125).collect();
        let values: Vec<SpectralVector> = (0..=8).map(|_| sv(&[c])).collect();
        let posts = flat_posts(9);
        let hist = segment_at(&phi, &times, &values, &posts, 1.0, Side::Left).unwrap();
        let report = check_lemma24(&hist, &weight4());
        assert!(report.holds);
        assert_relative_eq!(report.lhs, 0.25 * c, max_relative = 1e-12);
        assert_relative_eq!(report.mid, 0.25 * c, max_relative = 1e-10);
        assert_relative_eq!(report.rhs, 0.5 * c, max_relative = 1e-10);
    }

    #[test]
    fn lemma24_zero_path_collapses() {
        let phi = InitialFunction::zero(2);
        let times = [0.0, 0.5, 1.0];
        let values = [
            SpectralVector::zeros(2),
            SpectralVector::zeros(2),
            SpectralVector::zeros(2),
        ];
        let posts = flat_posts(3);
        let hist = segment_at(&phi, &times, &values, &posts, 1.0, Side::Left).unwrap();
        let report = check_lemma24(&hist, &weight4());
        assert_eq!((report.lhs, report.mid, report.rhs), (0.0, 0.0, 0.0));
        assert!(report.holds);
    }

    #[test]
    fn lemma24_holds_on_synthetic_trajectories() {
        // Random piecewise trajectories with jumps; the inequality must hold
        // at every node for every seed.
        let mut state = 0xdeadbeefcafeu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let w = weight4();
        for _ in 0..100 {
            let phi = InitialFunction::new(
                2,
                vec![
                    ExpTerm {
                        coeff: next(),
                        decay: 0.0,
                        vector: sv(&[next(), next()]),
                    },
                    ExpTerm {
                        coeff: next(),
                        decay: 1.5,
                        vector: sv(&[next(), next()]),
                    },
                ],
                None,
            )
            .unwrap();
            let n = 16;
            let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
            let mut values = vec![phi.phi0()];
            for _ in 1..=n {
                let prev = values.last().unwrap().clone();
                let mut v = prev.scaled(0.9);
                v.add_scaled(0.3, &sv(&[next(), next()]));
                values.push(v);
            }
            let mut posts = flat_posts(n + 1);
            posts[n / 2] = Some(values[n / 2].scaled(1.4));
            for idx in [1, n / 2, n - 1, n] {
                let hist =
                    History::new(&phi, &times, &values, &posts, idx, Side::Left).unwrap();
                let report = check_lemma24(&hist, &w);
                assert!(
                    report.holds,
                    "lemma violated at node {idx}: {} {} {}",
                    report.lhs, report.mid, report.rhs
                );
            }
        }
    }

    #[test]
    fn bdi_seminorm_combines_norm_and_sup() {
        let phi = InitialFunction::constant(sv(&[2.0]));
        let times = [0.0, 1.0];
        let values = [sv(&[2.0]), sv(&[5.0])];
        let posts = flat_posts(2);
        let hist = segment_at(&phi, &times, &values, &posts, 1.0, Side::Left).unwrap();
        assert_relative_eq!(
            bdi_seminorm(&hist, &weight4()),
            2.0 / 4.0 + 5.0,
            max_relative = 1e-10
        );
    }
}
