//! Dirichlet-Laplacian eigen-machinery on `[0, π]`.
//!
//! The state space is the span of the first `N` sine eigenfunctions
//! `e_n(ξ) = √(2/π) sin(nξ)`, on which the generator acts diagonally with
//! eigenvalues `−n²`. Every semigroup and fractional-power action is then a
//! per-mode multiplication and is evaluated exactly; the truncation to `N`
//! modes is the only discretization.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("convolution window [{t0}, {t1}] must satisfy t0 < t1 <= t = {t}")]
    BadWindow { t0: f64, t1: f64, t: f64 },
    #[error("fractional power exponent must lie in (0, 1], got {0}")]
    BadExponent(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Coefficients of a state against the sine eigenbasis, modes `n = 1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    coeffs: Vec<f64>,
}

impl SpectralVector {
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            coeffs: vec![0.0; n_modes],
        }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    /// Unit vector supported on a single mode (1-indexed).
    pub fn unit(n_modes: usize, mode: usize) -> Self {
        assert!(mode >= 1 && mode <= n_modes, "mode {mode} out of 1..={n_modes}");
        let mut v = Self::zeros(n_modes);
        v.coeffs[mode - 1] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of mode `n` (1-indexed).
    pub fn coeff(&self, mode: usize) -> f64 {
        self.coeffs[mode - 1]
    }

    pub fn set_coeff(&mut self, mode: usize, value: f64) {
        self.coeffs[mode - 1] = value;
    }

    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim());
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &Self) {
        assert_eq!(self.dim(), other.dim());
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += factor * b;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(1.0, other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Exponent of a fractional power `(−A)^α`, `0 < α ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FracPower {
    alpha: f64,
}

impl FracPower {
    pub fn new(alpha: f64) -> Result<Self, SpectralError> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self { alpha })
        } else {
            Err(SpectralError::BadExponent(alpha))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerSign {
    Positive,
    Negative,
}

/// Per-mode semigroup factor `e^{−n² t}`.
#[inline]
pub fn semigroup_factor(mode: usize, t: f64) -> f64 {
    let n2 = (mode * mode) as f64;
    (-n2 * t).exp()
}

/// Apply `S(t)`: mode `n` is damped by `e^{−n² t}`.
pub fn semigroup_apply(t: f64, v: &SpectralVector) -> Result<SpectralVector, SpectralError> {
    if t < 0.0 {
        return Err(SpectralError::NegativeTime(t));
    }
    let coeffs = v
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, c)| c * semigroup_factor(i + 1, t))
        .collect();
    Ok(SpectralVector::from_coeffs(coeffs))
}

/// Apply `(−A)^{±α}`: mode `n` is scaled by `n^{±2α}`.
///
/// At finite truncation every power is a bounded diagonal operator, so there
/// is no domain restriction.
pub fn frac_power_apply(power: FracPower, sign: PowerSign, v: &SpectralVector) -> SpectralVector {
    let exponent = match sign {
        PowerSign::Positive => 2.0 * power.alpha,
        PowerSign::Negative => -2.0 * power.alpha,
    };
    let coeffs = v
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, c)| c * ((i + 1) as f64).powf(exponent))
        .collect();
    SpectralVector::from_coeffs(coeffs)
}

/// Operator norm of `(−A)^{−α}` on the truncation: `sup_{n≤N} n^{−2α} = 1`,
/// attained at the first mode.
pub fn neg_power_norm(_power: FracPower, _n_modes: usize) -> f64 {
    1.0
}

/// The constant `M_α = (α/e)^α` with `sup_{μ>0} μ^α e^{−μ} = M_α`, so that
/// `‖(−A)^α S(t)‖ ≤ M_α t^{−α}` holds mode-wise.
pub fn analytic_power_bound(alpha: f64) -> f64 {
    (alpha / std::f64::consts::E).powf(alpha)
}

/// Exact convolution weights of one partition cell `[t0, t1]` against the
/// kernels `e^{−n²(t−s)}` and `−n² e^{−n²(t−s)}` at evaluation time `t`.
///
/// Returns `(w_S, w_AS)` with
/// `w_S = ∫_{t0}^{t1} e^{−n²(t−s)} ds = (e^{−n²(t−t1)} − e^{−n²(t−t0)}) / n²`
/// and `w_AS = −n² w_S`, so that a piecewise-constant integrand `g` summed
/// with `w_AS` over a full partition of `[0, t]` telescopes to
/// `(e^{−n²t} − 1) g = (S(t) − S(0)) g` per mode, which is what
/// `∫_0^t A S(t−s) g ds` evaluates to for constant `g`.
pub fn conv_weight_exact(
    mode: usize,
    t0: f64,
    t1: f64,
    t: f64,
) -> Result<(f64, f64), SpectralError> {
    if !(t0 < t1 && t1 <= t) {
        return Err(SpectralError::BadWindow { t0, t1, t });
    }
    let n2 = (mode * mode) as f64;
    let w_s = ((-n2 * (t - t1)).exp() - (-n2 * (t - t0)).exp()) / n2;
    let w_as = -n2 * w_s;
    Ok((w_s, w_as))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vec_of(coeffs: &[f64]) -> SpectralVector {
        SpectralVector::from_coeffs(coeffs.to_vec())
    }

    #[test]
    fn semigroup_at_zero_is_identity() {
        let v = vec_of(&[1.0, -2.5, 0.25]);
        assert_eq!(semigroup_apply(0.0, &v).unwrap(), v);
    }

    #[test]
    fn semigroup_rejects_negative_time() {
        let v = vec_of(&[1.0]);
        assert_eq!(
            semigroup_apply(-0.1, &v).unwrap_err(),
            SpectralError::NegativeTime(-0.1)
        );
    }

    #[test]
    fn semigroup_law_holds_to_machine_precision() {
        let v = vec_of(&[0.7, -1.3, 2.0, 0.01]);
        let lhs = semigroup_apply(0.35, &semigroup_apply(0.18, &v).unwrap()).unwrap();
        let rhs = semigroup_apply(0.53, &v).unwrap();
        for n in 1..=4 {
            assert_relative_eq!(lhs.coeff(n), rhs.coeff(n), max_relative = 1e-14);
        }
    }

    #[test]
    fn single_mode_log_two_halves() {
        let v = vec_of(&[1.0]);
        let out = semigroup_apply(std::f64::consts::LN_2, &v).unwrap();
        assert_relative_eq!(out.coeff(1), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn semigroup_is_a_contraction() {
        let v = vec_of(&[0.3, -0.8, 1.7]);
        for &t in &[0.0, 1e-3, 0.2, 5.0] {
            assert!(semigroup_apply(t, &v).unwrap().norm() <= v.norm() + 1e-15);
        }
    }

    #[test]
    fn frac_power_three_quarters_on_second_mode() {
        let p = FracPower::new(0.75).unwrap();
        let v = vec_of(&[0.0, 1.0, 0.0]);
        let out = frac_power_apply(p, PowerSign::Positive, &v);
        // n^{2α} at n = 2, α = 3/4 is 2^{3/2}
        assert_relative_eq!(out.coeff(2), 2f64.powf(1.5), max_relative = 1e-15);
        assert_eq!(out.coeff(1), 0.0);
        assert_eq!(out.coeff(3), 0.0);
    }

    #[test]
    fn frac_power_round_trip_is_identity() {
        let p = FracPower::new(0.6).unwrap();
        let v = vec_of(&[1.0, -0.5, 0.1, 7.0]);
        let back = frac_power_apply(
            p,
            PowerSign::Positive,
            &frac_power_apply(p, PowerSign::Negative, &v),
        );
        for n in 1..=4 {
            assert_relative_eq!(back.coeff(n), v.coeff(n), max_relative = 1e-14);
        }
    }

    #[test]
    fn negative_power_norm_is_one() {
        // sup_n n^{−2α} is attained at n = 1 for every α and truncation.
        let p = FracPower::new(0.75).unwrap();
        for n_modes in [1, 4, 64] {
            let sup = (1..=n_modes)
                .map(|n| (n as f64).powf(-1.5))
                .fold(0.0f64, f64::max);
            assert_eq!(sup, 1.0);
            assert_eq!(neg_power_norm(p, n_modes), 1.0);
        }
    }

    #[test]
    fn conv_weight_small_exponent_limit() {
        // w_S → t1 − t0 when n²(t − s) is uniformly small.
        let (w_s, _) = conv_weight_exact(1, 0.0, 1e-7, 1e-7).unwrap();
        assert_relative_eq!(w_s, 1e-7, max_relative = 1e-6);
    }

    #[test]
    fn conv_weight_full_window_mode_one() {
        let t = 0.8;
        let (w_s, _) = conv_weight_exact(1, 0.0, t, t).unwrap();
        assert_relative_eq!(w_s, 1.0 - (-t).exp(), max_relative = 1e-14);
    }

    #[test]
    fn conv_weight_rejects_bad_window() {
        assert!(conv_weight_exact(1, 0.0, 0.5, 0.4).is_err());
        assert!(conv_weight_exact(1, 0.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn as_weights_telescope_to_semigroup_difference() {
        // Σ_j w_AS over a full partition of [0, t] equals e^{−n²t} − 1
        // per mode, i.e. (S(t) − S(0)) applied to a constant integrand.
        for mode in [1usize, 3] {
            let t = 0.6;
            let cells = 64;
            let dt = t / cells as f64;
            let mut sum = 0.0;
            for j in 0..cells {
                let (_, w_as) =
                    conv_weight_exact(mode, j as f64 * dt, (j + 1) as f64 * dt, t).unwrap();
                sum += w_as;
            }
            let n2 = (mode * mode) as f64;
            assert_relative_eq!(sum, (-n2 * t).exp() - 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn analytic_bound_dominates_mode_decay() {
        // n^{2(1−β)} e^{−n²t} ≤ M_{1−β} t^{−(1−β)} on a (t, n) grid.
        let beta = 0.75;
        let alpha = 1.0 - beta;
        let m_alpha = analytic_power_bound(alpha);
        for mode in 1..=32usize {
            for k in 1..=50 {
                let t = 0.02 * k as f64;
                let lhs = ((mode * mode) as f64).powf(alpha) * semigroup_factor(mode, t);
                let rhs = m_alpha * t.powf(-alpha);
                assert!(
                    lhs <= rhs * (1.0 + 1e-12),
                    "mode {mode} t {t}: {lhs} > {rhs}"
                );
            }
        }
    }

    #[test]
    fn embedding_norms_are_ordered() {
        // ‖(−A)^{β'} v‖ ≤ ‖(−A)^{α'} v‖ for β' ≤ α' since every mode is ≥ 1.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let v = SpectralVector::from_coeffs((0..6).map(|_| next()).collect());
            let lo = FracPower::new(0.3).unwrap();
            let hi = FracPower::new(0.9).unwrap();
            let n_lo = frac_power_apply(lo, PowerSign::Positive, &v).norm();
            let n_hi = frac_power_apply(hi, PowerSign::Positive, &v).norm();
            assert!(n_lo <= n_hi * (1.0 + 1e-12));
        }
    }
}
