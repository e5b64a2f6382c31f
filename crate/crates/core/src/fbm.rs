//! Fractional Brownian motion, fractional Gaussian noise, and Q-fBm sampling,
//! together with Wiener integrals of deterministic step integrands.
//!
//! A one-dimensional fBm with Hurst parameter `H ∈ (1/2, 1)` is the centered
//! Gaussian process with covariance
//! `R_H(s, t) = ½ (t^{2H} + s^{2H} − |t − s|^{2H})`.
//! Its increments on a uniform grid form stationary fractional Gaussian noise
//! with autocovariance
//! `γ(k) = ½ dt^{2H} (|k+1|^{2H} − 2|k|^{2H} + |k−1|^{2H})`.
//!
//! Three samplers are provided: exact Cholesky factorization of the
//! increment covariance (the reference method), circulant embedding
//! (Davies–Harte, O(n log n)), and Hosking's conditional recursion. All three
//! are exact in distribution for H > 1/2; circulant embedding falls back to
//! Cholesky with a warning flag in the unlikely event that rounding produces
//! a negative embedding eigenvalue.
//!
//! Hilbert-space-valued noise is assembled mode by mode:
//! `B^H(t) = Σ_n √λ_n e_n β_n^H(t)` with independent scalar paths `β_n^H`
//! whose seeds derive deterministically from one master seed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::quad::adaptive_simpson;
use crate::spectral::SpectralVector;

#[derive(Debug, Error, PartialEq)]
pub enum FbmError {
    #[error("Hurst parameter must lie in (1/2, 1), got {0}")]
    InvalidHurst(f64),
    #[error("time arguments must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("kernel K_H(t, s) diverges at s = 0 with t > 0")]
    SingularKernelArgument,
    #[error("need at least one step, got {0}")]
    EmptySteps(usize),
    #[error("step size must be positive, got {0}")]
    InvalidStep(f64),
    #[error("grid must be nonempty, start at 0 and strictly increase")]
    BadGrid,
    #[error("mode weights must be nonnegative, got lambda[{0}] = {1}")]
    NegativeLambda(usize, f64),
    #[error("time {0} is not a grid node")]
    OffGridTime(f64),
    #[error("integrand returned {0} mode multipliers, path carries {1} modes")]
    ModeMismatch(usize, usize),
}

/// Hurst parameter restricted to the long-memory range `(1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurstParam {
    value: f64,
}

impl HurstParam {
    pub fn new(value: f64) -> Result<Self, FbmError> {
        if value > 0.5 && value < 1.0 {
            Ok(Self { value })
        } else {
            Err(FbmError::InvalidHurst(value))
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Covariance `R_H(s, t) = ½ (t^{2H} + s^{2H} − |t−s|^{2H})` of fBm.
pub fn cov_rh(s: f64, t: f64, hurst: HurstParam) -> Result<f64, FbmError> {
    if s < 0.0 {
        return Err(FbmError::NegativeTime(s));
    }
    if t < 0.0 {
        return Err(FbmError::NegativeTime(t));
    }
    let two_h = 2.0 * hurst.value();
    Ok(0.5 * (t.powf(two_h) + s.powf(two_h) - (t - s).abs().powf(two_h)))
}

/// Autocovariance of fractional Gaussian noise at lag `k` for step `dt`.
pub fn fgn_autocov(k: usize, dt: f64, hurst: HurstParam) -> f64 {
    let two_h = 2.0 * hurst.value();
    let k = k as f64;
    0.5 * dt.powf(two_h) * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
}

/// Normalizer `c_H = √(H(2H−1) / B(2−2H, H−1/2))` of the representation
/// kernel, with `B` the Beta function.
pub fn kernel_normalizer(hurst: HurstParam) -> f64 {
    let h = hurst.value();
    let beta = (ln_gamma(2.0 - 2.0 * h) + ln_gamma(h - 0.5) - ln_gamma(1.5 - h)).exp();
    (h * (2.0 * h - 1.0) / beta).sqrt()
}

/// Representation kernel
/// `K_H(t, s) = c_H s^{1/2−H} ∫_s^t (u−s)^{H−3/2} u^{H−1/2} du` for `t > s`,
/// and `0` for `t ≤ s`.
///
/// The integrable endpoint singularity at `u = s` is removed by the
/// substitution `v = (u−s)^{H−1/2}`, after which the integrand is continuous
/// and adaptive Simpson quadrature applies.
pub fn kernel_kh(t: f64, s: f64, hurst: HurstParam) -> Result<f64, FbmError> {
    if t < 0.0 {
        return Err(FbmError::NegativeTime(t));
    }
    if s < 0.0 {
        return Err(FbmError::NegativeTime(s));
    }
    if t <= s {
        return Ok(0.0);
    }
    if s == 0.0 {
        return Err(FbmError::SingularKernelArgument);
    }
    let h = hurst.value();
    let gap = h - 0.5;
    let v_max = (t - s).powf(gap);
    let q = 1.0 / gap;
    let integrand = |v: f64| (s + v.powf(q)).powf(gap);
    let scale = v_max * integrand(v_max).max(1e-300);
    let integral = adaptive_simpson(&integrand, 0.0, v_max, 1e-13 * scale) / gap;
    Ok(kernel_normalizer(hurst) * s.powf(0.5 - h) * integral)
}

/// `∫_0^t K_H(t, s)² ds`, evaluated with the endpoint singularity at `s = 0`
/// absorbed by the substitution `s = t x^p`. Equals `t^{2H}` exactly by the
/// isometry of the Wiener representation; the defect is a quadrature check.
pub fn kernel_kh_sq_integral(t: f64, hurst: HurstParam) -> Result<f64, FbmError> {
    if t <= 0.0 {
        return Err(FbmError::NegativeTime(t));
    }
    let h = hurst.value();
    let p = (1.0 / (2.0 - 2.0 * h)).floor() + 2.0;
    let integrand = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let s = t * x.powf(p);
        if s >= t {
            return 0.0;
        }
        let k = kernel_kh(t, s, hurst).expect("interior point");
        k * k * t * p * x.powf(p - 1.0)
    };
    let scale = t.powf(2.0 * h);
    Ok(adaptive_simpson(&integrand, 0.0, 1.0, 1e-7 * scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnMethod {
    Cholesky,
    Circulant,
    Hosking,
}

impl FgnMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FgnMethod::Cholesky => "cholesky",
            FgnMethod::Circulant => "circulant",
            FgnMethod::Hosking => "hosking",
        }
    }
}

/// One sampled scalar fBm path on a uniform grid starting at 0.
#[derive(Debug, Clone)]
pub struct FbmPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub hurst: HurstParam,
    pub seed: u64,
    pub method: FgnMethod,
    /// Set when circulant embedding had to fall back to Cholesky.
    pub cholesky_fallback: bool,
}

impl FbmPath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

enum SamplerKind {
    Cholesky {
        factor: DMatrix<f64>,
    },
    Circulant {
        sqrt_eigs: Vec<f64>,
        fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    },
    Hosking {
        // Row k holds the conditional-mean coefficients on the k previous
        // increments; innovations[k] is the conditional standard deviation.
        phi: Vec<Vec<f64>>,
        innovations: Vec<f64>,
    },
}

/// Reusable fGn sampler: the method-specific precomputation (Cholesky factor,
/// embedding eigenvalues, Durbin–Levinson table) is done once and shared
/// across seeds, which is what makes Monte-Carlo batches affordable.
pub struct FgnSampler {
    n_steps: usize,
    dt: f64,
    hurst: HurstParam,
    method: FgnMethod,
    kind: SamplerKind,
    fallback: bool,
}

impl FgnSampler {
    pub fn new(
        n_steps: usize,
        dt: f64,
        hurst: HurstParam,
        method: FgnMethod,
    ) -> Result<Self, FbmError> {
        if n_steps == 0 {
            return Err(FbmError::EmptySteps(n_steps));
        }
        if dt <= 0.0 {
            return Err(FbmError::InvalidStep(dt));
        }
        let gamma: Vec<f64> = (0..=n_steps).map(|k| fgn_autocov(k, dt, hurst)).collect();
        let (kind, fallback) = match method {
            FgnMethod::Cholesky => (Self::build_cholesky(n_steps, &gamma), false),
            FgnMethod::Hosking => (Self::build_hosking(n_steps, &gamma), false),
            FgnMethod::Circulant => match Self::build_circulant(n_steps, &gamma) {
                Some(kind) => (kind, false),
                // Negative embedding eigenvalue: only reachable through
                // rounding for H > 1/2. Keep the run alive on the exact path.
                None => (Self::build_cholesky(n_steps, &gamma), true),
            },
        };
        Ok(Self {
            n_steps,
            dt,
            hurst,
            method,
            kind,
            fallback,
        })
    }

    fn build_cholesky(n: usize, gamma: &[f64]) -> SamplerKind {
        let cov = DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)]);
        let factor = cov
            .cholesky()
            .expect("fGn increment covariance is positive definite")
            .unpack();
        SamplerKind::Cholesky { factor }
    }

    fn build_circulant(n: usize, gamma: &[f64]) -> Option<SamplerKind> {
        let m = 2 * n;
        let mut row = vec![Complex::new(0.0, 0.0); m];
        for k in 0..=n {
            row[k].re = gamma[k];
        }
        for k in 1..n {
            row[m - k].re = gamma[k];
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        forward.process(&mut row);
        let mut sqrt_eigs = Vec::with_capacity(m);
        for value in &row {
            if value.re < 0.0 {
                return None;
            }
            sqrt_eigs.push(value.re.sqrt());
        }
        let fft = planner.plan_fft_inverse(m);
        Some(SamplerKind::Circulant { sqrt_eigs, fft })
    }

    fn build_hosking(n: usize, gamma: &[f64]) -> SamplerKind {
        // Durbin–Levinson recursion on the fGn autocovariance.
        let mut phi: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut innovations = Vec::with_capacity(n);
        innovations.push(gamma[0]);
        phi.push(Vec::new());
        if n > 1 {
            let mut prev = vec![gamma[1] / gamma[0]];
            let mut v = gamma[0] * (1.0 - prev[0] * prev[0]);
            phi.push(prev.clone());
            innovations.push(v);
            for k in 2..n {
                let mut num = gamma[k];
                for (j, &c) in prev.iter().enumerate() {
                    num -= c * gamma[k - 1 - j];
                }
                let reflection = num / v;
                let mut row = Vec::with_capacity(k);
                for j in 0..k - 1 {
                    row.push(prev[j] - reflection * prev[k - 2 - j]);
                }
                row.push(reflection);
                v *= 1.0 - reflection * reflection;
                phi.push(row.clone());
                innovations.push(v);
                prev = row;
            }
        }
        SamplerKind::Hosking { phi, innovations }
    }

    fn sample_increments(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.kind {
            SamplerKind::Cholesky { factor } => {
                let z = DVector::from_fn(self.n_steps, |_, _| {
                    StandardNormal.sample(rng)
                });
                (factor * z).iter().copied().collect()
            }
            SamplerKind::Circulant { sqrt_eigs, fft } => {
                let m = sqrt_eigs.len();
                let half = m / 2;
                let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
                let mut spectrum = vec![Complex::new(0.0, 0.0); m];
                let z0: f64 = StandardNormal.sample(rng);
                let zh: f64 = StandardNormal.sample(rng);
                spectrum[0] = Complex::new(sqrt_eigs[0] * z0, 0.0);
                spectrum[half] = Complex::new(sqrt_eigs[half] * zh, 0.0);
                for k in 1..half {
                    let a: f64 = StandardNormal.sample(rng);
                    let b: f64 = StandardNormal.sample(rng);
                    let zeta = Complex::new(a * inv_sqrt2, b * inv_sqrt2);
                    spectrum[k] = zeta * sqrt_eigs[k];
                    spectrum[m - k] = spectrum[k].conj();
                }
                fft.process(&mut spectrum);
                let scale = 1.0 / (m as f64).sqrt();
                spectrum[..self.n_steps].iter().map(|c| c.re * scale).collect()
            }
            SamplerKind::Hosking { phi, innovations } => {
                let mut x = Vec::with_capacity(self.n_steps);
                for k in 0..self.n_steps {
                    let mut mean = 0.0;
                    for (j, &c) in phi[k].iter().enumerate() {
                        mean += c * x[k - 1 - j];
                    }
                    let z: f64 = StandardNormal.sample(rng);
                    x.push(mean + innovations[k].sqrt() * z);
                }
                x
            }
        }
    }

    /// Draw one path for the given seed. Identical `(seed, method)` always
    /// reproduce the identical path.
    pub fn sample(&self, seed: u64) -> FbmPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let increments = self.sample_increments(&mut rng);
        let mut values = Vec::with_capacity(self.n_steps + 1);
        let mut times = Vec::with_capacity(self.n_steps + 1);
        values.push(0.0);
        times.push(0.0);
        let mut acc = 0.0;
        for (i, dx) in increments.iter().enumerate() {
            acc += dx;
            values.push(acc);
            times.push((i + 1) as f64 * self.dt);
        }
        FbmPath {
            times,
            values,
            hurst: self.hurst,
            seed,
            method: self.method,
            cholesky_fallback: self.fallback,
        }
    }
}

/// One-shot convenience wrapper around [`FgnSampler`].
pub fn sample_fgn(
    n_steps: usize,
    dt: f64,
    hurst: HurstParam,
    seed: u64,
    method: FgnMethod,
) -> Result<FbmPath, FbmError> {
    Ok(FgnSampler::new(n_steps, dt, hurst, method)?.sample(seed))
}

/// Sample fBm values at arbitrary strictly increasing times (first node 0)
/// through a Cholesky factor of the value covariance. Used for non-uniform
/// grids, where the stationary-increment methods do not apply.
pub fn sample_fbm_at(times: &[f64], hurst: HurstParam, seed: u64) -> Result<FbmPath, FbmError> {
    check_grid(times)?;
    let n = times.len() - 1;
    let cov = DMatrix::from_fn(n, n, |i, j| {
        cov_rh(times[i + 1], times[j + 1], hurst).unwrap()
    });
    let factor = cov
        .cholesky()
        .expect("fBm value covariance is positive definite")
        .unpack();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let vals = factor * z;
    let mut values = Vec::with_capacity(n + 1);
    values.push(0.0);
    values.extend(vals.iter().copied());
    Ok(FbmPath {
        times: times.to_vec(),
        values,
        hurst,
        seed,
        method: FgnMethod::Cholesky,
        cholesky_fallback: false,
    })
}

fn check_grid(times: &[f64]) -> Result<(), FbmError> {
    if times.len() < 2 || times[0] != 0.0 {
        return Err(FbmError::BadGrid);
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FbmError::BadGrid);
    }
    Ok(())
}

fn grid_is_uniform(times: &[f64]) -> bool {
    let dt = times[1] - times[0];
    times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.max(1e-12))
}

/// Splittable counter-style seed stream: the `index`-th child of `master`.
/// Children are order-independent, so concurrent Monte-Carlo paths and
/// per-mode noise streams reproduce regardless of scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Trace-class weights of the driving Q-fBm, one `λ_n ≥ 0` per retained mode.
#[derive(Debug, Clone, PartialEq)]
pub struct QfbmSpec {
    lambdas: Vec<f64>,
    hurst: HurstParam,
}

impl QfbmSpec {
    pub fn new(lambdas: Vec<f64>, hurst: HurstParam) -> Result<Self, FbmError> {
        if lambdas.is_empty() {
            return Err(FbmError::EmptySteps(0));
        }
        for (i, &l) in lambdas.iter().enumerate() {
            if l < 0.0 || !l.is_finite() {
                return Err(FbmError::NegativeLambda(i, l));
            }
        }
        Ok(Self { lambdas, hurst })
    }

    pub fn n_modes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    pub fn trace(&self) -> f64 {
        self.lambdas.iter().sum()
    }
}

/// A Q-fBm realization: one scalar path per mode, already scaled by `√λ_n`,
/// all sharing one grid.
#[derive(Debug, Clone)]
pub struct QfbmPath {
    pub times: Vec<f64>,
    /// `modes[n][j] = √λ_n β_n^H(t_j)`.
    pub modes: Vec<Vec<f64>>,
    pub spec: QfbmSpec,
    pub master_seed: u64,
    pub cholesky_fallback: bool,
}

impl QfbmPath {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    /// Mode increment over the grid cell starting at node `j`.
    pub fn increment(&self, mode: usize, j: usize) -> f64 {
        self.modes[mode][j + 1] - self.modes[mode][j]
    }

    /// Squared X-norm of `B^H(t_j)` across modes.
    pub fn norm_sq_at(&self, j: usize) -> f64 {
        self.modes.iter().map(|m| m[j] * m[j]).sum()
    }

    /// Keep every `stride`-th node; used to couple coarse and fine grids to
    /// the same underlying Gaussian draws.
    pub fn restrict(&self, stride: usize) -> QfbmPath {
        assert!(stride >= 1 && (self.times.len() - 1) % stride == 0);
        let pick = |v: &Vec<f64>| v.iter().copied().step_by(stride).collect::<Vec<_>>();
        QfbmPath {
            times: pick(&self.times),
            modes: self.modes.iter().map(pick).collect(),
            spec: self.spec.clone(),
            master_seed: self.master_seed,
            cholesky_fallback: self.cholesky_fallback,
        }
    }
}

/// Sample a Q-fBm on the given grid. Mode `n` uses the derived seed
/// `derive_seed(master_seed, n)`, so modes are independent and reproducible.
pub fn sample_qfbm(
    spec: &QfbmSpec,
    times: &[f64],
    master_seed: u64,
    method: FgnMethod,
) -> Result<QfbmPath, FbmError> {
    check_grid(times)?;
    let n_steps = times.len() - 1;
    let uniform = grid_is_uniform(times);
    let sampler = if uniform {
        Some(FgnSampler::new(n_steps, times[1] - times[0], spec.hurst, method)?)
    } else {
        None
    };
    let mut modes = Vec::with_capacity(spec.n_modes());
    let mut fallback = false;
    for (n, &lambda) in spec.lambdas.iter().enumerate() {
        let seed = derive_seed(master_seed, n as u64);
        let scale = lambda.sqrt();
        if lambda == 0.0 {
            modes.push(vec![0.0; times.len()]);
            continue;
        }
        let path = match &sampler {
            Some(s) => s.sample(seed),
            None => sample_fbm_at(times, spec.hurst, seed)?,
        };
        fallback |= path.cholesky_fallback;
        modes.push(path.values.iter().map(|v| v * scale).collect());
    }
    Ok(QfbmPath {
        times: times.to_vec(),
        modes,
        spec: spec.clone(),
        master_seed,
        cholesky_fallback: fallback,
    })
}

fn node_index(times: &[f64], t: f64) -> Result<usize, FbmError> {
    let tol = 1e-9 * t.abs().max(1.0);
    times
        .iter()
        .position(|&x| (x - t).abs() <= tol)
        .ok_or(FbmError::OffGridTime(t))
}

/// Left-point Riemann–Stieltjes sum of a deterministic step integrand
/// against the Q-fBm: per mode,
/// `Σ_j ψ_n(s_j) (B^H_n(s_{j+1}) − B^H_n(s_j))` over the grid cells in
/// `[0, t]`. For deterministic `ψ` and H > 1/2 this is the Wiener integral;
/// `t` must be a grid node (no interpolation).
pub fn wiener_integral<F>(psi: F, path: &QfbmPath, t: f64) -> Result<SpectralVector, FbmError>
where
    F: Fn(f64) -> Vec<f64>,
{
    let end = node_index(&path.times, t)?;
    let n_modes = path.n_modes();
    let mut out = vec![0.0; n_modes];
    for j in 0..end {
        let weights = psi(path.times[j]);
        if weights.len() != n_modes {
            return Err(FbmError::ModeMismatch(weights.len(), n_modes));
        }
        for (n, w) in weights.iter().enumerate() {
            out[n] += w * path.increment(n, j);
        }
    }
    Ok(SpectralVector::from_coeffs(out))
}
