//! Slow/fast system simulation, exact invariant-measure samplers, and the
//! brute-force averaged-drift oracle.
//!
//! Both scales step with Euler-Maruyama on one shared `dt`:
//! `x_{m+1} = x_m + b(x_m, y_m) dt + σ √dt ξ` and
//! `y_{m+1} = y_m + n β(y_m) dt + √n α √dt ξ'` with independent standard
//! normal vectors. A stability guard `dt · n_scale ≤ 0.1` rejects
//! configurations where the fast integrator is unstable. The reduced
//! simulator consumes the identical slow-noise stream for equal seeds, which
//! is what makes same-noise path comparisons meaningful.

use rayon::prelude::*;

use crate::error::Error;
use crate::kernel::{DriftKernel, KernelOp, SolventParams};
use crate::linalg::Sigma;
use crate::reduce::{indexed_mean, tree_sum, CHUNK};
use crate::rng::{fill_normal, uniform_01, StreamKey};
use crate::scalar::Scalar;
use crate::traj::Trajectory;

/// Fast-process dynamics. The closed set covers the benchmarks: every
/// variant has constant scalar diffusion and drift independent of the slow
/// state.
#[derive(Debug, Clone)]
pub enum FastDynamics<F> {
    /// Gradient Langevin flow of the solvent potential: `β(y) = -γ ∇U_N(y)`,
    /// `α = √2`; invariant law is the Gibbs measure sampled exactly by
    /// [`sample_gibbs_solvent`].
    SolventGibbs(SolventParams<F>),
    /// `β(y) = -rate (y - mean)`, constant `α`.
    OrnsteinUhlenbeck { dim: usize, rate: F, mean: Vec<F>, alpha: F },
    /// Langevin dynamics on the torus `[-π, π)^dim` with product von Mises
    /// invariant law: `β_i(y) = -κ_i sin(y_i - μ_i)`, `α = √2`; states wrap
    /// after every step.
    VonMisesLangevin { concentration: Vec<F>, location: Vec<F> },
}

impl<F: Scalar> FastDynamics<F> {
    pub fn dim(&self) -> usize {
        match self {
            FastDynamics::SolventGibbs(p) => p.fast_dim(),
            FastDynamics::OrnsteinUhlenbeck { dim, .. } => *dim,
            FastDynamics::VonMisesLangevin { concentration, .. } => concentration.len(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self {
            FastDynamics::SolventGibbs(p) => p.validate(),
            FastDynamics::OrnsteinUhlenbeck { dim, rate, mean, alpha } => {
                if *dim == 0 || mean.len() != *dim {
                    return Err(Error::config("OU mean length must match dim"));
                }
                if *rate <= F::zero() || *alpha < F::zero() {
                    return Err(Error::config("OU rate must be positive, alpha non-negative"));
                }
                Ok(())
            }
            FastDynamics::VonMisesLangevin { concentration, location } => {
                if concentration.is_empty() || concentration.len() != location.len() {
                    return Err(Error::config(
                        "von Mises concentration/location lengths must match and be non-empty",
                    ));
                }
                if concentration.iter().any(|k| *k < F::zero()) {
                    return Err(Error::config("von Mises concentrations must be non-negative"));
                }
                Ok(())
            }
        }
    }

    /// Unscaled fast drift `β(y)`.
    pub fn drift_into(&self, y: &[F], out: &mut [F]) {
        match self {
            FastDynamics::SolventGibbs(p) => {
                // ∇_{y_i} U = (aN + κ) y_i - a Σ_j y_j ; β = -γ ∇U.
                let d = p.d;
                let n = p.n_particles;
                let mut s = vec![F::zero(); d];
                for i in 0..n {
                    for c in 0..d {
                        s[c] += y[i * d + c];
                    }
                }
                let an_k = p.a * F::from_usize(n).unwrap() + p.kappa;
                for i in 0..n {
                    for c in 0..d {
                        out[i * d + c] = -p.gamma * (an_k * y[i * d + c] - p.a * s[c]);
                    }
                }
            }
            FastDynamics::OrnsteinUhlenbeck { rate, mean, .. } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = -*rate * (y[c] - mean[c]);
                }
            }
            FastDynamics::VonMisesLangevin { concentration, location } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = -concentration[c] * (y[c] - location[c]).sin();
                }
            }
        }
    }

    /// Constant diffusion coefficient `α`.
    pub fn alpha(&self) -> F {
        match self {
            FastDynamics::SolventGibbs(_) => F::c(2.0).sqrt(),
            FastDynamics::OrnsteinUhlenbeck { alpha, .. } => *alpha,
            FastDynamics::VonMisesLangevin { .. } => F::c(2.0).sqrt(),
        }
    }

    /// State-space projection applied after each step (torus wrap for the
    /// von Mises dynamics, identity otherwise).
    fn post_step(&self, y: &mut [F]) {
        if let FastDynamics::VonMisesLangevin { .. } = self {
            for v in y.iter_mut() {
                *v = wrap_angle(*v);
            }
        }
    }
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle<F: Scalar>(theta: F) -> F {
    let two_pi = F::c(std::f64::consts::TAU);
    let pi = F::c(std::f64::consts::PI);
    let mut t = (theta + pi) % two_pi;
    if t < F::zero() {
        t += two_pi;
    }
    t - pi
}

/// The coupled multiscale system.
#[derive(Debug, Clone)]
pub struct MultiscaleModel<F> {
    pub d: usize,
    pub kernel: DriftKernel<F>,
    pub sigma: Sigma<F>,
    pub fast: FastDynamics<F>,
    /// Time-scale separation parameter `n`.
    pub n_scale: F,
}

impl<F: Scalar> MultiscaleModel<F> {
    pub fn validate(&self) -> Result<(), Error> {
        self.kernel.validate()?;
        self.sigma.validate(self.d)?;
        self.fast.validate()?;
        if self.n_scale < F::one() {
            return Err(Error::config("n_scale must be at least 1"));
        }
        if self.kernel.slow_dim() != self.d {
            return Err(Error::config(format!(
                "kernel slow dimension {} does not match model dimension {}",
                self.kernel.slow_dim(),
                self.d
            )));
        }
        if self.kernel.fast_dim() != self.fast.dim() {
            return Err(Error::config(format!(
                "kernel fast dimension {} does not match fast dynamics dimension {}",
                self.kernel.fast_dim(),
                self.fast.dim()
            )));
        }
        Ok(())
    }
}

fn step_count<F: Scalar>(horizon: F, dt: F) -> Result<usize, Error> {
    if dt <= F::zero() {
        return Err(Error::config("dt must be positive"));
    }
    if horizon <= F::zero() {
        return Err(Error::config("horizon must be positive"));
    }
    let ratio = (horizon / dt).to_f64_c();
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-6 {
        return Err(Error::config(format!(
            "horizon/dt = {ratio} is not integral within rounding"
        )));
    }
    Ok(steps as usize)
}

fn guard_stability<F: Scalar>(dt: F, n_scale: F) -> Result<(), Error> {
    let product = (dt * n_scale).to_f64_c();
    if product > 0.1 + 1e-12 {
        return Err(Error::config(format!(
            "stability guard violated: dt * n_scale = {product} exceeds 0.1"
        )));
    }
    Ok(())
}

/// Simulate the coupled system. Returns `(slow, fast)` trajectories sharing
/// one time grid. Deterministic in `seed`; the slow-noise stream is the one
/// [`simulate_reduced`] consumes for the same seed.
pub fn simulate_multiscale<F: Scalar>(
    model: &MultiscaleModel<F>,
    x0: &[F],
    y0: &[F],
    horizon: F,
    dt: F,
    seed: u64,
) -> Result<(Trajectory<F>, Trajectory<F>), Error> {
    model.validate()?;
    guard_stability(dt, model.n_scale)?;
    let steps = step_count(horizon, dt)?;
    if x0.len() != model.d {
        return Err(Error::config("x0 dimension mismatch"));
    }
    let d_fast = model.fast.dim();
    if y0.len() != d_fast {
        return Err(Error::config("y0 dimension mismatch"));
    }

    let key = StreamKey::new(seed).child("simulate");
    let mut slow_rng = key.child("slow").rng();
    let mut fast_rng = key.child("fast").rng();

    let d = model.d;
    let sqrt_dt = dt.sqrt();
    let sqrt_n = model.n_scale.sqrt();
    let alpha = model.fast.alpha();
    let fast_noise_scale = sqrt_n * alpha * sqrt_dt;

    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut slow_states = Vec::with_capacity((steps + 1) * d);
    let mut fast_states = Vec::with_capacity((steps + 1) * d_fast);
    times.push(F::zero());
    slow_states.extend_from_slice(&x);
    fast_states.extend_from_slice(&y);

    let mut b = vec![F::zero(); d];
    let mut beta = vec![F::zero(); d_fast];
    let mut xi = vec![F::zero(); d];
    let mut xi_fast = vec![F::zero(); d_fast];
    let mut noise = vec![F::zero(); d];

    for m in 0..steps {
        model.kernel.eval_into(&x, &y, &mut b);
        model.fast.drift_into(&y, &mut beta);
        fill_normal(&mut slow_rng, &mut xi);
        fill_normal(&mut fast_rng, &mut xi_fast);
        model.sigma.mul_vec(&xi, &mut noise);
        for c in 0..d {
            x[c] = x[c] + b[c] * dt + noise[c] * sqrt_dt;
        }
        for c in 0..d_fast {
            y[c] = y[c] + model.n_scale * beta[c] * dt + fast_noise_scale * xi_fast[c];
        }
        model.fast.post_step(&mut y);
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: m,
                context: "multiscale state became non-finite".into(),
            });
        }
        times.push(F::from_usize(m + 1).unwrap() * dt);
        slow_states.extend_from_slice(&x);
        fast_states.extend_from_slice(&y);
    }

    let slow = Trajectory::new(times.clone(), slow_states, d)?;
    let fast = Trajectory::new(times, fast_states, d_fast)?;
    Ok((slow, fast))
}

/// Simulate the reduced slow equation under a supplied drift. Equal seeds
/// consume the identical slow-noise stream as [`simulate_multiscale`].
pub fn simulate_reduced<F: Scalar>(
    drift: &dyn Fn(&[F], &mut [F]),
    sigma: &Sigma<F>,
    x0: &[F],
    horizon: F,
    dt: F,
    seed: u64,
) -> Result<Trajectory<F>, Error> {
    let steps = step_count(horizon, dt)?;
    let d = x0.len();
    sigma.validate(d)?;
    let key = StreamKey::new(seed).child("simulate");
    let mut slow_rng = key.child("slow").rng();

    let sqrt_dt = dt.sqrt();
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * d);
    times.push(F::zero());
    states.extend_from_slice(&x);

    let mut b = vec![F::zero(); d];
    let mut xi = vec![F::zero(); d];
    let mut noise = vec![F::zero(); d];
    for m in 0..steps {
        drift(&x, &mut b);
        fill_normal(&mut slow_rng, &mut xi);
        sigma.mul_vec(&xi, &mut noise);
        for c in 0..d {
            x[c] = x[c] + b[c] * dt + noise[c] * sqrt_dt;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: m,
                context: "reduced state became non-finite".into(),
            });
        }
        times.push(F::from_usize(m + 1).unwrap() * dt);
        states.extend_from_slice(&x);
    }
    Trajectory::new(times, states, d)
}

/// Exact i.i.d. samples from the Gibbs measure `π₀ ∝ exp(-γ U_N)`.
///
/// Uses the analytic decomposition
/// `U_N = ((aN+κ)/2) Σ‖y_i‖² - (a/2) ‖Σ y_i‖²`: per coordinate, the
/// precision is `γκ` along the particle-mean direction and `γ(κ+aN)` on its
/// orthogonal complement. Output rows are particle-major `N·d` vectors.
pub fn sample_gibbs_solvent<F: Scalar>(
    params: &SolventParams<F>,
    count: usize,
    seed: u64,
) -> Result<Vec<F>, Error> {
    params.validate()?;
    if count == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let n = params.n_particles;
    let d = params.d;
    let n_f = F::from_usize(n).unwrap();
    let prec_mean = params.gamma * params.kappa;
    let prec_perp = params.gamma * (params.kappa + params.a * n_f);
    if prec_mean <= F::zero() || prec_perp <= F::zero() {
        return Err(Error::config("Gibbs precision must be positive definite"));
    }
    let sd_mean = F::one() / prec_mean.sqrt();
    let sd_perp = F::one() / prec_perp.sqrt();

    let mut rng = StreamKey::new(seed).child("gibbs").rng();
    let mut out = vec![F::zero(); count * n * d];
    let mut w = vec![F::zero(); n * d];
    for s in 0..count {
        fill_normal(&mut rng, &mut w);
        let row = &mut out[s * n * d..(s + 1) * n * d];
        for c in 0..d {
            let mut mean = F::zero();
            for i in 0..n {
                mean += w[i * d + c];
            }
            mean /= n_f;
            for i in 0..n {
                row[i * d + c] = sd_perp * (w[i * d + c] - mean) + sd_mean * mean;
            }
        }
    }
    Ok(out)
}

/// Exact i.i.d. samples with independent von Mises coordinates, each in
/// `[-π, π)`. Zero concentration gives the uniform law on the circle.
/// Sampling uses Best-Fisher rejection.
pub fn sample_von_mises_fast<F: Scalar>(
    concentration: &[F],
    location: &[F],
    count: usize,
    seed: u64,
) -> Result<Vec<F>, Error> {
    if concentration.len() != location.len() || concentration.is_empty() {
        return Err(Error::config("concentration/location lengths must match and be non-empty"));
    }
    if concentration.iter().any(|k| *k < F::zero()) {
        return Err(Error::config("von Mises concentrations must be non-negative"));
    }
    if count == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let dim = concentration.len();
    let pi = F::c(std::f64::consts::PI);
    let mut rng = StreamKey::new(seed).child("von-mises").rng();
    let mut out = vec![F::zero(); count * dim];
    for s in 0..count {
        for c in 0..dim {
            let kappa = concentration[c];
            let theta = if kappa == F::zero() {
                let u: F = uniform_01(&mut rng);
                (u + u - F::one()) * pi
            } else {
                // Best-Fisher wrapped-Cauchy envelope rejection.
                let four = F::c(4.0);
                let two = F::c(2.0);
                let a = F::one() + (F::one() + four * kappa * kappa).sqrt();
                let b = (a - (two * a).sqrt()) / (two * kappa);
                let r = (F::one() + b * b) / (two * b);
                let f = loop {
                    let u1: F = uniform_01(&mut rng);
                    let u2: F = uniform_01(&mut rng);
                    let z = (pi * u1).cos();
                    let f = (F::one() + r * z) / (r + z);
                    let cc = kappa * (r - f);
                    if cc * (two - cc) - u2 > F::zero() || (cc / u2).ln() + F::one() - cc >= F::zero()
                    {
                        break f;
                    }
                };
                let u3: F = uniform_01(&mut rng);
                let sign = if u3 > F::c(0.5) { F::one() } else { -F::one() };
                wrap_angle(location[c] + sign * f.min(F::one()).max(-F::one()).acos())
            };
            out[s * dim + c] = theta;
        }
    }
    Ok(out)
}

/// Brute-force averaged drift: the sample mean of `b(x, y)` over provided
/// invariant samples (rows of `invariant_samples`).
pub fn averaged_drift_oracle<F: Scalar>(
    kernel: &DriftKernel<F>,
    x: &[F],
    invariant_samples: &[F],
) -> Result<Vec<F>, Error> {
    let d = kernel.slow_dim();
    let d_fast = kernel.fast_dim();
    if x.len() != d {
        return Err(Error::config("x dimension mismatch"));
    }
    if invariant_samples.is_empty() || !invariant_samples.len().is_multiple_of(d_fast) {
        return Err(Error::config("invariant sample matrix must be non-empty with full rows"));
    }
    if invariant_samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("invariant samples"));
    }
    let count = invariant_samples.len() / d_fast;
    let n_chunks = count.div_ceil(CHUNK);

    let partials: Vec<Result<Vec<F>, usize>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(count);
            let mut acc = vec![F::zero(); d];
            let mut b = vec![F::zero(); d];
            for s in lo..hi {
                let y = &invariant_samples[s * d_fast..(s + 1) * d_fast];
                kernel.eval_into(x, y, &mut b);
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(s);
                }
                for c in 0..d {
                    acc[c] += b[c];
                }
            }
            Ok(acc)
        })
        .collect();

    let mut chunk_sums = Vec::with_capacity(n_chunks);
    for p in partials {
        match p {
            Ok(v) => chunk_sums.push(v),
            Err(s) => {
                return Err(Error::non_finite(format!("kernel evaluation at sample {s}")));
            }
        }
    }
    let count_f = F::from_usize(count).unwrap();
    let mut out = vec![F::zero(); d];
    for (c, o) in out.iter_mut().enumerate() {
        let col: Vec<F> = chunk_sums.iter().map(|v| v[c]).collect();
        *o = tree_sum(&col) / count_f;
    }
    Ok(out)
}

/// Left-endpoint time average of `f` along a trajectory. With the uniform
/// grid guaranteed by [`Trajectory`], this is the mean of `f` over all
/// states except the last.
pub fn empirical_time_average<F: Scalar>(traj: &Trajectory<F>, f: impl Fn(&[F]) -> F) -> F {
    if traj.len() < 2 {
        return f(traj.state(0));
    }
    indexed_mean(traj.len() - 1, |m| f(traj.state(m)))
}

/// Convenience: standard error of a sample mean.
pub fn mean_and_se<F: Scalar>(xs: &[F]) -> (F, F) {
    let n = F::from_usize(xs.len()).unwrap();
    let mean = tree_sum(xs) / n;
    let var: Vec<F> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let se = (tree_sum(&var) / (n * (n - F::one()).max(F::one()))).sqrt();
    (mean, se)
}
