//! Interaction (drift) kernels `b(x, y)`.
//!
//! The kernel is known; all uncertainty in the effective drift comes from
//! the latent fast-state law. Every variant is differentiable in `y`, which
//! the reparameterized gradients rely on, and exposes batched evaluation /
//! vector-Jacobian products so the tape's kernel-mean op never touches
//! per-pair allocations.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::expr::Program;
use crate::scalar::Scalar;

/// Parameters of the solvent benchmark: `N` particles in `R^d` under a
/// quadratic pair-plus-confinement potential, interacting with the tagged
/// particle through a Gaussian-bump pair potential of scale `zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolventParams<F> {
    pub n_particles: usize,
    pub d: usize,
    /// Pair-coupling strength (non-negative; zero decouples the particles).
    pub a: F,
    /// Confinement strength (> 0).
    pub kappa: F,
    /// Inverse-temperature/friction scale (> 0).
    pub gamma: F,
    /// Interaction kernel scale (> 0).
    pub zeta: F,
}

impl<F: Scalar> SolventParams<F> {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n_particles == 0 {
            return Err(Error::config("solvent needs at least one particle"));
        }
        if self.d == 0 {
            return Err(Error::config("solvent particle dimension must be positive"));
        }
        if self.a < F::zero() {
            return Err(Error::config("pair coupling a must be non-negative"));
        }
        if self.kappa <= F::zero() || self.gamma <= F::zero() || self.zeta <= F::zero() {
            return Err(Error::config("kappa, gamma, zeta must be strictly positive"));
        }
        // Gibbs precision eigenvalues: gamma*kappa (mean direction) and
        // gamma*(kappa + a N) (orthogonal complement); both positive here.
        Ok(())
    }

    pub fn fast_dim(&self) -> usize {
        self.n_particles * self.d
    }
}

/// The closed set of interaction kernels.
#[derive(Debug, Clone)]
pub enum DriftKernel<F> {
    /// Tagged-particle force from `N` solvent particles:
    /// `b(x, y) = -ζ Σ_i (x - y_i) exp(-‖x - y_i‖²/2)`.
    SolventGaussianForce(SolventParams<F>),
    /// `b(x, y) = (x - x³) / (1 + x² + y₀² + sin(1 + y₁²) + log(1 + y₂²) + y₃⁴)`,
    /// slow dimension 1, fast dimension 4.
    DoubleWell,
    /// `b(x, y) = b₀(x) · y₀` with `b₀` a closed-form expression in `x`.
    SeparableLinear { b0: Program, d_fast: usize },
    /// `b(x, y) = b₀(x) · y₀²`.
    SeparableQuadratic { b0: Program, d_fast: usize },
    /// One prefix-grammar expression per output component.
    Custom { exprs: Vec<Program>, d_fast: usize },
}

impl<F: Scalar> DriftKernel<F> {
    pub fn validate(&self) -> Result<(), Error> {
        match self {
            DriftKernel::SolventGaussianForce(p) => p.validate(),
            DriftKernel::DoubleWell => Ok(()),
            DriftKernel::SeparableLinear { b0, d_fast }
            | DriftKernel::SeparableQuadratic { b0, d_fast } => {
                if *d_fast == 0 {
                    return Err(Error::config("fast dimension must be positive"));
                }
                if b0.y_arity() > 0 {
                    return Err(Error::config("b0 must depend on x only"));
                }
                if b0.x_arity() > 1 {
                    return Err(Error::config("separable kernels have slow dimension 1"));
                }
                Ok(())
            }
            DriftKernel::Custom { exprs, d_fast } => {
                if exprs.is_empty() {
                    return Err(Error::config("custom kernel needs at least one expression"));
                }
                if *d_fast == 0 {
                    return Err(Error::config("fast dimension must be positive"));
                }
                for p in exprs {
                    if p.y_arity() > *d_fast {
                        return Err(Error::config(format!(
                            "expression `{}` uses y{} but fast dimension is {}",
                            p.source(),
                            p.y_arity() - 1,
                            d_fast
                        )));
                    }
                    if p.x_arity() > exprs.len() {
                        return Err(Error::config(format!(
                            "expression `{}` uses x{} but slow dimension is {}",
                            p.source(),
                            p.x_arity() - 1,
                            exprs.len()
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Evaluate `b(x, y)` into `out` (overwritten).
    pub fn eval_into(&self, x: &[F], y: &[F], out: &mut [F]) {
        out.fill(F::zero());
        self.accum_eval(x, y, out, None);
    }
}

/// Batched kernel interface consumed by the tape.
pub trait KernelOp<F: Scalar>: Send + Sync {
    fn slow_dim(&self) -> usize;
    fn fast_dim(&self) -> usize;

    /// Scratch floats persisted per latent sample for the backward pass.
    fn scratch_len(&self, _n_states: usize) -> usize {
        0
    }

    /// `out[m·d..][..d] += b(x_m, y)` over all rows of `xs`.
    fn accum_eval(&self, xs: &[F], y: &[F], out: &mut [F], scratch: Option<&mut Vec<F>>);

    /// `grad_y += Σ_m (∂_y b(x_m, y))ᵀ w_m`, reusing `scratch` when present.
    fn accum_vjp(&self, xs: &[F], y: &[F], w: &[F], scratch: &[F], grad_y: &mut [F]);
}

impl<F: Scalar> KernelOp<F> for DriftKernel<F> {
    fn slow_dim(&self) -> usize {
        match self {
            DriftKernel::SolventGaussianForce(p) => p.d,
            DriftKernel::DoubleWell => 1,
            DriftKernel::SeparableLinear { .. } | DriftKernel::SeparableQuadratic { .. } => 1,
            DriftKernel::Custom { exprs, .. } => exprs.len(),
        }
    }

    fn fast_dim(&self) -> usize {
        match self {
            DriftKernel::SolventGaussianForce(p) => p.fast_dim(),
            DriftKernel::DoubleWell => 4,
            DriftKernel::SeparableLinear { d_fast, .. }
            | DriftKernel::SeparableQuadratic { d_fast, .. } => *d_fast,
            DriftKernel::Custom { d_fast, .. } => *d_fast,
        }
    }

    fn scratch_len(&self, n_states: usize) -> usize {
        match self {
            DriftKernel::SolventGaussianForce(p) => n_states * p.n_particles,
            DriftKernel::DoubleWell => 2 * n_states,
            _ => 0,
        }
    }

    fn accum_eval(&self, xs: &[F], y: &[F], out: &mut [F], mut scratch: Option<&mut Vec<F>>) {
        match self {
            DriftKernel::SolventGaussianForce(p) => {
                let d = p.d;
                let n = p.n_particles;
                let rows = xs.len() / d;
                let half = F::c(0.5);
                for m in 0..rows {
                    let x = &xs[m * d..(m + 1) * d];
                    let o = m * d;
                    for i in 0..n {
                        let yi = &y[i * d..(i + 1) * d];
                        let mut r2 = F::zero();
                        for c in 0..d {
                            let u = x[c] - yi[c];
                            r2 += u * u;
                        }
                        let e = (-half * r2).exp();
                        if let Some(s) = scratch.as_deref_mut() {
                            s.push(e);
                        }
                        for c in 0..d {
                            out[o + c] -= p.zeta * e * (x[c] - yi[c]);
                        }
                    }
                }
            }
            DriftKernel::DoubleWell => {
                let rows = xs.len();
                let denom_y = double_well_denom_y(y);
                for m in 0..rows {
                    let x = xs[m];
                    let num = x - x * x * x;
                    let denom = F::one() + x * x + denom_y;
                    if let Some(s) = scratch.as_deref_mut() {
                        s.push(num);
                        s.push(denom);
                    }
                    out[m] += num / denom;
                }
            }
            DriftKernel::SeparableLinear { b0, .. } => {
                let mut vals = Vec::new();
                for m in 0..xs.len() {
                    let c = b0.eval(&xs[m..m + 1], &[], &mut vals);
                    out[m] += c * y[0];
                }
            }
            DriftKernel::SeparableQuadratic { b0, .. } => {
                let mut vals = Vec::new();
                let y0sq = y[0] * y[0];
                for m in 0..xs.len() {
                    let c = b0.eval(&xs[m..m + 1], &[], &mut vals);
                    out[m] += c * y0sq;
                }
            }
            DriftKernel::Custom { exprs, .. } => {
                let d = exprs.len();
                let rows = xs.len() / d;
                let mut vals = Vec::new();
                for m in 0..rows {
                    let x = &xs[m * d..(m + 1) * d];
                    for (j, prog) in exprs.iter().enumerate() {
                        out[m * d + j] += prog.eval(x, y, &mut vals);
                    }
                }
            }
        }
    }

    fn accum_vjp(&self, xs: &[F], y: &[F], w: &[F], scratch: &[F], grad_y: &mut [F]) {
        match self {
            DriftKernel::SolventGaussianForce(p) => {
                let d = p.d;
                let n = p.n_particles;
                let rows = xs.len() / d;
                let has_scratch = !scratch.is_empty();
                let half = F::c(0.5);
                for m in 0..rows {
                    let x = &xs[m * d..(m + 1) * d];
                    let wm = &w[m * d..(m + 1) * d];
                    for i in 0..n {
                        let yi = &y[i * d..(i + 1) * d];
                        let mut dot = F::zero();
                        let mut r2 = F::zero();
                        for c in 0..d {
                            let u = x[c] - yi[c];
                            dot += wm[c] * u;
                            r2 += u * u;
                        }
                        let e = if has_scratch {
                            scratch[m * n + i]
                        } else {
                            (-half * r2).exp()
                        };
                        // wᵀ ∂b/∂yᵢ = ζ e (w - (w·u) u)
                        for c in 0..d {
                            let u = x[c] - yi[c];
                            grad_y[i * d + c] += p.zeta * e * (wm[c] - dot * u);
                        }
                    }
                }
            }
            DriftKernel::DoubleWell => {
                let rows = xs.len();
                let has_scratch = !scratch.is_empty();
                let denom_y = double_well_denom_y(y);
                let mut coef = F::zero();
                for m in 0..rows {
                    let (num, denom) = if has_scratch {
                        (scratch[2 * m], scratch[2 * m + 1])
                    } else {
                        let x = xs[m];
                        (x - x * x * x, F::one() + x * x + denom_y)
                    };
                    // ∂b/∂y_j = -num/denom² · ∂denom/∂y_j
                    coef -= w[m] * num / (denom * denom);
                }
                let two = F::c(2.0);
                let y1sq = y[1] * y[1];
                grad_y[0] += coef * two * y[0];
                grad_y[1] += coef * two * y[1] * (F::one() + y1sq).cos();
                grad_y[2] += coef * two * y[2] / (F::one() + y[2] * y[2]);
                grad_y[3] += coef * F::c(4.0) * y[3] * y[3] * y[3];
            }
            DriftKernel::SeparableLinear { b0, .. } => {
                let mut vals = Vec::new();
                let mut acc = F::zero();
                for m in 0..xs.len() {
                    acc += w[m] * b0.eval(&xs[m..m + 1], &[], &mut vals);
                }
                grad_y[0] += acc;
            }
            DriftKernel::SeparableQuadratic { b0, .. } => {
                let mut vals = Vec::new();
                let mut acc = F::zero();
                for m in 0..xs.len() {
                    acc += w[m] * b0.eval(&xs[m..m + 1], &[], &mut vals);
                }
                grad_y[0] += acc * F::c(2.0) * y[0];
            }
            DriftKernel::Custom { exprs, .. } => {
                let d = exprs.len();
                let rows = xs.len() / d;
                let mut vals = Vec::new();
                let mut adj = Vec::new();
                for m in 0..rows {
                    let x = &xs[m * d..(m + 1) * d];
                    for (j, prog) in exprs.iter().enumerate() {
                        prog.eval_grad_y(x, y, w[m * d + j], grad_y, &mut vals, &mut adj);
                    }
                }
            }
        }
    }
}

#[inline]
fn double_well_denom_y<F: Scalar>(y: &[F]) -> F {
    y[0] * y[0] + (F::one() + y[1] * y[1]).sin() + (F::one() + y[2] * y[2]).ln() + y[3].powi(4)
}

/// Monte-Carlo mean of the kernel over latent samples, shared by the tape op
/// and the plain `mc_drift` path so both agree bitwise.
///
/// `out` is overwritten with `(1/L) Σ_l b(x_m, y_l)` per state row.
pub fn accumulate_kernel_mean_into<F: Scalar>(
    kernel: &dyn KernelOp<F>,
    xs: &[F],
    ys: &[&[F]],
    out: &mut [F],
    mut scratch: Option<&mut Vec<F>>,
) {
    out.fill(F::zero());
    for y in ys {
        kernel.accum_eval(xs, y, out, scratch.as_deref_mut());
    }
    let inv = F::one() / F::from_usize(ys.len().max(1)).unwrap();
    for v in out.iter_mut() {
        *v *= inv;
    }
}
