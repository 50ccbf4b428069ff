//! Euler-Maruyama likelihood, Monte-Carlo averaged drift, and the penalized
//! loss.
//!
//! The log-likelihood of per-transition drifts `β(x_m)` is the exact sum of
//! Gaussian transition log-densities
//! `Σ_m log N(x_{m+1}; x_m + β(x_m)Δ, AΔ)` with `A = σσᵀ`, drift evaluated at
//! left endpoints only. The tape's likelihood op evaluates through the same
//! function, so tape and plain values agree bitwise.

use std::sync::Arc;

use crate::error::Error;
use crate::flow::{CouplingFlow, CouplingFlowSpec};
use crate::kernel::{accumulate_kernel_mean_into, DriftKernel, KernelOp};
use crate::linalg::{GaussianTerms, Sigma};
use crate::reduce::tree_sum;
use crate::rng::{normal_vec, StreamKey};
use crate::scalar::{Scalar, LN_TWO_PI};
use crate::tape::{NodeId, Tape};
use crate::traj::Trajectory;

/// Moment-penalty settings: loss = -loglik + lambda * m_p(pushforward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig<F> {
    pub lambda: F,
    pub p: F,
}

impl<F: Scalar> PenaltyConfig<F> {
    pub fn validate_for(&self, kernel: &DriftKernel<F>) -> Result<(), Error> {
        if self.lambda < F::zero() {
            return Err(Error::config("penalty weight lambda must be non-negative"));
        }
        if self.p <= F::one() {
            return Err(Error::config("moment exponent p must exceed 1"));
        }
        if self.lambda > F::zero() {
            if let Some(q0) = kernel_growth_exponent(kernel) {
                if self.p.to_f64_c() <= q0 + 1.0 {
                    return Err(Error::config(format!(
                        "moment exponent p = {} must exceed q0 + 1 = {} for this kernel",
                        self.p,
                        q0 + 1.0
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Documented growth exponent `q0` of the kernel's y-Lipschitz bound, when
/// known. `None` for custom expressions.
pub fn kernel_growth_exponent<F: Scalar>(kernel: &DriftKernel<F>) -> Option<f64> {
    match kernel {
        DriftKernel::SolventGaussianForce(_) => Some(1.0),
        DriftKernel::DoubleWell => Some(0.0),
        DriftKernel::SeparableLinear { .. } => Some(0.0),
        DriftKernel::SeparableQuadratic { .. } => Some(1.0),
        DriftKernel::Custom { .. } => None,
    }
}

/// Per-transition data of one (mini)batch: left endpoints, increments, and
/// the cached Gaussian terms of `A = σσᵀ`.
#[derive(Debug, Clone)]
pub struct TransitionData<F> {
    pub dim: usize,
    pub n_steps: usize,
    /// `x_{m+1} - x_m`, row-major `n_steps x dim`.
    pub increments: Vec<F>,
    pub delta: F,
    pub gauss: GaussianTerms<F>,
    /// `-(d/2) ln(2πΔ) - (1/2) ln det A` (per transition).
    pub const_per_step: F,
}

/// Left endpoints plus transition data for a batch of observed transitions.
#[derive(Debug, Clone)]
pub struct ObsBatch<F> {
    /// Left endpoints `x_m`, row-major `n_steps x dim`.
    pub xs: Arc<Vec<F>>,
    pub data: Arc<TransitionData<F>>,
}

/// Assemble batch data from a trajectory. `indices` selects transitions
/// (`None` = all, in order).
pub fn obs_batch<F: Scalar>(
    traj: &Trajectory<F>,
    sigma: &Sigma<F>,
    indices: Option<&[usize]>,
) -> Result<ObsBatch<F>, Error> {
    let d = traj.dim();
    let gauss = sigma.gaussian_terms(d)?;
    let m0 = traj.transitions();
    let all: Vec<usize>;
    let idx: &[usize] = match indices {
        Some(ix) => {
            if let Some(&bad) = ix.iter().find(|&&m| m >= m0) {
                return Err(Error::config(format!(
                    "transition index {bad} out of range ({m0} transitions)"
                )));
            }
            ix
        }
        None => {
            all = (0..m0).collect();
            &all
        }
    };
    let delta = traj.dt();
    let mut xs = Vec::with_capacity(idx.len() * d);
    let mut increments = Vec::with_capacity(idx.len() * d);
    for &m in idx {
        let x = traj.state(m);
        let x_next = traj.state(m + 1);
        xs.extend_from_slice(x);
        for c in 0..d {
            increments.push(x_next[c] - x[c]);
        }
    }
    let dd = F::from_usize(d).unwrap();
    let const_per_step = -F::c(0.5) * (dd * (F::c(LN_TWO_PI) + delta.ln()) + gauss.log_det_a);
    Ok(ObsBatch {
        xs: Arc::new(xs),
        data: Arc::new(TransitionData {
            dim: d,
            n_steps: idx.len(),
            increments,
            delta,
            gauss,
            const_per_step,
        }),
    })
}

/// Exact Gaussian transition log-density sum for per-transition drifts.
pub fn gaussian_transition_loglik<F: Scalar>(drifts: &[F], data: &TransitionData<F>) -> F {
    let d = data.dim;
    let n = data.n_steps;
    debug_assert_eq!(drifts.len(), n * d);
    if n == 0 {
        return F::zero();
    }
    let half = F::c(0.5);
    let inv_two_delta = half / data.delta;
    let n_chunks = n.div_ceil(crate::reduce::CHUNK);
    let mut partials = Vec::with_capacity(n_chunks);
    let mut r = vec![F::zero(); d];
    for c in 0..n_chunks {
        let lo = c * crate::reduce::CHUNK;
        let hi = (lo + crate::reduce::CHUNK).min(n);
        let mut acc = F::zero();
        for m in lo..hi {
            for k in 0..d {
                r[k] = data.increments[m * d + k] - data.delta * drifts[m * d + k];
            }
            let quad = data.gauss.quad_form(&r);
            acc += data.const_per_step - quad * inv_two_delta;
        }
        partials.push(acc);
    }
    tree_sum(&partials)
}

/// Accumulate `upstream * d loglik / d drifts` into `grad`.
///
/// `d term_m / d β_m = A⁻¹ (x_{m+1} - x_m - β_m Δ)`.
pub fn gaussian_loglik_grad_into<F: Scalar>(
    drifts: &[F],
    data: &TransitionData<F>,
    upstream: F,
    grad: &mut [F],
) {
    let d = data.dim;
    let mut r = vec![F::zero(); d];
    let mut air = vec![F::zero(); d];
    for m in 0..data.n_steps {
        for k in 0..d {
            r[k] = data.increments[m * d + k] - data.delta * drifts[m * d + k];
        }
        data.gauss.a_inv_mul(&r, &mut air);
        for k in 0..d {
            grad[m * d + k] += upstream * air[k];
        }
    }
}

/// Euler-Maruyama log-likelihood of a trajectory under pre-evaluated drifts.
///
/// `drift_at_obs` holds one row per transition, evaluated at the left
/// endpoint. Returns the exact Gaussian transition log-density sum.
pub fn em_log_likelihood<F: Scalar>(
    drift_at_obs: &[F],
    traj: &Trajectory<F>,
    sigma: &Sigma<F>,
) -> Result<F, Error> {
    let batch = obs_batch(traj, sigma, None)?;
    if drift_at_obs.len() != batch.data.n_steps * batch.data.dim {
        return Err(Error::config(format!(
            "drift matrix has {} entries, expected {} transitions x {} dims",
            drift_at_obs.len(),
            batch.data.n_steps,
            batch.data.dim
        )));
    }
    Ok(gaussian_transition_loglik(drift_at_obs, &batch.data))
}

/// Draw `l_samples` latent vectors for a flow of dimension `dim`.
///
/// One shared draw set: common random numbers across all states.
pub fn draw_latents<F: Scalar>(dim: usize, l_samples: usize, key: StreamKey) -> Vec<Vec<F>> {
    let mut rng = key.rng();
    (0..l_samples).map(|_| normal_vec(&mut rng, dim)).collect()
}

/// Monte-Carlo averaged drift under the flow pushforward at a list of
/// states: `(1/L) Σ_l b(x_m, f(Z_l))`, with the same `L` draws shared across
/// all states.
pub fn mc_drift<F: Scalar>(
    kernel: &DriftKernel<F>,
    flow: &CouplingFlow<F>,
    x_points: &[F],
    l_samples: usize,
    seed: u64,
) -> Result<Vec<F>, Error> {
    if l_samples == 0 {
        return Err(Error::config("mc_drift needs at least one latent sample"));
    }
    if flow.dim() != kernel.fast_dim() {
        return Err(Error::config(format!(
            "flow dimension {} does not match kernel fast dimension {}",
            flow.dim(),
            kernel.fast_dim()
        )));
    }
    let latents = draw_latents::<F>(flow.dim(), l_samples, StreamKey::new(seed).child("mc-drift"));
    let pushed = push_latents(flow, &latents)?;
    kernel_mean_checked(kernel, x_points, &pushed)
}

/// Push latent draws through the flow, failing on non-finite output with the
/// sample index.
pub fn push_latents<F: Scalar>(
    flow: &CouplingFlow<F>,
    latents: &[Vec<F>],
) -> Result<Vec<Vec<F>>, Error> {
    latents
        .iter()
        .enumerate()
        .map(|(l, z)| {
            flow.forward(z)
                .map(|(y, _)| y)
                .map_err(|_| Error::non_finite(format!("flow pushforward of latent sample {l}")))
        })
        .collect()
}

fn kernel_mean_checked<F: Scalar>(
    kernel: &DriftKernel<F>,
    x_points: &[F],
    pushed: &[Vec<F>],
) -> Result<Vec<F>, Error> {
    let d = kernel.slow_dim();
    let n_points = x_points.len() / d;
    let mut out = vec![F::zero(); n_points * d];
    let slices: Vec<&[F]> = pushed.iter().map(|y| y.as_slice()).collect();
    accumulate_kernel_mean_into(kernel, x_points, &slices, &mut out, None);
    if out.iter().any(|v| !v.is_finite()) {
        // Locate the offending pair for the error message.
        let mut single = vec![F::zero(); d];
        for (l, y) in pushed.iter().enumerate() {
            for m in 0..n_points {
                kernel.eval_into(&x_points[m * d..(m + 1) * d], y, &mut single);
                if single.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!(
                        "kernel evaluation at state {m}, latent sample {l}"
                    )));
                }
            }
        }
        return Err(Error::non_finite("kernel mean"));
    }
    Ok(out)
}

/// `(1/L) Σ_l ‖f(Z_l)‖^p` with the same latent draw discipline as
/// [`mc_drift`].
pub fn moment_penalty<F: Scalar>(
    flow: &CouplingFlow<F>,
    p: F,
    l_samples: usize,
    seed: u64,
) -> Result<F, Error> {
    if l_samples == 0 {
        return Err(Error::config("moment_penalty needs at least one latent sample"));
    }
    if p <= F::one() {
        return Err(Error::config("moment exponent p must exceed 1"));
    }
    let latents =
        draw_latents::<F>(flow.dim(), l_samples, StreamKey::new(seed).child("moment-penalty"));
    let pushed = push_latents(flow, &latents)?;
    Ok(moment_penalty_of_samples(&pushed, p))
}

pub fn moment_penalty_of_samples<F: Scalar>(pushed: &[Vec<F>], p: F) -> F {
    let vals: Vec<F> = pushed
        .iter()
        .map(|y| {
            let mut r2 = F::zero();
            for &v in y {
                r2 += v * v;
            }
            r2.powf(p / F::c(2.0))
        })
        .collect();
    tree_sum_mean(&vals)
}

fn tree_sum_mean<F: Scalar>(vals: &[F]) -> F {
    // Sequential sum matches the tape's MeanScalars accumulation order.
    let mut acc = F::zero();
    for &v in vals {
        acc += v;
    }
    acc / F::from_usize(vals.len().max(1)).unwrap()
}

/// Penalized loss `-loglik(mc_drift) + lambda * m_p`, sharing one latent
/// draw set between the drift average and the penalty.
pub fn penalized_loss<F: Scalar>(
    kernel: &DriftKernel<F>,
    flow: &CouplingFlow<F>,
    traj: &Trajectory<F>,
    sigma: &Sigma<F>,
    penalty: &PenaltyConfig<F>,
    l_samples: usize,
    seed: u64,
) -> Result<F, Error> {
    penalty.validate_for(kernel)?;
    let batch = obs_batch(traj, sigma, None)?;
    let latents =
        draw_latents::<F>(flow.dim(), l_samples, StreamKey::new(seed).child("penalized-loss"));
    let pushed = push_latents(flow, &latents)?;
    let drifts = kernel_mean_checked(kernel, &batch.xs, &pushed)?;
    let loglik = gaussian_transition_loglik(&drifts, &batch.data);
    let mut loss = -loglik;
    if penalty.lambda > F::zero() {
        loss += penalty.lambda * moment_penalty_of_samples(&pushed, penalty.p);
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("penalized loss"));
    }
    Ok(loss)
}

/// The fitted estimator as a plain drift function: latent draws are pushed
/// through the flow once, then every evaluation averages the kernel over
/// the stored pushforward samples.
#[derive(Debug, Clone)]
pub struct McDriftFn<F> {
    kernel: Arc<DriftKernel<F>>,
    pushed: Vec<Vec<F>>,
}

impl<F: Scalar> McDriftFn<F> {
    pub fn new(
        kernel: Arc<DriftKernel<F>>,
        flow: &CouplingFlow<F>,
        l_samples: usize,
        seed: u64,
    ) -> Result<Self, Error> {
        if flow.dim() != kernel.fast_dim() {
            return Err(Error::config(format!(
                "flow dimension {} does not match kernel fast dimension {}",
                flow.dim(),
                kernel.fast_dim()
            )));
        }
        let latents =
            draw_latents::<F>(flow.dim(), l_samples, StreamKey::new(seed).child("mc-drift"));
        let pushed = push_latents(flow, &latents)?;
        Ok(McDriftFn { kernel, pushed })
    }

    pub fn slow_dim(&self) -> usize {
        self.kernel.slow_dim()
    }

    pub fn eval_into(&self, x: &[F], out: &mut [F]) {
        let slices: Vec<&[F]> = self.pushed.iter().map(|y| y.as_slice()).collect();
        accumulate_kernel_mean_into(self.kernel.as_ref(), x, &slices, out, None);
    }

    /// Evaluate on a flattened batch of states.
    pub fn eval_batch(&self, xs: &[F]) -> Vec<F> {
        let d = self.kernel.slow_dim();
        let mut out = vec![F::zero(); xs.len() / d * d];
        let slices: Vec<&[F]> = self.pushed.iter().map(|y| y.as_slice()).collect();
        accumulate_kernel_mean_into(self.kernel.as_ref(), xs, &slices, &mut out, None);
        out
    }
}

/// Tape assembly of the flow-drift log-likelihood: pushes every latent draw
/// through the flow (parameters read from `params_node` at `params_offset`),
/// forms the batched kernel mean, and returns the latent output nodes plus
/// the log-likelihood node.
pub fn flow_loglik_nodes<F: Scalar>(
    tape: &mut Tape<F>,
    flow_spec: &CouplingFlowSpec,
    params_node: NodeId,
    params_offset: usize,
    kernel: &Arc<DriftKernel<F>>,
    batch: &ObsBatch<F>,
    latents: &[Vec<F>],
) -> (Vec<NodeId>, NodeId) {
    let mut y_nodes = Vec::with_capacity(latents.len());
    for z in latents {
        let zin = tape.constant(z.clone());
        let (y, _) = CouplingFlow::forward_on_tape(flow_spec, tape, params_node, params_offset, zin);
        y_nodes.push(y);
    }
    let kernel_dyn: Arc<dyn KernelOp<F>> = kernel.clone();
    let drift = tape.kernel_mean(kernel_dyn, batch.xs.clone(), y_nodes.clone());
    let loglik = tape.em_loglik(drift, batch.data.clone());
    (y_nodes, loglik)
}

/// Tape node for the moment penalty over already-pushed latent nodes.
pub fn penalty_node<F: Scalar>(tape: &mut Tape<F>, y_nodes: &[NodeId], p: F) -> NodeId {
    let powers: Vec<NodeId> = y_nodes.iter().map(|&y| tape.norm_pow(y, p)).collect();
    tape.mean_scalars(powers)
}
