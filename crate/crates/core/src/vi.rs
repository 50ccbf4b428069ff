//! Flow-based variational inference over the latent flow's parameters.
//!
//! A second coupling flow `g` over `R^{dim(θ)}` pushes a standard normal
//! reference onto the parameter space of the latent flow `f`. The ELBO is
//! estimated by nested Monte Carlo: `K` parameter samples
//! `θ_k = g(ξ_k)`, each with `L` fresh latent draws feeding the Monte-Carlo
//! drift, minus the Monte-Carlo KL of the pushforward against an isotropic
//! normal prior. Gradients flow through both reparameterizations on the
//! tape; the per-iteration loop is one gradient-ascent step on the ELBO.
//!
//! Parameter/latent batch sizes are a memory tactic only: they bound how
//! much transient tape state exists at once and never change results.

use rayon::prelude::*;

use std::sync::Arc;

use crate::error::Error;
use crate::flow::{log_density_ref, CouplingFlow, CouplingFlowSpec};
use crate::kernel::{DriftKernel, KernelOp};
use crate::likelihood::{draw_latents, flow_loglik_nodes, obs_batch, ObsBatch};
use crate::linalg::Sigma;
use crate::optim::{clip_global_norm, Adam, OptimizerConfig};
use crate::reduce::{quantile_sorted, sorted, tree_sum};
use crate::rng::{normal_vec, sample_without_replacement, StreamKey};
use crate::scalar::{Scalar, LN_TWO_PI};
use crate::tape::{Activation, Tape};
use crate::train::{TrainAbort, TrainError};
use crate::traj::Trajectory;

/// Architecture and sampling configuration of the variational posterior.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationalConfig {
    /// Parameter samples per ELBO estimate (K).
    pub k_samples: usize,
    /// Latent samples per parameter sample (L).
    pub l_samples: usize,
    /// Isotropic normal prior scale over θ.
    pub prior_scale: f64,
    /// Coupling layers of the posterior flow.
    pub posterior_layers: usize,
    /// Hidden width of the posterior flow's nets.
    pub posterior_hidden: usize,
    /// Parameter-sample batch (memory tactic; no numeric effect).
    pub param_batch: usize,
    /// Latent-sample batch (memory tactic; no numeric effect).
    pub latent_batch: usize,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            k_samples: 100,
            l_samples: 100,
            prior_scale: 1.0,
            posterior_layers: 6,
            posterior_hidden: 256,
            param_batch: 20,
            latent_batch: 25,
        }
    }
}

impl VariationalConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.k_samples == 0 || self.l_samples == 0 {
            return Err(Error::config("K and L must be at least 1"));
        }
        if self.prior_scale <= 0.0 {
            return Err(Error::config("prior scale must be positive"));
        }
        if self.param_batch == 0 || self.latent_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        Ok(())
    }
}

/// Variational state: the latent flow architecture, the posterior flow over
/// its parameter space, and the prior/sampling settings.
#[derive(Debug, Clone)]
pub struct VariationalState<F> {
    pub latent_spec: CouplingFlowSpec,
    pub posterior: CouplingFlow<F>,
    pub prior_scale: F,
    pub k_samples: usize,
    pub l_samples: usize,
}

impl<F: Scalar> VariationalState<F> {
    /// Identity-initialized posterior over the latent flow's parameters.
    pub fn init(
        latent_spec: CouplingFlowSpec,
        cfg: &VariationalConfig,
        seed: u64,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        latent_spec.validate()?;
        let dim_theta = latent_spec.param_count();
        let posterior_spec = CouplingFlowSpec::new(
            dim_theta,
            cfg.posterior_layers,
            vec![cfg.posterior_hidden],
            Activation::Tanh,
        )?;
        let params =
            posterior_spec.init_params(&mut StreamKey::new(seed).child("vi-init").rng());
        Ok(VariationalState {
            latent_spec,
            posterior: CouplingFlow::new(posterior_spec, params)?,
            prior_scale: F::c(cfg.prior_scale),
            k_samples: cfg.k_samples,
            l_samples: cfg.l_samples,
        })
    }

    pub fn dim_theta(&self) -> usize {
        self.latent_spec.param_count()
    }

    /// Log-density of the isotropic normal prior at θ.
    pub fn log_prior(&self, theta: &[F]) -> F {
        let d = F::from_usize(theta.len()).unwrap();
        let s2 = self.prior_scale * self.prior_scale;
        let mut ss = F::zero();
        for &v in theta {
            ss += v * v;
        }
        -F::c(0.5) * (d * (F::c(LN_TWO_PI) + s2.ln()) + ss / s2)
    }
}

/// Draw `k` parameter samples `θ = g(ξ)` with their variational
/// log-densities `log q(θ) = log ν_ref(ξ) - logdet g(ξ)`.
pub fn sample_parameters<F: Scalar>(
    state: &VariationalState<F>,
    k: usize,
    seed: u64,
) -> Result<(Vec<Vec<F>>, Vec<F>), Error> {
    if k == 0 {
        return Err(Error::config("need at least one parameter sample"));
    }
    let mut rng = StreamKey::new(seed).child("vi-sample").rng();
    let dim = state.dim_theta();
    let mut thetas = Vec::with_capacity(k);
    let mut log_q = Vec::with_capacity(k);
    for _ in 0..k {
        let xi: Vec<F> = normal_vec(&mut rng, dim);
        let (theta, logdet) = state.posterior.forward(&xi)?;
        log_q.push(log_density_ref(&xi) - logdet);
        thetas.push(theta);
    }
    Ok((thetas, log_q))
}

/// Unbiased Monte-Carlo KL estimate `(1/K) Σ_k [log q(θ_k) - log p(θ_k)]`
/// from samples produced by [`sample_parameters`].
pub fn kl_estimate<F: Scalar>(
    state: &VariationalState<F>,
    theta_samples: &[Vec<F>],
    log_q: &[F],
) -> F {
    debug_assert_eq!(theta_samples.len(), log_q.len());
    let terms: Vec<F> = theta_samples
        .iter()
        .zip(log_q)
        .map(|(theta, &lq)| lq - state.log_prior(theta))
        .collect();
    tree_sum(&terms) / F::from_usize(terms.len().max(1)).unwrap()
}

/// Per-iteration ELBO history row.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboRow {
    pub iter: usize,
    pub elbo: f64,
    pub loglik_term: f64,
    pub kl_term: f64,
    pub grad_norm: f64,
}

struct ElboEval<F> {
    elbo: F,
    loglik_term: F,
    kl_term: F,
    /// Gradient of `-ELBO` w.r.t. the posterior parameters.
    grad_neg_elbo: Option<Vec<F>>,
}

/// Core nested-MC ELBO evaluation over one observation batch.
///
/// Draws all `ξ` upfront and `Z` per parameter sample, so results are
/// independent of any batch chunking of the two MC levels.
fn elbo_eval<F: Scalar>(
    state: &VariationalState<F>,
    kernel: &Arc<DriftKernel<F>>,
    batch: &ObsBatch<F>,
    scale: F,
    key: StreamKey,
    want_grad: bool,
) -> Result<ElboEval<F>, Error> {
    let k_total = state.k_samples;
    let dim_theta = state.dim_theta();
    let latent_dim = state.latent_spec.dim;
    let prior_scale2 = state.prior_scale * state.prior_scale;
    let d_theta_f = F::from_usize(dim_theta).unwrap();
    let prior_shift = -F::c(0.5) * d_theta_f * (F::c(LN_TWO_PI) + prior_scale2.ln());

    let mut xi_rng = key.child("xi").rng();
    let xis: Vec<Vec<F>> = (0..k_total).map(|_| normal_vec(&mut xi_rng, dim_theta)).collect();

    let mut ll_terms = Vec::with_capacity(k_total);
    let mut kl_terms = Vec::with_capacity(k_total);
    let mut grad = want_grad.then(|| vec![F::zero(); state.posterior.params.len()]);

    for (k, xi) in xis.iter().enumerate() {
        let latents =
            draw_latents::<F>(latent_dim, state.l_samples, key.child("z").index(k as u64));
        let mut tape = Tape::new(&state.posterior.params);
        let root = tape.param_root();
        let xi_node = tape.constant(xi.clone());
        let (theta_node, logdet_node) =
            CouplingFlow::forward_on_tape(&state.posterior.spec, &mut tape, root, 0, xi_node);
        let (_y_nodes, lik) = flow_loglik_nodes(
            &mut tape,
            &state.latent_spec,
            theta_node,
            0,
            kernel,
            batch,
            &latents,
        );
        // log q(θ_k) = log ν_ref(ξ_k) - logdet
        let log_q = tape.lin_comb(vec![(-F::one(), logdet_node)], log_density_ref(xi));
        // log p_prior(θ_k) = shift - ‖θ‖²/(2 s²)
        let ss = tape.sum_sq(theta_node);
        let log_prior =
            tape.lin_comb(vec![(-F::c(0.5) / prior_scale2, ss)], prior_shift);
        let elbo_k =
            tape.lin_comb(vec![(scale, lik), (-F::one(), log_q), (F::one(), log_prior)], F::zero());

        let ll_k = scale * tape.scalar(lik);
        let kl_k = tape.scalar(log_q) - tape.scalar(log_prior);
        if !tape.scalar(elbo_k).is_finite() {
            return Err(Error::non_finite(format!("ELBO term of parameter sample {k}")));
        }
        ll_terms.push(ll_k);
        kl_terms.push(kl_k);

        if let Some(acc) = grad.as_mut() {
            let loss_k = tape.lin_comb(vec![(-F::one(), elbo_k)], F::zero());
            tape.backward(loss_k);
            let gk = tape.param_grad();
            for (a, g) in acc.iter_mut().zip(&gk) {
                *a += *g;
            }
        }
    }

    let k_f = F::from_usize(k_total).unwrap();
    let loglik_term = tree_sum(&ll_terms) / k_f;
    let kl_term = tree_sum(&kl_terms) / k_f;
    if let Some(acc) = grad.as_mut() {
        for g in acc.iter_mut() {
            *g /= k_f;
        }
    }
    Ok(ElboEval { elbo: loglik_term - kl_term, loglik_term, kl_term, grad_neg_elbo: grad })
}

/// Monte-Carlo ELBO estimate on the full observed trajectory.
///
/// Deterministic given the seed. A single-point trajectory has no
/// transitions: the likelihood term is zero and the estimate is minus the
/// KL estimate.
pub fn elbo_estimate<F: Scalar>(
    state: &VariationalState<F>,
    kernel: &Arc<DriftKernel<F>>,
    traj: &Trajectory<F>,
    sigma: &Sigma<F>,
    seed: u64,
) -> Result<F, Error> {
    let batch = obs_batch(traj, sigma, None)?;
    let eval = elbo_eval(
        state,
        kernel,
        &batch,
        F::one(),
        StreamKey::new(seed).child("elbo"),
        false,
    )?;
    Ok(eval.elbo)
}

/// ELBO and its gradient w.r.t. the posterior parameters, with the same
/// stream layout as [`elbo_estimate`].
pub fn elbo_with_grad<F: Scalar>(
    state: &VariationalState<F>,
    kernel: &Arc<DriftKernel<F>>,
    traj: &Trajectory<F>,
    sigma: &Sigma<F>,
    seed: u64,
) -> Result<(F, Vec<F>), Error> {
    let batch = obs_batch(traj, sigma, None)?;
    let eval = elbo_eval(
        state,
        kernel,
        &batch,
        F::one(),
        StreamKey::new(seed).child("elbo"),
        true,
    )?;
    Ok((eval.elbo, eval.grad_neg_elbo.unwrap()))
}

/// Stream layout of the VI loop.
pub fn vi_stream(seed: u64) -> StreamKey {
    StreamKey::new(seed).child("vi")
}

/// Variational inference: per iteration, sample `ξ`, map to parameter
/// samples, draw fresh latents per sample, estimate the minibatch ELBO
/// (scaled by `M0/B`), and ascend its gradient.
pub fn run_vi<F: Scalar>(
    kernel: &Arc<DriftKernel<F>>,
    latent_spec: &CouplingFlowSpec,
    traj: &Trajectory<F>,
    sigma: &Sigma<F>,
    vcfg: &VariationalConfig,
    opt: &OptimizerConfig,
) -> Result<(VariationalState<F>, Vec<ElboRow>), TrainError<F>> {
    opt.validate()?;
    vcfg.validate()?;
    if latent_spec.dim != kernel.fast_dim() {
        return Err(Error::config(format!(
            "latent flow dimension {} does not match kernel fast dimension {}",
            latent_spec.dim,
            kernel.fast_dim()
        ))
        .into());
    }
    let m0 = traj.transitions();
    if m0 == 0 {
        return Err(Error::config("trajectory has no transitions").into());
    }
    if opt.batch_size > m0 {
        return Err(Error::config(format!(
            "batch size {} exceeds the {m0} observed transitions",
            opt.batch_size
        ))
        .into());
    }

    let stream = vi_stream(opt.seed);
    let mut state = VariationalState::init(latent_spec.clone(), vcfg, opt.seed)?;
    let mut adam = Adam::new(opt, state.posterior.params.len());
    let mut history = Vec::with_capacity(opt.iterations);
    let scale = F::from_usize(m0).unwrap() / F::from_usize(opt.batch_size).unwrap();

    for t in 0..opt.iterations {
        let it_key = stream.index(t as u64);
        let indices = if opt.batch_size == m0 {
            None
        } else {
            Some(sample_without_replacement(&mut it_key.child("batch").rng(), m0, opt.batch_size))
        };
        let batch = obs_batch(traj, sigma, indices.as_deref())?;
        let eval = match elbo_eval(&state, kernel, &batch, scale, it_key.child("mc"), true) {
            Ok(e) => e,
            Err(Error::NonFinite { .. }) => {
                return Err(TrainError::Aborted(TrainAbort {
                    iteration: t,
                    last_params: state.posterior.params,
                }));
            }
            Err(e) => return Err(e.into()),
        };
        let mut grad = eval.grad_neg_elbo.unwrap();
        let grad_norm = clip_global_norm(&mut grad, F::c(opt.clip));
        adam.step(&mut state.posterior.params, &grad);
        history.push(ElboRow {
            iter: t,
            elbo: eval.elbo.to_f64_c(),
            loglik_term: eval.loglik_term.to_f64_c(),
            kl_term: eval.kl_term.to_f64_c(),
            grad_norm: grad_norm.to_f64_c(),
        });
    }

    Ok((state, history))
}

/// Pointwise posterior drift summary on a grid.
#[derive(Debug, Clone)]
pub struct BandTable<F> {
    /// Slow dimension.
    pub d: usize,
    /// Grid points, row-major `n_points x d`.
    pub points: Vec<F>,
    /// Pointwise posterior mean of the Monte-Carlo drift, `n_points x d`.
    pub mean: Vec<F>,
    /// `(quantile, values)` pairs, each `n_points x d`.
    pub quantiles: Vec<(f64, Vec<F>)>,
}

/// Posterior drift bands: for each parameter sample `θ_k` compute the
/// Monte-Carlo drift on the grid, then report the pointwise mean and
/// empirical quantiles (linear interpolation) across samples.
pub fn posterior_drift_bands<F: Scalar>(
    state: &VariationalState<F>,
    kernel: &Arc<DriftKernel<F>>,
    grid_points: &[F],
    k_eval: usize,
    l_eval: usize,
    seed: u64,
    quantiles: &[f64],
) -> Result<BandTable<F>, Error> {
    if k_eval == 0 || l_eval == 0 {
        return Err(Error::config("band evaluation needs K, L >= 1"));
    }
    if quantiles.iter().any(|q| !(0.0..1.0).contains(q) || *q <= 0.0) {
        return Err(Error::config("quantiles must lie strictly inside (0, 1)"));
    }
    let d = kernel.slow_dim();
    let n_points = grid_points.len() / d;
    let key = StreamKey::new(seed).child("bands");
    let (thetas, _log_q) = sample_parameters(state, k_eval, key.child("theta").seed())?;

    // One drift table per parameter sample; embarrassingly parallel.
    let tables: Vec<Result<Vec<F>, Error>> = thetas
        .par_iter()
        .enumerate()
        .map(|(k, theta)| {
            let flow = CouplingFlow::new(state.latent_spec.clone(), theta.clone())?;
            crate::likelihood::mc_drift(
                kernel,
                &flow,
                grid_points,
                l_eval,
                key.child("z").index(k as u64).seed(),
            )
        })
        .collect();
    let mut drifts = Vec::with_capacity(k_eval);
    for t in tables {
        drifts.push(t?);
    }

    let k_f = F::from_usize(k_eval).unwrap();
    let mut mean = vec![F::zero(); n_points * d];
    let mut quantile_values: Vec<(f64, Vec<F>)> =
        quantiles.iter().map(|&q| (q, vec![F::zero(); n_points * d])).collect();
    let mut column = Vec::with_capacity(k_eval);
    for j in 0..n_points * d {
        column.clear();
        column.extend(drifts.iter().map(|row| row[j]));
        mean[j] = tree_sum(&column) / k_f;
        let srt = sorted(&column);
        for (q, vals) in quantile_values.iter_mut() {
            vals[j] = quantile_sorted(&srt, *q);
        }
    }

    Ok(BandTable { d, points: grid_points.to_vec(), mean, quantiles: quantile_values })
}
