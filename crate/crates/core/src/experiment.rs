//! Declarative experiment runner: simulate, train, evaluate, compare laws,
//! and reproduce the MSE table, all from one config and one master seed.
//!
//! Artifact directory layout (fixed):
//!
//! ```text
//! out/
//!   config.snapshot      exact TOML snapshot of the parsed config
//!   manifest             JSON: config hash, seed, versions, artifact hashes
//!   run_info.json        wall-clock timings (not hashed; the one
//!                        non-deterministic file)
//!   data/                observations.csv
//!   checkpoints/         flow.ckpt / posterior.ckpt / baseline.ckpt (+ .txt)
//!   reports/             loss/ELBO histories, MSE summary, bands, law CSVs
//! ```
//!
//! Every random stream derives from the master seed: `data`, `train`,
//! `oracle`, `oracle-path`, `eval-drift`, `bands`, `path-compare`, `laws`.
//! Stage subcommands re-derive from the master, so running stages separately
//! reproduces `run` byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint;
use crate::config::{ExperimentConfig, TrainMode};
use crate::error::Error;
use crate::flow::CouplingFlow;
use crate::kernel::KernelOp;
use crate::likelihood::McDriftFn;
use crate::metrics::{law_comparison_report, path_discrepancy, TabulatedDrift1d};
use crate::rng::StreamKey;
use crate::sde::{averaged_drift_oracle, sample_gibbs_solvent, simulate_multiscale, simulate_reduced};
use crate::traj::fmt_g17;
use crate::Trajectory;
use crate::train::{fit_penalized_mle, fit_unstructured_baseline, LossRow, TrainError};
use crate::vi::{posterior_drift_bands, run_vi, ElboRow, VariationalState};
use crate::Real;

pub const MANIFEST_VERSION: u32 = 1;

/// Resolved artifact paths under one output directory.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    pub root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(root.join("data"))?;
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(ArtifactDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self, Error> {
        if !root.is_dir() {
            return Err(Error::MissingArtifact(root.to_path_buf()));
        }
        Ok(ArtifactDir { root: root.to_path_buf() })
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest")
    }

    pub fn run_info(&self) -> PathBuf {
        self.root.join("run_info.json")
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn observations(&self) -> PathBuf {
        self.data("observations.csv")
    }
}

fn master(cfg: &ExperimentConfig) -> StreamKey {
    StreamKey::new(cfg.seeds.master)
}

/// Write the config snapshot (idempotent; complains if an existing snapshot
/// disagrees, which would silently mix artifacts of different experiments).
pub fn write_snapshot(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<(), Error> {
    let text = cfg.to_toml_string()?;
    let path = dir.config_snapshot();
    if path.exists() {
        let existing = std::fs::read_to_string(&path)?;
        if existing != text {
            return Err(Error::config(
                "output directory already holds a different config.snapshot; \
                 use a fresh directory per experiment",
            ));
        }
        return Ok(());
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Simulate the multiscale system and persist the subsampled observations.
pub fn stage_simulate(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<Trajectory, Error> {
    write_snapshot(cfg, dir)?;
    let model = cfg.build_model()?;
    let y0 = cfg.y0()?;
    let seed = master(cfg).child("data").seed();
    let (slow, _fast) =
        simulate_multiscale(&model, &cfg.data.x0, &y0, cfg.data.horizon, cfg.data.dt, seed)?;
    let obs = slow.subsample(cfg.observation_stride()?)?;
    obs.save_csv(&dir.observations())?;
    write_manifest(cfg, dir)?;
    Ok(obs)
}

fn load_observations(dir: &ArtifactDir) -> Result<Trajectory, Error> {
    Trajectory::load_csv(&dir.observations())
}

fn write_loss_history(path: &Path, rows: &[LossRow]) -> Result<(), Error> {
    let mut out = String::from("iter,full_loss,minibatch_loss,grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iter,
            fmt_g17(r.full_loss),
            fmt_g17(r.minibatch_loss),
            fmt_g17(r.grad_norm)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_elbo_history(path: &Path, rows: &[ElboRow]) -> Result<(), Error> {
    let mut out = String::from("iter,elbo,loglik_term,kl_term,grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter,
            fmt_g17(r.elbo),
            fmt_g17(r.loglik_term),
            fmt_g17(r.kl_term),
            fmt_g17(r.grad_norm)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct AbortNote {
    stage: String,
    iteration: usize,
    message: String,
}

fn handle_abort<F: crate::Scalar>(
    err: TrainError<F>,
    stage: &str,
    dir: &ArtifactDir,
    save: impl Fn(&[F]) -> Result<(), Error>,
) -> Error {
    match err {
        TrainError::Aborted(abort) => {
            let _ = save(&abort.last_params);
            let note = AbortNote {
                stage: stage.to_string(),
                iteration: abort.iteration,
                message: "non-finite loss".to_string(),
            };
            if let Ok(json) = serde_json::to_string_pretty(&note) {
                let _ = std::fs::write(dir.root.join("error.json"), json);
            }
            Error::TrainingAborted { iteration: abort.iteration }
        }
        TrainError::Other(e) => e,
    }
}

/// Train the configured estimator from persisted observations.
pub fn stage_train(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<(), Error> {
    write_snapshot(cfg, dir)?;
    let traj = load_observations(dir)?;
    let mut opt = cfg.train.optimizer.clone();
    opt.seed = master(cfg).child("train").seed();

    match cfg.train.mode {
        TrainMode::Mle => {
            let kernel = Arc::new(cfg.build_kernel()?);
            let spec = cfg.latent_flow_spec()?;
            let penalty = cfg.resolved_penalty()?;
            let fit = fit_penalized_mle(
                &kernel,
                &spec,
                &traj,
                &cfg.model.sigma,
                &penalty,
                cfg.train.l_samples,
                &opt,
            )
            .map_err(|e| {
                handle_abort(e, "train-mle", dir, |p| {
                    checkpoint::save_flow(&dir.checkpoint("flow.aborted.ckpt"), &spec, p)
                })
            })?;
            checkpoint::save_flow(&dir.checkpoint("flow.ckpt"), &spec, &fit.params)?;
            checkpoint::write_params_text(&dir.checkpoint("flow.txt"), &fit.params)?;
            write_loss_history(&dir.report("loss_history.csv"), &fit.history)?;
        }
        TrainMode::Vi => {
            let kernel = Arc::new(cfg.build_kernel()?);
            let spec = cfg.latent_flow_spec()?;
            let (state, history) =
                run_vi(&kernel, &spec, &traj, &cfg.model.sigma, &cfg.train.vi, &opt).map_err(
                    |e| {
                        let pspec = VariationalState::<Real>::init(
                            cfg.latent_flow_spec().expect("validated"),
                            &cfg.train.vi,
                            opt.seed,
                        )
                        .map(|s| s.posterior.spec)
                        .ok();
                        handle_abort(e, "train-vi", dir, |p| match &pspec {
                            Some(ps) => checkpoint::save_flow(
                                &dir.checkpoint("posterior.aborted.ckpt"),
                                ps,
                                p,
                            ),
                            None => Ok(()),
                        })
                    },
                )?;
            checkpoint::save_flow(
                &dir.checkpoint("posterior.ckpt"),
                &state.posterior.spec,
                &state.posterior.params,
            )?;
            checkpoint::write_params_text(
                &dir.checkpoint("posterior.txt"),
                &state.posterior.params,
            )?;
            write_elbo_history(&dir.report("elbo_history.csv"), &history)?;
        }
        TrainMode::Baseline => {
            let spec = cfg.baseline_spec()?;
            let fit = fit_unstructured_baseline(&spec, &traj, &cfg.model.sigma, &opt)
                .map_err(|e| {
                    handle_abort(e, "baseline", dir, |p| {
                        checkpoint::save_mlp(&dir.checkpoint("baseline.aborted.ckpt"), &spec, p)
                    })
                })?;
            checkpoint::save_mlp(&dir.checkpoint("baseline.ckpt"), &spec, &fit.params)?;
            checkpoint::write_params_text(&dir.checkpoint("baseline.txt"), &fit.params)?;
            write_loss_history(&dir.report("loss_history.csv"), &fit.history)?;
        }
    }
    write_manifest(cfg, dir)?;
    Ok(())
}

/// The fitted estimator as a drift callable, loaded from checkpoints.
pub enum FittedDrift {
    Flow(McDriftFn<Real>),
    Posterior { state: VariationalState<Real> },
    Baseline { spec: crate::mlp::MlpSpec, params: Vec<Real> },
}

fn load_fitted(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<FittedDrift, Error> {
    match cfg.train.mode {
        TrainMode::Mle => {
            let (spec, params) = checkpoint::load_flow::<Real>(&dir.checkpoint("flow.ckpt"))?;
            let flow = CouplingFlow::new(spec, params)?;
            let kernel = Arc::new(cfg.build_kernel()?);
            let seed = master(cfg).child("eval-drift").seed();
            Ok(FittedDrift::Flow(McDriftFn::new(kernel, &flow, cfg.eval.eval_l_samples, seed)?))
        }
        TrainMode::Vi => {
            let (pspec, pparams) =
                checkpoint::load_flow::<Real>(&dir.checkpoint("posterior.ckpt"))?;
            let latent_spec = cfg.latent_flow_spec()?;
            if pspec.dim != latent_spec.param_count() {
                return Err(Error::Checkpoint(format!(
                    "posterior checkpoint dimension {} does not match the latent flow's {} parameters",
                    pspec.dim,
                    latent_spec.param_count()
                )));
            }
            let state = VariationalState {
                latent_spec,
                posterior: CouplingFlow::new(pspec, pparams)?,
                prior_scale: cfg.train.vi.prior_scale,
                k_samples: cfg.train.vi.k_samples,
                l_samples: cfg.train.vi.l_samples,
            };
            Ok(FittedDrift::Posterior { state })
        }
        TrainMode::Baseline => {
            let (spec, params) = checkpoint::load_mlp::<Real>(&dir.checkpoint("baseline.ckpt"))?;
            Ok(FittedDrift::Baseline { spec, params })
        }
    }
}

fn write_mse_summary(path: &Path, rows: &[(usize, usize, f64, usize, f64)]) -> Result<(), Error> {
    let mut out = String::from("d,N,n,M0,mse\n");
    for (d, n_particles, n_scale, m0, mse) in rows {
        out.push_str(&format!("{d},{n_particles},{},{m0},{}\n", fmt_g17(*n_scale), fmt_g17(*mse)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_bands_csv(path: &Path, bands: &crate::vi::BandTable<Real>) -> Result<(), Error> {
    let d = bands.d;
    let mut header = Vec::new();
    for c in 0..d {
        header.push(format!("x_{c}"));
    }
    for c in 0..d {
        header.push(format!("mean_{c}"));
    }
    for (q, _) in &bands.quantiles {
        for c in 0..d {
            header.push(format!("q{:02}_{c}", (q * 100.0).round() as u32));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    let n_points = bands.points.len() / d;
    for m in 0..n_points {
        let mut row = Vec::new();
        for c in 0..d {
            row.push(fmt_g17(bands.points[m * d + c]));
        }
        for c in 0..d {
            row.push(fmt_g17(bands.mean[m * d + c]));
        }
        for (_, vals) in &bands.quantiles {
            for c in 0..d {
                row.push(fmt_g17(vals[m * d + c]));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Oracle drift values on a flattened point set, from exact invariant
/// samples (the solvent benchmark) or a long fast simulation otherwise.
pub fn oracle_drift_on_points(
    cfg: &ExperimentConfig,
    points: &[Real],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Real>, Error> {
    let kernel = cfg.build_kernel()?;
    let d = kernel.slow_dim();
    let samples = oracle_invariant_samples(cfg, n_samples, seed)?;
    let n_points = points.len() / d;
    let mut out = Vec::with_capacity(n_points * d);
    for m in 0..n_points {
        let x = &points[m * d..(m + 1) * d];
        out.extend(averaged_drift_oracle(&kernel, x, &samples)?);
    }
    Ok(out)
}

/// Exact invariant samples for the configured fast dynamics.
pub fn oracle_invariant_samples(
    cfg: &ExperimentConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Real>, Error> {
    use crate::config::ModelKind;
    match cfg.model.kind {
        ModelKind::Solvent => {
            let params = match cfg.build_kernel()? {
                crate::kernel::DriftKernel::SolventGaussianForce(p) => p,
                _ => unreachable!(),
            };
            sample_gibbs_solvent(&params, n_samples, seed)
        }
        ModelKind::DoubleWell => {
            let dim = 4;
            let concentration = if cfg.model.concentration.is_empty() {
                vec![1.0; dim]
            } else {
                cfg.model.concentration.clone()
            };
            let location = if cfg.model.location.is_empty() {
                vec![0.0; dim]
            } else {
                cfg.model.location.clone()
            };
            crate::sde::sample_von_mises_fast(&concentration, &location, n_samples, seed)
        }
        ModelKind::SeparableLinear | ModelKind::SeparableQuadratic | ModelKind::Custom => {
            // OU fast dynamics: exact stationary law N(mean, α²/(2 rate) I).
            let fast = cfg.build_fast()?;
            let (dim, rate, mean, alpha) = match &fast {
                crate::sde::FastDynamics::OrnsteinUhlenbeck { dim, rate, mean, alpha } => {
                    (*dim, *rate, mean.clone(), *alpha)
                }
                _ => unreachable!(),
            };
            let sd = (alpha * alpha / (2.0 * rate)).sqrt();
            let mut rng = StreamKey::new(seed).child("ou-stationary").rng();
            let mut out = vec![0.0; n_samples * dim];
            crate::rng::fill_normal(&mut rng, &mut out);
            for (i, v) in out.iter_mut().enumerate() {
                *v = mean[i % dim] + sd * *v;
            }
            Ok(out)
        }
    }
}

struct EvalOutput {
    mse: f64,
}

/// Evaluate the fitted estimator: grid MSE against the sample oracle, bands
/// (vi mode), and the same-noise path comparison (d = 1).
pub fn stage_evaluate(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<f64, Error> {
    write_snapshot(cfg, dir)?;
    let fitted = load_fitted(cfg, dir)?;
    let out = evaluate_fitted(cfg, dir, fitted)?;
    write_manifest(cfg, dir)?;
    Ok(out.mse)
}

fn evaluate_fitted(
    cfg: &ExperimentConfig,
    dir: &ArtifactDir,
    fitted: FittedDrift,
) -> Result<EvalOutput, Error> {
    let d = cfg.model.d;
    let grid = cfg.resolved_grid();
    let points: Vec<Real> = grid.flatten();

    let oracle_seed = master(cfg).child("oracle").seed();
    let oracle_vals = oracle_drift_on_points(cfg, &points, cfg.eval.oracle_samples, oracle_seed)?;

    // Estimated drift values on the grid (and bands, for the posterior).
    let est_vals: Vec<Real> = match &fitted {
        FittedDrift::Flow(f) => f.eval_batch(&points),
        FittedDrift::Baseline { spec, params } => {
            let mut vals = Vec::with_capacity(points.len());
            for m in 0..points.len() / d {
                vals.extend(spec.apply(params, &points[m * d..(m + 1) * d])?);
            }
            vals
        }
        FittedDrift::Posterior { state } => {
            let kernel = Arc::new(cfg.build_kernel()?);
            let bands = posterior_drift_bands(
                state,
                &kernel,
                &points,
                cfg.eval.band_k,
                cfg.eval.band_l,
                master(cfg).child("bands").seed(),
                &cfg.eval.band_quantiles,
            )?;
            write_bands_csv(&dir.report("bands.csv"), &bands)?;
            bands.mean.clone()
        }
    };

    let mut sq = Vec::with_capacity(points.len() / d);
    for m in 0..points.len() / d {
        let mut acc = 0.0;
        for c in 0..d {
            let gap = est_vals[m * d + c] - oracle_vals[m * d + c];
            acc += gap * gap;
        }
        sq.push(acc);
    }
    let mse = crate::reduce::tree_sum(&sq) / sq.len() as f64;
    write_mse_summary(
        &dir.report("mse_summary.csv"),
        &[(d, cfg.model.n_particles, cfg.model.n_scale, cfg.m0()?, mse)],
    )?;

    // Same-noise path comparison within and beyond the observation window
    // (1-d estimators; the drift functions are tabulated for speed).
    if d == 1 {
        let truth_seed = master(cfg).child("oracle-path").seed();
        let truth_samples =
            oracle_invariant_samples(cfg, cfg.eval.oracle_samples / 10, truth_seed)?;
        let kernel = cfg.build_kernel()?;
        let truth_fn = move |x: &[Real], out: &mut [Real]| {
            out.copy_from_slice(
                &averaged_drift_oracle(&kernel, x, &truth_samples).expect("finite oracle"),
            );
        };
        let table_truth = TabulatedDrift1d::build(
            &truth_fn,
            cfg.eval.drift_table_min,
            cfg.eval.drift_table_max,
            cfg.eval.drift_table_points,
        )?;
        let table_est = tabulate_fitted(cfg, &fitted)?;

        let truth_drift = |x: &[Real], out: &mut [Real]| out[0] = table_truth.eval(x[0]);
        let est_drift = |x: &[Real], out: &mut [Real]| out[0] = table_est.eval(x[0]);
        let seed = master(cfg).child("path-compare").seed();
        let a = simulate_reduced(
            &truth_drift,
            &cfg.model.sigma,
            &cfg.data.x0,
            cfg.eval.compare_horizon,
            cfg.eval.compare_dt,
            seed,
        )?;
        let b = simulate_reduced(
            &est_drift,
            &cfg.model.sigma,
            &cfg.data.x0,
            cfg.eval.compare_horizon,
            cfg.eval.compare_dt,
            seed,
        )?;
        let (pre, post) = path_discrepancy(&a, &b, cfg.eval.split_time)?;
        let mut out = String::from("t,x_true,x_est\n");
        for m in 0..a.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_g17(a.times()[m]),
                fmt_g17(a.state(m)[0]),
                fmt_g17(b.state(m)[0])
            ));
        }
        std::fs::write(dir.report("path_compare.csv"), out)?;
        let summary = format!(
            "split_time,pre_rmse,post_rmse\n{},{},{}\n",
            fmt_g17(cfg.eval.split_time),
            fmt_g17(pre),
            fmt_g17(post)
        );
        std::fs::write(dir.report("path_discrepancy.csv"), summary)?;
    }

    Ok(EvalOutput { mse })
}

/// Tabulate the fitted drift over the configured table range.
fn tabulate_fitted(
    cfg: &ExperimentConfig,
    fitted: &FittedDrift,
) -> Result<TabulatedDrift1d<Real>, Error> {
    match fitted {
        FittedDrift::Flow(f) => {
            let func = |x: &[Real], out: &mut [Real]| f.eval_into(x, out);
            TabulatedDrift1d::build(
                &func,
                cfg.eval.drift_table_min,
                cfg.eval.drift_table_max,
                cfg.eval.drift_table_points,
            )
        }
        FittedDrift::Baseline { spec, params } => {
            let func = |x: &[Real], out: &mut [Real]| {
                out.copy_from_slice(&spec.apply(params, x).expect("validated shapes"));
            };
            TabulatedDrift1d::build(
                &func,
                cfg.eval.drift_table_min,
                cfg.eval.drift_table_max,
                cfg.eval.drift_table_points,
            )
        }
        FittedDrift::Posterior { state } => {
            // Posterior mean drift over the table's points in one pass.
            let kernel = Arc::new(cfg.build_kernel()?);
            let n = cfg.eval.drift_table_points;
            let step = (cfg.eval.drift_table_max - cfg.eval.drift_table_min) / (n - 1) as f64;
            let table_points: Vec<Real> =
                (0..n).map(|i| cfg.eval.drift_table_min + i as f64 * step).collect();
            let bands = posterior_drift_bands(
                state,
                &kernel,
                &table_points,
                cfg.eval.band_k,
                cfg.eval.band_l,
                master(cfg).child("bands").child("table").seed(),
                &[0.5],
            )?;
            let func = move |x: &[Real], out: &mut [Real]| {
                let pos = ((x[0] - cfg.eval.drift_table_min) / step)
                    .round()
                    .clamp(0.0, (n - 1) as f64) as usize;
                out[0] = bands.mean[pos];
            };
            TabulatedDrift1d::build(
                &func,
                cfg.eval.drift_table_min,
                cfg.eval.drift_table_max,
                cfg.eval.drift_table_points,
            )
        }
    }
}

/// Finite-time law comparison of the true averaged drift against the fitted
/// drift under shared noise (d = 1).
pub fn stage_compare_laws(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<(), Error> {
    write_snapshot(cfg, dir)?;
    if cfg.model.d != 1 {
        return Err(Error::config(
            "law comparison is defined for 1-d slow dynamics (marginal laws)",
        ));
    }
    let fitted = load_fitted(cfg, dir)?;
    let table_est = tabulate_fitted(cfg, &fitted)?;

    let truth_seed = master(cfg).child("oracle-path").seed();
    let truth_samples = oracle_invariant_samples(cfg, cfg.eval.oracle_samples / 10, truth_seed)?;
    let kernel = cfg.build_kernel()?;
    let truth_fn = move |x: &[Real], out: &mut [Real]| {
        out.copy_from_slice(
            &averaged_drift_oracle(&kernel, x, &truth_samples).expect("finite oracle"),
        );
    };
    let table_truth = TabulatedDrift1d::build(
        &truth_fn,
        cfg.eval.drift_table_min,
        cfg.eval.drift_table_max,
        cfg.eval.drift_table_points,
    )?;

    let truth_drift = move |x: &[Real], out: &mut [Real]| out[0] = table_truth.eval(x[0]);
    let est_drift = move |x: &[Real], out: &mut [Real]| out[0] = table_est.eval(x[0]);
    let report = law_comparison_report(
        &truth_drift,
        &est_drift,
        &cfg.model.sigma,
        &cfg.data.x0,
        &cfg.eval.law_times,
        cfg.eval.law_paths,
        cfg.eval.law_dt,
        master(cfg).child("laws").seed(),
        cfg.eval.kde_points,
    )?;

    let mut out = String::from("t,ks,w1\n");
    for (i, t) in report.times.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_g17(*t),
            fmt_g17(report.ks[i]),
            fmt_g17(report.w1[i])
        ));
    }
    std::fs::write(dir.report("law_comparison.csv"), out)?;
    for (i, (grid_x, da, db)) in report.kde.iter().enumerate() {
        let mut kde_out = String::from("x,density_true,density_est\n");
        for j in 0..grid_x.len() {
            kde_out.push_str(&format!(
                "{},{},{}\n",
                fmt_g17(grid_x[j]),
                fmt_g17(da[j]),
                fmt_g17(db[j])
            ));
        }
        std::fs::write(dir.report(&format!("kde_t{i}.csv")), kde_out)?;
    }
    write_manifest(cfg, dir)?;
    Ok(())
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest {
    manifest_version: u32,
    config_sha256: String,
    master_seed: u64,
    checkpoint_format_version: u32,
    artifacts: Vec<ManifestEntry>,
}

/// Rescan the artifact directory and write the manifest: every numeric
/// output file with its content hash. `run_info.json` and the manifest
/// itself are excluded (timings are not deterministic).
pub fn write_manifest(cfg: &ExperimentConfig, dir: &ArtifactDir) -> Result<(), Error> {
    use sha2::{Digest, Sha256};
    let mut artifacts = Vec::new();
    let mut stack = vec![dir.root.clone()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> =
            std::fs::read_dir(&d)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(&dir.root).unwrap().to_string_lossy().to_string();
            if rel == "manifest" || rel == "run_info.json" || rel == "error.json" {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            artifacts.push(ManifestEntry {
                path: rel,
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        config_sha256: cfg.content_hash()?,
        master_seed: cfg.seeds.master,
        checkpoint_format_version: 1,
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    let mut f = std::fs::File::create(dir.manifest())?;
    f.write_all(json.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct RunInfo {
    stages: Vec<(String, f64)>,
    total_seconds: f64,
}

/// Run the full configured pipeline: simulate, train, evaluate, and (for
/// 1-d models) compare finite-time laws. Returns the grid MSE.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<f64, Error> {
    cfg.validate()?;
    let dir = ArtifactDir::create(out_dir)?;
    let start = Instant::now();
    let mut stages = Vec::new();

    let t = Instant::now();
    stage_simulate(cfg, &dir)?;
    stages.push(("simulate".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    stage_train(cfg, &dir)?;
    stages.push(("train".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let mse = stage_evaluate(cfg, &dir)?;
    stages.push(("evaluate".to_string(), t.elapsed().as_secs_f64()));

    if cfg.model.d == 1 && !cfg.eval.law_times.is_empty() {
        let t = Instant::now();
        stage_compare_laws(cfg, &dir)?;
        stages.push(("compare-laws".to_string(), t.elapsed().as_secs_f64()));
    }

    let info = RunInfo { stages, total_seconds: start.elapsed().as_secs_f64() };
    if let Ok(json) = serde_json::to_string_pretty(&info) {
        let _ = std::fs::write(dir.run_info(), json);
    }
    Ok(mse)
}

/// One table cell: slow dimension, particle count, scale separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableCell {
    pub d: usize,
    pub n_particles: usize,
    pub n_scale: f64,
}

/// Derive the per-cell config: dimensions, particle count, scale, a fine
/// step that keeps `dt·n ≤ 0.01` while dividing the observation spacing.
pub fn cell_config(base: &ExperimentConfig, cell: &TableCell) -> Result<ExperimentConfig, Error> {
    let mut cfg = base.clone();
    cfg.model.d = cell.d;
    cfg.model.n_particles = cell.n_particles;
    cfg.model.n_scale = cell.n_scale;
    cfg.train.mode = TrainMode::Mle;
    if cfg.data.x0.len() != cell.d {
        let fill = cfg.data.x0.first().copied().unwrap_or(1.0);
        cfg.data.x0 = vec![fill; cell.d];
    }
    cfg.data.y0 = Vec::new();
    cfg.eval.grid = None;
    let delta = cfg.data.observation_delta;
    let divisions = (delta * cell.n_scale / 0.01).ceil().max(1.0);
    cfg.data.dt = delta / divisions;
    cfg.validate()?;
    Ok(cfg)
}

/// Reproduce the MSE table at the configured cells: one full MLE pipeline
/// per cell, aggregated into `reports/table1.csv`.
pub fn reproduce_table1(
    base: &ExperimentConfig,
    cells: &[TableCell],
    out_dir: &Path,
) -> Result<Vec<(TableCell, f64)>, Error> {
    if cells.is_empty() {
        return Err(Error::config("no table cells requested"));
    }
    let dir = ArtifactDir::create(out_dir)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell_config(base, cell)?;
        let cell_dir = out_dir.join(format!(
            "cell_d{}_N{}_n{}",
            cell.d, cell.n_particles, cell.n_scale as u64
        ));
        let mse = run_experiment(&cfg, &cell_dir)?;
        rows.push((*cell, mse));
    }
    let summary: Vec<(usize, usize, f64, usize, f64)> = rows
        .iter()
        .map(|(c, mse)| {
            let cfg = cell_config(base, c).expect("validated above");
            (c.d, c.n_particles, c.n_scale, cfg.m0().expect("validated"), *mse)
        })
        .collect();
    std::fs::create_dir_all(dir.root.join("reports"))?;
    write_mse_summary(&dir.report("table1.csv"), &summary)?;
    Ok(rows)
}
