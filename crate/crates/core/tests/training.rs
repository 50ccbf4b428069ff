//! Training-loop behavior: the separable closed-form check, the driftless
//! noise floor of the baseline, and loss-history trends.

use std::sync::Arc;

use driftflow::expr::Program;
use driftflow::flow::{CouplingFlow, CouplingFlowSpec};
use driftflow::kernel::{DriftKernel, SolventParams};
use driftflow::likelihood::PenaltyConfig;
use driftflow::linalg::Sigma;
use driftflow::mlp::MlpSpec;
use driftflow::optim::OptimizerConfig;
use driftflow::rng::StreamKey;
use driftflow::sde::{simulate_multiscale, simulate_reduced, FastDynamics, MultiscaleModel};
use driftflow::tape::Activation;
use driftflow::train::{fit_penalized_mle, fit_unstructured_baseline};
use driftflow::traj::Trajectory;

/// Separable benchmark data: OU fast process with stationary mean
/// (0.4, 0), kernel b = -x · y_0, so the true effective drift is -0.4 x.
fn separable_data(seed: u64) -> (Trajectory<f64>, Arc<DriftKernel<f64>>, Sigma<f64>) {
    let kernel = Arc::new(DriftKernel::SeparableLinear {
        b0: Program::parse("neg x0").unwrap(),
        d_fast: 2,
    });
    let model = MultiscaleModel {
        d: 1,
        kernel: (*kernel).clone(),
        sigma: Sigma::Scalar(0.1),
        fast: FastDynamics::OrnsteinUhlenbeck {
            dim: 2,
            rate: 1.0,
            mean: vec![0.4, 0.0],
            alpha: std::f64::consts::SQRT_2,
        },
        n_scale: 100.0,
    };
    let (slow, _fast) =
        simulate_multiscale(&model, &[2.0], &[0.4, 0.0], 5.0, 1e-4, seed).unwrap();
    let obs = slow.subsample(100).unwrap(); // Δ = 0.01, M0 = 500
    (obs, kernel, Sigma::Scalar(0.1))
}

/// Closed-form weighted-least-squares MLE of the pushforward mean for the
/// separable kernel: m* = Σ b0(x_m)(x_{m+1}-x_m) / (Δ Σ b0(x_m)²).
fn wls_mle(traj: &Trajectory<f64>) -> f64 {
    let m0 = traj.transitions();
    let delta = traj.dt();
    let mut num = 0.0;
    let mut den = 0.0;
    for m in 0..m0 {
        let b0 = -traj.state(m)[0];
        num += b0 * (traj.state(m + 1)[0] - traj.state(m)[0]);
        den += b0 * b0;
    }
    num / (delta * den)
}

#[test]
fn fitted_pushforward_mean_matches_weighted_least_squares() {
    let (obs, kernel, sigma) = separable_data(11);
    let spec = CouplingFlowSpec::new(2, 2, vec![5], Activation::Tanh).unwrap();
    let pen = PenaltyConfig { lambda: 0.0, p: 2.0 };
    let opt = OptimizerConfig {
        iterations: 500,
        batch_size: obs.transitions(),
        seed: 3,
        ..Default::default()
    };
    let fit = fit_penalized_mle(&kernel, &spec, &obs, &sigma, &pen, 100, &opt).unwrap();

    let flow = CouplingFlow::new(spec, fit.params).unwrap();
    let mut rng = StreamKey::new(909).child("pushforward").rng();
    let samples = flow.sample(1_000_000, &mut rng).unwrap();
    let mean0 = samples.iter().step_by(2).sum::<f64>() / 1_000_000.0;

    let target = wls_mle(&obs);
    assert!(
        (mean0 - target).abs() <= 0.05 * target.abs(),
        "fitted pushforward mean {mean0} vs closed-form MLE {target}"
    );
}

#[test]
fn baseline_on_driftless_data_stays_at_the_noise_floor() {
    // Pointwise drift-MLE noise scales like sigma/sqrt(delta); delta = 0.05
    // keeps the smoothed network well under the 0.5 floor.
    let drift = |_: &[f64], out: &mut [f64]| out[0] = 0.0;
    let traj = simulate_reduced(&drift, &Sigma::Scalar(0.1), &[0.0], 25.0, 0.05, 4).unwrap();
    let spec = MlpSpec::new(vec![1, 32, 32, 1], Activation::Tanh).unwrap();
    let opt = OptimizerConfig {
        iterations: 100,
        batch_size: traj.transitions(),
        seed: 5,
        ..Default::default()
    };
    let fit = fit_unstructured_baseline(&spec, &traj, &Sigma::Scalar(0.1), &opt).unwrap();
    let mut sup: f64 = 0.0;
    for i in 0..=100 {
        let x = -1.0 + 0.02 * i as f64;
        let out = spec.apply(&fit.params, &[x]).unwrap();
        sup = sup.max(out[0].abs());
    }
    assert!(sup <= 0.5, "fitted drift sup-norm {sup} exceeds the noise floor");
}

fn small_solvent_obs(seed: u64) -> (Trajectory<f64>, Arc<DriftKernel<f64>>, Sigma<f64>) {
    let params = SolventParams { n_particles: 5, d: 1, a: 1.0, kappa: 1.0, gamma: 1.0, zeta: 1.0 };
    let kernel = Arc::new(DriftKernel::SolventGaussianForce(params.clone()));
    let model = MultiscaleModel {
        d: 1,
        kernel: (*kernel).clone(),
        sigma: Sigma::Scalar(0.1),
        fast: FastDynamics::SolventGibbs(params),
        n_scale: 100.0,
    };
    let (slow, _) = simulate_multiscale(&model, &[1.0], &[0.0; 5], 2.0, 1e-4, seed).unwrap();
    (slow.subsample(100).unwrap(), kernel, Sigma::Scalar(0.1))
}

#[test]
fn full_loss_decreases_on_the_solvent_benchmark_for_most_seeds() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let (obs, kernel, sigma) = small_solvent_obs(seed);
        let spec = CouplingFlowSpec::new(5, 2, vec![5], Activation::Tanh).unwrap();
        let pen = PenaltyConfig { lambda: 1e-3, p: 4.0 };
        let opt = OptimizerConfig {
            iterations: 100,
            batch_size: obs.transitions(),
            seed,
            ..Default::default()
        };
        let fit = fit_penalized_mle(&kernel, &spec, &obs, &sigma, &pen, 50, &opt).unwrap();
        if fit.history.last().unwrap().full_loss <= fit.history.first().unwrap().full_loss {
            wins += 1;
        }
    }
    assert!(wins > 5, "loss decreased for only {wins}/10 seeds");
}

#[test]
fn reproducibility_of_training_is_bitwise() {
    let (obs, kernel, sigma) = small_solvent_obs(2);
    let spec = CouplingFlowSpec::new(5, 2, vec![4], Activation::Tanh).unwrap();
    let pen = PenaltyConfig { lambda: 1e-3, p: 4.0 };
    let opt =
        OptimizerConfig { iterations: 15, batch_size: 100, seed: 12, ..Default::default() };
    let a = fit_penalized_mle(&kernel, &spec, &obs, &sigma, &pen, 20, &opt).unwrap();
    let b = fit_penalized_mle(&kernel, &spec, &obs, &sigma, &pen, 20, &opt).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}
