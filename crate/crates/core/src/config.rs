//! Declarative experiment configuration.
//!
//! One TOML file with nested sections describes an entire experiment:
//! model, data generation, training, evaluation, and the single master seed
//! every random stream derives from. Parsing is strict: unknown keys are
//! rejected, and every field is either present or explicitly defaulted.
//! `parse -> serialize -> parse` is a fixed point.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::Error;
use crate::expr::Program;
use crate::flow::CouplingFlowSpec;
use crate::kernel::{DriftKernel, KernelOp, SolventParams};
use crate::likelihood::{kernel_growth_exponent, PenaltyConfig};
use crate::linalg::Sigma;
use crate::metrics::EvalGrid;
use crate::mlp::MlpSpec;
use crate::optim::OptimizerConfig;
use crate::sde::{FastDynamics, MultiscaleModel};
use crate::tape::Activation;
use crate::vi::VariationalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Solvent,
    DoubleWell,
    SeparableLinear,
    SeparableQuadratic,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Mle,
    Vi,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Slow dimension.
    pub d: usize,
    /// Solvent particle count.
    pub n_particles: usize,
    pub a: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub sigma: Sigma<f64>,
    pub n_scale: f64,
    /// Separable kernels: prefix expression for b0(x).
    pub b0: String,
    /// Fast dimension of separable/custom kernels.
    pub d_fast: usize,
    /// Custom kernel: one prefix expression per slow component.
    pub exprs: Vec<String>,
    /// Ornstein-Uhlenbeck fast dynamics (separable/custom kernels).
    pub fast_rate: f64,
    /// Empty means the zero vector.
    pub fast_mean: Vec<f64>,
    pub fast_alpha: f64,
    /// Von Mises fast dynamics (double-well kernel). Empty means ones/zeros.
    pub concentration: Vec<f64>,
    pub location: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Solvent,
            d: 1,
            n_particles: 10,
            a: 1.0,
            kappa: 1.0,
            gamma: 1.0,
            zeta: 1.0,
            sigma: Sigma::Scalar(0.1),
            n_scale: 1000.0,
            b0: "neg x0".to_string(),
            d_fast: 2,
            exprs: Vec::new(),
            fast_rate: 1.0,
            fast_mean: Vec::new(),
            fast_alpha: std::f64::consts::SQRT_2,
            concentration: Vec::new(),
            location: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub x0: Vec<f64>,
    /// Fast initial state; empty means the zero vector.
    pub y0: Vec<f64>,
    pub horizon: f64,
    /// Fine simulation step.
    pub dt: f64,
    /// Observation spacing Δ; must be an integer multiple of dt.
    pub observation_delta: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            x0: vec![1.0],
            y0: Vec::new(),
            horizon: 5.0,
            dt: 1e-5,
            observation_delta: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub lambda: f64,
    /// Moment exponent; omitted means the kernel default (4 for the solvent
    /// force, else 2).
    pub penalty_p: Option<f64>,
    pub l_samples: usize,
    pub baseline_hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub vi: VariationalConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: TrainMode::Mle,
            flow_layers: 2,
            flow_hidden: 5,
            lambda: 1e-3,
            penalty_p: None,
            l_samples: 100,
            baseline_hidden: vec![32, 32],
            optimizer: OptimizerConfig::default(),
            vi: VariationalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Omitted means the dimension default (200 on [-2,2] for d=1, 50x50 on
    /// [-2,2]² for d=2).
    pub grid: Option<EvalGrid>,
    /// Exact invariant samples behind the acceptance-grade oracle.
    pub oracle_samples: usize,
    /// Latent samples defining the fitted point-estimate drift function.
    pub eval_l_samples: usize,
    pub law_times: Vec<f64>,
    pub law_paths: usize,
    pub law_dt: f64,
    pub kde_points: usize,
    /// Same-noise path comparison: horizon and split point.
    pub compare_horizon: f64,
    pub compare_dt: f64,
    pub split_time: f64,
    /// Posterior band evaluation (vi mode).
    pub band_k: usize,
    pub band_l: usize,
    pub band_quantiles: Vec<f64>,
    /// Drift tabulation for ensemble simulation (d = 1).
    pub drift_table_min: f64,
    pub drift_table_max: f64,
    pub drift_table_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            grid: None,
            oracle_samples: 1_000_000,
            eval_l_samples: 1000,
            law_times: vec![1.0, 1.5],
            law_paths: 1000,
            law_dt: 1e-3,
            kde_points: 256,
            compare_horizon: 10.0,
            compare_dt: 1e-3,
            split_time: 5.0,
            band_k: 500,
            band_l: 1000,
            band_quantiles: vec![0.05, 0.95],
            drift_table_min: -4.0,
            drift_table_max: 4.0,
            drift_table_points: 2001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub master: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { master: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub seeds: SeedsSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::config(format!("config serialize error: {e}")))
    }

    /// SHA-256 of the canonical serialized form.
    pub fn content_hash(&self) -> Result<String, Error> {
        use sha2::{Digest, Sha256};
        let text = self.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn build_kernel(&self) -> Result<DriftKernel<f64>, Error> {
        let m = &self.model;
        let kernel = match m.kind {
            ModelKind::Solvent => DriftKernel::SolventGaussianForce(self.solvent_params()?),
            ModelKind::DoubleWell => DriftKernel::DoubleWell,
            ModelKind::SeparableLinear => DriftKernel::SeparableLinear {
                b0: Program::parse(&m.b0)?,
                d_fast: m.d_fast,
            },
            ModelKind::SeparableQuadratic => DriftKernel::SeparableQuadratic {
                b0: Program::parse(&m.b0)?,
                d_fast: m.d_fast,
            },
            ModelKind::Custom => {
                let exprs = m
                    .exprs
                    .iter()
                    .map(|s| Program::parse(s))
                    .collect::<Result<Vec<_>, _>>()?;
                DriftKernel::Custom { exprs, d_fast: m.d_fast }
            }
        };
        kernel.validate()?;
        Ok(kernel)
    }

    fn solvent_params(&self) -> Result<SolventParams<f64>, Error> {
        let m = &self.model;
        let p = SolventParams {
            n_particles: m.n_particles,
            d: m.d,
            a: m.a,
            kappa: m.kappa,
            gamma: m.gamma,
            zeta: m.zeta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn build_fast(&self) -> Result<FastDynamics<f64>, Error> {
        let m = &self.model;
        let fast = match m.kind {
            ModelKind::Solvent => FastDynamics::SolventGibbs(self.solvent_params()?),
            ModelKind::DoubleWell => {
                let dim = 4;
                let concentration = if m.concentration.is_empty() {
                    vec![1.0; dim]
                } else {
                    m.concentration.clone()
                };
                let location =
                    if m.location.is_empty() { vec![0.0; dim] } else { m.location.clone() };
                FastDynamics::VonMisesLangevin { concentration, location }
            }
            ModelKind::SeparableLinear | ModelKind::SeparableQuadratic | ModelKind::Custom => {
                let dim = m.d_fast;
                let mean = if m.fast_mean.is_empty() { vec![0.0; dim] } else { m.fast_mean.clone() };
                FastDynamics::OrnsteinUhlenbeck { dim, rate: m.fast_rate, mean, alpha: m.fast_alpha }
            }
        };
        fast.validate()?;
        Ok(fast)
    }

    pub fn build_model(&self) -> Result<MultiscaleModel<f64>, Error> {
        let model = MultiscaleModel {
            d: self.model.d,
            kernel: self.build_kernel()?,
            sigma: self.model.sigma.clone(),
            fast: self.build_fast()?,
            n_scale: self.model.n_scale,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn latent_flow_spec(&self) -> Result<CouplingFlowSpec, Error> {
        let dim = self.build_kernel()?.fast_dim();
        CouplingFlowSpec::new(
            dim,
            self.train.flow_layers,
            vec![self.train.flow_hidden],
            Activation::Tanh,
        )
    }

    pub fn baseline_spec(&self) -> Result<MlpSpec, Error> {
        let mut widths = vec![self.model.d];
        widths.extend_from_slice(&self.train.baseline_hidden);
        widths.push(self.model.d);
        MlpSpec::new(widths, Activation::Tanh)
    }

    pub fn resolved_penalty(&self) -> Result<PenaltyConfig<f64>, Error> {
        let kernel = self.build_kernel()?;
        let p = self.train.penalty_p.unwrap_or_else(|| {
            match kernel_growth_exponent(&kernel) {
                Some(q0) if q0 >= 1.0 => 4.0,
                _ => 2.0,
            }
        });
        let pen = PenaltyConfig { lambda: self.train.lambda, p };
        pen.validate_for(&kernel)?;
        Ok(pen)
    }

    pub fn resolved_grid(&self) -> EvalGrid {
        self.eval.grid.clone().unwrap_or_else(|| EvalGrid::default_for_dim(self.model.d))
    }

    pub fn y0(&self) -> Result<Vec<f64>, Error> {
        let dim = self.build_fast()?.dim();
        if self.data.y0.is_empty() {
            Ok(vec![0.0; dim])
        } else if self.data.y0.len() == dim {
            Ok(self.data.y0.clone())
        } else {
            Err(Error::config(format!(
                "y0 has {} entries, fast dynamics have dimension {dim}",
                self.data.y0.len()
            )))
        }
    }

    /// Observation stride `Δ / dt`.
    pub fn observation_stride(&self) -> Result<usize, Error> {
        let ratio = self.data.observation_delta / self.data.dt;
        let stride = ratio.round();
        if !(ratio - stride).abs().is_finite() || (ratio - stride).abs() > 1e-6 || stride < 1.0 {
            return Err(Error::config(format!(
                "observation_delta {} must be an integer multiple of dt {}",
                self.data.observation_delta, self.data.dt
            )));
        }
        Ok(stride as usize)
    }

    /// Observed transition count `M0`.
    pub fn m0(&self) -> Result<usize, Error> {
        let obs = self.data.horizon / self.data.observation_delta;
        let m0 = obs.round();
        if (obs - m0).abs() > 1e-6 || m0 < 1.0 {
            return Err(Error::config(format!(
                "horizon {} must be an integer multiple of observation_delta {}",
                self.data.horizon, self.data.observation_delta
            )));
        }
        Ok(m0 as usize)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let model = self.build_model()?;
        if self.data.x0.len() != model.d {
            return Err(Error::config(format!(
                "x0 has {} entries, slow dimension is {}",
                self.data.x0.len(),
                model.d
            )));
        }
        self.y0()?;
        if self.data.dt <= 0.0 || self.data.horizon <= 0.0 {
            return Err(Error::config("dt and horizon must be positive"));
        }
        self.observation_stride()?;
        let m0 = self.m0()?;
        if self.train.optimizer.batch_size > m0 {
            return Err(Error::config(format!(
                "batch size B = {} exceeds the observation count M0 = {m0}",
                self.train.optimizer.batch_size
            )));
        }
        self.train.optimizer.validate()?;
        self.train.vi.validate()?;
        match self.train.mode {
            TrainMode::Mle | TrainMode::Vi => {
                self.latent_flow_spec()?;
                self.resolved_penalty()?;
                if self.train.l_samples == 0 {
                    return Err(Error::config("l_samples must be at least 1"));
                }
            }
            TrainMode::Baseline => {
                self.baseline_spec()?;
            }
        }
        let grid = self.resolved_grid();
        grid.validate()?;
        if grid.dim() != model.d {
            return Err(Error::config(format!(
                "evaluation grid dimension {} does not match slow dimension {}",
                grid.dim(),
                model.d
            )));
        }
        if self.eval.band_quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::config("band quantiles must lie strictly inside (0, 1)"));
        }
        if self.eval.oracle_samples == 0 || self.eval.eval_l_samples == 0 {
            return Err(Error::config("oracle_samples and eval_l_samples must be positive"));
        }
        Ok(())
    }
}
