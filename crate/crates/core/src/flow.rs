//! Affine coupling flows.
//!
//! A flow is a stack of coupling layers over alternating contiguous-half
//! masks. At layer `k` the passive half `y_a` is copied and the active half
//! is transformed as `y_b <- y_b ⊙ exp(s(y_a)) + t(y_a)`, with `s`, `t`
//! feed-forward networks. Scale outputs are hard-clamped to `[-5, 5]` before
//! exponentiation. The log-determinant of one layer is the plain sum of the
//! clamped scale outputs, so the full log-determinant is exact.
//!
//! Zero parameters give the identity map; the initializer zeroes the final
//! layer of every `s`/`t` net so a freshly initialized flow starts at the
//! identity.

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::mlp::MlpSpec;
use crate::rng::fill_normal;
use crate::scalar::{Scalar, LN_TWO_PI};
use crate::tape::{Activation, MapOp, NodeId, Tape};

/// Clamp bound applied to scale-net outputs before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;

/// Architecture of a coupling flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingFlowSpec {
    pub dim: usize,
    pub n_layers: usize,
    /// Hidden widths shared by every `s`/`t` net.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl CouplingFlowSpec {
    pub fn new(
        dim: usize,
        n_layers: usize,
        hidden: Vec<usize>,
        activation: Activation,
    ) -> Result<Self, Error> {
        let spec = CouplingFlowSpec { dim, n_layers, hidden, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.dim == 0 {
            return Err(Error::config("flow dimension must be positive"));
        }
        if self.n_layers >= 1 && self.dim < 2 {
            return Err(Error::config(
                "coupling layers need dim >= 2 to split coordinates; use n_layers = 0 for the identity flow",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Passive/active index halves of layer `k`. Even layers pass the first
    /// `ceil(dim/2)` coordinates; odd layers swap roles.
    pub fn masks(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let h = self.dim.div_ceil(2);
        let lo: Vec<usize> = (0..h).collect();
        let hi: Vec<usize> = (h..self.dim).collect();
        if k.is_multiple_of(2) {
            (lo, hi)
        } else {
            (hi, lo)
        }
    }

    /// `(s_spec, t_spec)` of layer `k`; both map `|a| -> hidden -> |b|`.
    pub fn layer_nets(&self, k: usize) -> (MlpSpec, MlpSpec) {
        let (a, b) = self.masks(k);
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(a.len());
        widths.extend_from_slice(&self.hidden);
        widths.push(b.len());
        let net = MlpSpec { widths, activation: self.activation };
        (net.clone(), net)
    }

    /// Offsets of layer `k`'s `s` and `t` parameter blocks.
    pub fn layer_param_offsets(&self, k: usize) -> (usize, usize) {
        let mut off = 0;
        for j in 0..k {
            let (s, t) = self.layer_nets(j);
            off += s.param_count() + t.param_count();
        }
        let (s, _) = self.layer_nets(k);
        (off, off + s.param_count())
    }

    pub fn param_count(&self) -> usize {
        (0..self.n_layers)
            .map(|k| {
                let (s, t) = self.layer_nets(k);
                s.param_count() + t.param_count()
            })
            .sum()
    }

    /// Identity-start initialization: Glorot hidden layers, zeroed final
    /// layers of every net, zero biases.
    pub fn init_params<F: Scalar>(&self, rng: &mut ChaCha12Rng) -> Vec<F> {
        let mut params = Vec::with_capacity(self.param_count());
        for k in 0..self.n_layers {
            let (s_spec, t_spec) = self.layer_nets(k);
            params.extend(s_spec.init_params::<F>(rng, true));
            params.extend(t_spec.init_params::<F>(rng, true));
        }
        params
    }
}

/// A coupling flow with bound parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow<F> {
    pub spec: CouplingFlowSpec,
    pub params: Vec<F>,
}

impl<F: Scalar> CouplingFlow<F> {
    pub fn new(spec: CouplingFlowSpec, params: Vec<F>) -> Result<Self, Error> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::config(format!(
                "flow parameter vector has {} entries, spec needs {}",
                params.len(),
                spec.param_count()
            )));
        }
        Ok(CouplingFlow { spec, params })
    }

    /// The identity flow (all parameters zero).
    pub fn identity(spec: CouplingFlowSpec) -> Result<Self, Error> {
        let n = spec.param_count();
        Self::new(spec, vec![F::zero(); n])
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Forward map: `z -> (y, logdet)`.
    pub fn forward(&self, z: &[F]) -> Result<(Vec<F>, F), Error> {
        if z.len() != self.spec.dim {
            return Err(Error::config(format!(
                "flow input has dim {}, spec expects {}",
                z.len(),
                self.spec.dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("flow input"));
        }
        let mut state = z.to_vec();
        let mut layer_logdets = Vec::with_capacity(self.spec.n_layers);
        let clamp = MapOp::Clamp(F::c(-SCALE_CLAMP), F::c(SCALE_CLAMP));
        for k in 0..self.spec.n_layers {
            let (ia, ib) = self.spec.masks(k);
            let (s_spec, t_spec) = self.spec.layer_nets(k);
            let (s_off, t_off) = self.spec.layer_param_offsets(k);
            let ya: Vec<F> = ia.iter().map(|&i| state[i]).collect();
            let s_raw = s_spec.apply(&self.params[s_off..], &ya)?;
            let t = t_spec.apply(&self.params[t_off..], &ya)?;
            let mut ld = F::zero();
            for (j, &i) in ib.iter().enumerate() {
                let s = clamp.apply(s_raw[j]);
                state[i] = state[i] * s.exp() + t[j];
                ld += s;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("coupling layer {k} output")));
            }
            layer_logdets.push(ld);
        }
        let mut logdet = F::zero();
        for ld in layer_logdets {
            logdet += ld;
        }
        Ok((state, logdet))
    }

    /// Exact layer-wise inversion: `y -> (z, logdet_inv)` with
    /// `logdet_inv = -logdet(forward at z)` up to round-off.
    pub fn inverse(&self, y: &[F]) -> Result<(Vec<F>, F), Error> {
        if y.len() != self.spec.dim {
            return Err(Error::config(format!(
                "flow input has dim {}, spec expects {}",
                y.len(),
                self.spec.dim
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("flow input"));
        }
        let mut state = y.to_vec();
        let mut layer_logdets = vec![F::zero(); self.spec.n_layers];
        let clamp = MapOp::Clamp(F::c(-SCALE_CLAMP), F::c(SCALE_CLAMP));
        for k in (0..self.spec.n_layers).rev() {
            let (ia, ib) = self.spec.masks(k);
            let (s_spec, t_spec) = self.spec.layer_nets(k);
            let (s_off, t_off) = self.spec.layer_param_offsets(k);
            let ya: Vec<F> = ia.iter().map(|&i| state[i]).collect();
            let s_raw = s_spec.apply(&self.params[s_off..], &ya)?;
            let t = t_spec.apply(&self.params[t_off..], &ya)?;
            let mut ld = F::zero();
            for (j, &i) in ib.iter().enumerate() {
                let s = clamp.apply(s_raw[j]);
                state[i] = (state[i] - t[j]) * (-s).exp();
                ld += s;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("coupling layer {k} inversion")));
            }
            layer_logdets[k] = ld;
        }
        // Sum in ascending layer order, matching forward, then negate.
        let mut logdet = F::zero();
        for ld in layer_logdets {
            logdet += ld;
        }
        Ok((state, -logdet))
    }

    /// Forward pass on the tape, reading flow parameters from `params_node`
    /// at `offset`. Returns `(output, logdet)` nodes.
    pub fn forward_on_tape(
        spec: &CouplingFlowSpec,
        tape: &mut Tape<F>,
        params_node: NodeId,
        offset: usize,
        input: NodeId,
    ) -> (NodeId, NodeId) {
        let mut state = input;
        let mut layer_lds = Vec::with_capacity(spec.n_layers);
        for k in 0..spec.n_layers {
            let (ia, ib) = spec.masks(k);
            let (s_spec, t_spec) = spec.layer_nets(k);
            let (s_off, t_off) = spec.layer_param_offsets(k);
            let ia = Arc::new(ia);
            let ib = Arc::new(ib);
            let ya = tape.gather(state, ia.clone());
            let yb = tape.gather(state, ib.clone());
            let s_raw = s_spec.apply_on_tape(tape, params_node, offset + s_off, ya);
            let s = tape.map(s_raw, MapOp::Clamp(F::c(-SCALE_CLAMP), F::c(SCALE_CLAMP)));
            let t = t_spec.apply_on_tape(tape, params_node, offset + t_off, ya);
            let es = tape.map(s, MapOp::Exp);
            let scaled = tape.mul(yb, es);
            let yb2 = tape.add(scaled, t);
            state = tape.assemble_pair(spec.dim, ya, ia, yb2, ib);
            layer_lds.push(tape.sum(s));
        }
        let logdet = if layer_lds.is_empty() {
            tape.scalar_constant(F::zero())
        } else {
            tape.lin_comb(layer_lds.into_iter().map(|id| (F::one(), id)).collect(), F::zero())
        };
        (state, logdet)
    }

    /// Draw `count` pushforward samples (flattened `count x dim`).
    pub fn sample(&self, count: usize, rng: &mut ChaCha12Rng) -> Result<Vec<F>, Error> {
        let dim = self.spec.dim;
        let mut z = vec![F::zero(); dim];
        let mut out = Vec::with_capacity(count * dim);
        for _ in 0..count {
            fill_normal(rng, &mut z);
            let (y, _) = self.forward(&z)?;
            out.extend_from_slice(&y);
        }
        Ok(out)
    }
}

/// Log-density of the standard normal reference on `R^dim`.
pub fn log_density_ref<F: Scalar>(z: &[F]) -> F {
    let mut ss = F::zero();
    for &v in z {
        ss += v * v;
    }
    let dim = F::from_usize(z.len()).unwrap();
    -F::c(0.5) * (dim * F::c(LN_TWO_PI) + ss)
}
