//! Multilayer perceptrons over a flat parameter vector.
//!
//! Parameter layout, per layer in order: weight matrix row-major
//! (`out x in`), then bias (`out`). The same layout is used on and off the
//! tape, and both paths evaluate through [`affine`] so results agree bitwise.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::uniform_01;
use crate::scalar::Scalar;
use crate::tape::{Activation, NodeId, Tape};

/// `out = W x + b`, accumulating each row left to right.
#[inline]
pub fn affine<F: Scalar>(w: &[F], b: &[F], x: &[F], out: &mut [F]) {
    let rows = out.len();
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(b.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = F::zero();
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = b[r] + acc;
    }
}

/// Architecture of a feed-forward network: `widths[0]` inputs through hidden
/// layers to `widths.last()` outputs, `activation` on all but the last layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self, Error> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::config("MLP layer widths must be positive"));
        }
        Ok(MlpSpec { widths, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total parameter count: Σ (in·out + out) over layers.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(w_off, b_off, rows, cols)` of layer `k` relative to the spec start.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for j in 0..k {
            off += self.widths[j] * self.widths[j + 1] + self.widths[j + 1];
        }
        let rows = self.widths[k + 1];
        let cols = self.widths[k];
        (off, off + rows * cols, rows, cols)
    }

    /// Glorot-uniform weights, zero biases; optionally zero the final layer
    /// so the network starts as the zero map.
    pub fn init_params<F: Scalar>(&self, rng: &mut ChaCha12Rng, zero_final_layer: bool) -> Vec<F> {
        let mut params = vec![F::zero(); self.param_count()];
        for k in 0..self.n_layers() {
            let (w_off, _, rows, cols) = self.layer_offsets(k);
            if zero_final_layer && k == self.n_layers() - 1 {
                continue;
            }
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for w in &mut params[w_off..w_off + rows * cols] {
                let u: F = uniform_01(rng);
                *w = (u + u - F::one()) * F::c(bound);
            }
        }
        params
    }

    /// Plain forward pass; `params` is the slice starting at this network's
    /// parameters.
    pub fn apply<F: Scalar>(&self, params: &[F], input: &[F]) -> Result<Vec<F>, Error> {
        if input.len() != self.input_dim() {
            return Err(Error::config(format!(
                "MLP input has dim {}, spec expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if params.len() < self.param_count() {
            return Err(Error::config(format!(
                "MLP parameter slice has {} entries, spec needs {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut cur = input.to_vec();
        for k in 0..self.n_layers() {
            let (w_off, b_off, rows, cols) = self.layer_offsets(k);
            let mut next = vec![F::zero(); rows];
            affine(&params[w_off..w_off + rows * cols], &params[b_off..b_off + rows], &cur, &mut next);
            if k + 1 < self.n_layers() {
                for v in &mut next {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass on the tape, reading parameters from `params_node`
    /// starting at `offset`.
    pub fn apply_on_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params_node: NodeId,
        offset: usize,
        input: NodeId,
    ) -> NodeId {
        let mut cur = input;
        for k in 0..self.n_layers() {
            let (w_off, b_off, rows, cols) = self.layer_offsets(k);
            cur = tape.linear_from(params_node, offset + w_off, offset + b_off, cur, rows, cols);
            if k + 1 < self.n_layers() {
                cur = tape.activation(cur, self.activation);
            }
        }
        cur
    }
}
