//! Observed trajectories: a uniform time grid plus a state sequence.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::Error;
use crate::scalar::Scalar;

/// Time grid plus state sequence of a (possibly vector-valued) process.
///
/// Invariants, enforced at construction:
/// - times strictly increasing with constant spacing (1e-12 relative tolerance),
/// - one `dim`-dimensional state per time stamp, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    times: Vec<F>,
    /// Row-major `len x dim` state storage.
    states: Vec<F>,
    dim: usize,
}

impl<F: Scalar> Trajectory<F> {
    pub fn new(times: Vec<F>, states: Vec<F>, dim: usize) -> Result<Self, Error> {
        if times.is_empty() {
            return Err(Error::config("trajectory must contain at least one time point"));
        }
        if dim == 0 {
            return Err(Error::config("trajectory dimension must be positive"));
        }
        if states.len() != times.len() * dim {
            return Err(Error::config(format!(
                "state storage has {} entries, expected {} x {}",
                states.len(),
                times.len(),
                dim
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || states.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("trajectory contents"));
        }
        if times.len() > 1 {
            let dt0 = times[1] - times[0];
            if dt0 <= F::zero() {
                return Err(Error::config("trajectory times must be strictly increasing"));
            }
            // Relative tolerance 1e-12, widened by a few ulps of the time
            // magnitude: consecutive-difference quantization on long grids
            // is ulp(t), which no representable uniform grid can beat.
            let span = times[0].abs().max(times[times.len() - 1].abs());
            let tol = F::c(1e-12) * dt0 + F::c(8.0) * F::epsilon() * span;
            for w in times.windows(2) {
                let dt = w[1] - w[0];
                if dt <= F::zero() {
                    return Err(Error::config("trajectory times must be strictly increasing"));
                }
                if (dt - dt0).abs() > tol {
                    return Err(Error::config("trajectory spacing must be uniform"));
                }
            }
        }
        Ok(Trajectory { times, states, dim })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of transitions (`len - 1`).
    pub fn transitions(&self) -> usize {
        self.times.len() - 1
    }

    /// Grid spacing; zero for a single-point trajectory.
    pub fn dt(&self) -> F {
        if self.times.len() < 2 {
            F::zero()
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn times(&self) -> &[F] {
        &self.times
    }

    pub fn state(&self, m: usize) -> &[F] {
        &self.states[m * self.dim..(m + 1) * self.dim]
    }

    pub fn states_flat(&self) -> &[F] {
        &self.states
    }

    /// Keep every `stride`-th point (always keeps the first).
    pub fn subsample(&self, stride: usize) -> Result<Self, Error> {
        if stride == 0 {
            return Err(Error::config("subsample stride must be positive"));
        }
        let times: Vec<F> = self.times.iter().copied().step_by(stride).collect();
        let mut states = Vec::with_capacity(times.len() * self.dim);
        for m in (0..self.len()).step_by(stride) {
            states.extend_from_slice(self.state(m));
        }
        Trajectory::new(times, states, self.dim)
    }

    /// Write as CSV: header `t,x_0,...,x_{d-1}`, full double precision.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), Error> {
        let mut out = BufWriter::new(w);
        write!(out, "t")?;
        for j in 0..self.dim {
            write!(out, ",x_{j}")?;
        }
        writeln!(out)?;
        for m in 0..self.len() {
            write!(out, "{}", fmt_g17(self.times[m]))?;
            for v in self.state(m) {
                write!(out, ",{}", fmt_g17(*v))?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, Error> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::config("empty trajectory CSV"))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(Error::config(format!("bad trajectory CSV header: {header}")));
        }
        let dim = cols.len() - 1;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.trim().split(',');
            let t: f64 = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|e| Error::config(format!("row {}: bad time: {e}", lineno + 2)))?;
            times.push(F::c(t));
            let mut count = 0;
            for field in fields {
                let v: f64 = field
                    .parse()
                    .map_err(|e| Error::config(format!("row {}: bad state: {e}", lineno + 2)))?;
                states.push(F::c(v));
                count += 1;
            }
            if count != dim {
                return Err(Error::config(format!(
                    "row {}: expected {dim} state columns, got {count}",
                    lineno + 2
                )));
            }
        }
        Trajectory::new(times, states, dim)
    }

    pub fn load_csv(path: &Path) -> Result<Self, Error> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Format a scalar with 17 significant digits (lossless f64 round-trip).
pub fn fmt_g17<F: Scalar>(x: F) -> String {
    format!("{:.16e}", x.to_f64_c())
}
