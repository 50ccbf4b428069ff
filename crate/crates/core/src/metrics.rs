//! Evaluation metrics: drift MSE grids, same-noise path comparison, and
//! finite-time law comparison (Kolmogorov-Smirnov, Wasserstein-1, KDE).

use rayon::prelude::*;

use crate::error::Error;
use crate::linalg::Sigma;
use crate::reduce::{sorted, tree_sum};
use crate::rng::StreamKey;
use crate::scalar::Scalar;
use crate::sde::simulate_reduced;
use crate::traj::Trajectory;

/// Rectangular evaluation grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub points_per_axis: Vec<usize>,
}

impl EvalGrid {
    /// Default grids: 200 points on [-2, 2] for d = 1; 50 x 50 on [-2, 2]²
    /// for d = 2 (and the analogous product beyond).
    pub fn default_for_dim(d: usize) -> Self {
        let per_axis = if d == 1 { 200 } else { 50 };
        EvalGrid {
            mins: vec![-2.0; d],
            maxs: vec![2.0; d],
            points_per_axis: vec![per_axis; d],
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.mins.is_empty()
            || self.mins.len() != self.maxs.len()
            || self.mins.len() != self.points_per_axis.len()
        {
            return Err(Error::config("grid axis specifications must agree and be non-empty"));
        }
        for ((lo, hi), n) in self.mins.iter().zip(&self.maxs).zip(&self.points_per_axis) {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::config("grid bounds must be finite with min < max"));
            }
            if *n < 2 {
                return Err(Error::config("grids need at least 2 points per axis"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn n_points(&self) -> usize {
        self.points_per_axis.iter().product()
    }

    /// Flattened point list, row-major with the last axis fastest.
    pub fn flatten<F: Scalar>(&self) -> Vec<F> {
        let d = self.dim();
        let total = self.n_points();
        let mut out = Vec::with_capacity(total * d);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            for (a, &i) in idx.iter().enumerate() {
                let n = self.points_per_axis[a];
                let t = i as f64 / (n - 1) as f64;
                out.push(F::c(self.mins[a] + t * (self.maxs[a] - self.mins[a])));
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < self.points_per_axis[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }
}

/// Mean squared drift error over grid points:
/// `mean_m ‖estimated(x_m) - oracle(x_m)‖²`.
pub fn drift_mse_on_grid<F: Scalar>(
    estimated: &dyn Fn(&[F], &mut [F]),
    oracle: &dyn Fn(&[F], &mut [F]),
    points: &[F],
    d: usize,
) -> Result<F, Error> {
    let n = points.len() / d;
    if n == 0 {
        return Err(Error::config("empty evaluation grid"));
    }
    let mut est = vec![F::zero(); d];
    let mut orc = vec![F::zero(); d];
    let mut sq = Vec::with_capacity(n);
    for m in 0..n {
        let x = &points[m * d..(m + 1) * d];
        estimated(x, &mut est);
        oracle(x, &mut orc);
        let mut acc = F::zero();
        for c in 0..d {
            let gap = est[c] - orc[c];
            acc += gap * gap;
        }
        if !acc.is_finite() {
            return Err(Error::non_finite(format!("drift evaluation at grid point {m}")));
        }
        sq.push(acc);
    }
    Ok(tree_sum(&sq) / F::from_usize(n).unwrap())
}

/// Root-mean-square state gap before (`t <= split_time`) and after
/// (`t > split_time`) the split. Empty segments report zero.
pub fn path_discrepancy<F: Scalar>(
    traj_a: &Trajectory<F>,
    traj_b: &Trajectory<F>,
    split_time: F,
) -> Result<(F, F), Error> {
    if traj_a.len() != traj_b.len()
        || traj_a.dim() != traj_b.dim()
        || traj_a.times() != traj_b.times()
    {
        return Err(Error::config("path comparison requires identical time grids"));
    }
    let d = traj_a.dim();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for m in 0..traj_a.len() {
        let mut acc = F::zero();
        for (xa, xb) in traj_a.state(m).iter().zip(traj_b.state(m)) {
            let gap = *xa - *xb;
            acc += gap * gap;
        }
        if traj_a.times()[m] <= split_time {
            pre.push(acc);
        } else {
            post.push(acc);
        }
    }
    let rmse = |v: &[F]| {
        if v.is_empty() {
            F::zero()
        } else {
            (tree_sum(v) / (F::from_usize(v.len()).unwrap() * F::from_usize(d).unwrap())).sqrt()
        }
    };
    Ok((rmse(&pre), rmse(&post)))
}

/// Two-sample Kolmogorov-Smirnov statistic: sup-norm gap of the empirical
/// CDFs, computed exactly by a merge scan over the sorted samples.
pub fn ks_statistic<F: Scalar>(samples_a: &[F], samples_b: &[F]) -> Result<F, Error> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::config("KS statistic needs non-empty samples"));
    }
    let a = sorted(samples_a);
    let b = sorted(samples_b);
    let n = a.len();
    let m = b.len();
    let nf = F::from_usize(n).unwrap();
    let mf = F::from_usize(m).unwrap();
    let mut i = 0;
    let mut j = 0;
    let mut d = F::zero();
    while i < n || j < m {
        let v = match (a.get(i), b.get(j)) {
            (Some(&av), Some(&bv)) => {
                if av < bv {
                    av
                } else {
                    bv
                }
            }
            (Some(&av), None) => av,
            (None, Some(&bv)) => bv,
            (None, None) => break,
        };
        while i < n && a[i] == v {
            i += 1;
        }
        while j < m && b[j] == v {
            j += 1;
        }
        let gap = (F::from_usize(i).unwrap() / nf - F::from_usize(j).unwrap() / mf).abs();
        if gap > d {
            d = gap;
        }
    }
    Ok(d)
}

/// Exact 1-d Wasserstein-1 distance between empirical laws.
///
/// Equal sample counts use the sorted-pairing fast path
/// (`mean |a_(i) - b_(i)|`). Unequal counts integrate the quantile gap
/// exactly over the piecewise-constant inverse CDFs, walking segments with
/// integer arithmetic (positions compared as `i·m` vs `j·n`), so no
/// resampling is involved.
pub fn wasserstein_1d<F: Scalar>(samples_a: &[F], samples_b: &[F]) -> Result<F, Error> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::config("Wasserstein distance needs non-empty samples"));
    }
    let a = sorted(samples_a);
    let b = sorted(samples_b);
    let n = a.len();
    let m = b.len();
    if n == m {
        let mut acc = F::zero();
        for (x, y) in a.iter().zip(&b) {
            acc += (*x - *y).abs();
        }
        return Ok(acc / F::from_usize(n).unwrap());
    }
    // Segment walk over the union of breakpoints {i/n} ∪ {j/m}, in units of
    // 1/(n·m).
    let (n64, m64) = (n as u64, m as u64);
    let mut i = 0u64;
    let mut j = 0u64;
    let mut cur = 0u64;
    let mut acc = F::zero();
    while i < n64 && j < m64 {
        let top_a = (i + 1) * m64;
        let top_b = (j + 1) * n64;
        let top = top_a.min(top_b);
        let width = F::from_u64(top - cur).unwrap();
        let gap = (a[i as usize] - b[j as usize]).abs();
        acc += gap * width;
        cur = top;
        if top_a == top {
            i += 1;
        }
        if top_b == top {
            j += 1;
        }
    }
    Ok(acc / F::from_u64(n64 * m64).unwrap())
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth<F: Scalar>(samples: &[F]) -> F {
    let n = samples.len();
    let nf = F::from_usize(n).unwrap();
    let mean = tree_sum(samples) / nf;
    let devs: Vec<F> = samples.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let sd = (tree_sum(&devs) / (nf - F::one()).max(F::one())).sqrt();
    let srt = sorted(samples);
    let iqr = crate::reduce::quantile_sorted(&srt, 0.75) - crate::reduce::quantile_sorted(&srt, 0.25);
    let spread = if iqr > F::zero() { sd.min(iqr / F::c(1.34)) } else { sd };
    let h = F::c(0.9) * spread * nf.powf(F::c(-0.2));
    if h > F::zero() {
        h
    } else {
        // Degenerate sample set: fall back to a scale-aware floor.
        F::c(1e-3) * (F::one() + srt[n / 2].abs())
    }
}

/// Gaussian kernel density estimate on a fixed grid.
pub fn kde_gaussian<F: Scalar>(samples: &[F], grid: &[F], bandwidth: F) -> Vec<F> {
    let nf = F::from_usize(samples.len()).unwrap();
    let norm = F::one() / (nf * bandwidth * F::c((2.0 * std::f64::consts::PI).sqrt()));
    let half = F::c(0.5);
    grid.iter()
        .map(|&g| {
            let vals: Vec<F> = samples
                .iter()
                .map(|&x| {
                    let u = (g - x) / bandwidth;
                    (-half * u * u).exp()
                })
                .collect();
            tree_sum(&vals) * norm
        })
        .collect()
}

/// Evenly spaced KDE grid covering both sample sets plus `4h` padding.
pub fn kde_grid<F: Scalar>(samples_a: &[F], samples_b: &[F], n_points: usize) -> (Vec<F>, F, F) {
    let ha = silverman_bandwidth(samples_a);
    let hb = silverman_bandwidth(samples_b);
    let pad = F::c(4.0) * ha.max(hb);
    let min = samples_a
        .iter()
        .chain(samples_b)
        .cloned()
        .fold(F::infinity(), F::min)
        - pad;
    let max = samples_a
        .iter()
        .chain(samples_b)
        .cloned()
        .fold(F::neg_infinity(), F::max)
        + pad;
    let step = (max - min) / F::from_usize(n_points - 1).unwrap();
    let grid = (0..n_points).map(|i| min + F::from_usize(i).unwrap() * step).collect();
    (grid, ha, hb)
}

/// Trapezoid-rule integral of tabulated values on an even grid.
pub fn trapezoid<F: Scalar>(grid: &[F], values: &[F]) -> F {
    let mut acc = F::zero();
    for i in 1..grid.len() {
        acc += (grid[i] - grid[i - 1]) * (values[i] + values[i - 1]) * F::c(0.5);
    }
    acc
}

/// Per-time finite-time law comparison of two drift functions under shared
/// Brownian noise.
#[derive(Debug, Clone)]
pub struct LawComparison<F> {
    pub times: Vec<F>,
    pub ks: Vec<F>,
    pub w1: Vec<F>,
    /// Per requested time: (grid, density under true drift, density under
    /// estimated drift).
    pub kde: Vec<(Vec<F>, Vec<F>, Vec<F>)>,
}

/// Simulate `l_paths` coupled path pairs (identical noise per pair), extract
/// the time marginals of coordinate 0, and compare the empirical laws at
/// every requested time.
#[allow(clippy::too_many_arguments)]
pub fn law_comparison_report<F: Scalar>(
    drift_true: &(dyn Fn(&[F], &mut [F]) + Sync),
    drift_est: &(dyn Fn(&[F], &mut [F]) + Sync),
    sigma: &Sigma<F>,
    x0: &[F],
    times: &[F],
    l_paths: usize,
    dt: F,
    seed: u64,
    kde_points: usize,
) -> Result<LawComparison<F>, Error> {
    if times.is_empty() || l_paths == 0 {
        return Err(Error::config("law comparison needs times and at least one path"));
    }
    let horizon = times.iter().cloned().fold(F::neg_infinity(), F::max);
    if horizon <= F::zero() {
        return Err(Error::config("comparison times must be positive"));
    }
    // Map requested times onto step indices of the simulation grid.
    let mut time_idx = Vec::with_capacity(times.len());
    for &t in times {
        let ratio = (t / dt).to_f64_c();
        let idx = ratio.round();
        if (ratio - idx).abs() > 1e-6 {
            return Err(Error::config(format!(
                "comparison time {t} is not on the dt = {dt} grid"
            )));
        }
        time_idx.push(idx as usize);
    }

    let key = StreamKey::new(seed).child("law-comparison");
    type PairMarginals<F> = Vec<Result<(Vec<F>, Vec<F>), Error>>;
    let marginals: PairMarginals<F> = (0..l_paths)
        .into_par_iter()
        .map(|p| {
            let path_seed = key.index(p as u64).seed();
            let ta = simulate_reduced(drift_true, sigma, x0, horizon, dt, path_seed)?;
            let tb = simulate_reduced(drift_est, sigma, x0, horizon, dt, path_seed)?;
            let a: Vec<F> = time_idx.iter().map(|&i| ta.state(i)[0]).collect();
            let b: Vec<F> = time_idx.iter().map(|&i| tb.state(i)[0]).collect();
            Ok((a, b))
        })
        .collect();

    let mut true_marg = vec![Vec::with_capacity(l_paths); times.len()];
    let mut est_marg = vec![Vec::with_capacity(l_paths); times.len()];
    for res in marginals {
        let (a, b) = res?;
        for (t, (va, vb)) in a.into_iter().zip(b).enumerate() {
            true_marg[t].push(va);
            est_marg[t].push(vb);
        }
    }

    let mut ks = Vec::with_capacity(times.len());
    let mut w1 = Vec::with_capacity(times.len());
    let mut kde = Vec::with_capacity(times.len());
    for t in 0..times.len() {
        ks.push(ks_statistic(&true_marg[t], &est_marg[t])?);
        w1.push(wasserstein_1d(&true_marg[t], &est_marg[t])?);
        let (grid, ha, hb) = kde_grid(&true_marg[t], &est_marg[t], kde_points);
        let da = kde_gaussian(&true_marg[t], &grid, ha);
        let db = kde_gaussian(&est_marg[t], &grid, hb);
        kde.push((grid, da, db));
    }
    Ok(LawComparison { times: times.to_vec(), ks, w1, kde })
}

/// Linear-interpolation table of a 1-d drift function, used to make
/// ensemble simulation of Monte-Carlo drifts affordable. Evaluation clamps
/// to the table's ends outside the range.
#[derive(Debug, Clone)]
pub struct TabulatedDrift1d<F> {
    min: F,
    step: F,
    values: Vec<F>,
}

impl<F: Scalar> TabulatedDrift1d<F> {
    pub fn build(
        f: &dyn Fn(&[F], &mut [F]),
        min: F,
        max: F,
        n_points: usize,
    ) -> Result<Self, Error> {
        if n_points < 2 || min.partial_cmp(&max) != Some(std::cmp::Ordering::Less) {
            return Err(Error::config("drift table needs min < max and at least two points"));
        }
        let step = (max - min) / F::from_usize(n_points - 1).unwrap();
        let mut values = Vec::with_capacity(n_points);
        let mut out = [F::zero()];
        for i in 0..n_points {
            let x = [min + F::from_usize(i).unwrap() * step];
            f(&x, &mut out);
            if !out[0].is_finite() {
                return Err(Error::non_finite(format!("drift table entry {i}")));
            }
            values.push(out[0]);
        }
        Ok(TabulatedDrift1d { min, step, values })
    }

    pub fn eval(&self, x: F) -> F {
        let pos = (x - self.min) / self.step;
        if pos <= F::zero() {
            return self.values[0];
        }
        let last = self.values.len() - 1;
        let lastf = F::from_usize(last).unwrap();
        if pos >= lastf {
            return self.values[last];
        }
        let i = pos.floor().to_usize().unwrap();
        let w = pos - F::from_usize(i).unwrap();
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }
}
