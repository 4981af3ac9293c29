//! Update grid, discretized likelihood, instantaneous risk, and the
//! truncation + discretization error bound.
//!
//! The grid places an epoch at every event time and at every multiple of
//! `delta` in between, so intervals never exceed `delta` and each
//! interval contains at most one event per dimension. The discretized
//! negative log-likelihood replaces each integral of the intensity over
//! an interval by a right-endpoint rectangle; the error of doing so,
//! together with the error of truncating the intensity to a recent
//! window, is controlled by tail functions of the triggering functions
//! and audited by `prop1_bound`.

use crate::process::{intensity_left, EventStream, GroundTruthFn, HawkesModel, TriggerFn};
use crate::quad::erfc;
use crate::{Error, Result};
use std::io::Write;

// ======================= update grid =======================

/// Epochs `0 = t_0 < t_1 < ... < t_M = T` with per-epoch event markers.
/// `times` holds `t_1..=t_M`; `fired` holds `(epoch index, dimension)`
/// pairs sorted by epoch, one per event.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateGrid {
    pub delta: f64,
    pub t_end: f64,
    pub times: Vec<f64>,
    pub fired: Vec<(u32, u32)>,
}

impl UpdateGrid {
    pub fn n_epochs(&self) -> usize {
        self.times.len()
    }

    /// Interval length `t_k - t_{k-1}` (0-indexed: `dt(0) = t_1 - 0`).
    pub fn dt(&self, k: usize) -> f64 {
        if k == 0 {
            self.times[0]
        } else {
            self.times[k] - self.times[k - 1]
        }
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.n_epochs()).map(|k| self.dt(k)).fold(0.0, f64::max)
    }

    /// Dense indicator row for epoch `k` (test and export path; the
    /// estimator walks `fired` directly).
    pub fn indicators(&self, k: usize, p: usize) -> Vec<u32> {
        let mut x = vec![0u32; p];
        let lo = self.fired.partition_point(|&(e, _)| e < k as u32);
        for &(e, d) in &self.fired[lo..] {
            if e != k as u32 {
                break;
            }
            x[d as usize] += 1;
        }
        x
    }
}

/// Largest lattice multiple of `delta` at or below `t`, with relative
/// slack so representation error cannot duplicate or skip a tick.
fn floor_to_lattice(t: f64, delta: f64) -> f64 {
    let q = t / delta;
    let r = q.round_ties_even();
    if (q - r).abs() <= 1e-9 * q.abs().max(1.0) {
        r * delta
    } else {
        q.floor() * delta
    }
}

/// Build the update grid on `[0, T]`: each next epoch is the earlier of
/// the next `delta` tick and the next arrival strictly after the current
/// epoch. Arrivals beyond `T` are ignored; `T` itself is always the last
/// epoch.
pub fn build_grid(stream: &EventStream, delta: f64, t_end: f64) -> Result<UpdateGrid> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {t_end}")));
    }
    if !stream.is_sorted() {
        return Err(Error::InvalidInput("stream must be sorted to build a grid".into()));
    }
    if stream.times.first().is_some_and(|&t| t <= 0.0) {
        return Err(Error::InvalidInput(
            "events at or before time 0 precede the first grid interval".into(),
        ));
    }
    let mut times = Vec::with_capacity((t_end / delta).ceil() as usize + stream.n_events());
    let mut fired = Vec::with_capacity(stream.n_events());
    let mut t = 0.0f64;
    let mut ev = 0usize;
    while t < t_end {
        let tick = (floor_to_lattice(t, delta) + delta).min(t_end);
        let next = if ev < stream.n_events() && stream.times[ev] <= tick {
            stream.times[ev]
        } else {
            tick
        };
        debug_assert!(next > t, "grid stalled at {t}");
        let k = times.len() as u32;
        times.push(next);
        while ev < stream.n_events() && stream.times[ev] == next {
            fired.push((k, stream.dims[ev]));
            ev += 1;
        }
        t = next;
    }
    Ok(UpdateGrid { delta, t_end, times, fired })
}

/// Write `t_k,x_1,...,x_p` rows for debugging.
pub fn write_grid_csv<W: Write>(grid: &UpdateGrid, p: usize, mut w: W) -> Result<()> {
    let header: Vec<String> =
        std::iter::once("t".to_string()).chain((1..=p).map(|i| format!("x{i}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    let mut cursor = 0usize;
    for k in 0..grid.n_epochs() {
        let mut x = vec![0u32; p];
        while cursor < grid.fired.len() && grid.fired[cursor].0 == k as u32 {
            x[grid.fired[cursor].1 as usize] += 1;
            cursor += 1;
        }
        let row: Vec<String> = std::iter::once(format!("{}", grid.times[k]))
            .chain(x.iter().map(|v| v.to_string()))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

// ======================= discretized likelihood =======================

/// `sum_k [(t_k - t_{k-1}) lambda(t_k) - x_{i,k} log lambda(t_k)]` for an
/// arbitrary intensity evaluator. Nonpositive intensity at an epoch is a
/// domain error (it signals a projection bug upstream).
pub fn discretized_nll_with(
    mut lambda_at: impl FnMut(f64, usize) -> Result<f64>,
    grid: &UpdateGrid,
    i: usize,
) -> Result<f64> {
    let mut acc = 0.0f64;
    let mut cursor = 0usize;
    for k in 0..grid.n_epochs() {
        let t_k = grid.times[k];
        let mut x = 0u32;
        while cursor < grid.fired.len() && grid.fired[cursor].0 == k as u32 {
            if grid.fired[cursor].1 as usize == i {
                x += 1;
            }
            cursor += 1;
        }
        let lam = lambda_at(t_k, i)?;
        if !(lam > 0.0) {
            return Err(Error::Domain(format!(
                "nonpositive intensity {lam} for dimension {i} at epoch {t_k}"
            )));
        }
        acc += grid.dt(k) * lam;
        if x > 0 {
            acc -= x as f64 * lam.ln();
        }
    }
    Ok(acc)
}

/// Discretized negative log-likelihood of dimension `i` under the model's
/// truncated predictable intensity (window `z`; pass `f64::INFINITY` for
/// the untruncated version).
pub fn discretized_nll(
    model: &HawkesModel,
    stream: &EventStream,
    grid: &UpdateGrid,
    z: f64,
    i: usize,
) -> Result<f64> {
    discretized_nll_with(|t, i| intensity_left(model, stream, t, i, z), grid, i)
}

/// One regularized epoch term:
/// `dt * lambda - x log lambda + (omega/2) mu^2 + sum_j (zeta_j/2) norm_j`.
/// `f_norms_sq` are squared RKHS norms paired with `zeta`.
pub fn instantaneous_risk(
    lambda_val: f64,
    dt: f64,
    x: u32,
    mu: f64,
    f_norms_sq: &[f64],
    omega: f64,
    zeta: &[f64],
) -> Result<f64> {
    if !(lambda_val > 0.0) || lambda_val + 1e-12 < mu {
        return Err(Error::Domain(format!(
            "intensity {lambda_val} below its baseline floor {mu}"
        )));
    }
    if f_norms_sq.len() != zeta.len() {
        return Err(Error::InvalidInput("f_norms_sq and zeta length mismatch".into()));
    }
    let mut acc = dt * lambda_val;
    if x > 0 {
        acc -= x as f64 * lambda_val.ln();
    }
    acc += 0.5 * omega * mu * mu;
    for (n, z) in f_norms_sq.iter().zip(zeta) {
        acc += 0.5 * z * n;
    }
    Ok(acc)
}

// ======================= tail functions =======================

/// `beta^-1 exp(-beta (t - delta))`: tail function of `exp(-beta t)` over
/// grids with spacing at most `delta`.
pub fn tail_fn_exp(beta: f64, delta: f64, t: f64) -> f64 {
    (1.0 / beta) * (-beta * (t - delta)).exp()
}

/// Closed-form or tabulated tail functions; `eval(t)` upper-bounds the
/// remaining sup-Riemann mass `sum_{k >= m} (t_k - t_{k-1}) sup |f|` of
/// the associated function past `t = t_{m-1}`.
#[derive(Debug, Clone)]
pub enum TailFn {
    /// `scale * beta^-1 exp(-beta (t - delta))`, the tail of
    /// `scale * exp(-beta t)`.
    Exp { scale: f64, beta: f64, delta: f64 },
    /// `scale * sqrt(pi/2) erfc((t - gamma)/sqrt 2) exp(delta^2/2)`, the
    /// tail of `scale * exp(-(t - gamma)^2)`, valid for
    /// `t > gamma + 2 delta`.
    Gauss { scale: f64, gamma: f64, delta: f64 },
    /// Tabulated `int_t^inf sup_{[s-delta, s+delta]} |g|  ds` on a
    /// uniform fine grid from 0; covers functions whose closed form has a
    /// restricted validity range. Non-increasing by construction.
    Numeric { step: f64, values: Vec<f64> },
    /// Pointwise maximum: a uniform tail for a family of functions.
    Max(Vec<TailFn>),
}

impl TailFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TailFn::Exp { scale, beta, delta } => scale * tail_fn_exp(*beta, *delta, t),
            TailFn::Gauss { scale, gamma, delta } => {
                scale
                    * (std::f64::consts::PI / 2.0).sqrt()
                    * erfc((t - gamma) / std::f64::consts::SQRT_2)
                    * (0.5 * delta * delta).exp()
            }
            TailFn::Numeric { step, values } => {
                if t <= 0.0 {
                    return values[0];
                }
                let k = (t / step).floor() as usize;
                values.get(k).copied().unwrap_or(0.0)
            }
            TailFn::Max(parts) => parts.iter().map(|p| p.eval(t)).fold(0.0, f64::max),
        }
    }

    /// Brute-force tail of `|g|` over grids with spacing at most `delta`:
    /// since any interval `(t_{k-1}, t_k]` lies inside `[s - delta,
    /// s + delta]` for every `s` in it, `int_t^inf sup_{[s-delta,s+delta]}
    /// |g| ds` dominates every remaining sup-Riemann sum. Upper rectangle
    /// sums keep the bound an upper bound.
    pub fn numeric(g: impl Fn(f64) -> f64, delta: f64, cutoff: f64) -> TailFn {
        let fine = (delta / 8.0).min(cutoff / 512.0).max(1e-4);
        let n = (cutoff / fine).ceil() as usize + 1;
        let samples: Vec<f64> = (0..=n).map(|k| g(k as f64 * fine).abs()).collect();
        let reach = (delta / fine).ceil() as usize;
        let mut sliding = vec![0.0f64; n + 1];
        for k in 0..=n {
            let lo = k.saturating_sub(reach);
            let hi = (k + reach).min(n);
            sliding[k] = samples[lo..=hi].iter().copied().fold(0.0, f64::max);
        }
        let mut values = vec![0.0f64; n + 1];
        for k in (0..n).rev() {
            values[k] = values[k + 1] + fine * sliding[k].max(sliding[k + 1]);
        }
        TailFn::Numeric { step: fine, values }
    }
}

/// Uniform tail functions `(eps, eps_prime)` for a model whose entries
/// are all exponential or zero: pointwise maxima of the per-entry closed
/// forms for `f` and `|f'|`.
pub fn exponential_model_tails(model: &HawkesModel, delta: f64) -> Result<(TailFn, TailFn)> {
    let mut eps = Vec::new();
    let mut eps_prime = Vec::new();
    for f in &model.triggers {
        match f {
            TriggerFn::Ground(GroundTruthFn::ExpDecay { alpha, beta }) => {
                eps.push(TailFn::Exp { scale: *alpha, beta: *beta, delta });
                eps_prime.push(TailFn::Exp { scale: alpha * beta, beta: *beta, delta });
            }
            TriggerFn::Ground(GroundTruthFn::Zero) => {}
            _ => {
                return Err(Error::UnsupportedModel(
                    "tail construction requires exponential or zero entries".into(),
                ))
            }
        }
    }
    Ok((TailFn::Max(eps), TailFn::Max(eps_prime)))
}

/// Truncation + discretization error bound for one dimension's
/// discretized likelihood against the exact one:
/// `(1 + kappa_1 / mu_min) N(T - z) eps(z) + delta N(T) eps'(0)`.
/// Verification only; estimation never consults it.
pub fn prop1_bound(
    stream: &EventStream,
    z: f64,
    delta: f64,
    mu_min: f64,
    kappa_1: usize,
    eps: &TailFn,
    eps_prime: &TailFn,
) -> f64 {
    let n_total = stream.n_events() as f64;
    let n_before_window = stream.count_up_to(stream.horizon - z) as f64;
    (1.0 + kappa_1 as f64 / mu_min) * n_before_window * eps.eval(z)
        + delta * n_total * eps_prime.eval(0.0)
}
