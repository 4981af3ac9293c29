//! Parametric online baseline: exponential triggering functions
//! `a_{i,j} exp(-b_{i,j} t)` with the decays known a priori, fitted by
//! projected gradient descent on the same discretized risk as the
//! nonparametric estimator. Used for mismatch comparisons.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{build_grid, instantaneous_risk};
use crate::npole::{mu_step, rho, HyperParams};
use crate::process::EventStream;
use crate::{Error, Result};

/// Exponential parametric model; trigger `(i, j)` is
/// `a[i*p+j] * exp(-b[i*p+j] t)` for `t >= 0`, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpModel {
    pub p: usize,
    /// Nonnegative amplitudes.
    pub a: Vec<f64>,
    /// Positive decay rates.
    pub b: Vec<f64>,
    pub mu: Vec<f64>,
}

impl ExpModel {
    pub fn uniform(p: usize, alpha: f64, beta: f64, mu: f64) -> Result<Self> {
        let m = ExpModel {
            p,
            a: vec![alpha; p * p],
            b: vec![beta; p * p],
            mu: vec![mu; p],
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidInput("p must be at least 1".into()));
        }
        let pp = self.p * self.p;
        if self.a.len() != pp || self.b.len() != pp || self.mu.len() != self.p {
            return Err(Error::InvalidInput("exp model fields must be p*p, p*p, p".into()));
        }
        if self.a.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("amplitudes must be nonnegative".into()));
        }
        if self.b.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("decay rates must be positive and finite".into()));
        }
        if self.mu.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("base rates must be nonnegative".into()));
        }
        Ok(())
    }

    /// `a_{i,j} exp(-b_{i,j} t)`, zero for negative lags.
    pub fn eval_trigger(&self, i: usize, j: usize, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let e = i * self.p + j;
        self.a[e] * (-self.b[e] * t).exp()
    }
}

/// One strided snapshot of the baseline fit.
#[derive(Debug, Clone)]
pub struct ExpSnapshot {
    pub k: usize,
    pub t: f64,
    pub mu_hat: Vec<f64>,
    /// Row-major amplitude estimates.
    pub a_hat: Vec<f64>,
    /// Per-row cumulative instantaneous risk, with the L2 amplitude
    /// penalty standing in for the RKHS term.
    pub cum_risk: Vec<f64>,
}

impl ExpSnapshot {
    pub fn model(&self, decays: &[f64]) -> ExpModel {
        let p = self.mu_hat.len();
        ExpModel { p, a: self.a_hat.clone(), b: decays.to_vec(), mu: self.mu_hat.clone() }
    }
}

#[derive(Debug)]
pub struct ExpFitResult {
    /// Strided snapshots; the last entry is the final state.
    pub snapshots: Vec<ExpSnapshot>,
    /// Row-major decays the fit was run with.
    pub decays: Vec<f64>,
    pub epochs: usize,
    pub kappa_z: usize,
    pub wall_seconds: f64,
}

impl ExpFitResult {
    pub fn final_state(&self) -> &ExpSnapshot {
        self.snapshots.last().expect("fit always emits a final snapshot")
    }

    pub fn final_model(&self) -> ExpModel {
        self.final_state().model(&self.decays)
    }
}

/// Gradient of the epoch loss in one amplitude: `rho_k * s_ij + zeta * a_ij`
/// where `s_ij` sums `exp(-b_ij lag)` over the window events of source `j`.
pub fn alpha_gradient(rho_k: f64, s_ij: f64, zeta_ij: f64, a_ij: f64) -> f64 {
    rho_k * s_ij + zeta_ij * a_ij
}

fn run_row_exp(
    stream_horizon_hyper: (&EventStream, &HyperParams),
    grid: &crate::discretize::UpdateGrid,
    per_dim_times: &[Vec<f64>],
    fired_row: &[u32],
    decays: &[f64],
    i: usize,
) -> Result<Vec<ExpRowSnap>> {
    let (_, hyper) = stream_horizon_hyper;
    let p = hyper.p;
    let m = grid.n_epochs();
    let beta_row = &decays[i * p..(i + 1) * p];
    let zeta_row = &hyper.zeta[i * p..(i + 1) * p];

    let mut mu = 10.0 * hyper.mu_min;
    let mut a = vec![0.0f64; p];
    let mut s = vec![0.0f64; p];
    let mut norms = vec![0.0f64; p];
    let mut cum_risk = 0.0;
    let mut lo = vec![0usize; p];
    let mut hi = vec![0usize; p];
    let mut fired_cursor = 0usize;
    let mut snaps = Vec::new();

    for k in 1..=m {
        let t = grid.times[k - 1];
        let dt = grid.dt(k - 1);
        let mut x = 0u32;
        while fired_cursor < fired_row.len() && fired_row[fired_cursor] == (k - 1) as u32 {
            x += 1;
            fired_cursor += 1;
        }

        let mut lam = mu;
        for j in 0..p {
            let times_j = &per_dim_times[j];
            while hi[j] < times_j.len() && times_j[hi[j]] < t {
                hi[j] += 1;
            }
            while lo[j] < hi[j] && times_j[lo[j]] < t - hyper.z {
                lo[j] += 1;
            }
            let mut acc = 0.0;
            for idx in lo[j]..hi[j] {
                acc += (-beta_row[j] * (t - times_j[idx])).exp();
            }
            s[j] = acc;
            lam += a[j] * acc;
            norms[j] = a[j] * a[j];
        }

        let rho_k = rho(dt, x, lam, hyper.mu_min)?;
        cum_risk += instantaneous_risk(lam, dt, x, mu, &norms, hyper.omega[i], zeta_row)?;

        let eta = hyper.eta(k);
        mu = mu_step(mu, rho_k, eta, hyper.omega[i], hyper.mu_min);
        for j in 0..p {
            a[j] = (a[j] - eta * alpha_gradient(rho_k, s[j], zeta_row[j], a[j])).max(0.0);
            assert!(a[j] >= 0.0, "amplitude iterate went negative");
        }

        if k % hyper.snapshot_stride == 0 || k == m {
            snaps.push(ExpRowSnap { k, t, mu, cum_risk, a: a.clone() });
        }
    }
    Ok(snaps)
}

struct ExpRowSnap {
    k: usize,
    t: f64,
    mu: f64,
    cum_risk: f64,
    a: Vec<f64>,
}

/// Online projected gradient descent over the amplitudes of an exponential
/// model with known row-major decays. Same update grid, step schedule,
/// baseline step, and risk accounting as the nonparametric fit; per-epoch
/// cost is the window size. Rows run in parallel.
pub fn ogd_exp_fit(stream: &EventStream, hyper: &HyperParams, decays: &[f64]) -> Result<ExpFitResult> {
    hyper.validate()?;
    if stream.p != hyper.p {
        return Err(Error::InvalidInput(format!(
            "stream has {} dimensions, hyper wants {}",
            stream.p, hyper.p
        )));
    }
    if decays.len() != hyper.p * hyper.p {
        return Err(Error::InvalidInput("decays must be a row-major p*p matrix".into()));
    }
    if decays.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("decay rates must be positive and finite".into()));
    }

    let grid = build_grid(stream, hyper.delta, stream.horizon)?;
    let per_dim_times = stream.per_dim_times();
    let mut fired_rows: Vec<Vec<u32>> = vec![Vec::new(); hyper.p];
    for &(epoch, dim) in &grid.fired {
        fired_rows[dim as usize].push(epoch);
    }

    let start = Instant::now();
    let rows: Result<Vec<Vec<ExpRowSnap>>> = (0..hyper.p)
        .into_par_iter()
        .map(|i| run_row_exp((stream, hyper), &grid, &per_dim_times, &fired_rows[i], decays, i))
        .collect();
    let rows = rows?;
    let wall = start.elapsed().as_secs_f64();

    let n_snaps = rows[0].len();
    let mut snapshots = Vec::with_capacity(n_snaps);
    for si in 0..n_snaps {
        let mut mu_hat = Vec::with_capacity(hyper.p);
        let mut a_hat = Vec::with_capacity(hyper.p * hyper.p);
        let mut cum_risk = Vec::with_capacity(hyper.p);
        for row in &rows {
            let snap = &row[si];
            mu_hat.push(snap.mu);
            cum_risk.push(snap.cum_risk);
            a_hat.extend_from_slice(&snap.a);
        }
        snapshots.push(ExpSnapshot { k: rows[0][si].k, t: rows[0][si].t, mu_hat, a_hat, cum_risk });
    }

    Ok(ExpFitResult {
        snapshots,
        decays: decays.to_vec(),
        epochs: grid.n_epochs(),
        kappa_z: stream.max_window_count(hyper.z),
        wall_seconds: wall,
    })
}
