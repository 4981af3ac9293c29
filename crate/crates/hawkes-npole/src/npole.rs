//! Online estimator for the triggering functions and baseline rates.
//!
//! One pass over the update grid. At each epoch the truncated intensity is
//! evaluated at the current iterates, the discretized-loss gradient is taken
//! with respect to the baseline and to each triggering function (a finite
//! kernel expansion), and the iterates move one projected gradient step.
//! Triggering-function centers are snapped to a fixed lattice so all pairs
//! share one Gramian and the per-epoch cost stays bounded.

use crate::dict::{
    gram_columns, psor_clamp, snap_slot, Pair, CLAMP_RELAX, EMIT_CLAMP_SWEEPS, EMIT_CLAMP_TOL,
    INLINE_CLAMP_SWEEPS, INLINE_CLAMP_TOL,
};
use crate::discretize::{build_grid, instantaneous_risk, UpdateGrid};
use crate::kernels::{default_snap_pitch, snap_center, Kernel, KernelExpansion};
use crate::process::{intensity_left, EventStream, HawkesModel, TriggerFn};
use crate::projection::project_poly_sdp;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// How positivity of the triggering functions is maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionMode {
    /// Clip the expansion to be nonnegative on the lattice (a QP, solved by
    /// projected SOR on the clip multipliers). The default.
    GridClip,
    /// Reparametrize `f = g^2` and run unconstrained steps on `g`. No
    /// projection; the loss in `g` is nonconvex, so the estimate depends on
    /// the (small, positive) initialization.
    SquareTransform,
    /// Exact conic projection for even-degree polynomial kernels: the
    /// expansion is nonnegative on all of `R` iff a linear matrix inequality
    /// in the coefficients holds. Much more expensive per epoch; intended
    /// for small budgets.
    PolySdp,
}

impl ProjectionMode {
    pub fn token(&self) -> &'static str {
        match self {
            ProjectionMode::GridClip => "grid-clip",
            ProjectionMode::SquareTransform => "square-transform",
            ProjectionMode::PolySdp => "poly-sdp",
        }
    }

    pub fn parse_token(s: &str) -> Result<Self> {
        match s {
            "grid-clip" => Ok(ProjectionMode::GridClip),
            "square-transform" => Ok(ProjectionMode::SquareTransform),
            "poly-sdp" => Ok(ProjectionMode::PolySdp),
            other => Err(Error::InvalidInput(format!("unknown projection mode {other:?}"))),
        }
    }
}

/// All estimator knobs. `eta(k) = 1 / (step_zeta * k + step_b)` with `k`
/// counted from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub p: usize,
    /// Maximum epoch spacing of the update grid.
    pub delta: f64,
    /// Triggering-function support: contributions older than `z` are dropped.
    pub z: f64,
    /// Per-pair RKHS penalty weights, row-major `zeta[i*p + j]`.
    pub zeta: Vec<f64>,
    /// Per-dimension baseline penalty weights.
    pub omega: Vec<f64>,
    /// Hard lower bound kept on every baseline iterate.
    pub mu_min: f64,
    pub step_zeta: f64,
    pub step_b: f64,
    pub kernel: Kernel,
    /// Maximum number of centers kept per triggering function.
    pub budget: usize,
    pub projection: ProjectionMode,
    /// Lag-snapping pitch; the dictionary is `{g, 2g, ..., z}`.
    pub snap_pitch: f64,
    /// Snapshot every this many epochs (the final epoch is always kept).
    pub snapshot_stride: usize,
}

impl HyperParams {
    pub fn new(p: usize, delta: f64, z: f64) -> Self {
        HyperParams {
            p,
            delta,
            z,
            zeta: vec![1e-8; p * p],
            omega: vec![1e-8; p],
            mu_min: 0.01,
            step_zeta: delta / 20.0,
            step_b: 100.0,
            kernel: Kernel::Gaussian { bandwidth: 0.2 },
            budget: 256,
            projection: ProjectionMode::GridClip,
            snap_pitch: default_snap_pitch(z),
            snapshot_stride: 1000,
        }
    }

    /// The faster-decaying schedule used for the reference accuracy tables.
    pub fn with_table1_schedule(mut self) -> Self {
        self.step_zeta = 1.0 / 2000.0;
        self.step_b = 10.0;
        self
    }

    pub fn set_uniform_zeta(&mut self, zeta: f64) {
        for v in &mut self.zeta {
            *v = zeta;
        }
    }

    /// Settings that reproduce the accuracy table on the 5-dim benchmark:
    /// table schedule, square-transform positivity, uniform shrinkage.
    pub fn for_reference_table(delta: f64, zeta: f64) -> Self {
        let mut h = HyperParams::new(5, delta, 3.0).with_table1_schedule();
        h.projection = ProjectionMode::SquareTransform;
        h.set_uniform_zeta(zeta);
        h
    }

    pub fn zeta_at(&self, i: usize, j: usize) -> f64 {
        self.zeta[i * self.p + j]
    }

    pub fn eta(&self, k: usize) -> f64 {
        1.0 / (self.step_zeta * k as f64 + self.step_b)
    }

    /// Lattice the snapped lags live on: `{g, 2g, ..., round(z/g)*g}`. Zero
    /// is excluded; a lag that rounds to zero is carried by the first slot.
    pub fn lattice(&self) -> Vec<f64> {
        let n = (self.z / self.snap_pitch).round() as usize;
        (1..=n).map(|s| s as f64 * self.snap_pitch).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidInput("p must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.z > self.delta) {
            return Err(Error::InvalidInput(format!(
                "window z = {} must exceed delta = {}",
                self.z, self.delta
            )));
        }
        if !(self.mu_min > 0.0) {
            return Err(Error::InvalidInput("mu_min must be positive".into()));
        }
        if !(self.step_b > 0.0) || !(self.step_zeta >= 0.0) {
            return Err(Error::InvalidInput("step schedule needs b > 0 and slope >= 0".into()));
        }
        if self.zeta.len() != self.p * self.p || self.zeta.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("zeta must be a p*p matrix of nonnegatives".into()));
        }
        if self.omega.len() != self.p || self.omega.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("omega must hold p nonnegatives".into()));
        }
        if !(self.snap_pitch > 0.0 && self.snap_pitch < self.z) {
            return Err(Error::InvalidInput("snap pitch must lie in (0, z)".into()));
        }
        if self.budget == 0 || self.snapshot_stride == 0 {
            return Err(Error::InvalidInput("budget and snapshot stride must be positive".into()));
        }
        match self.projection {
            ProjectionMode::GridClip | ProjectionMode::SquareTransform => {
                let n = (self.z / self.snap_pitch).round() as usize;
                if n > self.budget {
                    return Err(Error::InvalidInput(format!(
                        "lattice has {n} slots but budget is {}; raise the budget \
                         or coarsen snap_pitch",
                        self.budget
                    )));
                }
            }
            ProjectionMode::PolySdp => {
                self.kernel.half_degree_kernel()?;
            }
        }
        Ok(())
    }
}

/// One snapshot of the estimator. In `SquareTransform` mode `f_hat` stores
/// the square roots `g`; `eval_trigger` squares them.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub mu_hat: Vec<f64>,
    /// Row-major `p*p` expansions, entry `(i, j)` at `i*p + j`.
    pub f_hat: Vec<KernelExpansion>,
    /// Epochs consumed (1-based count).
    pub k: usize,
    /// Grid time of the last consumed epoch.
    pub t: f64,
    pub hyper: HyperParams,
    /// Per-row cumulative instantaneous risk; a regret trace is this minus
    /// the comparator's cumulative loss.
    pub cum_risk: Vec<f64>,
}

impl EstimatorState {
    pub fn trigger(&self, i: usize, j: usize) -> &KernelExpansion {
        &self.f_hat[i * self.hyper.p + j]
    }

    /// Estimated triggering function value, zero outside `[0, z]`.
    pub fn eval_trigger(&self, i: usize, j: usize, t: f64) -> f64 {
        if t < 0.0 || t > self.hyper.z {
            return 0.0;
        }
        let raw = self.trigger(i, j).eval1(t);
        match self.hyper.projection {
            ProjectionMode::SquareTransform => raw * raw,
            _ => raw,
        }
    }

    pub fn f_norm_sq(&self, i: usize, j: usize) -> f64 {
        self.trigger(i, j).rkhs_norm_sq()
    }
}

#[derive(Debug)]
pub struct FitResult {
    /// Strided snapshots; the last entry is the final state.
    pub snapshots: Vec<EstimatorState>,
    pub epochs: usize,
    /// Largest number of events any length-`z` window holds.
    pub kappa_z: usize,
    pub wall_seconds: f64,
    pub wall_per_1e4_epochs: f64,
    /// Worst infeasibility left at an emission point, in function value.
    pub max_projection_residual: f64,
    pub unconverged_projections: usize,
    /// Worst infeasibility left by a truncated between-snapshot clamp.
    pub max_inline_residual: f64,
    pub truncated_inline_clamps: usize,
}

impl FitResult {
    pub fn final_state(&self) -> &EstimatorState {
        self.snapshots.last().expect("fit always emits a final snapshot")
    }
}

// ======================= per-epoch operations =======================

/// Derivative of the epoch loss with respect to the intensity level:
/// `dt - x / lambda`. Errors if the intensity fell below `mu_min`.
pub fn rho(dt: f64, x: u32, lambda_trunc: f64, mu_min: f64) -> Result<f64> {
    if lambda_trunc + 1e-12 < mu_min {
        return Err(Error::Domain(format!(
            "truncated intensity {lambda_trunc} fell below mu_min = {mu_min}"
        )));
    }
    Ok(dt - x as f64 / lambda_trunc)
}

/// One projected gradient step on a baseline rate.
pub fn mu_step(mu_hat: f64, rho_k: f64, eta: f64, omega: f64, mu_min: f64) -> f64 {
    (mu_hat - eta * (rho_k + omega * mu_hat)).max(mu_min)
}

/// Gradient of the epoch loss in the RKHS, as an expansion: one center per
/// window event at the snapped lag with coefficient `rho_k`, plus
/// `zeta_ij * f_hat`. Lags that snap to zero are carried at one pitch.
pub fn f_gradient(
    f_hat: &KernelExpansion,
    t_k: f64,
    window_events: &[f64],
    rho_k: f64,
    zeta_ij: f64,
    snap_pitch: f64,
) -> KernelExpansion {
    debug_assert_eq!(f_hat.dim, 1);
    let mut g = KernelExpansion::new(f_hat.kernel.clone(), 1, usize::MAX, f_hat.window);
    for &tau in window_events {
        let lag = snap_center(t_k - tau, snap_pitch).max(snap_pitch);
        g.push_center(&[lag], rho_k);
    }
    if zeta_ij != 0.0 {
        for s in 0..f_hat.n_centers() {
            let c = zeta_ij * f_hat.coeffs[s];
            if c != 0.0 {
                g.push_center(f_hat.center(s), c);
            }
        }
    }
    g.coalesce();
    g
}

// ======================= fit =======================

struct Shared<'a> {
    hyper: &'a HyperParams,
    grid: &'a UpdateGrid,
    lattice: Vec<f64>,
    /// Shared lattice Gramian, column-major: column `s` at `[s*n .. (s+1)*n]`.
    gcols: Vec<f64>,
    gdiag: Vec<f64>,
    per_dim_times: Vec<Vec<f64>>,
    /// Epoch indices (0-based) at which each dimension fired, with repeats
    /// for simultaneous events.
    fired_rows: Vec<Vec<u32>>,
    kappa_z: usize,
}

struct RowSnap {
    k: usize,
    t: f64,
    mu: f64,
    cum_risk: f64,
    pairs: Vec<KernelExpansion>,
}

struct RowOut {
    snaps: Vec<RowSnap>,
    /// Worst residual among emission-point projections.
    max_resid: f64,
    unconverged: usize,
    /// Worst residual left by a truncated between-snapshot clamp.
    max_inline_resid: f64,
    truncated_inline: usize,
}

/// Initial square-root coefficients for `SquareTransform`: a flat positive
/// `g` (so `f = g^2` starts near 0.1 rather than at the zero fixed point).
fn square_init(shared: &Shared) -> Pair {
    let n = shared.lattice.len();
    let mut pair = Pair::zero(n);
    let mid = n / 2;
    let col_sum: f64 = shared.gcols[mid * n..(mid + 1) * n].iter().sum();
    let c0 = 0.316 / col_sum.max(1e-12);
    for s in 0..n {
        pair.bump(s, c0, &shared.gcols, &shared.gdiag);
    }
    pair.resync_norm();
    pair
}

fn materialize(pair: &Pair, shared: &Shared) -> KernelExpansion {
    let hyper = shared.hyper;
    let mut e = KernelExpansion::new(hyper.kernel.clone(), 1, hyper.budget, hyper.z);
    for (s, &b) in pair.b.iter().enumerate() {
        let c = pair.shrink * b;
        if c != 0.0 {
            e.push_center(&[shared.lattice[s]], c);
        }
    }
    e
}

fn run_row_dictionary(shared: &Shared, i: usize) -> Result<RowOut> {
    let hyper = shared.hyper;
    let p = hyper.p;
    let n = shared.lattice.len();
    let square = hyper.projection == ProjectionMode::SquareTransform;
    let m = shared.grid.n_epochs();

    let mut pairs: Vec<Pair> = if square {
        (0..p).map(|_| square_init(shared)).collect()
    } else {
        (0..p).map(|_| Pair::zero(n)).collect()
    };
    let mut mu = 10.0 * hyper.mu_min;
    let mut cum_risk = 0.0;
    let mut lo = vec![0usize; p];
    let mut hi = vec![0usize; p];
    let mut fired_cursor = 0usize;
    let fired = &shared.fired_rows[i];
    let mut slots_buf: Vec<Vec<u32>> = vec![Vec::new(); p];
    let mut vals_buf: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut norms_buf = vec![0.0; p];
    let mut scratch_s = vec![0.0; n];
    let mut touched: Vec<u32> = Vec::new();
    let zeta_row = &hyper.zeta[i * p..(i + 1) * p];
    let norm_cap = shared.kappa_z as f64 * hyper.delta.max(1.0 / hyper.mu_min);

    let mut snaps = Vec::new();
    let mut max_resid = 0.0f64;
    let mut unconverged = 0usize;
    let mut max_inline_resid = 0.0f64;
    let mut truncated_inline = 0usize;

    for k in 1..=m {
        let t = shared.grid.times[k - 1];
        let dt = shared.grid.dt(k - 1);
        let mut x = 0u32;
        while fired_cursor < fired.len() && fired[fired_cursor] == (k - 1) as u32 {
            x += 1;
            fired_cursor += 1;
        }

        let mut lam = mu;
        for j in 0..p {
            let times_j = &shared.per_dim_times[j];
            while hi[j] < times_j.len() && times_j[hi[j]] < t {
                hi[j] += 1;
            }
            while lo[j] < hi[j] && times_j[lo[j]] < t - hyper.z {
                lo[j] += 1;
            }
            slots_buf[j].clear();
            vals_buf[j].clear();
            let pair = &pairs[j];
            for idx in lo[j]..hi[j] {
                let slot = snap_slot(t - times_j[idx], hyper.snap_pitch, n);
                slots_buf[j].push(slot as u32);
                let val = pair.shrink * pair.v[slot];
                vals_buf[j].push(val);
                lam += if square { val * val } else { val.max(0.0) };
            }
        }

        let rho_k = rho(dt, x, lam, hyper.mu_min)?;
        // With lambda >= mu_min, rho lies in [dt - x/mu_min, dt]. The grid
        // spacing itself may exceed delta only by its float-safety slack, so
        // bound against the realized dt.
        let rho_bound = dt.max(x as f64 / hyper.mu_min);
        assert!(
            rho_k.abs() <= rho_bound + 1e-9,
            "per-epoch gradient level {rho_k} broke its bound {rho_bound}"
        );
        for j in 0..p {
            norms_buf[j] = pairs[j].norm_sq_actual();
            if zeta_row[j] > 0.0 {
                let cap = norm_cap / zeta_row[j];
                assert!(
                    norms_buf[j].sqrt() <= cap * (1.0 + 1e-9) + 1e-9,
                    "iterate norm {} broke its bound {cap}",
                    norms_buf[j].sqrt()
                );
            }
        }
        cum_risk += instantaneous_risk(lam, dt, x, mu, &norms_buf, hyper.omega[i], zeta_row)?;

        let eta = hyper.eta(k);
        mu = mu_step(mu, rho_k, eta, hyper.omega[i], hyper.mu_min);

        for j in 0..p {
            let pair = &mut pairs[j];
            pair.shrink *= 1.0 - eta * zeta_row[j];
            if pair.shrink < 1e-100 {
                pair.fold();
            }
            if rho_k != 0.0 && !slots_buf[j].is_empty() {
                if square {
                    for (idx, &slot) in slots_buf[j].iter().enumerate() {
                        let d_actual = -eta * rho_k * 2.0 * vals_buf[j][idx];
                        pair.bump(slot as usize, d_actual / pair.shrink, &shared.gcols, &shared.gdiag);
                    }
                } else {
                    let d_actual = -eta * rho_k;
                    for &slot in &slots_buf[j] {
                        pair.bump(slot as usize, d_actual / pair.shrink, &shared.gcols, &shared.gdiag);
                    }
                    if rho_k > 0.0 {
                        let tol = INLINE_CLAMP_TOL / pair.shrink;
                        let (resid, ok) = psor_clamp(
                            pair,
                            &shared.gcols,
                            &shared.gdiag,
                            &mut scratch_s,
                            &mut touched,
                            tol,
                            CLAMP_RELAX,
                            INLINE_CLAMP_SWEEPS,
                        );
                        max_inline_resid = max_inline_resid.max(resid * pair.shrink);
                        if !ok {
                            truncated_inline += 1;
                        }
                    }
                }
            }
        }

        if k % hyper.snapshot_stride == 0 || k == m {
            // Emission point: finish the projection to full accuracy so the
            // snapshot state is feasible, then resync the norm caches.
            for pair in &mut pairs {
                if !square {
                    let tol = EMIT_CLAMP_TOL / pair.shrink;
                    let (resid, ok) = psor_clamp(
                        pair,
                        &shared.gcols,
                        &shared.gdiag,
                        &mut scratch_s,
                        &mut touched,
                        tol,
                        CLAMP_RELAX,
                        EMIT_CLAMP_SWEEPS,
                    );
                    max_resid = max_resid.max(resid * pair.shrink);
                    if !ok {
                        unconverged += 1;
                    }
                }
                pair.resync_norm();
            }
            snaps.push(RowSnap {
                k,
                t,
                mu,
                cum_risk,
                pairs: pairs.iter().map(|pr| materialize(pr, shared)).collect(),
            });
        }
    }
    Ok(RowOut { snaps, max_resid, unconverged, max_inline_resid, truncated_inline })
}

fn run_row_expansion(shared: &Shared, i: usize) -> Result<RowOut> {
    let hyper = shared.hyper;
    let p = hyper.p;
    let m = shared.grid.n_epochs();
    let mut pairs: Vec<KernelExpansion> =
        (0..p).map(|_| KernelExpansion::new(hyper.kernel.clone(), 1, hyper.budget, hyper.z)).collect();
    let mut mu = 10.0 * hyper.mu_min;
    let mut cum_risk = 0.0;
    let mut lo = vec![0usize; p];
    let mut hi = vec![0usize; p];
    let mut fired_cursor = 0usize;
    let fired = &shared.fired_rows[i];
    let mut norms_buf = vec![0.0; p];
    let zeta_row = &hyper.zeta[i * p..(i + 1) * p];

    let mut snaps = Vec::new();
    let mut max_resid = 0.0f64;
    let mut unconverged = 0usize;

    for k in 1..=m {
        let t = shared.grid.times[k - 1];
        let dt = shared.grid.dt(k - 1);
        let mut x = 0u32;
        while fired_cursor < fired.len() && fired[fired_cursor] == (k - 1) as u32 {
            x += 1;
            fired_cursor += 1;
        }

        let mut lam = mu;
        for j in 0..p {
            let times_j = &shared.per_dim_times[j];
            while hi[j] < times_j.len() && times_j[hi[j]] < t {
                hi[j] += 1;
            }
            while lo[j] < hi[j] && times_j[lo[j]] < t - hyper.z {
                lo[j] += 1;
            }
            let mut contrib = 0.0;
            for idx in lo[j]..hi[j] {
                contrib += pairs[j].eval1(t - times_j[idx]);
            }
            lam += contrib.max(0.0);
            norms_buf[j] = pairs[j].rkhs_norm_sq();
        }

        let rho_k = rho(dt, x, lam, hyper.mu_min)?;
        cum_risk += instantaneous_risk(lam, dt, x, mu, &norms_buf, hyper.omega[i], zeta_row)?;

        let eta = hyper.eta(k);
        mu = mu_step(mu, rho_k, eta, hyper.omega[i], hyper.mu_min);

        for j in 0..p {
            let shrink = 1.0 - eta * zeta_row[j];
            for c in &mut pairs[j].coeffs {
                *c *= shrink;
            }
            let times_j = &shared.per_dim_times[j];
            let mut changed = false;
            if rho_k != 0.0 {
                for idx in lo[j]..hi[j] {
                    let lag = snap_center(t - times_j[idx], hyper.snap_pitch).max(hyper.snap_pitch);
                    pairs[j].push_center(&[lag], -eta * rho_k);
                    changed = true;
                }
            }
            if changed {
                pairs[j].coalesce();
                pairs[j].truncate_budget();
                let proj = project_poly_sdp(&pairs[j])?;
                max_resid = max_resid.max(proj.kkt_residual);
                if !proj.converged {
                    unconverged += 1;
                }
                pairs[j] = proj.f;
            }
        }

        if k % hyper.snapshot_stride == 0 || k == m {
            snaps.push(RowSnap { k, t, mu, cum_risk, pairs: pairs.clone() });
        }
    }
    Ok(RowOut { snaps, max_resid, unconverged, max_inline_resid: 0.0, truncated_inline: 0 })
}

/// One online pass over the stream. Returns strided snapshots (the last one
/// is the final state) plus wall-clock and projection diagnostics. Rows are
/// independent and run in parallel.
pub fn fit(stream: &EventStream, hyper: &HyperParams) -> Result<FitResult> {
    hyper.validate()?;
    if stream.p != hyper.p {
        return Err(Error::InvalidInput(format!(
            "stream has {} dimensions, hyper wants {}",
            stream.p, hyper.p
        )));
    }
    let grid = build_grid(stream, hyper.delta, stream.horizon)?;
    let lattice = hyper.lattice();
    let (gcols, gdiag) = gram_columns(&hyper.kernel, &lattice, 1);
    let mut fired_rows: Vec<Vec<u32>> = vec![Vec::new(); hyper.p];
    for &(epoch, dim) in &grid.fired {
        fired_rows[dim as usize].push(epoch);
    }
    let shared = Shared {
        hyper,
        grid: &grid,
        lattice,
        gcols,
        gdiag,
        per_dim_times: stream.per_dim_times(),
        fired_rows,
        kappa_z: stream.max_window_count(hyper.z),
    };

    let start = Instant::now();
    let rows: Result<Vec<RowOut>> = (0..hyper.p)
        .into_par_iter()
        .map(|i| match hyper.projection {
            ProjectionMode::PolySdp => run_row_expansion(&shared, i),
            _ => run_row_dictionary(&shared, i),
        })
        .collect();
    let rows = rows?;
    let wall = start.elapsed().as_secs_f64();

    let n_snaps = rows[0].snaps.len();
    let mut snapshots = Vec::with_capacity(n_snaps);
    for si in 0..n_snaps {
        let mut mu_hat = Vec::with_capacity(hyper.p);
        let mut f_hat = Vec::with_capacity(hyper.p * hyper.p);
        let mut cum_risk = Vec::with_capacity(hyper.p);
        for row in &rows {
            let snap = &row.snaps[si];
            mu_hat.push(snap.mu);
            cum_risk.push(snap.cum_risk);
            f_hat.extend(snap.pairs.iter().cloned());
        }
        snapshots.push(EstimatorState {
            mu_hat,
            f_hat,
            k: rows[0].snaps[si].k,
            t: rows[0].snaps[si].t,
            hyper: hyper.clone(),
            cum_risk,
        });
    }
    let m = grid.n_epochs();
    Ok(FitResult {
        snapshots,
        epochs: m,
        kappa_z: shared.kappa_z,
        wall_seconds: wall,
        wall_per_1e4_epochs: wall / m.max(1) as f64 * 1e4,
        max_projection_residual: rows.iter().fold(0.0, |a, r| a.max(r.max_resid)),
        unconverged_projections: rows.iter().map(|r| r.unconverged).sum(),
        max_inline_residual: rows.iter().fold(0.0, |a, r| a.max(r.max_inline_resid)),
        truncated_inline_clamps: rows.iter().map(|r| r.truncated_inline).sum(),
    })
}

// ======================= regret =======================

/// Per-dimension regret against a fixed comparator model, sampled at the
/// snapshot epochs, with the sublinear diagnostic envelope
/// `c1 * (1 + log k)`.
#[derive(Debug, Clone, Serialize)]
pub struct RegretTrace {
    pub epochs: Vec<usize>,
    pub times: Vec<f64>,
    /// `regret[checkpoint][dim]`.
    pub regret: Vec<Vec<f64>>,
    pub c1: f64,
    pub c1_curve: Vec<f64>,
}

/// RKHS norm of a comparator trigger: exact for expansions over the same
/// kernel, otherwise the ridge interpolant of its lattice values.
fn comparator_norm_sq(trigger: &TriggerFn, kernel: &Kernel, lattice: &[f64]) -> f64 {
    match trigger {
        TriggerFn::Expansion(e) if &e.kernel == kernel => e.rkhs_norm_sq(),
        other => {
            let n = lattice.len();
            let y = nalgebra::DVector::from_fn(n, |g, _| other.eval(lattice[g]));
            if y.amax() == 0.0 {
                return 0.0;
            }
            let mut gram = nalgebra::DMatrix::from_fn(n, n, |r, c| kernel.eval(&[lattice[r]], &[lattice[c]]));
            for d in 0..n {
                gram[(d, d)] += 1e-8;
            }
            match gram.cholesky() {
                Some(ch) => {
                    let c = ch.solve(&y);
                    (c.dot(&y) - 1e-8 * c.norm_squared()).max(0.0)
                }
                None => 0.0,
            }
        }
    }
}

/// Cumulative realized risk of the iterates minus the cumulative loss of the
/// comparator `reference`, at each snapshot epoch. The comparator intensity
/// is truncated at the same `z` and evaluated on strictly-prior events, like
/// the estimator's.
pub fn regret_trace(
    snapshots: &[EstimatorState],
    reference: &HawkesModel,
    grid: &UpdateGrid,
    stream: &EventStream,
) -> Result<RegretTrace> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::InvalidInput("need at least one snapshot".into()))?;
    let hyper = &first.hyper;
    let p = hyper.p;
    if reference.p != p {
        return Err(Error::InvalidInput(format!(
            "reference has {} dimensions, snapshots have {p}",
            reference.p
        )));
    }
    let lattice = hyper.lattice();
    let mut ref_norms = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            ref_norms[i * p + j] = comparator_norm_sq(reference.trigger(i, j), &hyper.kernel, &lattice);
        }
    }

    let mut epochs = Vec::with_capacity(snapshots.len());
    let mut times = Vec::with_capacity(snapshots.len());
    let mut regret = Vec::with_capacity(snapshots.len());
    let mut cum_ref = vec![0.0; p];
    let mut si = 0usize;
    'outer: for k in 1..=grid.n_epochs() {
        let t = grid.times[k - 1];
        let dt = grid.dt(k - 1);
        let x = grid.indicators(k - 1, p);
        for i in 0..p {
            let lam = intensity_left(reference, stream, t, i, hyper.z)?;
            cum_ref[i] += instantaneous_risk(
                lam,
                dt,
                x[i],
                reference.mu[i],
                &ref_norms[i * p..(i + 1) * p],
                hyper.omega[i],
                &hyper.zeta[i * p..(i + 1) * p],
            )?;
        }
        while snapshots[si].k == k {
            let snap = &snapshots[si];
            epochs.push(k);
            times.push(t);
            regret.push((0..p).map(|i| snap.cum_risk[i] - cum_ref[i]).collect());
            si += 1;
            if si == snapshots.len() {
                break 'outer;
            }
        }
    }
    if si != snapshots.len() {
        return Err(Error::InvalidInput(
            "snapshot epochs do not match the update grid".into(),
        ));
    }

    let kappa_z = stream.max_window_count(hyper.z);
    let zeta_min = hyper
        .zeta
        .iter()
        .chain(hyper.omega.iter())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let rho_cap = (hyper.delta - 1.0 / hyper.mu_min).abs();
    let c1 = if zeta_min > 0.0 {
        2.0 * (1.0 + p as f64 * (kappa_z * kappa_z) as f64) / zeta_min * rho_cap * rho_cap
    } else {
        f64::INFINITY
    };
    let c1_curve = epochs.iter().map(|&k| c1 * (1.0 + (k as f64).ln())).collect();
    Ok(RegretTrace { epochs, times, regret, c1, c1_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{simulate, GroundTruthFn};
    use crate::projection::project_grid_clip;
    use crate::quad::adaptive_simpson;
    use approx::assert_relative_eq;

    fn xorshift(state: &mut u64) -> f64 {
        let mut x = *state;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        *state = x;
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    fn poisson_model(rate: f64) -> HawkesModel {
        HawkesModel::new(vec![rate], vec![TriggerFn::Ground(GroundTruthFn::Zero)], 3.0).unwrap()
    }

    #[test]
    fn rho_is_dt_when_no_events() {
        assert_eq!(rho(0.05, 0, 0.7, 0.01).unwrap(), 0.05);
    }

    #[test]
    fn rho_single_event_example() {
        assert_relative_eq!(rho(0.05, 1, 0.5, 0.01).unwrap(), -1.95, max_relative = 1e-12);
    }

    #[test]
    fn rho_boundary_value_at_intensity_floor() {
        let mu_min = 0.01;
        let r = rho(1.0, 1, mu_min, mu_min).unwrap();
        assert_relative_eq!(r, 1.0 - 1.0 / mu_min, max_relative = 1e-12);
        assert_relative_eq!(r.abs(), (1.0 - 1.0 / mu_min).abs(), max_relative = 1e-12);
    }

    #[test]
    fn rho_rejects_intensity_below_floor() {
        assert!(rho(0.05, 1, 0.005, 0.01).is_err());
    }

    #[test]
    fn mu_step_example() {
        assert_relative_eq!(mu_step(0.05, 0.05, 0.1, 0.0, 0.01), 0.045, max_relative = 1e-12);
    }

    #[test]
    fn mu_step_clamps_at_floor() {
        assert_eq!(mu_step(0.02, 5.0, 0.1, 0.0, 0.01), 0.01);
    }

    #[test]
    fn mu_step_zero_gradient_is_identity() {
        assert_eq!(mu_step(0.3, 0.0, 0.1, 0.0, 0.01), 0.3);
    }

    #[test]
    fn f_gradient_empty_window_is_pure_shrinkage() {
        let mut f = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        f.push_center(&[0.5], 0.7);
        f.push_center(&[1.0], -0.2);
        let g = f_gradient(&f, 10.0, &[], 0.05, 2.0, 0.02);
        assert_eq!(g.n_centers(), 2);
        assert_relative_eq!(g.coeffs[0], 1.4, max_relative = 1e-12);
        assert_relative_eq!(g.coeffs[1], -0.4, max_relative = 1e-12);
    }

    #[test]
    fn f_gradient_single_event_is_one_center() {
        let f = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        let g = f_gradient(&f, 1.0, &[0.6], 0.05, 0.0, 0.02);
        assert_eq!(g.n_centers(), 1);
        assert_relative_eq!(g.center(0)[0], 0.4, max_relative = 1e-12);
        assert_relative_eq!(g.coeffs[0], 0.05, max_relative = 1e-12);
    }

    #[test]
    fn f_gradient_norm_matches_gramian() {
        // Two window events: ||rho (K(a,.) + K(b,.))||^2 = rho^2 (2 + 2 K(a,b)).
        let f = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        let kern = Kernel::Gaussian { bandwidth: 0.2 };
        let rho_k = -1.95;
        let g = f_gradient(&f, 2.0, &[1.6, 1.3], rho_k, 0.0, 0.02);
        let cross = kern.eval(&[0.4], &[0.7]);
        let expect = rho_k * rho_k * (2.0 + 2.0 * cross);
        assert_relative_eq!(g.rkhs_norm_sq(), expect, max_relative = 1e-10);
    }

    #[test]
    fn f_gradient_snaps_lags_to_lattice() {
        let f = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        let g = f_gradient(&f, 1.0, &[0.391, 0.9999], 0.1, 0.0, 0.02);
        assert_relative_eq!(g.center(0)[0], 0.6, max_relative = 1e-12);
        assert_relative_eq!(g.center(1)[0], 0.02, max_relative = 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // d risk / d a_s = rho * sum_window K(s, lag) + zeta (G a)_s, checked
        // against central differences of instantaneous_risk.
        let kern = Kernel::Gaussian { bandwidth: 0.2 };
        let centers = [0.2, 0.8, 1.4, 2.2];
        let window_lags = [0.3, 0.9, 2.0];
        let (dt, x, mu, zeta, omega) = (0.05, 1u32, 0.4, 0.3, 0.0);
        let mut seed = 0x9e3779b97f4a7c15u64;
        for _ in 0..20 {
            let a: Vec<f64> = centers.iter().map(|_| xorshift(&mut seed) * 0.4 + 0.05).collect();
            let risk = |a: &[f64]| {
                let mut lam = mu;
                for &lag in &window_lags {
                    let mut v = 0.0;
                    for (s, &c) in centers.iter().enumerate() {
                        v += a[s] * kern.eval(&[c], &[lag]);
                    }
                    lam += v;
                }
                let mut nsq = 0.0;
                for (s, &cs) in centers.iter().enumerate() {
                    for (g, &cg) in centers.iter().enumerate() {
                        nsq += a[s] * a[g] * kern.eval(&[cs], &[cg]);
                    }
                }
                instantaneous_risk(lam, dt, x, mu, &[nsq], omega, &[zeta]).unwrap()
            };
            let base_lam = {
                let mut lam = mu;
                for &lag in &window_lags {
                    for (s, &c) in centers.iter().enumerate() {
                        lam += a[s] * kern.eval(&[c], &[lag]);
                    }
                }
                lam
            };
            let rho_k = rho(dt, x, base_lam, 0.01).unwrap();
            for s in 0..centers.len() {
                let mut grad = 0.0;
                for &lag in &window_lags {
                    grad += rho_k * kern.eval(&[centers[s]], &[lag]);
                }
                for (g, &cg) in centers.iter().enumerate() {
                    grad += zeta * a[g] * kern.eval(&[centers[s]], &[cg]);
                }
                let h = 1e-6;
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[s] += h;
                am[s] -= h;
                let fd = (risk(&ap) - risk(&am)) / (2.0 * h);
                assert_relative_eq!(grad, fd, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn square_transform_gradient_matches_finite_differences() {
        // f = g^2: d risk / d g_s = rho * sum_window 2 g(lag) K(s, lag)
        // + zeta (G g)_s.
        let kern = Kernel::Gaussian { bandwidth: 0.2 };
        let centers = [0.2, 0.8, 1.4];
        let window_lags = [0.3, 0.9];
        let (dt, x, mu, zeta, omega) = (0.05, 1u32, 0.4, 0.3, 0.0);
        let mut seed = 0xdeadbeefcafef00du64;
        let eval_g = |a: &[f64], t: f64| -> f64 {
            centers.iter().enumerate().map(|(s, &c)| a[s] * kern.eval(&[c], &[t])).sum()
        };
        for _ in 0..20 {
            let a: Vec<f64> = centers.iter().map(|_| xorshift(&mut seed) * 0.6 + 0.1).collect();
            let risk = |a: &[f64]| {
                let mut lam = mu;
                for &lag in &window_lags {
                    let g = eval_g(a, lag);
                    lam += g * g;
                }
                let mut nsq = 0.0;
                for (s, &cs) in centers.iter().enumerate() {
                    for (g, &cg) in centers.iter().enumerate() {
                        nsq += a[s] * a[g] * kern.eval(&[cs], &[cg]);
                    }
                }
                instantaneous_risk(lam, dt, x, mu, &[nsq], omega, &[zeta]).unwrap()
            };
            let base_lam = {
                let mut lam = mu;
                for &lag in &window_lags {
                    let g = eval_g(&a, lag);
                    lam += g * g;
                }
                lam
            };
            let rho_k = rho(dt, x, base_lam, 0.01).unwrap();
            for s in 0..centers.len() {
                let mut grad = 0.0;
                for &lag in &window_lags {
                    grad += rho_k * 2.0 * eval_g(&a, lag) * kern.eval(&[centers[s]], &[lag]);
                }
                for (g, &cg) in centers.iter().enumerate() {
                    grad += zeta * a[g] * kern.eval(&[centers[s]], &[cg]);
                }
                let h = 1e-6;
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[s] += h;
                am[s] -= h;
                let fd = (risk(&ap) - risk(&am)) / (2.0 * h);
                assert_relative_eq!(grad, fd, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn hyper_validation_rejects_bad_shapes() {
        let mut h = HyperParams::new(2, 0.05, 3.0);
        assert!(h.validate().is_ok());
        h.delta = 1.5;
        assert!(h.validate().is_err());
        h.delta = 0.05;
        h.z = 0.04;
        assert!(h.validate().is_err());
        h.z = 3.0;
        h.budget = 10;
        assert!(h.validate().is_err(), "budget below the lattice size must be rejected");
        h.budget = 256;
        h.projection = ProjectionMode::PolySdp;
        assert!(h.validate().is_err(), "poly-sdp needs a polynomial kernel");
        h.kernel = Kernel::Polynomial { degree: 4, scale: 1.0, offset: 1.0 };
        assert!(h.validate().is_ok());
    }

    #[test]
    fn eta_schedule_values() {
        let h = HyperParams::new(1, 0.05, 3.0);
        assert_relative_eq!(h.eta(1), 1.0 / (0.05 / 20.0 + 100.0), max_relative = 1e-12);
        let t = h.with_table1_schedule();
        assert_relative_eq!(t.eta(2000), 1.0 / 11.0, max_relative = 1e-12);
    }

    #[test]
    fn reference_table_preset_is_square_transform_five_dim() {
        let h = HyperParams::for_reference_table(0.05, 1e-4);
        assert_eq!(h.p, 5);
        assert_eq!(h.projection, ProjectionMode::SquareTransform);
        assert_relative_eq!(h.z, 3.0);
        assert!(h.zeta.iter().all(|&v| v == 1e-4));
        assert_relative_eq!(h.eta(2000), 1.0 / 11.0, max_relative = 1e-12);
        h.validate().unwrap();
    }

    #[test]
    fn lattice_excludes_zero_and_hits_window_end() {
        let h = HyperParams::new(1, 0.05, 3.0);
        let lat = h.lattice();
        assert_eq!(lat.len(), 150);
        assert_relative_eq!(lat[0], 0.02, max_relative = 1e-12);
        assert_relative_eq!(lat[149], 3.0, max_relative = 1e-12);
    }

    #[test]
    fn inline_clamp_matches_standalone_projection() {
        // The per-epoch PSOR clamp and the standalone grid-clip QP must land
        // on the same projected coefficients.
        let h = HyperParams::new(1, 0.05, 3.0);
        let lat = h.lattice();
        let n = lat.len();
        let mut gcols = vec![0.0; n * n];
        for s in 0..n {
            for g in 0..n {
                gcols[s * n + g] = h.kernel.eval(&[lat[s]], &[lat[g]]);
            }
        }
        let gdiag: Vec<f64> = (0..n).map(|s| gcols[s * n + s]).collect();
        let mut seed = 0x1234_5678_9abc_def0u64;
        let mut pair = Pair::zero(n);
        for s in 0..n {
            let c = if s % 7 == 3 { -0.3 * xorshift(&mut seed) } else { 0.08 * xorshift(&mut seed) };
            pair.bump(s, c, &gcols, &gdiag);
        }
        let mut expansion = KernelExpansion::new(h.kernel.clone(), 1, usize::MAX, h.z);
        for s in 0..n {
            expansion.push_center(&[lat[s]], pair.b[s]);
        }
        let mut scratch = vec![0.0; n];
        let mut touched = Vec::new();
        let (resid, ok) =
            psor_clamp(&mut pair, &gcols, &gdiag, &mut scratch, &mut touched, 1e-12, 1.7, 10_000);
        assert!(ok, "inline clamp failed to converge, residual {resid}");
        let qp = project_grid_clip(&expansion, &lat).unwrap();
        assert!(qp.converged);
        let mut by_center = vec![0.0; n];
        for s in 0..qp.f.n_centers() {
            let idx = ((qp.f.center(s)[0] / h.snap_pitch).round() as usize) - 1;
            by_center[idx] += qp.f.coeffs[s];
        }
        for s in 0..n {
            assert!(
                (pair.b[s] - by_center[s]).abs() <= 1e-6,
                "slot {s}: inline {} vs qp {}",
                pair.b[s],
                by_center[s]
            );
        }
    }

    #[test]
    fn fit_recovers_poisson_rate() {
        let model = poisson_model(0.5);
        let stream = simulate(&model, 2000.0, 7).unwrap();
        let hyper = HyperParams::new(1, 0.05, 3.0);
        let res = fit(&stream, &hyper).unwrap();
        let last = res.final_state();
        assert!(
            (last.mu_hat[0] - 0.5).abs() < 0.05,
            "recovered baseline {} too far from 0.5",
            last.mu_hat[0]
        );
        let l1 = adaptive_simpson(&|t| last.eval_trigger(0, 0, t).abs(), 0.0, 3.0, 1e-6);
        assert!(l1 < 0.3, "spurious triggering mass {l1}");
    }

    #[test]
    fn fit_keeps_baseline_at_or_above_floor() {
        let model = poisson_model(0.05);
        let stream = simulate(&model, 500.0, 11).unwrap();
        let mut hyper = HyperParams::new(1, 0.05, 3.0);
        hyper.mu_min = 0.02;
        let res = fit(&stream, &hyper).unwrap();
        for snap in &res.snapshots {
            assert!(snap.mu_hat[0] >= hyper.mu_min);
        }
    }

    #[test]
    fn fit_estimates_stay_nonnegative_on_lattice() {
        let mut f = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        f.push_center(&[0.5], 0.8);
        let model =
            HawkesModel::new(vec![0.3, 0.2], vec![
                TriggerFn::Expansion(f),
                TriggerFn::Ground(GroundTruthFn::Zero),
                TriggerFn::Ground(GroundTruthFn::ExpDecay { alpha: 0.4, beta: 2.0 }),
                TriggerFn::Ground(GroundTruthFn::Zero),
            ], 3.0)
            .unwrap();
        let stream = simulate(&model, 400.0, 3).unwrap();
        let hyper = HyperParams::new(2, 0.05, 3.0);
        let res = fit(&stream, &hyper).unwrap();
        assert!(res.max_projection_residual <= 1e-8);
        let last = res.final_state();
        let lat = hyper.lattice();
        for i in 0..2 {
            for j in 0..2 {
                for &t in &lat {
                    assert!(
                        last.eval_trigger(i, j, t) >= -1e-8,
                        "estimate ({i},{j}) negative at {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let model = poisson_model(0.4);
        let stream = simulate(&model, 300.0, 5).unwrap();
        let hyper = HyperParams::new(1, 0.05, 3.0);
        let a = fit(&stream, &hyper).unwrap();
        let b = fit(&stream, &hyper).unwrap();
        assert_eq!(a.epochs, b.epochs);
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(sa.mu_hat, sb.mu_hat);
            assert_eq!(sa.cum_risk, sb.cum_risk);
            for (fa, fb) in sa.f_hat.iter().zip(&sb.f_hat) {
                assert_eq!(fa.coeffs, fb.coeffs);
            }
        }
    }

    #[test]
    fn square_transform_fit_runs_and_stays_nonnegative() {
        let model = HawkesModel::new(
            vec![0.3],
            vec![TriggerFn::Ground(GroundTruthFn::ExpDecay { alpha: 0.5, beta: 2.5 })],
            3.0,
        )
        .unwrap();
        let stream = simulate(&model, 600.0, 13).unwrap();
        let mut hyper = HyperParams::new(1, 0.05, 3.0);
        hyper.projection = ProjectionMode::SquareTransform;
        let res = fit(&stream, &hyper).unwrap();
        let last = res.final_state();
        let mut t = 0.0;
        while t <= 3.0 {
            assert!(last.eval_trigger(0, 0, t) >= 0.0);
            t += 0.01;
        }
    }

    #[test]
    fn poly_sdp_fit_keeps_estimates_globally_nonnegative() {
        let model = HawkesModel::new(
            vec![0.3],
            vec![TriggerFn::Ground(GroundTruthFn::ExpDecay { alpha: 0.5, beta: 2.5 })],
            3.0,
        )
        .unwrap();
        let stream = simulate(&model, 60.0, 17).unwrap();
        let mut hyper = HyperParams::new(1, 0.25, 3.0);
        hyper.projection = ProjectionMode::PolySdp;
        hyper.kernel = Kernel::Polynomial { degree: 2, scale: 0.1, offset: 1.0 };
        hyper.budget = 16;
        let res = fit(&stream, &hyper).unwrap();
        let last = res.final_state();
        let mut t = 0.0;
        while t <= 3.0 {
            assert!(
                last.eval_trigger(0, 0, t) >= -1e-6,
                "poly estimate negative at {t}: {}",
                last.eval_trigger(0, 0, t)
            );
            t += 0.03;
        }
    }

    #[test]
    fn regret_vanishes_when_iterates_equal_comparator() {
        let mut f = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        f.push_center(&[0.5], 0.3);
        let model = HawkesModel::new(vec![0.3], vec![TriggerFn::Expansion(f.clone())], 3.0).unwrap();
        let stream = simulate(&model, 200.0, 19).unwrap();
        let hyper = HyperParams::new(1, 0.05, 3.0);
        let grid = build_grid(&stream, hyper.delta, stream.horizon).unwrap();
        let m = grid.n_epochs();

        // Accumulate the realized risk of the comparator itself through the
        // expansion-eval route, then hand it to regret_trace as a snapshot.
        let norm_sq = f.rkhs_norm_sq();
        let per_dim = stream.per_dim_times();
        let mut cum = 0.0;
        let mut snapshots = Vec::new();
        for k in 1..=m {
            let t = grid.times[k - 1];
            let dt = grid.dt(k - 1);
            let x = grid.indicators(k - 1, 1)[0];
            let mut lam = 0.3;
            for &tau in &per_dim[0] {
                if tau < t && t - tau <= 3.0 {
                    lam += f.eval1(t - tau);
                }
            }
            cum += instantaneous_risk(lam, dt, x, 0.3, &[norm_sq], hyper.omega[0], &[hyper.zeta[0]])
                .unwrap();
            if k % hyper.snapshot_stride == 0 || k == m {
                snapshots.push(EstimatorState {
                    mu_hat: vec![0.3],
                    f_hat: vec![f.clone()],
                    k,
                    t,
                    hyper: hyper.clone(),
                    cum_risk: vec![cum],
                });
            }
        }
        let trace = regret_trace(&snapshots, &model, &grid, &stream).unwrap();
        for row in &trace.regret {
            assert!(row[0].abs() < 1e-6, "self-regret {} not ~0", row[0]);
        }
        assert!(trace.c1.is_finite());
        assert!(trace.c1_curve.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn regret_of_fit_run_is_below_diagnostic_envelope() {
        let model = HawkesModel::new(
            vec![0.3],
            vec![TriggerFn::Ground(GroundTruthFn::ExpDecay { alpha: 0.5, beta: 2.5 })],
            3.0,
        )
        .unwrap();
        let stream = simulate(&model, 500.0, 23).unwrap();
        let hyper = HyperParams::new(1, 0.05, 3.0);
        let grid = build_grid(&stream, hyper.delta, stream.horizon).unwrap();
        let res = fit(&stream, &hyper).unwrap();
        let trace = regret_trace(&res.snapshots, &model, &grid, &stream).unwrap();
        assert_eq!(trace.epochs.len(), res.snapshots.len());
        for (row, cap) in trace.regret.iter().zip(&trace.c1_curve) {
            assert!(row[0] <= *cap, "regret {} above envelope {cap}", row[0]);
        }
    }
}
