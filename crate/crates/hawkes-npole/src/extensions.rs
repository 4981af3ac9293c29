//! Marked and spatial variants of the online estimator.
//!
//! Marked fits learn triggering functions over (lag, mark) pairs, either as
//! one joint 2-D expansion or as a separable product g(lag) * h(mark).
//! Spatial fits learn a single f(lag, displacement) against a
//! space-discretized loss that sums the interval cost over a finite cell
//! set. Both drive the dense-dictionary engine from the plain fit, so the
//! degenerate cases (identical marks, one unit-area cell) reduce to the
//! unmarked arithmetic exactly.

use crate::dict::{
    gram_columns, psor_clamp, snap_slot, Pair, CLAMP_RELAX, EMIT_CLAMP_SWEEPS, EMIT_CLAMP_TOL,
    INLINE_CLAMP_SWEEPS, INLINE_CLAMP_TOL,
};
use crate::discretize::{build_grid, instantaneous_risk};
use crate::kernels::{snap_center, Kernel, KernelExpansion};
use crate::npole::{mu_step, rho, HyperParams, ProjectionMode};
use crate::process::EventStream;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Hard cap on dictionary slots for the 2-D fits; the Gramian is dense.
const DICT_SLOT_CAP: usize = 4000;

// ======================= mark standardization =======================

/// Affine map `v -> (v - mean) / scale` applied to marks before any kernel
/// sees them, so one bandwidth default is comparable across datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkTransform {
    pub mean: f64,
    pub scale: f64,
}

impl MarkTransform {
    pub fn identity() -> Self {
        MarkTransform { mean: 0.0, scale: 1.0 }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }
}

/// Running mean/variance (Welford) over the first `warmup` marks, then
/// frozen. Degenerate spread (all marks equal) falls back to the identity
/// scale so the transform stays invertible.
pub fn standardize_marks(marks: &[f64], warmup: usize) -> MarkTransform {
    let n = marks.len().min(warmup.max(1));
    if n == 0 {
        return MarkTransform::identity();
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in marks[..n].iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    MarkTransform { mean, scale }
}

/// Number of events whose marks feed the frozen standardization.
pub const MARK_WARMUP: usize = 1000;

// ======================= marked trigger type =======================

/// One estimated marked triggering function. `Joint` is a single expansion
/// over (lag, mark) centers with a product kernel; `Separable` factors as
/// f(t, v) = g(t) * h(v). Marks are in standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MarkedTrigger {
    Joint(KernelExpansion),
    Separable { g: KernelExpansion, h: KernelExpansion },
}

impl MarkedTrigger {
    /// f(t, v) with `v` already standardized. Zero outside the lag window.
    pub fn eval(&self, t: f64, v: f64) -> f64 {
        match self {
            MarkedTrigger::Joint(f) => {
                if t < 0.0 || t > f.window {
                    0.0
                } else {
                    f.eval(&[t, v])
                }
            }
            MarkedTrigger::Separable { g, h } => {
                if t < 0.0 || t > g.window {
                    0.0
                } else {
                    g.eval1(t) * h.eval(std::slice::from_ref(&v))
                }
            }
        }
    }
}

/// Long-format CSV of f(t, v) on a lattice: one `t,v,value` row per pair.
/// Marks are in standardized coordinates.
pub fn write_marked_csv<W: Write>(
    trig: &MarkedTrigger,
    t_grid: &[f64],
    v_grid: &[f64],
    mut w: W,
) -> Result<()> {
    writeln!(w, "t,v,value")?;
    for &t in t_grid {
        for &v in v_grid {
            writeln!(w, "{t},{v},{}", trig.eval(t, v))?;
        }
    }
    Ok(())
}

// ======================= marked gradient ops =======================

/// Joint-mode gradient of the epoch loss: one (lag, mark) center per window
/// event with coefficient `rho_k`, plus `zeta_ij * f_hat`. Lags snap to the
/// time pitch like the unmarked delta; marks are taken as given.
pub fn mmhp_gradient_joint(
    f_hat: &KernelExpansion,
    t_k: f64,
    window_times: &[f64],
    window_marks: Option<&[f64]>,
    rho_k: f64,
    zeta_ij: f64,
    snap_pitch: f64,
) -> Result<KernelExpansion> {
    debug_assert_eq!(f_hat.dim, 2);
    let marks = match window_marks {
        Some(m) if m.len() == window_times.len() => m,
        Some(m) => {
            return Err(Error::InvalidInput(format!(
                "{} window events carry {} marks",
                window_times.len(),
                m.len()
            )))
        }
        None => {
            return Err(Error::InvalidInput(
                "joint marked gradient needs marks on the window events".into(),
            ))
        }
    };
    let mut g = KernelExpansion::new(f_hat.kernel.clone(), 2, f_hat.budget, f_hat.window);
    if rho_k != 0.0 {
        for (&tau, &v) in window_times.iter().zip(marks) {
            let lag = snap_center(t_k - tau, snap_pitch).max(snap_pitch);
            g.push_center(&[lag, v], rho_k);
        }
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
    Ok(g)
}

/// Separable-mode gradients for f = g(t) h(v): the g-delta has one snapped
/// lag center per window event weighted by h(mark), the h-delta has one
/// center AT each mark weighted by g(lag), and both carry their own zeta
/// shrinkage term.
pub fn mmhp_gradient_separable(
    g_hat: &KernelExpansion,
    h_hat: &KernelExpansion,
    t_k: f64,
    window_times: &[f64],
    window_marks: &[f64],
    rho_k: f64,
    zeta_ij: f64,
    snap_pitch: f64,
) -> (KernelExpansion, KernelExpansion) {
    debug_assert_eq!(g_hat.dim, 1);
    debug_assert_eq!(h_hat.dim, 1);
    debug_assert_eq!(window_times.len(), window_marks.len());
    let mut dg = KernelExpansion::new(g_hat.kernel.clone(), 1, g_hat.budget, g_hat.window);
    let mut dh = KernelExpansion::new(h_hat.kernel.clone(), 1, h_hat.budget, h_hat.window);
    if rho_k != 0.0 {
        for (&tau, &v) in window_times.iter().zip(window_marks) {
            let lag = snap_center(t_k - tau, snap_pitch).max(snap_pitch);
            dg.push_center(&[lag], rho_k * h_hat.eval1(v));
            dh.push_center(&[v], rho_k * g_hat.eval1(t_k - tau));
        }
    }
    if zeta_ij != 0.0 {
        for s in 0..g_hat.n_centers() {
            let c = zeta_ij * g_hat.coeffs[s];
            if c != 0.0 {
                dg.push_center(g_hat.center(s), c);
            }
        }
        for s in 0..h_hat.n_centers() {
            let c = zeta_ij * h_hat.coeffs[s];
            if c != 0.0 {
                dh.push_center(h_hat.center(s), c);
            }
        }
    }
    dg.coalesce();
    dh.coalesce();
    (dg, dh)
}

// ======================= marked fit =======================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarkedMode {
    Joint,
    Separable,
}

/// In separable mode the two factors update sequentially within an epoch
/// (the h step sees the already-updated g, or vice versa).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOrder {
    GThenH,
    HThenG,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkedOptions {
    pub mode: MarkedMode,
    /// Mark lattice pitch in standardized units.
    pub mark_pitch: f64,
    /// Mark kernel for separable mode (joint mode reads the product kernel
    /// from the hyper parameters).
    pub mark_kernel: Kernel,
    pub update_order: UpdateOrder,
}

impl Default for MarkedOptions {
    fn default() -> Self {
        MarkedOptions {
            mode: MarkedMode::Joint,
            mark_pitch: 0.25,
            mark_kernel: Kernel::Gaussian { bandwidth: 1.0 },
            update_order: UpdateOrder::GThenH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarkedSnapshot {
    pub k: usize,
    pub t: f64,
    pub mu_hat: Vec<f64>,
    /// Row-major p*p triggers in standardized mark coordinates.
    pub f_hat: Vec<MarkedTrigger>,
    pub cum_risk: f64,
}

#[derive(Debug, Clone)]
pub struct MarkedFitResult {
    pub snapshots: Vec<MarkedSnapshot>,
    pub transform: MarkTransform,
    pub epochs: usize,
    pub kappa_z: usize,
    pub wall_seconds: f64,
    pub max_projection_residual: f64,
    pub unconverged_projections: usize,
    pub max_inline_residual: f64,
    pub truncated_inline_clamps: usize,
}

impl MarkedFitResult {
    pub fn final_state(&self) -> &MarkedSnapshot {
        self.snapshots.last().expect("fit always emits a final snapshot")
    }
}

/// Distinct snapped values of `vals` on the pitch grid, sorted. Returns the
/// lattice and the slot index of each input value.
fn snapped_value_lattice(vals: &[f64], pitch: f64) -> (Vec<f64>, Vec<u32>) {
    let mut quant: Vec<i64> = vals.iter().map(|&v| (v / pitch).round_ties_even() as i64).collect();
    let mut distinct = quant.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let slots = quant
        .drain(..)
        .map(|q| distinct.binary_search(&q).unwrap() as u32)
        .collect();
    let lattice = distinct.iter().map(|&q| q as f64 * pitch).collect();
    (lattice, slots)
}

struct MarkedShared<'a> {
    hyper: &'a HyperParams,
    opts: &'a MarkedOptions,
    grid: &'a crate::discretize::UpdateGrid,
    time_lattice: Vec<f64>,
    mark_lattice: Vec<f64>,
    /// Joint-mode dictionary Gramian over (lag, mark) pairs, with slot
    /// layout `ts * n_mark + ms`.
    gcols2: Vec<f64>,
    gdiag2: Vec<f64>,
    /// Separable-mode per-factor Gramians.
    gcols_t: Vec<f64>,
    gdiag_t: Vec<f64>,
    gcols_m: Vec<f64>,
    gdiag_m: Vec<f64>,
    /// Per source dimension: event times and their mark slots.
    per_dim_times: Vec<Vec<f64>>,
    per_dim_mslots: Vec<Vec<u32>>,
    fired_rows: Vec<Vec<u32>>,
    kappa_z: usize,
}

struct MarkedRowOut {
    snaps: Vec<(usize, f64, f64, f64, Vec<MarkedTrigger>)>,
    max_resid: f64,
    unconverged: usize,
    max_inline_resid: f64,
    truncated_inline: usize,
}

fn materialize_joint(pair: &Pair, sh: &MarkedShared) -> MarkedTrigger {
    let n_m = sh.mark_lattice.len();
    let n = pair.b.len();
    let mut e = KernelExpansion::new(sh.hyper.kernel.clone(), 2, n.max(1), sh.hyper.z);
    for (s, &b) in pair.b.iter().enumerate() {
        let c = pair.shrink * b;
        if c != 0.0 {
            e.push_center(&[sh.time_lattice[s / n_m], sh.mark_lattice[s % n_m]], c);
        }
    }
    MarkedTrigger::Joint(e)
}

fn materialize_factor(pair: &Pair, kernel: &Kernel, lattice: &[f64], window: f64) -> KernelExpansion {
    let mut e = KernelExpansion::new(kernel.clone(), 1, pair.b.len().max(1), window);
    for (s, &b) in pair.b.iter().enumerate() {
        let c = pair.shrink * b;
        if c != 0.0 {
            e.push_center(&[lattice[s]], c);
        }
    }
    e
}

/// Flat positive start for a factor lattice: level^2 would be the induced
/// product start, so both factors begin at `level`. A zero start is a fixed
/// point of the product update and would never move.
fn flat_init(n: usize, level: f64, gcols: &[f64], gdiag: &[f64]) -> Pair {
    let mut pair = Pair::zero(n);
    let mid = n / 2;
    let col_sum: f64 = gcols[mid * n..(mid + 1) * n].iter().sum();
    let c0 = level / col_sum.max(1e-12);
    for s in 0..n {
        pair.bump(s, c0, gcols, gdiag);
    }
    pair.resync_norm();
    pair
}

fn run_row_marked_joint(sh: &MarkedShared, i: usize) -> Result<MarkedRowOut> {
    let hyper = sh.hyper;
    let p = hyper.p;
    let n_m = sh.mark_lattice.len();
    let n_t = sh.time_lattice.len();
    let n = n_t * n_m;
    let m = sh.grid.n_epochs();

    let mut pairs: Vec<Pair> = (0..p).map(|_| Pair::zero(n)).collect();
    let mut mu = 10.0 * hyper.mu_min;
    let mut cum_risk = 0.0;
    let mut lo = vec![0usize; p];
    let mut hi = vec![0usize; p];
    let mut fired_cursor = 0usize;
    let fired = &sh.fired_rows[i];
    let mut slots_buf: Vec<Vec<u32>> = vec![Vec::new(); p];
    let mut norms_buf = vec![0.0; p];
    let mut scratch_s = vec![0.0; n];
    let mut touched: Vec<u32> = Vec::new();
    let zeta_row = &hyper.zeta[i * p..(i + 1) * p];
    let norm_cap = sh.kappa_z as f64 * hyper.delta.max(1.0 / hyper.mu_min);

    let mut snaps = Vec::new();
    let mut max_resid = 0.0f64;
    let mut unconverged = 0usize;
    let mut max_inline_resid = 0.0f64;
    let mut truncated_inline = 0usize;

    for k in 1..=m {
        let t = sh.grid.times[k - 1];
        let dt = sh.grid.dt(k - 1);
        let mut x = 0u32;
        while fired_cursor < fired.len() && fired[fired_cursor] == (k - 1) as u32 {
            x += 1;
            fired_cursor += 1;
        }

        let mut lam = mu;
        for j in 0..p {
            let times_j = &sh.per_dim_times[j];
            let mslots_j = &sh.per_dim_mslots[j];
            while hi[j] < times_j.len() && times_j[hi[j]] < t {
                hi[j] += 1;
            }
            while lo[j] < hi[j] && times_j[lo[j]] < t - hyper.z {
                lo[j] += 1;
            }
            slots_buf[j].clear();
            let pair = &pairs[j];
            for idx in lo[j]..hi[j] {
                let ts = snap_slot(t - times_j[idx], hyper.snap_pitch, n_t);
                let slot = ts * n_m + mslots_j[idx] as usize;
                slots_buf[j].push(slot as u32);
                lam += (pair.shrink * pair.v[slot]).max(0.0);
            }
        }

        let rho_k = rho(dt, x, lam, hyper.mu_min)?;
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
                let d_actual = -eta * rho_k;
                for &slot in &slots_buf[j] {
                    pair.bump(slot as usize, d_actual / pair.shrink, &sh.gcols2, &sh.gdiag2);
                }
                if rho_k > 0.0 {
                    let tol = INLINE_CLAMP_TOL / pair.shrink;
                    let (resid, ok) = psor_clamp(
                        pair,
                        &sh.gcols2,
                        &sh.gdiag2,
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

        if k % hyper.snapshot_stride == 0 || k == m {
            for pair in &mut pairs {
                let tol = EMIT_CLAMP_TOL / pair.shrink;
                let (resid, ok) = psor_clamp(
                    pair,
                    &sh.gcols2,
                    &sh.gdiag2,
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
                pair.resync_norm();
            }
            let trigs = pairs.iter().map(|pr| materialize_joint(pr, sh)).collect();
            snaps.push((k, t, mu, cum_risk, trigs));
        }
    }
    Ok(MarkedRowOut { snaps, max_resid, unconverged, max_inline_resid, truncated_inline })
}

fn run_row_marked_separable(sh: &MarkedShared, i: usize) -> Result<MarkedRowOut> {
    let hyper = sh.hyper;
    let p = hyper.p;
    let n_t = sh.time_lattice.len();
    let n_m = sh.mark_lattice.len();
    let m = sh.grid.n_epochs();

    let mut gs: Vec<Pair> =
        (0..p).map(|_| flat_init(n_t, 0.316, &sh.gcols_t, &sh.gdiag_t)).collect();
    let mut hs: Vec<Pair> =
        (0..p).map(|_| flat_init(n_m, 0.316, &sh.gcols_m, &sh.gdiag_m)).collect();
    let mut mu = 10.0 * hyper.mu_min;
    let mut cum_risk = 0.0;
    let mut lo = vec![0usize; p];
    let mut hi = vec![0usize; p];
    let mut fired_cursor = 0usize;
    let fired = &sh.fired_rows[i];
    let mut tslots_buf: Vec<Vec<u32>> = vec![Vec::new(); p];
    let mut mslots_buf: Vec<Vec<u32>> = vec![Vec::new(); p];
    let mut norms_buf = vec![0.0; p];
    let mut scratch_t = vec![0.0; n_t];
    let mut scratch_m = vec![0.0; n_m];
    let mut touched: Vec<u32> = Vec::new();
    let zeta_row = &hyper.zeta[i * p..(i + 1) * p];

    let mut snaps = Vec::new();
    let mut max_resid = 0.0f64;
    let mut unconverged = 0usize;
    let mut max_inline_resid = 0.0f64;
    let mut truncated_inline = 0usize;

    for k in 1..=m {
        let t = sh.grid.times[k - 1];
        let dt = sh.grid.dt(k - 1);
        let mut x = 0u32;
        while fired_cursor < fired.len() && fired[fired_cursor] == (k - 1) as u32 {
            x += 1;
            fired_cursor += 1;
        }

        let mut lam = mu;
        for j in 0..p {
            let times_j = &sh.per_dim_times[j];
            let mslots_j = &sh.per_dim_mslots[j];
            while hi[j] < times_j.len() && times_j[hi[j]] < t {
                hi[j] += 1;
            }
            while lo[j] < hi[j] && times_j[lo[j]] < t - hyper.z {
                lo[j] += 1;
            }
            tslots_buf[j].clear();
            mslots_buf[j].clear();
            let (gp, hp) = (&gs[j], &hs[j]);
            for idx in lo[j]..hi[j] {
                let ts = snap_slot(t - times_j[idx], hyper.snap_pitch, n_t);
                let ms = mslots_j[idx] as usize;
                tslots_buf[j].push(ts as u32);
                mslots_buf[j].push(ms as u32);
                let gv = (gp.shrink * gp.v[ts]).max(0.0);
                let hv = (hp.shrink * hp.v[ms]).max(0.0);
                lam += gv * hv;
            }
        }

        let rho_k = rho(dt, x, lam, hyper.mu_min)?;
        let rho_bound = dt.max(x as f64 / hyper.mu_min);
        assert!(
            rho_k.abs() <= rho_bound + 1e-9,
            "per-epoch gradient level {rho_k} broke its bound {rho_bound}"
        );
        // The separable objective is nonconvex; norms_buf carries the sum of
        // the two factor norms so the shrinkage terms stay visible in risk.
        for j in 0..p {
            norms_buf[j] = gs[j].norm_sq_actual() + hs[j].norm_sq_actual();
        }
        cum_risk += instantaneous_risk(lam, dt, x, mu, &norms_buf, hyper.omega[i], zeta_row)?;

        let eta = hyper.eta(k);
        mu = mu_step(mu, rho_k, eta, hyper.omega[i], hyper.mu_min);

        for j in 0..p {
            let shrink_step = 1.0 - eta * zeta_row[j];
            gs[j].shrink *= shrink_step;
            hs[j].shrink *= shrink_step;
            if gs[j].shrink < 1e-100 {
                gs[j].fold();
            }
            if hs[j].shrink < 1e-100 {
                hs[j].fold();
            }
            if rho_k == 0.0 || tslots_buf[j].is_empty() {
                continue;
            }
            let first_g = sh.opts.update_order == UpdateOrder::GThenH;
            for phase in 0..2 {
                let do_g = (phase == 0) == first_g;
                if do_g {
                    // g step: lag centers weighted by the current h(mark).
                    let hp_vals: Vec<f64> = mslots_buf[j]
                        .iter()
                        .map(|&ms| (hs[j].shrink * hs[j].v[ms as usize]).max(0.0))
                        .collect();
                    let gp = &mut gs[j];
                    for (idx, &ts) in tslots_buf[j].iter().enumerate() {
                        let d = -eta * rho_k * hp_vals[idx];
                        if d != 0.0 {
                            gp.bump(ts as usize, d / gp.shrink, &sh.gcols_t, &sh.gdiag_t);
                        }
                    }
                    if rho_k > 0.0 {
                        let tol = INLINE_CLAMP_TOL / gp.shrink;
                        let (resid, ok) = psor_clamp(
                            gp,
                            &sh.gcols_t,
                            &sh.gdiag_t,
                            &mut scratch_t,
                            &mut touched,
                            tol,
                            CLAMP_RELAX,
                            INLINE_CLAMP_SWEEPS,
                        );
                        max_inline_resid = max_inline_resid.max(resid * gp.shrink);
                        if !ok {
                            truncated_inline += 1;
                        }
                    }
                } else {
                    // h step: mark centers weighted by the current g(lag).
                    let gp_vals: Vec<f64> = tslots_buf[j]
                        .iter()
                        .map(|&ts| (gs[j].shrink * gs[j].v[ts as usize]).max(0.0))
                        .collect();
                    let hp = &mut hs[j];
                    for (idx, &ms) in mslots_buf[j].iter().enumerate() {
                        let d = -eta * rho_k * gp_vals[idx];
                        if d != 0.0 {
                            hp.bump(ms as usize, d / hp.shrink, &sh.gcols_m, &sh.gdiag_m);
                        }
                    }
                    if rho_k > 0.0 {
                        let tol = INLINE_CLAMP_TOL / hp.shrink;
                        let (resid, ok) = psor_clamp(
                            hp,
                            &sh.gcols_m,
                            &sh.gdiag_m,
                            &mut scratch_m,
                            &mut touched,
                            tol,
                            CLAMP_RELAX,
                            INLINE_CLAMP_SWEEPS,
                        );
                        max_inline_resid = max_inline_resid.max(resid * hp.shrink);
                        if !ok {
                            truncated_inline += 1;
                        }
                    }
                }
            }
        }

        if k % hyper.snapshot_stride == 0 || k == m {
            for j in 0..p {
                for (pair, gcols, gdiag, scratch) in [
                    (&mut gs[j], &sh.gcols_t, &sh.gdiag_t, &mut scratch_t),
                    (&mut hs[j], &sh.gcols_m, &sh.gdiag_m, &mut scratch_m),
                ] {
                    let tol = EMIT_CLAMP_TOL / pair.shrink;
                    let (resid, ok) = psor_clamp(
                        pair,
                        gcols,
                        gdiag,
                        scratch,
                        &mut touched,
                        tol,
                        CLAMP_RELAX,
                        EMIT_CLAMP_SWEEPS,
                    );
                    max_resid = max_resid.max(resid * pair.shrink);
                    if !ok {
                        unconverged += 1;
                    }
                    pair.resync_norm();
                }
            }
            // The h factor has no lag support; its window field just records
            // the mark span so serialization stays finite.
            let mark_span =
                sh.mark_lattice.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
            let trigs = (0..p)
                .map(|j| MarkedTrigger::Separable {
                    g: materialize_factor(&gs[j], &hyper.kernel, &sh.time_lattice, hyper.z),
                    h: materialize_factor(&hs[j], &sh.opts.mark_kernel, &sh.mark_lattice, mark_span),
                })
                .collect();
            snaps.push((k, t, mu, cum_risk, trigs));
        }
    }
    Ok(MarkedRowOut { snaps, max_resid, unconverged, max_inline_resid, truncated_inline })
}

/// Online marked fit. Joint mode runs the dictionary engine on the product
/// lattice (lag, mark) with grid-clip feasibility; separable mode keeps one
/// lag factor and one mark factor per pair, updated sequentially per epoch
/// with the shared rho. Marks are standardized by a frozen warm-up
/// transform before anything else sees them.
pub fn fit_marked(
    stream: &EventStream,
    hyper: &HyperParams,
    opts: &MarkedOptions,
) -> Result<MarkedFitResult> {
    hyper.validate()?;
    if stream.p != hyper.p {
        return Err(Error::InvalidInput(format!(
            "stream has {} dimensions, hyper wants {}",
            stream.p, hyper.p
        )));
    }
    let marks = stream
        .marks
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("marked fit needs a mark per event".into()))?;
    if marks.len() != stream.times.len() {
        return Err(Error::InvalidInput(format!(
            "{} events carry {} marks",
            stream.times.len(),
            marks.len()
        )));
    }
    if hyper.projection != ProjectionMode::GridClip {
        return Err(Error::InvalidInput(
            "marked fits support the grid-clip projection only".into(),
        ));
    }
    if !(opts.mark_pitch > 0.0) {
        return Err(Error::InvalidInput("mark pitch must be positive".into()));
    }
    if opts.mode == MarkedMode::Joint && !matches!(hyper.kernel, Kernel::Product2D { .. }) {
        return Err(Error::InvalidInput(
            "joint marked mode needs a product (time, mark) kernel".into(),
        ));
    }

    let transform = standardize_marks(marks, MARK_WARMUP);
    let std_marks: Vec<f64> = marks.iter().map(|&v| transform.apply(v)).collect();
    let (mark_lattice, mark_slots) = snapped_value_lattice(&std_marks, opts.mark_pitch);

    let grid = build_grid(stream, hyper.delta, stream.horizon)?;
    let time_lattice = hyper.lattice();
    let n_t = time_lattice.len();
    let n_m = mark_lattice.len();

    let mut per_dim_times: Vec<Vec<f64>> = vec![Vec::new(); stream.p];
    let mut per_dim_mslots: Vec<Vec<u32>> = vec![Vec::new(); stream.p];
    for (idx, (&t, &d)) in stream.times.iter().zip(&stream.dims).enumerate() {
        per_dim_times[d as usize].push(t);
        per_dim_mslots[d as usize].push(mark_slots[idx]);
    }
    let mut fired_rows: Vec<Vec<u32>> = vec![Vec::new(); hyper.p];
    for &(epoch, dim) in &grid.fired {
        fired_rows[dim as usize].push(epoch);
    }

    let (gcols2, gdiag2, gcols_t, gdiag_t, gcols_m, gdiag_m) = match opts.mode {
        MarkedMode::Joint => {
            let n = n_t * n_m;
            if n > DICT_SLOT_CAP {
                return Err(Error::InvalidInput(format!(
                    "joint mark dictionary needs {n} slots ({n_t} lags x {n_m} marks), cap is \
                     {DICT_SLOT_CAP}; coarsen snap_pitch or mark_pitch"
                )));
            }
            let mut centers2 = Vec::with_capacity(2 * n);
            for &tl in &time_lattice {
                for &ml in &mark_lattice {
                    centers2.push(tl);
                    centers2.push(ml);
                }
            }
            let (gcols2, gdiag2) = gram_columns(&hyper.kernel, &centers2, 2);
            (gcols2, gdiag2, Vec::new(), Vec::new(), Vec::new(), Vec::new())
        }
        MarkedMode::Separable => {
            if n_m > DICT_SLOT_CAP {
                return Err(Error::InvalidInput(format!(
                    "mark lattice needs {n_m} slots, cap is {DICT_SLOT_CAP}; coarsen mark_pitch"
                )));
            }
            let (gt, dt_) = gram_columns(&hyper.kernel, &time_lattice, 1);
            let (gm, dm) = gram_columns(&opts.mark_kernel, &mark_lattice, 1);
            (Vec::new(), Vec::new(), gt, dt_, gm, dm)
        }
    };

    let shared = MarkedShared {
        hyper,
        opts,
        grid: &grid,
        time_lattice,
        mark_lattice,
        gcols2,
        gdiag2,
        gcols_t,
        gdiag_t,
        gcols_m,
        gdiag_m,
        per_dim_times,
        per_dim_mslots,
        fired_rows,
        kappa_z: stream.max_window_count(hyper.z),
    };

    let start = Instant::now();
    let rows: Result<Vec<MarkedRowOut>> = (0..hyper.p)
        .into_par_iter()
        .map(|i| match opts.mode {
            MarkedMode::Joint => run_row_marked_joint(&shared, i),
            MarkedMode::Separable => run_row_marked_separable(&shared, i),
        })
        .collect();
    let rows = rows?;
    let wall = start.elapsed().as_secs_f64();

    let n_snaps = rows[0].snaps.len();
    let mut snapshots = Vec::with_capacity(n_snaps);
    for s in 0..n_snaps {
        let (k, t) = (rows[0].snaps[s].0, rows[0].snaps[s].1);
        let mut mu_hat = Vec::with_capacity(hyper.p);
        let mut f_hat = Vec::with_capacity(hyper.p * hyper.p);
        let mut cum_risk = 0.0;
        for row in &rows {
            let (rk, _, mu, risk, trigs) = &row.snaps[s];
            debug_assert_eq!(*rk, k);
            mu_hat.push(*mu);
            cum_risk += risk;
            f_hat.extend(trigs.iter().cloned());
        }
        snapshots.push(MarkedSnapshot { k, t, mu_hat, f_hat, cum_risk });
    }
    Ok(MarkedFitResult {
        snapshots,
        transform,
        epochs: grid.n_epochs(),
        kappa_z: shared.kappa_z,
        wall_seconds: wall,
        max_projection_residual: rows.iter().map(|r| r.max_resid).fold(0.0, f64::max),
        unconverged_projections: rows.iter().map(|r| r.unconverged).sum(),
        max_inline_residual: rows.iter().map(|r| r.max_inline_resid).fold(0.0, f64::max),
        truncated_inline_clamps: rows.iter().map(|r| r.truncated_inline).sum(),
    })
}

// ======================= spatial cells =======================

/// Uniform rectangular cell grid over an axis-aligned box. Cell index is
/// row-major over the coordinate counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceCells {
    pub sdim: usize,
    pub origin: Vec<f64>,
    pub cell_size: f64,
    pub counts: Vec<usize>,
}

/// Desk-scale ceiling on the cell count.
pub const MAX_CELLS: usize = 400;

impl SpaceCells {
    pub fn grid(origin: Vec<f64>, cell_size: f64, counts: Vec<usize>) -> Result<Self> {
        if origin.len() != counts.len() || origin.is_empty() || origin.len() > 3 {
            return Err(Error::InvalidInput(format!(
                "cell grid needs 1-3 matching origin/count coordinates, got {}/{}",
                origin.len(),
                counts.len()
            )));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidInput(format!("cell size must be positive, got {cell_size}")));
        }
        let n: usize = counts.iter().product();
        if n == 0 || n > MAX_CELLS {
            return Err(Error::InvalidInput(format!(
                "cell count {n} outside the supported range 1..={MAX_CELLS}"
            )));
        }
        Ok(SpaceCells { sdim: origin.len(), origin, cell_size, counts })
    }

    pub fn n_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn area(&self) -> f64 {
        self.cell_size.powi(self.sdim as i32)
    }

    pub fn center(&self, c: usize) -> Vec<f64> {
        debug_assert!(c < self.n_cells());
        let mut rem = c;
        let mut out = vec![0.0; self.sdim];
        for d in (0..self.sdim).rev() {
            let i = rem % self.counts[d];
            rem /= self.counts[d];
            out[d] = self.origin[d] + (i as f64 + 0.5) * self.cell_size;
        }
        out
    }

    /// Cell containing `x`; the far boundary belongs to the last cell.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.sdim {
            return Err(Error::InvalidInput(format!(
                "location has {} coordinates, cells have {}",
                x.len(),
                self.sdim
            )));
        }
        let mut c = 0usize;
        for d in 0..self.sdim {
            let r = (x[d] - self.origin[d]) / self.cell_size;
            let mut i = r.floor() as i64;
            if i == self.counts[d] as i64 && r - self.counts[d] as f64 <= 1e-9 {
                i -= 1;
            }
            if i < 0 || i >= self.counts[d] as i64 {
                return Err(Error::InvalidInput(format!(
                    "location coordinate {} outside the cell domain [{}, {}]",
                    x[d],
                    self.origin[d],
                    self.origin[d] + self.counts[d] as f64 * self.cell_size
                )));
            }
            c = c * self.counts[d] + i as usize;
        }
        Ok(c)
    }
}

/// Rewrite a multivariate stream as a single-dimension located stream: each
/// event keeps its time, drops its dimension, and takes the center of the
/// cell with that dimension's index as its location. The cell-tiled data
/// generator for spatial experiments.
pub fn tile_to_spatial(stream: &EventStream, cells: &SpaceCells) -> Result<EventStream> {
    if stream.p != cells.n_cells() {
        return Err(Error::InvalidInput(format!(
            "stream has {} dimensions, cell grid has {} cells",
            stream.p,
            cells.n_cells()
        )));
    }
    let mut coords = Vec::with_capacity(stream.times.len() * cells.sdim);
    for &d in &stream.dims {
        coords.extend_from_slice(&cells.center(d as usize));
    }
    Ok(EventStream {
        p: 1,
        horizon: stream.horizon,
        times: stream.times.clone(),
        dims: vec![0; stream.times.len()],
        marks: None,
        locations: Some(crate::process::Locations { sdim: cells.sdim, coords }),
    })
}

// ======================= spatial gradient op =======================

/// One cell's contribution to the spatial epoch gradient: a (lag,
/// displacement) center per window event with coefficient `rho_c`, plus the
/// `zeta * f_hat` shrinkage. Displacements are taken from the cell center;
/// events farther than `space_radius` (sup-norm) contribute nothing. An
/// empty window leaves pure shrinkage.
#[allow(clippy::too_many_arguments)]
pub fn shp_gradient(
    f_hat: &KernelExpansion,
    t_k: f64,
    window_times: &[f64],
    window_locs: &[f64],
    cell_center: &[f64],
    rho_c: f64,
    zeta: f64,
    snap_pitch: f64,
    disp_pitch: f64,
    space_radius: f64,
) -> Result<KernelExpansion> {
    let sdim = cell_center.len();
    debug_assert_eq!(f_hat.dim, 1 + sdim);
    if window_locs.len() != window_times.len() * sdim {
        return Err(Error::InvalidInput(format!(
            "{} window events carry {} location coordinates, expected {}",
            window_times.len(),
            window_locs.len(),
            window_times.len() * sdim
        )));
    }
    let mut g = KernelExpansion::new(f_hat.kernel.clone(), 1 + sdim, f_hat.budget, f_hat.window);
    let mut center = vec![0.0; 1 + sdim];
    if rho_c != 0.0 {
        for (idx, &tau) in window_times.iter().enumerate() {
            let loc = &window_locs[idx * sdim..(idx + 1) * sdim];
            let mut inside = true;
            for d in 0..sdim {
                let disp = cell_center[d] - loc[d];
                if disp.abs() > space_radius {
                    inside = false;
                    break;
                }
                center[1 + d] = snap_center(disp, disp_pitch);
            }
            if !inside {
                continue;
            }
            center[0] = snap_center(t_k - tau, snap_pitch).max(snap_pitch);
            g.push_center(&center, rho_c);
        }
    }
    if zeta != 0.0 {
        for s in 0..f_hat.n_centers() {
            let c = zeta * f_hat.coeffs[s];
            if c != 0.0 {
                g.push_center(f_hat.center(s), c);
            }
        }
    }
    g.coalesce();
    Ok(g)
}

// ======================= spatial fit =======================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShpOptions {
    /// Displacement lattice pitch.
    pub disp_pitch: f64,
    /// Sup-norm truncation radius for spatial influence; events farther
    /// from a cell center contribute nothing there. Keeps the displacement
    /// dictionary independent of the domain size.
    pub space_radius: f64,
}

impl ShpOptions {
    /// Cover the whole domain: no spatial truncation, pitch of half a cell.
    pub fn covering(cells: &SpaceCells) -> Self {
        let span = cells
            .counts
            .iter()
            .map(|&c| c as f64 * cells.cell_size)
            .fold(0.0f64, f64::max);
        ShpOptions { disp_pitch: 0.5 * cells.cell_size, space_radius: span }
    }
}

#[derive(Debug, Clone)]
pub struct ShpSnapshot {
    pub k: usize,
    pub t: f64,
    pub mu_hat: f64,
    /// Estimate over (lag, displacement...) centers.
    pub f_hat: KernelExpansion,
    pub cum_risk: f64,
}

#[derive(Debug, Clone)]
pub struct ShpFitResult {
    pub snapshots: Vec<ShpSnapshot>,
    pub epochs: usize,
    pub kappa_z: usize,
    pub n_cells: usize,
    pub wall_seconds: f64,
    pub max_projection_residual: f64,
    pub unconverged_projections: usize,
    pub max_inline_residual: f64,
    pub truncated_inline_clamps: usize,
}

impl ShpFitResult {
    pub fn final_state(&self) -> &ShpSnapshot {
        self.snapshots.last().expect("fit always emits a final snapshot")
    }
}

/// Online spatial fit against the cell-sum loss: per epoch, each cell c
/// contributes `dt * lambda(t, x_c) * area - x_c * log lambda(t, x_c)`, the
/// per-cell levels rho_c drive one shared f(lag, displacement) dictionary,
/// and the baseline step uses the summed levels. Requires a single-dimension
/// stream with a location per event and a product (time, space) kernel.
pub fn shp_fit(
    stream: &EventStream,
    hyper: &HyperParams,
    cells: &SpaceCells,
    opts: &ShpOptions,
) -> Result<ShpFitResult> {
    hyper.validate()?;
    if stream.p != 1 || hyper.p != 1 {
        return Err(Error::InvalidInput(
            "spatial fit works on a single-dimension located stream".into(),
        ));
    }
    if hyper.projection != ProjectionMode::GridClip {
        return Err(Error::InvalidInput(
            "spatial fits support the grid-clip projection only".into(),
        ));
    }
    if !matches!(hyper.kernel, Kernel::Product2D { .. }) {
        return Err(Error::InvalidInput(
            "spatial fit needs a product (time, space) kernel".into(),
        ));
    }
    if !(opts.disp_pitch > 0.0) || !(opts.space_radius > 0.0) {
        return Err(Error::InvalidInput(
            "displacement pitch and space radius must be positive".into(),
        ));
    }
    let locs = stream
        .locations
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("spatial fit needs a location per event".into()))?;
    if locs.sdim != cells.sdim || locs.coords.len() != stream.times.len() * cells.sdim {
        return Err(Error::InvalidInput(format!(
            "locations carry {} coordinates per event, cells have {}",
            if stream.times.is_empty() { locs.sdim } else { locs.coords.len() / stream.times.len() },
            cells.sdim
        )));
    }
    let sdim = cells.sdim;
    let n_events = stream.times.len();
    let n_cells = cells.n_cells();
    // Every location must land in a cell; this is also the domain check.
    let mut event_cell = Vec::with_capacity(n_events);
    for e in 0..n_events {
        event_cell.push(cells.assign(&locs.coords[e * sdim..(e + 1) * sdim])? as u32);
    }

    let grid = build_grid(stream, hyper.delta, stream.horizon)?;
    let time_lattice = hyper.lattice();
    let n_t = time_lattice.len();
    let centers: Vec<Vec<f64>> = (0..n_cells).map(|c| cells.center(c)).collect();

    // Displacement dictionary: distinct snapped (cell center - event
    // location) tuples within the truncation radius. Quantized coordinates
    // keep dedup exact.
    let mut disp_quant: Vec<Vec<i64>> = Vec::new();
    {
        let mut seen = std::collections::BTreeSet::new();
        for e in 0..n_events {
            let loc = &locs.coords[e * sdim..(e + 1) * sdim];
            for cc in centers.iter() {
                let mut q = Vec::with_capacity(sdim);
                let mut inside = true;
                for d in 0..sdim {
                    let disp = cc[d] - loc[d];
                    if disp.abs() > opts.space_radius {
                        inside = false;
                        break;
                    }
                    q.push((disp / opts.disp_pitch).round_ties_even() as i64);
                }
                if inside && seen.insert(q.clone()) {
                    disp_quant.push(q);
                }
            }
        }
    }
    if disp_quant.is_empty() {
        disp_quant.push(vec![0; sdim]);
    }
    disp_quant.sort_unstable();
    let n_d = disp_quant.len();
    let n = n_t * n_d;
    if n > DICT_SLOT_CAP {
        return Err(Error::InvalidInput(format!(
            "spatial dictionary needs {n} slots ({n_t} lags x {n_d} displacements), cap is \
             {DICT_SLOT_CAP}; coarsen snap_pitch or disp_pitch or shrink space_radius"
        )));
    }

    // (event, cell) -> displacement slot, u32::MAX when out of radius.
    let mut ds_table = vec![u32::MAX; n_events * n_cells];
    for e in 0..n_events {
        let loc = &locs.coords[e * sdim..(e + 1) * sdim];
        let mut q = vec![0i64; sdim];
        'cell: for (c, cc) in centers.iter().enumerate() {
            for d in 0..sdim {
                let disp = cc[d] - loc[d];
                if disp.abs() > opts.space_radius {
                    continue 'cell;
                }
                q[d] = (disp / opts.disp_pitch).round_ties_even() as i64;
            }
            let ds = disp_quant.binary_search(&q).expect("slot enumerated above");
            ds_table[e * n_cells + c] = ds as u32;
        }
    }

    let mut centers_flat = Vec::with_capacity(n * (1 + sdim));
    for &tl in &time_lattice {
        for q in &disp_quant {
            centers_flat.push(tl);
            for &qi in q {
                centers_flat.push(qi as f64 * opts.disp_pitch);
            }
        }
    }
    let (gcols, gdiag) = gram_columns(&hyper.kernel, &centers_flat, 1 + sdim);

    let m = grid.n_epochs();
    let kappa_z = stream.max_window_count(hyper.z);
    let area = cells.area();
    let zeta = hyper.zeta[0];
    let omega = hyper.omega[0];
    let norm_cap =
        kappa_z as f64 * n_cells as f64 * (hyper.delta * area).max(1.0 / hyper.mu_min);

    let mut pair = Pair::zero(n);
    let mut mu = 10.0 * hyper.mu_min;
    let mut cum_risk = 0.0;
    let mut lo = 0usize;
    let mut hi = 0usize;
    let mut fire_cursor = 0usize;
    let mut x_cell = vec![0u32; n_cells];
    let mut rho_cells = vec![0.0; n_cells];
    let mut scratch_s = vec![0.0; n];
    let mut touched: Vec<u32> = Vec::new();

    let mut snaps: Vec<ShpSnapshot> = Vec::new();
    let mut max_resid = 0.0f64;
    let mut unconverged = 0usize;
    let mut max_inline_resid = 0.0f64;
    let mut truncated_inline = 0usize;

    let start = Instant::now();
    for k in 1..=m {
        let t = grid.times[k - 1];
        let dt = grid.dt(k - 1);
        for v in &mut x_cell {
            *v = 0;
        }
        while fire_cursor < n_events && stream.times[fire_cursor] <= t {
            x_cell[event_cell[fire_cursor] as usize] += 1;
            fire_cursor += 1;
        }
        while hi < n_events && stream.times[hi] < t {
            hi += 1;
        }
        while lo < hi && stream.times[lo] < t - hyper.z {
            lo += 1;
        }

        let mut rho_sum = 0.0;
        let mut any_pos = false;
        let norm_sq = pair.norm_sq_actual();
        if zeta > 0.0 {
            let cap = norm_cap / zeta;
            assert!(
                norm_sq.sqrt() <= cap * (1.0 + 1e-9) + 1e-9,
                "iterate norm {} broke its bound {cap}",
                norm_sq.sqrt()
            );
        }
        for c in 0..n_cells {
            let mut lam = mu;
            for e in lo..hi {
                let ds = ds_table[e * n_cells + c];
                if ds == u32::MAX {
                    continue;
                }
                let ts = snap_slot(t - stream.times[e], hyper.snap_pitch, n_t);
                let slot = ts * n_d + ds as usize;
                lam += (pair.shrink * pair.v[slot]).max(0.0);
            }
            let rho_c = rho(dt * area, x_cell[c], lam, hyper.mu_min)?;
            let rho_bound = (dt * area).max(x_cell[c] as f64 / hyper.mu_min);
            assert!(
                rho_c.abs() <= rho_bound + 1e-9,
                "per-cell gradient level {rho_c} broke its bound {rho_bound}"
            );
            rho_cells[c] = rho_c;
            rho_sum += rho_c;
            if rho_c > 0.0 {
                any_pos = true;
            }
            // Regularizer terms are counted once, attached to the first
            // cell, so the single-cell case telescopes to the plain fit.
            cum_risk += if c == 0 {
                instantaneous_risk(
                    lam,
                    dt * area,
                    x_cell[c],
                    mu,
                    std::slice::from_ref(&norm_sq),
                    omega,
                    std::slice::from_ref(&zeta),
                )?
            } else {
                instantaneous_risk(lam, dt * area, x_cell[c], 0.0, &[], 0.0, &[])?
            };
        }

        let eta = hyper.eta(k);
        mu = mu_step(mu, rho_sum, eta, omega, hyper.mu_min);

        pair.shrink *= 1.0 - eta * zeta;
        if pair.shrink < 1e-100 {
            pair.fold();
        }
        let mut bumped = false;
        for c in 0..n_cells {
            if rho_cells[c] == 0.0 {
                continue;
            }
            let d_actual = -eta * rho_cells[c];
            for e in lo..hi {
                let ds = ds_table[e * n_cells + c];
                if ds == u32::MAX {
                    continue;
                }
                let ts = snap_slot(t - stream.times[e], hyper.snap_pitch, n_t);
                pair.bump(ts * n_d + ds as usize, d_actual / pair.shrink, &gcols, &gdiag);
                bumped = true;
            }
        }
        if any_pos && bumped {
            let tol = INLINE_CLAMP_TOL / pair.shrink;
            let (resid, ok) = psor_clamp(
                &mut pair,
                &gcols,
                &gdiag,
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

        if k % hyper.snapshot_stride == 0 || k == m {
            let tol = EMIT_CLAMP_TOL / pair.shrink;
            let (resid, ok) = psor_clamp(
                &mut pair,
                &gcols,
                &gdiag,
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
            pair.resync_norm();
            let mut e = KernelExpansion::new(hyper.kernel.clone(), 1 + sdim, n.max(1), hyper.z);
            for (s, &b) in pair.b.iter().enumerate() {
                let coeff = pair.shrink * b;
                if coeff != 0.0 {
                    e.push_center(&centers_flat[s * (1 + sdim)..(s + 1) * (1 + sdim)], coeff);
                }
            }
            snaps.push(ShpSnapshot { k, t, mu_hat: mu, f_hat: e, cum_risk });
        }
    }
    let wall = start.elapsed().as_secs_f64();

    Ok(ShpFitResult {
        snapshots: snaps,
        epochs: m,
        kappa_z,
        n_cells,
        wall_seconds: wall,
        max_projection_residual: max_resid,
        unconverged_projections: unconverged,
        max_inline_residual: max_inline_resid,
        truncated_inline_clamps: truncated_inline,
    })
}
