//! Dense-dictionary machinery shared by the online fits: per-function
//! coefficient state with cached Gram products, lag snapping, and the
//! projected-SOR nonnegativity clamp. The time-only, marked and spatial
//! estimators all drive this code, so their degenerate cases (single mark
//! slot, single cell) coincide with the plain fit arithmetic for free.

use crate::kernels::Kernel;

/// Between-snapshot clamps run cheap and may stop early; emission-point
/// clamps finish the projection so exported states are feasible.
pub(crate) const CLAMP_RELAX: f64 = 1.7;
pub(crate) const INLINE_CLAMP_TOL: f64 = 1e-9;
pub(crate) const INLINE_CLAMP_SWEEPS: usize = 300;
pub(crate) const EMIT_CLAMP_TOL: f64 = 1e-10;
pub(crate) const EMIT_CLAMP_SWEEPS: usize = 100_000;

/// Gramian of a center list, column-major: column `s` at `[s*n, (s+1)*n)`.
/// Centers are flat with `cdim` coordinates per center.
pub(crate) fn gram_columns(kernel: &Kernel, centers: &[f64], cdim: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(cdim > 0 && centers.len() % cdim == 0);
    let n = centers.len() / cdim;
    let mut gcols = vec![0.0; n * n];
    for s in 0..n {
        let cs = &centers[s * cdim..(s + 1) * cdim];
        for g in 0..n {
            gcols[s * n + g] = kernel.eval(cs, &centers[g * cdim..(g + 1) * cdim]);
        }
    }
    let gdiag = (0..n).map(|s| gcols[s * n + s]).collect();
    (gcols, gdiag)
}

/// Nearest lattice slot for a positive lag on the pitch grid
/// `{pitch, 2*pitch, ..., n*pitch}` (slot indices are 0-based).
pub(crate) fn snap_slot(lag: f64, pitch: f64, n: usize) -> usize {
    let r = (lag / pitch).round_ties_even();
    (r as i64).clamp(1, n as i64) as usize - 1
}

/// Coefficients of one triggering function on a shared lattice. The actual
/// coefficient vector is `shrink * b`; `v` caches `G b` and `norm_sq` caches
/// `b' G b` (both in stored units) so a gradient step is O(lattice).
pub(crate) struct Pair {
    pub(crate) b: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) shrink: f64,
    pub(crate) norm_sq: f64,
}

impl Pair {
    pub(crate) fn zero(n: usize) -> Self {
        Pair { b: vec![0.0; n], v: vec![0.0; n], shrink: 1.0, norm_sq: 0.0 }
    }

    pub(crate) fn norm_sq_actual(&self) -> f64 {
        (self.shrink * self.shrink * self.norm_sq).max(0.0)
    }

    /// Fold the lazy scale factor into the stored vectors.
    pub(crate) fn fold(&mut self) {
        let s = self.shrink;
        for x in &mut self.b {
            *x *= s;
        }
        for x in &mut self.v {
            *x *= s;
        }
        self.norm_sq *= s * s;
        self.shrink = 1.0;
    }

    /// `b[slot] += d` with the caches kept in sync. The norm update must read
    /// `v[slot]` before the column update.
    pub(crate) fn bump(&mut self, slot: usize, d: f64, gcols: &[f64], gdiag: &[f64]) {
        let n = self.b.len();
        self.norm_sq += 2.0 * d * self.v[slot] + d * d * gdiag[slot];
        self.b[slot] += d;
        let col = &gcols[slot * n..(slot + 1) * n];
        for (vg, cg) in self.v.iter_mut().zip(col) {
            *vg += d * cg;
        }
    }

    /// Exact cache resync: `b' G b` through the (exact up to fp) `v` cache.
    pub(crate) fn resync_norm(&mut self) {
        self.norm_sq = self.b.iter().zip(&self.v).map(|(b, v)| b * v).sum();
    }
}

/// Projected SOR on the clip multipliers of `min ||f + s K(.)|| s.t.
/// f + G s >= 0 on the lattice`, working in stored units. Over-relaxation
/// (`0 < relax < 2`) speeds up the strongly correlated adjacent columns of a
/// smooth kernel. Returns the final residual and whether it met `tol` within
/// `max_sweeps`.
pub(crate) fn psor_clamp(
    pair: &mut Pair,
    gcols: &[f64],
    gdiag: &[f64],
    s: &mut [f64],
    touched: &mut Vec<u32>,
    tol: f64,
    relax: f64,
    max_sweeps: usize,
) -> (f64, bool) {
    let n = pair.b.len();
    let mut resid = 0.0f64;
    let mut ok = false;
    for _ in 0..max_sweeps {
        for g in 0..n {
            let target = (s[g] - relax * pair.v[g] / gdiag[g]).max(0.0);
            let d = target - s[g];
            if d != 0.0 {
                if s[g] == 0.0 {
                    touched.push(g as u32);
                }
                pair.bump(g, d, gcols, gdiag);
                s[g] = target;
            }
        }
        resid = 0.0;
        for g in 0..n {
            let mut r = -pair.v[g];
            if s[g] > 0.0 {
                r = r.max(pair.v[g].abs());
            }
            resid = resid.max(r);
        }
        if resid <= tol {
            ok = true;
            break;
        }
    }
    for &g in touched.iter() {
        s[g as usize] = 0.0;
    }
    touched.clear();
    (resid, ok)
}
