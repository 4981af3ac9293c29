//! Projections that keep kernel expansions nonnegative.
//!
//! Grid clipping solves the convex QP
//!   min (b - a)' G (b - a)  s.t.  f_b(t_g) >= 0 for grid points t_g,
//! i.e. the RKHS-metric projection of the coefficient vector onto the
//! finite-constraint relaxation of the nonnegativity cone. Two solvers
//! cover the two shapes the problem takes: when every grid point is a
//! center, the KKT system is a linear complementarity problem directly in
//! the coefficients and projected Gauss-Seidel solves it without ever
//! inverting the Gramian; otherwise Hildreth's coordinate ascent runs on
//! the dual with an eigenvalue-clamped Gramian inverse.
//!
//! For even-degree polynomial kernels the exact (non-relaxed) constraint
//! set is a spectrahedron: f_b >= 0 holds iff
//! G' diag(b) + diag(b) G' is positive semidefinite, with G' the Gramian
//! of the half-degree kernel. That projection is solved by ADMM against
//! an auxiliary PSD variable.

use crate::kernels::KernelExpansion;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Result of a projection: the projected expansion plus solver
/// diagnostics. `converged == false` is the warning flag for hitting the
/// iteration cap; the expansion is then the best iterate found.
#[derive(Debug, Clone)]
pub struct Projected {
    pub f: KernelExpansion,
    pub converged: bool,
    pub sweeps: usize,
    /// Maximum of primal violation and complementarity residual at exit.
    pub kkt_residual: f64,
}

/// `n` evenly spaced points on `[0, z]` including both ends.
pub fn uniform_grid(z: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && z > 0.0);
    (0..n).map(|k| z * k as f64 / (n - 1) as f64).collect()
}

const MAX_SWEEPS: usize = 20_000;
const KKT_TOL: f64 = 1e-9;

/// Map each grid point to the index of an identical center, if every
/// grid point is a center.
fn grid_center_indices(f: &KernelExpansion, points: &[f64]) -> Option<Vec<usize>> {
    let dim = f.dim;
    let mut idx = Vec::with_capacity(points.len() / dim);
    'outer: for g in points.chunks_exact(dim) {
        for s in 0..f.n_centers() {
            if f.center(s) == g {
                idx.push(s);
                continue 'outer;
            }
        }
        return None;
    }
    Some(idx)
}

/// Project onto `{ f : f(t_g) >= 0 for all grid points }` in the RKHS
/// metric, keeping the center set fixed. `points` is a flattened list of
/// `f.dim`-dimensional evaluation points. Inputs already feasible are
/// returned unchanged.
pub fn project_grid_clip(f: &KernelExpansion, points: &[f64]) -> Result<Projected> {
    let dim = f.dim;
    if points.is_empty() || points.len() % dim != 0 {
        return Err(Error::InvalidInput(format!(
            "clip grid must be a nonempty multiple of dim {dim}, got {} values",
            points.len()
        )));
    }
    if f.n_centers() == 0 {
        return Ok(Projected { f: f.clone(), converged: true, sweeps: 0, kkt_residual: 0.0 });
    }
    let feasible = points.chunks_exact(dim).all(|g| f.eval(g) >= 0.0);
    if feasible {
        return Ok(Projected { f: f.clone(), converged: true, sweeps: 0, kkt_residual: 0.0 });
    }
    match grid_center_indices(f, points) {
        Some(idx) => project_psor(f, &idx),
        None => project_hildreth(f, points),
    }
}

/// Grid coincides with centers: complementarity between the coefficient
/// increments `s_g = b_g - a_g >= 0` and the function values at the
/// constrained centers, solved by projected Gauss-Seidel over a cached
/// value vector `v = G b`.
fn project_psor(f: &KernelExpansion, constrained: &[usize]) -> Result<Projected> {
    let gram = f.gramian();
    let a = DVector::from_column_slice(&f.coeffs);
    let mut b = a.clone();
    let mut v = &gram * &b;
    let scale = f.coeffs.iter().map(|c| c.abs()).fold(1.0, f64::max);
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        for &c in constrained {
            let s_old = b[c] - a[c];
            let s_new = (s_old - v[c] / gram[(c, c)]).max(0.0);
            let step = s_new - s_old;
            if step != 0.0 {
                b[c] += step;
                v.axpy(step, &gram.column(c).into_owned(), 1.0);
            }
        }
        residual = 0.0f64;
        for &c in constrained {
            residual = residual.max(-v[c]).max(((b[c] - a[c]) * v[c]).abs());
        }
        if residual <= KKT_TOL * scale {
            break;
        }
    }
    let mut out = f.clone();
    out.coeffs = b.iter().copied().collect();
    Ok(Projected {
        f: out,
        converged: residual <= KKT_TOL * scale,
        sweeps,
        kkt_residual: residual,
    })
}

/// Eigenvalue-clamped inverse of a symmetric PSD matrix; the clamp keeps
/// near-duplicate centers from blowing up the dual system.
fn clamped_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max).max(1e-300);
    let floor = 1e-10 * max_ev;
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(floor)));
    &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose()
}

/// Orthonormal basis of null(L), complete even when L has fewer rows
/// than columns (which a thin SVD would truncate): eigenvectors of L'L
/// with eigenvalue below tolerance.
fn null_space(lin: &DMatrix<f64>) -> DMatrix<f64> {
    let d = lin.ncols();
    let eig = (lin.transpose() * lin).symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let tol = 1e-12 * max_ev.max(1e-300);
    let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] <= tol).collect();
    DMatrix::from_fn(d, keep.len(), |s, j| eig.eigenvectors[(s, keep[j])])
}

/// General clip grid: Hildreth coordinate ascent on the dual
/// `min (1/4) l' D l + q' l, l >= 0` with `D = C G~ C'`, `q = C a`,
/// then `b = a + (1/2) G~ C' l`.
fn project_hildreth(f: &KernelExpansion, points: &[f64]) -> Result<Projected> {
    let dim = f.dim;
    let d = f.n_centers();
    let m = points.len() / dim;
    let gram = f.gramian();
    let g_inv = clamped_inverse(&gram);
    let mut c = DMatrix::zeros(m, d);
    for (gi, g) in points.chunks_exact(dim).enumerate() {
        for s in 0..d {
            c[(gi, s)] = f.kernel.eval(g, f.center(s));
        }
    }
    let big_d = &c * &g_inv * c.transpose();
    let a = DVector::from_column_slice(&f.coeffs);
    let q = &c * &a;
    let scale = f.coeffs.iter().map(|x| x.abs()).fold(1.0, f64::max);

    let mut lam: DVector<f64> = DVector::zeros(m);
    let mut w: DVector<f64> = DVector::zeros(m); // D * lam
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        for g in 0..m {
            let dgg = big_d[(g, g)];
            if dgg <= 1e-14 {
                continue;
            }
            let grad = 0.5 * w[g] + q[g];
            let new = (lam[g] - grad / (0.5 * dgg)).max(0.0);
            let step = new - lam[g];
            if step != 0.0 {
                lam[g] = new;
                w.axpy(step, &big_d.column(g).into_owned(), 1.0);
            }
        }
        // primal values at grid points: C b = q + (1/2) D lam
        residual = 0.0f64;
        for g in 0..m {
            let val = q[g] + 0.5 * w[g];
            residual = residual.max(-val).max((lam[g] * val).abs());
        }
        if residual <= KKT_TOL * scale {
            break;
        }
    }
    let b = &a + 0.5 * (&g_inv * (c.transpose() * &lam));
    let mut out = f.clone();
    out.coeffs = b.iter().copied().collect();
    Ok(Projected {
        f: out,
        converged: residual <= KKT_TOL * scale,
        sweeps,
        kkt_residual: residual,
    })
}

// ======================= polynomial SDP projection =======================

/// `G' diag(b) + diag(b) G'` for the half-degree Gramian.
fn lmi_matrix(g_half: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let d = b.len();
    DMatrix::from_fn(d, d, |r, c| g_half[(r, c)] * (b[r] + b[c]))
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn psd_clip(x: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = x.clone().symmetric_eigen();
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    &eig.eigenvectors * clipped * eig.eigenvectors.transpose()
}

const LMI_TOL: f64 = 1e-6;

/// Project an even-degree polynomial-kernel expansion onto the exact
/// nonnegativity spectrahedron: minimize `(b - a)' G (b - a)` subject to
/// `G' diag(b) + diag(b) G'` PSD. Solved by ADMM with the LMI split into
/// an auxiliary PSD matrix variable (the b-update is a fixed linear
/// solve, the matrix update an eigenvalue clip); falls back to grid
/// clipping at the centers (with a warning flag) if iteration stalls.
pub fn project_poly_sdp(f: &KernelExpansion) -> Result<Projected> {
    let half = f.kernel.half_degree_kernel()?;
    if f.n_centers() == 0 {
        return Ok(Projected { f: f.clone(), converged: true, sweeps: 0, kkt_residual: 0.0 });
    }
    let d = f.n_centers();
    let gram = f.gramian();
    let mut g_half = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            g_half[(r, c)] = half.eval(f.center(r), f.center(c));
        }
    }
    let a = DVector::from_column_slice(&f.coeffs);
    if min_eig(&lmi_matrix(&g_half, &a)) >= -LMI_TOL {
        return Ok(Projected { f: f.clone(), converged: true, sweeps: 0, kkt_residual: 0.0 });
    }

    // When the center count exceeds the half-kernel rank the
    // spectrahedron has empty interior: every v in null(G') satisfies
    // v' A(b) v = 0 for all b, so A(b) PSD forces A(b) v = G' diag(b) v
    // = 0, i.e. diag(b) must keep null(G') invariant. Those linear
    // equations are eliminated exactly; on the surviving subspace the
    // LMI compresses to rank(G') x rank(G'), where b = 1 gives
    // 2 diag(spectrum) and Slater's condition holds, so ADMM converges
    // to gate tolerances instead of crawling along the boundary.
    let g_eig = g_half.clone().symmetric_eigen();
    let l_max = g_eig.eigenvalues.iter().fold(0.0_f64, |m, &l| m.max(l.abs()));
    let kept: Vec<usize> = (0..d).filter(|&i| g_eig.eigenvalues[i] > 1e-7 * l_max).collect();
    let dropped: Vec<usize> = (0..d).filter(|i| !kept.contains(i)).collect();
    let r = kept.len();
    let range_basis = DMatrix::from_fn(d, r, |s, j| g_eig.eigenvectors[(s, kept[j])]);
    let spectrum = DVector::from_fn(r, |j, _| g_eig.eigenvalues[kept[j]]);

    let z_basis = if dropped.is_empty() {
        DMatrix::identity(d, d)
    } else {
        let m = dropped.len();
        let mut lin = DMatrix::zeros(r * m, d);
        for (l, &dr) in dropped.iter().enumerate() {
            for i in 0..r {
                for s in 0..d {
                    lin[(l * r + i, s)] = range_basis[(s, i)] * g_eig.eigenvectors[(s, dr)];
                }
            }
        }
        null_space(&lin)
    };
    let zdim = z_basis.ncols();
    if zdim == 0 {
        // numerically no admissible direction survived; zero is the one
        // point known feasible
        let mut out = f.clone();
        out.coeffs = vec![0.0; d];
        return Ok(Projected { f: out, converged: false, sweeps: 0, kkt_residual: 0.0 });
    }

    // compressed LMI as an explicit matrix on vec(r x r)
    let compress = |b: &DVector<f64>| {
        let w = range_basis.transpose() * DMatrix::from_diagonal(b) * &range_basis;
        let lw = DMatrix::from_diagonal(&spectrum) * &w;
        &lw + lw.transpose()
    };
    let mut t_op = DMatrix::zeros(r * r, zdim);
    for j in 0..zdim {
        let col = compress(&DVector::from_column_slice(z_basis.column(j).as_slice()));
        t_op.set_column(j, &DVector::from_column_slice(col.as_slice()));
    }
    let q_op = t_op.transpose() * &t_op;
    let q_inv = clamped_inverse(&q_op);
    let h = z_basis.transpose() * &gram * &z_basis;
    let rhs_base = 2.0 * (z_basis.transpose() * (&gram * &a));

    let chol = |tau: f64| {
        let mut m = 2.0 * &h + tau * &q_op;
        let ridge = 1e-12 * m.trace().max(1.0);
        for i in 0..zdim {
            m[(i, i)] += ridge;
        }
        m.cholesky().expect("ridged normal matrix is positive definite")
    };
    let mat_of = |v: &DVector<f64>| DMatrix::from_fn(r, r, |i, j| v[j * r + i]);
    let vec_of = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());

    let mut tau = (2.0 * h.norm() / q_op.norm().max(1e-300)).max(1e-8);
    let mut solve = chol(tau);
    let relax = 1.6;
    let mut y = z_basis.transpose() * &a;
    let mut s_mat = psd_clip(&mat_of(&(&t_op * &y)));
    let mut u = DMatrix::zeros(r, r);
    let mut sweeps = 0usize;
    while sweeps < 20_000 {
        sweeps += 1;
        let target = vec_of(&(&s_mat - &u));
        y = solve.solve(&(&rhs_base + tau * (t_op.transpose() * target)));
        let e = mat_of(&(&t_op * &y));
        let e_relaxed = relax * &e + (1.0 - relax) * &s_mat;
        let s_prev = s_mat.clone();
        s_mat = psd_clip(&(&e_relaxed + &u));
        u += &e_relaxed - &s_mat;
        let primal = (&e - &s_mat).norm();
        let dual = tau * (&s_mat - &s_prev).norm();
        let scale = 1.0 + e.norm().max(s_mat.norm());
        if primal <= 1e-12 * scale && dual <= 1e-12 * scale {
            break;
        }
        if sweeps % 200 == 0
            && dual <= 1e-10 * scale
            && min_eig(&e) >= -0.01 * LMI_TOL
        {
            break;
        }
        if sweeps % 50 == 0 {
            if primal > 10.0 * dual {
                tau *= 2.0;
                u /= 2.0;
                solve = chol(tau);
            } else if dual > 10.0 * primal {
                tau /= 2.0;
                u *= 2.0;
                solve = chol(tau);
            }
        }
    }
    // restore feasibility by alternating projections between the PSD
    // cone and the range of the compressed map
    for _ in 0..1000 {
        let e = mat_of(&(&t_op * &y));
        if min_eig(&e) >= -1e-12 * (1.0 + e.norm()) {
            break;
        }
        y = &q_inv * (t_op.transpose() * vec_of(&psd_clip(&e)));
    }
    // the direction b = 1 adds 2 eps diag(spectrum) to the compressed
    // matrix, so a tiny step along it clears any residual negativity
    let y_one = z_basis.transpose() * DVector::from_element(d, 1.0);
    let one_ok = (&z_basis * &y_one - DVector::from_element(d, 1.0)).norm() <= 1e-8 * (d as f64).sqrt();
    let me = min_eig(&mat_of(&(&t_op * &y)));
    if me < 0.0 && one_ok {
        let lam_min = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        y += (-me) * 1.05 / (2.0 * lam_min) * y_one;
    }

    let final_b = &z_basis * y;
    let residual = (-min_eig(&lmi_matrix(&g_half, &final_b))).max(0.0);
    if residual > LMI_TOL {
        // iteration stalled short of feasibility; clip at the centers
        // instead and flag it
        let centers = f.centers.clone();
        let mut fallback = project_grid_clip(f, &centers)?;
        fallback.converged = false;
        return Ok(fallback);
    }
    let mut out = f.clone();
    out.coeffs = final_b.iter().copied().collect();
    Ok(Projected { f: out, converged: true, sweeps, kkt_residual: residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;

    fn gaussian_expansion(centers: &[f64], coeffs: &[f64]) -> KernelExpansion {
        let mut e = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 64, 3.0);
        for (c, a) in centers.iter().zip(coeffs) {
            e.push_center(&[*c], *a);
        }
        e
    }

    /// Reference QP by active-set enumeration: try every subset of
    /// constraints as the active set, solve the equality-constrained
    /// projection, and keep the best KKT-consistent candidate.
    fn active_set_oracle(f: &KernelExpansion, points: &[f64]) -> Vec<f64> {
        let d = f.n_centers();
        let m = points.len();
        let gram = f.gramian();
        let g_inv = clamped_inverse(&gram);
        let mut c = DMatrix::zeros(m, d);
        for g in 0..m {
            for s in 0..d {
                c[(g, s)] = f.kernel.eval(&[points[g]], f.center(s));
            }
        }
        let a = DVector::from_column_slice(&f.coeffs);
        let mut best: Option<(f64, DVector<f64>)> = None;
        let subsets: Vec<Vec<usize>> = (0..(1usize << m.min(16)))
            .map(|mask| (0..m).filter(|g| mask >> g & 1 == 1).collect())
            .filter(|s: &Vec<usize>| s.len() <= d)
            .collect();
        for active in subsets {
            let b = if active.is_empty() {
                a.clone()
            } else {
                let ca = DMatrix::from_fn(active.len(), d, |r, s| c[(active[r], s)]);
                let mid = clamped_inverse(&(&ca * &g_inv * ca.transpose()));
                let lam = -1.0 * (&mid * (&ca * &a));
                if lam.iter().any(|&l| l < -1e-9) {
                    continue; // dual infeasible
                }
                &a + &g_inv * (ca.transpose() * lam)
            };
            let vals = &c * &b;
            if vals.iter().any(|&v| v < -1e-7) {
                continue; // primal infeasible
            }
            let diff = &b - &a;
            let obj = (&gram * &diff).dot(&diff);
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, b));
            }
        }
        best.expect("oracle found no feasible candidate").1.iter().copied().collect()
    }

    fn rkhs_dist(f: &KernelExpansion, coeffs: &[f64]) -> f64 {
        let mut other = f.clone();
        other.coeffs = coeffs.to_vec();
        f.rkhs_dist_sq(&other).sqrt()
    }

    #[test]
    fn feasible_input_unchanged() {
        let e = gaussian_expansion(&[0.5, 1.0], &[1.0, 0.5]);
        let grid = uniform_grid(3.0, 61);
        let p = project_grid_clip(&e, &grid).unwrap();
        assert_eq!(p.f.coeffs, e.coeffs);
        assert!(p.converged);
        assert_eq!(p.sweeps, 0);
    }

    // pure negative bump projects to (approximately) zero
    #[test]
    fn negative_bump_projects_to_zero() {
        let e = gaussian_expansion(&[0.5], &[-1.0]);
        let grid = uniform_grid(3.0, 31);
        let p = project_grid_clip(&e, &grid).unwrap();
        assert!(p.converged);
        assert!(p.f.coeffs[0].abs() < 1e-6, "coeff {}", p.f.coeffs[0]);
        let worst =
            grid.iter().map(|&t| p.f.eval(&[t])).fold(f64::INFINITY, f64::min);
        assert!(worst >= -1e-6, "violation {worst}");
    }

    // two close centers with a negative part, grid not a subset of
    // centers: Hildreth path against the active-set enumeration oracle
    #[test]
    fn two_center_case_matches_oracle() {
        let e = gaussian_expansion(&[0.3, 0.35], &[1.0, -2.0]);
        let grid = uniform_grid(3.0, 13);
        let p = project_grid_clip(&e, &grid).unwrap();
        let oracle = active_set_oracle(&e, &grid);
        let dist = rkhs_dist(&p.f, &oracle);
        assert!(dist < 1e-4, "dist to oracle {dist}; got {:?} want {oracle:?}", p.f.coeffs);
        for &t in &grid {
            assert!(p.f.eval(&[t]) >= -1e-8);
        }
    }

    // centers-as-grid path (projected Gauss-Seidel) against the oracle
    #[test]
    fn psor_path_matches_oracle() {
        let e = gaussian_expansion(&[0.2, 0.5, 0.9], &[0.5, -1.4, 0.3]);
        let grid: Vec<f64> = vec![0.2, 0.5, 0.9];
        let p = project_grid_clip(&e, &grid).unwrap();
        assert!(p.converged);
        let oracle = active_set_oracle(&e, &grid);
        let dist = rkhs_dist(&p.f, &oracle);
        assert!(dist < 1e-6, "dist {dist}: got {:?} want {oracle:?}", p.f.coeffs);
    }

    #[test]
    fn projection_is_idempotent() {
        let e = gaussian_expansion(&[0.2, 0.5, 0.9, 1.4], &[0.5, -1.4, 0.3, -0.2]);
        let grid = uniform_grid(3.0, 61);
        let once = project_grid_clip(&e, &grid).unwrap();
        let twice = project_grid_clip(&once.f, &grid).unwrap();
        let dist = rkhs_dist(&once.f, &twice.f.coeffs);
        assert!(dist < 1e-8, "projection moved twice-projected point by {dist}");
    }

    // contraction: projecting never increases distance to a feasible point
    #[test]
    fn projection_contracts_toward_feasible() {
        let e = gaussian_expansion(&[0.3, 0.8], &[0.4, -1.1]);
        let grid = uniform_grid(3.0, 31);
        let p = project_grid_clip(&e, &grid).unwrap();
        let feasible = gaussian_expansion(&[0.3, 0.8], &[0.5, 0.2]);
        let before = e.rkhs_dist_sq(&feasible);
        let after = p.f.rkhs_dist_sq(&feasible);
        assert!(after <= before + 1e-9, "{after} > {before}");
    }

    fn poly_expansion(centers: &[f64], coeffs: &[f64], degree: u32) -> KernelExpansion {
        let mut e = KernelExpansion::new(
            Kernel::Polynomial { degree, scale: 1.0, offset: 1.0 },
            1,
            64,
            3.0,
        );
        for (c, a) in centers.iter().zip(coeffs) {
            e.push_center(&[*c], *a);
        }
        e
    }

    #[test]
    fn sdp_feasible_input_is_identity() {
        // single center, positive coefficient: 1x1 LMI is 2 G' a >= 0
        let e = poly_expansion(&[1.0], &[0.7], 2);
        let p = project_poly_sdp(&e).unwrap();
        assert_eq!(p.f.coeffs, e.coeffs);
        assert!(p.converged);
    }

    // scalar case solved by hand: only b = 0 is feasible-optimal for a = -1
    #[test]
    fn sdp_scalar_negative_projects_to_zero() {
        let e = poly_expansion(&[1.0], &[-1.0], 2);
        let p = project_poly_sdp(&e).unwrap();
        assert!(p.converged);
        assert!(p.f.coeffs[0].abs() < 1e-4, "coeff {}", p.f.coeffs[0]);
    }

    /// Lattice-search oracle for 2-center SDP instances: scan a fine grid
    /// of coefficient pairs, keep the LMI-feasible minimizer.
    fn sdp_lattice_oracle(f: &KernelExpansion) -> Vec<f64> {
        let half = f.kernel.half_degree_kernel().unwrap();
        let d = f.n_centers();
        assert_eq!(d, 2);
        let gram = f.gramian();
        let mut g_half = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                g_half[(r, c)] = half.eval(f.center(r), f.center(c));
            }
        }
        let a = DVector::from_column_slice(&f.coeffs);
        let mut best = (f64::INFINITY, vec![0.0, 0.0]);
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let b = DVector::from_vec(vec![
                    -2.0 + 4.0 * i as f64 / n as f64,
                    -2.0 + 4.0 * j as f64 / n as f64,
                ]);
                if min_eig(&lmi_matrix(&g_half, &b)) < -1e-9 {
                    continue;
                }
                let diff = &b - &a;
                let obj = (&gram * &diff).dot(&diff);
                if obj < best.0 {
                    best = (obj, b.iter().copied().collect());
                }
            }
        }
        best.1
    }

    #[test]
    fn sdp_two_center_matches_lattice_oracle() {
        let e = poly_expansion(&[0.5, 1.5], &[-0.8, 0.6], 2);
        let p = project_poly_sdp(&e).unwrap();
        assert!(p.converged);
        let oracle = sdp_lattice_oracle(&e);
        // lattice pitch is 0.01, so agreement is at lattice resolution
        for (got, want) in p.f.coeffs.iter().zip(&oracle) {
            assert!((got - want).abs() < 0.02, "got {:?} want {oracle:?}", p.f.coeffs);
        }
    }

    /// Penalized-subgradient reference: same convex SDP, different
    /// optimizer (subgradient of the squared negative minimum eigenvalue
    /// with a diminishing step). Candidates are pulled radially toward
    /// the strictly feasible point b = 1 (where the LMI equals twice the
    /// half Gramian) until feasible, so every recorded objective is a
    /// true upper bound on the optimum. Requires a full-rank half
    /// Gramian.
    fn sdp_subgradient_reference(f: &KernelExpansion, iters: usize) -> (f64, Vec<f64>) {
        let half = f.kernel.half_degree_kernel().unwrap();
        let d = f.n_centers();
        let gram = f.gramian();
        let mut g_half = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                g_half[(r, c)] = half.eval(f.center(r), f.center(c));
            }
        }
        let a = DVector::from_column_slice(&f.coeffs);
        let ones = DVector::from_element(d, 1.0);
        assert!(min_eig(&lmi_matrix(&g_half, &ones)) > 0.0);
        let mut b = a.clone();
        let mut best = (f64::INFINITY, b.clone());
        for t in 1..=iters {
            let rho = 10.0 * (1.0 + t as f64 / 200.0);
            let eig = lmi_matrix(&g_half, &b).symmetric_eigen();
            let mut kmin = 0;
            for k in 0..d {
                if eig.eigenvalues[k] < eig.eigenvalues[kmin] {
                    kmin = k;
                }
            }
            let lmin = eig.eigenvalues[kmin];
            let mut grad = 2.0 * (&gram * (&b - &a));
            if lmin < 0.0 {
                let u = eig.eigenvectors.column(kmin);
                let gu = &g_half * u;
                for s in 0..d {
                    grad[s] += rho * 2.0 * lmin * 2.0 * u[s] * gu[s];
                }
            }
            let step = 0.05 / (t as f64).sqrt();
            b -= step * grad;
            if t % 50 == 0 {
                // min eig of the LMI is concave along the segment to 1,
                // so feasible blend weights form an interval reaching 1;
                // bisect for the smallest
                let feasible = |theta: f64| {
                    let bb = (1.0 - theta) * &b + theta * &ones;
                    min_eig(&lmi_matrix(&g_half, &bb)) >= 0.0
                };
                let mut hi = 1.0;
                if feasible(0.0) {
                    hi = 0.0;
                } else {
                    let mut lo = 0.0;
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if feasible(mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                }
                let bb = (1.0 - hi) * &b + hi * &ones;
                let diff = &bb - &a;
                let obj = (&gram * &diff).dot(&diff);
                if obj < best.0 {
                    best = (obj, bb);
                }
            }
        }
        (best.0, best.1.iter().copied().collect())
    }

    #[test]
    fn sdp_matches_subgradient_reference_on_full_rank_instance() {
        // degree 4, half-kernel (1+xy)^2 has rank 3 = center count, so
        // the spectrahedron has interior and the gated reference is
        // meaningful; feasible objectives upper-bound the optimum
        let e = poly_expansion(&[0.3, 0.9, 1.7], &[0.5, -0.9, 0.4], 4);
        let p = project_poly_sdp(&e).unwrap();
        assert!(p.converged, "solver ended with LMI residual {}", p.kkt_residual);
        let diff = DVector::from_column_slice(&p.f.coeffs)
            - DVector::from_column_slice(&e.coeffs);
        let obj = (&e.gramian() * &diff).dot(&diff);
        let (ref_obj, _) = sdp_subgradient_reference(&e, 40_000);
        assert!(ref_obj.is_finite(), "reference never reached the feasible set");
        assert!(
            obj <= ref_obj + 1e-4 * (1.0 + ref_obj),
            "solver objective {obj} worse than subgradient reference {ref_obj}"
        );
    }

    #[test]
    fn sdp_rank_deficient_instance_projects_onto_constant_ray() {
        // degree 2: the half-kernel has feature map (1, x), so diag(b)
        // must preserve a 10-dimensional null space. That forces b and
        // b.*x into span{1, x}, hence b = c 1 with c >= 0, and the
        // projection has the closed form c* = max(0, 1'Ga / 1'G1).
        let centers: Vec<f64> = (0..12).map(|k| 0.25 + 0.22 * k as f64).collect();
        let coeffs: Vec<f64> =
            (0..12).map(|k| if k % 3 == 1 { -0.4 } else { 0.3 }).collect();
        let e = poly_expansion(&centers, &coeffs, 2);
        let gram = e.gramian();
        let a = DVector::from_column_slice(&coeffs);
        let ones = DVector::from_element(12, 1.0);
        let c_star = ((&gram * &a).dot(&ones) / (&gram * &ones).dot(&ones)).max(0.0);
        assert!(c_star > 0.0);

        let p = project_poly_sdp(&e).unwrap();
        assert!(p.converged, "solver ended with LMI residual {}", p.kkt_residual);
        for got in &p.f.coeffs {
            assert!((got - c_star).abs() <= 1e-6 * (1.0 + c_star.abs()), "coeff {got} vs ray {c_star}");
        }
        let diff = DVector::from_column_slice(&p.f.coeffs) - &a;
        let obj = (&gram * &diff).dot(&diff);
        let ray = c_star * &ones - &a;
        let obj_star = (&gram * &ray).dot(&ray);
        assert!((obj - obj_star).abs() <= 1e-8 * (1.0 + obj_star), "objective {obj} vs {obj_star}");
    }

    #[test]
    fn sdp_rejects_non_polynomial() {
        let e = gaussian_expansion(&[0.5], &[-1.0]);
        assert!(project_poly_sdp(&e).is_err());
    }

    #[test]
    fn empty_expansion_passes_through() {
        let e = KernelExpansion::new(Kernel::Gaussian { bandwidth: 0.2 }, 1, 8, 3.0);
        let p = project_grid_clip(&e, &uniform_grid(3.0, 5)).unwrap();
        assert_eq!(p.f.n_centers(), 0);
        assert!(p.converged);
    }
}
