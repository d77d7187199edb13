//! One-dimensional quadrature rules used by the correction terms, the initial
//! condition builder and the diagnostics.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [a, b].
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = (b - a) / 2.0;
    let mid = (a + b) / 2.0;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, t);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = mid - half * t;
        x[n - 1 - i] = mid + half * t;
        w[i] = half * wi;
        w[n - 1 - i] = half * wi;
    }
    if n % 2 == 1 {
        x[n / 2] = mid;
    }
    (x, w)
}

fn legendre(n: usize, t: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = t;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

const GK_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for j in 0..7 {
        let dx = h * GK_X[j];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[j] * s;
        if j % 2 == 1 {
            g += GK_WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) integration of `f` over [a, b].
///
/// Bisects until the local error estimate is below `tol` scaled by the
/// interval length, with a hard recursion limit.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (v, e) = gk15(&f, a, b);
    adapt(&f, a, b, v, e, tol, 0)
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, v: f64, e: f64, tol: f64, depth: u32) -> f64 {
    if e <= tol.max(1e-15 * v.abs()) || depth >= 48 || (b - a).abs() < 1e-14 * (a.abs() + b.abs()) {
        return v;
    }
    let m = 0.5 * (a + b);
    let (v1, e1) = gk15(f, a, m);
    let (v2, e2) = gk15(f, m, b);
    adapt(f, a, m, v1, e1, 0.5 * tol, depth + 1) + adapt(f, m, b, v2, e2, 0.5 * tol, depth + 1)
}

/// Adaptive integration with user supplied break points (sorted, inside [a, b]).
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(f: F, pts: &[f64], tol: f64) -> f64 {
    let n = pts.len().saturating_sub(1).max(1) as f64;
    pts.windows(2).map(|w| integrate(&f, w[0], w[1], tol / n)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(6, -1.0, 2.0);
        // Degree 11 is the highest degree a 6-point rule integrates exactly.
        let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(11)).sum();
        let exact = (2f64.powi(12) - 1.0) / 12.0;
        assert!((approx - exact).abs() < 1e-10 * exact);
        let total: f64 = w.iter().sum();
        assert!((total - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_nodes_ascend() {
        let (x, _) = gauss_legendre(9, 0.0, 1.0);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(x[4], 0.5);
    }

    #[test]
    fn adaptive_handles_log_singularity() {
        let v = integrate(|x: f64| x.ln(), 0.0, 1.0, 1e-13);
        assert!((v + 1.0).abs() < 1e-11, "{v}");
    }

    #[test]
    fn adaptive_with_breaks_matches_closed_form() {
        let v = integrate_with_breaks(|x: f64| x.abs().sqrt(), &[-1.0, 0.0, 4.0], 1e-13);
        assert!((v - (2.0 / 3.0) * (1.0 + 8.0)).abs() < 1e-11);
    }
}
