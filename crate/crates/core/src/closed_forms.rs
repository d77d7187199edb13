//! Closed-form Newtonian potentials of the unit square, its epsilon-boxes, the
//! unit disc and axis-aligned boxes in three dimensions.
//!
//! The planar kernel is `K(x) = log(|x|) / (2 pi)`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quad;

/// Neighbourhood size used for the near-singular removal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsNeighborhood {
    eps: f64,
}

impl EpsNeighborhood {
    /// Box half-width for the unit square, `0 < eps <= 1/2`.
    pub fn square(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 0.5) {
            return Err(Error::invalid(format!("square neighbourhood eps must lie in (0, 1/2], got {eps}")));
        }
        Ok(Self { eps })
    }

    /// Disc radius for the unit disc, `0 < eps < 1`.
    pub fn disc(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("disc neighbourhood eps must lie in (0, 1), got {eps}")));
        }
        Ok(Self { eps })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// Potential of the rectangle `[0, x1] x [0, x2]` at the origin, valid for any
/// non-negative extents. Vanishes when either extent is zero.
pub fn i_quadrant(x1: f64, x2: f64) -> f64 {
    if x1 == 0.0 || x2 == 0.0 {
        return 0.0;
    }
    let r2 = x1 * x1 + x2 * x2;
    let diff = (x2 - x1) * (x2 + x1);
    x1 * x2 / (4.0 * PI) * (r2.ln() - 3.0) + r2 / 16.0 - diff / (8.0 * PI) * diff.atan2(2.0 * x1 * x2)
}

fn check_unit_square(x: [f64; 2]) -> Result<()> {
    if x.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::domain(format!("point {x:?} is outside the unit square")))
    }
}

/// `I(x)`: potential of `[0, x1] x [0, x2]` evaluated at the origin, `x` in the unit square.
pub fn i_square(x: [f64; 2]) -> Result<f64> {
    check_unit_square(x)?;
    Ok(i_quadrant(x[0], x[1]))
}

/// `J(x) = (1/2pi) int over the unit square of log|x - y| dy`.
pub fn j_square(x: [f64; 2]) -> Result<f64> {
    check_unit_square(x)?;
    let [x1, x2] = x;
    let on_edge = |v: f64| v == 0.0 || v == 1.0;
    if on_edge(x1) {
        return Ok(i_quadrant(1.0, x2) + i_quadrant(1.0, 1.0 - x2));
    }
    if on_edge(x2) {
        return Ok(i_quadrant(1.0, x1) + i_quadrant(1.0, 1.0 - x1));
    }
    Ok(i_quadrant(x1, x2) + i_quadrant(1.0 - x1, x2) + i_quadrant(x1, 1.0 - x2) + i_quadrant(1.0 - x1, 1.0 - x2))
}

/// Potential of the clipped box `[0,1]^2 ∩ B_inf(x; eps)` at `x`.
pub fn g_eps_square(x: [f64; 2], nb: EpsNeighborhood) -> Result<f64> {
    check_unit_square(x)?;
    if nb.eps > 0.5 {
        return Err(Error::invalid(format!("square neighbourhood eps must be at most 1/2, got {}", nb.eps)));
    }
    let e = nb.eps;
    let [x1, x2] = x;
    let (l, r) = (x1.min(e), (1.0 - x1).min(e));
    let (b, t) = (x2.min(e), (1.0 - x2).min(e));
    Ok(i_quadrant(l, b) + i_quadrant(r, b) + i_quadrant(l, t) + i_quadrant(r, t))
}

/// Value of [`g_eps_square`] when the whole box fits in the square.
pub fn g_eps_interior(eps: f64) -> f64 {
    eps * eps / (2.0 * PI) * (4.0 * eps.ln() + 4f64.ln() - 6.0 + PI)
}

/// Potential at the origin of an axis-aligned box given by its extents to the
/// left, right, below and above. Each extent must be non-negative.
pub fn box_potential(left: f64, right: f64, below: f64, above: f64) -> f64 {
    i_quadrant(left, below) + i_quadrant(right, below) + i_quadrant(left, above) + i_quadrant(right, above)
}

// Coefficients B_n / (n+1)! of the Bernoulli series for Li2 in u = -ln(1-z),
// with the odd terms beyond n = 1 vanishing.
const LI2_BERNOULLI: [f64; 21] = [
    1.0,
    -0.25,
    0.027777777777777777778,
    -0.00027777777777777777778,
    4.7241118669690098262e-6,
    -9.1857730746619635509e-8,
    1.8978869988970999072e-9,
    -4.0647616451442255268e-11,
    8.9216910204564525552e-13,
    -1.9939295860721075687e-14,
    4.5189800296199181917e-16,
    -1.0356517612181247014e-17,
    2.3952186210261867457e-19,
    -5.5817858743250093363e-21,
    1.3091507554183212858e-22,
    -3.0874198024267402932e-24,
    7.3159756527022034204e-26,
    -1.740845657234000741e-27,
    4.1576356446138997196e-29,
    -9.9621484882846221032e-31,
    2.3940344248961653005e-32,
];

/// Complex dilogarithm on the principal branch (cut along `[1, inf)`).
///
/// Real arguments above one return the value with imaginary part `-pi ln z`.
pub fn dilog(z: Complex64) -> Complex64 {
    let pi2_6 = PI * PI / 6.0;
    if z == Complex64::new(0.0, 0.0) {
        return z;
    }
    if z == Complex64::new(1.0, 0.0) {
        return Complex64::new(pi2_6, 0.0);
    }
    if z.norm() > 1.0 {
        // Inversion; for real z > 1 pick the side that gives Im = -pi ln z.
        let mz = if z.im == 0.0 { Complex64::new(-z.re, 0.0) } else { -z };
        let l = mz.ln();
        return -pi2_6 - 0.5 * l * l - dilog(z.inv());
    }
    if z.norm() <= 0.5 {
        return dilog_series(z);
    }
    if z.re > 0.5 {
        let w = Complex64::new(1.0, 0.0) - z;
        return pi2_6 - z.ln() * w.ln() - dilog(w);
    }
    let u = -(Complex64::new(1.0, 0.0) - z).ln();
    let u2 = u * u;
    let mut acc = u + LI2_BERNOULLI[1] * u2;
    let mut pow = u;
    for c in LI2_BERNOULLI.iter().skip(2) {
        pow *= u2;
        acc += c * pow;
    }
    acc
}

fn dilog_series(z: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut pow = z;
    for k in 1..200 {
        let term = pow / (k * k) as f64;
        acc += term;
        if term.norm() < 1e-18 * acc.norm() {
            break;
        }
        pow *= z;
    }
    acc
}

/// `J` for the unit disc: `(|x|^2 - 1) / 4`.
pub fn j_disc(x: [f64; 2]) -> Result<f64> {
    let r2 = x[0] * x[0] + x[1] * x[1];
    if !r2.is_finite() || r2.sqrt() > 1.0 + 1e-14 {
        return Err(Error::domain(format!("point {x:?} is outside the unit disc")));
    }
    Ok(0.25 * (r2 - 1.0))
}

/// Potential at `x` of the lens `B(0;1) ∩ B(x; eps)`.
pub fn g_eps_disc(x: [f64; 2], nb: EpsNeighborhood) -> Result<f64> {
    let eps = nb.eps;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("disc neighbourhood eps must lie in (0, 1), got {eps}")));
    }
    let a = x[0].hypot(x[1]);
    if !a.is_finite() || a > 1.0 + 1e-14 {
        return Err(Error::domain(format!("point {x:?} is outside the unit disc")));
    }
    let a = a.min(1.0);
    let e2 = eps * eps;
    let inner = e2 * (e2.ln() - 1.0);
    if a <= 1.0 - eps {
        return Ok(0.25 * inner);
    }
    let theta = ((1.0 - a * a - e2) / (2.0 * a * eps)).clamp(-1.0, 1.0).acos();
    let l = ((e2 - 1.0 - a * a) / (2.0 * a)).clamp(-1.0, 1.0);
    let phi = 0.5 * l.acos();
    let (s2, c2) = (2.0 * phi).sin_cos();
    let li = dilog(Complex64::from_polar(-a, 0.0) * Complex64::from_polar(1.0, 2.0 * phi)).im;
    let one_m_a2 = 1.0 - a * a;
    let h = 2.0 / PI * (li + one_m_a2 * (phi - 0.5 * (a * s2 / (1.0 + a * c2)).atan()) + a * (1.0 - eps.ln()) * s2)
        - one_m_a2;
    Ok(0.25 * ((PI - theta) / PI * inner + h))
}

/// Newtonian potential `-(1/4pi) int_box 1/|x - y| dy` of an axis-aligned box
/// in three dimensions, evaluated at `x` (inside or outside).
pub fn newton3d_box_potential(x: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let mut acc = crate::par::CompensatedSum::new();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let u = [lo[0], hi[0]][i] - x[0];
                let v = [lo[1], hi[1]][j] - x[1];
                let w = [lo[2], hi[2]][k] - x[2];
                let sign = if (i + j + k) % 2 == 1 { 1.0 } else { -1.0 };
                acc.add(sign * prism_antiderivative(u, v, w));
            }
        }
    }
    -acc.value() / (4.0 * PI)
}

/// `ln(c + r)` with `r = |(a, b, c)|`, stable for negative `c`.
fn ln_c_plus_r(a: f64, b: f64, c: f64, r: f64) -> f64 {
    if c >= 0.0 {
        (c + r).ln()
    } else {
        ((a * a + b * b) / (r - c)).ln()
    }
}

/// Antiderivative `F(u, v, w)` with mixed third derivative `1/r`.
fn prism_antiderivative(u: f64, v: f64, w: f64) -> f64 {
    let r = (u * u + v * v + w * w).sqrt();
    if r == 0.0 {
        return 0.0;
    }
    let log_term = |a: f64, b: f64, c: f64| {
        if a == 0.0 || b == 0.0 {
            0.0
        } else {
            a * b * ln_c_plus_r(a, b, c, r)
        }
    };
    let atan_term = |a: f64, b: f64, c: f64| {
        if a == 0.0 {
            0.0
        } else {
            0.5 * a * a * (b * c / (a * r)).atan()
        }
    };
    log_term(v, w, u) + log_term(u, w, v) + log_term(u, v, w) - atan_term(u, v, w) - atan_term(v, u, w)
        - atan_term(w, u, v)
}

/// `int_{B(x, sigma) ∩ box} (K - K_sigma) dy` for the three-dimensional kernel
/// `K = -1/(4 pi r)` regularized as `K_sigma = -1/(4 pi max(sigma, r))`.
///
/// Returns the non-positive amount by which the regularized potential exceeds
/// the singular one. Exact when each face is at distance zero or at least
/// `sigma`; otherwise computed by adaptive angular quadrature.
pub fn ball_regularization_gap(x: [f64; 3], lo: [f64; 3], hi: [f64; 3], sigma: f64) -> f64 {
    let dists: Vec<f64> = (0..3).flat_map(|k| [x[k] - lo[k], hi[k] - x[k]]).collect();
    let full = -sigma * sigma / 6.0;
    if dists.iter().all(|&d| d == 0.0 || d >= sigma) {
        let opposite_pairs_ok = (0..3).all(|k| !(dists[2 * k] == 0.0 && dists[2 * k + 1] == 0.0));
        if opposite_pairs_ok {
            let touching = dists.iter().filter(|&&d| d == 0.0).count() as i32;
            return full * 0.5f64.powi(touching);
        }
    }
    // Radial primitive of (1/(4 pi r) - 1/(4 pi sigma)) r^2 up to s.
    let g = |s: f64| s * s / (8.0 * PI) - s * s * s / (12.0 * PI * sigma);
    let reach = |ct: f64, ph: f64| {
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let dir = [st * ph.cos(), st * ph.sin(), ct];
        let mut t = sigma;
        for k in 0..3 {
            if dir[k] > 0.0 {
                t = t.min(dists[2 * k + 1] / dir[k]);
            } else if dir[k] < 0.0 {
                t = t.min(dists[2 * k] / -dir[k]);
            }
        }
        t.max(0.0)
    };
    let total = quad::integrate(
        |ct| quad::integrate(|ph| g(reach(ct, ph)), 0.0, 2.0 * PI, 1e-14 * sigma * sigma),
        -1.0,
        1.0,
        1e-13 * sigma * sigma,
    );
    -total
}

/// Convolution of the regularized three-dimensional kernel with the indicator
/// of a box, at `x`.
pub fn newton3d_regularized_box_potential(x: [f64; 3], lo: [f64; 3], hi: [f64; 3], sigma: f64) -> f64 {
    newton3d_box_potential(x, lo, hi) - ball_regularization_gap(x, lo, hi, sigma)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_values() {
        assert!((i_square([0.5, 0.5]).unwrap() + 0.0422228286690014755).abs() < 1e-15);
        assert!((i_square([0.3, 0.8]).unwrap() + 0.0363537774525894100).abs() < 1e-15);
        assert!((j_square([0.5, 0.5]).unwrap() + 0.168891314676005902).abs() < 1e-15);
        let nb = EpsNeighborhood::square(1e-2).unwrap();
        let g = g_eps_square([0.5, 0.5], nb).unwrap();
        assert!((g + 3.16603645391643138e-4).abs() < 1e-18);
    }

    #[test]
    fn atan2_branch_convention() {
        assert_eq!(0f64.atan2(1.0), 0.0);
        assert!((1f64.atan2(0.0) - PI / 2.0).abs() < 1e-16);
        assert!(((-1f64).atan2(0.0) + PI / 2.0).abs() < 1e-16);
    }

    #[test]
    fn neighbourhood_bounds() {
        assert!(EpsNeighborhood::square(0.6).is_err());
        assert!(EpsNeighborhood::square(0.0).is_err());
        assert!(EpsNeighborhood::disc(0.9).is_ok());
        assert!(i_square([1.2, 0.1]).is_err());
    }

    #[test]
    fn dilog_reference_values() {
        let cases = [
            ((0.3, 0.4), (0.266596866742740434, 0.461362891819108973)),
            ((3.0, 0.0), (2.32018042331309839641, -3.45139229522320266143)),
            ((2.0, 0.5), (1.75438526088378243711, 2.25385187609028841738)),
            ((-5.0, 1.0), (-2.76828260803157488075, 0.356740781831457344391)),
            ((0.9, 0.3), (1.10498635152421572455, 0.617053028084861983849)),
            ((0.0, -0.8), (-0.139808008554290391831, -0.753106090924198882078)),
            ((0.5, 0.0), (0.582240526465012505903, 0.0)),
        ];
        for ((zr, zi), (er, ei)) in cases {
            let v = dilog(Complex64::new(zr, zi));
            assert!((v.re - er).abs() < 2e-15 && (v.im - ei).abs() < 2e-15, "Li2({zr}+{zi}i) = {v}");
        }
    }

    #[test]
    fn disc_reference_values() {
        let cases = [
            (0.0, 0.1, -0.0140129254649702285),
            (0.97, 0.05, -0.00379471020124385683),
            (0.99, 0.3, -0.0382008959819852640),
            (0.96, 0.05, -0.00416482629411418925),
            (0.999, 0.01, -1.44944085528536350e-4),
            (0.8, 0.5, -0.113065062373774521),
            (0.9, 0.95, -0.135252457825699375),
            (0.5, 0.9, -0.214316915106252452),
        ];
        for (a, eps, expected) in cases {
            let v = g_eps_disc([a, 0.0], EpsNeighborhood::disc(eps).unwrap()).unwrap();
            assert!((v - expected).abs() < 1e-13, "a={a} eps={eps}: {v} vs {expected}");
        }
    }

    #[test]
    fn box_potential_reference_values() {
        let centre = newton3d_box_potential([0.0; 3], [-0.5; 3], [0.5; 3]);
        assert!((centre + 2.38007736397955350664 / (4.0 * PI)).abs() < 1e-15);
        let off = newton3d_box_potential([0.3, -0.2, 0.9], [-1.0; 3], [1.0; 3]);
        assert!((off + 7.46250390141517266907 / (4.0 * PI)).abs() < 1e-14);
        let corner = newton3d_box_potential([1.0; 3], [-1.0; 3], [1.0; 3]);
        assert!((corner + 4.76015472795910701329 / (4.0 * PI)).abs() < 1e-14);
    }

    #[test]
    fn ball_gap_cases() {
        let s = 0.01;
        let inside = ball_regularization_gap([0.0; 3], [-1.0; 3], [1.0; 3], s);
        assert!((inside + s * s / 6.0).abs() < 1e-18);
        let face = ball_regularization_gap([1.0, 0.0, 0.0], [-1.0; 3], [1.0; 3], s);
        assert!((face + s * s / 12.0).abs() < 1e-18);
        // A face at distance sigma/2 falls back to quadrature; compare with the
        // spherical-cap closed form.
        let d = s / 2.0;
        let numeric = ball_regularization_gap([1.0 - d, 0.0, 0.0], [-1.0; 3], [1.0; 3], s);
        let cap = cap_gap(d, s);
        assert!((numeric - cap).abs() < 1e-12 * s * s, "{numeric} vs {cap}");
    }

    /// Gap for a single face at distance d < sigma, by direct 1D integration in
    /// the polar angle.
    fn cap_gap(d: f64, s: f64) -> f64 {
        let g = |t: f64| t * t / (8.0 * PI) - t * t * t / (12.0 * PI * s);
        let c0 = d / s;
        let full = 2.0 * PI * quad::integrate(|ct: f64| if ct > c0 { g(d / ct) } else { g(s) }, -1.0, 1.0, 1e-15);
        let split = 2.0 * PI
            * (quad::integrate(|_| g(s), -1.0, c0, 1e-15) + quad::integrate(|ct: f64| g(d / ct), c0, 1.0, 1e-15));
        assert!((full - split).abs() < 1e-10 * s * s);
        -split
    }
}
