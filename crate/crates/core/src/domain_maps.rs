//! Pullback of convolution operators from the unit square to mapped domains.
//!
//! For a diffeomorphism `Psi` of the unit square onto `Theta`,
//! `(K * rho)(Psi(x)) = int_[0,1]^2 K(Psi(x) - Psi(y)) |det J_Psi(y)| rho(Psi(y)) dy`,
//! so the mapped operator is the square operator for the kernel
//! `K(Psi(x) - Psi(.))` followed by a diagonal scaling with the Jacobian.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::closed_forms::box_potential;
use crate::error::{Error, Result};
use crate::kernels::{record_kernel_evaluations, Kernel, KernelKind};
use crate::multishape::{assemble_with_sampler, local_points, ConvOperator, OperatorMeta, PartitionMode};
use crate::par::{try_map_indices, CompensatedSum, Execution};
use crate::quad::gauss_legendre;
use crate::spectral::{cheb_grid, Grid1D, Grid2D};

/// A smooth map of the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainMap {
    /// Affine map onto `[a1, b1] x [a2, b2]`.
    Rectangle { a1: f64, b1: f64, a2: f64, b2: f64 },
    /// `((2x1-1)(1+4k x2(1-x2)), (2x2-1)(1+4k x1(1-x1)))`, a square with bulging sides.
    Bulged { k: f64 },
}

impl DomainMap {
    pub fn rectangle(a1: f64, b1: f64, a2: f64, b2: f64) -> Result<Self> {
        let m = DomainMap::Rectangle { a1, b1, a2, b2 };
        m.validate()?;
        Ok(m)
    }

    pub fn bulged(k: f64) -> Result<Self> {
        let m = DomainMap::Bulged { k };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DomainMap::Rectangle { a1, b1, a2, b2 } => {
                if [a1, b1, a2, b2].iter().all(|v| v.is_finite()) && a1 < b1 && a2 < b2 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("rectangle [{a1}, {b1}] x [{a2}, {b2}] is empty")))
                }
            }
            DomainMap::Bulged { k } => {
                if k > -0.5 && k < 0.5 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("bulging parameter must lie in (-1/2, 1/2), got {k}")))
                }
            }
        }
    }

    /// `Psi(x)`.
    pub fn forward(&self, x: [f64; 2]) -> [f64; 2] {
        match *self {
            DomainMap::Rectangle { a1, b1, a2, b2 } => [(b1 - a1) * x[0] + a1, (b2 - a2) * x[1] + a2],
            DomainMap::Bulged { k } => [
                (2.0 * x[0] - 1.0) * (1.0 + 4.0 * k * x[1] * (1.0 - x[1])),
                (2.0 * x[1] - 1.0) * (1.0 + 4.0 * k * x[0] * (1.0 - x[0])),
            ],
        }
    }

    /// Jacobian matrix `[[d1 Psi1, d2 Psi1], [d1 Psi2, d2 Psi2]]`.
    pub fn jacobian(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        match *self {
            DomainMap::Rectangle { a1, b1, a2, b2 } => [[b1 - a1, 0.0], [0.0, b2 - a2]],
            DomainMap::Bulged { k } => {
                let (x1, x2) = (x[0], x[1]);
                [
                    [2.0 * (1.0 + 4.0 * k * x2 * (1.0 - x2)), (2.0 * x1 - 1.0) * 4.0 * k * (1.0 - 2.0 * x2)],
                    [(2.0 * x2 - 1.0) * 4.0 * k * (1.0 - 2.0 * x1), 2.0 * (1.0 + 4.0 * k * x1 * (1.0 - x1))],
                ]
            }
        }
    }

    /// `|det J_Psi(x)|`.
    pub fn jac_det(&self, x: [f64; 2]) -> f64 {
        match *self {
            DomainMap::Rectangle { a1, b1, a2, b2 } => ((b1 - a1) * (b2 - a2)).abs(),
            _ => {
                let j = self.jacobian(x);
                (j[0][0] * j[1][1] - j[0][1] * j[1][0]).abs()
            }
        }
    }

    fn is_identity(&self) -> bool {
        matches!(*self, DomainMap::Rectangle { a1, b1, a2, b2 } if a1 == 0.0 && b1 == 1.0 && a2 == 0.0 && b2 == 1.0)
    }
}

/// Convolution operator on `Psi([0,1]^2)` acting on samples at the mapped nodes.
///
/// Uses the maximal partition. The epsilon box is removed in reference
/// coordinates and its contribution restored on the diagonal: in closed form
/// for the rectangle map and by polar quadrature for the bulged map.
pub fn pullback_operator(
    map: &DomainMap,
    grid: &Grid2D,
    kernel: &Kernel,
    eps: f64,
    alpha: f64,
    exec: Execution,
) -> Result<ConvOperator> {
    map.validate()?;
    if kernel.dim() != 2 {
        return Err(Error::invalid("pullback needs a planar kernel"));
    }
    let mapped: Vec<[f64; 2]> = grid.points.iter().map(|&x| map.forward(x)).collect();
    let mut matrix = assemble_with_sampler(grid, eps, alpha, PartitionMode::Maximal, exec, |i, y| {
        let (p, q) = (mapped[i], map.forward(y));
        kernel.planar([p[0] - q[0], p[1] - q[1]])
    })?;
    let jac: Vec<f64> = grid.points.iter().map(|&x| map.jac_det(x)).collect();
    for (j, mut col) in matrix.column_iter_mut().enumerate() {
        col *= jac[j];
    }
    let reference = cheb_grid(local_points(alpha, grid.nx().max(grid.ny()))?, 0.0, 1.0)?;
    let diag = try_map_indices(exec, grid.len(), |i| {
        Ok::<f64, Error>(kernel.eta * mapped_box_integral(&kernel.kind, map, grid.points[i], eps, &reference)?)
    })?;
    for (i, d) in diag.into_iter().enumerate() {
        matrix[(i, i)] += d;
    }
    let m = grid.len();
    Ok(ConvOperator {
        matrix,
        meta: OperatorMeta {
            n: grid.nx(),
            m,
            eps,
            alpha,
            mode: PartitionMode::Maximal.into(),
            kernel: kernel.id(),
            eta: kernel.eta,
            corrected: true,
            map: if map.is_identity() { None } else { Some(*map) },
        },
    })
}

fn clipped_box(x: [f64; 2], eps: f64) -> [f64; 4] {
    let lo = |v: f64| if v <= eps { 0.0 } else { v - eps };
    let hi = |v: f64| if v >= 1.0 - eps { 1.0 } else { v + eps };
    [lo(x[0]), hi(x[0]), lo(x[1]), hi(x[1])]
}

/// `int_box K(Psi(x) - Psi(y)) |det J_Psi(y)| dy` over the clipped epsilon box.
fn mapped_box_integral(kind: &KernelKind, map: &DomainMap, x: [f64; 2], eps: f64, reference: &Grid1D) -> Result<f64> {
    let [a, b, c, d] = clipped_box(x, eps);
    match (kind, map) {
        (KernelKind::Newtonian2d, DomainMap::Rectangle { a1, b1, a2, b2 }) => {
            let (s1, s2) = (b1 - a1, b2 - a2);
            let (l, r) = (x[0].min(eps), (1.0 - x[0]).min(eps));
            let (lo, hi) = (x[1].min(eps), (1.0 - x[1]).min(eps));
            Ok(box_potential(s1 * l, s1 * r, s2 * lo, s2 * hi))
        }
        (KernelKind::Newtonian2d, _) => Ok(polar_log_integral(map, x, [a, b, c, d])),
        (KernelKind::Composite { parts }, _) => {
            let mut acc = CompensatedSum::new();
            for (w, k) in parts {
                acc.add(w * mapped_box_integral(k, map, x, eps, reference)?);
            }
            Ok(acc.value())
        }
        (KernelKind::Mollifier { .. }, _) => {
            let p = map.forward(x);
            let mut acc = CompensatedSum::new();
            for (v, wv) in reference.points.iter().zip(&reference.weights) {
                for (u, wu) in reference.points.iter().zip(&reference.weights) {
                    let y = [a + (b - a) * u, c + (d - c) * v];
                    let q = map.forward(y);
                    acc.add(wu * wv * map.jac_det(y) * kind.planar([p[0] - q[0], p[1] - q[1]]));
                }
            }
            record_kernel_evaluations((reference.n * reference.n) as u64);
            Ok(acc.value() * (b - a) * (d - c))
        }
        _ => Err(Error::invalid("mapped box correction needs a planar kernel")),
    }
}

const POLAR_NODES: usize = 48;

/// `(1/2pi) int_box log|Psi(x) - Psi(y)| |det J_Psi(y)| dy` by splitting the box
/// into triangles with apex `x` and integrating along rays from `x`.
///
/// On the ray `y = x + s (P - x)` the logarithm splits into `log s` plus a
/// smooth remainder. The substitution `s = t^2` makes the `s log s` factor
/// smooth enough for Gauss-Legendre.
pub fn polar_log_integral(map: &DomainMap, x: [f64; 2], bx: [f64; 4]) -> f64 {
    let [a, b, c, d] = bx;
    let corners = [[a, c], [b, c], [b, d], [a, d]];
    let (gt, wt) = gauss_legendre(POLAR_NODES, 0.0, 1.0);
    let px = map.forward(x);
    let jx = map.jacobian(x);
    let mut acc = CompensatedSum::new();
    for k in 0..4 {
        let (c0, c1) = (corners[k], corners[(k + 1) % 4]);
        let edge = [c1[0] - c0[0], c1[1] - c0[1]];
        let h = ((c0[0] - x[0]) * edge[1] - (c0[1] - x[1]) * edge[0]).abs();
        if h == 0.0 {
            continue;
        }
        for (&t, &w_t) in gt.iter().zip(&wt) {
            let p = [c0[0] + t * edge[0], c0[1] + t * edge[1]];
            let dir = [p[0] - x[0], p[1] - x[1]];
            for (&tau, &w_tau) in gt.iter().zip(&wt) {
                let s = tau * tau;
                let y = [x[0] + s * dir[0], x[1] + s * dir[1]];
                let q = map.forward(y);
                // (Psi(y) - Psi(x)) / s, with the linearization at tiny s.
                let diff = if s > 1e-8 {
                    [(q[0] - px[0]) / s, (q[1] - px[1]) / s]
                } else {
                    [
                        jx[0][0] * dir[0] + jx[0][1] * dir[1],
                        jx[1][0] * dir[0] + jx[1][1] * dir[1],
                    ]
                };
                let log_r = s.ln() + 0.5 * (diff[0] * diff[0] + diff[1] * diff[1]).ln();
                // ds = 2 tau dtau; area element s h ds dt.
                acc.add(w_t * w_tau * 2.0 * tau * s * h * map.jac_det(y) * log_r);
            }
        }
    }
    acc.value() / (2.0 * PI)
}
