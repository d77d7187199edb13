//! Initial conditions used in the phase-separation experiments.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::par::{map_indices, CompensatedSum, Execution};
use crate::quad::gauss_legendre;
use crate::spectral::Grid2D;

/// `sin(2 pi x1) cos(2 pi x2)`, which has zero mean.
pub fn wave(grid: &Grid2D) -> Vec<f64> {
    grid.points
        .iter()
        .map(|p| (2.0 * PI * p[0]).sin() * (2.0 * PI * p[1]).cos())
        .collect()
}

/// A constant field.
pub fn constant(grid: &Grid2D, c: f64) -> Vec<f64> {
    vec![c; grid.len()]
}

/// `amplitude cos(pi x1) cos(pi x2)`, the slowest two-dimensional Neumann mode.
pub fn neumann_mode(grid: &Grid2D, amplitude: f64) -> Vec<f64> {
    grid.points
        .iter()
        .map(|p| amplitude * (PI * p[0]).cos() * (PI * p[1]).cos())
        .collect()
}

const PATCH: (f64, f64) = (0.14, 0.86);

fn patch_profile(y: [f64; 2]) -> f64 {
    0.5 * (3.0 * PI * y[0]).sin() * (3.0 * PI * y[1]).cos() + 0.25
}

/// `3 H_a * q` where `q = (1/2 sin 3 pi x1 cos 3 pi x2 + 1/4)` on `[0.14, 0.86]^2`
/// and zero elsewhere, with `H_a` the unnormalized mollifier of radius `a`.
///
/// Each nodal value is a tensor Gauss-Legendre quadrature over the part of the
/// patch inside the mollifier support, so the result is smooth and compactly
/// supported in the square.
pub fn compact(grid: &Grid2D, a: f64, exec: Execution) -> Result<Vec<f64>> {
    let h = Kernel::mollifier(a, 1.0)?;
    if a >= PATCH.0 {
        return Err(Error::invalid(format!("mollifier radius {a} pushes the support outside the square")));
    }
    const NODES: usize = 64;
    Ok(map_indices(exec, grid.len(), |i| {
        let x = grid.points[i];
        let lo = [(x[0] - a).max(PATCH.0), (x[1] - a).max(PATCH.0)];
        let hi = [(x[0] + a).min(PATCH.1), (x[1] + a).min(PATCH.1)];
        if lo[0] >= hi[0] || lo[1] >= hi[1] {
            return 0.0;
        }
        let (g1, w1) = gauss_legendre(NODES, lo[0], hi[0]);
        let (g2, w2) = gauss_legendre(NODES, lo[1], hi[1]);
        let mut acc = CompensatedSum::new();
        for (y2, v2) in g2.iter().zip(&w2) {
            for (y1, v1) in g1.iter().zip(&w1) {
                let y = [*y1, *y2];
                acc.add(v1 * v2 * h.planar([x[0] - y[0], x[1] - y[1]]) * patch_profile(y));
            }
        }
        3.0 * acc.value()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::unit_square_grid;

    #[test]
    fn wave_has_zero_mean() {
        let g = unit_square_grid(20).unwrap();
        assert!(g.integrate(&wave(&g)).abs() < 1e-12);
    }

    #[test]
    fn compact_mean_near_point_eighteen() {
        let g = unit_square_grid(20).unwrap();
        let rho = compact(&g, 0.1, Execution::Sequential).unwrap();
        let mean = g.integrate(&rho);
        assert!((mean - 0.18).abs() <= 0.02, "{mean}");
        assert!(rho.iter().all(|v| v.abs() < 1.0));
        let boundary_max = g.boundary.iter().map(|b| rho[b.index].abs()).fold(0.0, f64::max);
        assert_eq!(boundary_max, 0.0);
    }
}
