//! Chebyshev-Gauss-Lobatto grids, differentiation matrices, Clenshaw-Curtis
//! weights and barycentric interpolation.
//!
//! Two-dimensional nodes are stored row-major with y as the outer index:
//! node `iy * nx + ix` sits at `(x[ix], y[iy])`.

use nalgebra::DMatrix;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One-dimensional Chebyshev-Gauss-Lobatto grid on `[a, b]`, nodes ascending.
#[derive(Clone, Debug)]
pub struct Grid1D {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub diff: DMatrix<f64>,
    bary: Vec<f64>,
}

/// Build the `n`-point Chebyshev-Gauss-Lobatto grid on `[a, b]`.
pub fn cheb_grid(n: usize, a: f64, b: f64) -> Result<Grid1D> {
    if n < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 points, got {n}")));
    }
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::invalid(format!("grid interval [{a}, {b}] is empty or not finite")));
    }
    let points = cgl_points(n, a, b);
    let weights = clenshaw_curtis(n, a, b);
    let bary = cgl_bary_weights(n);
    let diff = diff_matrix(n, a, b, &bary);
    Ok(Grid1D {
        n,
        a,
        b,
        points,
        weights,
        diff,
        bary,
    })
}

fn cgl_points(n: usize, a: f64, b: f64) -> Vec<f64> {
    let m = (n - 1) as f64;
    let len = b - a;
    (0..n)
        .map(|j| {
            if 2 * j == n - 1 {
                0.5 * (a + b)
            } else if 2 * j < n - 1 {
                let s = (j as f64 * PI / (2.0 * m)).sin();
                a + len * s * s
            } else {
                let s = ((n - 1 - j) as f64 * PI / (2.0 * m)).sin();
                b - len * s * s
            }
        })
        .collect()
}

/// Clenshaw-Curtis weights for the Lobatto nodes, scaled to `[a, b]`.
fn clenshaw_curtis(n: usize, a: f64, b: f64) -> Vec<f64> {
    let m = n - 1;
    let mf = m as f64;
    let scale = (b - a) / 2.0;
    let mut w = vec![0.0; n];
    if m == 1 {
        return vec![scale, scale];
    }
    let end = if m % 2 == 0 { 1.0 / (mf * mf - 1.0) } else { 1.0 / (mf * mf) };
    w[0] = end;
    w[m] = end;
    for (j, wj) in w.iter_mut().enumerate().take(m).skip(1) {
        let theta = j as f64 * PI / mf;
        let mut v = 1.0;
        if m % 2 == 0 {
            for k in 1..m / 2 {
                let kf = k as f64;
                v -= 2.0 * (2.0 * kf * theta).cos() / (4.0 * kf * kf - 1.0);
            }
            v -= (mf * theta).cos() / (mf * mf - 1.0);
        } else {
            for k in 1..=(m - 1) / 2 {
                let kf = k as f64;
                v -= 2.0 * (2.0 * kf * theta).cos() / (4.0 * kf * kf - 1.0);
            }
        }
        *wj = 2.0 * v / mf;
    }
    w.iter().map(|x| x * scale).collect()
}

fn cgl_bary_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == n - 1 {
                0.5 * s
            } else {
                s
            }
        })
        .collect()
}

/// Node difference `x_i - x_j` through the product-of-sines identity, which
/// avoids cancellation between clustered nodes near the ends.
fn node_gap(n: usize, a: f64, b: f64, i: usize, j: usize) -> f64 {
    let m = (n - 1) as f64;
    let ti = i as f64 * PI / m;
    let tj = j as f64 * PI / m;
    (b - a) * (0.5 * (ti + tj)).sin() * (0.5 * (ti - tj)).sin()
}

fn diff_matrix(n: usize, a: f64, b: f64, bary: &[f64]) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if i != j {
                let v = (bary[j] / bary[i]) / node_gap(n, a, b, i, j);
                d[(i, j)] = v;
                row_sum += v;
            }
        }
        d[(i, i)] = -row_sum;
    }
    d
}

impl Grid1D {
    /// Barycentric weights of the underlying nodes.
    pub fn bary_weights(&self) -> &[f64] {
        &self.bary
    }

    /// Lagrange basis values `l_j(t)` for all nodes, via the barycentric formula.
    pub fn interp_weights(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.interp_weights_into(t, &mut out);
        out
    }

    /// In-place variant of [`Grid1D::interp_weights`].
    pub fn interp_weights_into(&self, t: f64, out: &mut [f64]) {
        if let Some(k) = self.points.iter().position(|&x| x == t) {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[k] = 1.0;
            return;
        }
        let mut denom = 0.0;
        for (j, o) in out.iter_mut().enumerate() {
            let c = self.bary[j] / (t - self.points[j]);
            *o = c;
            denom += c;
        }
        out.iter_mut().for_each(|v| *v /= denom);
    }

    /// Interpolation matrix from this grid to the target abscissae (rows = targets).
    pub fn interp_matrix(&self, targets: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(targets.len(), self.n);
        let mut buf = vec![0.0; self.n];
        for (r, &t) in targets.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::invalid(format!("interpolation target {t} is not finite")));
            }
            self.interp_weights_into(t, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        Ok(m)
    }

    /// Smallest gap between consecutive nodes.
    pub fn min_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// A node on the boundary of the tensor grid with its outward unit normal.
/// Corners carry the normalized diagonal normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryNode {
    pub index: usize,
    pub normal: [f64; 2],
}

/// Tensor-product Chebyshev grid on a rectangle.
#[derive(Clone, Debug)]
pub struct Grid2D {
    pub x: Grid1D,
    pub y: Grid1D,
    /// Node coordinates, `points[iy * nx + ix] = [x[ix], y[iy]]`.
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub dx: DMatrix<f64>,
    pub dy: DMatrix<f64>,
    pub lap: DMatrix<f64>,
    /// Summation-by-parts Laplacian `-W^-1 (Dx^T W Dx + Dy^T W Dy)`, which
    /// imposes the no-flux condition weakly and satisfies `w^T L = 0`.
    pub neumann_lap: DMatrix<f64>,
    pub boundary: Vec<BoundaryNode>,
}

/// One-dimensional `-W^-1 D^T W D`.
fn weak_second_derivative(g: &Grid1D) -> DMatrix<f64> {
    let n = g.n;
    let mut wd = g.diff.clone();
    for r in 0..n {
        for c in 0..n {
            wd[(r, c)] *= g.weights[r];
        }
    }
    let mut a = -(g.diff.transpose() * wd);
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] /= g.weights[r];
        }
    }
    a
}

/// Build the tensor grid with `nx * ny` nodes on `[ax, bx] x [ay, by]`.
pub fn tensor_grid(nx: usize, ny: usize, ax: f64, bx: f64, ay: f64, by: f64) -> Result<Grid2D> {
    let gx = cheb_grid(nx, ax, bx)?;
    let gy = cheb_grid(ny, ay, by)?;
    let m = nx * ny;
    let mut points = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for iy in 0..ny {
        for ix in 0..nx {
            points.push([gx.points[ix], gy.points[iy]]);
            weights.push(gx.weights[ix] * gy.weights[iy]);
        }
    }
    let dxx = &gx.diff * &gx.diff;
    let dyy = &gy.diff * &gy.diff;
    let axx = weak_second_derivative(&gx);
    let ayy = weak_second_derivative(&gy);
    let mut neumann_lap = DMatrix::zeros(m, m);
    let mut dx = DMatrix::zeros(m, m);
    let mut dy = DMatrix::zeros(m, m);
    let mut lap = DMatrix::zeros(m, m);
    for iy in 0..ny {
        for ix in 0..nx {
            let r = iy * nx + ix;
            for jx in 0..nx {
                let c = iy * nx + jx;
                dx[(r, c)] = gx.diff[(ix, jx)];
                lap[(r, c)] += dxx[(ix, jx)];
                neumann_lap[(r, c)] += axx[(ix, jx)];
            }
            for jy in 0..ny {
                let c = jy * nx + ix;
                dy[(r, c)] = gy.diff[(iy, jy)];
                lap[(r, c)] += dyy[(iy, jy)];
                neumann_lap[(r, c)] += ayy[(iy, jy)];
            }
        }
    }
    let boundary = boundary_nodes(nx, ny);
    Ok(Grid2D {
        x: gx,
        y: gy,
        points,
        weights,
        dx,
        dy,
        lap,
        neumann_lap,
        boundary,
    })
}

/// The standard `n x n` grid on the unit square.
pub fn unit_square_grid(n: usize) -> Result<Grid2D> {
    tensor_grid(n, n, 0.0, 1.0, 0.0, 1.0)
}

fn boundary_nodes(nx: usize, ny: usize) -> Vec<BoundaryNode> {
    let d = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(2 * nx + 2 * ny - 4);
    for iy in 0..ny {
        for ix in 0..nx {
            let sx = if ix == 0 { -1.0 } else if ix == nx - 1 { 1.0 } else { 0.0 };
            let sy = if iy == 0 { -1.0 } else if iy == ny - 1 { 1.0 } else { 0.0 };
            let normal = match (sx != 0.0, sy != 0.0) {
                (false, false) => continue,
                (true, true) => [sx * d, sy * d],
                _ => [sx, sy],
            };
            out.push(BoundaryNode {
                index: iy * nx + ix,
                normal,
            });
        }
    }
    out
}

impl Grid2D {
    pub fn nx(&self) -> usize {
        self.x.n
    }

    pub fn ny(&self) -> usize {
        self.y.n
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether node `i` lies on the boundary.
    pub fn is_boundary(&self, i: usize) -> bool {
        let (ix, iy) = (i % self.nx(), i / self.nx());
        ix == 0 || iy == 0 || ix == self.nx() - 1 || iy == self.ny() - 1
    }

    /// Row of the discrete outward normal derivative at boundary node `b`.
    pub fn normal_derivative_row(&self, b: &BoundaryNode) -> Vec<f64> {
        (0..self.len())
            .map(|c| b.normal[0] * self.dx[(b.index, c)] + b.normal[1] * self.dy[(b.index, c)])
            .collect()
    }

    /// Discrete integral of nodal values.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        crate::par::compensated_dot(&self.weights, f)
    }

    /// Tensor interpolation matrix to arbitrary targets (rows = targets).
    pub fn interp_matrix(&self, targets: &[[f64; 2]]) -> Result<DMatrix<f64>> {
        let (nx, ny) = (self.nx(), self.ny());
        let mut m = DMatrix::zeros(targets.len(), nx * ny);
        let mut lx = vec![0.0; nx];
        let mut ly = vec![0.0; ny];
        for (r, t) in targets.iter().enumerate() {
            if !(t[0].is_finite() && t[1].is_finite()) {
                return Err(Error::invalid(format!("interpolation target {t:?} is not finite")));
            }
            self.x.interp_weights_into(t[0], &mut lx);
            self.y.interp_weights_into(t[1], &mut ly);
            for iy in 0..ny {
                for ix in 0..nx {
                    m[(r, iy * nx + ix)] = ly[iy] * lx[ix];
                }
            }
        }
        Ok(m)
    }

    /// Evaluate the interpolant of nodal values at a single point.
    pub fn interpolate(&self, values: &[f64], t: [f64; 2]) -> f64 {
        let lx = self.x.interp_weights(t[0]);
        let ly = self.y.interp_weights(t[1]);
        let nx = self.nx();
        let mut acc = crate::par::CompensatedSum::new();
        for (iy, wy) in ly.iter().enumerate() {
            for (ix, wx) in lx.iter().enumerate() {
                acc.add(wy * wx * values[iy * nx + ix]);
            }
        }
        acc.value()
    }
}

/// Barycentric interpolation matrix from a tensor grid to target points.
pub fn barycentric_interp(src: &Grid2D, targets: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    src.interp_matrix(targets)
}

/// Tensor Chebyshev grid on a cube, x fastest, then y, then z.
#[derive(Clone, Debug)]
pub struct Grid3D {
    pub axis: Grid1D,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// `n^3` grid on `[a, b]^3`.
pub fn cube_grid(n: usize, a: f64, b: f64) -> Result<Grid3D> {
    let g = cheb_grid(n, a, b)?;
    let mut points = Vec::with_capacity(n * n * n);
    let mut weights = Vec::with_capacity(n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                points.push([g.points[ix], g.points[iy], g.points[iz]]);
                weights.push(g.weights[ix] * g.weights[iy] * g.weights[iz]);
            }
        }
    }
    Ok(Grid3D {
        axis: g,
        points,
        weights,
    })
}

impl Grid3D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Spacing between the first two nodes, the smallest gap on the axis.
    pub fn min_spacing(&self) -> f64 {
        self.axis.min_spacing()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_grid() {
        let g = cheb_grid(3, 0.0, 1.0).unwrap();
        assert_eq!(g.points, vec![0.0, 0.5, 1.0]);
        let w = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
        for (a, b) in g.weights.iter().zip(w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_point_diff_matrix() {
        let g = cheb_grid(2, 0.0, 1.0).unwrap();
        assert_eq!(g.diff.as_slice(), &[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(g.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(cheb_grid(1, 0.0, 1.0).is_err());
        assert!(cheb_grid(4, 1.0, 1.0).is_err());
        assert!(cheb_grid(4, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn min_spacing_at_twenty() {
        let g = cheb_grid(20, 0.0, 1.0).unwrap();
        let expected = 6.81934829863881e-3;
        assert!((g.min_spacing() - expected).abs() < 1e-15);
    }

    #[test]
    fn diff_matrix_rows_sum_to_zero() {
        for n in [2, 5, 16, 33] {
            let g = cheb_grid(n, -1.0, 3.0).unwrap();
            for i in 0..n {
                let s: f64 = g.diff.row(i).iter().sum();
                assert!(s.abs() < 1e-12 * n as f64 * n as f64, "n={n} row {i}: {s}");
            }
        }
    }

    #[test]
    fn boundary_layout() {
        let g = tensor_grid(5, 4, 0.0, 1.0, 0.0, 2.0).unwrap();
        assert_eq!(g.boundary.len(), 2 * 5 + 2 * 4 - 4);
        let corner = g.boundary.iter().find(|b| b.index == 0).unwrap();
        let d = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(corner.normal, [-d, -d]);
        let top = g.boundary.iter().find(|b| b.index == 3 * 5 + 2).unwrap();
        assert_eq!(top.normal, [0.0, 1.0]);
        assert!(g.is_boundary(4) && !g.is_boundary(6));
    }

    #[test]
    fn laplacian_matches_product_of_derivatives() {
        let g = tensor_grid(6, 5, 0.0, 1.0, 0.0, 1.0).unwrap();
        let direct = &g.dx * &g.dx + &g.dy * &g.dy;
        let scale = g.lap.amax();
        assert!((&direct - &g.lap).amax() < 1e-12 * scale);
    }

    #[test]
    fn cube_grid_layout() {
        let g = cube_grid(3, -1.0, 1.0).unwrap();
        assert_eq!(g.len(), 27);
        assert_eq!(g.points[1], [0.0, -1.0, -1.0]);
        assert!((g.weights.iter().sum::<f64>() - 8.0).abs() < 1e-14);
    }
}
