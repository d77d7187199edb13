//! Multishape quadrature for convolutions with singular kernels.
//!
//! For each collocation point `x_i` the unit square minus the clipped box
//! `[0,1]^2 ∩ B_inf(x_i; eps)` is split into quadrilateral elements. Each
//! element carries its own `(alpha N)^2` Chebyshev grid, so the kernel is only
//! sampled away from its singularity. Base-grid values reach the element
//! points by barycentric interpolation, which turns the element quadrature into
//! one row of a dense convolution matrix. The missing box is handled by the
//! closed-form potential `G_eps`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::closed_forms::{g_eps_square, j_square, newton3d_regularized_box_potential, EpsNeighborhood};
use crate::domain_maps::DomainMap;
use crate::error::{Error, Result};
use crate::kernels::{record_kernel_evaluations, Kernel, KernelId, KernelKind};
use crate::par::{compensated_sum, map_indices, try_map_indices, CompensatedSum, Execution};
use crate::spectral::{cheb_grid, Grid1D, Grid2D, Grid3D};

const THIN: f64 = 1e-13;
const MIN_AREA: f64 = 1e-14;

/// Partition strategy for the complement of the epsilon box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    /// Axis-aligned rectangles from the 3x3 cut of the square (3, 5 or 8 elements).
    Maximal,
    /// Trapezoids joining the box corners to the square corners (2, 3 or 4 elements).
    Minimal,
}

/// How an operator was assembled, as recorded in caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssemblyMode {
    Maximal = 0,
    Minimal = 1,
    Direct3d = 2,
}

impl From<PartitionMode> for AssemblyMode {
    fn from(m: PartitionMode) -> Self {
        match m {
            PartitionMode::Maximal => AssemblyMode::Maximal,
            PartitionMode::Minimal => AssemblyMode::Minimal,
        }
    }
}

impl AssemblyMode {
    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(AssemblyMode::Maximal),
            1 => Some(AssemblyMode::Minimal),
            2 => Some(AssemblyMode::Direct3d),
            _ => None,
        }
    }

    pub fn partition(self) -> Option<PartitionMode> {
        match self {
            AssemblyMode::Maximal => Some(PartitionMode::Maximal),
            AssemblyMode::Minimal => Some(PartitionMode::Minimal),
            AssemblyMode::Direct3d => None,
        }
    }
}

/// Where the epsilon box sits relative to the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionCase {
    Corner,
    Edge,
    Interior,
}

/// A convex quadrilateral with counter-clockwise vertices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quad {
    pub vertices: [[f64; 2]; 4],
}

impl Quad {
    fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Quad {
            vertices: [[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        0.5 * (0..4)
            .map(|k| {
                let (p, q) = (v[k], v[(k + 1) % 4]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum::<f64>()
    }

    /// Interior angles in radians.
    pub fn angles(&self) -> [f64; 4] {
        let v = &self.vertices;
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let prev = v[(k + 3) % 4];
            let next = v[(k + 1) % 4];
            let a = [prev[0] - v[k][0], prev[1] - v[k][1]];
            let b = [next[0] - v[k][0], next[1] - v[k][1]];
            let cross = b[0] * a[1] - b[1] * a[0];
            let dot = a[0] * b[0] + a[1] * b[1];
            *o = cross.atan2(dot);
        }
        out
    }

    /// `Some([x0, x1, y0, y1])` when the quad is an axis-aligned rectangle.
    pub fn as_rect(&self) -> Option<[f64; 4]> {
        let v = &self.vertices;
        let ok = v[0][1] == v[1][1] && v[1][0] == v[2][0] && v[2][1] == v[3][1] && v[3][0] == v[0][0];
        ok.then(|| [v[0][0], v[1][0], v[0][1], v[2][1]])
    }

    /// Bilinear map from the reference square `[0,1]^2`.
    pub fn map(&self, u: f64, w: f64) -> [f64; 2] {
        let v = &self.vertices;
        let c = [(1.0 - u) * (1.0 - w), u * (1.0 - w), u * w, (1.0 - u) * w];
        [
            c[0] * v[0][0] + c[1] * v[1][0] + c[2] * v[2][0] + c[3] * v[3][0],
            c[0] * v[0][1] + c[1] * v[1][1] + c[2] * v[2][1] + c[3] * v[3][1],
        ]
    }

    /// Jacobian determinant of [`Quad::map`].
    pub fn jacobian(&self, u: f64, w: f64) -> f64 {
        let v = &self.vertices;
        let du = [
            (1.0 - w) * (v[1][0] - v[0][0]) + w * (v[2][0] - v[3][0]),
            (1.0 - w) * (v[1][1] - v[0][1]) + w * (v[2][1] - v[3][1]),
        ];
        let dw = [
            (1.0 - u) * (v[3][0] - v[0][0]) + u * (v[2][0] - v[1][0]),
            (1.0 - u) * (v[3][1] - v[0][1]) + u * (v[2][1] - v[1][1]),
        ];
        du[0] * dw[1] - du[1] * dw[0]
    }
}

/// Elements covering the square minus the clipped epsilon box around a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub case: PartitionCase,
    pub mode: PartitionMode,
    /// Clipped box `[x0, x1] x [y0, y1]`.
    pub hole: [f64; 4],
    pub elements: Vec<Quad>,
}

/// Split the unit square minus `B_inf(x; eps)` into elements.
pub fn partition_box(x: [f64; 2], eps: f64, mode: PartitionMode) -> Result<Partition> {
    if !(x.iter().all(|v| (0.0..=1.0).contains(v))) {
        return Err(Error::domain(format!("collocation point {x:?} is outside the unit square")));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::invalid(format!("eps must lie in (0, 1/2), got {eps}")));
    }
    let near_lo = |v: f64| v <= eps;
    let near_hi = |v: f64| v >= 1.0 - eps;
    let a = if near_lo(x[0]) { 0.0 } else { x[0] - eps };
    let b = if near_hi(x[0]) { 1.0 } else { x[0] + eps };
    let c = if near_lo(x[1]) { 0.0 } else { x[1] - eps };
    let d = if near_hi(x[1]) { 1.0 } else { x[1] + eps };
    let touch_x = a == 0.0 || b == 1.0;
    let touch_y = c == 0.0 || d == 1.0;
    let case = match (touch_x, touch_y) {
        (true, true) => PartitionCase::Corner,
        (false, false) => PartitionCase::Interior,
        _ => PartitionCase::Edge,
    };
    let elements = match mode {
        PartitionMode::Maximal => {
            let cuts = |lo: f64, hi: f64| -> Vec<(f64, f64, bool)> {
                [(0.0, lo, false), (lo, hi, true), (hi, 1.0, false)]
                    .into_iter()
                    .filter(|&(s, e, centre)| centre || e - s >= THIN)
                    .collect()
            };
            let xs = cuts(a, b);
            let ys = cuts(c, d);
            let mut out = Vec::with_capacity(8);
            for &(y0, y1, cy) in &ys {
                for &(x0, x1, cx) in &xs {
                    if !(cx && cy) {
                        out.push(Quad::rect(x0, x1, y0, y1));
                    }
                }
            }
            out
        }
        PartitionMode::Minimal => {
            let mut out = Vec::with_capacity(4);
            if c >= THIN {
                out.push(Quad {
                    vertices: [[0.0, 0.0], [1.0, 0.0], [b, c], [a, c]],
                });
            }
            if 1.0 - b >= THIN {
                out.push(Quad {
                    vertices: [[1.0, 0.0], [1.0, 1.0], [b, d], [b, c]],
                });
            }
            if 1.0 - d >= THIN {
                out.push(Quad {
                    vertices: [[1.0, 1.0], [0.0, 1.0], [a, d], [b, d]],
                });
            }
            if a >= THIN {
                out.push(Quad {
                    vertices: [[0.0, 1.0], [0.0, 0.0], [a, c], [a, d]],
                });
            }
            out
        }
    };
    for e in &elements {
        if e.area() < MIN_AREA {
            return Err(Error::Geometry {
                x1: x[0],
                x2: x[1],
                eps,
                msg: format!("element {:?} has area {:e}", e.vertices, e.area()),
            });
        }
    }
    Ok(Partition {
        case,
        mode,
        hole: [a, b, c, d],
        elements,
    })
}

/// Quadrilateral element with its local Chebyshev quadrature.
#[derive(Clone, Debug)]
pub struct QuadElement {
    pub quad: Quad,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadElement {
    /// Push the `n x n` Clenshaw-Curtis rule of `reference` (on [0,1]) to the element.
    pub fn new(quad: Quad, reference: &Grid1D) -> Result<Self> {
        let n = reference.n;
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for (&w, &ww) in reference.points.iter().zip(&reference.weights) {
            for (&u, &wu) in reference.points.iter().zip(&reference.weights) {
                let jac = quad.jacobian(u, w);
                if jac <= 0.0 {
                    return Err(Error::invalid(format!(
                        "element {:?} has non-positive jacobian {jac}",
                        quad.vertices
                    )));
                }
                points.push(quad.map(u, w));
                weights.push(wu * ww * jac);
            }
        }
        Ok(Self { quad, points, weights })
    }
}

/// Local points per axis for an `alpha` refinement of an `n`-point base grid.
pub fn local_points(alpha: f64, n: usize) -> Result<usize> {
    let an = alpha * n as f64;
    let rounded = an.round();
    if !(alpha > 0.0) || (an - rounded).abs() > 1e-9 || rounded < 2.0 {
        return Err(Error::invalid(format!(
            "alpha * N must be an integer of at least 2, got {alpha} * {n}"
        )));
    }
    Ok(rounded as usize)
}

/// Per-row quadrature assembly. `sample(y)` returns the (scaled) kernel value
/// for source point `y` of the reference square.
fn row_with<F: Fn([f64; 2]) -> f64>(
    grid: &Grid2D,
    x: [f64; 2],
    eps: f64,
    reference: &Grid1D,
    mode: PartitionMode,
    sample: F,
) -> Result<(Vec<f64>, u64)> {
    let part = partition_box(x, eps, mode)?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut acc = vec![CompensatedSum::new(); nx * ny];
    let mut evals = 0u64;
    let nl = reference.n;
    let [h0, h1, h2, h3] = part.hole;
    // Nodes on the hole boundary may round a few ulps inward.
    let slack = 1e-12 * eps;
    let guarded = |y: [f64; 2]| {
        debug_assert!(
            !(y[0] > h0 + slack && y[0] < h1 - slack && y[1] > h2 + slack && y[1] < h3 - slack),
            "kernel sampled inside the epsilon box at {y:?}, hole {:?}", [h0, h1, h2, h3]
        );
        sample(y)
    };
    for quad in &part.elements {
        if let Some([x0, x1, y0, y1]) = quad.as_rect() {
            let ex: Vec<f64> = reference.points.iter().map(|u| x0 + (x1 - x0) * u).collect();
            let ey: Vec<f64> = reference.points.iter().map(|u| y0 + (y1 - y0) * u).collect();
            let wx: Vec<f64> = reference.weights.iter().map(|w| (x1 - x0) * w).collect();
            let wy: Vec<f64> = reference.weights.iter().map(|w| (y1 - y0) * w).collect();
            let lx = interp_rows(&grid.x, &ex);
            let ly = interp_rows(&grid.y, &ey);
            let mut c = vec![0.0; nl];
            let mut t = vec![0.0; nx];
            for jy in 0..nl {
                for jx in 0..nl {
                    c[jx] = wy[jy] * wx[jx] * guarded([ex[jx], ey[jy]]);
                }
                for (ix, ti) in t.iter_mut().enumerate() {
                    *ti = compensated_sum((0..nl).map(|jx| c[jx] * lx[jx * nx + ix]));
                }
                for iy in 0..ny {
                    let l = ly[jy * ny + iy];
                    if l == 0.0 {
                        continue;
                    }
                    for ix in 0..nx {
                        acc[iy * nx + ix].add(l * t[ix]);
                    }
                }
            }
            evals += (nl * nl) as u64;
        } else {
            let el = QuadElement::new(*quad, reference)?;
            let p = el.points.len();
            let mut cx = DMatrix::zeros(p, nx);
            let mut ly = DMatrix::zeros(p, ny);
            let mut bx = vec![0.0; nx];
            let mut by = vec![0.0; ny];
            for (k, (pt, w)) in el.points.iter().zip(&el.weights).enumerate() {
                let cval = w * guarded(*pt);
                grid.x.interp_weights_into(pt[0], &mut bx);
                grid.y.interp_weights_into(pt[1], &mut by);
                for ix in 0..nx {
                    cx[(k, ix)] = cval * bx[ix];
                }
                for iy in 0..ny {
                    ly[(k, iy)] = by[iy];
                }
            }
            let block = ly.transpose() * cx;
            for iy in 0..ny {
                for ix in 0..nx {
                    acc[iy * nx + ix].add(block[(iy, ix)]);
                }
            }
            evals += p as u64;
        }
    }
    Ok((acc.iter().map(|a| a.value()).collect(), evals))
}

/// Row-major interpolation weights: `out[j * n + i] = l_i(targets[j])`.
fn interp_rows(g: &Grid1D, targets: &[f64]) -> Vec<f64> {
    let n = g.n;
    let mut out = vec![0.0; targets.len() * n];
    for (j, &t) in targets.iter().enumerate() {
        g.interp_weights_into(t, &mut out[j * n..(j + 1) * n]);
    }
    out
}

/// One row of the uncorrected convolution matrix for kernel `kernel`.
pub fn assemble_row(
    grid: &Grid2D,
    i: usize,
    kernel: &Kernel,
    eps: f64,
    alpha: f64,
    mode: PartitionMode,
) -> Result<Vec<f64>> {
    if i >= grid.len() {
        return Err(Error::invalid(format!("row {i} out of range for {} nodes", grid.len())));
    }
    check_planar(kernel)?;
    let reference = cheb_grid(local_points(alpha, grid.nx().max(grid.ny()))?, 0.0, 1.0)?;
    let x = grid.points[i];
    let (row, evals) = row_with(grid, x, eps, &reference, mode, |y| kernel.planar([x[0] - y[0], x[1] - y[1]]))?;
    record_kernel_evaluations(evals);
    Ok::<_, Error>(row)
}

/// Row assembly for an arbitrary kernel of the offset `x_i - y`.
pub fn assemble_row_fn<F: Fn([f64; 2]) -> f64>(
    grid: &Grid2D,
    i: usize,
    kernel: F,
    eps: f64,
    alpha: f64,
    mode: PartitionMode,
) -> Result<Vec<f64>> {
    let reference = cheb_grid(local_points(alpha, grid.nx().max(grid.ny()))?, 0.0, 1.0)?;
    let x = grid.points[i];
    Ok(row_with(grid, x, eps, &reference, mode, |y| kernel([x[0] - y[0], x[1] - y[1]]))?.0)
}

fn check_planar(kernel: &Kernel) -> Result<()> {
    if kernel.dim() != 2 {
        return Err(Error::invalid("multishape assembly needs a planar kernel"));
    }
    Ok(())
}

fn check_unit_square(grid: &Grid2D) -> Result<()> {
    if grid.x.a != 0.0 || grid.x.b != 1.0 || grid.y.a != 0.0 || grid.y.b != 1.0 {
        return Err(Error::invalid("multishape assembly needs a grid on the unit square"));
    }
    Ok(())
}

/// Metadata describing how an operator was assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorMeta {
    /// Points per axis of the underlying grid.
    pub n: usize,
    /// Matrix dimension.
    pub m: usize,
    /// Box half-width in 2D, regularization radius in 3D.
    pub eps: f64,
    pub alpha: f64,
    pub mode: AssemblyMode,
    pub kernel: KernelId,
    pub eta: f64,
    pub corrected: bool,
    pub map: Option<DomainMap>,
}

/// Dense convolution matrix together with its provenance.
#[derive(Clone, Debug)]
pub struct ConvOperator {
    pub matrix: DMatrix<f64>,
    pub meta: OperatorMeta,
}

impl ConvOperator {
    /// The zero operator on an `n x n` grid.
    pub fn zero(n: usize) -> Self {
        let m = n * n;
        Self {
            matrix: DMatrix::zeros(m, m),
            meta: OperatorMeta {
                n,
                m,
                eps: 0.5,
                alpha: 1.0,
                mode: AssemblyMode::Maximal,
                kernel: KernelId::Newtonian2d,
                eta: 0.0,
                corrected: false,
                map: None,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `matrix * v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVectorView::from_slice(v, v.len());
        (&self.matrix * x).as_slice().to_vec()
    }

    /// Row sums with compensated accumulation, i.e. the operator applied to 1.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| compensated_sum(self.matrix.row(i).iter().copied()))
            .collect()
    }

    /// Whether every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.matrix.iter().all(|v| v.is_finite())
    }

    /// Check that this operator was built on `grid`.
    pub fn check_grid(&self, grid: &Grid2D) -> Result<()> {
        if self.dim() != grid.len() || self.meta.n != grid.nx() {
            return Err(Error::invalid(format!(
                "operator of dimension {} does not match a grid with {} nodes",
                self.dim(),
                grid.len()
            )));
        }
        Ok(())
    }
}

/// Assemble the full multishape operator; with `correct`, add `eta G_eps` on the diagonal
/// (or the box integral of a bounded kernel).
pub fn assemble_operator(
    grid: &Grid2D,
    kernel: &Kernel,
    eps: f64,
    alpha: f64,
    mode: PartitionMode,
    correct: bool,
    exec: Execution,
) -> Result<ConvOperator> {
    check_planar(kernel)?;
    check_unit_square(grid)?;
    let n = grid.nx().max(grid.ny());
    let reference = cheb_grid(local_points(alpha, n)?, 0.0, 1.0)?;
    let rows = try_map_indices(exec, grid.len(), |i| {
        let x = grid.points[i];
        let (row, evals) = row_with(grid, x, eps, &reference, mode, |y| kernel.planar([x[0] - y[0], x[1] - y[1]]))
            .map_err(|e| Error::Row {
                row: i,
                source: Box::new(e),
            })?;
        record_kernel_evaluations(evals);
        Ok::<_, Error>(row)
    })?;
    let m = grid.len();
    let mut matrix = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
    if correct {
        let diag = try_map_indices(exec, m, |i| box_correction(kernel, grid.points[i], eps, &reference))?;
        for (i, d) in diag.into_iter().enumerate() {
            matrix[(i, i)] += d;
        }
    }
    Ok(ConvOperator {
        matrix,
        meta: OperatorMeta {
            n: grid.nx(),
            m,
            eps,
            alpha,
            mode: mode.into(),
            kernel: kernel.id(),
            eta: kernel.eta,
            corrected: correct,
            map: None,
        },
    })
}

/// `eta int_{box} K(x - y) dy` over the clipped epsilon box around `x`.
fn box_correction(kernel: &Kernel, x: [f64; 2], eps: f64, reference: &Grid1D) -> Result<f64> {
    let unscaled = kind_box_integral(&kernel.kind, x, eps, reference)?;
    Ok(kernel.eta * unscaled)
}

fn kind_box_integral(kind: &KernelKind, x: [f64; 2], eps: f64, reference: &Grid1D) -> Result<f64> {
    match kind {
        KernelKind::Newtonian2d => g_eps_square(x, EpsNeighborhood::square(eps)?),
        KernelKind::Composite { parts } => {
            let mut acc = CompensatedSum::new();
            for (w, k) in parts {
                acc.add(w * kind_box_integral(k, x, eps, reference)?);
            }
            Ok(acc.value())
        }
        KernelKind::Mollifier { .. } => {
            let a = (x[0] - eps).max(0.0);
            let b = (x[0] + eps).min(1.0);
            let c = (x[1] - eps).max(0.0);
            let d = (x[1] + eps).min(1.0);
            let mut acc = CompensatedSum::new();
            for (v, wv) in reference.points.iter().zip(&reference.weights) {
                for (u, wu) in reference.points.iter().zip(&reference.weights) {
                    let y = [a + (b - a) * u, c + (d - c) * v];
                    acc.add(wu * wv * kind.planar([x[0] - y[0], x[1] - y[1]]));
                }
            }
            record_kernel_evaluations((reference.n * reference.n) as u64);
            Ok(acc.value() * (b - a) * (d - c))
        }
        _ => Err(Error::invalid("box correction needs a planar kernel")),
    }
}

/// Operator assembled from a general per-row sampler on the reference square.
pub(crate) fn assemble_with_sampler<S>(
    grid: &Grid2D,
    eps: f64,
    alpha: f64,
    mode: PartitionMode,
    exec: Execution,
    sampler: S,
) -> Result<DMatrix<f64>>
where
    S: Fn(usize, [f64; 2]) -> f64 + Sync + Send,
{
    check_unit_square(grid)?;
    let reference = cheb_grid(local_points(alpha, grid.nx().max(grid.ny()))?, 0.0, 1.0)?;
    let rows = try_map_indices(exec, grid.len(), |i| {
        let (row, evals) = row_with(grid, grid.points[i], eps, &reference, mode, |y| sampler(i, y)).map_err(|e| {
            Error::Row {
                row: i,
                source: Box::new(e),
            }
        })?;
        record_kernel_evaluations(evals);
        Ok::<_, Error>(row)
    })?;
    let m = grid.len();
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

/// Per-point and summary values of `e_eps = |J - I_1[1] - G_eps|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub per_point: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

/// Compare the operator applied to 1 against the closed-form potential of the square.
pub fn validate(op: &ConvOperator, grid: &Grid2D) -> Result<ErrorReport> {
    if op.meta.kernel != KernelId::Newtonian2d || op.meta.eta != 1.0 || op.meta.map.is_some() {
        return Err(Error::invalid(
            "validation needs the unmapped planar Newtonian kernel with unit strength",
        ));
    }
    op.check_grid(grid)?;
    let nb = EpsNeighborhood::square(op.meta.eps)?;
    let sums = op.row_sums();
    let per_point = grid
        .points
        .iter()
        .zip(&sums)
        .map(|(&x, &s)| {
            let g = if op.meta.corrected { 0.0 } else { g_eps_square(x, nb)? };
            Ok((j_square(x)? - s - g).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = per_point.iter().copied().fold(0.0, f64::max);
    let mean = compensated_sum(per_point.iter().copied()) / per_point.len() as f64;
    Ok(ErrorReport { per_point, max, mean })
}

/// `eta (A + weight B)`, e.g. a Newtonian operator mixed with a mollifier operator.
pub fn mixture(a: &ConvOperator, b: &ConvOperator, weight: f64, eta: f64) -> Result<ConvOperator> {
    if a.dim() != b.dim() || a.meta.n != b.meta.n {
        return Err(Error::invalid("mixture operands live on different grids"));
    }
    let matrix = (&a.matrix + &b.matrix * weight) * eta;
    let mut meta = a.meta.clone();
    meta.kernel = KernelId::Mixture;
    meta.eta = eta;
    meta.corrected = a.meta.corrected && b.meta.corrected;
    Ok(ConvOperator { matrix, meta })
}

/// Diagonal treatment for the spatial operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction3d {
    /// Plain tensor quadrature of the bounded kernel.
    None,
    /// Adjust the diagonal so the operator reproduces `K_sigma * 1` exactly.
    ConstantExact,
}

/// Largest dense operator the 3D assembly will allocate, in bytes.
pub const MEMORY_GUARD_BYTES: u64 = 2 * 1024 * 1024 * 1024;

/// Direct quadrature of the regularized spatial kernel on a cube grid.
pub fn assemble_operator_3d(
    grid: &Grid3D,
    kernel: &Kernel,
    correction: Correction3d,
    exec: Execution,
) -> Result<ConvOperator> {
    let sigma = match kernel.kind {
        KernelKind::Newtonian3dRegularized { sigma } => sigma,
        _ => return Err(Error::invalid("3D assembly needs the regularized Newtonian kernel")),
    };
    let m = grid.len();
    let bytes = (m as u64).saturating_mul(m as u64).saturating_mul(8);
    if bytes > MEMORY_GUARD_BYTES {
        return Err(Error::Resource(format!(
            "a {m} x {m} operator needs {bytes} bytes, above the {MEMORY_GUARD_BYTES} byte guard"
        )));
    }
    let lo = [grid.axis.a; 3];
    let hi = [grid.axis.b; 3];
    let rows = map_indices(exec, m, |i| {
        let x = grid.points[i];
        let mut row: Vec<f64> = grid
            .points
            .iter()
            .zip(&grid.weights)
            .map(|(y, w)| {
                let r = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
                -kernel.eta * w / (4.0 * std::f64::consts::PI * r.max(sigma))
            })
            .collect();
        if correction == Correction3d::ConstantExact {
            let quadrature = compensated_sum(row.iter().copied());
            let exact = kernel.eta * newton3d_regularized_box_potential(x, lo, hi, sigma);
            row[i] += exact - quadrature;
        }
        record_kernel_evaluations(m as u64);
        row
    });
    let matrix = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
    Ok(ConvOperator {
        matrix,
        meta: OperatorMeta {
            n: grid.axis.n,
            m,
            eps: sigma,
            alpha: 1.0,
            mode: AssemblyMode::Direct3d,
            kernel: KernelId::Newtonian3dRegularized,
            eta: kernel.eta,
            corrected: correction == Correction3d::ConstantExact,
            map: None,
        },
    })
}
