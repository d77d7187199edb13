//! Nonlocal Cahn-Hilliard system on the collocation grid.
//!
//! Unknowns are the density `rho` and the chemical potential
//! `mu = F'(rho) - op rho`. Interior rows evolve `rho' = m Lap mu`; at boundary
//! nodes the evolution row is replaced by the no-flux condition `d_n mu = 0`.
//! Because the chemical potential is an explicit function of `rho`, each
//! implicit step eliminates it and runs Newton on `rho` alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multishape::ConvOperator;
use crate::par::{compensated_dot, compensated_sum};
use crate::potentials::Potential;
use crate::spectral::Grid2D;

/// Distance from +-1 at which iterates of the logarithmic potential are clamped.
pub const PHASE_GUARD: f64 = 1e-12;

/// Smallest step size before the integrator gives up.
pub const MIN_DT: f64 = 1e-14;

/// Spatial treatment of the no-flux condition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    /// Collocated `rho' = m Lap mu` in the interior with the boundary rows
    /// replaced by `d mu / dn = 0`, an index-1 DAE.
    Collocation,
    /// `rho' = m L mu` with the summation-by-parts Laplacian at every node.
    /// Discrete mass is conserved exactly and the energy is a Lyapunov function.
    #[default]
    Conservative,
}

/// Integration settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub t_end: f64,
    /// Highest BDF order, 1 or 2.
    pub max_order: u8,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub mass_tol: f64,
    pub initial_dt: f64,
    pub max_dt: f64,
    /// Constant mobility `m` in `rho' = m Lap mu`.
    pub mobility: f64,
    /// Times at which interpolated states are reported.
    pub output_times: Vec<f64>,
    pub max_steps: usize,
    /// Keep `rho` at every accepted step (needed for the decay diagnostics).
    pub keep_states: bool,
    /// Disable error control and march with this step.
    pub fixed_dt: Option<f64>,
    pub formulation: Formulation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-7,
            rel_tol: 1e-7,
            t_end: 1.0,
            max_order: 2,
            newton_tol: 1e-10,
            newton_max_iter: 10,
            mass_tol: 1e-8,
            initial_dt: 1e-6,
            max_dt: f64::INFINITY,
            mobility: 1.0,
            output_times: Vec::new(),
            max_steps: 1_000_000,
            keep_states: false,
            fixed_dt: None,
            formulation: Formulation::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.abs_tol, "abs_tol")?;
        positive(self.rel_tol, "rel_tol")?;
        positive(self.t_end, "t_end")?;
        positive(self.newton_tol, "newton_tol")?;
        positive(self.initial_dt, "initial_dt")?;
        positive(self.max_dt, "max_dt")?;
        positive(self.mobility, "mobility")?;
        positive(self.mass_tol, "mass_tol")?;
        if let Some(h) = self.fixed_dt {
            positive(h, "fixed_dt")?;
        }
        if !(1..=2).contains(&self.max_order) {
            return Err(Error::invalid(format!("max_order must be 1 or 2, got {}", self.max_order)));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::invalid("newton_max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Snapshot of the system at one time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChState {
    pub t: f64,
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub mass: f64,
    pub energy: f64,
    pub sup_norm: f64,
}

/// Scalar diagnostics recorded after every accepted step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub order: u8,
    pub mass: f64,
    pub energy: f64,
    pub sup_norm: f64,
}

/// Counters describing the work done by an integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_iterations: usize,
    pub factorizations: usize,
    pub max_mass_drift: f64,
    pub max_energy_increase: f64,
}

/// Result of [`integrate`].
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub initial: ChState,
    pub records: Vec<StepRecord>,
    pub outputs: Vec<ChState>,
    pub final_state: ChState,
    /// `(t, rho)` at every accepted step when `keep_states` is set.
    pub states: Vec<(f64, Vec<f64>)>,
    pub stats: SolverStats,
}

/// Variable solved for by Newton's method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unknown {
    /// `rho` itself.
    Density,
    /// `v = artanh(rho)`, so that `F'(rho) = theta v` for the logarithmic
    /// potential. Near-pure phases with `1 - |rho|` below machine resolution
    /// keep a finite, exact chemical potential.
    Entropy,
}

/// Precomputed operators of the semi-discrete system.
pub struct ChSystem<'a> {
    pub grid: &'a Grid2D,
    pub op: &'a ConvOperator,
    pub pot: Potential,
    pub mobility: f64,
    pub formulation: Formulation,
    unknown: Unknown,
    /// Interior rows `m Lap`, boundary rows the normal derivative (or `m L`
    /// everywhere for the conservative form).
    q: DMatrix<f64>,
    /// `q * op`.
    qk: DMatrix<f64>,
    interior: Vec<bool>,
}

impl<'a> ChSystem<'a> {
    pub fn new(grid: &'a Grid2D, op: &'a ConvOperator, pot: Potential, mobility: f64) -> Result<Self> {
        Self::with_formulation(grid, op, pot, mobility, Formulation::default())
    }

    pub fn with_formulation(
        grid: &'a Grid2D,
        op: &'a ConvOperator,
        pot: Potential,
        mobility: f64,
        formulation: Formulation,
    ) -> Result<Self> {
        op.check_grid(grid)?;
        if !(mobility > 0.0) {
            return Err(Error::invalid(format!("mobility must be positive, got {mobility}")));
        }
        let m = grid.len();
        let mut interior = vec![true; m];
        let q = match formulation {
            Formulation::Conservative => &grid.neumann_lap * mobility,
            Formulation::Collocation => {
                let mut q = &grid.lap * mobility;
                for b in &grid.boundary {
                    interior[b.index] = false;
                    let row = grid.normal_derivative_row(b);
                    for (c, v) in row.into_iter().enumerate() {
                        q[(b.index, c)] = v;
                    }
                }
                q
            }
        };
        let qk = &q * &op.matrix;
        let unknown = if pot.is_singular() {
            if !(pot.theta > 0.0) {
                return Err(Error::invalid(format!("logarithmic potential needs theta > 0, got {}", pot.theta)));
            }
            Unknown::Entropy
        } else {
            Unknown::Density
        };
        Ok(Self {
            grid,
            op,
            pot,
            mobility,
            formulation,
            unknown,
            q,
            qk,
            interior,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `F'(rho) - op rho`.
    pub fn mu(&self, rho: &[f64]) -> Result<Vec<f64>> {
        let k = self.op.apply(rho);
        rho.iter()
            .zip(k)
            .map(|(&r, kr)| Ok(self.pot.eval(r, 1)? - kr))
            .collect()
    }

    /// Full residual of the two-field system: first the `rho` block, then the `mu` block.
    pub fn residual(&self, rho: &[f64], mu: &[f64], rho_dot: &[f64]) -> Result<Vec<f64>> {
        let m = self.len();
        if rho.len() != m || mu.len() != m || rho_dot.len() != m {
            return Err(Error::invalid("residual inputs have the wrong length"));
        }
        let qmu = &self.q * DVector::from_column_slice(mu);
        let k = self.op.apply(rho);
        let mut out = Vec::with_capacity(2 * m);
        for i in 0..m {
            out.push(if self.interior[i] { rho_dot[i] - qmu[i] } else { qmu[i] });
        }
        for i in 0..m {
            out.push(mu[i] - self.pot.eval(rho[i], 1)? + k[i]);
        }
        Ok(out)
    }

    /// Density `rho = phi(v)` for the Newton unknown `v`.
    pub fn density(&self, v: &[f64]) -> Vec<f64> {
        match self.unknown {
            Unknown::Density => v.to_vec(),
            Unknown::Entropy => v.iter().map(|x| x.tanh()).collect(),
        }
    }

    /// `d rho / d v` at each node.
    fn density_slope(&self, v: &[f64]) -> Vec<f64> {
        match self.unknown {
            Unknown::Density => vec![1.0; v.len()],
            Unknown::Entropy => v.iter().map(|x| x.cosh().powi(-2)).collect(),
        }
    }

    /// Newton unknown of a state. The entropy variable is recovered from the
    /// chemical potential, which stays exact when `rho` rounds to `+-1`.
    pub fn unknown_of(&self, state: &ChState) -> Vec<f64> {
        match self.unknown {
            Unknown::Density => state.rho.clone(),
            Unknown::Entropy => {
                let k = self.op.apply(&state.rho);
                state.mu.iter().zip(k).map(|(m, kr)| (m + kr) / self.pot.theta).collect()
            }
        }
    }

    /// Chemical potential as a function of the Newton unknown.
    fn mu_of_unknown(&self, v: &[f64], rho: &[f64]) -> Result<Vec<f64>> {
        let k = self.op.apply(rho);
        match self.unknown {
            Unknown::Density => rho.iter().zip(k).map(|(&r, kr)| Ok(self.pot.eval(r, 1)? - kr)).collect(),
            Unknown::Entropy => Ok(v.iter().zip(k).map(|(x, kr)| self.pot.theta * x - kr).collect()),
        }
    }

    /// State record built from the Newton unknown.
    pub fn state_from_unknown(&self, t: f64, v: &[f64]) -> Result<ChState> {
        let rho = self.density(v);
        let mu = self.mu_of_unknown(v, &rho)?;
        let energy = self.energy(&rho)?;
        let mass = self.mass(&rho);
        let sup_norm = rho.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        Ok(ChState {
            t,
            rho,
            mu,
            mass,
            energy,
            sup_norm,
        })
    }

    /// Residual `E (alpha0 phi(v) + hist) - Q mu(v)` of one implicit step with
    /// the chemical potential eliminated.
    pub fn newton_residual(&self, v: &[f64], alpha0: f64, hist: &[f64]) -> Result<DVector<f64>> {
        let rho = self.density(v);
        let mu = self.mu_of_unknown(v, &rho)?;
        let qmu = &self.q * DVector::from_vec(mu);
        Ok(DVector::from_fn(self.len(), |i, _| {
            let lhs = if self.interior[i] { alpha0 * rho[i] + hist[i] } else { 0.0 };
            lhs - qmu[i]
        }))
    }

    /// Jacobian of [`ChSystem::newton_residual`]:
    /// `alpha0 E Phi' - Q diag(d F'(phi(v)) / dv) + Q op Phi'`.
    pub fn newton_jacobian(&self, v: &[f64], alpha0: f64) -> Result<DMatrix<f64>> {
        let slope = self.density_slope(v);
        let local: Vec<f64> = match self.unknown {
            Unknown::Density => v.iter().map(|&r| self.pot.eval(r, 2)).collect::<Result<_>>()?,
            Unknown::Entropy => vec![self.pot.theta; v.len()],
        };
        let m = self.len();
        let mut j = self.qk.clone();
        for c in 0..m {
            for r in 0..m {
                j[(r, c)] = j[(r, c)] * slope[c] - self.q[(r, c)] * local[c];
            }
        }
        for i in 0..m {
            if self.interior[i] {
                j[(i, i)] += alpha0 * slope[i];
            }
        }
        Ok(j)
    }

    /// Jacobian of [`ChSystem::residual`] with respect to `(rho, mu)` when
    /// `rho_dot = alpha0 rho + hist`.
    pub fn full_jacobian(&self, rho: &[f64], alpha0: f64) -> Result<DMatrix<f64>> {
        let m = self.len();
        let mut j = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            if self.interior[i] {
                j[(i, i)] = alpha0;
                for c in 0..m {
                    j[(i, m + c)] = -self.q[(i, c)];
                }
            } else {
                for c in 0..m {
                    j[(i, m + c)] = self.q[(i, c)];
                }
            }
            for c in 0..m {
                j[(m + i, c)] = self.op.matrix[(i, c)];
            }
            j[(m + i, i)] -= self.pot.eval(rho[i], 2)?;
            j[(m + i, m + i)] = 1.0;
        }
        Ok(j)
    }

    /// Discrete free energy `sum w F(rho) - 1/2 rho^T W op rho`.
    pub fn energy(&self, rho: &[f64]) -> Result<f64> {
        let f: Vec<f64> = rho.iter().map(|&r| self.pot.eval(r, 0)).collect::<Result<_>>()?;
        let k = self.op.apply(rho);
        let wk: Vec<f64> = k.iter().zip(&self.grid.weights).map(|(a, w)| a * w).collect();
        Ok(compensated_dot(&self.grid.weights, &f) - 0.5 * compensated_dot(rho, &wk))
    }

    /// Quadrature mean of a field over the square.
    pub fn mass(&self, rho: &[f64]) -> f64 {
        self.grid.integrate(rho) / compensated_sum(self.grid.weights.iter().copied())
    }

    /// Assemble a full state record at time `t`.
    pub fn state(&self, t: f64, rho: Vec<f64>) -> Result<ChState> {
        let mu = self.mu(&rho)?;
        let energy = self.energy(&rho)?;
        let mass = self.mass(&rho);
        let sup_norm = rho.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(ChState {
            t,
            rho,
            mu,
            mass,
            energy,
            sup_norm,
        })
    }

    fn clamp(&self, rho: &mut [f64]) {
        if self.pot.is_singular() {
            let lim = 1.0 - PHASE_GUARD;
            rho.iter_mut().for_each(|v| *v = v.clamp(-lim, lim));
        }
    }

    /// Normal derivative of `mu` at the boundary nodes.
    fn boundary_flux(&self, rho: &[f64]) -> Result<Vec<f64>> {
        let mu = DVector::from_vec(self.mu(rho)?);
        Ok(self
            .grid
            .boundary
            .iter()
            .map(|b| self.q.row(b.index).dot(&mu.transpose()))
            .collect())
    }

    /// Make `rho0` consistent with the no-flux condition by adjusting its
    /// boundary values with damped Newton, holding the interior fixed. The
    /// conservative form has no algebraic rows and only clamps `rho0`.
    pub fn consistent_init(&self, rho0: &[f64]) -> Result<ChState> {
        let m = self.len();
        if rho0.len() != m {
            return Err(Error::invalid(format!("initial condition has {} values, grid has {m}", rho0.len())));
        }
        if rho0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial condition is not finite"));
        }
        if self.pot.is_singular() && rho0.iter().any(|v| v.abs() > 1.0) {
            return Err(Error::domain("initial condition leaves [-1, 1]"));
        }
        let mut rho = rho0.to_vec();
        self.clamp(&mut rho);
        if self.mass(&rho).abs() >= 1.0 && self.pot.is_singular() {
            return Err(Error::domain("initial mean must lie strictly inside (-1, 1)"));
        }
        if self.formulation == Formulation::Conservative {
            return self.state(0.0, rho);
        }
        const TOL: f64 = 1e-9;
        let bidx: Vec<usize> = self.grid.boundary.iter().map(|b| b.index).collect();
        let norm = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let mut flux = self.boundary_flux(&rho)?;
        let mut res = norm(&flux);
        let mut iter = 0;
        while res > TOL {
            if iter == 50 {
                return Err(Error::Initialization {
                    msg: "boundary Newton iteration did not converge".into(),
                    residual: res,
                });
            }
            iter += 1;
            let f2: Vec<f64> = bidx.iter().map(|&c| self.pot.eval(rho[c], 2)).collect::<Result<_>>()?;
            let nb = bidx.len();
            let jac = DMatrix::from_fn(nb, nb, |r, c| {
                let (ri, ci) = (bidx[r], bidx[c]);
                self.q[(ri, ci)] * f2[c] - self.qk[(ri, ci)]
            });
            let step = jac
                .lu()
                .solve(&DVector::from_column_slice(&flux))
                .ok_or_else(|| Error::Initialization {
                    msg: "singular boundary Jacobian".into(),
                    residual: res,
                })?;
            let mut lambda = 1.0;
            loop {
                let mut trial = rho.clone();
                for (k, &c) in bidx.iter().enumerate() {
                    trial[c] -= lambda * step[k];
                }
                self.clamp(&mut trial);
                let tflux = self.boundary_flux(&trial)?;
                let tres = norm(&tflux);
                if tres < res || lambda < 1e-4 {
                    rho = trial;
                    flux = tflux;
                    res = tres;
                    break;
                }
                lambda *= 0.5;
            }
        }
        self.state(0.0, rho)
    }
}

struct Factor {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    alpha0: f64,
}

/// Relative change of the BDF leading coefficient that forces a refactorization.
const ALPHA_DRIFT: f64 = 0.3;

enum NewtonOutcome {
    Converged(Vec<f64>),
    Failed,
}

/// One accepted point of the history: time, Newton unknown and density.
#[derive(Clone)]
struct HistPoint {
    t: f64,
    v: Vec<f64>,
    rho: Vec<f64>,
}

/// Integrator state: accepted history and the current Jacobian factorization.
struct Stepper<'s, 'a> {
    sys: &'s ChSystem<'a>,
    cfg: &'s SolverConfig,
    hist: Vec<HistPoint>,
    factor: Option<Factor>,
    stats: SolverStats,
}

/// Lagrange extrapolation of the last `k + 1` samples `(t, values)` to `t`.
fn extrapolate<'v>(pts: impl Iterator<Item = (f64, &'v [f64])> + Clone, t: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for (a, (ta, va)) in pts.clone().enumerate() {
        if out.is_empty() {
            out = vec![0.0; va.len()];
        }
        let mut l = 1.0;
        for (b, (tb, _)) in pts.clone().enumerate() {
            if a != b {
                l *= (t - tb) / (ta - tb);
            }
        }
        for (o, v) in out.iter_mut().zip(va) {
            *o += l * v;
        }
    }
    out
}

impl<'s, 'a> Stepper<'s, 'a> {
    fn new(sys: &'s ChSystem<'a>, cfg: &'s SolverConfig, hist: Vec<HistPoint>) -> Self {
        Self {
            sys,
            cfg,
            hist,
            factor: None,
            stats: SolverStats::default(),
        }
    }

    fn tail(&self, k: usize) -> &[HistPoint] {
        &self.hist[self.hist.len() - (k + 1)..]
    }

    fn extrapolate_v(&self, k: usize, t: f64) -> Vec<f64> {
        extrapolate(self.tail(k).iter().map(|p| (p.t, p.v.as_slice())), t)
    }

    fn extrapolate_rho(&self, k: usize, t: f64) -> Vec<f64> {
        extrapolate(self.tail(k).iter().map(|p| (p.t, p.rho.as_slice())), t)
    }

    fn refactor(&mut self, v: &[f64], alpha0: f64) -> Result<()> {
        let j = self.sys.newton_jacobian(v, alpha0)?;
        self.factor = Some(Factor { lu: j.lu(), alpha0 });
        self.stats.factorizations += 1;
        Ok(())
    }

    /// Refactor, turning domain errors into a Newton failure.
    fn try_refactor(&mut self, v: &[f64], alpha0: f64) -> Result<bool> {
        match self.refactor(v, alpha0) {
            Ok(()) => Ok(true),
            Err(Error::Domain(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn newton(&mut self, guess: Vec<f64>, alpha0: f64, hist_term: &[f64]) -> Result<NewtonOutcome> {
        let mut v = guess;
        let mut fresh = false;
        let stale = match &self.factor {
            Some(f) => (f.alpha0 / alpha0 - 1.0).abs() > ALPHA_DRIFT,
            None => true,
        };
        if stale {
            if !self.try_refactor(&v, alpha0)? {
                return Ok(NewtonOutcome::Failed);
            }
            fresh = true;
        }
        let mut prev = f64::INFINITY;
        let mut iter = 0;
        loop {
            iter += 1;
            self.stats.newton_iterations += 1;
            let r = match self.sys.newton_residual(&v, alpha0, hist_term) {
                Ok(r) => r,
                Err(Error::Domain(_)) => return Ok(NewtonOutcome::Failed),
                Err(e) => return Err(e),
            };
            let delta = match self.factor.as_ref().and_then(|f| f.lu.solve(&r)) {
                Some(d) => d,
                None => {
                    if fresh || !self.try_refactor(&v, alpha0)? {
                        return Ok(NewtonOutcome::Failed);
                    }
                    fresh = true;
                    prev = f64::INFINITY;
                    continue;
                }
            };
            // Updates are measured relative to the size of the unknown once it
            // exceeds one, which only happens for the entropy variable.
            let dn = v
                .iter()
                .zip(delta.iter())
                .fold(0.0f64, |m, (x, d)| m.max(d.abs() / x.abs().max(1.0)));
            if !dn.is_finite() {
                return Ok(NewtonOutcome::Failed);
            }
            for (x, d) in v.iter_mut().zip(delta.iter()) {
                *x -= d;
            }
            // The remaining error of a linearly contracting iteration is about
            // rate / (1 - rate) times the last update, so at least two
            // iterations are needed to measure the rate.
            let rate = dn / prev;
            let contraction = rate.min(0.99);
            if dn == 0.0 || (iter > 1 && dn * contraction / (1.0 - contraction) <= self.cfg.newton_tol) {
                return Ok(NewtonOutcome::Converged(v));
            }
            prev = dn;
            if rate > 0.5 || iter >= self.cfg.newton_max_iter {
                if fresh && (rate > 0.9 || iter >= self.cfg.newton_max_iter) {
                    return Ok(NewtonOutcome::Failed);
                }
                if !fresh {
                    if !self.try_refactor(&v, alpha0)? {
                        return Ok(NewtonOutcome::Failed);
                    }
                    fresh = true;
                    prev = f64::INFINITY;
                    iter = 0;
                }
            }
        }
    }

    /// Attempt one step of size `h` at the given order; returns the new
    /// unknown and density together with the scaled error norm.
    fn attempt(&mut self, h: f64, order: u8) -> Result<Option<(HistPoint, f64)>> {
        let n = self.hist.len();
        let last = &self.hist[n - 1];
        let t_new = last.t + h;
        let (alpha0, hist_term) = if order == 1 {
            (1.0 / h, last.rho.iter().map(|v| -v / h).collect::<Vec<_>>())
        } else {
            let before = &self.hist[n - 2];
            let w = h / (last.t - before.t);
            let a0 = (1.0 + 2.0 * w) / (h * (1.0 + w));
            let a1 = -(1.0 + w) / h;
            let a2 = w * w / (h * (1.0 + w));
            (a0, last.rho.iter().zip(&before.rho).map(|(x, y)| a1 * x + a2 * y).collect())
        };
        let k_pred = (n - 1).min(order as usize);
        let guess = self.extrapolate_v(k_pred, t_new);
        let v = match self.newton(guess, alpha0, &hist_term)? {
            NewtonOutcome::Converged(v) => v,
            NewtonOutcome::Failed => return Ok(None),
        };
        let rho = self.sys.density(&v);
        let pred = self.extrapolate_rho(k_pred, t_new);
        let span = t_new - self.hist[n - 1 - k_pred].t;
        let factor = if k_pred == 0 { 0.5 } else { h / span };
        let err = rho
            .iter()
            .zip(&pred)
            .map(|(c, p)| factor * (c - p).abs() / (self.cfg.abs_tol + self.cfg.rel_tol * c.abs()))
            .fold(0.0f64, f64::max);
        Ok(Some((HistPoint { t: t_new, v, rho }, err)))
    }
}

/// Single implicit step from `state` (first-order) or from `state` with the
/// previous accepted state `prev` (second-order). Returns the new state and
/// the scaled local error estimate.
pub fn step(
    sys: &ChSystem,
    prev: Option<&ChState>,
    state: &ChState,
    dt: f64,
    order: u8,
    cfg: &SolverConfig,
) -> Result<(ChState, f64)> {
    if !(1..=2).contains(&order) {
        return Err(Error::invalid(format!("BDF order must be 1 or 2, got {order}")));
    }
    let point = |s: &ChState| HistPoint {
        t: s.t,
        v: sys.unknown_of(s),
        rho: s.rho.clone(),
    };
    let mut hist = Vec::new();
    if order == 2 {
        let p = prev.ok_or_else(|| Error::invalid("second-order step needs the previous state"))?;
        hist.push(point(p));
    }
    hist.push(point(state));
    let mut st = Stepper::new(sys, cfg, hist);
    match st.attempt(dt, order)? {
        Some((p, err)) => Ok((sys.state_from_unknown(p.t, &p.v)?, err)),
        None => Err(Error::Integration {
            t: state.t,
            msg: "Newton iteration failed".into(),
            last_rho: state.rho.clone(),
        }),
    }
}

/// Adaptive BDF integration from a (possibly inconsistent) initial field.
pub fn integrate(rho0: &[f64], op: &ConvOperator, pot: Potential, grid: &Grid2D, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let sys = ChSystem::with_formulation(grid, op, pot, cfg.mobility, cfg.formulation)?;
    let init = sys.consistent_init(rho0)?;
    integrate_from(&sys, init, cfg)
}

/// Adaptive BDF integration from a consistent state.
pub fn integrate_from(sys: &ChSystem, init: ChState, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let t0 = init.t;
    let t_end = t0 + cfg.t_end;
    let mut outputs_pending: Vec<f64> = cfg
        .output_times
        .iter()
        .copied()
        .filter(|&t| t >= t0 && t <= t_end)
        .collect();
    outputs_pending.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut outputs = Vec::new();
    while outputs_pending.last() == Some(&t0) {
        outputs_pending.pop();
        outputs.push(init.clone());
    }
    let first = HistPoint {
        t: t0,
        v: sys.unknown_of(&init),
        rho: init.rho.clone(),
    };
    let mut st = Stepper::new(sys, cfg, vec![first]);
    let mut records = Vec::new();
    let mut states = Vec::new();
    if cfg.keep_states {
        states.push((t0, init.rho.clone()));
    }
    let mass0 = init.mass;
    let mut last_energy = init.energy;
    let mut h = cfg.fixed_dt.unwrap_or(cfg.initial_dt).min(cfg.t_end);
    let mut t = t0;
    let mut current = init.clone();
    let fail = |t: f64, msg: String, rho: &[f64]| Error::Integration {
        t,
        msg,
        last_rho: rho.to_vec(),
    };
    while t < t_end {
        if st.stats.accepted >= cfg.max_steps {
            return Err(fail(t, format!("step limit {} reached", cfg.max_steps), &current.rho));
        }
        let remaining = t_end - t;
        let mut h_try = h.min(cfg.max_dt);
        let last_step = h_try >= remaining * (1.0 - 1e-12);
        if last_step {
            h_try = remaining;
        } else if h_try > 0.5 * remaining && cfg.fixed_dt.is_none() {
            h_try = 0.5 * remaining;
        }
        if h_try < MIN_DT {
            return Err(fail(t, format!("step size {h_try:e} underflow"), &current.rho));
        }
        let order = if st.hist.len() >= 3 { cfg.max_order } else { 1 };
        match st.attempt(h_try, order)? {
            Some((mut point, err)) if cfg.fixed_dt.is_some() || err <= 1.0 => {
                if last_step {
                    point.t = t_end;
                }
                let t_new = point.t;
                let state = sys.state_from_unknown(t_new, &point.v)?;
                st.hist.push(point);
                if st.hist.len() > 3 {
                    st.hist.remove(0);
                }
                st.stats.accepted += 1;
                st.stats.max_mass_drift = st.stats.max_mass_drift.max((state.mass - mass0).abs());
                st.stats.max_energy_increase = st.stats.max_energy_increase.max(state.energy - last_energy);
                last_energy = state.energy;
                records.push(StepRecord {
                    t: t_new,
                    dt: h_try,
                    order,
                    mass: state.mass,
                    energy: state.energy,
                    sup_norm: state.sup_norm,
                });
                while let Some(&to) = outputs_pending.last() {
                    if to > t_new {
                        break;
                    }
                    outputs_pending.pop();
                    let out = if to == t_new {
                        state.clone()
                    } else {
                        let k = (st.hist.len() - 1).min(2);
                        sys.state_from_unknown(to, &st.extrapolate_v(k, to))?
                    };
                    outputs.push(out);
                }
                if cfg.keep_states {
                    states.push((t_new, state.rho.clone()));
                }
                t = t_new;
                current = state;
                if cfg.fixed_dt.is_none() {
                    let ratio = 0.9 * err.max(1e-10).powf(-1.0 / (order as f64 + 1.0));
                    h = h_try * ratio.clamp(0.2, 5.0);
                }
            }
            Some((_, err)) => {
                st.stats.rejected += 1;
                let ratio = 0.9 * err.powf(-1.0 / (order as f64 + 1.0));
                h = h_try * ratio.clamp(0.2, 0.9);
            }
            None => {
                st.stats.rejected += 1;
                if cfg.fixed_dt.is_some() {
                    return Err(fail(t, "Newton iteration failed at the fixed step".into(), &current.rho));
                }
                st.factor = None;
                h = 0.5 * h_try;
            }
        }
    }
    Ok(Trajectory {
        initial: init,
        records,
        outputs,
        final_state: current,
        states,
        stats: st.stats,
    })
}

/// Equilibrium summary of a long run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `1 - max_{t >= tau} |rho(t)|_inf`.
    pub delta: f64,
    pub tau: f64,
    /// Mean of `F'(rho(T)) - op rho(T)`.
    pub mu_inf: f64,
    /// `|v - mean v|_inf` for `v = F'(rho(T)) - op rho(T)`.
    pub mu_flatness: f64,
    /// `(t, |rho(t) - rho(T)|_L2)` at the accepted steps.
    pub l2_to_final: Vec<(f64, f64)>,
    /// Fitted `p` in `|rho(t) - rho(T)| ~ C t^-p` over the fit window.
    pub decay_exponent: Option<f64>,
    pub decay_r2: Option<f64>,
    pub fit_window: (f64, f64),
    /// Whether the last step satisfied the stationarity test.
    pub stationary: bool,
}

/// Stationarity threshold on `|rho_k - rho_{k-1}|_inf / dt`.
pub const STATIONARY_RATE: f64 = 1e-10;

/// Compute equilibrium diagnostics. `tau` defaults to `T/2`; the decay fit
/// window defaults to [`post_transient_window`].
pub fn equilibrium_diagnostics(
    traj: &Trajectory,
    sys: &ChSystem,
    tau: Option<f64>,
    fit_window: Option<(f64, f64)>,
) -> Result<Diagnostics> {
    let fin = &traj.final_state;
    let t0 = traj.initial.t;
    let span = fin.t - t0;
    let tau = tau.unwrap_or(t0 + 0.5 * span);
    let mut max_sup = fin.sup_norm;
    for r in &traj.records {
        if r.t >= tau {
            max_sup = max_sup.max(r.sup_norm);
        }
    }
    let mu_inf = sys.mass(&fin.mu);
    let mu_flatness = fin.mu.iter().fold(0.0f64, |a, v| a.max((v - mu_inf).abs()));
    let l2 = |a: &[f64]| -> f64 {
        let sq: Vec<f64> = a.iter().zip(&fin.rho).map(|(x, y)| (x - y) * (x - y)).collect();
        sys.grid.integrate(&sq).max(0.0).sqrt()
    };
    let l2_to_final: Vec<(f64, f64)> = traj.states.iter().map(|(t, r)| (*t, l2(r))).collect();
    let window = fit_window.unwrap_or_else(|| post_transient_window(&l2_to_final));
    let pts: Vec<(f64, f64)> = l2_to_final
        .iter()
        .filter(|(t, e)| *t >= window.0 && *t <= window.1 && *e > 0.0 && *t > 0.0)
        .map(|(t, e)| (t.ln(), e.ln()))
        .collect();
    let (decay_exponent, decay_r2) = match linear_fit(&pts) {
        Some((slope, r2)) => (Some(-slope), Some(r2)),
        None => (None, None),
    };
    let stationary = match traj.states.len() {
        n if n >= 2 => {
            let (ta, a) = &traj.states[n - 2];
            let (tb, b) = &traj.states[n - 1];
            let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            d / (tb - ta) < STATIONARY_RATE
        }
        _ => false,
    };
    Ok(Diagnostics {
        delta: 1.0 - max_sup,
        tau,
        mu_inf,
        mu_flatness,
        l2_to_final,
        decay_exponent,
        decay_r2,
        fit_window: window,
        stationary,
    })
}

/// Relative levels of `|rho(t) - rho(T)|` bounding the default decay fit window.
pub const TRANSIENT_LEVEL: f64 = 0.1;
pub const FLOOR_LEVEL: f64 = 1e-6;

/// Times between the first drop of the curve below `TRANSIENT_LEVEL` times its
/// initial value and the last point still above `FLOOR_LEVEL` times it. Once the
/// state has settled, the difference to the final state is rounding noise and
/// carries no decay information.
pub fn post_transient_window(curve: &[(f64, f64)]) -> (f64, f64) {
    let Some(&(t_first, e0)) = curve.first() else {
        return (0.0, 0.0);
    };
    let start = curve
        .iter()
        .find(|(_, e)| *e <= TRANSIENT_LEVEL * e0)
        .map_or(t_first, |p| p.0);
    let end = curve
        .iter()
        .rev()
        .find(|(_, e)| *e >= FLOOR_LEVEL * e0)
        .map_or(start, |p| p.0);
    (start, end.max(start))
}

/// Least-squares line through `(x, y)`; returns slope and coefficient of determination.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some((slope, r2))
}

/// Outcome of the time-shift check between the singular and regularized potentials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftReport {
    /// `|rho_omega(T) - rho(T + 3 sigma)|_L2`.
    pub discrepancy: f64,
    pub sup_discrepancy: f64,
    pub shift: f64,
    pub horizon: f64,
}

/// Integrate the logarithmic system to `3 sigma` and on to `T + 3 sigma`;
/// restart from `rho(3 sigma)` with the regularized potential for time `T`
/// and compare the end states.
#[allow(clippy::too_many_arguments)]
pub fn regularized_shift_check(
    rho0: &[f64],
    op: &ConvOperator,
    pot_log: Potential,
    pot_reg: Potential,
    sigma: f64,
    horizon: f64,
    grid: &Grid2D,
    cfg: &SolverConfig,
) -> Result<ShiftReport> {
    if !(sigma > 0.0 && horizon > 0.0) {
        return Err(Error::invalid("shift and horizon must be positive"));
    }
    let shift = 3.0 * sigma;
    let long_cfg = SolverConfig {
        t_end: shift + horizon,
        output_times: vec![shift],
        keep_states: false,
        ..cfg.clone()
    };
    let original = integrate(rho0, op, pot_log, grid, &long_cfg)?;
    let restart = original
        .outputs
        .first()
        .ok_or_else(|| Error::invalid("shift time was not reached"))?;
    let reg_sys = ChSystem::with_formulation(grid, op, pot_reg, cfg.mobility, cfg.formulation)?;
    let start = reg_sys.state(0.0, restart.rho.clone())?;
    let reg_cfg = SolverConfig {
        t_end: horizon,
        output_times: Vec::new(),
        keep_states: false,
        ..cfg.clone()
    };
    let regularized = integrate_from(&reg_sys, start, &reg_cfg)?;
    let diff: Vec<f64> = regularized
        .final_state
        .rho
        .iter()
        .zip(&original.final_state.rho)
        .map(|(a, b)| a - b)
        .collect();
    let sq: Vec<f64> = diff.iter().map(|d| d * d).collect();
    Ok(ShiftReport {
        discrepancy: grid.integrate(&sq).max(0.0).sqrt(),
        sup_discrepancy: diff.iter().fold(0.0f64, |a, d| a.max(d.abs())),
        shift,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::unit_square_grid;

    #[test]
    fn zero_state_has_zero_residual() {
        let g = unit_square_grid(6).unwrap();
        let op = ConvOperator::zero(6);
        let sys = ChSystem::new(&g, &op, Potential::logarithmic(2.0), 1.0).unwrap();
        let z = vec![0.0; 36];
        let r = sys.residual(&z, &z, &z).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn energy_of_pure_phase() {
        let g = unit_square_grid(8).unwrap();
        let op = ConvOperator::zero(8);
        let sys = ChSystem::new(&g, &op, Potential::logarithmic(2.0), 1.0).unwrap();
        let e = sys.energy(&vec![1.0; 64]).unwrap();
        assert!((e - 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
        assert_eq!(sys.energy(&vec![0.0; 64]).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::default();
        assert!(c.validate().is_ok());
        c.max_order = 3;
        assert!(c.validate().is_err());
        let c = SolverConfig {
            abs_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn linear_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = (1..20).map(|k| ((k as f64).ln(), 3.0 - 1.5 * (k as f64).ln())).collect();
        let (s, r2) = linear_fit(&pts).unwrap();
        assert!((s + 1.5).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
