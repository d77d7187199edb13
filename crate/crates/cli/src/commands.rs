use std::path::{Path, PathBuf};
use std::time::Instant;

use nlch::cache;
use nlch::closed_forms::{g_eps_square, j_square, EpsNeighborhood};
use nlch::domain_maps::pullback_operator;
use nlch::initial;
use nlch::kernels::{kernel_evaluations, Kernel, KernelId};
use nlch::multishape::{assemble_operator, assemble_operator_3d, validate as validate_operator, AssemblyMode, ConvOperator};
use nlch::potentials::Potential;
use nlch::solver::{
    equilibrium_diagnostics, integrate_from, regularized_shift_check, ChState, ChSystem, Diagnostics, SolverStats,
    StepRecord, Trajectory,
};
use nlch::spectral::{cube_grid, unit_square_grid, Grid2D};
use nlch::{Error, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::{read_csv, read_snapshots, write_csv, write_snapshots, TrajectoryRow, TRAJECTORY_HEADER};
use crate::config::{InitialKind, KernelKind, RunConfig};
use crate::Failure;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    cache_override: Option<PathBuf>,
    seed: u64,
    exec: Execution,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf, cache_override: Option<PathBuf>, seed: u64) -> Self {
        Self {
            cfg,
            out,
            cache_override,
            seed,
            exec: Execution::default(),
        }
    }

    fn cache_path(&self) -> PathBuf {
        self.cache_override
            .clone()
            .or_else(|| self.cfg.conv.cache.clone())
            .unwrap_or_else(|| self.out.join("operator.bin"))
    }

    fn grid(&self) -> Result<Grid2D, Failure> {
        Ok(unit_square_grid(self.cfg.grid.n)?)
    }

    fn planar_only(&self, what: &str) -> Result<(), Failure> {
        if self.cfg.kernel.kind == KernelKind::Newtonian3dRegularized {
            return Err(Failure::Config(format!("{what} needs a planar kernel")));
        }
        Ok(())
    }

    fn unmapped_only(&self, what: &str) -> Result<(), Failure> {
        if self.cfg.domain_map()?.is_some() {
            return Err(Failure::Config(format!("{what} runs on the unit square only")));
        }
        Ok(())
    }
}

/// Where an operator came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Assembled,
    Cache,
    /// Cache built with another nonzero strength, rescaled.
    Rescaled,
}

/// Kernel shape recorded next to the cache, since the binary header only
/// stores the kernel family.
fn sidecar_path(cache: &Path) -> PathBuf {
    let mut name = cache.as_os_str().to_owned();
    name.push(".kernel.json");
    PathBuf::from(name)
}

fn sidecar_matches(cache: &Path, kernel: &Kernel) -> bool {
    std::fs::read_to_string(sidecar_path(cache))
        .ok()
        .and_then(|s| serde_json::from_str::<nlch::kernels::KernelKind>(&s).ok())
        .is_some_and(|kind| kind == kernel.kind)
}

fn same_setup(cached: &ConvOperator, cfg: &RunConfig, kernel: &Kernel, path: &Path) -> bool {
    let meta = &cached.meta;
    let three_d = cfg.kernel.kind == KernelKind::Newtonian3dRegularized;
    let shape = if three_d {
        meta.mode == AssemblyMode::Direct3d && meta.eps == kernel_sigma(kernel)
    } else {
        meta.mode == AssemblyMode::from(cfg.conv.partition) && meta.eps == cfg.conv.eps && meta.alpha == cfg.conv.alpha
    };
    let map = cfg.domain_map().ok().flatten();
    let corrected = if three_d {
        meta.corrected == (cfg.conv.correction_3d == nlch::multishape::Correction3d::ConstantExact)
    } else {
        meta.corrected == cfg.conv.corrected || map.is_some()
    };
    shape && corrected && sidecar_matches(path, kernel) && meta.n == cfg.grid.n && meta.kernel == kernel.id() && meta.map == map
}

fn kernel_sigma(kernel: &Kernel) -> f64 {
    match kernel.kind {
        nlch::kernels::KernelKind::Newtonian3dRegularized { sigma } => sigma,
        _ => f64::NAN,
    }
}

fn assemble(ctx: &Context, kernel: &Kernel) -> Result<ConvOperator, Failure> {
    let cfg = &ctx.cfg;
    if cfg.kernel.kind == KernelKind::Newtonian3dRegularized {
        let grid = cube_grid(cfg.grid.n, -1.0, 1.0)?;
        return Ok(assemble_operator_3d(&grid, kernel, cfg.conv.correction_3d, ctx.exec)?);
    }
    let grid = ctx.grid()?;
    Ok(match cfg.domain_map()? {
        None => assemble_operator(&grid, kernel, cfg.conv.eps, cfg.conv.alpha, cfg.conv.partition, cfg.conv.corrected, ctx.exec)?,
        Some(map) => pullback_operator(&map, &grid, kernel, cfg.conv.eps, cfg.conv.alpha, ctx.exec)?,
    })
}

/// Load the configured operator from the cache when its setup matches,
/// otherwise assemble it and refresh the cache.
fn obtain_operator(ctx: &Context) -> Result<(ConvOperator, Source, PathBuf), Failure> {
    let kernel = ctx.cfg.kernel()?;
    let path = ctx.cache_path();
    if path.exists() {
        match cache::read_operator(&path) {
            Ok(mut op) if same_setup(&op, &ctx.cfg, &kernel, &path) => {
                if op.meta.eta == kernel.eta {
                    return Ok((op, Source::Cache, path));
                }
                if op.meta.eta != 0.0 {
                    op.matrix *= kernel.eta / op.meta.eta;
                    op.meta.eta = kernel.eta;
                    return Ok((op, Source::Rescaled, path));
                }
            }
            Ok(_) => eprintln!("nlch: cache {} was built for another setup; rebuilding", path.display()),
            Err(e) => eprintln!("nlch: ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let op = assemble(ctx, &kernel)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    cache::write_operator(&path, &op)?;
    std::fs::write(sidecar_path(&path), serde_json::to_string(&kernel.kind)?)?;
    Ok((op, Source::Assembled, path))
}

/// Maximum of `e_eps` for a planar Newtonian operator of any nonzero strength.
fn newton_error(op: &ConvOperator, grid: &Grid2D) -> Result<Option<f64>, Failure> {
    if op.meta.kernel != KernelId::Newtonian2d || op.meta.map.is_some() || op.meta.eta == 0.0 {
        return Ok(None);
    }
    let mut unit = op.clone();
    unit.matrix /= op.meta.eta;
    unit.meta.eta = 1.0;
    Ok(Some(validate_operator(&unit, grid)?.max))
}

pub fn build_operator(ctx: &Context) -> Result<(), Failure> {
    let start = Instant::now();
    let (op, source, path) = obtain_operator(ctx)?;
    let elapsed = start.elapsed().as_secs_f64();
    let verb = match source {
        Source::Assembled => "assembled",
        Source::Cache => "loaded",
        Source::Rescaled => "loaded and rescaled",
    };
    println!("operator {m}x{m} {verb} in {elapsed:.3} s -> {}", path.display(), m = op.dim());
    if ctx.cfg.kernel.kind != KernelKind::Newtonian3dRegularized {
        if let Some(e) = newton_error(&op, &ctx.grid()?)? {
            println!("max e_eps = {e:e}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    n: usize,
    alpha: f64,
    eps: f64,
    max_e: f64,
    mean_e: f64,
    max_g_eps: f64,
}

#[derive(Serialize)]
struct SwarmRow {
    n: usize,
    alpha: f64,
    eps: f64,
    node: usize,
    x1: f64,
    x2: f64,
    e: f64,
    /// `|J - I_1[1]|`, the error without the near-field correction.
    far_field_gap: f64,
}

pub fn validate(ctx: &Context) -> Result<(), Failure> {
    if ctx.cfg.kernel.kind != KernelKind::Newtonian2d {
        return Err(Failure::Config("validation needs kernel.kind = \"newtonian2d\"".into()));
    }
    ctx.unmapped_only("validation")?;
    let sweep = &ctx.cfg.validate;
    let mut rows = Vec::new();
    let mut swarm = Vec::new();
    for &eps in &sweep.eps {
        let nb = EpsNeighborhood::square(eps)?;
        for &(n, alpha) in &sweep.pairs {
            let grid = unit_square_grid(n)?;
            let op = assemble_operator(&grid, &Kernel::newtonian2d(1.0), eps, alpha, ctx.cfg.conv.partition, true, ctx.exec)?;
            let report = validate_operator(&op, &grid)?;
            let sums = op.row_sums();
            let mut max_g = 0.0f64;
            for (i, (&x, &e)) in grid.points.iter().zip(&report.per_point).enumerate() {
                let g = g_eps_square(x, nb)?;
                max_g = max_g.max(g.abs());
                swarm.push(SwarmRow {
                    n,
                    alpha,
                    eps,
                    node: i,
                    x1: x[0],
                    x2: x[1],
                    e,
                    far_field_gap: (j_square(x)? - (sums[i] - g)).abs(),
                });
            }
            println!("eps {eps:e} N {n} alpha {alpha}: max e_eps {:e}, mean {:e}", report.max, report.mean);
            rows.push(SweepRow {
                n,
                alpha,
                eps,
                max_e: report.max,
                mean_e: report.mean,
                max_g_eps: max_g,
            });
        }
    }
    write_csv(&ctx.out.join("validate.csv"), &["n", "alpha", "eps", "max_e", "mean_e", "max_g_eps"], &rows)?;
    write_csv(
        &ctx.out.join("swarm.csv"),
        &["n", "alpha", "eps", "node", "x1", "x2", "e", "far_field_gap"],
        &swarm,
    )?;
    Ok(())
}

fn initial_state(ctx: &Context, grid: &Grid2D) -> Result<Vec<f64>, Failure> {
    let ic = &ctx.cfg.initial;
    Ok(match ic.kind {
        InitialKind::Wave => initial::wave(grid),
        InitialKind::Compact => initial::compact(grid, ic.a.unwrap_or(0.1), ctx.exec)?,
        InitialKind::Constant => initial::constant(grid, ic.c.unwrap_or_default()),
        InitialKind::NeumannMode => initial::neumann_mode(grid, ic.amplitude.unwrap_or(0.1)),
        InitialKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let (c, amp) = (ic.c.unwrap_or_default(), ic.amplitude.unwrap_or(0.05));
            (0..grid.len()).map(|_| c + amp * rng.gen_range(-1.0..=1.0)).collect()
        }
        InitialKind::File => {
            #[derive(serde::Deserialize)]
            struct Row {
                rho: f64,
            }
            let path = ic.path.as_deref().unwrap_or(Path::new(""));
            let rows: Vec<Row> = read_csv(path)?;
            if rows.len() != grid.len() {
                return Err(Failure::Config(format!(
                    "{} has {} values, the grid has {} nodes",
                    path.display(),
                    rows.len(),
                    grid.len()
                )));
            }
            rows.into_iter().map(|r| r.rho).collect()
        }
    })
}

#[derive(Serialize)]
struct DiagnosticsReport<'a> {
    #[serde(flatten)]
    diagnostics: &'a Diagnostics,
    energy: Vec<(f64, f64)>,
    stats: Option<SolverStats>,
    kernel_evaluations: Option<u64>,
    notes: Vec<String>,
}

fn trajectory_rows(traj: &Trajectory, diag: &Diagnostics) -> Vec<TrajectoryRow> {
    let init = &traj.initial;
    let mut rows = vec![TrajectoryRow {
        t: init.t,
        mass: init.mass,
        energy: init.energy,
        sup_norm: init.sup_norm,
        l2_to_final: f64::NAN,
        dt: 0.0,
        order: 0,
    }];
    rows.extend(traj.records.iter().map(|r| TrajectoryRow {
        t: r.t,
        mass: r.mass,
        energy: r.energy,
        sup_norm: r.sup_norm,
        l2_to_final: f64::NAN,
        dt: r.dt,
        order: r.order,
    }));
    for (row, (_, l2)) in rows.iter_mut().zip(&diag.l2_to_final) {
        row.l2_to_final = *l2;
    }
    rows
}

fn write_report(ctx: &Context, diag: &Diagnostics, energy: Vec<(f64, f64)>, stats: Option<SolverStats>, evals: Option<u64>, notes: Vec<String>) -> Result<(), Failure> {
    let report = DiagnosticsReport {
        diagnostics: diag,
        energy,
        stats,
        kernel_evaluations: evals,
        notes,
    };
    std::fs::write(ctx.out.join("diagnostics.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "delta = {:e}, mu_inf = {:e}, mu flatness = {:e}, {}, stationary = {}",
        diag.delta,
        diag.mu_inf,
        diag.mu_flatness,
        match (diag.decay_exponent, diag.decay_r2) {
            (Some(p), Some(r2)) => format!("decay exponent = {p:.4} (R^2 {r2:.4})"),
            _ => "no decay fit".to_string(),
        },
        diag.stationary
    );
    Ok(())
}

fn dump_failure(ctx: &Context, grid: &Grid2D, err: &Error) -> Result<(), Failure> {
    if let Error::Integration { last_rho, .. } = err {
        #[derive(Serialize)]
        struct Row {
            node: usize,
            x1: f64,
            x2: f64,
            rho: f64,
        }
        let rows: Vec<Row> = last_rho
            .iter()
            .zip(&grid.points)
            .enumerate()
            .map(|(node, (&rho, x))| Row { node, x1: x[0], x2: x[1], rho })
            .collect();
        let path = ctx.out.join("failure_state.csv");
        write_csv(&path, &["node", "x1", "x2", "rho"], &rows)?;
        eprintln!("nlch: last state written to {}", path.display());
    }
    Ok(())
}

pub fn solve(ctx: &Context) -> Result<(), Failure> {
    ctx.planar_only("solve")?;
    ctx.unmapped_only("solve")?;
    let grid = ctx.grid()?;
    let evals_before = kernel_evaluations();
    let (op, source, _) = obtain_operator(ctx)?;
    let evals = kernel_evaluations() - evals_before;
    let rho0 = initial_state(ctx, &grid)?;
    let pot = ctx.cfg.potential()?;
    let mut solver_cfg = ctx.cfg.time.solver();
    solver_cfg.keep_states = true;
    let sys = ChSystem::with_formulation(&grid, &op, pot, solver_cfg.mobility, solver_cfg.formulation)?;
    let start = Instant::now();
    let traj = sys.consistent_init(&rho0).and_then(|init| integrate_from(&sys, init, &solver_cfg));
    let traj = match traj {
        Ok(t) => t,
        Err(e) => {
            dump_failure(ctx, &grid, &e)?;
            return Err(e.into());
        }
    };
    println!(
        "integrated to t = {} in {:.3} s: {} steps ({} rejected), operator {}, {evals} kernel evaluations",
        traj.final_state.t,
        start.elapsed().as_secs_f64(),
        traj.stats.accepted,
        traj.stats.rejected,
        match source {
            Source::Assembled => "assembled",
            Source::Cache => "loaded from cache",
            Source::Rescaled => "rescaled from cache",
        }
    );
    let d = &ctx.cfg.diagnostics;
    let diag = equilibrium_diagnostics(&traj, &sys, d.tau, d.fit_window)?;
    let rows = trajectory_rows(&traj, &diag);
    write_csv(&ctx.out.join("trajectory.csv"), &TRAJECTORY_HEADER, &rows)?;
    let m = grid.len();
    let mut snaps: Vec<(f64, &[f64])> = traj.outputs.iter().map(|s| (s.t, s.rho.as_slice())).collect();
    if snaps.last().map(|s| s.0) != Some(traj.final_state.t) {
        snaps.push((traj.final_state.t, &traj.final_state.rho));
    }
    write_snapshots(&ctx.out.join("snapshots.bin"), m, &snaps)?;
    let states: Vec<(f64, &[f64])> = traj.states.iter().map(|(t, r)| (*t, r.as_slice())).collect();
    write_snapshots(&ctx.out.join("states.bin"), m, &states)?;

    let mut notes = Vec::new();
    if ctx.cfg.initial.kind == InitialKind::Constant {
        let c = ctx.cfg.initial.c.unwrap_or_default();
        let drift = traj.final_state.rho.iter().fold(0.0f64, |a, v| a.max((v - c).abs()));
        notes.push(format!(
            "constant initial state: max |rho(T) - c| = {drift:e}; a constant is stationary only when op 1 has no normal flux"
        ));
    }
    let energy = rows.iter().map(|r| (r.t, r.energy)).collect();
    write_report(ctx, &diag, energy, Some(traj.stats), Some(evals), notes)
}

pub fn diagnostics(ctx: &Context) -> Result<(), Failure> {
    ctx.planar_only("diagnostics")?;
    ctx.unmapped_only("diagnostics")?;
    let grid = ctx.grid()?;
    let rows: Vec<TrajectoryRow> = read_csv(&ctx.out.join("trajectory.csv"))?;
    let states = read_snapshots(&ctx.out.join("states.bin"))?;
    if rows.is_empty() || rows.len() != states.len() {
        return Err(Failure::Config(format!(
            "trajectory.csv has {} rows but states.bin has {} states",
            rows.len(),
            states.len()
        )));
    }
    let (op, _, _) = obtain_operator(ctx)?;
    let pot = ctx.cfg.potential()?;
    let time = &ctx.cfg.time;
    let sys = ChSystem::with_formulation(&grid, &op, pot, time.mobility, time.formulation)?;
    let state = |k: usize| -> Result<ChState, Failure> { Ok(sys.state(states[k].0, states[k].1.clone())?) };
    let records = rows[1..]
        .iter()
        .map(|r| StepRecord {
            t: r.t,
            dt: r.dt,
            order: r.order,
            mass: r.mass,
            energy: r.energy,
            sup_norm: r.sup_norm,
        })
        .collect();
    let traj = Trajectory {
        initial: state(0)?,
        records,
        outputs: Vec::new(),
        final_state: state(states.len() - 1)?,
        states,
        stats: SolverStats::default(),
    };
    let d = &ctx.cfg.diagnostics;
    let diag = equilibrium_diagnostics(&traj, &sys, d.tau, d.fit_window)?;
    let energy = rows.iter().map(|r| (r.t, r.energy)).collect();
    write_report(ctx, &diag, energy, None, None, Vec::new())
}

#[derive(Serialize)]
struct ShiftSummary {
    horizon: f64,
    discrepancy: f64,
    sup_discrepancy: f64,
}

#[derive(Serialize)]
struct RegularizedReport {
    theta: f64,
    omega: f64,
    sigma: f64,
    shift: f64,
    short: ShiftSummary,
    long: ShiftSummary,
}

pub fn regularized(ctx: &Context) -> Result<(), Failure> {
    ctx.planar_only("regularized")?;
    ctx.unmapped_only("regularized")?;
    let reg = ctx
        .cfg
        .regularized
        .clone()
        .ok_or_else(|| Failure::Config("the [regularized] table is required".into()))?;
    let theta = ctx.cfg.potential.theta;
    if !(theta > 0.0) {
        return Err(Failure::Config("the logarithmic potential needs theta > 0".into()));
    }
    let long = reg.horizon.unwrap_or(10.0 - 3.0 * reg.sigma);
    if !(long > 0.0) {
        return Err(Failure::Config(format!("long horizon {long} must be positive")));
    }
    let short = reg.short_horizon.unwrap_or(ctx.cfg.time.t_end);
    let grid = ctx.grid()?;
    let (op, _, _) = obtain_operator(ctx)?;
    let rho0 = initial_state(ctx, &grid)?;
    let log = Potential::logarithmic(theta);
    let smooth = Potential::regularized(theta, reg.omega)?;
    let solver_cfg = ctx.cfg.time.solver();
    let run = |horizon: f64| -> Result<ShiftSummary, Failure> {
        let r = regularized_shift_check(&rho0, &op, log, smooth, reg.sigma, horizon, &grid, &solver_cfg)?;
        println!("horizon {horizon}: L2 discrepancy {:e}, sup {:e}", r.discrepancy, r.sup_discrepancy);
        Ok(ShiftSummary {
            horizon,
            discrepancy: r.discrepancy,
            sup_discrepancy: r.sup_discrepancy,
        })
    };
    let report = RegularizedReport {
        theta,
        omega: reg.omega,
        sigma: reg.sigma,
        shift: 3.0 * reg.sigma,
        short: run(short)?,
        long: run(long)?,
    };
    std::fs::write(ctx.out.join("regularized.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
