//! Run configuration read from a TOML file.
//!
//! Every table rejects unknown keys so a typo cannot silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use nlch::domain_maps::DomainMap;
use nlch::kernels::Kernel;
use nlch::multishape::PartitionMode;
use nlch::potentials::Potential;
use nlch::solver::{Formulation, SolverConfig};
use serde::Deserialize;

/// Default snapshot times, clipped to `[0, T]`; `T` itself is always added.
pub const DEFAULT_SNAPSHOTS: [f64; 6] = [0.0, 0.05, 0.3, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub conv: ConvConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub validate: SweepConfig,
    #[serde(default)]
    pub regularized: Option<RegularizedConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Newtonian2d,
    Mollifier,
    Mixture,
    Newtonian3dRegularized,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    #[serde(default = "one")]
    pub eta: f64,
    /// Mollifier radius.
    pub a: Option<f64>,
    /// Regularization radius of the 3D kernel; defaults to half the smallest node spacing.
    pub sigma: Option<f64>,
    /// Mollifier weight in the mixture kernel.
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    #[serde(default = "yes")]
    pub corrected: bool,
    pub cache: Option<PathBuf>,
    /// Diagonal treatment of the 3D operator.
    #[serde(default = "default_correction_3d")]
    pub correction_3d: nlch::multishape::Correction3d,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            eps: default_eps(),
            alpha: default_alpha(),
            partition: default_partition(),
            corrected: true,
            cache: None,
            correction_3d: default_correction_3d(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialKind {
    Logarithmic,
    Regularized,
    DoubleWell,
    Quadratic,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    #[serde(default = "default_potential")]
    pub kind: PotentialKind,
    #[serde(default = "default_theta")]
    pub theta: f64,
    pub omega: Option<f64>,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            kind: default_potential(),
            theta: default_theta(),
            omega: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    Wave,
    Compact,
    Constant,
    NeumannMode,
    /// Uniform noise around `c`, drawn from the `--seed` stream.
    Noise,
    File,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub kind: InitialKind,
    /// Mollifier radius for `compact`.
    pub a: Option<f64>,
    /// Value for `constant`, mean for `noise`.
    pub c: Option<f64>,
    pub amplitude: Option<f64>,
    /// One value per node, row-major in `x1`, for `file`.
    pub path: Option<PathBuf>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            kind: InitialKind::Wave,
            a: None,
            c: None,
            amplitude: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default = "one")]
    pub t_end: f64,
    #[serde(default = "default_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_tol")]
    pub rel_tol: f64,
    #[serde(default = "one")]
    pub mobility: f64,
    pub output_times: Option<Vec<f64>>,
    #[serde(default)]
    pub formulation: Formulation,
    pub max_steps: Option<usize>,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            abs_tol: default_tol(),
            rel_tol: default_tol(),
            mobility: 1.0,
            output_times: None,
            formulation: Formulation::default(),
            max_steps: None,
        }
    }
}

impl TimeConfig {
    pub fn snapshot_times(&self) -> Vec<f64> {
        let mut times = self.output_times.clone().unwrap_or_else(|| {
            DEFAULT_SNAPSHOTS.iter().copied().filter(|&t| t < self.t_end).collect()
        });
        times.retain(|&t| t <= self.t_end);
        if times.last() != Some(&self.t_end) {
            times.push(self.t_end);
        }
        times
    }

    pub fn solver(&self) -> SolverConfig {
        let defaults = SolverConfig::default();
        SolverConfig {
            t_end: self.t_end,
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            mobility: self.mobility,
            formulation: self.formulation,
            output_times: self.snapshot_times(),
            max_steps: self.max_steps.unwrap_or(defaults.max_steps),
            ..defaults
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum DomainConfig {
    #[default]
    Square,
    Rectangle {
        a1: f64,
        b1: f64,
        a2: f64,
        b2: f64,
    },
    Bulged {
        k: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_out(),
        }
    }
}

/// Operator validation sweep. Every `(n, alpha)` pair is combined with every `eps`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub pairs: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizedConfig {
    pub omega: f64,
    pub sigma: f64,
    /// Long horizon; defaults to `10 - 3 sigma`.
    pub horizon: Option<f64>,
    /// Short horizon; defaults to `time.t_end`.
    pub short_horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub tau: Option<f64>,
    pub fit_window: Option<(f64, f64)>,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}
fn default_alpha() -> f64 {
    4.0
}
fn default_partition() -> PartitionMode {
    PartitionMode::Maximal
}
fn default_correction_3d() -> nlch::multishape::Correction3d {
    nlch::multishape::Correction3d::None
}
fn default_potential() -> PotentialKind {
    PotentialKind::Logarithmic
}
fn default_theta() -> f64 {
    2.0
}
fn default_tol() -> f64 {
    1e-7
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// A configuration problem; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.grid.n < 2 {
            return Err(bad(format!("grid.n must be at least 2, got {}", self.grid.n)));
        }
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(format!("{name} must be positive and finite, got {v}")))
            }
        };
        if !(self.conv.eps > 0.0 && self.conv.eps < 0.5) {
            return Err(bad(format!("conv.eps must lie in (0, 1/2), got {}", self.conv.eps)));
        }
        positive(self.conv.alpha, "conv.alpha")?;
        positive(self.time.t_end, "time.t_end")?;
        positive(self.time.abs_tol, "time.abs_tol")?;
        positive(self.time.rel_tol, "time.rel_tol")?;
        positive(self.time.mobility, "time.mobility")?;
        if let Some(times) = &self.time.output_times {
            if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("time.output_times must be non-negative and strictly increasing"));
            }
        }
        if !self.kernel.eta.is_finite() {
            return Err(bad("kernel.eta must be finite"));
        }
        match self.kernel.kind {
            KernelKind::Mollifier | KernelKind::Mixture if self.kernel.a.is_none() => {
                return Err(bad("kernel.a is required for mollifier and mixture kernels"))
            }
            KernelKind::Mixture if self.kernel.weight.is_none() => {
                return Err(bad("kernel.weight is required for the mixture kernel"))
            }
            _ => {}
        }
        if self.kernel.kind == KernelKind::Newtonian3dRegularized && !matches!(self.domain, DomainConfig::Square) {
            return Err(bad("the 3D kernel lives on the cube [-1, 1]^3 and takes no domain map"));
        }
        self.domain_map()?;
        self.potential()?;
        for &e in &self.validate.eps {
            if !(e > 0.0 && e < 0.5) {
                return Err(bad(format!("validate.eps entries must lie in (0, 1/2), got {e}")));
            }
        }
        for &(n, a) in &self.validate.pairs {
            if n < 2 || !(a > 0.0 && a.is_finite()) {
                return Err(bad(format!("validate pair ({n}, {a}) needs n >= 2 and alpha > 0")));
            }
        }
        if let Some(r) = &self.regularized {
            positive(r.sigma, "regularized.sigma")?;
            if !(r.omega > 0.0 && r.omega < 1.0) {
                return Err(bad(format!("regularized.omega must lie in (0, 1), got {}", r.omega)));
            }
            if let Some(h) = r.horizon {
                positive(h, "regularized.horizon")?;
            }
            if let Some(h) = r.short_horizon {
                positive(h, "regularized.short_horizon")?;
            }
        }
        match self.initial.kind {
            InitialKind::Constant if self.initial.c.is_none() => return Err(bad("initial.c is required for a constant state")),
            InitialKind::File => match &self.initial.path {
                Some(p) if p.exists() => {}
                Some(p) => return Err(bad(format!("initial.path {} does not exist", p.display()))),
                None => return Err(bad("initial.path is required for a file state")),
            },
            _ => {}
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Kernel, ConfigError> {
        self.kernel_with_eta(self.kernel.eta)
    }

    pub fn kernel_with_eta(&self, eta: f64) -> Result<Kernel, ConfigError> {
        let k = &self.kernel;
        let built = match k.kind {
            KernelKind::Newtonian2d => Ok(Kernel::newtonian2d(eta)),
            KernelKind::Mollifier => Kernel::mollifier(k.a.unwrap_or_default(), eta),
            KernelKind::Mixture => Kernel::newtonian_mollifier_mix(k.a.unwrap_or_default(), k.weight.unwrap_or_default(), eta),
            KernelKind::Newtonian3dRegularized => {
                let sigma = match k.sigma {
                    Some(s) => s,
                    None => 0.5 * nlch::spectral::cube_grid(self.grid.n, -1.0, 1.0).map_err(|e| bad(e.to_string()))?.min_spacing(),
                };
                Kernel::newtonian3d_regularized(sigma, eta)
            }
        };
        built.map_err(|e| bad(e.to_string()))
    }

    pub fn potential(&self) -> Result<Potential, ConfigError> {
        let p = &self.potential;
        if !(p.theta.is_finite() && p.theta >= 0.0) {
            return Err(bad(format!("potential.theta must be non-negative, got {}", p.theta)));
        }
        match p.kind {
            PotentialKind::Logarithmic if p.theta == 0.0 => Err(bad("the logarithmic potential needs theta > 0")),
            PotentialKind::Logarithmic => Ok(Potential::logarithmic(p.theta)),
            PotentialKind::Regularized => {
                let omega = p.omega.ok_or_else(|| bad("potential.omega is required for the regularized potential"))?;
                Potential::regularized(p.theta, omega).map_err(|e| bad(e.to_string()))
            }
            PotentialKind::DoubleWell => Ok(Potential::double_well()),
            PotentialKind::Quadratic => Ok(Potential::quadratic()),
        }
    }

    pub fn domain_map(&self) -> Result<Option<DomainMap>, ConfigError> {
        let map = match self.domain {
            DomainConfig::Square => return Ok(None),
            DomainConfig::Rectangle { a1, b1, a2, b2 } => DomainMap::rectangle(a1, b1, a2, b2),
            DomainConfig::Bulged { k } => DomainMap::bulged(k),
        };
        map.map(Some).map_err(|e| bad(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\nn = 8\n[kernel]\nkind = \"newtonian2d\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.conv.eps, 1e-5);
        assert_eq!(cfg.conv.alpha, 4.0);
        assert_eq!(cfg.potential.theta, 2.0);
        assert!(matches!(cfg.domain, DomainConfig::Square));
        assert_eq!(cfg.time.snapshot_times(), vec![0.0, 0.05, 0.3, 1.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}[conv]\nepsilon = 0.1\n")).unwrap_err();
        assert!(err.0.contains("epsilon"), "{err}");
        assert!(RunConfig::parse(&format!("{MINIMAL}[extra]\nx = 1\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}[domain]\nkind = \"bulged\"\nk = 0.1\nq = 2\n")).is_err());
    }

    #[test]
    fn ranges_are_checked() {
        assert!(RunConfig::parse(&format!("{MINIMAL}[conv]\neps = 0.7\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}[regularized]\nomega = 1e-3\nsigma = 0.0\n")).is_err());
        assert!(RunConfig::parse("[grid]\nn = 8\n[kernel]\nkind = \"mixture\"\na = 0.1\n").is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}[domain]\nkind = \"bulged\"\nk = 5.0\n")).is_err());
    }

    #[test]
    fn explicit_output_times_end_at_t() {
        let cfg = RunConfig::parse(&format!("{MINIMAL}[time]\nt_end = 2.0\noutput_times = [0.5, 1.0]\n")).unwrap();
        assert_eq!(cfg.time.snapshot_times(), vec![0.5, 1.0, 2.0]);
    }
}
