//! Interaction kernels: planar and spatial Newtonian potentials, the
//! regularized spatial kernel, a compactly supported mollifier and weighted sums.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::quad;

/// `int_{R^2} exp(-1/(1-|x|^2)) dx` over the unit disc.
pub const MOLLIFIER_MASS: f64 = 0.466512393178330069;

static KERNEL_EVALS: AtomicU64 = AtomicU64::new(0);

/// Total kernel evaluations performed by operator assembly in this process.
pub fn kernel_evaluations() -> u64 {
    KERNEL_EVALS.load(Ordering::Relaxed)
}

pub(crate) fn record_kernel_evaluations(n: u64) {
    KERNEL_EVALS.fetch_add(n, Ordering::Relaxed);
}

/// Kernel shape without its strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelKind {
    /// `log|x| / (2 pi)` in two dimensions.
    Newtonian2d,
    /// `-1 / (4 pi |x|)` in three dimensions.
    Newtonian3d,
    /// `-1 / (4 pi max(sigma, |x|))` in three dimensions.
    Newtonian3dRegularized { sigma: f64 },
    /// `a^-2 exp(-1/(1 - |x/a|^2))` on the disc of radius `a`, zero outside.
    Mollifier { a: f64 },
    /// Weighted sum of planar kernels.
    Composite { parts: Vec<(f64, KernelKind)> },
}

/// Identifier stored in operator caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelId {
    Newtonian2d = 0,
    Newtonian3d = 1,
    Newtonian3dRegularized = 2,
    Mollifier = 3,
    Mixture = 4,
}

impl KernelId {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelId::Newtonian2d => "newt2d",
            KernelId::Newtonian3d => "newt3d",
            KernelId::Newtonian3dRegularized => "newt3d-reg",
            KernelId::Mollifier => "moll",
            KernelId::Mixture => "mix",
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => KernelId::Newtonian2d,
            1 => KernelId::Newtonian3d,
            2 => KernelId::Newtonian3dRegularized,
            3 => KernelId::Mollifier,
            4 => KernelId::Mixture,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            KernelId::Newtonian2d,
            KernelId::Newtonian3d,
            KernelId::Newtonian3dRegularized,
            KernelId::Mollifier,
            KernelId::Mixture,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

/// A kernel scaled by an interaction strength `eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub eta: f64,
}

impl KernelKind {
    fn dim(&self) -> usize {
        match self {
            KernelKind::Newtonian3d | KernelKind::Newtonian3dRegularized { .. } => 3,
            _ => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            KernelKind::Newtonian3dRegularized { sigma } if !(*sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::invalid(format!("regularization radius must be positive, got {sigma}")))
            }
            KernelKind::Mollifier { a } if !(*a > 0.0 && a.is_finite()) => {
                Err(Error::invalid(format!("mollifier radius must be positive, got {a}")))
            }
            KernelKind::Composite { parts } => {
                if parts.is_empty() {
                    return Err(Error::invalid("composite kernel has no parts"));
                }
                for (w, k) in parts {
                    if !w.is_finite() {
                        return Err(Error::invalid(format!("composite weight {w} is not finite")));
                    }
                    if k.dim() != 2 {
                        return Err(Error::invalid("composite kernels must be planar"));
                    }
                    k.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Unscaled planar value at a nonzero offset. `d` must not be the origin
    /// for the Newtonian kernel.
    pub(crate) fn planar(&self, d: [f64; 2]) -> f64 {
        match self {
            KernelKind::Newtonian2d => (d[0] * d[0] + d[1] * d[1]).ln() / (4.0 * PI),
            KernelKind::Mollifier { a } => mollifier(d, *a),
            KernelKind::Composite { parts } => parts.iter().map(|(w, k)| w * k.planar(d)).sum(),
            _ => f64::NAN,
        }
    }

    /// Whether the planar kernel is singular at the origin.
    pub fn is_singular(&self) -> bool {
        match self {
            KernelKind::Newtonian2d | KernelKind::Newtonian3d => true,
            KernelKind::Composite { parts } => parts.iter().any(|(_, k)| k.is_singular()),
            _ => false,
        }
    }
}

fn mollifier(d: [f64; 2], a: f64) -> f64 {
    let r2 = (d[0] * d[0] + d[1] * d[1]) / (a * a);
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp() / (a * a)
    }
}

impl Kernel {
    pub fn new(kind: KernelKind, eta: f64) -> Result<Self> {
        if !eta.is_finite() {
            return Err(Error::invalid(format!("interaction strength {eta} is not finite")));
        }
        kind.validate()?;
        Ok(Self { kind, eta })
    }

    pub fn newtonian2d(eta: f64) -> Self {
        Self {
            kind: KernelKind::Newtonian2d,
            eta,
        }
    }

    pub fn mollifier(a: f64, eta: f64) -> Result<Self> {
        Self::new(KernelKind::Mollifier { a }, eta)
    }

    pub fn newtonian3d_regularized(sigma: f64, eta: f64) -> Result<Self> {
        Self::new(KernelKind::Newtonian3dRegularized { sigma }, eta)
    }

    /// `eta (K + weight H_a)`, the planar Newtonian kernel plus a mollifier.
    pub fn newtonian_mollifier_mix(a: f64, weight: f64, eta: f64) -> Result<Self> {
        Self::new(
            KernelKind::Composite {
                parts: vec![(1.0, KernelKind::Newtonian2d), (weight, KernelKind::Mollifier { a })],
            },
            eta,
        )
    }

    /// Spatial dimension of the kernel argument.
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    /// Identifier used in operator caches.
    pub fn id(&self) -> KernelId {
        match self.kind {
            KernelKind::Newtonian2d => KernelId::Newtonian2d,
            KernelKind::Newtonian3d => KernelId::Newtonian3d,
            KernelKind::Newtonian3dRegularized { .. } => KernelId::Newtonian3dRegularized,
            KernelKind::Mollifier { .. } => KernelId::Mollifier,
            KernelKind::Composite { .. } => KernelId::Mixture,
        }
    }

    /// `eta K(x)`. The argument length must match the kernel dimension.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "kernel of dimension {} evaluated at a point of dimension {}",
                self.dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("kernel argument {x:?} is not finite")));
        }
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let v = match &self.kind {
            KernelKind::Newtonian3d => {
                if r2 == 0.0 {
                    return Err(Error::domain("three-dimensional Newtonian kernel is singular at 0"));
                }
                -1.0 / (4.0 * PI * r2.sqrt())
            }
            KernelKind::Newtonian3dRegularized { sigma } => -1.0 / (4.0 * PI * sigma.max(r2.sqrt())),
            kind => {
                if r2 == 0.0 && kind.is_singular() {
                    return Err(Error::domain("planar Newtonian kernel is singular at 0"));
                }
                kind.planar([x[0], x[1]])
            }
        };
        Ok(self.eta * v)
    }

    /// `eta K(d)` for planar kernels without checks, for the assembly loops.
    #[inline]
    pub(crate) fn planar(&self, d: [f64; 2]) -> f64 {
        self.eta * self.kind.planar(d)
    }
}

/// `int_{R^2} H_a` computed by radial quadrature; independent of `a`.
pub fn mollifier_mass_numeric(a: f64) -> f64 {
    let f = |r: f64| {
        let s = r / a;
        if s >= 1.0 {
            0.0
        } else {
            2.0 * PI * r * (-1.0 / (1.0 - s * s)).exp() / (a * a)
        }
    };
    quad::integrate(f, 0.0, a, 1e-15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newtonian_value() {
        let k = Kernel::newtonian2d(1.0);
        let v = k.eval(&[0.5, 0.0]).unwrap();
        assert!((v + 0.110317800076325797).abs() < 1e-16);
        assert!(k.eval(&[0.0, 0.0]).is_err());
        assert!(k.eval(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn regularized_clamps_at_origin() {
        let s = 0.1;
        let k = Kernel::newtonian3d_regularized(s, 2.0).unwrap();
        assert_eq!(k.eval(&[0.0; 3]).unwrap(), -2.0 / (4.0 * PI * s));
        assert!(Kernel::newtonian3d_regularized(0.0, 1.0).is_err());
    }

    #[test]
    fn mollifier_mass_constant() {
        for a in [0.05, 0.1, 1.0] {
            assert!((mollifier_mass_numeric(a) - MOLLIFIER_MASS).abs() < 1e-13);
        }
        let k = Kernel::mollifier(0.1, 1.0).unwrap();
        assert_eq!(k.eval(&[0.1, 0.0]).unwrap(), 0.0);
        assert!((k.eval(&[0.0, 0.0]).unwrap() - 100.0 * (-1f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn kernel_ids_round_trip() {
        for code in 0..5 {
            let id = KernelId::from_code(code).unwrap();
            assert_eq!(id as u32, code);
            assert_eq!(KernelId::parse(id.as_str()), Some(id));
        }
        assert!(KernelId::from_code(5).is_none());
        assert!(KernelId::parse("gauss").is_none());
    }

    #[test]
    fn composite_kernel() {
        let k = Kernel::newtonian_mollifier_mix(0.1, 1.0 / 40.0, -3.0).unwrap();
        let d = [0.03, 0.04];
        let expected = -3.0 * (0.05f64.ln() / (2.0 * PI) + mollifier(d, 0.1) / 40.0);
        assert!((k.eval(&d).unwrap() - expected).abs() < 1e-15);
        assert_eq!(k.id(), KernelId::Mixture);
    }
}
