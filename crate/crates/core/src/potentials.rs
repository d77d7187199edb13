//! Local free-energy densities `F` and their first three derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which local potential to use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PotentialKind {
    /// `theta/2 [(1+s) ln(1+s) + (1-s) ln(1-s)]` on `[-1, 1]`.
    Logarithmic,
    /// Logarithmic potential with cubic Taylor extensions beyond `1 - omega`.
    Regularized { omega: f64 },
    /// `(s - 1)^2`.
    DoubleWell,
    /// `s^2 / 2`, whose chemical potential is linear.
    Quadratic,
}

/// A local potential together with its temperature parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub kind: PotentialKind,
    pub theta: f64,
}

impl Potential {
    pub fn logarithmic(theta: f64) -> Self {
        Self {
            kind: PotentialKind::Logarithmic,
            theta,
        }
    }

    pub fn regularized(theta: f64, omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < 1.0) {
            return Err(Error::invalid(format!("regularization omega must lie in (0, 1), got {omega}")));
        }
        Ok(Self {
            kind: PotentialKind::Regularized { omega },
            theta,
        })
    }

    pub fn double_well() -> Self {
        Self {
            kind: PotentialKind::DoubleWell,
            theta: 0.0,
        }
    }

    pub fn quadratic() -> Self {
        Self {
            kind: PotentialKind::Quadratic,
            theta: 0.0,
        }
    }

    /// Whether iterates must stay strictly inside `(-1, 1)`.
    pub fn is_singular(&self) -> bool {
        matches!(self.kind, PotentialKind::Logarithmic)
    }

    /// `F^(order)(s)` for `order` in `0..=3`.
    pub fn eval(&self, s: f64, order: u8) -> Result<f64> {
        if order > 3 {
            return Err(Error::invalid(format!("potential derivative order {order} is not supported")));
        }
        if !s.is_finite() {
            return Err(Error::domain(format!("potential argument {s} is not finite")));
        }
        match self.kind {
            PotentialKind::Logarithmic => log_potential(self.theta, s, order),
            PotentialKind::Regularized { omega } => {
                let s0 = 1.0 - omega;
                if s.abs() < s0 {
                    return log_potential(self.theta, s, order);
                }
                let anchor = s0.copysign(s);
                let d = s - anchor;
                let f: Vec<f64> = (order..=3)
                    .map(|k| log_potential(self.theta, anchor, k))
                    .collect::<Result<_>>()?;
                // Taylor polynomial of degree 3 - order around the anchor.
                let mut acc = 0.0;
                let mut pow = 1.0;
                let mut fact = 1.0;
                for (k, fk) in f.iter().enumerate() {
                    if k > 0 {
                        pow *= d;
                        fact *= k as f64;
                    }
                    acc += fk * pow / fact;
                }
                Ok(acc)
            }
            PotentialKind::DoubleWell => Ok(match order {
                0 => (s - 1.0) * (s - 1.0),
                1 => 2.0 * (s - 1.0),
                2 => 2.0,
                _ => 0.0,
            }),
            PotentialKind::Quadratic => Ok(match order {
                0 => 0.5 * s * s,
                1 => s,
                2 => 1.0,
                _ => 0.0,
            }),
        }
    }

    /// Shorthand for `eval(s, 1)`.
    pub fn dfds(&self, s: f64) -> Result<f64> {
        self.eval(s, 1)
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn log_potential(theta: f64, s: f64, order: u8) -> Result<f64> {
    let bad = if order == 0 { s.abs() > 1.0 } else { s.abs() >= 1.0 };
    if bad {
        return Err(Error::domain(format!(
            "logarithmic potential derivative {order} undefined at s = {s}"
        )));
    }
    let one_minus_sq = (1.0 - s) * (1.0 + s);
    Ok(match order {
        0 => 0.5 * theta * (xlogx(1.0 + s) + xlogx(1.0 - s)),
        1 => 0.5 * theta * (s.ln_1p() - (-s).ln_1p()),
        2 => theta / one_minus_sq,
        _ => theta * 2.0 * s / (one_minus_sq * one_minus_sq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_derivative_at_half() {
        let p = Potential::logarithmic(2.0);
        let v = p.eval(0.5, 1).unwrap();
        assert!((v - 1.09861228866810969).abs() < 1e-15);
    }

    #[test]
    fn log_domain_errors() {
        let p = Potential::logarithmic(2.0);
        assert!(p.eval(1.0, 1).is_err());
        assert!(p.eval(-1.2, 0).is_err());
        assert!((p.eval(1.0, 0).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!(p.eval(0.2, 4).is_err());
    }

    #[test]
    fn log_third_derivative_at_theta_two() {
        let p = Potential::logarithmic(2.0);
        let s: f64 = 0.3;
        let expected = 4.0 * s / (s * s - 1.0).powi(2);
        assert!((p.eval(s, 3).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn regularized_matches_explicit_extension() {
        let omega = 1e-2;
        let p = Potential::regularized(2.0, omega).unwrap();
        let s: f64 = 1.3;
        let s0 = 1.0 - omega;
        let explicit = ((2.0 - omega) / omega).ln()
            + 2.0 / (omega * (2.0 - omega)) * (s - s0)
            + 2.0 * s0 / (omega * (2.0 - omega)).powi(2) * (s - s0).powi(2);
        assert!((p.eval(s, 1).unwrap() - explicit).abs() < 1e-10);
        assert!(p.eval(-3.0, 2).unwrap() > 0.0);
        assert!(Potential::regularized(2.0, 0.0).is_err());
    }

    #[test]
    fn double_well_and_quadratic() {
        let p = Potential::double_well();
        assert_eq!(p.eval(0.0, 0).unwrap(), 1.0);
        assert_eq!(p.eval(3.0, 1).unwrap(), 4.0);
        let q = Potential::quadratic();
        assert_eq!(q.eval(-0.25, 1).unwrap(), -0.25);
    }
}
