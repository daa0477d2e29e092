//! Coefficient functions `σ`, `δ`, `a`, `b` and their validation.
//!
//! Each coefficient is a scalar function of the state value with derivatives
//! up to third order. Supported families are constants, affine maps, the
//! saturating logistic family `base + amp·tanh(rate·r/2)` and polynomials
//! with optional user-supplied derivative tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest derivative order available from every coefficient family.
pub const MAX_DERIVATIVE: usize = 3;

/// A scalar coefficient function of the state value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientFn {
    /// `r ↦ value`.
    Constant {
        /// Constant value.
        value: f64,
    },
    /// `r ↦ value + slope·r`.
    Affine {
        /// Value at zero.
        value: f64,
        /// Slope.
        slope: f64,
    },
    /// `r ↦ base + amp·tanh(rate·r/2)`, a smooth saturating profile.
    Logistic {
        /// Value at zero.
        base: f64,
        /// Half the total swing.
        amp: f64,
        /// Steepness; the slope at zero is `amp·rate/2`.
        rate: f64,
    },
    /// `r ↦ Σ_k c_k r^k`, optionally with explicit derivative polynomials.
    Polynomial {
        /// Monomial coefficients, lowest degree first.
        coeffs: Vec<f64>,
        /// Optional coefficient tables of the first, second, third derivative
        /// (lowest degree first). When absent, derivatives are exact.
        #[serde(default)]
        derivatives: Option<Vec<Vec<f64>>>,
    },
}

fn horner(c: &[f64], r: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * r + ck)
}

fn differentiate(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, ck)| k as f64 * ck)
        .collect()
}

impl CoefficientFn {
    /// Constant function.
    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    /// Affine function.
    pub fn affine(value: f64, slope: f64) -> Self {
        Self::Affine { value, slope }
    }

    /// Logistic (tanh) family.
    pub fn logistic(base: f64, amp: f64, rate: f64) -> Self {
        Self::Logistic { base, amp, rate }
    }

    /// Value of the `k`-th derivative at `r`, for `k ≤ 3`.
    pub fn eval(&self, r: f64, k: usize) -> f64 {
        match self {
            Self::Constant { value } => {
                if k == 0 {
                    *value
                } else {
                    0.0
                }
            }
            Self::Affine { value, slope } => match k {
                0 => value + slope * r,
                1 => *slope,
                _ => 0.0,
            },
            Self::Logistic { base, amp, rate } => {
                let q = 0.5 * rate;
                let t = (q * r).tanh();
                let s = 1.0 - t * t;
                match k {
                    0 => base + amp * t,
                    1 => amp * q * s,
                    2 => -2.0 * amp * q * q * t * s,
                    _ => -2.0 * amp * q * q * q * s * (1.0 - 3.0 * t * t),
                }
            }
            Self::Polynomial {
                coeffs,
                derivatives,
            } => {
                if k == 0 {
                    return horner(coeffs, r);
                }
                if let Some(tables) = derivatives {
                    if let Some(t) = tables.get(k - 1) {
                        return horner(t, r);
                    }
                }
                let mut c = coeffs.clone();
                for _ in 0..k {
                    c = differentiate(&c);
                }
                horner(&c, r)
            }
        }
    }

    /// Value at `r`.
    pub fn value(&self, r: f64) -> f64 {
        self.eval(r, 0)
    }

    /// First derivative at `r`.
    pub fn d1(&self, r: f64) -> f64 {
        self.eval(r, 1)
    }

    /// Second derivative at `r`.
    pub fn d2(&self, r: f64) -> f64 {
        self.eval(r, 2)
    }

    /// Third derivative at `r`.
    pub fn d3(&self, r: f64) -> f64 {
        self.eval(r, 3)
    }

    fn check_finite_params(&self, name: &str) -> Result<()> {
        let ok = match self {
            Self::Constant { value } => value.is_finite(),
            Self::Affine { value, slope } => value.is_finite() && slope.is_finite(),
            Self::Logistic { base, amp, rate } => {
                base.is_finite() && amp.is_finite() && rate.is_finite()
            }
            Self::Polynomial {
                coeffs,
                derivatives,
            } => {
                !coeffs.is_empty()
                    && coeffs.iter().all(|c| c.is_finite())
                    && derivatives.as_ref().map_or(true, |d| {
                        d.len() <= MAX_DERIVATIVE && d.iter().flatten().all(|c| c.is_finite())
                    })
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Coefficient {
                assumption: "derivative-table",
                message: format!("coefficient {name} has non-finite or malformed parameters"),
            })
        }
    }
}

/// The four coefficient functions and the ellipticity floor `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    /// Bulk diffusion `σ`; also multiplies the normal flux in the surface row.
    pub sigma: CoefficientFn,
    /// Surface diffusion `δ`. It multiplies tangential operators only, which
    /// vanish identically on the two-point boundary, so it is validated but
    /// never enters a discrete operator.
    pub delta: CoefficientFn,
    /// Bulk reaction `a`.
    pub a: CoefficientFn,
    /// Surface reaction `b`.
    pub b: CoefficientFn,
    /// Ellipticity floor `ρ > 0`.
    pub rho: f64,
}

/// Validation settings for [`CoefficientSet::validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientCheck {
    /// Half-width `R` of the sampling interval `[−R, R]`.
    pub radius: f64,
    /// Number of sample points.
    pub samples: usize,
    /// Relative tolerance of the derivative-versus-difference comparison.
    pub derivative_tol: f64,
}

impl Default for CoefficientCheck {
    fn default() -> Self {
        Self {
            radius: 1.0,
            samples: 201,
            derivative_tol: 1e-6,
        }
    }
}

impl CoefficientSet {
    /// Constant diffusion and linear reactions `a(r) = a1·r`, `b(r) = b1·r`.
    pub fn linear(sigma: f64, delta: f64, a1: f64, b1: f64) -> Self {
        Self {
            sigma: CoefficientFn::constant(sigma),
            delta: CoefficientFn::constant(delta),
            a: CoefficientFn::affine(0.0, a1),
            b: CoefficientFn::affine(0.0, b1),
            rho: 0.5 * sigma.min(delta),
        }
    }

    /// Smooth saturating nonlinearities:
    /// `σ = δ = 1 + ½ tanh(r)`, `a = tanh(r)`, `b = ½ tanh(r)`, `ρ = ¼`.
    pub fn logistic() -> Self {
        Self {
            sigma: CoefficientFn::logistic(1.0, 0.5, 2.0),
            delta: CoefficientFn::logistic(1.0, 0.5, 2.0),
            a: CoefficientFn::logistic(0.0, 1.0, 2.0),
            b: CoefficientFn::logistic(0.0, 0.5, 2.0),
            rho: 0.25,
        }
    }

    /// Check ellipticity, the vanishing reactions at zero and derivative
    /// consistency on `[−R, R]`.
    pub fn validate(&self, check: &CoefficientCheck) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Coefficient {
                assumption: "A7",
                message: format!("ellipticity floor must be positive, got {}", self.rho),
            });
        }
        for (name, f) in self.named() {
            f.check_finite_params(name)?;
        }
        let samples = check.samples.max(3);
        let pts: Vec<f64> = (0..samples)
            .map(|k| -check.radius + 2.0 * check.radius * k as f64 / (samples - 1) as f64)
            .collect();
        for (name, f) in [("sigma", &self.sigma), ("delta", &self.delta)] {
            for &r in &pts {
                let v = f.value(r);
                if !(v >= self.rho) {
                    return Err(Error::Coefficient {
                        assumption: "A7",
                        message: format!(
                            "{name}({r}) = {v} is below the ellipticity floor {}",
                            self.rho
                        ),
                    });
                }
            }
        }
        for (name, f) in [("a", &self.a), ("b", &self.b)] {
            let v0 = f.value(0.0);
            if v0.abs() > 1e-14 {
                return Err(Error::Coefficient {
                    assumption: "A8",
                    message: format!("{name}(0) = {v0:e} must vanish"),
                });
            }
        }
        for (name, f) in self.named() {
            check_derivatives(name, f, &pts, check.derivative_tol)?;
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &CoefficientFn); 4] {
        [
            ("sigma", &self.sigma),
            ("delta", &self.delta),
            ("a", &self.a),
            ("b", &self.b),
        ]
    }

    /// Whether the set is linear: constant diffusion and affine reactions.
    pub fn is_linear(&self) -> bool {
        let affine = |f: &CoefficientFn| {
            matches!(
                f,
                CoefficientFn::Constant { .. } | CoefficientFn::Affine { .. }
            )
        };
        matches!(self.sigma, CoefficientFn::Constant { .. }) && affine(&self.a) && affine(&self.b)
    }
}

fn check_derivatives(name: &str, f: &CoefficientFn, pts: &[f64], tol: f64) -> Result<()> {
    for k in 1..=MAX_DERIVATIVE {
        let scale = pts
            .iter()
            .map(|&r| f.eval(r, k).abs())
            .fold(1.0_f64, f64::max);
        for &r in pts {
            let eps = 1e-4 * (1.0 + r.abs());
            let fd = (f.eval(r + eps, k - 1) - f.eval(r - eps, k - 1)) / (2.0 * eps);
            let exact = f.eval(r, k);
            if (fd - exact).abs() > tol * scale {
                return Err(Error::Coefficient {
                    assumption: "derivative-table",
                    message: format!(
                        "derivative {k} of {name} at r = {r}: supplied {exact:e}, \
                         finite difference {fd:e}"
                    ),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_derivatives_match_differences() {
        let f = CoefficientFn::logistic(0.3, 0.7, 1.9);
        for &r in &[-1.3, -0.2, 0.0, 0.4, 2.1] {
            for k in 1..=3 {
                let e = 1e-5;
                let fd = (f.eval(r + e, k - 1) - f.eval(r - e, k - 1)) / (2.0 * e);
                assert!((fd - f.eval(r, k)).abs() < 1e-8, "k={k} r={r}");
            }
        }
    }

    #[test]
    fn polynomial_exact_and_tabulated_derivatives() {
        let p = CoefficientFn::Polynomial {
            coeffs: vec![0.0, 1.0, 0.0, 2.0],
            derivatives: None,
        };
        assert_eq!(p.eval(2.0, 0), 18.0);
        assert_eq!(p.eval(2.0, 1), 25.0);
        assert_eq!(p.eval(2.0, 2), 24.0);
        assert_eq!(p.eval(2.0, 3), 12.0);
        let tab = CoefficientFn::Polynomial {
            coeffs: vec![0.0, 1.0, 0.0, 2.0],
            derivatives: Some(vec![vec![1.0, 0.0, 6.0], vec![0.0, 12.0], vec![12.0]]),
        };
        for &r in &[-1.0, 0.3, 1.0] {
            for k in 0..=3 {
                assert_eq!(p.eval(r, k), tab.eval(r, k));
            }
        }
    }

    #[test]
    fn presets_validate() {
        let chk = CoefficientCheck::default();
        CoefficientSet::logistic().validate(&chk).unwrap();
        CoefficientSet::linear(1.0, 1.0, 0.0, 0.0)
            .validate(&chk)
            .unwrap();
        CoefficientSet::linear(2.0, 0.5, 1.0, -1.0)
            .validate(&chk)
            .unwrap();
    }

    #[test]
    fn validation_rejects_violations() {
        let chk = CoefficientCheck::default();
        let mut c = CoefficientSet::logistic();
        c.a = CoefficientFn::affine(1e-3, 1.0);
        assert!(matches!(
            c.validate(&chk),
            Err(Error::Coefficient {
                assumption: "A8",
                ..
            })
        ));
        let mut c = CoefficientSet::logistic();
        c.sigma = CoefficientFn::affine(1.0, 1.0);
        assert!(matches!(
            c.validate(&chk),
            Err(Error::Coefficient {
                assumption: "A7",
                ..
            })
        ));
        let mut c = CoefficientSet::logistic();
        c.b = CoefficientFn::Polynomial {
            coeffs: vec![0.0, 1.0, 1.0],
            derivatives: Some(vec![vec![1.0, 2.5]]),
        };
        assert!(matches!(
            c.validate(&chk),
            Err(Error::Coefficient {
                assumption: "derivative-table",
                ..
            })
        ));
    }
}
