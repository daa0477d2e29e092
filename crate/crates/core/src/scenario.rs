//! Plain-data description of a problem instance and its assembly.
//!
//! A [`ScenarioSpec`] holds everything that defines the discrete problem
//! except the sources: grids, regions, coefficients, weight parameters, the
//! energy functional and solver settings. [`Scenario::build`] validates the
//! pieces in dependency order and assembles the operators and the weighted
//! least-squares setup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ficontrol::{CgConfig, FISetup};
use crate::geometry::{build_masks, EndpointSet, Interval, RegionMasks, SpatialGrid, TimeGrid};
use crate::insense::{FunctionalConfig, LoopConfig};
use crate::pdecore::coefficients::{CoefficientFn, CoefficientSet};
use crate::pdecore::operators::{LinearOperatorSet, ObservationCoupling};
use crate::pdecore::quasilinear::QuasilinearOperator;
use crate::weights::{build_chi, build_eta, build_weight_tables, WeightParams, DEFAULT_RHO_CLIP};

/// Spatial grid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Interval length `L` (the domain is `(0, L)`).
    #[serde(default = "one")]
    pub length: f64,
    /// Number of cells `N`.
    pub cells: usize,
}

/// Time grid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    /// Horizon `T`.
    #[serde(default = "one")]
    pub horizon: f64,
    /// Number of steps `M`.
    pub steps: usize,
}

fn one() -> f64 {
    1.0
}

/// Which endpoints carry the surface observation window `Σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    /// Left endpoint `x = 0`.
    pub left: bool,
    /// Right endpoint `x = L`.
    pub right: bool,
}

/// Control and observation regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    /// Control region `ω = (lo, hi)`.
    pub omega: [f64; 2],
    /// Bulk observation region `𝒪 = (lo, hi)`.
    pub observation: [f64; 2],
    /// Surface observation set `Σ`.
    pub surface: SurfaceSpec,
    /// Nesting margin between the nested subregions of `ω ∩ 𝒪`.
    pub margin: f64,
}

/// Coefficient choice: a named preset or explicit functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `σ = δ = 1 + ½ tanh(r)`, `a = tanh(r)`, `b = ½ tanh(r)`.
    Logistic,
    /// Low-degree polynomials, see [`polynomial_coefficients`].
    Polynomial,
    /// Constant diffusion with linear reactions.
    Linear {
        /// Diffusion `σ`.
        sigma: f64,
        /// Surface diffusion `δ`.
        delta: f64,
        /// Bulk reaction slope.
        a1: f64,
        /// Surface reaction slope.
        b1: f64,
    },
    /// Explicit coefficient functions.
    Custom {
        /// Bulk diffusion.
        sigma: CoefficientFn,
        /// Surface diffusion.
        delta: CoefficientFn,
        /// Bulk reaction.
        a: CoefficientFn,
        /// Surface reaction.
        b: CoefficientFn,
        /// Ellipticity floor.
        rho: f64,
    },
}

impl CoefficientSpec {
    /// The coefficient set described by this choice.
    pub fn to_set(&self) -> CoefficientSet {
        match self {
            CoefficientSpec::Logistic => CoefficientSet::logistic(),
            CoefficientSpec::Polynomial => polynomial_coefficients(),
            CoefficientSpec::Linear {
                sigma,
                delta,
                a1,
                b1,
            } => CoefficientSet::linear(*sigma, *delta, *a1, *b1),
            CoefficientSpec::Custom {
                sigma,
                delta,
                a,
                b,
                rho,
            } => CoefficientSet {
                sigma: sigma.clone(),
                delta: delta.clone(),
                a: a.clone(),
                b: b.clone(),
                rho: *rho,
            },
        }
    }
}

/// Polynomial coefficients with exact derivatives:
/// `σ = δ = 1 + 0.2r + 0.1r²`, `a = r + 0.3r³`, `b = 0.5r − 0.2r²`,
/// elliptic on `[−1, 1]` with floor `ρ = ½`.
pub fn polynomial_coefficients() -> CoefficientSet {
    let poly = |c: &[f64]| CoefficientFn::Polynomial {
        coeffs: c.to_vec(),
        derivatives: None,
    };
    CoefficientSet {
        sigma: poly(&[1.0, 0.2, 0.1]),
        delta: poly(&[1.0, 0.2, 0.1]),
        a: poly(&[0.0, 1.0, 0.0, 0.3]),
        b: poly(&[0.0, 0.5, -0.2]),
        rho: 0.5,
    }
}

/// Carleman weight parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    /// `λ ≥ 1`.
    pub lambda: f64,
    /// `m`, above the threshold that depends on `λ`.
    pub m: f64,
    /// `C_s`, with `s = C_s (T + T²)`.
    pub c_s: f64,
    /// Exponent beyond which a normalized weight is treated as zero.
    #[serde(default = "default_clip")]
    pub clamp: f64,
}

fn default_clip() -> f64 {
    DEFAULT_RHO_CLIP
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            m: 2.3,
            c_s: 1.0,
            clamp: DEFAULT_RHO_CLIP,
        }
    }
}

/// Everything that defines the discrete problem except the sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Spatial grid.
    pub grid: GridSpec,
    /// Time grid.
    pub time: TimeSpec,
    /// Regions.
    pub regions: RegionSpec,
    /// Coefficients.
    pub coefficients: CoefficientSpec,
    /// Weight parameters.
    #[serde(default)]
    pub weights: WeightSpec,
    /// Energy functional.
    #[serde(default)]
    pub functional: FunctionalConfig,
    /// Weighted least-squares solver.
    #[serde(default)]
    pub solver: CgConfig,
    /// Outer loop.
    #[serde(default)]
    pub outer: LoopConfig,
}

impl ScenarioSpec {
    /// The reference instance used by tests and the default configuration:
    /// `Ω = (0, 1)`, `T = 1`, `ω = (0.2, 0.8)`, `𝒪 = (0.1, 0.9)`, `Σ` the left
    /// endpoint, logistic coefficients.
    pub fn reference(cells: usize, steps: usize) -> Self {
        Self {
            grid: GridSpec { length: 1.0, cells },
            time: TimeSpec {
                horizon: 1.0,
                steps,
            },
            regions: RegionSpec {
                omega: [0.2, 0.8],
                observation: [0.1, 0.9],
                surface: SurfaceSpec {
                    left: true,
                    right: false,
                },
                margin: 0.07,
            },
            coefficients: CoefficientSpec::Logistic,
            weights: WeightSpec::default(),
            functional: FunctionalConfig {
                theta: 1.0,
                theta_gamma: 0.5,
            },
            solver: CgConfig::default(),
            outer: LoopConfig::default(),
        }
    }

    /// The same instance on other grids.
    pub fn with_resolution(&self, cells: usize, steps: usize) -> Self {
        let mut s = self.clone();
        s.grid.cells = cells;
        s.time.steps = steps;
        s
    }
}

/// An assembled problem instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// The description it was built from.
    pub spec: ScenarioSpec,
    /// Coefficient functions.
    pub coeffs: CoefficientSet,
    /// Quasilinear operator (carries the frozen linear operators).
    pub op: QuasilinearOperator,
    /// Weighted least-squares setup.
    pub setup: FISetup,
}

impl Scenario {
    /// Validate and assemble.
    pub fn build(spec: &ScenarioSpec) -> Result<Self> {
        let grid = SpatialGrid::new(spec.grid.length, spec.grid.cells)?;
        let time = TimeGrid::new(spec.time.horizon, spec.time.steps)?;
        let r = &spec.regions;
        let omega = Interval::new(r.omega[0], r.omega[1])
            .map_err(|e| Error::Geometry(format!("control region ω: {e}")))?;
        let obs = Interval::new(r.observation[0], r.observation[1])
            .map_err(|e| Error::Geometry(format!("observation region 𝒪: {e}")))?;
        let masks = build_masks(
            &grid,
            omega,
            obs,
            EndpointSet {
                left: r.surface.left,
                right: r.surface.right,
            },
            r.margin,
        )?;
        let coeffs = spec.coefficients.to_set();
        let op = QuasilinearOperator::new(&grid, &time, &coeffs)?;
        let ops = LinearOperatorSet::new(&grid, &time, &coeffs)?;
        let coupling = ObservationCoupling::new(
            &grid,
            &masks.obs_nodes,
            masks.obs_surface,
            spec.functional.theta,
            spec.functional.theta_gamma,
        )?;
        let eta = build_eta(&grid, &masks, masks.omega1.center())?;
        let w = &spec.weights;
        let params = WeightParams::new(w.lambda, w.m, w.c_s, spec.time.horizon, w.clamp);
        let tables = build_weight_tables(&grid, &time, &eta, &params)?;
        let chi = build_chi(&grid, &masks)?;
        let setup = FISetup::new(ops, coupling, masks, tables, chi, spec.solver)?;
        Ok(Self {
            spec: spec.clone(),
            coeffs,
            op,
            setup,
        })
    }

    /// Spatial grid.
    pub fn grid(&self) -> &SpatialGrid {
        self.setup.grid()
    }

    /// Time grid.
    pub fn time(&self) -> &TimeGrid {
        self.setup.time()
    }

    /// Region masks.
    pub fn masks(&self) -> &RegionMasks {
        &self.setup.masks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_builds() {
        let s = Scenario::build(&ScenarioSpec::reference(32, 32)).unwrap();
        assert_eq!(s.grid().nodes(), 33);
        assert_eq!(s.time().steps(), 32);
    }

    #[test]
    fn polynomial_preset_is_valid() {
        polynomial_coefficients()
            .validate(&crate::pdecore::coefficients::CoefficientCheck::default())
            .unwrap();
    }

    #[test]
    fn disjoint_regions_cite_a3() {
        let mut spec = ScenarioSpec::reference(32, 32);
        spec.regions.omega = [0.1, 0.3];
        spec.regions.observation = [0.6, 0.9];
        let e = Scenario::build(&spec).unwrap_err();
        assert!(matches!(e, Error::Geometry(_)), "{e}");
        assert!(e.to_string().contains("A3"));
    }
}
