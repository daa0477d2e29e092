//! Analytic and seeded random source families.
//!
//! Every family is multiplied by a smooth time onset `S((t − t_on)/ramp)`
//! (quintic smoothstep), so sources vanish identically for `t ≤ t_on`. The
//! least-squares weights underflow to zero near `t = 0` and stay tiny until
//! `T/2`, where they reach their plateau. A source acting before the plateau
//! is penalized by the inverse weight and the constructed control grows like
//! that inverse weight, so the default onset is `T/2` (for `T = 1`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Alignment, BulkSurfaceField, SpaceTimeField, SpatialGrid, TimeGrid};

/// Shape of a source family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceFamily {
    /// Identically zero.
    Zero,
    /// Gaussian bump in space, `exp(−((x − center)/width)²)`, with an optional
    /// surface component of relative size `surface`.
    SmallGaussian {
        /// Bump center.
        center: f64,
        /// Bump width.
        width: f64,
        /// Relative amplitude of the surface component.
        #[serde(default)]
        surface: f64,
    },
    /// Seeded random combination of low cosine modes in space and time,
    /// with independent random smooth surface components.
    RandomSmooth {
        /// Number of modes in each direction.
        modes: usize,
    },
}

/// A source family with amplitude and time onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Family and shape parameters.
    pub family: SourceFamily,
    /// Largest absolute value of the generated field.
    pub amplitude: f64,
    /// Onset time `t_on`; the source vanishes for `t ≤ t_on`.
    #[serde(default = "default_onset")]
    pub onset: f64,
    /// Length of the smooth ramp after `t_on`.
    #[serde(default = "default_ramp")]
    pub ramp: f64,
}

fn default_onset() -> f64 {
    0.5
}

fn default_ramp() -> f64 {
    0.2
}

impl SourceSpec {
    /// The zero source.
    pub fn zero() -> Self {
        Self {
            family: SourceFamily::Zero,
            amplitude: 0.0,
            onset: default_onset(),
            ramp: default_ramp(),
        }
    }

    /// A random smooth source with the default onset.
    pub fn random(amplitude: f64, modes: usize) -> Self {
        Self {
            family: SourceFamily::RandomSmooth { modes },
            amplitude,
            onset: default_onset(),
            ramp: default_ramp(),
        }
    }

    /// A Gaussian bump with the default onset.
    pub fn gaussian(amplitude: f64, center: f64, width: f64) -> Self {
        Self {
            family: SourceFamily::SmallGaussian {
                center,
                width,
                surface: 0.0,
            },
            amplitude,
            onset: default_onset(),
            ramp: default_ramp(),
        }
    }

    /// Check the parameters against the time horizon.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::Config(format!(
                "source amplitude {} must be finite and nonnegative",
                self.amplitude
            )));
        }
        if !(self.onset >= 0.0 && self.ramp > 0.0 && self.onset + self.ramp < horizon) {
            return Err(Error::Config(format!(
                "source onset {} and ramp {} must satisfy 0 ≤ t_on, ramp > 0, t_on + ramp < T = {horizon}",
                self.onset, self.ramp
            )));
        }
        match &self.family {
            SourceFamily::Zero => {}
            SourceFamily::SmallGaussian { width, surface, .. } => {
                if !(*width > 0.0 && surface.is_finite()) {
                    return Err(Error::Config("gaussian width must be positive".into()));
                }
            }
            SourceFamily::RandomSmooth { modes } => {
                if *modes == 0 {
                    return Err(Error::Config(
                        "random source needs at least one mode".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Quintic smoothstep clamped to `[0, 1]`.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Generate a source field with the given alignment.
///
/// `seed` only affects random families. The field is scaled so that its
/// largest absolute value equals the amplitude (zero stays zero).
pub fn generate(
    spec: &SourceSpec,
    grid: &SpatialGrid,
    time: &TimeGrid,
    alignment: Alignment,
    seed: u64,
) -> Result<SpaceTimeField> {
    spec.validate(time.horizon())?;
    let onset = |t: f64| smoothstep((t - spec.onset) / spec.ramp);
    let l = grid.length();
    let tt = time.horizon();
    let mut field = match &spec.family {
        SourceFamily::Zero => SpaceTimeField::zeros(grid, time, alignment),
        SourceFamily::SmallGaussian {
            center,
            width,
            surface,
        } => {
            let (c, w, s) = (*center, *width, *surface);
            SpaceTimeField::from_cell_fn(
                grid,
                time,
                alignment,
                |x, t| (-((x - c) / w).powi(2)).exp() * onset(t),
                |x, t| s * (-((x - c) / w).powi(2)).exp() * onset(t),
            )
        }
        SourceFamily::RandomSmooth { modes } => {
            let k = *modes;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut coef = vec![0.0; k * k];
            for (idx, a) in coef.iter_mut().enumerate() {
                let (p, q) = (idx / k, idx % k);
                let decay = 1.0 / (1.0 + (p * p + q * q) as f64);
                *a = rng.gen_range(-1.0..1.0) * decay;
            }
            let surf: Vec<[f64; 2]> = (0..k)
                .map(|q| {
                    let decay = 1.0 / (1.0 + (q * q) as f64);
                    [
                        rng.gen_range(-1.0..1.0) * decay,
                        rng.gen_range(-1.0..1.0) * decay,
                    ]
                })
                .collect();
            let bulk = |x: f64, t: f64| {
                let mut v = 0.0;
                for p in 0..k {
                    let cx = (p as f64 * std::f64::consts::PI * x / l).cos();
                    for q in 0..k {
                        let ct = (q as f64 * std::f64::consts::PI * t / tt).cos();
                        v += coef[p * k + q] * cx * ct;
                    }
                }
                v * onset(t)
            };
            let surface = |x: f64, t: f64| {
                let side = usize::from(x > 0.5 * l);
                let mut v = 0.0;
                for (q, s) in surf.iter().enumerate() {
                    v += s[side] * (q as f64 * std::f64::consts::PI * t / tt).cos();
                }
                v * onset(t)
            };
            SpaceTimeField::from_cell_fn(grid, time, alignment, bulk, surface)
        }
    };
    let peak = field.max_abs();
    if peak > 0.0 {
        field.scale(spec.amplitude / peak);
    }
    Ok(field)
}

/// A random smooth spatial profile (for perturbation directions): low cosine
/// modes with decaying coefficients, trace-compatible.
pub fn random_profile(grid: &SpatialGrid, modes: usize, rng: &mut impl Rng) -> BulkSurfaceField {
    let l = grid.length();
    let coef: Vec<f64> = (0..modes)
        .map(|p| rng.gen_range(-1.0..1.0) / (1.0 + (p * p) as f64))
        .collect();
    let bulk: Vec<f64> = (0..grid.nodes())
        .map(|i| {
            let x = grid.x(i);
            coef.iter()
                .enumerate()
                .map(|(p, a)| a * (p as f64 * std::f64::consts::PI * x / l).cos())
                .sum()
        })
        .collect();
    BulkSurfaceField::from_trace(bulk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids() -> (SpatialGrid, TimeGrid) {
        (
            SpatialGrid::new(1.0, 32).unwrap(),
            TimeGrid::new(1.0, 40).unwrap(),
        )
    }

    #[test]
    fn zero_family_is_zero() {
        let (g, t) = grids();
        let f = generate(&SourceSpec::zero(), &g, &t, Alignment::Forward, 1).unwrap();
        assert!(f.is_zero());
    }

    #[test]
    fn amplitude_and_onset() {
        let (g, t) = grids();
        let spec = SourceSpec::random(1e-3, 4);
        let f = generate(&spec, &g, &t, Alignment::Forward, 7).unwrap();
        assert!((f.max_abs() - 1e-3).abs() < 1e-15);
        for j in 0..=t.steps() {
            if t.t(j) <= spec.onset {
                assert_eq!(f.slices[j].max_abs(), 0.0);
            }
        }
        let g2 = generate(&spec, &g, &t, Alignment::Forward, 7).unwrap();
        assert_eq!(f.slices, g2.slices);
        let g3 = generate(&spec, &g, &t, Alignment::Forward, 8).unwrap();
        assert_ne!(f.slices, g3.slices);
    }

    #[test]
    fn gaussian_peaks_at_center() {
        let (g, t) = grids();
        let f = generate(
            &SourceSpec::gaussian(0.5, 0.5, 0.1),
            &g,
            &t,
            Alignment::Forward,
            0,
        )
        .unwrap();
        let last = &f.slices[t.steps()];
        assert!((last.bulk[16] - 0.5).abs() < 1e-12);
        assert_eq!(last.surface, [0.0, 0.0]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = SourceSpec::random(1.0, 0);
        assert!(s.validate(1.0).is_err());
        s = SourceSpec::random(-1.0, 2);
        assert!(s.validate(1.0).is_err());
        s = SourceSpec::random(1.0, 2);
        s.onset = 0.95;
        assert!(s.validate(1.0).is_err());
    }
}
