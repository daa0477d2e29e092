//! Run configuration: TOML on disk, validated at load.

use std::path::Path;

use insens_core::diagnostics::ConvergenceConfig;
use insens_core::insense::DEFAULT_LADDER;
use insens_core::scenario::ScenarioSpec;
use insens_core::sources::SourceSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Perturbation directions used by the insensitivity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsensitivityConfig {
    /// Number of random unit directions.
    pub directions: usize,
    /// Cosine modes of each random direction.
    pub modes: usize,
    /// Strictly decreasing perturbation sizes `τ`.
    pub ladder: Vec<f64>,
}

impl Default for InsensitivityConfig {
    fn default() -> Self {
        Self {
            directions: 5,
            modes: 4,
            ladder: DEFAULT_LADDER.to_vec(),
        }
    }
}

/// Sizes of the diagnostic experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Random pairs of the duality check.
    pub duality_pairs: usize,
    /// Random adjoint samples of the Carleman check.
    pub carleman_samples: usize,
    /// Random source draws of the estimate check.
    pub estimate_draws: usize,
    /// Central difference step of the derivative check.
    pub gradient_step: f64,
    /// Newton start offset of the uniqueness check.
    pub uniqueness_offset: f64,
    /// Step counts of the null-reach study.
    pub null_reach_steps: Vec<usize>,
    /// Manufactured-solution study.
    pub convergence: ConvergenceConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            duality_pairs: 100,
            carleman_samples: 50,
            estimate_draws: 10,
            gradient_step: 1e-5,
            uniqueness_offset: 0.1,
            null_reach_steps: vec![64, 128, 256],
            convergence: ConvergenceConfig::default(),
        }
    }
}

fn zero_source() -> SourceSpec {
    SourceSpec::zero()
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of every random draw (sources, directions, diagnostics).
    #[serde(default)]
    pub seed: u64,
    /// Problem description.
    pub scenario: ScenarioSpec,
    /// Forward source `F`.
    #[serde(default = "zero_source")]
    pub source: SourceSpec,
    /// Amplitude of the initial datum. Only zero is supported (A4).
    #[serde(default)]
    pub initial_amplitude: f64,
    /// Insensitivity check.
    #[serde(default)]
    pub insensitivity: InsensitivityConfig,
    /// Diagnostic sizes.
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    /// Parse TOML text. Syntax and schema errors carry the line, column and
    /// field path reported by the parser.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a configuration file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Checks that do not need the assembled problem. Everything else is
    /// validated when the scenario is built.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.initial_amplitude != 0.0 {
            return Err(CliError::Invalid(format!(
                "initial_amplitude = {}: assumption A4 fixes the initial datum to zero; \
                 nonzero initial data are not supported",
                self.initial_amplitude
            )));
        }
        self.source
            .validate(self.scenario.time.horizon)
            .map_err(CliError::Core)?;
        if self.insensitivity.ladder.len() < 2 {
            return Err(CliError::Invalid(
                "insensitivity.ladder needs at least two perturbation sizes".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[scenario.grid]
cells = 32
[scenario.time]
steps = 48
[scenario.regions]
omega = [0.2, 0.8]
observation = [0.1, 0.9]
surface = { left = true, right = false }
margin = 0.07
[scenario.coefficients]
preset = "logistic"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml(MINIMAL, "inline").unwrap();
        assert_eq!(c.scenario.grid.cells, 32);
        assert_eq!(c.seed, 0);
        assert_eq!(c.insensitivity.directions, 5);
        assert_eq!(c.hash(), c.clone().hash());
    }

    #[test]
    fn unknown_field_reports_location() {
        let text =
            format!("{MINIMAL}\n[scenario.weights]\nlambda = 1.0\nm = 2.3\nc_s = 1.0\nbogus = 3\n");
        let e = RunConfig::from_toml(&text, "inline").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn nonzero_initial_datum_cites_a4() {
        let text = format!("initial_amplitude = 0.5\n{MINIMAL}");
        let e = RunConfig::from_toml(&text, "inline").unwrap_err();
        assert!(e.to_string().contains("A4"));
    }

    #[test]
    fn seed_changes_hash() {
        let mut c = RunConfig::from_toml(MINIMAL, "inline").unwrap();
        let h = c.hash();
        c.seed = 9;
        assert_ne!(h, c.hash());
    }
}
