//! Experiment and sweep configuration, read from TOML.

use std::path::{Path, PathBuf};

use qet_core::noise::ReadoutProfile;
use qet_core::protocol::ProtocolVariant;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_SHOTS: u64 = 1024;
pub const NO_PROFILE: &str = "none";

/// How the feedback angle is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    #[default]
    ClosedForm,
    Optimized,
    Explicit(f64),
}

impl PhiMode {
    pub fn label(&self) -> String {
        match self {
            PhiMode::ClosedForm => "closed_form".into(),
            PhiMode::Optimized => "optimized".into(),
            PhiMode::Explicit(phi) => format!("explicit({phi})"),
        }
    }
}

impl std::str::FromStr for PhiMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" | "closed-form" => Ok(PhiMode::ClosedForm),
            "optimized" => Ok(PhiMode::Optimized),
            other => other
                .parse::<f64>()
                .map(PhiMode::Explicit)
                .map_err(|_| CliError::Config(format!("phi mode must be closed_form, optimized or a number, got '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    /// `.csv` selects CSV; anything else is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(CliError::Config(format!("format must be json or csv, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

impl OutputSpec {
    pub fn resolved_format(&self) -> Format {
        self.format.unwrap_or_else(|| Format::from_path(&self.path))
    }
}

fn default_shots() -> u64 {
    DEFAULT_SHOTS
}

fn default_profile() -> String {
    NO_PROFILE.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: ProtocolVariant,
    pub h: f64,
    pub k: f64,
    #[serde(default = "default_shots")]
    pub shots: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub backend_profile: String,
    #[serde(default)]
    pub mitigation: bool,
    #[serde(default)]
    pub phi_mode: PhiMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

impl ExperimentConfig {
    pub fn new(variant: ProtocolVariant, h: f64, k: f64) -> Self {
        Self {
            variant,
            h,
            k,
            shots: DEFAULT_SHOTS,
            seed: 0,
            backend_profile: default_profile(),
            mitigation: false,
            phi_mode: PhiMode::default(),
            output: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(self.h, self.k, self.shots, &self.backend_profile, self.mitigation, self.phi_mode, self.variant)
    }

    /// The readout profile cut to the circuit width, if any.
    pub fn profile(&self) -> Result<Option<ReadoutProfile>> {
        load_profile(&self.backend_profile, self.variant)
    }
}

fn load_profile(name: &str, variant: ProtocolVariant) -> Result<Option<ReadoutProfile>> {
    if name == NO_PROFILE {
        return Ok(None);
    }
    let profile = ReadoutProfile::bundled(name).map_err(|_| {
        CliError::Config(format!("unknown backend profile '{name}' (available: {})", ReadoutProfile::bundled_names().join(", ")))
    })?;
    let n = variant.model_variant().n_qubits();
    profile.restrict(n).map(Some).map_err(|e| CliError::Config(format!("profile '{name}': {e}")))
}

fn validate_common(
    h: f64,
    k: f64,
    shots: u64,
    profile: &str,
    mitigation: bool,
    phi_mode: PhiMode,
    variant: ProtocolVariant,
) -> Result<()> {
    for (name, v) in [("h", h), ("k", k)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::Config(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if shots == 0 {
        return Err(CliError::Config("shots must be positive".into()));
    }
    if let PhiMode::Explicit(phi) = phi_mode {
        if !phi.is_finite() {
            return Err(CliError::Config(format!("explicit phi must be finite, got {phi}")));
        }
    }
    if mitigation && profile == NO_PROFILE {
        return Err(CliError::Config("mitigation needs a backend profile".into()));
    }
    load_profile(profile, variant)?;
    Ok(())
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// `(h, k)`
pub type GridPoint = (f64, f64);

/// A grid of parameter points sharing every other experiment setting.
/// `h` and `k` form a Cartesian product; `points` adds explicit pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variant: ProtocolVariant,
    #[serde(default)]
    pub h: Vec<f64>,
    #[serde(default)]
    pub k: Vec<f64>,
    #[serde(default)]
    pub points: Vec<[f64; 2]>,
    #[serde(default = "default_shots")]
    pub shots: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub backend_profile: String,
    #[serde(default)]
    pub mitigation: bool,
    #[serde(default)]
    pub phi_mode: PhiMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.grid()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_to_string(path)?)
    }

    /// Grid points in declaration order with duplicates removed, plus one
    /// warning per dropped duplicate.
    pub fn grid(&self) -> Result<(Vec<GridPoint>, Vec<String>)> {
        if self.h.is_empty() != self.k.is_empty() {
            return Err(CliError::Config("h and k lists must both be given or both be omitted".into()));
        }
        let product = self.h.iter().flat_map(|&h| self.k.iter().map(move |&k| (h, k)));
        let all: Vec<(f64, f64)> = product.chain(self.points.iter().map(|p| (p[0], p[1]))).collect();
        if all.is_empty() {
            return Err(CliError::Config("sweep grid is empty".into()));
        }
        let mut points: Vec<GridPoint> = Vec::new();
        let mut warnings = Vec::new();
        for (h, k) in all {
            if points.iter().any(|&(a, b)| a.to_bits() == h.to_bits() && b.to_bits() == k.to_bits()) {
                warnings.push(format!("duplicate grid point (h, k) = ({h}, {k}) ignored"));
            } else {
                validate_common(h, k, self.shots, &self.backend_profile, self.mitigation, self.phi_mode, self.variant)?;
                points.push((h, k));
            }
        }
        Ok((points, warnings))
    }

    pub fn point(&self, h: f64, k: f64) -> ExperimentConfig {
        ExperimentConfig {
            variant: self.variant,
            h,
            k,
            shots: self.shots,
            seed: self.seed,
            backend_profile: self.backend_profile.clone(),
            mitigation: self.mitigation,
            phi_mode: self.phi_mode,
            output: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml_str("variant = \"simo\"\nh = 1.0\nk = 3.0\n").unwrap();
        assert_eq!(c.shots, 1024);
        assert_eq!(c.backend_profile, "none");
        assert_eq!(c.phi_mode, PhiMode::ClosedForm);
        assert!(!c.mitigation);
    }

    #[test]
    fn phi_mode_forms() {
        let c = ExperimentConfig::from_toml_str("variant = \"miso\"\nh = 1.0\nk = 4.0\nphi_mode = \"optimized\"\n").unwrap();
        assert_eq!(c.phi_mode, PhiMode::Optimized);
        let c = ExperimentConfig::from_toml_str("variant = \"miso\"\nh = 1.0\nk = 4.0\nphi_mode = { explicit = 0.25 }\n").unwrap();
        assert_eq!(c.phi_mode, PhiMode::Explicit(0.25));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("variant = \"simo\"\nh = 1.0\nk = 3.0\nshotz = 5\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml_str("variant = \"simo\"\nh = 1.0\nk = 3.0\n[output]\npath = \"a\"\nfmt = \"csv\"\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "variant = \"simo\"\nh = -1.0\nk = 3.0\n",
            "variant = \"simo\"\nh = 1.0\nk = 3.0\nshots = 0\n",
            "variant = \"simo\"\nh = 1.0\nk = 3.0\nbackend_profile = \"nowhere\"\n",
            "variant = \"simo\"\nh = 1.0\nk = 3.0\nmitigation = true\n",
            "variant = \"triple\"\nh = 1.0\nk = 3.0\n",
        ] {
            assert_eq!(ExperimentConfig::from_toml_str(text).unwrap_err().exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn output_format_follows_extension_unless_given() {
        let o = OutputSpec { path: "r.csv".into(), format: None };
        assert_eq!(o.resolved_format(), Format::Csv);
        let o = OutputSpec { path: "r.csv".into(), format: Some(Format::Json) };
        assert_eq!(o.resolved_format(), Format::Json);
    }

    #[test]
    fn sweep_grid_deduplicates_with_warning() {
        let s = SweepConfig::from_toml_str("variant = \"simo\"\nh = [1.0, 2.0]\nk = [3.0]\npoints = [[1.0, 3.0], [4.0, 4.0]]\n").unwrap();
        let (points, warnings) = s.grid().unwrap();
        assert_eq!(points, vec![(1.0, 3.0), (2.0, 3.0), (4.0, 4.0)]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn empty_sweep_is_rejected() {
        assert!(SweepConfig::from_toml_str("variant = \"simo\"\n").is_err());
        assert!(SweepConfig::from_toml_str("variant = \"simo\"\nh = [1.0]\n").is_err());
    }
}
