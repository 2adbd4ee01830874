//! Experiment profile: a versioned TOML schema collecting every measured
//! parameter of the setup. Quantities are entered in bench units (MHz,
//! degrees, dB, watts, meters) and converted to SI once on load. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::PathState;
use crate::opo::{decay_rate, pump_rate, CavityGeometry, NoiseShape, OpoParams, Quadrature, SeedNoiseModel};
use crate::tomography::{ExperimentModel, TomographyPlan};
use crate::trace::{ArtifactModel, RippleComponent, SwitchTiming};

pub const SCHEMA_VERSION: u32 = 1;

/// The profile shipped with the toolkit (measured setup parameters).
pub const DEFAULT_PROFILE_TOML: &str = include_str!("../../../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub cavity: CavityConfig,
    pub pump: PumpConfig,
    pub efficiency: EfficiencyConfig,
    pub paths: PathsConfig,
    pub seed_noise: NoiseShapeConfig,
    pub delay_excess: NoiseShapeConfig,
    pub timing: TimingConfig,
    pub artifacts: ArtifactConfig,
    pub tomography: TomographyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityConfig {
    pub coupling_transmissivity: f64,
    pub intracavity_loss: f64,
    pub round_trip_length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpConfig {
    pub power_w: f64,
    pub threshold_power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyConfig {
    pub stages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub direct: PathConfig,
    pub delay: PathConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    /// Path efficiency override; defaults to the stage product.
    #[serde(default)]
    pub efficiency: Option<f64>,
    pub phase_offset_deg: f64,
    pub phase_jitter_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseShapeConfig {
    pub one_over_f_amplitude: f64,
    pub one_over_f_exponent: f64,
    pub bump_amplitude: f64,
    pub bump_center_mhz: f64,
    pub bump_width_mhz: f64,
    /// The 1/f tail is held flat below this frequency.
    #[serde(default = "default_plateau_mhz")]
    pub low_freq_plateau_mhz: f64,
}

fn default_plateau_mhz() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub switch_frequency_khz: f64,
    pub extract_length_ns: f64,
    pub traces_per_set: usize,
    pub sample_rate_msps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactConfig {
    pub coherent_offset: f64,
    pub slope_decay_per_us: f64,
    pub slope_jitter_per_us: f64,
    pub electronic_noise_db: f64,
    #[serde(default)]
    pub ripple: Vec<RippleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RippleConfig {
    pub amplitude: f64,
    pub frequency_mhz: f64,
    pub decay_per_us: f64,
    pub phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographyConfig {
    pub theta_points: usize,
    pub frequencies_mhz: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("profile parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The shipped default profile.
    pub fn paper_default() -> Self {
        Self::from_toml_str(DEFAULT_PROFILE_TOML).expect("shipped profile is valid")
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("profile encode: {e}")))
    }

    /// Validates every derived module parameter at load time.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.cavity_geometry().validate()?;
        if self.efficiency.stages.is_empty()
            || self
                .efficiency
                .stages
                .iter()
                .any(|e| !(0.0..=1.0).contains(e))
        {
            return Err(Error::Config(
                "efficiency stages must be a nonempty list within [0, 1]".into(),
            ));
        }
        self.opo_params()?;
        self.switch_timing().validate()?;
        self.artifact_model().validate()?;
        for path in self.path_states()? {
            path.validate()?;
        }
        if self.tomography.theta_points < 2 {
            return Err(Error::Config("theta_points must be at least 2".into()));
        }
        let nyquist_mhz = self.timing.sample_rate_msps / 2.0;
        if self
            .tomography
            .frequencies_mhz
            .iter()
            .any(|&f| !(0.0 < f && f < nyquist_mhz))
        {
            return Err(Error::Config(format!(
                "analysis frequencies must lie in (0, {nyquist_mhz}) MHz"
            )));
        }
        self.tomography_plan().validate()
    }

    pub fn cavity_geometry(&self) -> CavityGeometry {
        CavityGeometry {
            coupling_transmissivity: self.cavity.coupling_transmissivity,
            intracavity_loss: self.cavity.intracavity_loss,
            round_trip_length: self.cavity.round_trip_length_m,
        }
    }

    /// Product of the stage efficiencies.
    pub fn eta_total(&self) -> f64 {
        self.efficiency.stages.iter().product()
    }

    /// OPO rates derived from the cavity geometry and pump powers.
    pub fn opo_params(&self) -> Result<OpoParams> {
        let geom = self.cavity_geometry();
        let tau = geom.round_trip_length / crate::SPEED_OF_LIGHT;
        let gamma_c = (1.0 - (1.0 - geom.coupling_transmissivity).sqrt()) / tau;
        let gamma_l = (1.0 - (1.0 - geom.intracavity_loss).sqrt()) / tau;
        let gamma = decay_rate(&geom);
        let epsilon = pump_rate(self.pump.power_w, self.pump.threshold_power_w, gamma)?;
        OpoParams::new(gamma_c, gamma_l, 0.0, epsilon, self.eta_total(), Quadrature::X)
    }

    pub fn switch_timing(&self) -> SwitchTiming {
        let f = self.timing.switch_frequency_khz * 1e3;
        SwitchTiming {
            switch_frequency: f,
            window_length: 1.0 / (2.0 * f),
            extract_length: self.timing.extract_length_ns * 1e-9,
            traces_per_set: self.timing.traces_per_set,
        }
    }

    pub fn sample_rate(&self) -> f64 {
        self.timing.sample_rate_msps * 1e6
    }

    pub fn artifact_model(&self) -> ArtifactModel {
        ArtifactModel {
            coherent_offset: self.artifacts.coherent_offset,
            slope_decay: self.artifacts.slope_decay_per_us * 1e6,
            slope_jitter_sigma: self.artifacts.slope_jitter_per_us * 1e6,
            ripple: self
                .artifacts
                .ripple
                .iter()
                .map(|r| RippleComponent {
                    amplitude: r.amplitude,
                    frequency: r.frequency_mhz * 1e6,
                    decay_rate: r.decay_per_us * 1e6,
                    phase: r.phase_rad,
                })
                .collect(),
            electronic_noise_db: self.artifacts.electronic_noise_db,
        }
    }

    pub fn path_states(&self) -> Result<[PathState; 2]> {
        let eta_default = self.eta_total();
        let mk = |p: &PathConfig| -> Result<PathState> {
            let eta = p.efficiency.unwrap_or(eta_default);
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Config(format!(
                    "path efficiency {eta} outside [0, 1]"
                )));
            }
            Ok(PathState::new(
                1.0,
                1.0,
                eta,
                p.phase_offset_deg.to_radians(),
                p.phase_jitter_deg.to_radians(),
            ))
        };
        Ok([mk(&self.paths.direct)?, mk(&self.paths.delay)?])
    }

    fn noise_shape(cfg: &NoiseShapeConfig) -> NoiseShape {
        NoiseShape {
            one_over_f_amplitude: cfg.one_over_f_amplitude,
            one_over_f_exponent: cfg.one_over_f_exponent,
            bump_amplitude: cfg.bump_amplitude,
            bump_center_hz: cfg.bump_center_mhz * 1e6,
            bump_width_hz: cfg.bump_width_mhz * 1e6,
            low_freq_plateau_hz: cfg.low_freq_plateau_mhz * 1e6,
        }
    }

    pub fn delay_excess_shape(&self) -> NoiseShape {
        Self::noise_shape(&self.delay_excess)
    }

    pub fn seed_noise_shape(&self) -> NoiseShape {
        Self::noise_shape(&self.seed_noise)
    }

    /// Seed-noise coefficient tables evaluated on the trace DFT grid.
    pub fn seed_noise_model(&self) -> Result<SeedNoiseModel> {
        let shape = self.seed_noise_shape();
        if shape.is_zero() {
            return Ok(SeedNoiseModel::shot_limited());
        }
        let timing = self.switch_timing();
        let fs = self.sample_rate();
        let n = timing.samples_per_trace(fs);
        let gamma = self.opo_params()?.gamma();
        let freqs: Vec<f64> = (0..=n / 2).map(|m| m as f64 * fs / n as f64).collect();
        let s0: Vec<f64> = freqs.iter().map(|&f| 1.0 + shape.excess_rel(f)).collect();
        SeedNoiseModel::from_unpumped(&freqs, &s0, gamma)
    }

    /// The complete simulation model implied by the profile.
    pub fn experiment_model(&self) -> Result<ExperimentModel> {
        Ok(ExperimentModel {
            opo: self.opo_params()?,
            seed_model: self.seed_noise_model()?,
            paths: self.path_states()?,
            delay_excess: self.delay_excess_shape(),
            timing: self.switch_timing(),
            artifacts: self.artifact_model(),
            sample_rate: self.sample_rate(),
            master_seed: self.master_seed,
        })
    }

    pub fn tomography_plan(&self) -> TomographyPlan {
        let n = self.tomography.theta_points.max(2);
        let grid: Vec<f64> = (0..n)
            .map(|k| std::f64::consts::FRAC_PI_2 * k as f64 / (n - 1) as f64)
            .collect();
        TomographyPlan {
            set1_thetas: grid.clone(),
            set2_thetas: grid,
            frequencies: self
                .tomography
                .frequencies_mhz
                .iter()
                .map(|f| f * 1e6)
                .collect(),
        }
    }
}

/// Reads a two-column CSV of `frequency_mhz, variance_rel_shot`, skipping
/// a header row when present.
pub fn read_spectrum_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut freq_hz = Vec::new();
    let mut value = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (a, b) = match (cols.next(), cols.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected two comma-separated columns",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(f), Ok(v)) => {
                freq_hz.push(f * 1e6);
                value.push(v);
            }
            _ if lineno == 0 => continue, // header row
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: non-numeric row",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    if freq_hz.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok((freq_hz, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_profile_parses_and_validates() {
        let config = ExperimentConfig::paper_default();
        assert_eq!(config.schema_version, SCHEMA_VERSION);
        assert_relative_eq!(config.eta_total(), 0.68432, epsilon = 1e-12);
        let opo = config.opo_params().unwrap();
        let mhz = std::f64::consts::TAU * 1e6;
        assert!((opo.gamma() / mhz - 8.07).abs() < 0.05);
        assert!((opo.epsilon / mhz - 5.23).abs() < 0.1);
        let model = config.experiment_model().unwrap();
        assert_eq!(model.n_samples(), 225);
        let plan = config.tomography_plan();
        assert_eq!(plan.set1_thetas.len(), 13);
        assert_relative_eq!(plan.frequencies[0], 3.0e6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = DEFAULT_PROFILE_TOML.to_string();
        text.push_str("\n[cavity2]\nfoo = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::Config(_))
        ));
        let text = DEFAULT_PROFILE_TOML.replace("coupling_transmissivity", "coupling_typo");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn schema_version_is_checked() {
        let text = DEFAULT_PROFILE_TOML.replace("schema_version = 1", "schema_version = 99");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_physics_is_rejected_at_load() {
        let text = DEFAULT_PROFILE_TOML.replace("power_w = 0.350", "power_w = 2.0");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = DEFAULT_PROFILE_TOML.replace(
            "electronic_noise_db = -20.0",
            "electronic_noise_db = 3.0",
        );
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn seed_noise_round_trips_through_the_model() {
        let config = ExperimentConfig::paper_default();
        let seed = config.seed_noise_model().unwrap();
        let shape = config.seed_noise_shape();
        let opo = config.opo_params().unwrap();
        let unpumped = OpoParams::new(opo.gamma_c, opo.gamma_l, 0.0, 0.0, opo.eta, Quadrature::X)
            .unwrap();
        for f in [2.0e6, 3.0e6, 7.0e6] {
            // Bin-aligned queries reproduce the parametric shape exactly.
            let n = 225.0;
            let fs = config.sample_rate();
            let bin_f = (f / (fs / n)).round() * fs / n;
            let got = crate::opo::output_spectrum(
                &unpumped,
                &seed,
                std::f64::consts::TAU * bin_f,
                Quadrature::X,
            );
            assert_relative_eq!(got, 1.0 + shape.excess_rel(bin_f), epsilon = 1e-10);
        }
    }

    #[test]
    fn spectrum_csv_reader_handles_headers_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seed.csv");
        std::fs::write(&path, "freq_mhz,variance_rel_shot\n1.0,1.5\n3.0, 1.2\n").unwrap();
        let (f, v) = read_spectrum_csv(&path).unwrap();
        assert_eq!(f, vec![1.0e6, 3.0e6]);
        assert_eq!(v, vec![1.5, 1.2]);
        std::fs::write(&path, "freq\n").unwrap();
        assert!(read_spectrum_csv(&path).is_err());
    }
}
