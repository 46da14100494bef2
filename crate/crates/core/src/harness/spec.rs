//! Experiment file schema and profiles.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::adaptive::VssParams;
use crate::baselines::{BaselineConfig, DEFAULT_FROST_MU};
use crate::constraint::Regularization;
use crate::error::{AncError, Result};
use crate::optimal::{InverseMode, RegularizationRule};
use crate::scene::SceneConfig;

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Step-size parameters for 8 kHz desk runs with unit-level signals.
pub const DESK_VSS: VssParams = VssParams { mu_max: 1e-4, mu_min: 1e-5, alpha: 0.9999, gamma: 1e-6, beta: 0.999 };

/// Scale preset applied on top of the scene file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Keeps the scene as written (8 kHz, `L = 128` by default).
    #[default]
    Desk,
    /// 48 kHz, `L = 768`, 10-sample secondary delay and the published step-size set.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = AncError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(AncError::Configuration(format!("unknown profile '{other}' (expected desk or paper)"))),
        }
    }
}

impl Profile {
    pub fn apply(self, scene: &mut SceneConfig) {
        if self == Profile::Paper {
            log::warn!("paper profile: 48 kHz with L = 768 runs roughly 200x slower than desk");
            let factor = 48000.0 / scene.fs;
            scene.fs = 48000.0;
            scene.filter_len = 768;
            scene.secondary_delay = 10;
            scene.bulk_delay = (scene.bulk_delay as f64 * factor).round() as usize;
        }
    }

    pub fn default_vss(self) -> VssParams {
        match self {
            Profile::Desk => DESK_VSS,
            Profile::Paper => VssParams::PAPER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    ProposedOptimal,
    #[default]
    ProposedAdaptive,
    Unconstrained,
    PartiallyCoupled,
    Decoupled,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::ProposedOptimal => "proposed_optimal",
            ControllerKind::ProposedAdaptive => "proposed_adaptive",
            ControllerKind::Unconstrained => "unconstrained",
            ControllerKind::PartiallyCoupled => "partially_coupled",
            ControllerKind::Decoupled => "decoupled",
        }
    }
}

/// Scene given as a path (relative to the experiment file) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSource {
    Path(PathBuf),
    Inline(Box<SceneConfig>),
}

/// Parameter swept by a command. Each command has its own default axis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    #[default]
    None,
    Doa { values: Vec<f64> },
    Ssnr { values: Vec<f64> },
    Snr { values: Vec<f64> },
}

impl Sweep {
    pub fn values(&self) -> &[f64] {
        match self {
            Sweep::None => &[],
            Sweep::Doa { values } | Sweep::Ssnr { values } | Sweep::Snr { values } => values,
        }
    }
}

/// Output lags covered by the spatial constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSpan {
    /// The first `L` lags.
    Filter,
    /// Every lag of the combined response, `2L + len(g) − 2`.
    #[default]
    Full,
    Lags(usize),
}

/// Settings of the proposed controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposedConfig {
    /// Cutoff of the minimum-phase high-pass weighting; `null` leaves the constraint unweighted.
    pub weighting_cutoff_hz: Option<f64>,
    pub constraint_span: ConstraintSpan,
    pub regularization: RegularizationRule,
    pub inverse_mode: InverseMode,
    pub projection: Regularization,
    /// `null` takes the profile's step-size set.
    pub vss: Option<VssParams>,
    pub hop_s: f64,
    pub projection_stride: usize,
}

impl Default for ProposedConfig {
    fn default() -> Self {
        ProposedConfig {
            weighting_cutoff_hz: None,
            constraint_span: ConstraintSpan::Full,
            regularization: RegularizationRule::Eigen { ratio: 1e4 },
            inverse_mode: InverseMode::Inverse,
            projection: Regularization::default(),
            vss: None,
            hop_s: 0.1,
            projection_stride: 1,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trailing fraction of the record used for steady-state metrics.
    pub window_fraction: f64,
    /// High-pass cutoff for the secondary SDI figure; `null` skips it.
    pub sdi_highpass_hz: Option<f64>,
    /// Bands for band-limited NR, Hz.
    pub bands: Vec<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window_fraction: 0.25,
            sdi_highpass_hz: Some(140.0),
            bands: vec![(50.0, 125.0), (125.0, 250.0), (250.0, 500.0), (500.0, 1000.0), (1000.0, 2000.0), (2000.0, 3800.0)],
        }
    }
}

/// Experiment file.
///
/// ```json
/// {
///   "version": 1,
///   "scene": "scene.json",
///   "controller": "proposed_adaptive",
///   "sweep": { "axis": "doa", "values": [0, 30, 60, 90] },
///   "seeds": [1, 2]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    pub scene: SceneSource,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default)]
    pub sweep: Sweep,
    /// Each seed reseeds every source; empty keeps the scene's seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub proposed: ProposedConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub partially_coupled: Option<BaselineConfig>,
    #[serde(default)]
    pub decoupled: Option<BaselineConfig>,
    #[serde(default = "default_frost_mu")]
    pub frost_mu: f64,
    /// Eigen ratios for the robustness sweep's spread band.
    #[serde(default)]
    pub ratio_grid: Vec<f64>,
    /// Multiplier of the sensor-noise variance for the noise-matched rule.
    #[serde(default = "default_noise_factor")]
    pub sensor_noise_factor: f64,
    /// Sensor-noise placement used by the robustness sweep when the scene has none.
    #[serde(default)]
    pub sensor_noise_mics: Option<Vec<usize>>,
}

fn default_frost_mu() -> f64 {
    DEFAULT_FROST_MU
}
fn default_noise_factor() -> f64 {
    10.0
}

impl ExperimentSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        if spec.version != EXPERIMENT_SCHEMA_VERSION {
            return Err(AncError::Configuration(format!(
                "unsupported experiment version {} (expected {EXPERIMENT_SCHEMA_VERSION})",
                spec.version
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Reads an experiment file. A plain scene file is accepted too and wrapped with defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let mut spec = if value.get("scene").is_some() {
            Self::from_json_str(&text)?
        } else {
            Self::from_scene(SceneConfig::from_file(path)?)
        };
        if let (SceneSource::Path(p), Some(dir)) = (&spec.scene, path.parent()) {
            if p.is_relative() {
                spec.scene = SceneSource::Path(dir.join(p));
            }
        }
        Ok(spec)
    }

    pub fn from_scene(scene: SceneConfig) -> Self {
        ExperimentSpec {
            version: EXPERIMENT_SCHEMA_VERSION,
            scene: SceneSource::Inline(Box::new(scene)),
            controller: ControllerKind::default(),
            sweep: Sweep::None,
            seeds: Vec::new(),
            output_dir: None,
            proposed: ProposedConfig::default(),
            eval: EvalConfig::default(),
            partially_coupled: None,
            decoupled: None,
            frost_mu: DEFAULT_FROST_MU,
            ratio_grid: Vec::new(),
            sensor_noise_factor: default_noise_factor(),
            sensor_noise_mics: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eval.window_fraction > 0.0 && self.eval.window_fraction <= 1.0) {
            return Err(AncError::Configuration(format!("window_fraction {} must lie in (0, 1]", self.eval.window_fraction)));
        }
        if !(self.proposed.hop_s > 0.0) {
            return Err(AncError::Configuration("hop_s must be positive".into()));
        }
        if let Some(v) = &self.proposed.vss {
            v.validate()?;
        }
        if self.sweep != Sweep::None && self.sweep.values().is_empty() {
            return Err(AncError::Configuration("sweep list is empty".into()));
        }
        if self.sweep.values().iter().any(|v| !v.is_finite()) {
            return Err(AncError::Configuration("sweep values must be finite".into()));
        }
        if self.ratio_grid.iter().any(|r| !(*r > 0.0)) {
            return Err(AncError::Configuration("ratio_grid entries must be positive".into()));
        }
        if !(self.frost_mu > 0.0) {
            return Err(AncError::Configuration("frost_mu must be positive".into()));
        }
        Ok(())
    }

    /// Loads the scene and applies the profile.
    pub fn resolve_scene(&self, profile: Profile) -> Result<SceneConfig> {
        let mut scene = match &self.scene {
            SceneSource::Path(p) => SceneConfig::from_file(p)?,
            SceneSource::Inline(s) => (**s).clone(),
        };
        profile.apply(&mut scene);
        Ok(scene)
    }
}

/// Reseeds every random source of `scene` from one run seed.
pub fn reseed(scene: &mut SceneConfig, seed: u64) {
    scene.desired.seed = seed;
    for (i, n) in scene.noises.iter_mut().enumerate() {
        n.seed = seed.wrapping_mul(1000).wrapping_add(i as u64 + 1);
    }
    if let Some(sn) = &mut scene.sensor_noise {
        sn.seed = seed.wrapping_add(0x5EED);
    }
}

/// SHA-256 over the canonical JSON of everything that determines a result.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(&json))[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = r#"{"version":1,"geometry":{"preset":"glasses6"},
        "desired":{"doa_deg":0,"signal":{"kind":"pink"},"seed":1},
        "noises":[{"doa_deg":60,"signal":{"kind":"pink"},"seed":2}],"duration_s":1}"#;

    #[test]
    fn parses_minimal_experiment() {
        let text = format!(r#"{{"version":1,"scene":{SCENE},"controller":"proposed_optimal"}}"#);
        let spec = ExperimentSpec::from_json_str(&text).unwrap();
        assert_eq!(spec.controller, ControllerKind::ProposedOptimal);
        assert_eq!(spec.proposed, ProposedConfig::default());
    }

    #[test]
    fn rejects_unknown_controller_and_keys() {
        let bad = format!(r#"{{"version":1,"scene":{SCENE},"controller":"magic"}}"#);
        assert!(ExperimentSpec::from_json_str(&bad).is_err());
        let extra = format!(r#"{{"version":1,"scene":{SCENE},"colour":"red"}}"#);
        assert!(ExperimentSpec::from_json_str(&extra).is_err());
        let ver = format!(r#"{{"version":2,"scene":{SCENE}}}"#);
        assert!(matches!(ExperimentSpec::from_json_str(&ver), Err(AncError::Configuration(_))));
    }

    #[test]
    fn rejects_empty_sweep() {
        let text = format!(r#"{{"version":1,"scene":{SCENE},"sweep":{{"axis":"ssnr","values":[]}}}}"#);
        assert!(matches!(ExperimentSpec::from_json_str(&text), Err(AncError::Configuration(_))));
    }

    #[test]
    fn paper_profile_rescales() {
        let mut s = SceneConfig::from_json_str(SCENE).unwrap();
        Profile::Paper.apply(&mut s);
        assert_eq!((s.fs, s.filter_len, s.secondary_delay, s.bulk_delay), (48000.0, 768, 10, 48));
        assert_eq!(Profile::Paper.default_vss(), VssParams::PAPER);
    }

    #[test]
    fn hash_tracks_content() {
        let a = SceneConfig::from_json_str(SCENE).unwrap();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        reseed(&mut b, 9);
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(b.noises[0].seed, 9001);
    }
}
