//! Versioned JSON scene description.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::geometry::{build_geometry, GeometryPreset};
use super::{AcousticScene, SensorNoiseSpec, SourceSpec, DEFAULT_BULK_DELAY};
use crate::baselines::BaselineConfig;
use crate::error::{AncError, Result};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Scene file contents. Unknown keys are rejected.
///
/// ```json
/// {
///   "version": 1,
///   "geometry": { "preset": "glasses6" },
///   "desired": { "doa_deg": 0, "signal": { "kind": "speech_like" }, "seed": 1 },
///   "noises": [ { "doa_deg": 60, "signal": { "kind": "pink" }, "seed": 2 } ],
///   "snr_db": 0
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub version: u32,
    #[serde(default = "default_fs")]
    pub fs: f64,
    #[serde(default = "default_filter_len")]
    pub filter_len: usize,
    #[serde(default = "default_bulk_delay")]
    pub bulk_delay: usize,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    pub geometry: GeometryPreset,
    /// Overrides the preset's error microphone.
    #[serde(default)]
    pub error_mic_index: Option<usize>,
    pub desired: SourceSpec,
    #[serde(default)]
    pub noises: Vec<SourceSpec>,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default = "default_secondary_delay")]
    pub secondary_delay: usize,
    #[serde(default)]
    pub secondary_ir: Option<Vec<f64>>,
    #[serde(default)]
    pub sensor_noise: Option<SensorNoiseSpec>,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
}

fn default_fs() -> f64 {
    8000.0
}
fn default_filter_len() -> usize {
    128
}
fn default_bulk_delay() -> usize {
    DEFAULT_BULK_DELAY
}
fn default_duration() -> f64 {
    10.0
}
fn default_secondary_delay() -> usize {
    2
}

impl SceneConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: SceneConfig = serde_json::from_str(text)?;
        cfg.check_version()?;
        Ok(cfg)
    }

    /// Reads a scene file; relative WAV paths are resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for src in std::iter::once(&mut cfg.desired).chain(cfg.noises.iter_mut()) {
                if let Some(wav) = &src.wav {
                    if wav.is_relative() {
                        src.wav = Some(dir.join(wav));
                    }
                }
            }
        }
        Ok(cfg)
    }

    fn check_version(&self) -> Result<()> {
        if self.version != SCENE_SCHEMA_VERSION {
            return Err(AncError::Configuration(format!(
                "unsupported scene version {} (expected {SCENE_SCHEMA_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    pub fn duration_samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    pub fn to_scene(&self) -> Result<AcousticScene> {
        self.check_version()?;
        let mut geometry = build_geometry(&self.geometry)?;
        if let Some(idx) = self.error_mic_index {
            geometry.error_mic_index = idx;
            geometry.validate()?;
        }
        let scene = AcousticScene {
            geometry,
            desired: self.desired.clone(),
            noises: self.noises.clone(),
            secondary_delay: self.secondary_delay,
            secondary_ir: self.secondary_ir.clone(),
            sensor_noise: self.sensor_noise.clone(),
            snr_db: self.snr_db,
            fs: self.fs,
            filter_len: self.filter_len,
            bulk_delay: self.bulk_delay,
        };
        scene.validate()?;
        Ok(scene)
    }
}
