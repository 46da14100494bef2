//! Microphone array layouts and plane-wave arrival times.

use serde::{Deserialize, Serialize};

use crate::error::{AncError, Result};

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Point = [f64; 3];

/// Array layout. Azimuth 0° points along +x (straight ahead), 90° along +y (left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<Point>,
    pub error_mic_index: usize,
    pub secondary_source_position: Point,
}

/// Named layouts plus explicit coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryPreset {
    /// Glasses-frame array: four frame microphones and two ear microphones.
    Glasses6,
    /// Eight microphones on a 0.10 m circle with the error microphone at the centre.
    #[serde(rename = "circular8plus1")]
    Circular8Plus1,
    Custom {
        positions: Vec<Point>,
        error_mic_index: usize,
        #[serde(default)]
        secondary_source_position: Option<Point>,
    },
}

/// Approximate glasses layout (metres, head centre at the origin).
///
/// Indices 0..3 are frame microphones (#1 left outer, #2 left inner, #3 right outer,
/// #4 right inner) spread over 0.14 m; 4 and 5 are the left and right ear microphones.
/// The coordinates are read off the proportions of a typical frame, not measured.
pub const GLASSES6_POSITIONS: [Point; 6] = [
    [0.010, 0.070, 0.0],
    [0.030, 0.025, 0.0],
    [0.010, -0.070, 0.0],
    [0.030, -0.025, 0.0],
    [-0.080, 0.075, 0.0],
    [-0.080, -0.075, 0.0],
];

/// Right-ear secondary source, just outside the ear microphone.
pub const GLASSES6_SECONDARY: Point = [-0.080, -0.085, 0.0];

pub const CIRCULAR_RADIUS: f64 = 0.10;

pub fn build_geometry(preset: &GeometryPreset) -> Result<ArrayGeometry> {
    let geometry = match preset {
        GeometryPreset::Glasses6 => ArrayGeometry {
            mic_positions: GLASSES6_POSITIONS.to_vec(),
            error_mic_index: 5,
            secondary_source_position: GLASSES6_SECONDARY,
        },
        GeometryPreset::Circular8Plus1 => {
            let mut mics: Vec<Point> = (0..8)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::PI / 4.0;
                    [CIRCULAR_RADIUS * a.cos(), CIRCULAR_RADIUS * a.sin(), 0.0]
                })
                .collect();
            mics.push([0.0, 0.0, 0.0]);
            ArrayGeometry { mic_positions: mics, error_mic_index: 8, secondary_source_position: [0.0, 0.0, 0.01] }
        }
        GeometryPreset::Custom { positions, error_mic_index, secondary_source_position } => ArrayGeometry {
            mic_positions: positions.clone(),
            error_mic_index: *error_mic_index,
            secondary_source_position: secondary_source_position
                .unwrap_or_else(|| positions.get(*error_mic_index).copied().unwrap_or([0.0; 3])),
        },
    };
    geometry.validate()?;
    Ok(geometry)
}

/// Unit propagation direction of a plane wave arriving from azimuth `doa_deg`
/// (points from the source towards the array).
pub fn arrival_direction(doa_deg: f64) -> Point {
    let a = doa_deg.to_radians();
    [-a.cos(), -a.sin(), 0.0]
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.len() < 2 {
            return Err(AncError::Configuration(format!(
                "an array needs at least 2 microphones, got {}",
                self.mic_positions.len()
            )));
        }
        if self.error_mic_index >= self.mic_positions.len() {
            return Err(AncError::Configuration(format!(
                "error microphone index {} out of range for {} microphones",
                self.error_mic_index,
                self.mic_positions.len()
            )));
        }
        let finite = self.mic_positions.iter().chain(std::iter::once(&self.secondary_source_position)).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(AncError::Configuration("non-finite microphone coordinate".into()));
        }
        Ok(())
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    /// Plane-wave arrival time (seconds) at `mic` relative to the origin.
    pub fn arrival_time(&self, mic: usize, doa_deg: f64) -> f64 {
        let u = arrival_direction(doa_deg);
        let p = self.mic_positions[mic];
        (p[0] * u[0] + p[1] * u[1] + p[2] * u[2]) / SPEED_OF_SOUND
    }

    /// Microphone reached first by a plane wave from `doa_deg` (lowest index on ties).
    pub fn closest_mic(&self, doa_deg: f64) -> usize {
        let mut best = 0;
        for k in 1..self.num_mics() {
            if self.arrival_time(k, doa_deg) < self.arrival_time(best, doa_deg) - 1e-15 {
                best = k;
            }
        }
        best
    }

    /// Centroid of all microphones except the error microphone.
    pub fn reference_centroid(&self) -> Point {
        let mut c = [0.0; 3];
        let n = (self.num_mics() - 1) as f64;
        for (k, p) in self.mic_positions.iter().enumerate() {
            if k != self.error_mic_index {
                for i in 0..3 {
                    c[i] += p[i] / n;
                }
            }
        }
        c
    }
}
