//! Shared domain types: camera frames, scene labels, and the four tasks
//! every pipeline stage speaks in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ego-vehicle motion state derived from IMU speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionState {
    Stopped,
    Accelerating,
    Cruising,
    Decelerating,
}

/// One timestamped camera frame with ego kinematics; the unit of mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub timestamp_ms: i64,
    pub ego_speed_mps: f64,
    pub motion_state: MotionState,
    pub image_ref: String,
    pub camera_fps: f64,
}

/// Speed below which a vehicle reporting `stopped` is considered consistent.
pub const STOPPED_SPEED_MPS: f64 = 0.3;

impl FrameRecord {
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.ego_speed_mps < 0.0 {
            return Err(TypeError::NegativeSpeed {
                frame_id: self.frame_id.clone(),
            });
        }
        if self.camera_fps <= 0.0 {
            return Err(TypeError::NonPositiveFps {
                frame_id: self.frame_id.clone(),
            });
        }
        if self.motion_state == MotionState::Stopped && self.ego_speed_mps >= STOPPED_SPEED_MPS {
            return Err(TypeError::InconsistentMotionState {
                frame_id: self.frame_id.clone(),
                speed_mps: self.ego_speed_mps,
            });
        }
        Ok(())
    }
}

/// Validates a frame sequence: per-frame invariants plus strictly
/// increasing timestamps.
pub fn validate_sequence(frames: &[FrameRecord]) -> Result<(), TypeError> {
    for frame in frames {
        frame.validate()?;
    }
    for pair in frames.windows(2) {
        if pair[1].timestamp_ms <= pair[0].timestamp_ms {
            return Err(TypeError::NonIncreasingTimestamps {
                frame_id: pair[1].frame_id.clone(),
            });
        }
    }
    Ok(())
}

/// Traffic-light status as seen by the ego lane. `Absent` means no light
/// governs the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficLight {
    Absent,
    Red,
    Yellow,
    Green,
}

impl TrafficLight {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrafficLight::Absent => "absent",
            TrafficLight::Red => "red",
            TrafficLight::Yellow => "yellow",
            TrafficLight::Green => "green",
        }
    }
}

/// Where a label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Vlm,
    Expert,
    Fused,
    GroundTruth,
}

/// The four evaluation tasks. Mining field ownership and the report
/// layout are keyed on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    RecommendedSpeed,
    TrafficLights,
    Obstacles,
    Crossroad,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::RecommendedSpeed,
        Task::TrafficLights,
        Task::Obstacles,
        Task::Crossroad,
    ];

    pub fn display_name(&self) -> &'static str {
        match self {
            Task::RecommendedSpeed => "Recommended Speed",
            Task::TrafficLights => "Traffic Lights",
            Task::Obstacles => "Obstacles",
            Task::Crossroad => "Crossroad",
        }
    }
}

/// Maximum plausible recommended speed, km/h.
pub const MAX_SPEED_KMH: f64 = 150.0;

/// The structured four-task label; the pipeline's currency.
///
/// Content fields (speed, light, cones, crossroad) round-trip through the
/// label-text grammar; `confidence` and `source` are side-channel metadata
/// that the text form does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub recommended_speed_kmh: Option<f64>,
    pub traffic_light: TrafficLight,
    pub obstacles_cones: bool,
    pub cone_count: Option<u32>,
    pub crossroad: bool,
    pub confidence: f64,
    pub source: LabelSource,
}

impl SceneLabel {
    /// An all-absent label with the given source, confidence 1.0.
    pub fn empty(source: LabelSource) -> Self {
        SceneLabel {
            recommended_speed_kmh: None,
            traffic_light: TrafficLight::Absent,
            obstacles_cones: false,
            cone_count: None,
            crossroad: false,
            confidence: 1.0,
            source,
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.cone_count.is_some() && !self.obstacles_cones {
            return Err(TypeError::ConeCountWithoutCones);
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(TypeError::ConfidenceOutOfRange {
                confidence: self.confidence,
            });
        }
        if let Some(speed) = self.recommended_speed_kmh {
            if !(0.0..=MAX_SPEED_KMH).contains(&speed) {
                return Err(TypeError::SpeedOutOfRange { speed_kmh: speed });
            }
        }
        Ok(())
    }

    /// Equality on the four content fields, ignoring confidence and source.
    pub fn content_eq(&self, other: &SceneLabel) -> bool {
        self.recommended_speed_kmh == other.recommended_speed_kmh
            && self.traffic_light == other.traffic_light
            && self.obstacles_cones == other.obstacles_cones
            && self.cone_count == other.cone_count
            && self.crossroad == other.crossroad
    }
}

/// km/h to m/s. Speed conversions live here so the two units never mix
/// silently: labels carry km/h, IMU speeds carry m/s.
pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}

/// m/s to km/h.
pub fn mps_to_kmh(mps: f64) -> f64 {
    mps * 3.6
}

/// A frame together with the labels each source produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub frame: FrameRecord,
    pub labels: BTreeMap<LabelSource, SceneLabel>,
}

impl LabeledFrame {
    pub fn validate(&self) -> Result<(), TypeError> {
        self.frame.validate()?;
        for label in self.labels.values() {
            label.validate()?;
        }
        if self.labels.contains_key(&LabelSource::Fused) && self.labels.len() == 1 {
            return Err(TypeError::FusedWithoutInputs {
                frame_id: self.frame.frame_id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("frame {frame_id}: ego speed is negative")]
    NegativeSpeed { frame_id: String },
    #[error("frame {frame_id}: camera fps must be positive")]
    NonPositiveFps { frame_id: String },
    #[error("frame {frame_id}: motion_state=stopped but speed {speed_mps} m/s >= {STOPPED_SPEED_MPS}")]
    InconsistentMotionState { frame_id: String, speed_mps: f64 },
    #[error("frame {frame_id}: timestamps must strictly increase")]
    NonIncreasingTimestamps { frame_id: String },
    #[error("cone count present but obstacles_cones is false")]
    ConeCountWithoutCones,
    #[error("confidence {confidence} outside [0, 1]")]
    ConfidenceOutOfRange { confidence: f64 },
    #[error("recommended speed {speed_kmh} km/h outside [0, {MAX_SPEED_KMH}]")]
    SpeedOutOfRange { speed_kmh: f64 },
    #[error("frame {frame_id}: fused label present without any input label")]
    FusedWithoutInputs { frame_id: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(id: &str, ts: i64, speed: f64, state: MotionState) -> FrameRecord {
        FrameRecord {
            frame_id: id.to_string(),
            timestamp_ms: ts,
            ego_speed_mps: speed,
            motion_state: state,
            image_ref: format!("img://{id}"),
            camera_fps: 10.0,
        }
    }

    #[test]
    fn stopped_requires_low_speed() {
        let f = frame("a", 0, 0.2, MotionState::Stopped);
        assert!(f.validate().is_ok());
        let f = frame("b", 0, 1.0, MotionState::Stopped);
        assert!(matches!(
            f.validate(),
            Err(TypeError::InconsistentMotionState { .. })
        ));
    }

    #[test]
    fn sequence_timestamps_strictly_increase() {
        let frames = vec![
            frame("a", 0, 5.0, MotionState::Cruising),
            frame("b", 100, 5.0, MotionState::Cruising),
            frame("c", 100, 5.0, MotionState::Cruising),
        ];
        assert!(matches!(
            validate_sequence(&frames),
            Err(TypeError::NonIncreasingTimestamps { .. })
        ));
    }

    #[test]
    fn cone_count_requires_cones() {
        let mut label = SceneLabel::empty(LabelSource::Vlm);
        label.cone_count = Some(2);
        assert!(matches!(
            label.validate(),
            Err(TypeError::ConeCountWithoutCones)
        ));
        label.obstacles_cones = true;
        assert!(label.validate().is_ok());
    }

    #[test]
    fn unit_conversion_round_trips() {
        let kmh = 47.5;
        assert!((mps_to_kmh(kmh_to_mps(kmh)) - kmh).abs() < 1e-12);
        assert!((kmh_to_mps(36.0) - 10.0).abs() < 1e-12);
    }
}
