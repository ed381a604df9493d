//! Pseudo-label mining: speed-adaptive sliding-window majority voting,
//! motion-consistency annotation, and VLM/expert label fusion.
//!
//! The pipeline order is fixed: temporal vote over the VLM stream, then
//! motion-consistency annotation of the voted labels, then per-frame fusion
//! with the expert stream. Consistency rules only annotate (confidence
//! penalty or suspect flag); fusion consumes the annotations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FrameRecord, LabelSource, LabeledFrame, MotionState, SceneLabel, Task};

/// Sliding-window sizing. The window covers a fixed travel distance, so
/// slow sequences smooth over more frames than fast ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub reference_distance_m: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_speed_mps: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            reference_distance_m: 10.0,
            min_frames: 3,
            max_frames: 31,
            min_speed_mps: 1.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.min_frames % 2 == 0 || self.max_frames % 2 == 0 {
            return Err(MiningError::EvenWindowBound);
        }
        if self.min_frames < 3 || self.min_frames > self.max_frames {
            return Err(MiningError::BadWindowBounds {
                min: self.min_frames,
                max: self.max_frames,
            });
        }
        if self.reference_distance_m <= 0.0 || self.min_speed_mps <= 0.0 {
            return Err(MiningError::NonPositiveWindowParam);
        }
        Ok(())
    }
}

/// Number of frames the window spans at the given speed: the frame count
/// covering `reference_distance_m`, forced odd, clamped to the configured
/// bounds.
pub fn window_length(speed_mps: f64, fps: f64, cfg: &WindowConfig) -> usize {
    let speed = speed_mps.max(cfg.min_speed_mps);
    let mut n = (fps * cfg.reference_distance_m / speed).round() as usize;
    if n % 2 == 0 {
        n += 1;
    }
    n.clamp(cfg.min_frames, cfg.max_frames)
}

fn strict_majority<T: Eq + Clone>(values: impl Iterator<Item = T>, total: usize) -> Option<T> {
    let mut counts: Vec<(T, usize)> = Vec::new();
    for v in values {
        match counts.iter_mut().find(|(existing, _)| *existing == v) {
            Some((_, n)) => *n += 1,
            None => counts.push((v, 1)),
        }
    }
    counts
        .into_iter()
        .find(|(_, n)| 2 * *n > total)
        .map(|(v, _)| v)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Majority-votes the window's labels onto the center label.
///
/// Each categorical field (traffic light, cone presence, crossroad) is
/// replaced iff the center disagrees with the window's strict majority;
/// without a strict majority the center value is kept. The recommended
/// speed is replaced by the window median when more than half the frames
/// carry one. Returns the adjusted center label and the set of replaced
/// fields.
pub fn temporal_vote(window: &[SceneLabel], center_index: usize) -> (SceneLabel, BTreeSet<Task>) {
    assert!(center_index < window.len(), "center index out of range");
    let total = window.len();
    let mut label = window[center_index].clone();
    let mut replaced = BTreeSet::new();

    if let Some(majority) = strict_majority(window.iter().map(|l| l.traffic_light), total) {
        if label.traffic_light != majority {
            label.traffic_light = majority;
            replaced.insert(Task::TrafficLights);
        }
    }
    if let Some(majority) = strict_majority(window.iter().map(|l| l.obstacles_cones), total) {
        if label.obstacles_cones != majority {
            label.obstacles_cones = majority;
            replaced.insert(Task::Obstacles);
            label.cone_count = if majority {
                mode_cone_count(window)
            } else {
                None
            };
        }
    }
    if let Some(majority) = strict_majority(window.iter().map(|l| l.crossroad), total) {
        if label.crossroad != majority {
            label.crossroad = majority;
            replaced.insert(Task::Crossroad);
        }
    }

    let speeds: Vec<f64> = window
        .iter()
        .filter_map(|l| l.recommended_speed_kmh)
        .collect();
    if 2 * speeds.len() > total {
        let median_speed = median(speeds);
        if label.recommended_speed_kmh != Some(median_speed) {
            label.recommended_speed_kmh = Some(median_speed);
            replaced.insert(Task::RecommendedSpeed);
        }
    }

    (label, replaced)
}

/// Most common cone count among window frames reporting cones; ties take
/// the smaller count.
fn mode_cone_count(window: &[SceneLabel]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for label in window.iter().filter(|l| l.obstacles_cones) {
        if let Some(c) = label.cone_count {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(count, _)| count)
}

/// What a triggered rule does to a label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    PenalizeConfidence { factor: f64 },
    MarkSuspect,
}

/// Condition shapes the default rules need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCondition {
    /// Red light labelled while the vehicle cruises or accelerates through
    /// the whole window.
    RedWhileMoving,
    /// The field stays positive across a window whose travel exceeds the
    /// bound, which a transient roadside event cannot do.
    PersistsBeyondTravel { meters: f64 },
    /// The field is positive in exactly one frame, with negative neighbors.
    IsolatedSpike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRule {
    pub id: String,
    pub task: Task,
    pub condition: RuleCondition,
    pub action: RuleAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRuleSet {
    pub rules: Vec<ConsistencyRule>,
}

impl Default for ConsistencyRuleSet {
    fn default() -> Self {
        ConsistencyRuleSet {
            rules: vec![
                ConsistencyRule {
                    id: "R1".to_string(),
                    task: Task::TrafficLights,
                    condition: RuleCondition::RedWhileMoving,
                    action: RuleAction::PenalizeConfidence { factor: 0.5 },
                },
                ConsistencyRule {
                    id: "R2".to_string(),
                    task: Task::Crossroad,
                    condition: RuleCondition::PersistsBeyondTravel { meters: 200.0 },
                    action: RuleAction::MarkSuspect,
                },
                ConsistencyRule {
                    id: "R3".to_string(),
                    task: Task::Obstacles,
                    condition: RuleCondition::IsolatedSpike,
                    action: RuleAction::MarkSuspect,
                },
            ],
        }
    }
}

/// A label with consistency annotations attached. No field is rewritten;
/// fusion decides what the annotations mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedLabel {
    pub label: SceneLabel,
    pub suspect_fields: BTreeSet<Task>,
    pub triggered_rules: Vec<String>,
}

impl AnnotatedLabel {
    fn clean(label: SceneLabel) -> Self {
        AnnotatedLabel {
            label,
            suspect_fields: BTreeSet::new(),
            triggered_rules: Vec::new(),
        }
    }
}

fn field_positive(label: &SceneLabel, task: Task) -> bool {
    match task {
        Task::TrafficLights => label.traffic_light != crate::types::TrafficLight::Absent,
        Task::Obstacles => label.obstacles_cones,
        Task::Crossroad => label.crossroad,
        Task::RecommendedSpeed => label.recommended_speed_kmh.is_some(),
    }
}

/// Travel distance across the window: speed integrated over timestamp gaps.
fn window_travel_m(frames: &[FrameRecord]) -> f64 {
    frames
        .windows(2)
        .map(|pair| {
            let dt_s = (pair[1].timestamp_ms - pair[0].timestamp_ms) as f64 / 1000.0;
            pair[0].ego_speed_mps * dt_s
        })
        .sum()
}

/// Applies the rules to every position of one window. Labels and frames
/// must be aligned 1:1.
pub fn check_motion_consistency(
    labels: &[SceneLabel],
    frames: &[FrameRecord],
    rules: &ConsistencyRuleSet,
) -> Result<Vec<AnnotatedLabel>, MiningError> {
    if labels.len() != frames.len() {
        return Err(MiningError::MisalignedWindow {
            labels: labels.len(),
            frames: frames.len(),
        });
    }
    let mut annotated: Vec<AnnotatedLabel> =
        labels.iter().cloned().map(AnnotatedLabel::clean).collect();

    for rule in &rules.rules {
        match &rule.condition {
            RuleCondition::RedWhileMoving => {
                let all_moving = frames.iter().all(|f| {
                    matches!(
                        f.motion_state,
                        MotionState::Cruising | MotionState::Accelerating
                    )
                });
                if !all_moving || frames.is_empty() {
                    continue;
                }
                for a in annotated.iter_mut() {
                    if a.label.traffic_light == crate::types::TrafficLight::Red {
                        apply_action(a, rule);
                    }
                }
            }
            RuleCondition::PersistsBeyondTravel { meters } => {
                let persists = !labels.is_empty()
                    && labels.iter().all(|l| field_positive(l, rule.task));
                if persists && window_travel_m(frames) > *meters {
                    for a in annotated.iter_mut() {
                        apply_action(a, rule);
                    }
                }
            }
            RuleCondition::IsolatedSpike => {
                for i in 0..labels.len() {
                    if !field_positive(&labels[i], rule.task) {
                        continue;
                    }
                    let prev_negative =
                        i > 0 && !field_positive(&labels[i - 1], rule.task);
                    let next_negative = i + 1 < labels.len()
                        && !field_positive(&labels[i + 1], rule.task);
                    let has_prev = i > 0;
                    let has_next = i + 1 < labels.len();
                    let isolated = (!has_prev || prev_negative)
                        && (!has_next || next_negative)
                        && (has_prev || has_next);
                    if isolated {
                        apply_action(&mut annotated[i], rule);
                    }
                }
            }
        }
    }
    Ok(annotated)
}

fn apply_action(annotated: &mut AnnotatedLabel, rule: &ConsistencyRule) {
    match rule.action {
        RuleAction::PenalizeConfidence { factor } => {
            annotated.label.confidence *= factor;
        }
        RuleAction::MarkSuspect => {
            annotated.suspect_fields.insert(rule.task);
        }
    }
    annotated.triggered_rules.push(rule.id.clone());
}

/// Which source owns disagreements per field, plus the confidence floors a
/// source needs to win a disagreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    pub expert_threshold: f64,
    pub vlm_threshold: f64,
    /// Fields where the specialized detector is preferred; the rest prefer
    /// the VLM.
    pub expert_owned: BTreeSet<Task>,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        FusionPolicy {
            expert_threshold: 0.7,
            vlm_threshold: 0.5,
            expert_owned: [Task::TrafficLights, Task::Obstacles].into_iter().collect(),
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<(), MiningError> {
        for t in [self.expert_threshold, self.vlm_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(MiningError::ThresholdOutOfRange { value: t });
            }
        }
        Ok(())
    }
}

/// Fusion result for one frame. Dropping a frame is a normal outcome, not
/// an error: it removes the frame from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FusionOutcome {
    Fused(SceneLabel),
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FieldValue {
    Speed(Option<u64>),
    Light(crate::types::TrafficLight),
    Cones(bool, Option<u32>),
    Crossroad(bool),
}

fn field_value(label: &SceneLabel, task: Task) -> FieldValue {
    match task {
        Task::RecommendedSpeed => FieldValue::Speed(label.recommended_speed_kmh.map(f64::to_bits)),
        Task::TrafficLights => FieldValue::Light(label.traffic_light),
        Task::Obstacles => FieldValue::Cones(label.obstacles_cones, label.cone_count),
        Task::Crossroad => FieldValue::Crossroad(label.crossroad),
    }
}

fn write_field(target: &mut SceneLabel, source: &SceneLabel, task: Task) {
    match task {
        Task::RecommendedSpeed => {
            target.recommended_speed_kmh = source.recommended_speed_kmh;
        }
        Task::TrafficLights => target.traffic_light = source.traffic_light,
        Task::Obstacles => {
            target.obstacles_cones = source.obstacles_cones;
            target.cone_count = source.cone_count;
        }
        Task::Crossroad => target.crossroad = source.crossroad,
    }
}

/// Fuses an annotated VLM label with an expert label for one frame.
///
/// Agreeing fields fuse at the max of the two confidences. Disagreements go
/// to the owning source when its confidence clears its threshold, then to
/// the other source, else the frame is dropped. A VLM field flagged suspect
/// cannot win a disagreement.
pub fn fuse_labels(
    vlm: &AnnotatedLabel,
    expert: &SceneLabel,
    policy: &FusionPolicy,
) -> FusionOutcome {
    let mut fused = SceneLabel::empty(LabelSource::Fused);
    let mut fused_confidence = f64::INFINITY;

    for task in Task::ALL {
        let agree = field_value(&vlm.label, task) == field_value(expert, task);
        let field_conf = if agree {
            write_field(&mut fused, expert, task);
            // On agreement prefer the expert's count/value bits, which equal
            // the VLM's by construction.
            vlm.label.confidence.max(expert.confidence)
        } else {
            let vlm_conf = if vlm.suspect_fields.contains(&task) {
                0.0
            } else {
                vlm.label.confidence
            };
            let expert_first = policy.expert_owned.contains(&task);
            let (first, first_conf, first_thresh, second, second_conf, second_thresh) =
                if expert_first {
                    (
                        expert,
                        expert.confidence,
                        policy.expert_threshold,
                        &vlm.label,
                        vlm_conf,
                        policy.vlm_threshold,
                    )
                } else {
                    (
                        &vlm.label,
                        vlm_conf,
                        policy.vlm_threshold,
                        expert,
                        expert.confidence,
                        policy.expert_threshold,
                    )
                };
            if first_conf >= first_thresh {
                write_field(&mut fused, first, task);
                first_conf
            } else if second_conf >= second_thresh {
                write_field(&mut fused, second, task);
                second_conf
            } else {
                return FusionOutcome::Dropped;
            }
        };
        fused_confidence = fused_confidence.min(field_conf);
    }

    fused.confidence = fused_confidence;
    FusionOutcome::Fused(fused)
}

/// Counters reported by a mining run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub total_frames: usize,
    /// Frames where the temporal vote replaced at least one field.
    pub replaced: usize,
    /// Frames whose center label carries at least one suspect flag.
    pub suspect: usize,
    /// Frames whose center label confidence was penalized.
    pub penalized: usize,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("window bounds must be odd")]
    EvenWindowBound,
    #[error("window bounds invalid: min {min}, max {max}")]
    BadWindowBounds { min: usize, max: usize },
    #[error("window distance and minimum speed must be positive")]
    NonPositiveWindowParam,
    #[error("window misaligned: {labels} labels vs {frames} frames")]
    MisalignedWindow { labels: usize, frames: usize },
    #[error("fusion threshold {value} outside [0, 1]")]
    ThresholdOutOfRange { value: f64 },
    #[error("labels missing for frame ids: {missing:?}")]
    Alignment { missing: Vec<String> },
}

/// Runs the full mining pipeline over one frame sequence.
///
/// Labels are looked up by frame id; every frame must have both a VLM and
/// an expert label. Output order equals frame order.
pub fn mine_sequence(
    frames: &[FrameRecord],
    vlm_labels: &BTreeMap<String, SceneLabel>,
    expert_labels: &BTreeMap<String, SceneLabel>,
    cfg: &WindowConfig,
    rules: &ConsistencyRuleSet,
    policy: &FusionPolicy,
) -> Result<(Vec<LabeledFrame>, MiningStats), MiningError> {
    cfg.validate()?;
    policy.validate()?;

    let missing: Vec<String> = frames
        .iter()
        .filter(|f| {
            !vlm_labels.contains_key(&f.frame_id) || !expert_labels.contains_key(&f.frame_id)
        })
        .map(|f| f.frame_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MiningError::Alignment { missing });
    }

    let vlm: Vec<&SceneLabel> = frames.iter().map(|f| &vlm_labels[&f.frame_id]).collect();
    let mut stats = MiningStats {
        total_frames: frames.len(),
        ..MiningStats::default()
    };

    // Symmetric window around i, clipped at the sequence boundary so it
    // stays centered and odd.
    let window_bounds = |i: usize| {
        let n = window_length(frames[i].ego_speed_mps, frames[i].camera_fps, cfg);
        let half = (n / 2).min(i).min(frames.len() - 1 - i);
        (i - half, i + half)
    };

    // Pass 1: temporal vote over the raw VLM stream.
    let mut voted: Vec<SceneLabel> = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let (lo, hi) = window_bounds(i);
        let window: Vec<SceneLabel> = vlm[lo..=hi].iter().map(|l| (*l).clone()).collect();
        let (label, replaced_fields) = temporal_vote(&window, i - lo);
        if !replaced_fields.is_empty() {
            stats.replaced += 1;
        }
        voted.push(label);
    }

    // Pass 2: motion-consistency annotation over the voted stream.
    let mut annotations: Vec<AnnotatedLabel> = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let (lo, hi) = window_bounds(i);
        let window_annotated =
            check_motion_consistency(&voted[lo..=hi], &frames[lo..=hi], rules)?;
        let center = window_annotated[i - lo].clone();
        if !center.suspect_fields.is_empty() {
            stats.suspect += 1;
        }
        if center.label.confidence < voted[i].confidence {
            stats.penalized += 1;
        }
        annotations.push(center);
    }

    // Pass 3: fuse with the expert stream, frame by frame.
    let mut output = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let expert = &expert_labels[&frame.frame_id];
        match fuse_labels(&annotations[i], expert, policy) {
            FusionOutcome::Fused(fused) => {
                stats.kept += 1;
                let mut labels = BTreeMap::new();
                labels.insert(LabelSource::Vlm, annotations[i].label.clone());
                labels.insert(LabelSource::Expert, expert.clone());
                labels.insert(LabelSource::Fused, fused);
                output.push(LabeledFrame {
                    frame: frame.clone(),
                    labels,
                });
            }
            FusionOutcome::Dropped => {
                stats.dropped += 1;
            }
        }
    }

    debug_assert_eq!(stats.kept + stats.dropped, stats.total_frames);
    Ok((output, stats))
}
