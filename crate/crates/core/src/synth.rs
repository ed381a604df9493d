//! Procedural scene synthesis: seeded layout and dynamic-object placement
//! over a chain road network, ground-truth label and prompt emission, plus
//! the best-of-N candidate selection and pair-filtering steps of the
//! self-improvement loop.
//!
//! Rendering itself is out of scope; a `SceneSpec` is the file contract a
//! renderer consumes, and labels are emitted directly from the spec.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_text::serialize_label;
use crate::types::{LabelSource, SceneLabel, TrafficLight};

/// Distance at which an upcoming intersection starts to matter for the
/// crossroad alert and for ego placement.
pub const INTERSECTION_ALERT_M: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionKind {
    Intersection,
    Straight,
    Toll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNode {
    pub id: NodeId,
    pub kind: JunctionKind,
}

/// A lane-carrying road segment from one junction to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadEdge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub speed_limit_kmh: f64,
    pub lanes: u32,
}

/// The scene's road graph. Generation produces a single chain, but lookups
/// only assume edges are connected via node ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub nodes: Vec<RoadNode>,
    pub edges: Vec<RoadEdge>,
}

impl RoadNetwork {
    pub fn edge(&self, id: EdgeId) -> Option<&RoadEdge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn node(&self, id: NodeId) -> Option<&RoadNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// The edge leaving `node`, if any.
    pub fn edge_from(&self, node: NodeId) -> Option<&RoadEdge> {
        self.edges.iter().find(|e| e.from == node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub edge: EdgeId,
    pub offset_m: f64,
    pub lane: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Cone,
    TrafficLight,
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightColor {
    Red,
    Yellow,
    Green,
}

impl From<LightColor> for TrafficLight {
    fn from(color: LightColor) -> Self {
        match color {
            LightColor::Red => TrafficLight::Red,
            LightColor::Yellow => TrafficLight::Yellow,
            LightColor::Green => TrafficLight::Green,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectPose {
    AtNode { node: NodeId },
    OnEdge { edge: EdgeId, offset_m: f64, lane: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectState {
    Static,
    Light { color: LightColor },
    /// Straight-line constant-speed trajectory along the object's edge.
    Moving { speed_mps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub pose: ObjectPose,
    pub state: ObjectState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Rain,
    Fog,
    Snow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Dusk,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
}

/// Procedural scene description from which labels are emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub road_network: RoadNetwork,
    pub ego_pose: EgoPose,
    pub objects: Vec<SceneObject>,
    pub environment: Environment,
    pub version: u32,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ego_edge = self
            .road_network
            .edge(self.ego_pose.edge)
            .ok_or(SynthError::DanglingEgoEdge)?;
        if !(0.0..=ego_edge.length_m).contains(&self.ego_pose.offset_m)
            || self.ego_pose.lane >= ego_edge.lanes
        {
            return Err(SynthError::EgoPoseOutOfBounds);
        }
        for obj in &self.objects {
            match obj.pose {
                ObjectPose::AtNode { node } => {
                    let n = self
                        .road_network
                        .node(node)
                        .ok_or(SynthError::DanglingObjectRef)?;
                    if obj.kind == ObjectKind::TrafficLight
                        && n.kind != JunctionKind::Intersection
                    {
                        return Err(SynthError::LightOffIntersection { node });
                    }
                }
                ObjectPose::OnEdge { edge, offset_m, .. } => {
                    let e = self
                        .road_network
                        .edge(edge)
                        .ok_or(SynthError::DanglingObjectRef)?;
                    if !(0.0..=e.length_m).contains(&offset_m) {
                        return Err(SynthError::ObjectOffEdge { edge });
                    }
                }
            }
        }
        Ok(())
    }

    /// Route distance from ego to a position ahead, or None when the
    /// position is not on the ego's forward route.
    pub fn ahead_distance(&self, edge: EdgeId, offset_m: f64) -> Option<f64> {
        let mut current = self.road_network.edge(self.ego_pose.edge)?;
        let mut travelled = -self.ego_pose.offset_m;
        loop {
            if current.id == edge {
                let d = travelled + offset_m;
                return if d > 0.0 { Some(d) } else { None };
            }
            travelled += current.length_m;
            current = self.road_network.edge_from(current.to)?;
        }
    }

    /// Distance to the next intersection node on the forward route.
    pub fn distance_to_next_intersection(&self) -> Option<f64> {
        let mut current = self.road_network.edge(self.ego_pose.edge)?;
        let mut distance = current.length_m - self.ego_pose.offset_m;
        loop {
            let node = self.road_network.node(current.to)?;
            if node.kind == JunctionKind::Intersection {
                return Some(distance);
            }
            current = self.road_network.edge_from(current.to)?;
            distance += current.length_m;
        }
    }

    /// The light at the next intersection on the route, if both exist.
    pub fn governing_light(&self) -> Option<LightColor> {
        let mut current = self.road_network.edge(self.ego_pose.edge)?;
        loop {
            let node = self.road_network.node(current.to)?;
            if node.kind == JunctionKind::Intersection {
                return self.objects.iter().find_map(|o| match (o.kind, o.pose, o.state) {
                    (
                        ObjectKind::TrafficLight,
                        ObjectPose::AtNode { node: n },
                        ObjectState::Light { color },
                    ) if n == node.id => Some(color),
                    _ => None,
                });
            }
            current = self.road_network.edge_from(current.to)?;
        }
    }

    pub fn cone_count(&self) -> usize {
        self.objects.iter().filter(|o| o.kind == ObjectKind::Cone).count()
    }
}

/// Knobs for the procedural generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Probability that the node terminating the ego edge is an
    /// intersection (with ego placed within alert distance of it).
    pub intersection_bias: f64,
    /// Inclusive cone count range.
    pub cone_count: (u32, u32),
    /// Cones land this far ahead of ego, in meters along the route.
    pub cone_range_m: (f64, f64),
    pub max_vehicles: u32,
    pub max_pedestrians: u32,
    pub light_state_weights: BTreeMap<LightColor, f64>,
    pub speed_limit_set_kmh: Vec<f64>,
    pub weather_weights: BTreeMap<Weather, f64>,
    pub edge_length_m: (f64, f64),
    /// Inclusive range for the number of chained edges.
    pub edge_count: (usize, usize),
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            intersection_bias: 0.5,
            cone_count: (0, 4),
            cone_range_m: (5.0, 30.0),
            max_vehicles: 3,
            max_pedestrians: 2,
            light_state_weights: [
                (LightColor::Red, 0.4),
                (LightColor::Yellow, 0.2),
                (LightColor::Green, 0.4),
            ]
            .into_iter()
            .collect(),
            speed_limit_set_kmh: vec![30.0, 40.0, 50.0, 60.0, 80.0],
            weather_weights: [
                (Weather::Clear, 0.55),
                (Weather::Rain, 0.2),
                (Weather::Fog, 0.15),
                (Weather::Snow, 0.1),
            ]
            .into_iter()
            .collect(),
            edge_length_m: (120.0, 300.0),
            edge_count: (3, 5),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.intersection_bias) {
            return Err(SynthError::InfeasibleConfig {
                reason: "intersection_bias outside [0, 1]".to_string(),
            });
        }
        for (name, weights) in [
            ("light_state_weights", self.light_state_weights.values().sum::<f64>()),
            ("weather_weights", self.weather_weights.values().sum::<f64>()),
        ] {
            if (weights - 1.0).abs() > 1e-9 {
                return Err(SynthError::InfeasibleConfig {
                    reason: format!("{name} must sum to 1, got {weights}"),
                });
            }
        }
        if self.cone_count.0 > self.cone_count.1
            || self.cone_range_m.0 > self.cone_range_m.1
            || self.cone_range_m.0 < 0.0
        {
            return Err(SynthError::InfeasibleConfig {
                reason: "cone ranges out of order".to_string(),
            });
        }
        if self.speed_limit_set_kmh.is_empty() {
            return Err(SynthError::InfeasibleConfig {
                reason: "speed limit set is empty".to_string(),
            });
        }
        if self.edge_length_m.0 <= 0.0
            || self.edge_length_m.0 > self.edge_length_m.1
            || self.edge_count.0 == 0
            || self.edge_count.0 > self.edge_count.1
        {
            return Err(SynthError::InfeasibleConfig {
                reason: "edge geometry ranges invalid".to_string(),
            });
        }
        Ok(())
    }
}

fn pick_weighted<T: Copy>(weights: &BTreeMap<T, f64>, rng: &mut ChaCha8Rng) -> T {
    let total: f64 = weights.values().sum();
    let mut draw = rng.gen::<f64>() * total;
    let mut last = None;
    for (&value, &w) in weights {
        if draw < w {
            return value;
        }
        draw -= w;
        last = Some(value);
    }
    last.expect("weights must be non-empty")
}

/// Generates the static layout: road chain, junction kinds, ego pose,
/// per-intersection lights, and environment. Deterministic in (cfg, seed).
pub fn generate_layout(cfg: &GenerationConfig, seed: u64) -> Result<SceneSpec, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let edge_count = rng.gen_range(cfg.edge_count.0..=cfg.edge_count.1);
    let ego_ahead_intersection = rng.gen::<f64>() < cfg.intersection_bias;

    let mut nodes = vec![RoadNode {
        id: NodeId(0),
        kind: JunctionKind::Straight,
    }];
    let mut edges = Vec::with_capacity(edge_count);
    for i in 0..edge_count {
        let kind = if i == 0 {
            if ego_ahead_intersection {
                JunctionKind::Intersection
            } else if rng.gen::<f64>() < 0.3 {
                JunctionKind::Toll
            } else {
                JunctionKind::Straight
            }
        } else {
            match rng.gen_range(0..10u8) {
                0..=3 => JunctionKind::Intersection,
                4..=8 => JunctionKind::Straight,
                _ => JunctionKind::Toll,
            }
        };
        nodes.push(RoadNode {
            id: NodeId(i as u32 + 1),
            kind,
        });
        let length_m = rng.gen_range(cfg.edge_length_m.0..=cfg.edge_length_m.1);
        let limit_index = rng.gen_range(0..cfg.speed_limit_set_kmh.len());
        edges.push(RoadEdge {
            id: EdgeId(i as u32),
            from: NodeId(i as u32),
            to: NodeId(i as u32 + 1),
            length_m,
            speed_limit_kmh: cfg.speed_limit_set_kmh[limit_index],
            lanes: rng.gen_range(1..=3),
        });
    }

    let ego_edge = &edges[0];
    let offset_m = if nodes[1].kind == JunctionKind::Intersection {
        // Park the ego within alert distance of the junction.
        let to_end = rng.gen_range(5.0..INTERSECTION_ALERT_M.min(ego_edge.length_m));
        ego_edge.length_m - to_end
    } else {
        rng.gen_range(0.1..=0.6) * ego_edge.length_m
    };
    let ego_pose = EgoPose {
        edge: ego_edge.id,
        offset_m,
        lane: rng.gen_range(0..ego_edge.lanes),
    };

    let mut objects = Vec::new();
    for node in &nodes {
        if node.kind == JunctionKind::Intersection {
            objects.push(SceneObject {
                kind: ObjectKind::TrafficLight,
                pose: ObjectPose::AtNode { node: node.id },
                state: ObjectState::Light {
                    color: pick_weighted(&cfg.light_state_weights, &mut rng),
                },
            });
        }
    }

    let environment = Environment {
        weather: pick_weighted(&cfg.weather_weights, &mut rng),
        time_of_day: match rng.gen_range(0..3u8) {
            0 => TimeOfDay::Day,
            1 => TimeOfDay::Dusk,
            _ => TimeOfDay::Night,
        },
    };

    let spec = SceneSpec {
        seed,
        road_network: RoadNetwork { nodes, edges },
        ego_pose,
        objects,
        environment,
        version: 0,
    };
    spec.validate()?;
    Ok(spec)
}

/// Walks the forward route to `ahead_m` past the ego, returning the edge
/// and offset there.
fn resolve_ahead(spec: &SceneSpec, ahead_m: f64) -> Option<(EdgeId, f64)> {
    let mut current = spec.road_network.edge(spec.ego_pose.edge)?;
    let mut remaining = ahead_m - (current.length_m - spec.ego_pose.offset_m);
    if remaining <= 0.0 {
        return Some((current.id, spec.ego_pose.offset_m + ahead_m));
    }
    loop {
        current = spec.road_network.edge_from(current.to)?;
        if remaining <= current.length_m {
            return Some((current.id, remaining));
        }
        remaining -= current.length_m;
    }
}

/// Places dynamic objects: cones uniformly in the ahead-range, vehicles and
/// pedestrians with constant-speed trajectories. Never overlaps the ego
/// pose. Deterministic in (spec, cfg, seed).
pub fn place_dynamics(
    spec: &SceneSpec,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<SceneSpec, SynthError> {
    cfg.validate()?;
    let mut out = spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cone_count = rng.gen_range(cfg.cone_count.0..=cfg.cone_count.1);
    for _ in 0..cone_count {
        let ahead = rng.gen_range(cfg.cone_range_m.0..=cfg.cone_range_m.1);
        let (edge, offset_m) =
            resolve_ahead(&out, ahead).ok_or_else(|| SynthError::InfeasibleConfig {
                reason: format!("cone range {:?} m exceeds route length", cfg.cone_range_m),
            })?;
        out.objects.push(SceneObject {
            kind: ObjectKind::Cone,
            pose: ObjectPose::OnEdge {
                edge,
                offset_m,
                lane: out.ego_pose.lane,
            },
            state: ObjectState::Static,
        });
    }

    let vehicle_count = rng.gen_range(0..=cfg.max_vehicles);
    for _ in 0..vehicle_count {
        let (edge, offset_m, lane) = place_clear_of_ego(&out, &mut rng)?;
        let speed_limit = out.road_network.edge(edge).unwrap().speed_limit_kmh;
        out.objects.push(SceneObject {
            kind: ObjectKind::Vehicle,
            pose: ObjectPose::OnEdge { edge, offset_m, lane },
            state: ObjectState::Moving {
                speed_mps: crate::types::kmh_to_mps(speed_limit),
            },
        });
    }

    let pedestrian_count = rng.gen_range(0..=cfg.max_pedestrians);
    for _ in 0..pedestrian_count {
        let (edge, offset_m, lane) = place_clear_of_ego(&out, &mut rng)?;
        out.objects.push(SceneObject {
            kind: ObjectKind::Pedestrian,
            pose: ObjectPose::OnEdge { edge, offset_m, lane },
            state: ObjectState::Moving { speed_mps: 1.4 },
        });
    }

    out.version += 1;
    out.validate()?;
    Ok(out)
}

/// Minimum separation between a placed object and the ego pose.
const EGO_CLEARANCE_M: f64 = 5.0;

fn place_clear_of_ego(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(EdgeId, f64, u32), SynthError> {
    for _ in 0..32 {
        let edge = &spec.road_network.edges[rng.gen_range(0..spec.road_network.edges.len())];
        let offset_m = rng.gen_range(0.0..=edge.length_m);
        let lane = rng.gen_range(0..edge.lanes);
        let overlaps = edge.id == spec.ego_pose.edge
            && lane == spec.ego_pose.lane
            && (offset_m - spec.ego_pose.offset_m).abs() < EGO_CLEARANCE_M;
        if !overlaps {
            return Ok((edge.id, offset_m, lane));
        }
    }
    Err(SynthError::InfeasibleConfig {
        reason: "could not place object clear of ego".to_string(),
    })
}

/// Recommended-speed rule table: the edge limit is scaled by the weather
/// factor, then the cone factor, in that order, and rounded to the nearest
/// km/h. The application order is part of the rule: half-way cases like
/// 30 km/h in snow with cones depend on it.
fn adjusted_speed(base_limit_kmh: f64, weather: Weather, cones_present: bool) -> f64 {
    let weather_factor = match weather {
        Weather::Clear => 1.0,
        Weather::Rain => 0.8,
        Weather::Fog => 0.7,
        Weather::Snow => 0.6,
    };
    let cone_factor = if cones_present { 0.75 } else { 1.0 };
    (base_limit_kmh * weather_factor * cone_factor).round()
}

/// Emits the ground-truth label and its canonical prompt text for a scene.
/// Pure in the scene spec: rerunning yields identical output.
pub fn emit_labels(spec: &SceneSpec) -> (SceneLabel, String) {
    let cones = spec.cone_count();
    let base_limit = spec
        .road_network
        .edge(spec.ego_pose.edge)
        .map(|e| e.speed_limit_kmh)
        .unwrap_or(0.0);
    let speed = adjusted_speed(base_limit, spec.environment.weather, cones > 0);

    let label = SceneLabel {
        recommended_speed_kmh: Some(speed),
        traffic_light: spec
            .governing_light()
            .map_or(TrafficLight::Absent, TrafficLight::from),
        obstacles_cones: cones > 0,
        cone_count: if cones > 0 { Some(cones as u32) } else { None },
        crossroad: spec
            .distance_to_next_intersection()
            .is_some_and(|d| d <= INTERSECTION_ALERT_M),
        confidence: 1.0,
        source: LabelSource::GroundTruth,
    };
    let text = serialize_label(&label);
    (label, text)
}

/// A scored candidate from the pluggable image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateImage {
    pub id: String,
    pub caption: String,
    pub score_quality: f64,
    pub score_consistency: f64,
}

impl CandidateImage {
    pub fn validate(&self) -> Result<(), SynthError> {
        for s in [self.score_quality, self.score_consistency] {
            if !(0.0..=1.0).contains(&s) {
                return Err(SynthError::ScoreOutOfRange { score: s });
            }
        }
        Ok(())
    }
}

/// Weights for combining the two candidate scores; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub quality: f64,
    pub consistency: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            quality: 0.5,
            consistency: 0.5,
        }
    }
}

/// Keeps the n best candidates by weighted score, descending, with a stable
/// tie-break on id.
pub fn select_best_n(
    candidates: &[CandidateImage],
    n: usize,
    weights: ScoreWeights,
) -> Result<Vec<CandidateImage>, SynthError> {
    if n > candidates.len() {
        return Err(SynthError::NTooLarge {
            n,
            available: candidates.len(),
        });
    }
    if (weights.quality + weights.consistency - 1.0).abs() > 1e-9 {
        return Err(SynthError::InfeasibleConfig {
            reason: "score weights must sum to 1".to_string(),
        });
    }
    for c in candidates {
        c.validate()?;
    }
    let mut ranked: Vec<&CandidateImage> = candidates.iter().collect();
    ranked.sort_by(|a, b| {
        let score_a = weights.quality * a.score_quality + weights.consistency * a.score_consistency;
        let score_b = weights.quality * b.score_quality + weights.consistency * b.score_consistency;
        score_b
            .partial_cmp(&score_a)
            .unwrap()
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(ranked.into_iter().take(n).cloned().collect())
}

/// A caption/image pair headed for the training set. The signature is an
/// opaque content digest; the label, when known, lets contradiction checks
/// run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub caption: String,
    pub signature: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<SceneLabel>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub duplicate_signature: usize,
    pub near_duplicate_caption: usize,
    pub misaligned: usize,
}

/// Caption near-duplicate threshold on token-set Jaccard similarity.
pub const CAPTION_JACCARD_THRESHOLD: f64 = 0.9;

fn caption_tokens(caption: &str) -> HashSet<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.intersection(b).count() as f64;
    let union = (a.len() + b.len()) as f64 - intersection;
    intersection / union
}

/// First color keyword in the caption, if any.
fn caption_light_claim(tokens: &HashSet<String>) -> Option<TrafficLight> {
    // Token sets lose ordering; treat any claimed color as the claim and
    // flag multi-color captions via red > yellow > green priority.
    for (word, color) in [
        ("red", TrafficLight::Red),
        ("yellow", TrafficLight::Yellow),
        ("green", TrafficLight::Green),
    ] {
        if tokens.contains(word) {
            return Some(color);
        }
    }
    None
}

fn contradicts_label(tokens: &HashSet<String>, label: &SceneLabel) -> bool {
    if let Some(claimed) = caption_light_claim(tokens) {
        if claimed != label.traffic_light {
            return true;
        }
    }
    if (tokens.contains("cone") || tokens.contains("cones")) && !label.obstacles_cones {
        return true;
    }
    if (tokens.contains("intersection") || tokens.contains("crossroad")) && !label.crossroad {
        return true;
    }
    false
}

/// Removes exact-duplicate signatures, near-duplicate captions, and pairs
/// whose caption contradicts the provided label. Keep-first semantics;
/// filtering is idempotent.
pub fn filter_pairs(pairs: &[DataPair]) -> (Vec<DataPair>, FilterStats) {
    let mut stats = FilterStats {
        input: pairs.len(),
        ..FilterStats::default()
    };
    let mut seen_signatures: HashSet<&str> = HashSet::new();
    let mut kept: Vec<DataPair> = Vec::new();
    // Kept token sets, bucketed by size: Jaccard >= 0.9 forces the two set
    // sizes within 10% of each other, so only nearby buckets are scanned.
    let mut kept_tokens: BTreeMap<usize, Vec<HashSet<String>>> = BTreeMap::new();

    for pair in pairs {
        if !seen_signatures.insert(pair.signature.as_str()) {
            stats.duplicate_signature += 1;
            continue;
        }
        let tokens = caption_tokens(&pair.caption);
        let size = tokens.len();
        let lo = ((size as f64) * CAPTION_JACCARD_THRESHOLD).floor() as usize;
        let hi = ((size as f64) / CAPTION_JACCARD_THRESHOLD).ceil() as usize;
        let near_dup = kept_tokens
            .range(lo..=hi)
            .flat_map(|(_, sets)| sets.iter())
            .any(|existing| jaccard(&tokens, existing) >= CAPTION_JACCARD_THRESHOLD);
        if near_dup {
            stats.near_duplicate_caption += 1;
            continue;
        }
        if let Some(label) = &pair.label {
            if contradicts_label(&tokens, label) {
                stats.misaligned += 1;
                continue;
            }
        }
        kept_tokens.entry(size).or_default().push(tokens);
        kept.push(pair.clone());
    }
    stats.kept = kept.len();
    (kept, stats)
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible generation config: {reason}")]
    InfeasibleConfig { reason: String },
    #[error("ego pose references a missing edge")]
    DanglingEgoEdge,
    #[error("ego pose outside its edge")]
    EgoPoseOutOfBounds,
    #[error("object references a missing node or edge")]
    DanglingObjectRef,
    #[error("traffic light attached to non-intersection node {node:?}")]
    LightOffIntersection { node: NodeId },
    #[error("object offset outside edge {edge:?}")]
    ObjectOffEdge { edge: EdgeId },
    #[error("candidate score {score} outside [0, 1]")]
    ScoreOutOfRange { score: f64 },
    #[error("best-n selection asked for {n} of {available} candidates")]
    NTooLarge { n: usize, available: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn biased_cfg() -> GenerationConfig {
        GenerationConfig {
            intersection_bias: 1.0,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn layout_is_deterministic_per_seed() {
        let cfg = GenerationConfig::default();
        for seed in [0u64, 7, 42, 1234] {
            assert_eq!(
                generate_layout(&cfg, seed).unwrap(),
                generate_layout(&cfg, seed).unwrap()
            );
        }
    }

    #[test]
    fn full_bias_places_ego_at_intersection() {
        let cfg = biased_cfg();
        for seed in 0..50 {
            let spec = generate_layout(&cfg, seed).unwrap();
            let distance = spec.distance_to_next_intersection().unwrap();
            assert!(
                distance <= INTERSECTION_ALERT_M,
                "seed {seed}: intersection {distance} m away"
            );
        }
    }

    #[test]
    fn placement_is_deterministic_and_in_range() {
        let cfg = GenerationConfig {
            cone_count: (2, 6),
            ..biased_cfg()
        };
        let layout = generate_layout(&cfg, 9).unwrap();
        let a = place_dynamics(&layout, &cfg, 77).unwrap();
        let b = place_dynamics(&layout, &cfg, 77).unwrap();
        assert_eq!(a, b);
        for obj in a.objects.iter().filter(|o| o.kind == ObjectKind::Cone) {
            let ObjectPose::OnEdge { edge, offset_m, .. } = obj.pose else {
                panic!("cone must be on an edge");
            };
            let ahead = a.ahead_distance(edge, offset_m).unwrap();
            assert!(
                ahead >= cfg.cone_range_m.0 - 1e-9 && ahead <= cfg.cone_range_m.1 + 1e-9,
                "cone at {ahead} m outside {:?}",
                cfg.cone_range_m
            );
        }
    }

    #[test]
    fn zero_dynamics_only_bumps_version() {
        let cfg = GenerationConfig {
            cone_count: (0, 0),
            max_vehicles: 0,
            max_pedestrians: 0,
            ..GenerationConfig::default()
        };
        let layout = generate_layout(&cfg, 3).unwrap();
        let placed = place_dynamics(&layout, &cfg, 5).unwrap();
        assert_eq!(placed.objects, layout.objects);
        assert_eq!(placed.version, layout.version + 1);
    }

    #[test]
    fn infeasible_cone_range_is_rejected() {
        let cfg = GenerationConfig {
            cone_count: (1, 1),
            cone_range_m: (5_000.0, 6_000.0),
            ..GenerationConfig::default()
        };
        let layout = generate_layout(&cfg, 3).unwrap();
        assert!(matches!(
            place_dynamics(&layout, &cfg, 5),
            Err(SynthError::InfeasibleConfig { .. })
        ));
    }

    fn minimal_spec(weather: Weather, limit: f64) -> SceneSpec {
        SceneSpec {
            seed: 0,
            road_network: RoadNetwork {
                nodes: vec![
                    RoadNode { id: NodeId(0), kind: JunctionKind::Straight },
                    RoadNode { id: NodeId(1), kind: JunctionKind::Straight },
                ],
                edges: vec![RoadEdge {
                    id: EdgeId(0),
                    from: NodeId(0),
                    to: NodeId(1),
                    length_m: 500.0,
                    speed_limit_kmh: limit,
                    lanes: 1,
                }],
            },
            ego_pose: EgoPose { edge: EdgeId(0), offset_m: 50.0, lane: 0 },
            objects: Vec::new(),
            environment: Environment { weather, time_of_day: TimeOfDay::Day },
            version: 0,
        }
    }

    #[test]
    fn empty_straight_road_labels() {
        let spec = minimal_spec(Weather::Clear, 60.0);
        let (label, _) = emit_labels(&spec);
        assert_eq!(label.recommended_speed_kmh, Some(60.0));
        assert_eq!(label.traffic_light, TrafficLight::Absent);
        assert!(!label.obstacles_cones);
        assert!(!label.crossroad);
    }

    #[test]
    fn rain_reduces_speed_by_twenty_percent() {
        let spec = minimal_spec(Weather::Rain, 60.0);
        let (label, _) = emit_labels(&spec);
        assert_eq!(label.recommended_speed_kmh, Some(48.0));
    }

    #[test]
    fn full_scene_matches_sample_layout() {
        let mut spec = minimal_spec(Weather::Clear, 40.0);
        spec.road_network.nodes[1].kind = JunctionKind::Intersection;
        spec.ego_pose.offset_m = 460.0; // 40 m from the junction
        spec.objects.push(SceneObject {
            kind: ObjectKind::TrafficLight,
            pose: ObjectPose::AtNode { node: NodeId(1) },
            state: ObjectState::Light { color: LightColor::Red },
        });
        for offset in [470.0, 480.0] {
            spec.objects.push(SceneObject {
                kind: ObjectKind::Cone,
                pose: ObjectPose::OnEdge { edge: EdgeId(0), offset_m: offset, lane: 0 },
                state: ObjectState::Static,
            });
        }
        let (label, text) = emit_labels(&spec);
        assert_eq!(label.recommended_speed_kmh, Some(30.0)); // 40 * 0.75, cones
        assert_eq!(label.traffic_light, TrafficLight::Red);
        assert_eq!(label.cone_count, Some(2));
        assert!(label.crossroad);
        assert!(text.contains("Recommended Speed: 30 km/h."));
        assert!(text.contains("Red light ahead"));
        assert!(text.contains("2 traffic cones"));
        assert!(text.contains("An intersection is ahead"));
    }

    #[test]
    fn emit_is_pure() {
        let cfg = biased_cfg();
        let spec = place_dynamics(&generate_layout(&cfg, 4).unwrap(), &cfg, 4).unwrap();
        assert_eq!(emit_labels(&spec), emit_labels(&spec));
    }

    fn candidate(id: &str, quality: f64, consistency: f64) -> CandidateImage {
        CandidateImage {
            id: id.to_string(),
            caption: format!("caption {id}"),
            score_quality: quality,
            score_consistency: consistency,
        }
    }

    #[test]
    fn best_n_orders_by_weighted_score() {
        let candidates = vec![
            candidate("a", 0.2, 0.2),
            candidate("b", 0.9, 0.8),
            candidate("c", 0.5, 0.6),
        ];
        let best = select_best_n(&candidates, 2, ScoreWeights::default()).unwrap();
        assert_eq!(best[0].id, "b");
        assert_eq!(best[1].id, "c");
    }

    #[test]
    fn best_n_tie_breaks_by_id() {
        let candidates = vec![
            candidate("z", 0.5, 0.5),
            candidate("a", 0.5, 0.5),
            candidate("m", 0.5, 0.5),
        ];
        let best = select_best_n(&candidates, 3, ScoreWeights::default()).unwrap();
        let ids: Vec<&str> = best.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "m", "z"]);
    }

    #[test]
    fn best_n_scores_non_increasing() {
        let candidates: Vec<CandidateImage> = (0..20)
            .map(|i| candidate(&format!("c{i:02}"), (i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0))
            .collect();
        let weights = ScoreWeights { quality: 0.7, consistency: 0.3 };
        let best = select_best_n(&candidates, 20, weights).unwrap();
        let scores: Vec<f64> = best
            .iter()
            .map(|c| weights.quality * c.score_quality + weights.consistency * c.score_consistency)
            .collect();
        for pair in scores.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn best_n_rejects_oversized_n() {
        let candidates = vec![candidate("a", 0.5, 0.5)];
        assert!(matches!(
            select_best_n(&candidates, 2, ScoreWeights::default()),
            Err(SynthError::NTooLarge { .. })
        ));
    }

    fn pair(caption: &str, signature: &str) -> DataPair {
        DataPair {
            caption: caption.to_string(),
            signature: signature.to_string(),
            label: None,
        }
    }

    #[test]
    fn duplicate_signatures_keep_first() {
        let pairs = vec![pair("one scene", "sig-a"), pair("another scene", "sig-a")];
        let (kept, stats) = filter_pairs(&pairs);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].caption, "one scene");
        assert_eq!(stats.duplicate_signature, 1);
    }

    #[test]
    fn near_duplicate_captions_drop_second() {
        let pairs = vec![
            pair("a red light at the intersection with two cones on the road ahead", "s1"),
            pair("a red light at the intersection with two cones on the road", "s2"),
            pair("clear empty highway in bright daylight", "s3"),
        ];
        let (kept, stats) = filter_pairs(&pairs);
        assert_eq!(kept.len(), 2);
        assert_eq!(stats.near_duplicate_caption, 1);
    }

    #[test]
    fn contradicting_caption_is_misaligned() {
        let mut label = SceneLabel::empty(LabelSource::GroundTruth);
        label.traffic_light = TrafficLight::Red;
        let pairs = vec![DataPair {
            caption: "a green light over the street".to_string(),
            signature: "s1".to_string(),
            label: Some(label),
        }];
        let (kept, stats) = filter_pairs(&pairs);
        assert!(kept.is_empty());
        assert_eq!(stats.misaligned, 1);
    }

    #[test]
    fn filtering_is_idempotent() {
        let mut label = SceneLabel::empty(LabelSource::GroundTruth);
        label.traffic_light = TrafficLight::Green;
        label.crossroad = true;
        let pairs = vec![
            pair("a red light scene", "s1"),
            pair("a red light scene", "s2"),
            pair("fog over the toll booth lanes", "s3"),
            DataPair {
                caption: "green light at the intersection".to_string(),
                signature: "s4".to_string(),
                label: Some(label),
            },
        ];
        let (once, stats_once) = filter_pairs(&pairs);
        let (twice, stats_twice) = filter_pairs(&once);
        assert_eq!(once, twice);
        assert_eq!(stats_twice.kept, stats_once.kept);
        assert_eq!(stats_twice.duplicate_signature, 0);
        assert_eq!(stats_twice.near_duplicate_caption, 0);
        assert_eq!(stats_twice.misaligned, 0);
    }
}
