//! Trigger-keyed prompt library: scene-conditioned composition plus seeded
//! hill-climbing optimization over discrete edit operators.
//!
//! Composition is two-pass dynamic prompting: a first pass derives scene
//! tags from a cheap label, a second pass concatenates every template whose
//! trigger is a subset of those tags, in stable library order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{SceneLabel, TrafficLight};

/// Closed tag vocabulary for trigger matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneTag {
    TrafficLight,
    Cone,
    Crossroad,
    Pedestrian,
    Construction,
    Toll,
}

/// Set of tags detected in a scene by the first pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneTags(pub BTreeSet<SceneTag>);

impl SceneTags {
    pub fn empty() -> Self {
        SceneTags(BTreeSet::new())
    }

    pub fn contains_all(&self, other: &BTreeSet<SceneTag>) -> bool {
        other.is_subset(&self.0)
    }
}

impl FromIterator<SceneTag> for SceneTags {
    fn from_iter<I: IntoIterator<Item = SceneTag>>(iter: I) -> Self {
        SceneTags(iter.into_iter().collect())
    }
}

/// Deterministic first-pass mapping from a label to scene tags.
pub fn derive_scene_tags(label: &SceneLabel) -> SceneTags {
    let mut tags = BTreeSet::new();
    if label.traffic_light != TrafficLight::Absent {
        tags.insert(SceneTag::TrafficLight);
    }
    if label.obstacles_cones {
        tags.insert(SceneTag::Cone);
    }
    if label.crossroad {
        tags.insert(SceneTag::Crossroad);
    }
    SceneTags(tags)
}

/// One prompt block. The template with an empty trigger is the base; every
/// composed prompt starts from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub trigger: BTreeSet<SceneTag>,
    pub body: String,
    pub variant_pool: Vec<String>,
    pub examples_pool: Vec<String>,
    pub version: u32,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, trigger: &[SceneTag], body: impl Into<String>) -> Self {
        let body = body.into();
        PromptTemplate {
            id: id.into(),
            trigger: trigger.iter().copied().collect(),
            variant_pool: vec![body.clone()],
            examples_pool: Vec::new(),
            body,
            version: 0,
        }
    }

    pub fn with_variants(mut self, variants: &[&str]) -> Self {
        for v in variants {
            if !self.variant_pool.iter().any(|existing| existing == v) {
                self.variant_pool.push((*v).to_string());
            }
        }
        self
    }

    pub fn with_examples(mut self, examples: &[&str]) -> Self {
        self.examples_pool
            .extend(examples.iter().map(|e| (*e).to_string()));
        self
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.body.is_empty() {
            return Err(PromptError::EmptyBody {
                id: self.id.clone(),
            });
        }
        if !self.variant_pool.contains(&self.body) {
            return Err(PromptError::BodyNotInVariantPool {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

/// Versioned snapshot of templates. Every mutation goes through an edit
/// that bumps both the template and the library version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLibrary {
    pub templates: Vec<PromptTemplate>,
    pub version: u64,
}

impl PromptLibrary {
    pub fn new(templates: Vec<PromptTemplate>) -> Self {
        PromptLibrary {
            templates,
            version: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for t in &self.templates {
            t.validate()?;
        }
        if !self.templates.iter().any(|t| t.trigger.is_empty()) {
            return Err(PromptError::MissingBaseTemplate);
        }
        Ok(())
    }

    /// The library shipped as a starting point: a base instruction plus one
    /// block per trigger tag relevant to the four tasks.
    pub fn starter() -> Self {
        let base = PromptTemplate::new(
            "base",
            &[],
            "You are a driving assistant. Look at the scene and answer with four sections: \
Recommended Speed, Traffic Lights, Obstacles, Intersection. Use 'none' when a section does \
not apply.",
        )
        .with_variants(&[
            "Analyze the driving scene. Respond with exactly four sections named Recommended \
Speed, Traffic Lights, Obstacles, and Intersection, writing 'none' where nothing applies.",
        ]);
        let lights = PromptTemplate::new(
            "lights",
            &[SceneTag::TrafficLight],
            "A traffic light is visible. State its color (red, yellow, or green) for the ego \
lane in the Traffic Lights section.",
        )
        .with_variants(&[
            "Pay attention to the traffic light governing the ego lane and report whether it \
is red, yellow, or green.",
        ])
        .with_examples(&[
            "Example: Traffic Lights: Red light ahead, please stop and wait.",
            "Example: Traffic Lights: Green light ahead, please proceed.",
        ]);
        let cones = PromptTemplate::new(
            "cones",
            &[SceneTag::Cone],
            "Traffic cones may be present. Count them and mention them in the Obstacles \
section.",
        )
        .with_examples(&[
            "Example: Obstacles: 2 traffic cones are present, please maneuver around them \
carefully.",
        ]);
        let crossroad = PromptTemplate::new(
            "crossroad",
            &[SceneTag::Crossroad],
            "An intersection may be ahead. Note it in the Intersection section and advise \
caution.",
        )
        .with_examples(&[
            "Example: Intersection: An intersection is ahead, please slow down and proceed \
with caution.",
        ]);
        PromptLibrary::new(vec![base, lights, cones, crossroad])
    }
}

/// Composes the prompt for a tagged scene: the base template followed by
/// every template whose trigger is a subset of `tags`, in library order.
/// Pure in (tags, library version).
pub fn compose_prompt(tags: &SceneTags, library: &PromptLibrary) -> Result<String, PromptError> {
    if !library.templates.iter().any(|t| t.trigger.is_empty()) {
        return Err(PromptError::MissingBaseTemplate);
    }
    let blocks: Vec<&str> = library
        .templates
        .iter()
        .filter(|t| tags.contains_all(&t.trigger))
        .map(|t| t.body.as_str())
        .collect();
    Ok(blocks.join("\n"))
}

/// Emphasis clause appended or removed by the toggle edit operator.
const EMPHASIS_CLAUSE: &str = " Focus only on what affects the ego vehicle.";

/// Minimum score improvement for an edit to be accepted. Ties reject.
pub const ACCEPT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EditKind {
    SwapVariant,
    AddExample,
    ToggleEmphasis,
}

/// One optimization round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRound {
    pub round: usize,
    pub edit: String,
    pub score_before: f64,
    pub score_after: f64,
    pub accepted: bool,
}

/// Record of every round of an optimization run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rounds: Vec<TraceRound>,
}

impl OptimizationTrace {
    pub fn to_jsonl(&self) -> String {
        self.rounds
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("library has no base template (empty trigger)")]
    MissingBaseTemplate,
    #[error("template {id}: body is empty")]
    EmptyBody { id: String },
    #[error("template {id}: body missing from variant pool")]
    BodyNotInVariantPool { id: String },
    #[error("optimization budget must be at least 1")]
    ZeroBudget,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
}

/// Applies one random edit to a random template, returning a description
/// of the edit, or None when the drawn edit is a no-op on the drawn
/// template (e.g. a single-variant pool).
fn apply_random_edit(library: &mut PromptLibrary, rng: &mut ChaCha8Rng) -> Option<String> {
    let index = rng.gen_range(0..library.templates.len());
    let kind = match rng.gen_range(0..3u8) {
        0 => EditKind::SwapVariant,
        1 => EditKind::AddExample,
        _ => EditKind::ToggleEmphasis,
    };
    let template = &mut library.templates[index];
    let description = match kind {
        EditKind::SwapVariant => {
            let alternatives: Vec<&String> = template
                .variant_pool
                .iter()
                .filter(|v| **v != template.body)
                .collect();
            let chosen = alternatives.choose(rng)?.to_string();
            template.body = chosen;
            format!("swap_variant({})", template.id)
        }
        EditKind::AddExample => {
            let unused: Vec<&String> = template
                .examples_pool
                .iter()
                .filter(|e| !template.body.contains(e.as_str()))
                .collect();
            let chosen = unused.choose(rng)?.to_string();
            template.body = format!("{}\n{}", template.body, chosen);
            format!("add_example({})", template.id)
        }
        EditKind::ToggleEmphasis => {
            if let Some(stripped) = template.body.strip_suffix(EMPHASIS_CLAUSE) {
                template.body = stripped.to_string();
                format!("drop_emphasis({})", template.id)
            } else {
                template.body.push_str(EMPHASIS_CLAUSE);
                format!("add_emphasis({})", template.id)
            }
        }
    };
    if !template.variant_pool.contains(&template.body) {
        template.variant_pool.push(template.body.clone());
    }
    template.version += 1;
    library.version += 1;
    Some(description)
}

/// Seeded hill climbing over the library.
///
/// Each round draws one edit, evaluates the candidate with `scorer`, and
/// accepts it only when the score improves by at least [`ACCEPT_EPSILON`].
/// The returned library never scores below the input library.
pub fn optimize_library<E, S>(
    library: &PromptLibrary,
    eval_set: &[E],
    mut scorer: S,
    budget: usize,
    seed: u64,
) -> Result<(PromptLibrary, OptimizationTrace), PromptError>
where
    S: FnMut(&PromptLibrary, &[E]) -> f64,
{
    if budget == 0 {
        return Err(PromptError::ZeroBudget);
    }
    if eval_set.is_empty() {
        return Err(PromptError::EmptyEvalSet);
    }
    library.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = library.clone();
    let mut current_score = scorer(&current, eval_set);
    let mut trace = OptimizationTrace::default();

    for round in 0..budget {
        let mut candidate = current.clone();
        let Some(edit) = apply_random_edit(&mut candidate, &mut rng) else {
            trace.rounds.push(TraceRound {
                round,
                edit: "noop".to_string(),
                score_before: current_score,
                score_after: current_score,
                accepted: false,
            });
            continue;
        };
        let candidate_score = scorer(&candidate, eval_set);
        let accepted = candidate_score >= current_score + ACCEPT_EPSILON;
        trace.rounds.push(TraceRound {
            round,
            edit,
            score_before: current_score,
            score_after: candidate_score,
            accepted,
        });
        if accepted {
            current = candidate;
            current_score = candidate_score;
        }
    }

    Ok((current, trace))
}
