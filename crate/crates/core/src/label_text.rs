//! The four-section label-text grammar.
//!
//! Serialization is strict and canonical: fixed section order, fixed
//! sentence layout, "Intersection" as the canonical heading. Parsing is
//! tolerant: keys match case-insensitively, "Crossroad" is accepted as a
//! synonym heading, unknown text between sections is ignored, and light
//! status comes from the first color keyword in the section body.

use regex::Regex;
use std::sync::OnceLock;
use thiserror::Error;

use crate::types::{LabelSource, SceneLabel, TrafficLight};

#[derive(Debug, Error)]
pub enum LabelTextError {
    #[error("label text is empty")]
    EmptyText,
    #[error("speed section has no parseable number: {section:?}")]
    MalformedNumeric { section: String },
}

/// Section headings recognized by the parser, lowercase. "crossroad:" is a
/// synonym for the intersection section.
const KEYS: [&str; 5] = [
    "recommended speed:",
    "traffic lights:",
    "obstacles:",
    "intersection:",
    "crossroad:",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Speed,
    Lights,
    Obstacles,
    Intersection,
}

fn section_for_key(key_index: usize) -> Section {
    match key_index {
        0 => Section::Speed,
        1 => Section::Lights,
        2 => Section::Obstacles,
        _ => Section::Intersection,
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?").unwrap())
}

fn integer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9]+").unwrap())
}

/// Parses free-form label text into a `SceneLabel`.
///
/// Absent sections leave fields absent/false. The returned label carries
/// `confidence = 1.0` and `source = Vlm`; callers rescore or relabel as
/// needed. Labels in this parsed form are the canonical ones:
/// `parse_label_text(serialize_label(x)) == x` holds exactly for them.
pub fn parse_label_text(text: &str) -> Result<SceneLabel, LabelTextError> {
    if text.trim().is_empty() {
        return Err(LabelTextError::EmptyText);
    }

    // ASCII lowercasing keeps byte offsets aligned with the original text.
    let lower = text.to_ascii_lowercase();
    // Locate every heading occurrence, then slice bodies between headings.
    let mut marks: Vec<(usize, usize, usize)> = Vec::new(); // (start, body_start, key_index)
    for (key_index, key) in KEYS.iter().enumerate() {
        let mut from = 0;
        while let Some(pos) = lower[from..].find(key) {
            let start = from + pos;
            marks.push((start, start + key.len(), key_index));
            from = start + key.len();
        }
    }
    marks.sort_unstable();

    let mut label = SceneLabel::empty(LabelSource::Vlm);
    for (i, &(_, body_start, key_index)) in marks.iter().enumerate() {
        let body_end = marks.get(i + 1).map_or(text.len(), |m| m.0);
        let body = &text[body_start..body_end];
        let section = section_for_key(key_index);
        // First occurrence of a section wins.
        match section {
            Section::Speed => {
                if label.recommended_speed_kmh.is_none() {
                    let m = number_re()
                        .find(body)
                        .ok_or_else(|| LabelTextError::MalformedNumeric {
                            section: body.trim().to_string(),
                        })?;
                    label.recommended_speed_kmh = Some(m.as_str().parse::<f64>().unwrap());
                }
            }
            Section::Lights => {
                if label.traffic_light == TrafficLight::Absent {
                    label.traffic_light = classify_light(body);
                }
            }
            Section::Obstacles => {
                if !label.obstacles_cones {
                    let body_lower = body.to_ascii_lowercase();
                    if body_lower.contains("cone") {
                        label.obstacles_cones = true;
                        label.cone_count = integer_re()
                            .find(body)
                            .map(|m| m.as_str().parse::<u32>().unwrap());
                    }
                }
            }
            Section::Intersection => {
                if !label.crossroad {
                    let body_lower = body.to_ascii_lowercase();
                    label.crossroad =
                        body_lower.contains("intersection") || body_lower.contains("crossroad");
                }
            }
        }
    }
    Ok(label)
}

fn classify_light(body: &str) -> TrafficLight {
    let lower = body.to_ascii_lowercase();
    let first = [
        (TrafficLight::Red, lower.find("red")),
        (TrafficLight::Yellow, lower.find("yellow")),
        (TrafficLight::Green, lower.find("green")),
    ]
    .into_iter()
    .filter_map(|(color, pos)| pos.map(|p| (p, color)))
    .min_by_key(|&(p, _)| p);
    first.map_or(TrafficLight::Absent, |(_, color)| color)
}

/// Serializes a label into the canonical four-section text.
///
/// The speed section is omitted when the speed is absent; the other three
/// sections serialize "none" for absent/false values.
pub fn serialize_label(label: &SceneLabel) -> String {
    let mut sections = Vec::with_capacity(4);
    if let Some(speed) = label.recommended_speed_kmh {
        sections.push(format!("Recommended Speed: {speed} km/h."));
    }
    sections.push(match label.traffic_light {
        TrafficLight::Red => "Traffic Lights: Red light ahead, please stop and wait.".to_string(),
        TrafficLight::Yellow => {
            "Traffic Lights: Yellow light ahead, please prepare to stop.".to_string()
        }
        TrafficLight::Green => {
            "Traffic Lights: Green light ahead, please proceed.".to_string()
        }
        TrafficLight::Absent => "Traffic Lights: none.".to_string(),
    });
    sections.push(if label.obstacles_cones {
        match label.cone_count {
            Some(n) => format!(
                "Obstacles: {n} traffic cones are present, please maneuver around them carefully."
            ),
            None => "Obstacles: Traffic cones are present, please maneuver around them carefully."
                .to_string(),
        }
    } else {
        "Obstacles: none.".to_string()
    });
    sections.push(if label.crossroad {
        "Intersection: An intersection is ahead, please slow down and proceed with caution."
            .to_string()
    } else {
        "Intersection: none.".to_string()
    });
    sections.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "Recommended Speed: 40 km/h. Traffic Lights: Red light ahead, \
please stop and wait. Obstacles: Traffic cones are present, please maneuver around them \
carefully. Intersection: An intersection is ahead, please slow down and proceed with caution.";

    #[test]
    fn parses_sample_prompt() {
        let label = parse_label_text(SAMPLE).unwrap();
        assert_eq!(label.recommended_speed_kmh, Some(40.0));
        assert_eq!(label.traffic_light, TrafficLight::Red);
        assert!(label.obstacles_cones);
        assert_eq!(label.cone_count, None);
        assert!(label.crossroad);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(parse_label_text(""), Err(LabelTextError::EmptyText)));
        assert!(matches!(
            parse_label_text("   \n "),
            Err(LabelTextError::EmptyText)
        ));
    }

    #[test]
    fn partial_text_leaves_other_fields_absent() {
        let label = parse_label_text("Traffic Lights: green").unwrap();
        assert_eq!(label.recommended_speed_kmh, None);
        assert_eq!(label.traffic_light, TrafficLight::Green);
        assert!(!label.obstacles_cones);
        assert!(!label.crossroad);
    }

    #[test]
    fn light_classified_by_first_keyword() {
        let label =
            parse_label_text("Traffic Lights: the green light turned red moments ago").unwrap();
        assert_eq!(label.traffic_light, TrafficLight::Green);
    }

    #[test]
    fn crossroad_heading_is_a_synonym() {
        let label = parse_label_text("Crossroad: a crossroad is coming up").unwrap();
        assert!(label.crossroad);
        let label = parse_label_text("Crossroad: none.").unwrap();
        assert!(!label.crossroad);
    }

    #[test]
    fn keys_match_case_insensitively() {
        let label = parse_label_text("RECOMMENDED SPEED: 55 km/h. TRAFFIC LIGHTS: Yellow").unwrap();
        assert_eq!(label.recommended_speed_kmh, Some(55.0));
        assert_eq!(label.traffic_light, TrafficLight::Yellow);
    }

    #[test]
    fn malformed_speed_reports_section() {
        let err = parse_label_text("Recommended Speed: unknown. Traffic Lights: red").unwrap_err();
        match err {
            LabelTextError::MalformedNumeric { section } => {
                assert!(section.contains("unknown"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn cone_count_extracted_when_present() {
        let label = parse_label_text("Obstacles: 3 traffic cones are present.").unwrap();
        assert!(label.obstacles_cones);
        assert_eq!(label.cone_count, Some(3));
    }

    #[test]
    fn serializes_sample_layout_exactly() {
        let label = SceneLabel {
            recommended_speed_kmh: Some(40.0),
            traffic_light: TrafficLight::Red,
            obstacles_cones: true,
            cone_count: None,
            crossroad: true,
            confidence: 1.0,
            source: LabelSource::Vlm,
        };
        assert_eq!(serialize_label(&label), SAMPLE);
    }

    #[test]
    fn empty_label_serializes_three_none_sections() {
        let label = SceneLabel::empty(LabelSource::Vlm);
        assert_eq!(
            serialize_label(&label),
            "Traffic Lights: none. Obstacles: none. Intersection: none."
        );
    }

    #[test]
    fn round_trip_is_identity_on_canonical_labels() {
        let label = SceneLabel {
            recommended_speed_kmh: Some(37.5),
            traffic_light: TrafficLight::Yellow,
            obstacles_cones: true,
            cone_count: Some(4),
            crossroad: false,
            confidence: 1.0,
            source: LabelSource::Vlm,
        };
        let parsed = parse_label_text(&serialize_label(&label)).unwrap();
        assert_eq!(parsed, label);
    }

    #[test]
    fn parsing_serializer_output_never_errors_on_speedless_labels() {
        let label = SceneLabel::empty(LabelSource::Vlm);
        assert!(parse_label_text(&serialize_label(&label)).is_ok());
    }
}
