//! Driving-scene label pipeline.
//!
//! Building blocks for turning raw per-frame model output into training
//! data and a compact deployable model: a four-section label-text grammar,
//! pseudo-label mining with temporal and motion-consistency constraints,
//! trigger-keyed prompt composition and optimization, procedural scene
//! synthesis with ground-truth label emission, toy-scale knowledge
//! distillation with low-rank adapters, activation-aware weight
//! quantization, and the metrics/report harness that scores it all.

pub mod distill;
pub mod eval;
pub mod label_text;
pub mod manifest;
pub mod mining;
pub mod prompt;
pub mod quant;
pub mod synth;
pub mod types;

pub use label_text::{parse_label_text, serialize_label};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, ManifestEntry, Origin, Split};
pub use types::{
    FrameRecord, LabelSource, LabeledFrame, MotionState, SceneLabel, Task, TrafficLight,
};
