//! Stage-level integration tests: each runner against small fixtures, plus
//! binary exit-code behavior.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use drivescene_cli::config::PipelineConfig;
use drivescene_cli::io::{read_jsonl, write_jsonl, LabelRecord};
use drivescene_cli::runs;

use drivescene_core::manifest::read_manifest;
use drivescene_core::synth::SceneSpec;
use drivescene_core::types::{FrameRecord, LabelSource, MotionState, SceneLabel, TrafficLight};

fn frames(n: usize) -> Vec<FrameRecord> {
    (0..n)
        .map(|i| FrameRecord {
            frame_id: format!("f{i:05}"),
            timestamp_ms: i as i64 * 100,
            ego_speed_mps: 10.0,
            motion_state: MotionState::Cruising,
            image_ref: format!("img://{i:05}"),
            camera_fps: 10.0,
        })
        .collect()
}

fn base_label(source: LabelSource) -> SceneLabel {
    SceneLabel {
        recommended_speed_kmh: Some(40.0),
        traffic_light: TrafficLight::Green,
        obstacles_cones: true,
        cone_count: Some(2),
        crossroad: false,
        confidence: 0.9,
        source,
    }
}

fn label_records(frames: &[FrameRecord], label: &SceneLabel) -> Vec<LabelRecord> {
    frames
        .iter()
        .map(|f| LabelRecord {
            frame_id: f.frame_id.clone(),
            image_ref: f.image_ref.clone(),
            label: label.clone(),
        })
        .collect()
}

fn write_fixtures(dir: &Path, n: usize) -> PipelineConfig {
    let frame_list = frames(n);
    write_jsonl(&dir.join("frames.jsonl"), &frame_list).unwrap();
    write_jsonl(
        &dir.join("vlm.jsonl"),
        &label_records(&frame_list, &base_label(LabelSource::Vlm)),
    )
    .unwrap();
    write_jsonl(
        &dir.join("expert.jsonl"),
        &label_records(&frame_list, &base_label(LabelSource::Expert)),
    )
    .unwrap();

    let mut config = PipelineConfig::default();
    config.paths.frames = Some(dir.join("frames.jsonl"));
    config.paths.vlm_labels = Some(dir.join("vlm.jsonl"));
    config.paths.expert_labels = Some(dir.join("expert.jsonl"));
    config.paths.output_dir = Some(dir.join("out"));
    config
}

#[test]
fn mine_offline_produces_fused_labels_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixtures(dir.path(), 24);
    let artifacts = runs::run_mine(&config).unwrap();
    assert_eq!(artifacts.stage, "mine");

    let fused: Vec<LabelRecord> = read_jsonl(&dir.path().join("out/fused.jsonl")).unwrap();
    assert_eq!(fused.len(), 24);
    for record in &fused {
        assert_eq!(record.label.source, LabelSource::Fused);
        assert!(record.label.content_eq(&base_label(LabelSource::Vlm)));
    }

    let summary: runs::MineSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/stats.json")).unwrap())
            .unwrap();
    assert_eq!(summary.stats.total_frames, 24);
    assert_eq!(summary.stats.kept + summary.stats.dropped, 24);
    assert_eq!(summary.stats.dropped, 0);

    let meta = std::fs::read_to_string(dir.path().join("out/run_meta.json")).unwrap();
    assert!(meta.contains("temporal_vote"));
    assert!(meta.contains("motion_consistency"));
    assert!(meta.contains("fusion"));
}

#[test]
fn mine_rejects_missing_inputs_as_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.paths.output_dir = Some(dir.path().join("out"));
    let err = runs::run_mine(&config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn synth_writes_specs_manifest_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.seed = 11;
    config.synth.scenes = 12;
    config.paths.output_dir = Some(dir.path().join("out"));
    runs::run_synth(&config).unwrap();

    for i in 0..12 {
        let path = dir.path().join(format!("out/specs/scene_{i:05}.json"));
        let spec: SceneSpec =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        spec.validate().unwrap();
    }
    let manifest = read_manifest(&dir.path().join("out/manifest.jsonl")).unwrap();
    assert!(manifest.entries.len() <= 12);
    assert!(!manifest.entries.is_empty());

    let labels: Vec<LabelRecord> = read_jsonl(&dir.path().join("out/labels.jsonl")).unwrap();
    assert_eq!(labels.len(), 12);
}

#[test]
fn synth_candidate_selection_over_the_shared_contract() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = 3usize;
    let per_scene = 3usize;
    // The generator mock answers each candidate slot with a caption;
    // cand-00 echoes useful scene words, the rest drift.
    let mut script: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..scenes {
        for k in 0..per_scene {
            let caption = match k {
                0 => "an intersection with a traffic light ahead and cones on the road",
                1 => "a quiet residential street with parked cars",
                _ => "abstract shapes and colors",
            };
            script.insert(
                format!("t2i://scene-{i:05}/cand-{k:02}"),
                caption.to_string(),
            );
        }
    }
    let script_path = dir.path().join("script.json");
    std::fs::write(&script_path, serde_json::to_string(&script).unwrap()).unwrap();

    let mut config = PipelineConfig::default();
    config.seed = 21;
    config.synth.scenes = scenes;
    config.synth.candidates_per_scene = per_scene;
    config.synth.best_n = 2;
    config.paths.output_dir = Some(dir.path().join("out"));
    config.inference.mock_script = Some(script_path);
    runs::run_synth(&config).unwrap();

    let candidates: Vec<drivescene_core::synth::CandidateImage> =
        read_jsonl(&dir.path().join("out/candidates.jsonl")).unwrap();
    assert_eq!(candidates.len(), scenes * per_scene);
    for c in &candidates {
        assert!((0.0..=1.0).contains(&c.score_quality));
        assert!((0.0..=1.0).contains(&c.score_consistency));
    }
    let selected: Vec<drivescene_core::synth::CandidateImage> =
        read_jsonl(&dir.path().join("out/selected.jsonl")).unwrap();
    assert_eq!(selected.len(), scenes * 2);

    let summary: runs::SynthSummary = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/synth_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary.candidates_scored, scenes * per_scene);
}

#[test]
fn eval_constant_speed_references_skip_the_speed_task() {
    let dir = tempfile::tempdir().unwrap();
    let frame_list = frames(8);
    let mut records = label_records(&frame_list, &base_label(LabelSource::GroundTruth));
    for (i, r) in records.iter_mut().enumerate() {
        r.label.recommended_speed_kmh = Some(40.0); // constant: degenerate R²
        r.label.crossroad = i % 2 == 0;
    }
    let refs = dir.path().join("refs.jsonl");
    write_jsonl(&refs, &records).unwrap();
    // Predictions that differ in speed so SS_res > 0.
    let mut preds = records.clone();
    for (i, p) in preds.iter_mut().enumerate() {
        p.label.recommended_speed_kmh = Some(40.0 + i as f64);
    }
    let preds_path = dir.path().join("preds.jsonl");
    write_jsonl(&preds_path, &preds).unwrap();

    let mut config = PipelineConfig::default();
    config.paths.output_dir = Some(dir.path().join("out"));
    let (_, report) = runs::run_eval(&config, &preds_path, &refs).unwrap();
    assert!(!report.tasks.contains_key(&drivescene_core::types::Task::RecommendedSpeed));
    assert!(report.average.is_finite());
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let mut config = PipelineConfig::default();
        config.seed = 3;
        config.synth.scenes = 8;
        config.paths.output_dir = Some(out.to_path_buf());
        runs::run_synth(&config).unwrap();
        std::fs::read_to_string(out.join("labels.jsonl")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn eval_perfect_predictions_scores_average_one() {
    let dir = tempfile::tempdir().unwrap();
    let frame_list = frames(10);
    let mut records = label_records(&frame_list, &base_label(LabelSource::GroundTruth));
    // Mix classes so every task is scoreable.
    for (i, record) in records.iter_mut().enumerate() {
        record.label.traffic_light = if i % 2 == 0 {
            TrafficLight::Red
        } else {
            TrafficLight::Green
        };
        record.label.crossroad = i % 3 == 0;
        record.label.recommended_speed_kmh = Some(30.0 + i as f64);
    }
    let refs_path = dir.path().join("refs.jsonl");
    write_jsonl(&refs_path, &records).unwrap();

    let mut config = PipelineConfig::default();
    config.paths.output_dir = Some(dir.path().join("out"));
    let (_, report) = runs::run_eval(&config, &refs_path, &refs_path).unwrap();
    assert!((report.average - 1.0).abs() < 1e-12);

    let table = std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert!(table.contains("Average"));
}

#[test]
fn prompt_opt_with_mock_script_improves_or_holds() {
    let dir = tempfile::tempdir().unwrap();
    let frame_list = frames(8);
    write_jsonl(&dir.path().join("frames.jsonl"), &frame_list).unwrap();
    let mut reference = base_label(LabelSource::GroundTruth);
    reference.traffic_light = TrafficLight::Red;
    reference.crossroad = true;
    write_jsonl(
        &dir.path().join("refs.jsonl"),
        &label_records(&frame_list, &reference),
    )
    .unwrap();

    // The mock answers the canonical text for every frame, so the score is
    // already perfect and no edit should be accepted.
    let canonical = drivescene_core::label_text::serialize_label(&reference);
    let script: BTreeMap<String, String> = frame_list
        .iter()
        .map(|f| (f.image_ref.clone(), canonical.clone()))
        .collect();
    let script_path = dir.path().join("script.json");
    std::fs::write(&script_path, serde_json::to_string(&script).unwrap()).unwrap();

    let mut config = PipelineConfig::default();
    config.seed = 5;
    config.prompt_opt.budget = 10;
    config.paths.frames = Some(dir.path().join("frames.jsonl"));
    config.paths.references = Some(dir.path().join("refs.jsonl"));
    config.paths.output_dir = Some(dir.path().join("out"));
    config.inference.mock_script = Some(script_path);
    runs::run_prompt_opt(&config).unwrap();

    let summary: runs::PromptOptSummary = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/prompt_opt_summary.json")).unwrap(),
    )
    .unwrap();
    assert!(summary.final_score >= summary.initial_score);
    assert!((summary.initial_score - 1.0).abs() < 1e-9);
    assert_eq!(summary.accepted_rounds, 0);
}

#[test]
fn distill_stage_writes_store_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.seed = 9;
    // Small budget: this test checks artifacts, not learning quality.
    config.distill.teacher_steps = 60;
    config.distill.settings.steps = 60;
    config.distill.teacher_corpus = 64;
    config.distill.train_corpus = 16;
    config.distill.heldout_corpus = 32;
    config.paths.output_dir = Some(dir.path().join("out"));
    runs::run_distill(&config).unwrap();

    let store = drivescene_core::distill::load_store(&dir.path().join("out/soft_labels.bin")).unwrap();
    assert_eq!(store.len(), 16 * config.distill.target_len);

    let summary: runs::DistillSummary = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/distill_summary.json")).unwrap(),
    )
    .unwrap();
    assert!(summary.adapter_params < summary.base_params);
    assert!(summary.teacher_heldout_ce.is_finite());

    let csv = std::fs::read_to_string(dir.path().join("out/loss_trajectory.csv")).unwrap();
    assert!(csv.starts_with("step,kd_loss,hard_loss"));
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn quant_stage_reports_awq_dominance() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.seed = 77;
    config.quant.instances = 10;
    config.paths.output_dir = Some(dir.path().join("out"));
    runs::run_quant(&config).unwrap();

    let summary: runs::QuantSummary = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/quant_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary.instances, 10);
    assert!(summary.mean_awq_error <= summary.mean_rtn_error);

    let csv = std::fs::read_to_string(dir.path().join("out/benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    let tensor =
        drivescene_core::quant::load_tensor(&dir.path().join("out/tensor.bin")).unwrap();
    assert_eq!(tensor.shape(), (config.quant.rows, config.quant.cols));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drivescene"))
}

#[test]
fn binary_evaluate_exits_zero_and_renders_table() {
    let dir = tempfile::tempdir().unwrap();
    let frame_list = frames(6);
    let mut records = label_records(&frame_list, &base_label(LabelSource::GroundTruth));
    for (i, r) in records.iter_mut().enumerate() {
        r.label.crossroad = i % 2 == 0;
        r.label.recommended_speed_kmh = Some(40.0 + i as f64);
    }
    let refs = dir.path().join("refs.jsonl");
    write_jsonl(&refs, &records).unwrap();

    let output = binary()
        .args(["evaluate", "--predictions"])
        .arg(&refs)
        .arg("--references")
        .arg(&refs)
        .arg("--output")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("Average"));
    assert!(stdout.contains("Traffic Lights"));
}

#[test]
fn binary_missing_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args(["evaluate", "--predictions", "/nonexistent/preds.jsonl"])
        .arg("--references")
        .arg("/nonexistent/refs.jsonl")
        .arg("--output")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn binary_unreachable_endpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixtures(dir.path(), 3);
    // Force endpoint inference by dropping the VLM label file.
    let mut config = config;
    config.paths.vlm_labels = None;
    config.inference.endpoint = Some("http://127.0.0.1:9".to_string());
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let output = binary()
        .args(["mine", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn binary_report_renders_saved_report() {
    let dir = tempfile::tempdir().unwrap();
    let frame_list = frames(6);
    let mut records = label_records(&frame_list, &base_label(LabelSource::GroundTruth));
    for (i, r) in records.iter_mut().enumerate() {
        r.label.recommended_speed_kmh = Some(40.0 + i as f64);
    }
    let refs = dir.path().join("refs.jsonl");
    write_jsonl(&refs, &records).unwrap();
    let mut config = PipelineConfig::default();
    config.paths.output_dir = Some(dir.path().join("out"));
    runs::run_eval(&config, &refs, &refs).unwrap();

    let output = binary()
        .args(["report", "--report"])
        .arg(dir.path().join("out/report.json"))
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("Average"));
}
