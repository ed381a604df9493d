//! One function per pipeline stage. Every stage validates its inputs,
//! writes deterministic data artifacts plus a timestamped run_meta.json
//! into the output directory, and reruns byte-identical given the same
//! seed and config.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drivescene_core::distill::{
    distill_dataset, evaluate_ce, save_store, train_adapter, train_full, MarkovGrammar,
    ModelAdapters, ToyModelParams, TrainSettings,
};
use drivescene_core::eval::{build_report, EvalReport, Provenance, TaskPredictions};
use drivescene_core::label_text::parse_label_text;
use drivescene_core::manifest::{write_manifest, DatasetManifest, ManifestEntry, Origin, Split};
use drivescene_core::mining::{mine_sequence, MiningStats};
use drivescene_core::prompt::{
    compose_prompt, derive_scene_tags, optimize_library, PromptLibrary,
};
use drivescene_core::quant::{awq_quantize, benchmark_instance, collect_stats, save_tensor};
use drivescene_core::synth::{
    emit_labels, filter_pairs, generate_layout, place_dynamics, select_best_n, CandidateImage,
    DataPair, FilterStats, SceneSpec,
};
use drivescene_core::types::{validate_sequence, LabelSource, SceneLabel, Task};

use crate::client::{infer_batch, HttpInferenceClient, InferenceClient, MockInferenceClient};
use crate::config::PipelineConfig;
use crate::errors::RunError;
use crate::io::{
    ensure_dir, read_frames, read_labels, write_json, write_jsonl, LabelRecord, RunMetadata,
};
use crate::mock_server::load_script;
use crate::wire::InferenceRequest;

/// Paths a stage wrote, in creation order.
#[derive(Debug, Clone, Default)]
pub struct StageArtifacts {
    pub stage: &'static str,
    pub files: Vec<PathBuf>,
}

fn make_client(config: &PipelineConfig) -> Result<Box<dyn InferenceClient>, RunError> {
    if let Some(script_path) = &config.inference.mock_script {
        let script = load_script(script_path)
            .map_err(|e| RunError::input(format!("{}: {e}", script_path.display())))?;
        return Ok(Box::new(MockInferenceClient::new(script)));
    }
    if let Some(endpoint) = config.endpoint() {
        return Ok(Box::new(HttpInferenceClient::new(endpoint)));
    }
    Err(RunError::input(
        "no inference endpoint: set inference.endpoint, DRIVESCENE_ENDPOINT, or inference.mock_script",
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MineSummary {
    pub stats: MiningStats,
    /// VLM responses that failed to parse and fell back to an empty label.
    pub parse_failures: usize,
}

/// mine: frames + expert labels (+ VLM labels from file or endpoint) into
/// fused pseudo-labels. Stage order is fixed: temporal vote, motion
/// consistency, fusion.
pub fn run_mine(config: &PipelineConfig) -> Result<StageArtifacts, RunError> {
    let out_dir = config.output_dir()?.to_path_buf();
    ensure_dir(&out_dir)?;
    let frames_path = config.require("frames", &config.paths.frames)?;
    let expert_path = config.require("expert_labels", &config.paths.expert_labels)?;

    let frames = read_frames(&frames_path)?;
    validate_sequence(&frames).map_err(|e| RunError::input(format!("frames: {e}")))?;
    let expert: BTreeMap<String, SceneLabel> = read_labels(&expert_path)?
        .into_iter()
        .map(|r| (r.frame_id, r.label))
        .collect();

    let mut parse_failures = 0usize;
    let vlm: BTreeMap<String, SceneLabel> = match &config.paths.vlm_labels {
        Some(path) => read_labels(path)?
            .into_iter()
            .map(|r| (r.frame_id, r.label))
            .collect(),
        None => {
            // Two-pass dynamic prompting: tags from the expert first pass,
            // then one inference call per frame.
            let library = load_library(config)?;
            let client = make_client(config)?;
            let requests: Vec<InferenceRequest> = frames
                .iter()
                .enumerate()
                .map(|(i, frame)| {
                    let tags = expert
                        .get(&frame.frame_id)
                        .map(derive_scene_tags)
                        .unwrap_or_default();
                    let prompt = compose_prompt(&tags, &library)
                        .map_err(|e| RunError::runtime("mine", e))?;
                    Ok(InferenceRequest::new(
                        &config.inference.model_id,
                        format!("req-{i:06}"),
                        prompt,
                        &frame.image_ref,
                    ))
                })
                .collect::<Result<_, RunError>>()?;
            let responses = infer_batch(client.as_ref(), &requests, config.concurrency.0);
            let mut labels = BTreeMap::new();
            for (frame, result) in frames.iter().zip(responses) {
                let response = result.map_err(|e| RunError::runtime("mine", e))?;
                let text = response.text().unwrap_or_default();
                let label = match parse_label_text(text) {
                    Ok(mut label) => {
                        label.confidence = config.mining.vlm_confidence;
                        label
                    }
                    Err(e) => {
                        log::warn!("frame {}: unparseable response ({e})", frame.frame_id);
                        parse_failures += 1;
                        let mut empty = SceneLabel::empty(LabelSource::Vlm);
                        empty.confidence = 0.0;
                        empty
                    }
                };
                labels.insert(frame.frame_id.clone(), label);
            }
            labels
        }
    };

    let (fused_frames, stats) = mine_sequence(
        &frames,
        &vlm,
        &expert,
        &config.mining.window,
        &config.mining.rules,
        &config.mining.fusion,
    )
    .map_err(|e| RunError::runtime("mine", e))?;

    let fused_records: Vec<LabelRecord> = fused_frames
        .iter()
        .map(|lf| LabelRecord {
            frame_id: lf.frame.frame_id.clone(),
            image_ref: lf.frame.image_ref.clone(),
            label: lf.labels[&LabelSource::Fused].clone(),
        })
        .collect();

    let fused_path = out_dir.join("fused.jsonl");
    let stats_path = out_dir.join("stats.json");
    let meta_path = out_dir.join("run_meta.json");
    write_jsonl(&fused_path, &fused_records)?;
    write_json(&stats_path, &MineSummary { stats, parse_failures })?;
    write_json(
        &meta_path,
        &RunMetadata::new("mine", config.seed, config.digest()).with_stage_order(&[
            "temporal_vote",
            "motion_consistency",
            "fusion",
        ]),
    )?;

    Ok(StageArtifacts {
        stage: "mine",
        files: vec![fused_path, stats_path, meta_path],
    })
}

fn load_library(config: &PipelineConfig) -> Result<PromptLibrary, RunError> {
    match &config.paths.prompt_library {
        None => Ok(PromptLibrary::starter()),
        Some(path) => {
            let contents = std::fs::read_to_string(path)
                .map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
            let library: PromptLibrary = serde_json::from_str(&contents)
                .map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
            library
                .validate()
                .map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
            Ok(library)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub scenes: usize,
    pub filter: FilterStats,
    pub manifest_entries: usize,
    pub candidates_scored: usize,
}

/// synthesize: seeded scene specs with emitted ground-truth labels and
/// prompts, pair filtering, a manifest of the kept pairs, and (optionally)
/// best-of-N candidate selection against the generator endpoint.
pub fn run_synth(config: &PipelineConfig) -> Result<StageArtifacts, RunError> {
    let out_dir = config.output_dir()?.to_path_buf();
    let specs_dir = out_dir.join("specs");
    ensure_dir(&specs_dir)?;
    let synth = &config.synth;
    if synth.candidates_per_scene > 0 && synth.best_n > synth.candidates_per_scene {
        return Err(RunError::input(format!(
            "synth.best_n ({}) exceeds candidates_per_scene ({})",
            synth.best_n, synth.candidates_per_scene
        )));
    }

    let mut files = Vec::new();
    let mut labels = Vec::with_capacity(synth.scenes);
    let mut pairs = Vec::with_capacity(synth.scenes);
    let mut by_signature: BTreeMap<String, usize> = BTreeMap::new();
    let mut specs = Vec::with_capacity(synth.scenes);

    for i in 0..synth.scenes {
        let layout_seed = config.seed.wrapping_add(i as u64);
        let placement_seed = layout_seed ^ 0x9e37_79b9_7f4a_7c15;
        let layout = generate_layout(&synth.generation, layout_seed)
            .map_err(|e| RunError::runtime("synthesize", e))?;
        let spec = place_dynamics(&layout, &synth.generation, placement_seed)
            .map_err(|e| RunError::runtime("synthesize", e))?;
        let (label, prompt) = emit_labels(&spec);

        let spec_json = serde_json::to_string_pretty(&spec).expect("spec serializes");
        let spec_path = specs_dir.join(format!("scene_{i:05}.json"));
        std::fs::write(&spec_path, &spec_json)
            .map_err(|e| RunError::input(format!("{}: {e}", spec_path.display())))?;

        let signature = hex::encode(Sha256::digest(spec_json.as_bytes()));
        by_signature.insert(signature.clone(), i);
        labels.push(LabelRecord {
            frame_id: format!("scene-{i:05}"),
            image_ref: format!("rendered://scene-{i:05}"),
            label: label.clone(),
        });
        pairs.push(DataPair {
            caption: prompt,
            signature,
            label: Some(label),
        });
        specs.push(spec);
    }

    let labels_path = out_dir.join("labels.jsonl");
    write_jsonl(&labels_path, &labels)?;
    files.push(labels_path);

    let (kept, filter_stats) = filter_pairs(&pairs);
    let mut manifest = DatasetManifest::new("synthetic-rendered", Split::Train);
    for pair in &kept {
        let index = by_signature[&pair.signature];
        manifest.entries.push(ManifestEntry {
            image_ref: labels[index].image_ref.clone(),
            label: pair.label.clone().expect("synthetic pairs carry labels"),
            origin: Origin::Rendered,
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &manifest_path)
        .map_err(|e| RunError::runtime("synthesize", e))?;
    files.push(manifest_path);

    let mut candidates_scored = 0usize;
    if synth.candidates_per_scene > 0 {
        let client = make_client(config)?;
        let (candidates, selected) =
            score_candidates(config, client.as_ref(), &specs, &mut candidates_scored)?;
        let candidates_path = out_dir.join("candidates.jsonl");
        let selected_path = out_dir.join("selected.jsonl");
        write_jsonl(&candidates_path, &candidates)?;
        write_jsonl(&selected_path, &selected)?;
        files.push(candidates_path);
        files.push(selected_path);
    }

    let summary_path = out_dir.join("synth_summary.json");
    write_json(
        &summary_path,
        &SynthSummary {
            scenes: synth.scenes,
            filter: filter_stats,
            manifest_entries: manifest.entries.len(),
            candidates_scored,
        },
    )?;
    files.push(summary_path);
    let meta_path = out_dir.join("run_meta.json");
    write_json(
        &meta_path,
        &RunMetadata::new("synthesize", config.seed, config.digest()),
    )?;
    files.push(meta_path);

    Ok(StageArtifacts {
        stage: "synthesize",
        files,
    })
}

/// Requests candidate captions per scene over the shared inference
/// contract, scores them with the deterministic mock scorer (content
/// hash for quality, caption/prompt token overlap for consistency), and
/// keeps the best N per scene.
fn score_candidates(
    config: &PipelineConfig,
    client: &dyn InferenceClient,
    specs: &[SceneSpec],
    scored: &mut usize,
) -> Result<(Vec<CandidateImage>, Vec<CandidateImage>), RunError> {
    let synth = &config.synth;
    let mut all = Vec::new();
    let mut selected = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let (_, prompt) = emit_labels(spec);
        let requests: Vec<InferenceRequest> = (0..synth.candidates_per_scene)
            .map(|k| {
                InferenceRequest::new(
                    &config.inference.model_id,
                    format!("cand-{i:05}-{k:02}"),
                    &prompt,
                    format!("t2i://scene-{i:05}/cand-{k:02}"),
                )
            })
            .collect();
        let responses = infer_batch(client, &requests, config.concurrency.0);
        let mut scene_candidates = Vec::with_capacity(requests.len());
        for (k, result) in responses.into_iter().enumerate() {
            let response = result.map_err(|e| RunError::runtime("synthesize", e))?;
            let caption = response.text().unwrap_or_default().to_string();
            scene_candidates.push(CandidateImage {
                id: format!("scene-{i:05}/cand-{k:02}"),
                score_quality: hash_unit_score(&caption),
                score_consistency: token_overlap(&caption, &prompt),
                caption,
            });
            *scored += 1;
        }
        let best = select_best_n(&scene_candidates, synth.best_n, synth.score_weights)
            .map_err(|e| RunError::runtime("synthesize", e))?;
        selected.extend(best);
        all.extend(scene_candidates);
    }
    Ok((all, selected))
}

/// Deterministic pseudo-score in [0, 1] from content bytes.
fn hash_unit_score(text: &str) -> f64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(raw) as f64 / u64::MAX as f64
}

/// Token-set Jaccard between caption and prompt.
fn token_overlap(a: &str, b: &str) -> f64 {
    let tokens = |s: &str| -> HashSet<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_ascii_lowercase())
            .collect()
    };
    let (ta, tb) = (tokens(a), tokens(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let intersection = ta.intersection(&tb).count() as f64;
    let union = (ta.len() + tb.len()) as f64 - intersection;
    intersection / union
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptOptSummary {
    pub initial_score: f64,
    pub final_score: f64,
    pub accepted_rounds: usize,
    pub rounds: usize,
}

/// prompt-opt: hill-climb the prompt library against the eval Average
/// computed through the inference endpoint.
pub fn run_prompt_opt(config: &PipelineConfig) -> Result<StageArtifacts, RunError> {
    let out_dir = config.output_dir()?.to_path_buf();
    ensure_dir(&out_dir)?;
    let frames_path = config.require("frames", &config.paths.frames)?;
    let references_path = config.require("references", &config.paths.references)?;

    let frames = read_frames(&frames_path)?;
    let references: BTreeMap<String, SceneLabel> = read_labels(&references_path)?
        .into_iter()
        .map(|r| (r.frame_id, r.label))
        .collect();
    let cases: Vec<(String, SceneLabel)> = frames
        .iter()
        .filter_map(|f| {
            references
                .get(&f.frame_id)
                .map(|label| (f.image_ref.clone(), label.clone()))
        })
        .take(config.prompt_opt.max_eval_frames)
        .collect();
    if cases.is_empty() {
        return Err(RunError::input(
            "no evaluation cases: frames and references share no frame_id",
        ));
    }

    let library = load_library(config)?;
    let client = make_client(config)?;
    let model_id = config.inference.model_id.clone();
    let concurrency = config.concurrency.0;

    let scorer = |lib: &PromptLibrary, cases: &[(String, SceneLabel)]| {
        score_library(client.as_ref(), &model_id, concurrency, lib, cases)
    };
    let initial_score = scorer(&library, &cases);
    let (optimized, trace) = optimize_library(
        &library,
        &cases,
        scorer,
        config.prompt_opt.budget,
        config.seed,
    )
    .map_err(|e| RunError::runtime("prompt-opt", e))?;
    let final_score = score_library(client.as_ref(), &model_id, concurrency, &optimized, &cases);

    let library_path = out_dir.join("optimized_library.json");
    write_json(&library_path, &optimized)?;
    let trace_path = out_dir.join("trace.jsonl");
    write_jsonl(&trace_path, &trace.rounds)?;
    let summary_path = out_dir.join("prompt_opt_summary.json");
    write_json(
        &summary_path,
        &PromptOptSummary {
            initial_score,
            final_score,
            accepted_rounds: trace.rounds.iter().filter(|r| r.accepted).count(),
            rounds: trace.rounds.len(),
        },
    )?;
    let meta_path = out_dir.join("run_meta.json");
    write_json(
        &meta_path,
        &RunMetadata::new("prompt-opt", config.seed, config.digest()),
    )?;

    Ok(StageArtifacts {
        stage: "prompt-opt",
        files: vec![library_path, trace_path, summary_path, meta_path],
    })
}

/// Composes prompts for every case, runs inference, parses the answers, and
/// scores them with the report Average. Failed calls and unparseable
/// answers count as empty labels.
fn score_library(
    client: &dyn InferenceClient,
    model_id: &str,
    concurrency: usize,
    library: &PromptLibrary,
    cases: &[(String, SceneLabel)],
) -> f64 {
    let requests: Vec<InferenceRequest> = cases
        .iter()
        .enumerate()
        .map(|(i, (image_ref, reference))| {
            let tags = derive_scene_tags(reference);
            let prompt = compose_prompt(&tags, library).unwrap_or_default();
            InferenceRequest::new(model_id, format!("opt-{i:06}"), prompt, image_ref)
        })
        .collect();
    let responses = infer_batch(client, &requests, concurrency);
    let predictions: Vec<SceneLabel> = responses
        .into_iter()
        .map(|result| {
            result
                .ok()
                .and_then(|r| r.text().map(str::to_string))
                .and_then(|text| parse_label_text(&text).ok())
                .unwrap_or_else(|| SceneLabel::empty(LabelSource::Vlm))
        })
        .collect();
    let refs: Vec<SceneLabel> = cases.iter().map(|(_, r)| r.clone()).collect();
    score_predictions(&predictions, &refs)
}

/// Report Average over aligned prediction/reference labels; tasks that
/// cannot be scored on this data are skipped.
pub fn score_predictions(predictions: &[SceneLabel], references: &[SceneLabel]) -> f64 {
    match predictions_to_report(predictions, references, "eval", "model") {
        Ok(report) => report.average,
        Err(_) => 0.0,
    }
}

/// Builds the per-task prediction lists and the report from aligned labels.
pub fn predictions_to_report(
    predictions: &[SceneLabel],
    references: &[SceneLabel],
    dataset: &str,
    model_id: &str,
) -> Result<EvalReport, RunError> {
    let mut data: BTreeMap<Task, TaskPredictions> = BTreeMap::new();

    let speed_pairs: Vec<(f64, f64)> = predictions
        .iter()
        .zip(references)
        .filter_map(|(p, r)| match (p.recommended_speed_kmh, r.recommended_speed_kmh) {
            (pred, Some(reference)) => Some((pred.unwrap_or(0.0), reference)),
            _ => None,
        })
        .collect();
    // Constant references make R² degenerate (-inf unless exact); the
    // report requires finite metrics, so the speed task is skipped then.
    let speed_refs: Vec<f64> = speed_pairs.iter().map(|p| p.1).collect();
    let constant_refs = speed_refs.windows(2).all(|w| w[0] == w[1]);
    let speed_preds: Vec<f64> = speed_pairs.iter().map(|p| p.0).collect();
    if speed_pairs.len() >= 2 && (!constant_refs || speed_preds == speed_refs) {
        data.insert(
            Task::RecommendedSpeed,
            TaskPredictions::Numeric {
                preds: speed_preds,
                refs: speed_refs,
            },
        );
    } else if speed_pairs.len() >= 2 {
        log::warn!("references have constant speed; skipping the speed task in the report");
    }

    data.insert(
        Task::TrafficLights,
        TaskPredictions::Categorical {
            preds: predictions
                .iter()
                .map(|p| p.traffic_light.as_str().to_string())
                .collect(),
            refs: references
                .iter()
                .map(|r| r.traffic_light.as_str().to_string())
                .collect(),
        },
    );

    let boolean = |extract: fn(&SceneLabel) -> bool, labels: &[SceneLabel]| -> Vec<String> {
        labels.iter().map(|l| extract(l).to_string()).collect()
    };
    if references.iter().any(|r| r.obstacles_cones) {
        data.insert(
            Task::Obstacles,
            TaskPredictions::Categorical {
                preds: boolean(|l| l.obstacles_cones, predictions),
                refs: boolean(|l| l.obstacles_cones, references),
            },
        );
    }
    if references.iter().any(|r| r.crossroad) {
        data.insert(
            Task::Crossroad,
            TaskPredictions::Categorical {
                preds: boolean(|l| l.crossroad, predictions),
                refs: boolean(|l| l.crossroad, references),
            },
        );
    }

    build_report(
        &data,
        Provenance {
            dataset: dataset.to_string(),
            model_id: model_id.to_string(),
            timestamp: None,
        },
    )
    .map_err(|e| RunError::runtime("evaluate", e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub joined: usize,
    pub missing_predictions: usize,
    pub average: f64,
}

/// evaluate: joins prediction and reference label files on image_ref and
/// writes the report (JSON plus the aligned text table).
pub fn run_eval(
    config: &PipelineConfig,
    predictions_path: &std::path::Path,
    references_path: &std::path::Path,
) -> Result<(StageArtifacts, EvalReport), RunError> {
    let out_dir = config.output_dir()?.to_path_buf();
    ensure_dir(&out_dir)?;

    let predictions: BTreeMap<String, SceneLabel> = read_labels(predictions_path)?
        .into_iter()
        .map(|r| (r.image_ref, r.label))
        .collect();
    let references: Vec<LabelRecord> = read_labels(references_path)?;
    if references.is_empty() {
        return Err(RunError::input("references file has no records"));
    }

    let mut joined_preds = Vec::new();
    let mut joined_refs = Vec::new();
    let mut missing = 0usize;
    for record in &references {
        match predictions.get(&record.image_ref) {
            Some(pred) => {
                joined_preds.push(pred.clone());
                joined_refs.push(record.label.clone());
            }
            None => missing += 1,
        }
    }
    if joined_preds.is_empty() {
        return Err(RunError::input(
            "no predictions matched the references on image_ref",
        ));
    }

    let dataset = references_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "references".to_string());
    let report = predictions_to_report(
        &joined_preds,
        &joined_refs,
        &dataset,
        &config.inference.model_id,
    )?;

    let report_path = out_dir.join("report.json");
    write_json(&report_path, &report)?;
    let table_path = out_dir.join("report.txt");
    std::fs::write(&table_path, report.render_table())
        .map_err(|e| RunError::input(format!("{}: {e}", table_path.display())))?;
    let summary_path = out_dir.join("eval_summary.json");
    write_json(
        &summary_path,
        &EvalSummary {
            joined: joined_preds.len(),
            missing_predictions: missing,
            average: report.average,
        },
    )?;
    let meta_path = out_dir.join("run_meta.json");
    write_json(
        &meta_path,
        &RunMetadata::new("evaluate", config.seed, config.digest()),
    )?;

    Ok((
        StageArtifacts {
            stage: "evaluate",
            files: vec![report_path, table_path, summary_path, meta_path],
        },
        report,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSummary {
    pub teacher_heldout_ce: f64,
    pub student_base_heldout_ce: f64,
    pub kd_heldout_ce: f64,
    pub hard_only_heldout_ce: f64,
    pub grammar_entropy: f64,
    pub adapter_params: usize,
    pub base_params: usize,
    pub soft_label_rows: usize,
}

/// distill: trains the toy teacher on the grammar, persists its soft
/// labels, then trains KD and hard-only adapter students for comparison.
pub fn run_distill(config: &PipelineConfig) -> Result<StageArtifacts, RunError> {
    let out_dir = config.output_dir()?.to_path_buf();
    ensure_dir(&out_dir)?;
    let d = &config.distill;
    let seed = config.seed;

    let grammar = MarkovGrammar::generate(d.model.vocab, seed);
    let teacher_corpus = grammar.sample_corpus(d.teacher_corpus, d.context_len, d.target_len, seed + 1);
    let train_corpus = grammar.sample_corpus(d.train_corpus, d.context_len, d.target_len, seed + 2);
    let heldout = grammar.sample_corpus(d.heldout_corpus, d.context_len, d.target_len, seed + 3);

    let teacher_init =
        ToyModelParams::init(d.model, seed + 10).map_err(|e| RunError::runtime("distill", e))?;
    let teacher_settings = TrainSettings {
        steps: d.teacher_steps,
        lr: d.teacher_lr,
        seed: seed + 11,
        ..d.settings
    };
    let (teacher, _) = train_full(teacher_init, &teacher_corpus, &teacher_settings)
        .map_err(|e| RunError::runtime("distill", e))?;

    let store =
        distill_dataset(&teacher, &train_corpus).map_err(|e| RunError::runtime("distill", e))?;
    let store_path = out_dir.join("soft_labels.bin");
    save_store(&store, &store_path).map_err(|e| RunError::runtime("distill", e))?;

    let student =
        ToyModelParams::init(d.model, seed + 20).map_err(|e| RunError::runtime("distill", e))?;
    let adapters = ModelAdapters::zero_init(&student, d.adapter_rank, d.adapter_alpha, seed + 21)
        .map_err(|e| RunError::runtime("distill", e))?;

    let kd_settings = TrainSettings {
        seed: seed + 22,
        ..d.settings
    };
    let (kd_adapters, kd_trajectory) =
        train_adapter(&student, adapters.clone(), &store, &train_corpus, &kd_settings)
            .map_err(|e| RunError::runtime("distill", e))?;
    let hard_settings = TrainSettings {
        alpha: 0.0,
        seed: seed + 22,
        ..d.settings
    };
    let (hard_adapters, hard_trajectory) =
        train_adapter(&student, adapters.clone(), &store, &train_corpus, &hard_settings)
            .map_err(|e| RunError::runtime("distill", e))?;

    let trajectory_path = out_dir.join("loss_trajectory.csv");
    let mut csv = String::from("step,kd_loss,hard_loss\n");
    for (i, (kd, hard)) in kd_trajectory.iter().zip(&hard_trajectory).enumerate() {
        csv.push_str(&format!("{i},{kd},{hard}\n"));
    }
    std::fs::write(&trajectory_path, csv)
        .map_err(|e| RunError::input(format!("{}: {e}", trajectory_path.display())))?;

    let evaluate = |adapters: Option<&ModelAdapters>, params: &ToyModelParams| {
        evaluate_ce(params, adapters, &heldout).map_err(|e| RunError::runtime("distill", e))
    };
    let summary = DistillSummary {
        teacher_heldout_ce: evaluate(None, &teacher)?,
        student_base_heldout_ce: evaluate(None, &student)?,
        kd_heldout_ce: evaluate(Some(&kd_adapters), &student)?,
        hard_only_heldout_ce: evaluate(Some(&hard_adapters), &student)?,
        grammar_entropy: grammar.entropy_on(&heldout),
        adapter_params: kd_adapters.param_count(),
        base_params: student.param_count(),
        soft_label_rows: store.len(),
    };
    let summary_path = out_dir.join("distill_summary.json");
    write_json(&summary_path, &summary)?;
    let meta_path = out_dir.join("run_meta.json");
    write_json(
        &meta_path,
        &RunMetadata::new("distill", config.seed, config.digest()),
    )?;

    Ok(StageArtifacts {
        stage: "distill",
        files: vec![store_path, trajectory_path, summary_path, meta_path],
    })
}

/// Seeded benchmark instance: Gaussian weights and calibration activations,
/// optionally with a few dominant channels.
pub fn quant_instance(
    seed: u64,
    rows: usize,
    cols: usize,
    samples: usize,
    heavy_tailed: bool,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let weights = Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng));
    let mut calibration = Array2::from_shape_fn((samples, cols), |_| normal.sample(&mut rng));
    if heavy_tailed {
        for _ in 0..3 {
            let channel = rng.gen_range(0..cols);
            let gain = rng.gen_range(30.0..80.0);
            calibration.column_mut(channel).mapv_inplace(|v| v * gain);
        }
    }
    (weights, calibration)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantSummary {
    pub instances: usize,
    pub awq_strictly_better: usize,
    pub ties: usize,
    pub mean_rtn_error: f64,
    pub mean_awq_error: f64,
}

/// quantize: RTN-vs-AWQ benchmark over seeded instances; writes the CSV,
/// a summary, and one representative quantized tensor file.
pub fn run_quant(config: &PipelineConfig) -> Result<StageArtifacts, RunError> {
    let out_dir = config.output_dir()?.to_path_buf();
    ensure_dir(&out_dir)?;
    let q = &config.quant;

    let mut csv = String::from("instance,rtn_error,awq_error,alpha\n");
    let mut wins = 0usize;
    let mut ties = 0usize;
    let mut rtn_sum = 0.0;
    let mut awq_sum = 0.0;
    for i in 0..q.instances {
        let (weights, calibration) = quant_instance(
            config.seed.wrapping_add(i as u64),
            q.rows,
            q.cols,
            q.samples,
            q.heavy_tailed,
        );
        let row = benchmark_instance(i, &weights, &calibration, &q.config)
            .map_err(|e| RunError::runtime("quantize", e))?;
        if row.awq_error < row.rtn_error {
            wins += 1;
        } else if row.awq_error == row.rtn_error {
            ties += 1;
        }
        rtn_sum += row.rtn_error;
        awq_sum += row.awq_error;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.instance, row.rtn_error, row.awq_error, row.alpha
        ));
    }
    let csv_path = out_dir.join("benchmark.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| RunError::input(format!("{}: {e}", csv_path.display())))?;

    // One representative tensor in the binary format.
    let (weights, calibration) =
        quant_instance(config.seed, q.rows, q.cols, q.samples, q.heavy_tailed);
    let stats = collect_stats(&calibration).map_err(|e| RunError::runtime("quantize", e))?;
    let awq = awq_quantize(&weights, &stats, &q.config, &calibration)
        .map_err(|e| RunError::runtime("quantize", e))?;
    let tensor_path = out_dir.join("tensor.bin");
    save_tensor(&awq.tensor, &tensor_path).map_err(|e| RunError::runtime("quantize", e))?;

    let summary_path = out_dir.join("quant_summary.json");
    write_json(
        &summary_path,
        &QuantSummary {
            instances: q.instances,
            awq_strictly_better: wins,
            ties,
            mean_rtn_error: rtn_sum / q.instances.max(1) as f64,
            mean_awq_error: awq_sum / q.instances.max(1) as f64,
        },
    )?;
    let meta_path = out_dir.join("run_meta.json");
    write_json(
        &meta_path,
        &RunMetadata::new("quantize", config.seed, config.digest()),
    )?;

    Ok(StageArtifacts {
        stage: "quantize",
        files: vec![csv_path, tensor_path, summary_path, meta_path],
    })
}

/// report: renders a stored report JSON as the aligned text table.
pub fn run_report(report_path: &std::path::Path) -> Result<String, RunError> {
    let contents = std::fs::read_to_string(report_path)
        .map_err(|e| RunError::input(format!("{}: {e}", report_path.display())))?;
    let report: EvalReport = serde_json::from_str(&contents)
        .map_err(|e| RunError::input(format!("{}: {e}", report_path.display())))?;
    let recomputed = report.recompute_average();
    if (recomputed - report.average).abs() > 1e-12 {
        return Err(RunError::runtime(
            "report",
            format!(
                "stored average {} disagrees with recomputation {recomputed}",
                report.average
            ),
        ));
    }
    Ok(report.render_table())
}
