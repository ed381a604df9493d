//! Training loops: soft-label generation, adapter training against the
//! hybrid loss, and full-parameter training for the teacher.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{context_window, TrainingPair};
use super::math::{cross_entropy, hybrid_loss, hybrid_loss_grad, softmax};
use super::model::{
    adapter_grads, backward, ModelAdapters, ModelGrads, ToyModelParams,
};
use super::store::SoftLabelStore;
use super::DistillError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Soft/hard blend weight; 0 is pure hard-label cross entropy.
    pub alpha: f64,
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            alpha: 0.5,
            temperature: 2.0,
            steps: 2_000,
            lr: 0.3,
            batch: 32,
            seed: 0,
        }
    }
}

/// All (pair, target position) coordinates of a corpus, in corpus order.
fn positions(corpus: &[TrainingPair]) -> Vec<(usize, usize)> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(i, pair)| (0..pair.y.len()).map(move |t| (i, t)))
        .collect()
}

/// Runs the teacher over the corpus and persists per-position logits.
/// Rerunning with the same teacher reproduces the store bit-for-bit.
pub fn distill_dataset(
    teacher: &ToyModelParams,
    corpus: &[TrainingPair],
) -> Result<SoftLabelStore, DistillError> {
    for pair in corpus {
        pair.validate(teacher.cfg.vocab)?;
    }
    let eff = teacher.effective(None)?;
    let mut store = SoftLabelStore::new(teacher.cfg.vocab);
    for (pair_index, pair) in corpus.iter().enumerate() {
        for t in 0..pair.y.len() {
            let window = context_window(&teacher.cfg, pair, t);
            store.push(pair_index, t, teacher.logits(&eff, &window));
        }
    }
    Ok(store)
}

/// Mean next-token cross entropy of the (possibly adapted) model over a
/// corpus.
pub fn evaluate_ce(
    params: &ToyModelParams,
    adapters: Option<&ModelAdapters>,
    corpus: &[TrainingPair],
) -> Result<f64, DistillError> {
    let eff = params.effective(adapters)?;
    let coords = positions(corpus);
    if coords.is_empty() {
        return Err(DistillError::EmptyTarget);
    }
    let mut total = 0.0;
    for &(pair_index, t) in &coords {
        let pair = &corpus[pair_index];
        let window = context_window(&params.cfg, pair, t);
        let logits = params.logits(&eff, &window);
        total += cross_entropy(&logits, pair.y[t] as usize);
    }
    Ok(total / coords.len() as f64)
}

/// Trains the adapters against the hybrid loss, leaving the base weights
/// untouched. Returns the trained adapters and the per-step mean loss.
pub fn train_adapter(
    student: &ToyModelParams,
    adapters: ModelAdapters,
    soft_labels: &SoftLabelStore,
    corpus: &[TrainingPair],
    settings: &TrainSettings,
) -> Result<(ModelAdapters, Vec<f64>), DistillError> {
    for pair in corpus {
        pair.validate(student.cfg.vocab)?;
    }
    let coords = positions(corpus);
    if coords.is_empty() {
        return Err(DistillError::EmptyTarget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adapters = adapters;
    let mut trajectory = Vec::with_capacity(settings.steps);

    for step in 0..settings.steps {
        let eff = student.effective(Some(&adapters))?;
        let mut grads = ModelGrads::zeros(student);
        let mut step_loss = 0.0;
        for _ in 0..settings.batch {
            let (pair_index, t) = coords[rng.gen_range(0..coords.len())];
            let pair = &corpus[pair_index];
            let window = context_window(&student.cfg, pair, t);
            let (logits, cache) = student.forward(&eff, &window);
            let logits_vec = logits.to_vec();
            let teacher_logits = soft_labels
                .logits_at(pair_index, t)
                .ok_or(DistillError::MissingSoftLabels { pair_index, position: t })?;
            let target = pair.y[t] as usize;
            step_loss += hybrid_loss(
                &logits_vec,
                teacher_logits,
                target,
                settings.alpha,
                settings.temperature,
            )?;
            let dlogits = Array1::from(hybrid_loss_grad(
                &logits_vec,
                teacher_logits,
                target,
                settings.alpha,
                settings.temperature,
            )?);
            backward(student, &eff, &cache, &dlogits, &mut grads);
        }
        let mean_loss = step_loss / settings.batch as f64;
        if !mean_loss.is_finite() {
            return Err(DistillError::DivergenceDetected { step });
        }
        trajectory.push(mean_loss);

        grads.scale(1.0 / settings.batch as f64);
        let (da1, db1) = adapter_grads(&adapters.w1, &grads.w1);
        let (da2, db2) = adapter_grads(&adapters.w2, &grads.w2);
        adapters.w1.a -= &(da1 * settings.lr);
        adapters.w1.b -= &(db1 * settings.lr);
        adapters.w2.a -= &(da2 * settings.lr);
        adapters.w2.b -= &(db2 * settings.lr);
    }
    Ok((adapters, trajectory))
}

/// Full-parameter training on hard labels; used to fit the teacher to the
/// grammar before distillation.
pub fn train_full(
    params: ToyModelParams,
    corpus: &[TrainingPair],
    settings: &TrainSettings,
) -> Result<(ToyModelParams, Vec<f64>), DistillError> {
    for pair in corpus {
        pair.validate(params.cfg.vocab)?;
    }
    let coords = positions(corpus);
    if coords.is_empty() {
        return Err(DistillError::EmptyTarget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut params = params;
    let mut trajectory = Vec::with_capacity(settings.steps);

    for step in 0..settings.steps {
        let eff = params.effective(None)?;
        let mut grads = ModelGrads::zeros(&params);
        let mut step_loss = 0.0;
        for _ in 0..settings.batch {
            let (pair_index, t) = coords[rng.gen_range(0..coords.len())];
            let pair = &corpus[pair_index];
            let window = context_window(&params.cfg, pair, t);
            let (logits, cache) = params.forward(&eff, &window);
            let logits_vec = logits.to_vec();
            let target = pair.y[t] as usize;
            step_loss += cross_entropy(&logits_vec, target);
            let probs = softmax(&logits_vec);
            let dlogits = Array1::from_iter(
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| p - if i == target { 1.0 } else { 0.0 }),
            );
            backward(&params, &eff, &cache, &dlogits, &mut grads);
        }
        let mean_loss = step_loss / settings.batch as f64;
        if !mean_loss.is_finite() {
            return Err(DistillError::DivergenceDetected { step });
        }
        trajectory.push(mean_loss);

        grads.scale(settings.lr / settings.batch as f64);
        params.embedding -= &grads.embedding;
        params.w1 -= &grads.w1;
        params.b1 -= &grads.b1;
        params.w2 -= &grads.w2;
        params.b2 -= &grads.b2;
    }
    Ok((params, trajectory))
}
