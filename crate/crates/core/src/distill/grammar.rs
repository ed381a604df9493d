//! Synthetic first-order Markov grammar used as the distillation task.
//!
//! Each token has a sparse, seeded next-token distribution, so the true
//! conditionals are stochastic: hard samples estimate them noisily while a
//! well-trained teacher's soft labels carry the full distribution.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use super::DistillError;

/// One training example: context tokens `x` and target tokens `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl TrainingPair {
    pub fn validate(&self, vocab: usize) -> Result<(), DistillError> {
        if self.y.is_empty() {
            return Err(DistillError::EmptyTarget);
        }
        if self
            .x
            .iter()
            .chain(self.y.iter())
            .any(|&t| t as usize >= vocab)
        {
            return Err(DistillError::TokenOutOfVocab);
        }
        Ok(())
    }
}

/// First-order Markov chain over the vocabulary, with a dedicated start
/// state for the first token.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGrammar {
    pub vocab: usize,
    /// (vocab + 1) x vocab row-stochastic matrix; row `vocab` is the start
    /// state.
    pub transitions: Array2<f64>,
}

impl MarkovGrammar {
    /// Builds a seeded grammar where every state allows 2..=3 successors
    /// with random weights.
    pub fn generate(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = Array2::zeros((vocab + 1, vocab));
        for state in 0..=vocab {
            let successors = rng.gen_range(2..=3.min(vocab));
            let mut chosen = Vec::with_capacity(successors);
            while chosen.len() < successors {
                let t = rng.gen_range(0..vocab);
                if !chosen.contains(&t) {
                    chosen.push(t);
                }
            }
            let weights: Vec<f64> = (0..successors).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (&token, &w) in chosen.iter().zip(&weights) {
                transitions[[state, token]] = w / total;
            }
        }
        MarkovGrammar { vocab, transitions }
    }

    fn start_state(&self) -> usize {
        self.vocab
    }

    /// True next-token distribution after `previous` (None = sequence start).
    pub fn conditional(&self, previous: Option<u32>) -> Vec<f64> {
        let state = previous.map_or(self.start_state(), |t| t as usize);
        self.transitions.row(state).to_vec()
    }

    fn sample_next(&self, state: usize, rng: &mut ChaCha8Rng) -> u32 {
        let row = self.transitions.row(state);
        let mut draw = rng.gen::<f64>();
        let mut last = 0u32;
        for (token, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            if draw < p {
                return token as u32;
            }
            draw -= p;
            last = token as u32;
        }
        last
    }

    pub fn sample_sequence(&self, length: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut sequence = Vec::with_capacity(length);
        let mut state = self.start_state();
        for _ in 0..length {
            let token = self.sample_next(state, rng);
            sequence.push(token);
            state = token as usize;
        }
        sequence
    }

    /// Samples a corpus of (x, y) pairs: `x_len` context tokens followed by
    /// `y_len` target tokens from one continuous sequence.
    pub fn sample_corpus(
        &self,
        pairs: usize,
        x_len: usize,
        y_len: usize,
        seed: u64,
    ) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pairs)
            .map(|_| {
                let seq = self.sample_sequence(x_len + y_len, &mut rng);
                TrainingPair {
                    x: seq[..x_len].to_vec(),
                    y: seq[x_len..].to_vec(),
                }
            })
            .collect()
    }

    /// Mean cross-entropy of the true conditionals on a corpus: the
    /// best achievable held-out CE for this grammar.
    pub fn entropy_on(&self, corpus: &[TrainingPair]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for pair in corpus {
            let stream: Vec<u32> = pair.x.iter().chain(pair.y.iter()).copied().collect();
            for t in 0..pair.y.len() {
                let position = pair.x.len() + t;
                let previous = position.checked_sub(1).map(|p| stream[p]);
                let p = self.conditional(previous)[pair.y[t] as usize];
                total -= p.ln();
                count += 1;
            }
        }
        total / count as f64
    }
}

/// The model context window ending just before target position `t` of the
/// pair, BOS-padded on the left.
pub fn context_window(cfg: &ModelConfig, pair: &TrainingPair, t: usize) -> Vec<u32> {
    let stream: Vec<u32> = pair.x.iter().chain(pair.y.iter()).copied().collect();
    let position = pair.x.len() + t;
    let mut window = Vec::with_capacity(cfg.context);
    for back in (1..=cfg.context).rev() {
        window.push(if position >= back {
            stream[position - back]
        } else {
            cfg.bos()
        });
    }
    window
}
