//! The toy autoregressive next-token model and its low-rank adapters.
//!
//! A fixed context window of token embeddings feeds one tanh hidden layer
//! and an output projection over the vocabulary. Small enough that analytic
//! gradients stay hand-checkable against finite differences, big enough to
//! learn the synthetic grammar.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DistillError;

/// Maximum vocabulary the toy model supports.
pub const MAX_VOCAB: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of real tokens; the BOS padding token lives at index `vocab`.
    pub vocab: usize,
    /// Context window length in tokens.
    pub context: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.vocab == 0 || self.vocab > MAX_VOCAB {
            return Err(DistillError::BadModelConfig {
                reason: format!("vocab {} outside 1..={MAX_VOCAB}", self.vocab),
            });
        }
        if self.context == 0 || self.d_embed == 0 || self.d_hidden == 0 {
            return Err(DistillError::BadModelConfig {
                reason: "zero-sized dimension".to_string(),
            });
        }
        Ok(())
    }

    /// Token id used to left-pad short contexts.
    pub fn bos(&self) -> u32 {
        self.vocab as u32
    }

    fn input_dim(&self) -> usize {
        self.context * self.d_embed
    }
}

/// Base weights. Frozen during adapter training; only full
/// (teacher) training updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub cfg: ModelConfig,
    /// (vocab + 1) x d_embed; the extra row is BOS.
    pub embedding: Array2<f64>,
    /// d_hidden x (context * d_embed)
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// vocab x d_hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ToyModelParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, DistillError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian = |rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, scale).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        Ok(ToyModelParams {
            embedding: gaussian(cfg.vocab + 1, cfg.d_embed, 0.5, &mut rng),
            w1: gaussian(cfg.d_hidden, cfg.input_dim(), 1.0 / (cfg.input_dim() as f64).sqrt(), &mut rng),
            b1: Array1::zeros(cfg.d_hidden),
            w2: gaussian(cfg.vocab, cfg.d_hidden, 1.0 / (cfg.d_hidden as f64).sqrt(), &mut rng),
            b2: Array1::zeros(cfg.vocab),
            cfg,
        })
    }

    /// Total base parameter count.
    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Trainable rank-r decomposition added onto one frozen matrix:
/// `W_eff = W0 + (alpha / r) * B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// r x d_in
    pub a: Array2<f64>,
    /// d_out x r
    pub b: Array2<f64>,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankAdapter {
    /// B starts at zero and A at a small Gaussian, so training starts
    /// exactly at the base weights.
    pub fn zero_init(
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, DistillError> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(DistillError::BadRank {
                rank,
                d_out,
                d_in,
            });
        }
        let dist = Normal::new(0.0, 0.02).unwrap();
        Ok(LowRankAdapter {
            a: Array2::from_shape_fn((rank, d_in), |_| dist.sample(rng)),
            b: Array2::zeros((d_out, rank)),
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense update `(alpha / r) * B * A`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scaling()
    }

    /// Trainable parameters: `r * (d_out + d_in)`.
    pub fn param_count(&self) -> usize {
        self.rank * (self.b.nrows() + self.a.ncols())
    }
}

/// `W0 + (alpha / r) * B * A`, checking shape compatibility.
pub fn lora_effective(
    w0: &Array2<f64>,
    adapter: &LowRankAdapter,
) -> Result<Array2<f64>, DistillError> {
    if adapter.b.nrows() != w0.nrows()
        || adapter.a.ncols() != w0.ncols()
        || adapter.b.ncols() != adapter.rank
        || adapter.a.nrows() != adapter.rank
    {
        return Err(DistillError::ShapeMismatch {
            expected: (w0.nrows(), w0.ncols()),
            got: (adapter.b.nrows(), adapter.a.ncols()),
        });
    }
    Ok(w0 + &adapter.delta())
}

/// Adapters for the two dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAdapters {
    pub w1: LowRankAdapter,
    pub w2: LowRankAdapter,
}

impl ModelAdapters {
    pub fn zero_init(
        params: &ToyModelParams,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, DistillError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelAdapters {
            w1: LowRankAdapter::zero_init(
                params.w1.nrows(),
                params.w1.ncols(),
                rank,
                alpha,
                &mut rng,
            )?,
            w2: LowRankAdapter::zero_init(
                params.w2.nrows(),
                params.w2.ncols(),
                rank,
                alpha,
                &mut rng,
            )?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.param_count() + self.w2.param_count()
    }
}

/// Dense layer weights with any adapters folded in; computed once per
/// training step.
#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl ToyModelParams {
    pub fn effective(&self, adapters: Option<&ModelAdapters>) -> Result<EffectiveWeights, DistillError> {
        match adapters {
            None => Ok(EffectiveWeights {
                w1: self.w1.clone(),
                w2: self.w2.clone(),
            }),
            Some(ad) => Ok(EffectiveWeights {
                w1: lora_effective(&self.w1, &ad.w1)?,
                w2: lora_effective(&self.w2, &ad.w2)?,
            }),
        }
    }

    /// Logits for the next token after `context` (exactly `cfg.context`
    /// token ids, BOS-padded by the caller).
    pub fn forward(&self, eff: &EffectiveWeights, context: &[u32]) -> (Array1<f64>, ForwardCache) {
        debug_assert_eq!(context.len(), self.cfg.context);
        let mut input = Array1::zeros(self.cfg.input_dim());
        for (slot, &token) in context.iter().enumerate() {
            let row = self.embedding.row(token as usize);
            input
                .slice_mut(ndarray::s![slot * self.cfg.d_embed..(slot + 1) * self.cfg.d_embed])
                .assign(&row);
        }
        let pre1 = eff.w1.dot(&input) + &self.b1;
        let hidden = pre1.mapv(f64::tanh);
        let logits = eff.w2.dot(&hidden) + &self.b2;
        (
            logits,
            ForwardCache {
                context: context.to_vec(),
                input,
                hidden,
            },
        )
    }

    pub fn logits(&self, eff: &EffectiveWeights, context: &[u32]) -> Vec<f64> {
        self.forward(eff, context).0.to_vec()
    }
}

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub context: Vec<u32>,
    pub input: Array1<f64>,
    pub hidden: Array1<f64>,
}

/// Gradients with respect to the effective dense weights, biases, and
/// embedding rows. Zero-initialized and accumulated in a fixed order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embedding: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ModelGrads {
    pub fn zeros(params: &ToyModelParams) -> Self {
        ModelGrads {
            embedding: Array2::zeros(params.embedding.raw_dim()),
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array1::zeros(params.b1.raw_dim()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array1::zeros(params.b2.raw_dim()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.embedding *= factor;
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }
}

/// Accumulates one position's gradients into `grads`, given the loss
/// gradient with respect to the logits.
pub fn backward(
    params: &ToyModelParams,
    eff: &EffectiveWeights,
    cache: &ForwardCache,
    dlogits: &Array1<f64>,
    grads: &mut ModelGrads,
) {
    let d = params.cfg.d_embed;
    grads.b2 += dlogits;
    grads.w2 += &outer(dlogits, &cache.hidden);
    let dhidden = eff.w2.t().dot(dlogits);
    let dpre1 = &dhidden * &cache.hidden.mapv(|h| 1.0 - h * h);
    grads.b1 += &dpre1;
    grads.w1 += &outer(&dpre1, &cache.input);
    let dinput = eff.w1.t().dot(&dpre1);
    for (slot, &token) in cache.context.iter().enumerate() {
        let mut row = grads.embedding.row_mut(token as usize);
        row += &dinput.slice(ndarray::s![slot * d..(slot + 1) * d]);
    }
}

fn outer(column: &Array1<f64>, row: &Array1<f64>) -> Array2<f64> {
    let c = column.view().insert_axis(Axis(1));
    let r = row.view().insert_axis(Axis(0));
    c.dot(&r)
}

/// Gradients of the adapter factors from the effective-weight gradient:
/// `dA = s * Bᵀ dW`, `dB = s * dW Aᵀ` with `s = alpha / r`.
pub fn adapter_grads(adapter: &LowRankAdapter, d_w_eff: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let s = adapter.scaling();
    let d_a = adapter.b.t().dot(d_w_eff) * s;
    let d_b = d_w_eff.dot(&adapter.a.t()) * s;
    (d_a, d_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::math::{cross_entropy, hybrid_loss, hybrid_loss_grad};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 7,
            context: 3,
            d_embed: 4,
            d_hidden: 6,
        }
    }

    #[test]
    fn zero_adapter_leaves_forward_bit_identical() {
        let params = ToyModelParams::init(small_cfg(), 1).unwrap();
        let adapters = ModelAdapters::zero_init(&params, 2, 8.0, 2).unwrap();
        let base = params.effective(None).unwrap();
        let adapted = params.effective(Some(&adapters)).unwrap();
        let context = [params.cfg.bos(), 1, 2];
        let base_logits = params.logits(&base, &context);
        let adapted_logits = params.logits(&adapted, &context);
        assert_eq!(base_logits, adapted_logits);
    }

    #[test]
    fn adapter_param_count_formula() {
        let params = ToyModelParams::init(small_cfg(), 1).unwrap();
        let adapters = ModelAdapters::zero_init(&params, 2, 8.0, 2).unwrap();
        // w1: 6 x 12, w2: 7 x 6, rank 2.
        assert_eq!(adapters.w1.param_count(), 2 * (6 + 12));
        assert_eq!(adapters.w2.param_count(), 2 * (7 + 6));
        assert_eq!(adapters.param_count(), 36 + 26);
        assert!(adapters.param_count() < params.param_count());
    }

    #[test]
    fn square_adapter_counts_half_of_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = LowRankAdapter::zero_init(8, 8, 2, 2.0, &mut rng).unwrap();
        assert_eq!(adapter.param_count(), 32);
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LowRankAdapter::zero_init(4, 8, 5, 1.0, &mut rng).is_err());
        assert!(LowRankAdapter::zero_init(4, 8, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn lora_effective_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = LowRankAdapter::zero_init(4, 8, 2, 1.0, &mut rng).unwrap();
        let w0 = Array2::<f64>::zeros((4, 9));
        assert!(matches!(
            lora_effective(&w0, &adapter),
            Err(DistillError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn full_rank_adapter_reproduces_target_delta() {
        // With r = d_in and A square invertible, B = (r/alpha) * delta * A^-1
        // reconstructs delta exactly; solve with Gaussian elimination.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d_out, d_in) = (6, 5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let delta = Array2::from_shape_fn((d_out, d_in), |_| normal.sample(&mut rng));
        let a = Array2::from_shape_fn((d_in, d_in), |(i, j)| {
            normal.sample(&mut rng) + if i == j { 3.0 } else { 0.0 }
        });
        let alpha = 2.0;
        let rank = d_in;
        // Solve X * A = (r/alpha) * delta  =>  Aᵀ Xᵀ = (r/alpha) deltaᵀ.
        let target = delta.t().to_owned() * (rank as f64 / alpha);
        let b_t = solve_multi(&a.t().to_owned(), &target);
        let adapter = LowRankAdapter {
            a: a.clone(),
            b: b_t.t().to_owned(),
            rank,
            alpha,
        };
        let w0 = Array2::from_shape_fn((d_out, d_in), |_| normal.sample(&mut rng));
        let target_w = &w0 + &delta;
        let fitted = lora_effective(&w0, &adapter).unwrap();
        let err = (&fitted - &target_w).mapv(|x| x * x).sum().sqrt();
        assert!(err < 1e-6, "Frobenius error {err}");
    }

    /// Solves M X = Y column by column with partial-pivot Gaussian
    /// elimination; test-only oracle helper.
    fn solve_multi(m: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let n = m.nrows();
        let cols = y.ncols();
        let mut aug = Array2::<f64>::zeros((n, n + cols));
        aug.slice_mut(ndarray::s![.., ..n]).assign(m);
        aug.slice_mut(ndarray::s![.., n..]).assign(y);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[[i, col]].abs().partial_cmp(&aug[[j, col]].abs()).unwrap())
                .unwrap();
            if pivot != col {
                for k in 0..n + cols {
                    aug.swap([col, k], [pivot, k]);
                }
            }
            let p = aug[[col, col]];
            for k in col..n + cols {
                aug[[col, k]] /= p;
            }
            for row in 0..n {
                if row != col {
                    let factor = aug[[row, col]];
                    for k in col..n + cols {
                        aug[[row, k]] -= factor * aug[[col, k]];
                    }
                }
            }
        }
        aug.slice(ndarray::s![.., n..]).to_owned()
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let params = ToyModelParams::init(small_cfg(), 3).unwrap();
        let mut adapters = ModelAdapters::zero_init(&params, 2, 4.0, 4).unwrap();
        // Perturb B so the adapter path is active in the gradient.
        let normal = Normal::new(0.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        adapters.w1.b.mapv_inplace(|_| normal.sample(&mut rng));
        adapters.w2.b.mapv_inplace(|_| normal.sample(&mut rng));

        let context = [1u32, 4, params.cfg.bos()];
        let teacher: Vec<f64> = (0..params.cfg.vocab)
            .map(|i| (i as f64 * 0.7).sin())
            .collect();
        let target = 3usize;
        let (alpha, temperature) = (0.5, 2.0);

        let loss_fn = |ad: &ModelAdapters| {
            let eff = params.effective(Some(ad)).unwrap();
            let logits = params.logits(&eff, &context);
            hybrid_loss(&logits, &teacher, target, alpha, temperature).unwrap()
        };

        // Analytic gradients via backward + adapter_grads.
        let eff = params.effective(Some(&adapters)).unwrap();
        let (logits, cache) = params.forward(&eff, &context);
        let dlogits = Array1::from(
            hybrid_loss_grad(&logits.to_vec(), &teacher, target, alpha, temperature).unwrap(),
        );
        let mut grads = ModelGrads::zeros(&params);
        backward(&params, &eff, &cache, &dlogits, &mut grads);
        let (da1, db1) = adapter_grads(&adapters.w1, &grads.w1);
        let (da2, db2) = adapter_grads(&adapters.w2, &grads.w2);

        let h = 1e-5;
        let check = |analytic: &Array2<f64>, select: &dyn Fn(&mut ModelAdapters) -> &mut Array2<f64>| {
            let mut max_rel: f64 = 0.0;
            let dims = analytic.raw_dim();
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    let mut plus = adapters.clone();
                    select(&mut plus)[[i, j]] += h;
                    let mut minus = adapters.clone();
                    select(&mut minus)[[i, j]] -= h;
                    let numeric = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
                    let denom = numeric.abs().max(1e-6);
                    max_rel = max_rel.max((analytic[[i, j]] - numeric).abs() / denom);
                }
            }
            assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
        };
        check(&da1, &|ad| &mut ad.w1.a);
        check(&db1, &|ad| &mut ad.w1.b);
        check(&da2, &|ad| &mut ad.w2.a);
        check(&db2, &|ad| &mut ad.w2.b);
    }

    #[test]
    fn ce_gradient_direction_reduces_loss() {
        let params = ToyModelParams::init(small_cfg(), 8).unwrap();
        let eff = params.effective(None).unwrap();
        let context = [0u32, 1, 2];
        let (logits, cache) = params.forward(&eff, &context);
        let target = 2usize;
        let before = cross_entropy(&logits.to_vec(), target);

        let probs = crate::distill::math::softmax(&logits.to_vec());
        let dlogits = Array1::from_iter(
            probs
                .iter()
                .enumerate()
                .map(|(i, &p)| p - if i == target { 1.0 } else { 0.0 }),
        );
        let mut grads = ModelGrads::zeros(&params);
        backward(&params, &eff, &cache, &dlogits, &mut grads);

        let mut stepped = params.clone();
        let lr = 0.1;
        stepped.w1 = &stepped.w1 - &(grads.w1.clone() * lr);
        stepped.w2 = &stepped.w2 - &(grads.w2.clone() * lr);
        stepped.b1 = &stepped.b1 - &(grads.b1.clone() * lr);
        stepped.b2 = &stepped.b2 - &(grads.b2.clone() * lr);
        stepped.embedding = &stepped.embedding - &(grads.embedding.clone() * lr);
        let eff2 = stepped.effective(None).unwrap();
        let after = cross_entropy(&stepped.logits(&eff2, &context), target);
        assert!(after < before, "step should reduce CE: {before} -> {after}");
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ToyModelParams::init(small_cfg(), 13).unwrap();
        let eff = params.effective(None).unwrap();
        let context = [5u32, 6, 0];
        assert_eq!(params.logits(&eff, &context), params.logits(&eff, &context));
    }

    #[test]
    fn vocab_cap_enforced() {
        let cfg = ModelConfig {
            vocab: MAX_VOCAB + 1,
            context: 2,
            d_embed: 2,
            d_hidden: 2,
        };
        assert!(ToyModelParams::init(cfg, 0).is_err());
    }
}
