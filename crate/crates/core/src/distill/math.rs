//! Distribution math for distillation: KL divergence, softmax/cross-entropy,
//! and the soft/hard hybrid loss with its analytic gradient.

use super::DistillError;

/// A normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probabilities: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self, DistillError> {
        if probabilities.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(DistillError::NotADistribution {
                reason: "negative or non-finite probability".to_string(),
            });
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DistillError::NotADistribution {
                reason: format!("probabilities sum to {total}"),
            });
        }
        Ok(TokenDistribution { probabilities })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        TokenDistribution {
            probabilities: softmax(logits),
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// KL divergence `D(P || Q) = Σ P(i) ln(P(i)/Q(i))`, natural log, with the
/// `0·ln(0/q) = 0` convention. Errors when P puts mass where Q has none.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64, DistillError> {
    if p.len() != q.len() {
        return Err(DistillError::VocabularyMismatch {
            p: p.len(),
            q: q.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p
        .probabilities
        .iter()
        .zip(q.probabilities.iter())
        .enumerate()
    {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(DistillError::SupportMismatch { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(softmax(logits))` without forming intermediate probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|&l| (l - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l - log_sum).collect()
}

/// Cross-entropy of the true index under the logits: `-log softmax[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// Soft/hard hybrid distillation loss.
///
/// `alpha · T² · KL(softmax(teacher/T) || softmax(student/T))
///  + (1 - alpha) · CE(student, hard_label)`
///
/// The T² factor keeps the soft-label gradient magnitude comparable across
/// temperatures. Softmax smooths both supports, so the KL term is total.
pub fn hybrid_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    hard_label: usize,
    alpha: f64,
    temperature: f64,
) -> Result<f64, DistillError> {
    if student_logits.len() != teacher_logits.len() {
        return Err(DistillError::VocabularyMismatch {
            p: teacher_logits.len(),
            q: student_logits.len(),
        });
    }
    if hard_label >= student_logits.len() {
        return Err(DistillError::BadHardLabel {
            index: hard_label,
            vocab: student_logits.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) || temperature <= 0.0 {
        return Err(DistillError::BadHyperparameter { alpha, temperature });
    }

    let t = temperature;
    let teacher_soft: Vec<f64> = teacher_logits.iter().map(|&l| l / t).collect();
    let student_soft: Vec<f64> = student_logits.iter().map(|&l| l / t).collect();
    // KL in log space: log-softmax stays finite even where softmax itself
    // would underflow to zero, keeping this loss total.
    let log_p = log_softmax(&teacher_soft);
    let log_q = log_softmax(&student_soft);
    let kl: f64 = log_p
        .iter()
        .zip(&log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum();
    let ce = cross_entropy(student_logits, hard_label);
    Ok(alpha * t * t * kl + (1.0 - alpha) * ce)
}

/// Analytic gradient of [`hybrid_loss`] with respect to the student logits:
/// `alpha · T · (q - p) + (1 - alpha) · (softmax(student) - onehot)`.
pub fn hybrid_loss_grad(
    student_logits: &[f64],
    teacher_logits: &[f64],
    hard_label: usize,
    alpha: f64,
    temperature: f64,
) -> Result<Vec<f64>, DistillError> {
    if student_logits.len() != teacher_logits.len() {
        return Err(DistillError::VocabularyMismatch {
            p: teacher_logits.len(),
            q: student_logits.len(),
        });
    }
    if hard_label >= student_logits.len() {
        return Err(DistillError::BadHardLabel {
            index: hard_label,
            vocab: student_logits.len(),
        });
    }
    let t = temperature;
    let p = softmax(&teacher_logits.iter().map(|&l| l / t).collect::<Vec<_>>());
    let q = softmax(&student_logits.iter().map(|&l| l / t).collect::<Vec<_>>());
    let s = softmax(student_logits);
    Ok((0..student_logits.len())
        .map(|i| {
            let hard = if i == hard_label { 1.0 } else { 0.0 };
            alpha * t * (q[i] - p[i]) + (1.0 - alpha) * (s[i] - hard)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = TokenDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        let p = TokenDistribution::new(vec![1.0, 0.0]).unwrap();
        let q = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), 2.0f64.ln(), epsilon = 1e-12);

        let p = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        let q = TokenDistribution::new(vec![0.9, 0.1]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.5108, epsilon = 5e-5);
    }

    #[test]
    fn kl_support_mismatch_is_an_error() {
        let p = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        let q = TokenDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(DistillError::SupportMismatch { index: 1 })
        ));
    }

    #[test]
    fn kl_is_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2_000 {
            let n = rng.gen_range(2..16);
            let p = random_distribution(&mut rng, n);
            let q = random_distribution(&mut rng, n);
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= 0.0, "KL must be non-negative, got {kl}");
        }
    }

    fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> TokenDistribution {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        TokenDistribution::new(raw.into_iter().map(|x| x / total).collect()).unwrap()
    }

    #[test]
    fn hybrid_loss_zero_at_matching_logits_with_pure_kl() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let loss = hybrid_loss(&logits, &logits, 0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hybrid_loss_alpha_zero_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let student: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let teacher: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let target = rng.gen_range(0..n);
            let loss = hybrid_loss(&student, &teacher, target, 0.0, 2.0).unwrap();
            assert_abs_diff_eq!(loss, cross_entropy(&student, target), epsilon = 1e-12);
        }
    }

    #[test]
    fn hybrid_loss_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-5;
        for _ in 0..50 {
            let n = rng.gen_range(3..10);
            let mut student: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let teacher: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let target = rng.gen_range(0..n);
            let alpha = rng.gen_range(0.0..=1.0);
            let temperature = rng.gen_range(0.5..4.0);

            let analytic =
                hybrid_loss_grad(&student, &teacher, target, alpha, temperature).unwrap();
            let mut numeric = vec![0.0; n];
            for i in 0..n {
                let orig = student[i];
                student[i] = orig + h;
                let plus = hybrid_loss(&student, &teacher, target, alpha, temperature).unwrap();
                student[i] = orig - h;
                let minus = hybrid_loss(&student, &teacher, target, alpha, temperature).unwrap();
                student[i] = orig;
                numeric[i] = (plus - minus) / (2.0 * h);
            }
            let diff_norm: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let ref_norm: f64 = numeric.iter().map(|g| g.powi(2)).sum::<f64>().sqrt();
            assert!(
                diff_norm <= 1e-4 * ref_norm.max(1e-8),
                "gradient mismatch: {diff_norm} vs norm {ref_norm}"
            );
        }
    }

    #[test]
    fn hybrid_loss_is_total_at_extreme_logits() {
        // Softmax of these underflows to exact zeros; the loss must still
        // come out finite rather than erroring on support.
        let student = vec![0.0, -4000.0, 9.0];
        let teacher = vec![-4000.0, 3.0, 0.5];
        let loss = hybrid_loss(&student, &teacher, 1, 0.7, 1.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn hybrid_loss_continuous_in_alpha() {
        let student = vec![0.2, -0.5, 1.0];
        let teacher = vec![0.1, 0.3, -0.2];
        let mut previous = hybrid_loss(&student, &teacher, 1, 0.0, 2.0).unwrap();
        for step in 1..=100 {
            let alpha = step as f64 / 100.0;
            let current = hybrid_loss(&student, &teacher, 1, alpha, 2.0).unwrap();
            assert!((current - previous).abs() < 0.1);
            previous = current;
        }
    }
}
