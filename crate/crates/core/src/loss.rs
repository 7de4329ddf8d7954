//! Contrastive ranking loss, KL self-learning loss, and their analytic
//! gradients with respect to the similarity scores.

use crate::error::{Error, Result};

/// Similarity scores for one query: the positive first, then negatives
/// (explicit negatives followed by in-batch negatives).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub positive_score: f64,
    pub negative_scores: Vec<f64>,
}

impl SimilarityRow {
    pub fn new(positive_score: f64, negative_scores: Vec<f64>) -> Result<Self> {
        if negative_scores.is_empty() {
            return Err(Error::InvalidArgument(
                "similarity row needs at least one negative".into(),
            ));
        }
        for s in std::iter::once(&positive_score).chain(&negative_scores) {
            if !s.is_finite() {
                return Err(Error::InvalidArgument("non-finite similarity score".into()));
            }
        }
        Ok(Self {
            positive_score,
            negative_scores,
        })
    }

    pub fn arity(&self) -> usize {
        1 + self.negative_scores.len()
    }

    fn scores(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.arity());
        s.push(self.positive_score);
        s.extend_from_slice(&self.negative_scores);
        s
    }
}

/// Per-row loss terms; `combined == rank_loss + lambda_kl * kl_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rank_loss: f64,
    pub kl_loss: f64,
    pub combined: f64,
    pub lambda_kl: f64,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Softmax over [positive, negatives...], max-subtracted for overflow safety.
pub fn softmax_distribution(row: &SimilarityRow) -> Vec<f64> {
    softmax(&row.scores())
}

/// Eq-style contrastive loss: -log softmax probability of the positive.
pub fn rank_loss(row: &SimilarityRow) -> f64 {
    let scores = row.scores();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    -(row.positive_score - max - log_sum)
}

/// D_KL(softmax(masked) || softmax(unmasked)); rows must share candidate order.
pub fn kl_loss(masked: &SimilarityRow, unmasked: &SimilarityRow) -> Result<f64> {
    if masked.arity() != unmasked.arity() {
        return Err(Error::InvalidArgument(format!(
            "row arity mismatch: {} vs {}",
            masked.arity(),
            unmasked.arity()
        )));
    }
    let p = softmax_distribution(masked);
    let q = softmax_distribution(unmasked);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    // clamp tiny negative float noise
    Ok(kl.max(0.0))
}

/// Rank loss on the masked row plus `lambda_kl` times the KL term.
pub fn combined_loss(
    masked: &SimilarityRow,
    unmasked: &SimilarityRow,
    lambda_kl: f64,
) -> Result<LossBreakdown> {
    if lambda_kl < 0.0 {
        return Err(Error::InvalidArgument("lambda_kl must be >= 0".into()));
    }
    let rank = rank_loss(masked);
    let kl = kl_loss(masked, unmasked)?;
    Ok(LossBreakdown {
        rank_loss: rank,
        kl_loss: kl,
        combined: rank + lambda_kl * kl,
        lambda_kl,
    })
}

/// Gradients of [`combined_loss`] with respect to every score, in
/// [positive, negatives...] order for each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub masked: Vec<f64>,
    pub unmasked: Vec<f64>,
}

pub fn loss_gradients(
    masked: &SimilarityRow,
    unmasked: &SimilarityRow,
    lambda_kl: f64,
    stop_gradient_unmasked: bool,
) -> Result<LossGradients> {
    if masked.arity() != unmasked.arity() {
        return Err(Error::InvalidArgument(format!(
            "row arity mismatch: {} vs {}",
            masked.arity(),
            unmasked.arity()
        )));
    }
    if lambda_kl < 0.0 {
        return Err(Error::InvalidArgument("lambda_kl must be >= 0".into()));
    }
    let n = masked.arity();
    let p = softmax_distribution(masked);
    let q = softmax_distribution(unmasked);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();

    let mut grad_masked = vec![0.0; n];
    let mut grad_unmasked = vec![0.0; n];
    for i in 0..n {
        // rank loss: softmax cross-entropy with the positive at index 0
        let rank_grad = p[i] - if i == 0 { 1.0 } else { 0.0 };
        // d KL / d masked_i = p_i * (log(p_i/q_i) - KL)
        let kl_grad_masked = p[i] * ((p[i] / q[i]).ln() - kl);
        grad_masked[i] = rank_grad + lambda_kl * kl_grad_masked;
        // d KL / d unmasked_i = q_i - p_i
        if !stop_gradient_unmasked {
            grad_unmasked[i] = lambda_kl * (q[i] - p[i]);
        }
    }
    Ok(LossGradients {
        masked: grad_masked,
        unmasked: grad_unmasked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(pos: f64, negs: &[f64]) -> SimilarityRow {
        SimilarityRow::new(pos, negs.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_when_scores_equal() {
        let p = softmax_distribution(&row(1.0, &[1.0, 1.0, 1.0]));
        assert_eq!(p.len(), 4);
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_scalar_oracle() {
        let p = softmax_distribution(&row(1.0, &[0.0]));
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731059).abs() < 1e-6);
        assert!((p[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = row(2.0, &[0.5, -1.0]);
        let b = row(2.0 + 123.0, &[0.5 + 123.0, -1.0 + 123.0]);
        let (pa, pb) = (softmax_distribution(&a), softmax_distribution(&b));
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_loss_uniform_case() {
        let l = rank_loss(&row(0.0, &[0.0, 0.0, 0.0]));
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn rank_loss_vanishes_with_large_gap() {
        let l = rank_loss(&row(50.0, &[0.0, 0.0]));
        assert!(l < 1e-20);
    }

    #[test]
    fn rank_loss_derived_value() {
        // -ln(e^2 / (e^2 + e^1 + e^0))
        let l = rank_loss(&row(2.0, &[1.0, 0.0]));
        assert!((l - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn kl_identity_is_zero() {
        let r = row(1.3, &[0.2, -0.7]);
        assert!(kl_loss(&r, &r).unwrap() <= 1e-12);
    }

    #[test]
    fn kl_derived_value() {
        // logits chosen so p = [0.5, 0.5], q = [0.8, 0.2]
        let masked = row(0.0, &[0.0]);
        let unmasked = row(0.8f64.ln(), &[0.2f64.ln()]);
        let kl = kl_loss(&masked, &unmasked).unwrap();
        // 0.5 ln(0.5/0.8) + 0.5 ln(0.5/0.2) = ln(1.25)
        assert!((kl - 1.25f64.ln()).abs() < 1e-12);
        assert!((kl - 0.223144).abs() < 1e-6);
    }

    #[test]
    fn kl_arity_mismatch_is_error() {
        assert!(kl_loss(&row(0.0, &[0.0]), &row(0.0, &[0.0, 0.0])).is_err());
    }

    #[test]
    fn combined_loss_degenerate_lambda() {
        let m = row(2.0, &[1.0, 0.0]);
        let u = row(0.1, &[0.2, 0.3]);
        let b = combined_loss(&m, &u, 0.0).unwrap();
        assert_eq!(b.combined, b.rank_loss);
        assert!(b.kl_loss > 0.0);
    }

    #[test]
    fn combined_loss_kl_vanishes_on_equal_rows() {
        let m = row(2.0, &[1.0, 0.0]);
        let b = combined_loss(&m, &m, 1.0).unwrap();
        assert!((b.combined - b.rank_loss).abs() <= 1e-12);
    }

    #[test]
    fn combined_loss_sum_of_oracles() {
        let m = row(0.0, &[0.0]);
        let u = row(0.8f64.ln(), &[0.2f64.ln()]);
        let b = combined_loss(&m, &u, 1.0).unwrap();
        assert!((b.kl_loss - 0.223144).abs() < 1e-6);
        let b2 = combined_loss(&row(2.0, &[1.0, 0.0]), &row(2.0, &[1.0, 0.0]), 1.0).unwrap();
        assert!((b2.rank_loss - 0.407606).abs() < 1e-6);
        // 0.407606 + 0.223144
        let total = b2.rank_loss + b.kl_loss;
        assert!((total - 0.630750).abs() < 1e-6);
    }

    #[test]
    fn rank_gradient_at_uniform_scores() {
        for n in 1..=8usize {
            let m = row(0.0, &vec![0.0; n]);
            let g = loss_gradients(&m, &m, 0.0, false).unwrap();
            let total = (n + 1) as f64;
            assert!((g.masked[0] - (-(n as f64) / total)).abs() < 1e-12);
            for i in 1..=n {
                assert!((g.masked[i] - 1.0 / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_gradient_zero_at_equal_rows() {
        let m = row(1.0, &[0.3, -0.2]);
        let g = loss_gradients(&m, &m, 1.0, false).unwrap();
        let rank_only = loss_gradients(&m, &m, 0.0, false).unwrap();
        for (a, b) in g.masked.iter().zip(&rank_only.masked) {
            assert!((a - b).abs() < 1e-12);
        }
        for v in g.unmasked {
            assert!(v.abs() < 1e-12);
        }
    }

    /// Central finite differences of `combined_loss` w.r.t. every score.
    fn finite_diff(
        masked: &SimilarityRow,
        unmasked: &SimilarityRow,
        lambda: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let h = 1e-6;
        let eval = |m: &SimilarityRow, u: &SimilarityRow| {
            combined_loss(m, u, lambda).unwrap().combined
        };
        let n = masked.arity();
        let mut gm = vec![0.0; n];
        let mut gu = vec![0.0; n];
        let perturb = |r: &SimilarityRow, i: usize, d: f64| {
            let mut r = r.clone();
            if i == 0 {
                r.positive_score += d;
            } else {
                r.negative_scores[i - 1] += d;
            }
            r
        };
        for i in 0..n {
            gm[i] = (eval(&perturb(masked, i, h), unmasked) - eval(&perturb(masked, i, -h), unmasked))
                / (2.0 * h);
            gu[i] = (eval(masked, &perturb(unmasked, i, h)) - eval(masked, &perturb(unmasked, i, -h)))
                / (2.0 * h);
        }
        (gm, gu)
    }

    fn assert_close_rel(analytic: &[f64], numeric: &[f64]) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            let err = (a - n).abs();
            let tol = 1e-4 * a.abs().max(n.abs()).max(1e-8 / 1e-4);
            assert!(err <= tol.max(1e-8), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n_neg = rng.gen_range(1..=15);
            let lambda = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            let gen_row = |rng: &mut rand_chacha::ChaCha8Rng| {
                SimilarityRow::new(
                    rng.gen_range(-3.0..3.0),
                    (0..n_neg).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                )
                .unwrap()
            };
            let m = gen_row(&mut rng);
            let u = gen_row(&mut rng);
            let g = loss_gradients(&m, &u, lambda, false).unwrap();
            let (gm, gu) = finite_diff(&m, &u, lambda);
            assert_close_rel(&g.masked, &gm);
            assert_close_rel(&g.unmasked, &gu);
        }
    }

    #[test]
    fn stop_gradient_zeroes_unmasked_branch() {
        let m = row(1.0, &[0.0, -1.0]);
        let u = row(0.5, &[0.2, 0.1]);
        let g = loss_gradients(&m, &u, 1.0, true).unwrap();
        assert!(g.unmasked.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn kl_nonnegative(
            ms in proptest::collection::vec(-5.0f64..5.0, 2..10),
            us in proptest::collection::vec(-5.0f64..5.0, 2..10),
        ) {
            let n = ms.len().min(us.len());
            let m = SimilarityRow::new(ms[0], ms[1..n].to_vec()).unwrap();
            let u = SimilarityRow::new(us[0], us[1..n].to_vec()).unwrap();
            prop_assert!(kl_loss(&m, &u).unwrap() >= 0.0);
        }

        #[test]
        fn losses_shift_invariant(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..8),
            shift in -50.0f64..50.0,
        ) {
            let m = SimilarityRow::new(scores[0], scores[1..].to_vec()).unwrap();
            let shifted = SimilarityRow::new(
                scores[0] + shift,
                scores[1..].iter().map(|s| s + shift).collect(),
            ).unwrap();
            prop_assert!((rank_loss(&m) - rank_loss(&shifted)).abs() < 1e-10);
            prop_assert!((kl_loss(&m, &m).unwrap() - kl_loss(&shifted, &shifted).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn rank_loss_positive_and_decreasing_in_gap(negs in proptest::collection::vec(-2.0f64..2.0, 1..6)) {
            let mut prev = f64::INFINITY;
            for gap in [0.0, 1.0, 2.0, 4.0, 8.0] {
                let m = SimilarityRow::new(2.0 + gap, negs.clone()).unwrap();
                let l = rank_loss(&m);
                prop_assert!(l > 0.0);
                prop_assert!(l <= prev);
                prev = l;
            }
        }
    }
}
