//! Two-way contrastive loss on hybrid similarities and its gradients.

use rayon::prelude::*;

use super::{TrainBatch, TrainConfig};
use crate::aggregator::{aggregate_backward, aggregate_forward, AggregatorParams};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softplus, Matrix};

/// Loss value and its partial derivatives in the two similarities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveTerms {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + e^{s⁻/τ})) = log(1 + e^{(s⁻ − s⁺)/τ})`.
pub fn contrastive_loss(s_pos: f64, s_neg: f64, tau: f64) -> ContrastiveTerms {
    let x = (s_neg - s_pos) / tau;
    let p = sigmoid(x);
    ContrastiveTerms {
        loss: softplus(x),
        d_pos: -p / tau,
        d_neg: p / tau,
    }
}

/// Mean batch loss with gradients for every projection and the λ logit.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub loss: f64,
    pub projections: Vec<Matrix>,
    pub lambda_logit: f64,
}

impl BatchGrads {
    pub fn norm(&self) -> f64 {
        let sq: f64 = self.projections.iter().map(Matrix::frobenius_sq).sum();
        (sq + self.lambda_logit * self.lambda_logit).sqrt()
    }
}

/// Similarities of one entry against its positive and its mined negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub cross_pos: f64,
    pub intra_pos: f64,
    pub cross_neg: f64,
    pub intra_neg: f64,
    pub s_pos: f64,
    pub s_neg: f64,
}

/// Hybrid similarities for the positive and negative pair. With
/// `clamp_positive`, the positive's cross-modal term is fixed to 1.
pub fn pair_scores(
    text: &[f64],
    aggregate: &[f64],
    positive: (&[f64], &[f64]),
    negative: (&[f64], &[f64]),
    lambda: f64,
    clamp_positive: bool,
) -> PairScores {
    let (pos_vm, pos_vlm) = positive;
    let (neg_vm, neg_vlm) = negative;
    let cross_pos = if clamp_positive { 1.0 } else { dot(text, pos_vlm) };
    let intra_pos = dot(aggregate, pos_vm);
    let cross_neg = dot(text, neg_vlm);
    let intra_neg = dot(aggregate, neg_vm);
    PairScores {
        cross_pos,
        intra_pos,
        cross_neg,
        intra_neg,
        s_pos: (1.0 - lambda) * cross_pos + lambda * intra_pos,
        s_neg: (1.0 - lambda) * cross_neg + lambda * intra_neg,
    }
}

struct EntryGrads {
    loss: f64,
    lambda_logit: f64,
    projections: Vec<Matrix>,
}

/// Gradients flow only into the aggregator and λ; every embedding is a
/// constant.
pub fn batch_loss_and_grads(
    batch: &TrainBatch,
    negatives: &[usize],
    params: &AggregatorParams,
    config: &TrainConfig,
) -> Result<BatchGrads> {
    let m = batch.len();
    if negatives.len() != m {
        return Err(Error::dim("negative indices", m, negatives.len()));
    }
    if m == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let agg_config = config.aggregator_config();
    let lambda = params.lambda();
    let dlambda_dlogit = lambda * (1.0 - lambda);

    let per_entry: Vec<EntryGrads> = (0..m)
        .into_par_iter()
        .map(|i| {
            let entry = &batch.entries[i];
            let j = negatives[i];
            if j == i || j >= m {
                return Err(Error::InvalidArgument(format!("bad negative {j} for entry {i}")));
            }
            let neg = &batch.entries[j];
            let (agg, cache) = aggregate_forward(params, &entry.queries, &agg_config)?;
            let s = pair_scores(
                &entry.text,
                &agg,
                (&entry.positive_vm, &entry.positive_vlm),
                (&neg.positive_vm, &neg.positive_vlm),
                lambda,
                config.clamp_positive,
            );
            let t = contrastive_loss(s.s_pos, s.s_neg, config.tau);

            let dlambda = t.d_pos * (s.intra_pos - s.cross_pos) + t.d_neg * (s.intra_neg - s.cross_neg);
            let mut grad_agg = vec![0.0; agg.len()];
            axpy(lambda * t.d_pos, &entry.positive_vm, &mut grad_agg);
            axpy(lambda * t.d_neg, &neg.positive_vm, &mut grad_agg);
            let grads = aggregate_backward(params, &cache, &grad_agg)?;
            Ok(EntryGrads {
                loss: t.loss,
                lambda_logit: dlambda * dlambda_dlogit,
                projections: grads.projections,
            })
        })
        .collect::<Result<_>>()?;

    let d = params.dim();
    let mut out = BatchGrads {
        loss: 0.0,
        projections: vec![Matrix::zeros(d, d); params.num_layers()],
        lambda_logit: 0.0,
    };
    for e in &per_entry {
        out.loss += e.loss;
        out.lambda_logit += e.lambda_logit;
        for (acc, g) in out.projections.iter_mut().zip(&e.projections) {
            acc.add_assign(g);
        }
    }
    let inv = 1.0 / m as f64;
    out.loss *= inv;
    out.lambda_logit *= inv;
    for g in &mut out.projections {
        g.scale(inv);
    }
    if !config.lambda_trainable {
        out.lambda_logit = 0.0;
    }
    if config.freeze_aggregator {
        for g in &mut out.projections {
            g.scale(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn equal_scores_give_ln2() {
        for s in [-1.0, 0.0, 0.37, 1.0] {
            for tau in [0.05, 0.1, 1.0] {
                assert_eq!(contrastive_loss(s, s, tau).loss, LN_2);
            }
        }
    }

    #[test]
    fn unit_margin_value() {
        // direct evaluation: ln(1 + e^{-1})
        let t = contrastive_loss(1.0, 0.0, 1.0);
        assert!((t.loss - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!((t.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn stable_at_extremes() {
        let t = contrastive_loss(50.0, 0.0, 1.0);
        assert!(t.loss < 1e-20 && t.loss >= 0.0);
        let t = contrastive_loss(0.0, 500.0, 0.01);
        assert!(t.loss.is_finite());
        assert!((t.loss - 50_000.0).abs() < 1e-6);
        assert!((t.d_neg - 100.0).abs() < 1e-9);
    }

    #[test]
    fn partials_match_finite_differences() {
        for &(sp, sn, tau) in &[(0.3, 0.1, 0.1), (-0.2, 0.5, 0.7), (0.9, 0.9, 0.05)] {
            let t = contrastive_loss(sp, sn, tau);
            let h = 1e-6;
            let fd_pos = (contrastive_loss(sp + h, sn, tau).loss - contrastive_loss(sp - h, sn, tau).loss) / (2.0 * h);
            let fd_neg = (contrastive_loss(sp, sn + h, tau).loss - contrastive_loss(sp, sn - h, tau).loss) / (2.0 * h);
            assert!((t.d_pos - fd_pos).abs() < 1e-6 * fd_pos.abs().max(1.0));
            assert!((t.d_neg - fd_neg).abs() < 1e-6 * fd_neg.abs().max(1.0));
        }
    }

    #[test]
    fn clamped_positive_substitution() {
        // perfectly aligned positive, orthogonal negative
        let text = [1.0, 0.0];
        let agg = [0.0, 1.0, 0.0];
        let pos_vm = [0.0, 1.0, 0.0];
        let pos_vlm = [0.0, 1.0];
        let neg_vm = [1.0, 0.0, 0.0];
        let neg_vlm = [0.0, 1.0];
        for lambda in [0.0, 0.2, 0.5, 0.99] {
            let s = pair_scores(&text, &agg, (&pos_vm, &pos_vlm), (&neg_vm, &neg_vlm), lambda, true);
            assert_eq!(s.s_pos, 1.0);
            assert_eq!(s.s_neg, 0.0);
            let raw = pair_scores(&text, &agg, (&pos_vm, &pos_vlm), (&neg_vm, &neg_vlm), lambda, false);
            assert_eq!(raw.cross_pos, 0.0);
        }
    }
}
