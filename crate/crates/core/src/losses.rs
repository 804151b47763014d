//! Training objective: CTC, cross-entropy, their fixed-weight combination,
//! the epoch-indexed KL weight and the full variational loss
//!
//! ```text
//! L = w(e, n_e)·KL + 0.3·CTC + 0.7·CE
//! ```

use serde::{Deserialize, Serialize};

use crate::bayes::KlAccumulator;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Number of frames a target needs: one per label plus a separating blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs` (`frames × classes`, row-major), and its gradient with respect
/// to every log-probability.
///
/// Forward-backward over the blank-extended label sequence
/// `(blank, l₁, blank, l₂, …, blank)`, entirely in log space.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * classes || frames == 0 {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: vec![frames, classes],
            rhs: vec![log_probs.len()],
        });
    }
    if blank >= classes {
        return Err(Error::Contract(format!(
            "blank id {blank} out of range for {classes} classes"
        )));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= classes || l == blank) {
        return Err(Error::Contract(format!(
            "CTC target label {bad} is the blank or out of range"
        )));
    }
    let needed = ctc_min_frames(target);
    if needed > frames {
        return Err(Error::InfeasibleAlignment {
            target: target.len(),
            needed,
            frames,
        });
    }

    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let neg_inf = f64::NEG_INFINITY;

    let mut alpha = vec![neg_inf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg_inf { neg_inf } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![neg_inf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == neg_inf { neg_inf } else { b + lp(t, ext[s]) };
        }
    }

    let end = &alpha[last * s_len..];
    let log_likelihood = if s_len > 1 {
        log_add(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if !log_likelihood.is_finite() {
        return Err(Error::InfeasibleAlignment {
            target: target.len(),
            needed,
            frames,
        });
    }

    // ∂(−log P)/∂ log y_t(k) = −Σ_{s: ext[s]=k} α_t(s)β_t(s) / (y_t(k)·P)
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let mut occupancy = vec![neg_inf; classes];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != neg_inf {
                occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
            }
        }
        for k in 0..classes {
            if occupancy[k] != neg_inf {
                grad[t * classes + k] = -(occupancy[k] - lp(t, k) - log_likelihood).exp();
            }
        }
    }
    Ok((-log_likelihood, grad))
}

/// CTC negative log-likelihood of `target` given log-probabilities `[T × classes]`, recorded on `graph`.
pub fn ctc_loss(graph: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (frames, classes) = match *graph.shape(log_probs) {
        [t, c] => (t, c),
        _ => {
            return Err(Error::Contract(
                "ctc_loss expects [T × classes] log-probabilities".into(),
            ))
        }
    };
    let (loss, grad) =
        ctc_forward_backward(graph.value(log_probs).data(), frames, classes, target, blank)?;
    graph.scalar_with_grad(log_probs, loss, grad)
}

/// Mean over unmasked positions of `−log softmax(logits)[target]`.
///
/// `keep[i] == false` marks a padded position.
pub fn cross_entropy(graph: &mut Graph, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
    let rows = graph.shape(logits)[0];
    if targets.len() != rows || keep.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: graph.shape(logits).to_vec(),
            rhs: vec![targets.len(), keep.len()],
        });
    }
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::Contract(
            "cross_entropy with every position masked".into(),
        ));
    }
    let logp = graph.log_softmax(logits);
    let picked = graph.pick(logp, targets)?;
    let weights = keep
        .iter()
        .map(|&k| if k { -1.0 / count as f64 } else { 0.0 })
        .collect();
    let weights = graph.constant(Tensor::vector(weights)?);
    let weighted = graph.mul(picked, weights)?;
    Ok(graph.sum(weighted))
}

/// Weights of the CTC and cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointWeights {
    pub ctc: f64,
    pub ce: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self { ctc: 0.3, ce: 0.7 }
    }
}

/// `ctc_weight·ctc + ce_weight·ce`
pub fn joint_ctc_ce(ctc: f64, ce: f64, weights: JointWeights) -> f64 {
    weights.ctc * ctc + weights.ce * ce
}

/// Denominator used by [`minibatch_weight`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlWeightForm {
    /// `2^(n_e−e) / (2^n_e − e)`
    #[default]
    Printed,
    /// `2^(n_e−e) / (2^n_e − 1)`, the usual Bayes-by-Backprop normalizer.
    Classic,
}

/// Epoch-indexed KL weight for epoch index `e` out of `n_e`.
pub fn minibatch_weight(e: u32, n_e: u32, form: KlWeightForm) -> Result<f64> {
    if e > n_e {
        return Err(Error::Contract(format!(
            "epoch index {e} exceeds epoch count {n_e}"
        )));
    }
    if n_e > 1000 {
        return Err(Error::Contract(format!("epoch count {n_e} is too large")));
    }
    let numerator = 2f64.powi((n_e - e) as i32);
    let full = 2f64.powi(n_e as i32);
    let denominator = match form {
        KlWeightForm::Printed => full - e as f64,
        KlWeightForm::Classic if n_e == 0 => 1.0,
        KlWeightForm::Classic => full - 1.0,
    };
    Ok(numerator / denominator)
}

/// Maps raw training epochs onto the coarse epoch index used by [`minibatch_weight`].
///
/// Both the running epoch and the epoch total are integer-divided by `divisor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: u32,
    pub divisor: u32,
    pub form: KlWeightForm,
}

impl TrainSchedule {
    pub fn new(total_epochs: u32, divisor: u32, form: KlWeightForm) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("schedule divisor must be at least 1".into()));
        }
        Ok(Self {
            total_epochs,
            divisor,
            form,
        })
    }

    /// `(⌊epoch/divisor⌋, ⌊total/divisor⌋)`
    pub fn indices(&self, raw_epoch: u32) -> (u32, u32) {
        (raw_epoch / self.divisor, self.total_epochs / self.divisor)
    }

    pub fn kl_weight(&self, raw_epoch: u32) -> Result<f64> {
        let (e, n_e) = self.indices(raw_epoch);
        minibatch_weight(e, n_e, self.form)
    }
}

/// Scalar components of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kl_raw: f64,
    pub kl_weight: f64,
    pub kl_weighted: f64,
    pub ctc: f64,
    pub ce: f64,
    pub total: f64,
}

/// `kl_weight·KL + ctc_weight·ctc + ce_weight·ce` on plain values, in the same order as [`total_loss`].
pub fn total_loss_value(kl: f64, ctc: f64, ce: f64, kl_weight: f64, weights: JointWeights) -> f64 {
    kl_weight * kl + weights.ctc * ctc + weights.ce * ce
}

/// Records the full objective on `graph`.
///
/// The KL term is read from `kl`, which must have seen a sampled forward pass
/// since it was last reset.
pub fn total_loss(
    graph: &mut Graph,
    kl: &KlAccumulator,
    ctc: Var,
    ce: Var,
    kl_weight: f64,
    weights: JointWeights,
) -> Result<(Var, LossParts)> {
    let kl_var = kl.total()?;
    let kl_term = graph.scale(kl_var, kl_weight);
    let ctc_term = graph.scale(ctc, weights.ctc);
    let ce_term = graph.scale(ce, weights.ce);
    let sum = graph.add(kl_term, ctc_term)?;
    let total = graph.add(sum, ce_term)?;
    let parts = LossParts {
        kl_raw: graph.value(kl_var).item(),
        kl_weight,
        kl_weighted: graph.value(kl_term).item(),
        ctc: graph.value(ctc).item(),
        ce: graph.value(ce).item(),
        total: graph.value(total).item(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_rows(rows: &[&[f64]]) -> Vec<f64> {
        rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = log_rows(&[&[0.6, 0.4]]);
        let (loss, _) = ctc_forward_backward(&lp, 1, 2, &[0], 1).unwrap();
        assert!((loss + 0.6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_frames_three_alignments() {
        let p0 = [0.5, 0.2, 0.3];
        let p1 = [0.1, 0.6, 0.3];
        let lp = log_rows(&[&p0, &p1]);
        let (loss, _) = ctc_forward_backward(&lp, 2, 3, &[0], 2).unwrap();
        let expected = -(p0[0] * p1[0] + p0[0] * p1[2] + p0[2] * p1[0]).ln();
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let lp = log_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(
            ctc_forward_backward(&lp, 2, 2, &[0, 0, 0], 1),
            Err(Error::InfeasibleAlignment { .. })
        ));
        // a repeated label needs a blank in between
        assert!(matches!(
            ctc_forward_backward(&lp, 2, 2, &[0, 0], 1),
            Err(Error::InfeasibleAlignment { needed: 3, .. })
        ));
    }

    #[test]
    fn empty_target_is_all_blanks() {
        let lp = log_rows(&[&[0.3, 0.7], &[0.2, 0.8]]);
        let (loss, _) = ctc_forward_backward(&lp, 2, 2, &[], 1).unwrap();
        assert!((loss + (0.7f64 * 0.8).ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::filled(&[3, 5], 0.4));
        let ce = cross_entropy(&mut g, logits, &[0, 3, 4], &[true; 3]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-14);

        let logits = g.leaf(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[1], &[true]).unwrap();
        assert!((g.value(ce).item() + 0.75f64.ln()).abs() < 1e-15);

        let logits = g.leaf(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[0], &[true]).unwrap();
        assert!(g.value(ce).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(2, 2, vec![0.0, 3f64.ln(), 9.0, -9.0]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[1, 1], &[true, false]).unwrap();
        assert!((g.value(ce).item() + 0.75f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&mut g, logits, &[1, 1], &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn joint_weights_arithmetic() {
        let w = JointWeights::default();
        assert!((joint_ctc_ce(2.0, 1.0, w) - 1.3).abs() < 1e-15);
        assert_eq!(joint_ctc_ce(0.0, 0.0, w), 0.0);
        let half = JointWeights { ctc: 0.5, ce: 0.5 };
        assert_eq!(joint_ctc_ce(2.0, 1.0, half), 1.5);
    }

    #[test]
    fn minibatch_weight_values() {
        for n in 0..=20 {
            assert_eq!(minibatch_weight(0, n, KlWeightForm::Printed).unwrap(), 1.0);
        }
        assert_eq!(
            minibatch_weight(10, 10, KlWeightForm::Printed).unwrap(),
            1.0 / 1014.0
        );
        assert_eq!(
            minibatch_weight(1, 10, KlWeightForm::Printed).unwrap(),
            512.0 / 1023.0
        );
        assert!(minibatch_weight(11, 10, KlWeightForm::Printed).is_err());
        assert_eq!(
            minibatch_weight(1, 10, KlWeightForm::Classic).unwrap(),
            512.0 / 1023.0
        );
        assert_eq!(minibatch_weight(0, 0, KlWeightForm::Classic).unwrap(), 1.0);
    }

    #[test]
    fn schedule_divides_both_indices() {
        let s = TrainSchedule::new(30, 10, KlWeightForm::Printed).unwrap();
        assert_eq!(s.indices(0), (0, 3));
        assert_eq!(s.indices(19), (1, 3));
        assert_eq!(s.kl_weight(25).unwrap(), 2.0 / 6.0);
        assert!(TrainSchedule::new(30, 0, KlWeightForm::Printed).is_err());
    }

    #[test]
    fn total_loss_composition() {
        assert!((total_loss_value(4.0, 2.0, 1.0, 1.0, JointWeights::default()) - 5.3).abs() < 1e-15);
        assert_eq!(
            total_loss_value(0.0, 2.0, 1.0, 0.7, JointWeights::default()),
            joint_ctc_ce(2.0, 1.0, JointWeights::default())
        );
        let w = minibatch_weight(10, 10, KlWeightForm::Printed).unwrap();
        let t = total_loss_value(1014.0, 0.0, 0.0, w, JointWeights::default());
        assert!((t - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stale_accumulator_is_rejected() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::scalar(1.0));
        let kl = KlAccumulator::new();
        assert!(matches!(
            total_loss(&mut g, &kl, c, c, 1.0, JointWeights::default()),
            Err(Error::Contract(_))
        ));
    }
}
