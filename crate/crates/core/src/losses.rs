//! Embedding losses and multi-task loss weighting.
//!
//! The metric-learning losses work on raw dot products between an anchor
//! embedding and positive/negative samples; no margin term is used. All
//! functions return analytic gradients alongside the value.

use crate::error::{Error, Result};

/// Gradient-carrying result of an embedding loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLoss {
    pub value: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<f64>>,
    /// Index of the hardest (least similar) positive.
    pub hardest_positive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Identity label of embeddings that carry a box but no identity.
pub const UNLABELED: i64 = -1;

impl EmbeddingBatch {
    pub fn new(anchor: Vec<f64>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>) -> Result<Self> {
        let b = Self {
            anchor,
            positives,
            negatives,
        };
        b.validate()?;
        Ok(b)
    }

    /// Builds the batch for `anchor_index` out of a labelled mini-batch.
    /// Unlabelled embeddings never take part.
    pub fn from_labeled(embeddings: &[Vec<f64>], labels: &[i64], anchor_index: usize) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::domain("one label per embedding required"));
        }
        let anchor_label = *labels
            .get(anchor_index)
            .ok_or_else(|| Error::domain("anchor index out of range"))?;
        if anchor_label == UNLABELED {
            return Err(Error::domain("anchor embedding is unlabelled"));
        }
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (i, (e, &l)) in embeddings.iter().zip(labels).enumerate() {
            if i == anchor_index || l == UNLABELED {
                continue;
            }
            if l == anchor_label {
                positives.push(e.clone());
            } else {
                negatives.push(e.clone());
            }
        }
        Self::new(embeddings[anchor_index].clone(), positives, negatives)
    }

    fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::domain("batch has no positive sample"));
        }
        if self.negatives.is_empty() {
            return Err(Error::domain("batch has no negative sample"));
        }
        let d = self.anchor.len();
        if self.positives.iter().chain(&self.negatives).any(|v| v.len() != d) {
            return Err(Error::domain("embedding dimensions differ within the batch"));
        }
        Ok(())
    }

    fn dots(&self) -> (Vec<f64>, Vec<f64>) {
        let dot = |v: &Vec<f64>| self.anchor.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        (
            self.positives.iter().map(dot).collect(),
            self.negatives.iter().map(dot).collect(),
        )
    }

    fn hardest_positive(&self, pos_dots: &[f64]) -> usize {
        let mut best = 0;
        for (i, &d) in pos_dots.iter().enumerate() {
            if d < pos_dots[best] {
                best = i;
            }
        }
        best
    }

    /// Shared gradient shape: every negative `i` carries weight `w_i` on the
    /// margin `f.n_i - f.p`.
    fn assemble(&self, value: f64, hardest: usize, weights: &[f64]) -> EmbeddingLoss {
        let d = self.anchor.len();
        let p = &self.positives[hardest];
        let mut grad_anchor = vec![0.0; d];
        let mut grad_negatives = Vec::with_capacity(self.negatives.len());
        for (n, &w) in self.negatives.iter().zip(weights) {
            for k in 0..d {
                grad_anchor[k] += w * (n[k] - p[k]);
            }
            grad_negatives.push(self.anchor.iter().map(|a| w * a).collect());
        }
        let total: f64 = weights.iter().sum();
        let mut grad_positives = vec![vec![0.0; d]; self.positives.len()];
        grad_positives[hardest] = self.anchor.iter().map(|a| -total * a).collect();
        EmbeddingLoss {
            value,
            grad_anchor,
            grad_positives,
            grad_negatives,
            hardest_positive: hardest,
        }
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Hinge triplet loss over all negatives against the hardest positive:
/// `sum_i max(0, f.n_i - f.p)`.
pub fn triplet_loss(batch: &EmbeddingBatch) -> Result<EmbeddingLoss> {
    batch.validate()?;
    let (pos, neg) = batch.dots();
    let hardest = batch.hardest_positive(&pos);
    let margins: Vec<f64> = neg.iter().map(|n| n - pos[hardest]).collect();
    let value = margins.iter().map(|m| m.max(0.0)).sum();
    let weights: Vec<f64> = margins.iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(batch.assemble(value, hardest, &weights))
}

/// Smooth bound `log(1 + sum_i exp(f.n_i - f.p))`.
pub fn upper_bound_loss(batch: &EmbeddingBatch) -> Result<EmbeddingLoss> {
    batch.validate()?;
    let (pos, neg) = batch.dots();
    let hardest = batch.hardest_positive(&pos);
    let mut logits = Vec::with_capacity(neg.len() + 1);
    logits.push(0.0);
    logits.extend(neg.iter().map(|n| n - pos[hardest]));
    let value = log_sum_exp(&logits);
    // softmax weight of each negative margin
    let weights: Vec<f64> = logits[1..].iter().map(|z| (z - value).exp()).collect();
    Ok(batch.assemble(value, hardest, &weights))
}

/// The same bound written as a softmax over `f.p` and the `f.n_i`.
pub fn softmax_form_loss(batch: &EmbeddingBatch) -> Result<f64> {
    batch.validate()?;
    let (pos, neg) = batch.dots();
    let p = pos[batch.hardest_positive(&pos)];
    let mut logits = Vec::with_capacity(neg.len() + 1);
    logits.push(p);
    logits.extend_from_slice(&neg);
    Ok(log_sum_exp(&logits) - p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Gradient with respect to the logits: `softmax - onehot(target)`.
    pub grad: Vec<f64>,
}

pub fn cross_entropy_loss(logits: &[f64], target: usize) -> Result<CrossEntropy> {
    if logits.len() < 2 {
        return Err(Error::domain("cross entropy needs at least two classes"));
    }
    if target >= logits.len() {
        return Err(Error::domain(format!(
            "target class {target} out of range for {} classes",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok(CrossEntropy {
        value: lse - logits[target],
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyCrossEntropy {
    pub value: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_class_weights: Vec<Vec<f64>>,
}

/// Cross entropy with learnable class proxies: logits are `f.g_k`.
pub fn proxy_cross_entropy(embedding: &[f64], class_weights: &[Vec<f64>], target: usize) -> Result<ProxyCrossEntropy> {
    if class_weights.iter().any(|g| g.len() != embedding.len()) {
        return Err(Error::domain("class weight dimension differs from embedding"));
    }
    let logits: Vec<f64> = class_weights
        .iter()
        .map(|g| g.iter().zip(embedding).map(|(a, b)| a * b).sum())
        .collect();
    let ce = cross_entropy_loss(&logits, target)?;
    let mut grad_embedding = vec![0.0; embedding.len()];
    for (g, &dl) in class_weights.iter().zip(&ce.grad) {
        for (acc, gk) in grad_embedding.iter_mut().zip(g) {
            *acc += dl * gk;
        }
    }
    let grad_class_weights = ce
        .grad
        .iter()
        .map(|&dl| embedding.iter().map(|f| dl * f).collect())
        .collect();
    Ok(ProxyCrossEntropy {
        value: ce.value,
        grad_embedding,
        grad_class_weights,
    })
}

/// Task order within a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification = 0,
    Regression = 1,
    Embedding = 2,
}

/// Per-head `[classification, regression, embedding]` values.
pub type HeadValues = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLossSet {
    pub heads: Vec<HeadValues>,
}

impl TaskLossSet {
    pub fn new(heads: Vec<HeadValues>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::domain("at least one prediction head is required"));
        }
        if heads.iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::domain("task losses must be finite"));
        }
        Ok(Self { heads })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub heads: Vec<HeadValues>,
}

impl LossWeights {
    /// All weights one.
    pub fn uniform(num_heads: usize) -> Self {
        Self {
            heads: vec![[1.0; 3]; num_heads],
        }
    }

    /// Hand-tuned scheme: detection weights shared between classification
    /// and regression, and every head weighted identically.
    pub fn app_opt(num_heads: usize, detection: f64, embedding: f64) -> Self {
        Self {
            heads: vec![[detection, detection, embedding]; num_heads],
        }
    }

    /// Checks the constraints of [`app_opt`](Self::app_opt) on arbitrary weights.
    pub fn validate_app_opt(&self) -> Result<()> {
        for (i, h) in self.heads.iter().enumerate() {
            if h[Task::Classification as usize] != h[Task::Regression as usize] {
                return Err(Error::domain(format!(
                    "head {i}: classification and regression weights must match"
                )));
            }
            if *h != self.heads[0] {
                return Err(Error::domain(format!("head {i}: weights differ from head 0")));
            }
        }
        Ok(())
    }
}

/// `sum_i sum_j w_j^i L_j^i`.
pub fn weighted_total_loss(set: &TaskLossSet, weights: &LossWeights) -> Result<f64> {
    if set.heads.len() != weights.heads.len() {
        return Err(Error::domain(format!(
            "{} heads of losses but {} heads of weights",
            set.heads.len(),
            weights.heads.len()
        )));
    }
    if weights.heads.iter().flatten().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::domain("loss weights must be finite and non-negative"));
    }
    Ok(set
        .heads
        .iter()
        .zip(&weights.heads)
        .flat_map(|(l, w)| l.iter().zip(w).map(|(l, w)| l * w))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyLoss {
    pub value: f64,
    /// Gradient with respect to every log-variance `s_j^i`.
    pub grad: Vec<HeadValues>,
}

/// Uncertainty-weighted objective `sum 0.5 * (exp(-s) L + s)`.
pub fn uncertainty_total_loss(set: &TaskLossSet, log_vars: &[HeadValues]) -> Result<UncertaintyLoss> {
    if set.heads.len() != log_vars.len() {
        return Err(Error::domain("one log-variance triple per head required"));
    }
    if log_vars.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::domain("log-variances must be finite"));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(log_vars.len());
    for (l, s) in set.heads.iter().zip(log_vars) {
        let mut g = [0.0; 3];
        for j in 0..3 {
            let scaled = (-s[j]).exp() * l[j];
            value += 0.5 * (scaled + s[j]);
            g[j] = 0.5 * (1.0 - scaled);
        }
        grad.push(g);
    }
    Ok(UncertaintyLoss { value, grad })
}

/// Closed-form minimizer of one uncertainty term: `s* = ln L` with value
/// `0.5 * (1 + ln L)`.
pub fn uncertainty_optimum(loss: f64) -> Result<(f64, f64)> {
    if !(loss > 0.0) {
        return Err(Error::domain(format!("task loss must be positive, got {loss}")));
    }
    let s = loss.ln();
    Ok((s, 0.5 * (1.0 + s)))
}

pub fn loss_norm_weights(averages: &[f64]) -> Result<Vec<f64>> {
    averages
        .iter()
        .map(|&a| {
            if a > 0.0 && a.is_finite() {
                Ok(1.0 / a)
            } else {
                Err(Error::domain(format!("moving average must be positive, got {a}")))
            }
        })
        .collect()
}

/// Tracks an exponential moving average of each task's loss magnitude and
/// weights tasks by its reciprocal.
#[derive(Debug, Clone, PartialEq)]
pub struct LossNormWeighter {
    pub momentum: f64,
    averages: Option<Vec<f64>>,
}

impl Default for LossNormWeighter {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            averages: None,
        }
    }
}

impl LossNormWeighter {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::domain(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            momentum,
            averages: None,
        })
    }

    /// Folds one observation of every task's loss into the averages. The
    /// first observation initializes them.
    pub fn observe(&mut self, losses: &[f64]) -> Result<()> {
        match &mut self.averages {
            None => self.averages = Some(losses.iter().map(|l| l.abs()).collect()),
            Some(avg) => {
                if avg.len() != losses.len() {
                    return Err(Error::domain("task count changed between observations"));
                }
                for (a, l) in avg.iter_mut().zip(losses) {
                    *a = self.momentum * *a + (1.0 - self.momentum) * l.abs();
                }
            }
        }
        Ok(())
    }

    pub fn averages(&self) -> Option<&[f64]> {
        self.averages.as_deref()
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        loss_norm_weights(
            self.averages
                .as_deref()
                .ok_or_else(|| Error::Usage("no losses observed yet".into()))?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Batch in D=1 whose dots with the anchor equal the given values.
    fn dot_batch(pos: &[f64], neg: &[f64]) -> EmbeddingBatch {
        EmbeddingBatch::new(
            vec![1.0],
            pos.iter().map(|p| vec![*p]).collect(),
            neg.iter().map(|n| vec![*n]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(&dot_batch(&[1.0], &[0.5, -0.2])).unwrap().value, 0.0);
        assert!((triplet_loss(&dot_batch(&[0.2], &[0.5])).unwrap().value - 0.3).abs() < 1e-15);
        let l = triplet_loss(&dot_batch(&[0.9, 0.2], &[0.5])).unwrap();
        assert_eq!(l.hardest_positive, 1);
        assert!((l.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_sides_are_domain_errors() {
        assert!(EmbeddingBatch::new(vec![1.0], vec![], vec![vec![1.0]]).is_err());
        assert!(EmbeddingBatch::new(vec![1.0], vec![vec![1.0]], vec![]).is_err());
        assert!(EmbeddingBatch::new(vec![1.0], vec![vec![1.0, 0.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn upper_bound_examples() {
        let b = dot_batch(&[0.2], &[0.5]);
        let u = upper_bound_loss(&b).unwrap().value;
        assert!((u - (1.0 + 0.3f64.exp()).ln()).abs() < 1e-15);
        assert!((u - 0.854_355).abs() < 1e-6);
        assert!((softmax_form_loss(&b).unwrap() - u).abs() < 1e-12);
        assert!((softmax_form_loss(&dot_batch(&[0.4], &[0.4])).unwrap() - 2f64.ln()).abs() < 1e-15);

        let huge = upper_bound_loss(&dot_batch(&[-400.0], &[400.0])).unwrap();
        assert!(huge.value.is_finite());
        assert!((huge.value - 800.0).abs() < 1e-9);
        assert!(huge.grad_anchor.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn upper_bound_dominates_single_negative_triplet() {
        for z in [-5.0, -0.3, 0.0, 0.3, 2.0, 30.0] {
            let b = dot_batch(&[0.0], &[z]);
            assert!(upper_bound_loss(&b).unwrap().value >= triplet_loss(&b).unwrap().value);
        }
    }

    #[test]
    fn summed_triplet_can_exceed_the_bound() {
        // two negatives each 1.0 past the positive: 2.0 vs ln(1 + 2e)
        let b = dot_batch(&[0.0], &[1.0, 1.0]);
        let t = triplet_loss(&b).unwrap().value;
        let u = upper_bound_loss(&b).unwrap().value;
        assert_eq!(t, 2.0);
        assert!((u - (1.0 + 2.0 * 1f64.exp()).ln()).abs() < 1e-15);
        assert!(u < t);
        // the bound does hold against the hardest negative
        assert!(u >= 1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy_loss(&[2.0, 0.0], 0).unwrap();
        assert!((ce.value - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((ce.value - 0.126_928).abs() < 1e-6);
        assert!(ce.grad.iter().sum::<f64>().abs() < 1e-15);
        let uniform = cross_entropy_loss(&[0.7; 5], 3).unwrap();
        assert!((uniform.value - 5f64.ln()).abs() < 1e-14);
        assert!(cross_entropy_loss(&[1.0, 2.0], 2).is_err());
        assert!(cross_entropy_loss(&[1.0], 0).is_err());
    }

    #[test]
    fn cross_entropy_falls_as_target_logit_rises() {
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let v = cross_entropy_loss(&[-1.0, k as f64 * 0.2 - 3.0, 0.5], 1).unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn proxy_cross_entropy_matches_plain() {
        let f = vec![0.6, 0.8];
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let p = proxy_cross_entropy(&f, &g, 1).unwrap();
        let ce = cross_entropy_loss(&[0.6, 0.8, -0.6], 1).unwrap();
        assert!((p.value - ce.value).abs() < 1e-15);
        let h = 1e-6;
        for k in 0..2 {
            let mut fp = f.clone();
            fp[k] += h;
            let mut fm = f.clone();
            fm[k] -= h;
            let fd = (proxy_cross_entropy(&fp, &g, 1).unwrap().value - proxy_cross_entropy(&fm, &g, 1).unwrap().value)
                / (2.0 * h);
            assert!((fd - p.grad_embedding[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn weighted_sum_examples() {
        let one = TaskLossSet::new(vec![[3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            weighted_total_loss(
                &one,
                &LossWeights {
                    heads: vec![[1.0, 0.0, 0.0]]
                }
            )
            .unwrap(),
            3.0
        );

        let two = TaskLossSet::new(vec![[1.0, 2.0, 3.0], [0.5, 0.25, 4.0]]).unwrap();
        let w = LossWeights::app_opt(2, 1.0, 0.1);
        assert!(w.validate_app_opt().is_ok());
        // (1 + 2) + 0.3 + (0.5 + 0.25) + 0.4
        assert!((weighted_total_loss(&two, &w).unwrap() - 4.45).abs() < 1e-12);
        assert_eq!(weighted_total_loss(&two, &LossWeights::uniform(2)).unwrap(), 10.75);

        assert!(LossWeights {
            heads: vec![[1.0, 2.0, 1.0]]
        }
        .validate_app_opt()
        .is_err());
        assert!(LossWeights {
            heads: vec![[1.0, 1.0, 1.0], [2.0, 2.0, 1.0]]
        }
        .validate_app_opt()
        .is_err());
        assert!(weighted_total_loss(&two, &LossWeights::uniform(1)).is_err());
        assert!(weighted_total_loss(
            &one,
            &LossWeights {
                heads: vec![[-1.0, 0.0, 0.0]]
            }
        )
        .is_err());
        assert!(TaskLossSet::new(vec![]).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let single = |l: f64, s: f64| {
            let set = TaskLossSet::new(vec![[l, 0.0, 0.0]]).unwrap();
            uncertainty_total_loss(&set, &[[s, 0.0, 0.0]]).unwrap()
        };
        assert_eq!(single(1.0, 0.0).value, 0.5);
        let v = single(2.0, 2f64.ln());
        assert!((v.value - 0.5 * (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((v.value - 0.846_574).abs() < 1e-6);
        assert!(v.grad[0][0].abs() < 1e-15);
        let (s, best) = uncertainty_optimum(2.0).unwrap();
        assert_eq!(s, 2f64.ln());
        assert!((best - v.value).abs() < 1e-15);
        assert!(uncertainty_optimum(0.0).is_err());
    }

    #[test]
    fn loss_norm_examples() {
        assert_eq!(loss_norm_weights(&[2.0]).unwrap(), vec![0.5]);
        assert_eq!(loss_norm_weights(&[2.0, 4.0]).unwrap(), vec![0.5, 0.25]);
        let eq = loss_norm_weights(&[3.0, 3.0]).unwrap();
        assert_eq!(eq[0], eq[1]);
        assert!(loss_norm_weights(&[0.0]).is_err());

        let mut w = LossNormWeighter::default();
        assert!(w.weights().is_err());
        w.observe(&[2.0, 4.0]).unwrap();
        assert_eq!(w.weights().unwrap(), vec![0.5, 0.25]);
        w.observe(&[4.0, 4.0]).unwrap();
        assert!((w.averages().unwrap()[0] - 2.02).abs() < 1e-12);
        assert!(w.observe(&[1.0]).is_err());
        assert!(LossNormWeighter::new(1.0).is_err());
    }

    #[test]
    fn labeled_batch_skips_unlabeled() {
        let e = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.5, 0.5]];
        let b = EmbeddingBatch::from_labeled(&e, &[1, 1, 2, UNLABELED], 0).unwrap();
        assert_eq!(b.positives.len(), 1);
        assert_eq!(b.negatives.len(), 1);
        assert!(EmbeddingBatch::from_labeled(&e, &[UNLABELED, 1, 2, 2], 0).is_err());
    }
}
