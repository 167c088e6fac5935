//! Matching, distillation and alignment losses over embeddings.
//!
//! Every loss here is a function of query embeddings, the prototype bank and
//! (for the distillation term) the classifier head. Gradients are returned
//! with respect to each query embedding, each prototype and the classifier
//! parameters; the trainer chains them back through the embedding net.
//!
//! All log-probabilities go through log-sum-exp, so no probability is ever
//! passed to `ln` directly.

use serde::{Deserialize, Serialize};

use crate::embedder::{Linear, LinearClassifier};
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot_unchecked, log_sum_exp};
use crate::prototype::PrototypeBank;
use crate::ClassId;

/// Query embeddings with their labels (`0` = background).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<ClassId>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, bank: &PrototypeBank) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::input("empty query batch"));
        }
        if self.embeddings.len() != self.labels.len() {
            return Err(Error::shape("query embeddings and labels differ in length"));
        }
        let dim = bank
            .dim()
            .ok_or_else(|| Error::input("empty prototype bank"))?;
        if self.embeddings.iter().any(|q| q.len() != dim) {
            return Err(Error::shape("query dim differs from prototype dim"));
        }
        self.labels
            .iter()
            .map(|&y| {
                bank.index_of(y)
                    .ok_or_else(|| Error::input(format!("label {y} has no prototype")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_kl: f64,
    pub lambda_align: f64,
    pub temperature: f64,
    /// Stage 1 trains the matching loss alone regardless of the weights.
    pub stage: u8,
    /// Treat the prototype posterior as a fixed teacher in the KL term.
    pub kl_stop_teacher: bool,
    /// Include the background prototype among alignment anchors.
    pub align_include_background: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_kl: 1.0,
            lambda_align: 1.0,
            temperature: 10.0,
            stage: 2,
            kl_stop_teacher: false,
            align_include_background: true,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.lambda_kl >= 0.0) || !(self.lambda_align >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::config("stage must be 1 or 2"));
        }
        Ok(())
    }

    /// `(λ_KL, λ_align)` in effect for the configured stage.
    pub fn weights(&self) -> (f64, f64) {
        if self.stage == 1 {
            (0.0, 0.0)
        } else {
            (self.lambda_kl, self.lambda_align)
        }
    }

    pub fn with_stage(&self, stage: u8) -> LossConfig {
        LossConfig {
            stage,
            ..self.clone()
        }
    }
}

/// Gradients with respect to the loss inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub d_queries: Vec<Vec<f64>>,
    /// Bank order.
    pub d_prototypes: Vec<Vec<f64>>,
    pub classifier: Option<Linear>,
}

impl EmbeddingGrads {
    fn zeros(n_queries: usize, n_protos: usize, dim: usize) -> Self {
        EmbeddingGrads {
            d_queries: vec![vec![0.0; dim]; n_queries],
            d_prototypes: vec![vec![0.0; dim]; n_protos],
            classifier: None,
        }
    }

    fn add_scaled(&mut self, other: &EmbeddingGrads, s: f64) {
        for (a, b) in self.d_queries.iter_mut().zip(&other.d_queries) {
            axpy(s, b, a);
        }
        for (a, b) in self.d_prototypes.iter_mut().zip(&other.d_prototypes) {
            axpy(s, b, a);
        }
        if let Some(oc) = &other.classifier {
            let c = self
                .classifier
                .get_or_insert_with(|| Linear::zeros(oc.out_dim(), oc.in_dim()));
            axpy(s, &oc.weight.data, &mut c.weight.data);
            axpy(s, &oc.bias, &mut c.bias);
        }
    }

    fn scale(&mut self, s: f64) {
        let scale_all = |v: &mut Vec<Vec<f64>>| v.iter_mut().flatten().for_each(|g| *g *= s);
        scale_all(&mut self.d_queries);
        scale_all(&mut self.d_prototypes);
        if let Some(c) = &mut self.classifier {
            c.weight
                .data
                .iter_mut()
                .chain(c.bias.iter_mut())
                .for_each(|g| *g *= s);
        }
    }
}

/// One loss value (summed over queries) with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grads: EmbeddingGrads,
}

/// `Σ_i -log P(y_i | q_i)` with `P` the energy softmax over the bank.
pub fn matching_loss(batch: &QueryBatch, bank: &PrototypeBank) -> Result<LossTerm> {
    let targets = batch.check(bank)?;
    let protos = bank.entries();
    let dim = protos[0].vector.len();
    let mut grads = EmbeddingGrads::zeros(batch.len(), protos.len(), dim);
    let mut value = 0.0;
    let mut diff = vec![0.0; dim];
    for (i, (q, &y)) in batch.embeddings.iter().zip(&targets).enumerate() {
        let logits: Vec<f64> = protos
            .iter()
            .map(|p| -crate::numeric::sq_euclidean_unchecked(q, &p.vector))
            .collect();
        let lse = log_sum_exp(&logits);
        value += lse - logits[y];
        for (j, p) in protos.iter().enumerate() {
            // ∂L/∂a_j = P_j - [j = y], with a_j = -‖q - p_j‖².
            let g = (logits[j] - lse).exp() - if j == y { 1.0 } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            for ((d, a), b) in diff.iter_mut().zip(q).zip(&p.vector) {
                *d = a - b;
            }
            axpy(-2.0 * g, &diff, &mut grads.d_queries[i]);
            axpy(2.0 * g, &diff, &mut grads.d_prototypes[j]);
        }
    }
    Ok(LossTerm { value, grads })
}

/// `Σ_i KL(P_proto(·|q_i) ‖ P_clf(·|q_i))`.
pub fn kl_loss(
    batch: &QueryBatch,
    bank: &PrototypeBank,
    clf: &LinearClassifier,
    stop_teacher: bool,
) -> Result<LossTerm> {
    batch.check(bank)?;
    if clf.classes != bank.class_ids() {
        return Err(Error::config(format!(
            "classifier classes {:?} do not match bank classes {:?}",
            clf.classes,
            bank.class_ids()
        )));
    }
    let protos = bank.entries();
    let dim = protos[0].vector.len();
    let mut grads = EmbeddingGrads::zeros(batch.len(), protos.len(), dim);
    let mut clf_grads = Linear::zeros(clf.num_outputs(), dim);
    let mut value = 0.0;
    let mut diff = vec![0.0; dim];
    for (i, q) in batch.embeddings.iter().enumerate() {
        let a: Vec<f64> = protos
            .iter()
            .map(|p| -crate::numeric::sq_euclidean_unchecked(q, &p.vector))
            .collect();
        let z = clf.logits(q)?;
        let (lse_a, lse_z) = (log_sum_exp(&a), log_sum_exp(&z));
        let log_p: Vec<f64> = a.iter().map(|v| v - lse_a).collect();
        let log_q: Vec<f64> = z.iter().map(|v| v - lse_z).collect();
        let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
        let kl: f64 = p
            .iter()
            .zip(log_p.iter().zip(&log_q))
            .map(|(pj, (lp, lq))| pj * (lp - lq))
            .sum();
        value += kl;

        // Student side: ∂KL/∂z_j = Q_j - P_j.
        let dz: Vec<f64> = log_q.iter().zip(&p).map(|(lq, pj)| lq.exp() - pj).collect();
        let dq_clf = clf.backward(q, &dz, &mut clf_grads);
        axpy(1.0, &dq_clf, &mut grads.d_queries[i]);

        if stop_teacher {
            continue;
        }
        // Teacher side: ∂KL/∂a_j = P_j (log P_j - log Q_j - KL).
        for (j, proto) in protos.iter().enumerate() {
            let g = p[j] * (log_p[j] - log_q[j] - kl);
            if g == 0.0 {
                continue;
            }
            for ((d, x), y) in diff.iter_mut().zip(q).zip(&proto.vector) {
                *d = x - y;
            }
            axpy(-2.0 * g, &diff, &mut grads.d_queries[i]);
            axpy(2.0 * g, &diff, &mut grads.d_prototypes[j]);
        }
    }
    grads.classifier = Some(clf_grads);
    Ok(LossTerm { value, grads })
}

/// `Σ_i -log softmax(s_i)[y_i]` with `s_ij = ⟨q_i, p_j⟩ / τ`.
///
/// When the background prototype is excluded from the anchors, background
/// queries have no positive and are skipped.
pub fn alignment_loss(
    batch: &QueryBatch,
    bank: &PrototypeBank,
    temperature: f64,
    include_background: bool,
) -> Result<LossTerm> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let targets = batch.check(bank)?;
    let protos = bank.entries();
    let dim = protos[0].vector.len();
    let anchors: Vec<usize> = (0..protos.len())
        .filter(|&j| include_background || !protos[j].class_id.is_background())
        .collect();
    let mut grads = EmbeddingGrads::zeros(batch.len(), protos.len(), dim);
    let mut value = 0.0;
    if anchors.is_empty() {
        return Ok(LossTerm { value, grads });
    }
    let inv_t = 1.0 / temperature;
    for (i, (q, &y)) in batch.embeddings.iter().zip(&targets).enumerate() {
        let Some(pos) = anchors.iter().position(|&j| j == y) else {
            continue;
        };
        let s: Vec<f64> = anchors
            .iter()
            .map(|&j| dot_unchecked(q, &protos[j].vector) * inv_t)
            .collect();
        let lse = log_sum_exp(&s);
        value += lse - s[pos];
        for (k, &j) in anchors.iter().enumerate() {
            let g = (s[k] - lse).exp() - if k == pos { 1.0 } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            axpy(g * inv_t, &protos[j].vector, &mut grads.d_queries[i]);
            axpy(g * inv_t, q, &mut grads.d_prototypes[j]);
        }
    }
    Ok(LossTerm { value, grads })
}

/// Loss components; `l_total = l_match + λ_KL l_kl + λ_align l_align`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_match: f64,
    pub l_kl: f64,
    pub l_align: f64,
    pub l_total: f64,
}

impl LossValues {
    fn combine(l_match: f64, l_kl: f64, l_align: f64, (wk, wa): (f64, f64)) -> Self {
        LossValues {
            l_match,
            l_kl,
            l_align,
            l_total: l_match + wk * l_kl + wa * l_align,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_match, self.l_kl, self.l_align, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    /// Plain sums over queries.
    pub raw: LossValues,
    /// Per-query means.
    pub mean: LossValues,
    /// Gradients of the configured reduction of `l_total`.
    pub grads: EmbeddingGrads,
    pub reduction: Reduction,
}

impl TotalLoss {
    /// Values in the configured reduction.
    pub fn values(&self) -> LossValues {
        match self.reduction {
            Reduction::Sum => self.raw,
            Reduction::Mean => self.mean,
        }
    }
}

pub fn total_loss(
    batch: &QueryBatch,
    bank: &PrototypeBank,
    clf: &LinearClassifier,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let weights = cfg.weights();
    let m = matching_loss(batch, bank)?;
    let k = kl_loss(batch, bank, clf, cfg.kl_stop_teacher)?;
    let a = alignment_loss(batch, bank, cfg.temperature, cfg.align_include_background)?;

    let mut grads = m.grads;
    if weights.0 != 0.0 {
        grads.add_scaled(&k.grads, weights.0);
    }
    if weights.1 != 0.0 {
        grads.add_scaled(&a.grads, weights.1);
    }
    let n = batch.len() as f64;
    if cfg.reduction == Reduction::Mean {
        grads.scale(1.0 / n);
    }
    let raw = LossValues::combine(m.value, k.value, a.value, weights);
    let mean = LossValues::combine(m.value / n, k.value / n, a.value / n, weights);
    if !raw.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(TotalLoss {
        raw,
        mean,
        grads,
        reduction: cfg.reduction,
    })
}
