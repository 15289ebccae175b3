//! Training objectives: N-pair product quantization loss, cosine
//! classification loss, subspace entropy, and the combined objective with
//! its mini-max gradient routing.
//!
//! All features passed in here are intra-normalized. Labels are multi-hot
//! rows of length `N_c` (one-hot for single-label data).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GpqError, Result};
use crate::numerics::{dot, l2_normalize_in_place, softmax_into, SubspaceShape, PROB_FLOOR};
use crate::quantizer::{soft_quantize, soft_quantize_backward, Codebook};

/// Cosine classifier: one unit-norm sub-prototype per (subspace, class).
///
/// Stored subspace-major, class-major, component-minor, so the sub-prototype
/// `c_ml` is a contiguous `d`-slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    num_subspaces: usize,
    sub_dim: usize,
    num_classes: usize,
    weights: Vec<f64>,
    pub beta: f64,
}

impl Prototypes {
    pub fn random(shape: &SubspaceShape, num_classes: usize, beta: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(GpqError::InvalidShape("prototypes need at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; shape.num_subspaces * num_classes * shape.sub_dim];
        for c in weights.chunks_exact_mut(shape.sub_dim) {
            loop {
                c.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                if l2_normalize_in_place(c).is_ok() {
                    break;
                }
            }
        }
        Ok(Self {
            num_subspaces: shape.num_subspaces,
            sub_dim: shape.sub_dim,
            num_classes,
            weights,
            beta,
        })
    }

    pub fn from_weights(
        shape: &SubspaceShape,
        num_classes: usize,
        weights: Vec<f64>,
        beta: f64,
    ) -> Result<Self> {
        let expected = shape.num_subspaces * num_classes * shape.sub_dim;
        if num_classes == 0 || weights.len() != expected {
            return Err(GpqError::ShapeMismatch(format!(
                "prototypes have {} values, expected {expected}",
                weights.len()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) || !beta.is_finite() {
            return Err(GpqError::NonFinite("prototypes".into()));
        }
        for (i, c) in weights.chunks_exact(shape.sub_dim).enumerate() {
            let n = dot(c, c).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(GpqError::InvalidShape(format!(
                    "sub-prototype {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self {
            num_subspaces: shape.num_subspaces,
            sub_dim: shape.sub_dim,
            num_classes,
            weights,
            beta,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Raw prototype storage. Writers must restore unit norms (see
    /// [`Prototypes::renormalize`]) before relying on them.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// The `N_c x d` block of sub-prototypes for subspace `m`.
    pub fn subspace(&self, m: usize) -> &[f64] {
        let span = self.num_classes * self.sub_dim;
        &self.weights[m * span..(m + 1) * span]
    }

    pub fn renormalize(&mut self) -> Result<()> {
        for c in self.weights.chunks_exact_mut(self.sub_dim) {
            l2_normalize_in_place(c)?;
        }
        Ok(())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_subspaces * self.sub_dim {
            return Err(GpqError::ShapeMismatch(format!(
                "feature has length {}, prototypes expect {}",
                x.len(),
                self.num_subspaces * self.sub_dim
            )));
        }
        Ok(())
    }

    /// Scaled class probabilities `softmax(beta * W_mᵀ x_m)` for subspace `m`.
    fn probabilities(&self, x: &[f64], m: usize, out: &mut [f64]) {
        let d = self.sub_dim;
        let xm = &x[m * d..(m + 1) * d];
        let logits: Vec<f64> = self.subspace(m).chunks_exact(d).map(|c| dot(c, xm)).collect();
        softmax_into(&logits, self.beta, out);
    }

    /// Adds `dL/dlogit` (per class, already including beta) for subspace `m`
    /// into the feature and prototype gradients.
    fn backprop_logits(&self, x: &[f64], m: usize, g_logit: &[f64], gx: &mut [f64], gw: &mut [f64]) {
        let d = self.sub_dim;
        let xm = &x[m * d..(m + 1) * d];
        let block = self.subspace(m);
        let span = self.num_classes * d;
        for (l, &g) in g_logit.iter().enumerate() {
            let c = &block[l * d..(l + 1) * d];
            let gc = &mut gw[m * span + l * d..m * span + (l + 1) * d];
            for i in 0..d {
                gx[m * d + i] += g * c[i];
                gc[i] += g * xm[i];
            }
        }
    }
}

/// Output of [`npq_loss`].
#[derive(Debug, Clone)]
pub struct NpqOutput {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    pub grad_features: Vec<Vec<f64>>,
    pub grad_quantized: Vec<Vec<f64>>,
}

/// Loss value with gradients for one feature and for the prototypes.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub loss: f64,
    pub grad_feature: Vec<f64>,
    pub grad_prototypes: Vec<f64>,
}

/// Label agreement of `a` and `b` as an inner product of multi-hot rows.
fn agreement(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

/// Normalizes a multi-hot label row into a target distribution.
fn target_distribution(label: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = label.iter().sum();
    if !(s > 0.0) || label.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(GpqError::DegenerateBatch(
            "label row has no positive entries".into(),
        ));
    }
    Ok(label.iter().map(|v| v / s).collect())
}

/// N-pair product quantization loss over a labeled batch.
///
/// Each anchor `x_b` scores every quantized vector in the batch,
/// `S_bj = x_b . q_j`, and is trained by cross-entropy of `softmax(S_b)`
/// against its label agreement row normalized to sum one.
pub fn npq_loss(features: &[Vec<f64>], quantized: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<NpqOutput> {
    let b = features.len();
    if b < 2 {
        return Err(GpqError::DegenerateBatch(format!("N-pair loss needs B >= 2, got {b}")));
    }
    if quantized.len() != b || labels.len() != b {
        return Err(GpqError::ShapeMismatch(format!(
            "batch sizes differ: {b} features, {} quantized, {} labels",
            quantized.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().chain(quantized).any(|v| v.len() != dim) {
        return Err(GpqError::ShapeMismatch("feature lengths differ within batch".into()));
    }

    let inv_b = 1.0 / b as f64;
    let mut per_anchor = Vec::with_capacity(b);
    let mut grad_features = vec![vec![0.0; dim]; b];
    let mut grad_quantized = vec![vec![0.0; dim]; b];
    let mut sims = vec![0.0; b];
    let mut probs = vec![0.0; b];
    for (i, x) in features.iter().enumerate() {
        let raw_targets: Vec<f64> = labels.iter().map(|y| agreement(&labels[i], y)).collect();
        let total: f64 = raw_targets.iter().sum();
        if !(total > 0.0) {
            return Err(GpqError::DegenerateBatch(format!(
                "anchor {i} agrees with no label in the batch"
            )));
        }
        for (s, q) in sims.iter_mut().zip(quantized) {
            *s = dot(x, q);
        }
        softmax_into(&sims, 1.0, &mut probs);
        let mut loss = 0.0;
        for (j, &t) in raw_targets.iter().enumerate() {
            let t = t / total;
            if t > 0.0 {
                loss -= t * probs[j].max(PROB_FLOOR).ln();
            }
            let g = (probs[j] - t) * inv_b;
            if g != 0.0 {
                for k in 0..dim {
                    grad_features[i][k] += g * quantized[j][k];
                    grad_quantized[j][k] += g * x[k];
                }
            }
        }
        per_anchor.push(loss);
    }
    let loss = per_anchor.iter().sum::<f64>() * inv_b;
    Ok(NpqOutput {
        loss,
        per_anchor,
        grad_features,
        grad_quantized,
    })
}

/// Cosine classification loss of one labeled feature, averaged over
/// subspaces.
pub fn cls_loss(feature: &[f64], label: &[f64], proto: &Prototypes) -> Result<ClassifierOutput> {
    proto.check(feature)?;
    if label.len() != proto.num_classes {
        return Err(GpqError::ShapeMismatch(format!(
            "label has {} classes, prototypes have {}",
            label.len(),
            proto.num_classes
        )));
    }
    let target = target_distribution(label)?;
    let m_count = proto.num_subspaces;
    let inv_m = 1.0 / m_count as f64;
    let mut grad_feature = vec![0.0; feature.len()];
    let mut grad_prototypes = vec![0.0; proto.weights.len()];
    let mut probs = vec![0.0; proto.num_classes];
    let mut g_logit = vec![0.0; proto.num_classes];
    let mut loss = 0.0;
    for m in 0..m_count {
        proto.probabilities(feature, m, &mut probs);
        for l in 0..proto.num_classes {
            if target[l] > 0.0 {
                loss -= target[l] * probs[l].max(PROB_FLOOR).ln();
            }
            g_logit[l] = proto.beta * (probs[l] - target[l]) * inv_m;
        }
        proto.backprop_logits(feature, m, &g_logit, &mut grad_feature, &mut grad_prototypes);
    }
    Ok(ClassifierOutput {
        loss: loss * inv_m,
        grad_feature,
        grad_prototypes,
    })
}

/// Mean over subspaces of the entropy of the scaled class prediction of an
/// unlabeled feature.
pub fn sem_loss(feature: &[f64], proto: &Prototypes) -> Result<ClassifierOutput> {
    proto.check(feature)?;
    let m_count = proto.num_subspaces;
    let inv_m = 1.0 / m_count as f64;
    let mut grad_feature = vec![0.0; feature.len()];
    let mut grad_prototypes = vec![0.0; proto.weights.len()];
    let mut probs = vec![0.0; proto.num_classes];
    let mut g_logit = vec![0.0; proto.num_classes];
    let mut loss = 0.0;
    for m in 0..m_count {
        proto.probabilities(feature, m, &mut probs);
        let logs: Vec<f64> = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        let h: f64 = -probs.iter().zip(&logs).map(|(p, l)| p * l).sum::<f64>();
        loss += h;
        // dH/dz_l = -p_l (ln p_l + H)
        for l in 0..proto.num_classes {
            g_logit[l] = -proto.beta * probs[l] * (logs[l] + h) * inv_m;
        }
        proto.backprop_logits(feature, m, &g_logit, &mut grad_feature, &mut grad_prototypes);
    }
    Ok(ClassifierOutput {
        loss: loss * inv_m,
        grad_feature,
        grad_prototypes,
    })
}

/// A training batch of `B` labeled and `B` unlabeled intra-normalized
/// features.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub labeled: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub unlabeled: Vec<Vec<f64>>,
}

impl LabeledBatch {
    pub fn new(labeled: Vec<Vec<f64>>, labels: Vec<Vec<f64>>, unlabeled: Vec<Vec<f64>>) -> Result<Self> {
        if labeled.len() != labels.len() || labeled.len() != unlabeled.len() {
            return Err(GpqError::ShapeMismatch(format!(
                "batch needs equal labeled/unlabeled counts ({} labeled, {} labels, {} unlabeled)",
                labeled.len(),
                labels.len(),
                unlabeled.len()
            )));
        }
        Ok(Self {
            labeled,
            labels,
            unlabeled,
        })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }
}

/// Loss weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub sem: f64,
}

/// Combined objective `L_npq + lambda1 * L_cls - lambda2 * L_sem` and its
/// routed gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub total: f64,
    pub npq: f64,
    /// Batch mean of the classification loss.
    pub cls: f64,
    /// Batch mean of the subspace entropy.
    pub sem: f64,
    /// `dL_T/dZ`; codewords descend the total objective.
    pub grad_codewords: Vec<f64>,
    /// `dL_T/dW`; through the `-lambda2` term this ascends the entropy.
    pub grad_prototypes: Vec<f64>,
    /// Gradient for each labeled feature, propagated to the encoder as is.
    pub labeled_grads: Vec<Vec<f64>>,
    /// `dL_T/dx̂ᵁ` for each unlabeled feature. The encoder receives it
    /// through gradient reversal, so it descends the entropy.
    pub unlabeled_reversal_grads: Vec<Vec<f64>>,
}

/// Evaluates the combined objective on a batch.
///
/// With `classifier == None` the classification and entropy terms are
/// skipped entirely and only the N-pair loss is trained.
pub fn total_objective(
    batch: &LabeledBatch,
    cb: &Codebook,
    proto: Option<&Prototypes>,
    weights: LossWeights,
) -> Result<ObjectiveOutput> {
    if weights.cls < 0.0 || weights.sem < 0.0 {
        return Err(GpqError::InvalidConfig("loss weights must be non-negative".into()));
    }
    let b = batch.len();
    let shape = cb.shape();
    let mut quantized = Vec::with_capacity(b);
    let mut assignments = Vec::with_capacity(b);
    for x in &batch.labeled {
        let (q, a) = soft_quantize(x, cb)?;
        quantized.push(q);
        assignments.push(a);
    }
    let npq = npq_loss(&batch.labeled, &quantized, &batch.labels)?;

    let mut grad_codewords = vec![0.0; cb.words().len()];
    let mut labeled_grads = npq.grad_features.clone();
    for ((x, a), (gq, gx)) in batch
        .labeled
        .iter()
        .zip(&assignments)
        .zip(npq.grad_quantized.iter().zip(labeled_grads.iter_mut()))
    {
        soft_quantize_backward(x, cb, a, gq, gx, &mut grad_codewords);
    }

    let mut out = ObjectiveOutput {
        total: npq.loss,
        npq: npq.loss,
        cls: 0.0,
        sem: 0.0,
        grad_codewords,
        grad_prototypes: Vec::new(),
        labeled_grads,
        unlabeled_reversal_grads: vec![vec![0.0; shape.dim]; batch.unlabeled.len()],
    };
    let Some(proto) = proto else {
        return Ok(out);
    };

    let inv_b = 1.0 / b as f64;
    out.grad_prototypes = vec![0.0; proto.weights().len()];
    for ((x, y), gx) in batch
        .labeled
        .iter()
        .zip(&batch.labels)
        .zip(out.labeled_grads.iter_mut())
    {
        let c = cls_loss(x, y, proto)?;
        out.cls += c.loss * inv_b;
        let scale = weights.cls * inv_b;
        gx.iter_mut().zip(&c.grad_feature).for_each(|(g, v)| *g += scale * v);
        out.grad_prototypes
            .iter_mut()
            .zip(&c.grad_prototypes)
            .for_each(|(g, v)| *g += scale * v);
    }
    for (x, gx) in batch.unlabeled.iter().zip(out.unlabeled_reversal_grads.iter_mut()) {
        let s = sem_loss(x, proto)?;
        out.sem += s.loss * inv_b;
        let scale = -weights.sem * inv_b;
        gx.iter_mut().zip(&s.grad_feature).for_each(|(g, v)| *g += scale * v);
        out.grad_prototypes
            .iter_mut()
            .zip(&s.grad_prototypes)
            .for_each(|(g, v)| *g += scale * v);
    }
    out.total = out.npq + weights.cls * out.cls - weights.sem * out.sem;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::intra_normalize;

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    fn random_feature(shape: &SubspaceShape, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..shape.dim).map(|_| StandardNormal.sample(rng)).collect();
        intra_normalize(&raw, shape).unwrap()
    }

    /// Sub-prototypes along the coordinate axes of each subspace.
    fn axis_prototypes(shape: &SubspaceShape, classes: usize, beta: f64) -> Prototypes {
        let w: Vec<f64> = (0..shape.num_subspaces)
            .flat_map(|_| (0..classes).flat_map(|l| one_hot(shape.sub_dim, l)))
            .collect();
        Prototypes::from_weights(shape, classes, w, beta).unwrap()
    }

    #[test]
    fn npq_two_identical_items_is_ln2() {
        let x = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
        let y = vec![one_hot(3, 1), one_hot(3, 1)];
        let out = npq_loss(&x, &x, &y).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        assert!(out.per_anchor.iter().all(|l| (l - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn npq_rejects_small_and_unlabeled_batches() {
        let x = vec![vec![1.0, 0.0]];
        assert!(matches!(npq_loss(&x, &x, &[one_hot(2, 0)]), Err(GpqError::DegenerateBatch(_))));
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let y = vec![vec![0.0, 0.0], one_hot(2, 0)];
        assert!(matches!(npq_loss(&x, &x, &y), Err(GpqError::DegenerateBatch(_))));
    }

    #[test]
    fn npq_permutation_and_relabeling_invariance() {
        let shape = SubspaceShape::new(2, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..5).map(|_| random_feature(&shape, &mut rng)).collect();
        let q: Vec<Vec<f64>> = (0..5).map(|_| random_feature(&shape, &mut rng)).collect();
        let y: Vec<Vec<f64>> = [0, 1, 0, 2, 1].iter().map(|&c| one_hot(3, c)).collect();
        let base = npq_loss(&x, &q, &y).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let px: Vec<_> = perm.iter().map(|&i| x[i].clone()).collect();
        let pq: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
        let py: Vec<_> = perm.iter().map(|&i| y[i].clone()).collect();
        let permuted = npq_loss(&px, &pq, &py).unwrap();
        assert!((base.loss - permuted.loss).abs() < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            assert!((permuted.per_anchor[k] - base.per_anchor[i]).abs() < 1e-12);
        }

        let relabel = [2usize, 0, 1];
        let ry: Vec<Vec<f64>> = [0, 1, 0, 2, 1].iter().map(|&c| one_hot(3, relabel[c])).collect();
        assert!((npq_loss(&x, &q, &ry).unwrap().loss - base.loss).abs() < 1e-15);
    }

    #[test]
    fn cls_closed_form_on_axis_prototypes() {
        let shape = SubspaceShape::new(3, 10, 4).unwrap();
        let proto = axis_prototypes(&shape, 10, 4.0);
        let x: Vec<f64> = (0..3).flat_map(|_| one_hot(10, 2)).collect();
        let out = cls_loss(&x, &one_hot(10, 2), &proto).unwrap();
        let e4 = 4f64.exp();
        let expect = -(e4 / (e4 + 9.0)).ln();
        assert!((out.loss - expect).abs() < 1e-12);
        assert!((out.loss - 0.152584).abs() < 1e-6);
    }

    #[test]
    fn identical_prototypes_give_uniform_predictions() {
        let shape = SubspaceShape::new(2, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_feature(&SubspaceShape::new(1, 3, 2).unwrap(), &mut rng);
        let w: Vec<f64> = (0..2 * 5).flat_map(|_| c.clone()).collect();
        let proto = Prototypes::from_weights(&shape, 5, w, 4.0).unwrap();
        for _ in 0..5 {
            let x = random_feature(&shape, &mut rng);
            let cls = cls_loss(&x, &one_hot(5, 3), &proto).unwrap();
            assert!((cls.loss - 5f64.ln()).abs() < 1e-12);
            let sem = sem_loss(&x, &proto).unwrap();
            assert!((sem.loss - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_prediction_has_low_entropy() {
        let shape = SubspaceShape::new(2, 4, 4).unwrap();
        let x: Vec<f64> = (0..2).flat_map(|_| one_hot(4, 1)).collect();
        let low = sem_loss(&x, &axis_prototypes(&shape, 4, 60.0)).unwrap().loss;
        let mid = sem_loss(&x, &axis_prototypes(&shape, 4, 4.0)).unwrap().loss;
        assert!(low < 1e-12, "{low}");
        assert!(low < mid && mid < 4f64.ln());
    }

    #[test]
    fn sem_bounded_by_log_classes() {
        let shape = SubspaceShape::new(3, 5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let proto = Prototypes::random(&shape, 7, 4.0, seed).unwrap();
            let x = random_feature(&shape, &mut rng);
            let h = sem_loss(&x, &proto).unwrap().loss;
            assert!((0.0..=7f64.ln() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn zero_weights_reduce_to_npq() {
        let shape = SubspaceShape::new(2, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cb = Codebook::random(shape, 20.0, 1);
        let proto = Prototypes::random(&shape, 3, 4.0, 2).unwrap();
        let batch = LabeledBatch::new(
            (0..4).map(|_| random_feature(&shape, &mut rng)).collect(),
            [0, 1, 1, 2].iter().map(|&c| one_hot(3, c)).collect(),
            (0..4).map(|_| random_feature(&shape, &mut rng)).collect(),
        )
        .unwrap();
        let zero = LossWeights { cls: 0.0, sem: 0.0 };
        let with = total_objective(&batch, &cb, Some(&proto), zero).unwrap();
        let without = total_objective(&batch, &cb, None, zero).unwrap();
        assert_eq!(with.total, with.npq);
        assert_eq!(with.grad_codewords, without.grad_codewords);
        assert_eq!(with.labeled_grads, without.labeled_grads);
        assert!(with.grad_prototypes.iter().all(|&g| g == 0.0));
        assert!(with.unlabeled_reversal_grads.iter().flatten().all(|&g| g == 0.0));

        let w = LossWeights { cls: 0.3, sem: 0.7 };
        let full = total_objective(&batch, &cb, Some(&proto), w).unwrap();
        assert!((full.total - (full.npq + 0.3 * full.cls - 0.7 * full.sem)).abs() < 1e-10);
    }

    #[test]
    fn batch_requires_equal_counts() {
        assert!(LabeledBatch::new(vec![vec![1.0]], vec![vec![1.0]], vec![]).is_err());
    }
}
