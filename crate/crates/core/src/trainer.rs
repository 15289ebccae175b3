//! Semi-supervised training loop.
//!
//! Each step encodes `B` labeled and `B` unlabeled inputs, evaluates the
//! combined objective, backpropagates into the encoder (entropy gradients
//! through the reversal hook), and applies one ADAM update to the encoder,
//! the codewords and the prototypes. Codewords and prototypes are projected
//! back onto the unit sphere after every update.

use std::fs;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::encoder::{EncoderParams, FeatureEncoder, GradientBundle};
use crate::error::{GpqError, Result};
use crate::numerics::{norm, SubspaceShape};
use crate::objectives::{total_objective, LabeledBatch, LossWeights, Prototypes};
use crate::quantizer::{soft_assign, Codebook};

pub const MODEL_MAGIC: &[u8; 4] = b"GPQM";
pub const MODEL_VERSION: u16 = 1;

/// When the prototype-to-codeword soft update is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtoUpdate {
    Never,
    AfterTraining,
    EveryEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Soft-assignment scale.
    pub alpha: f64,
    /// Classifier logit scale.
    pub beta: f64,
    pub num_codewords: usize,
    pub sub_dim: usize,
    pub num_subspaces: usize,
    pub hidden: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub decay_rate: f64,
    pub decay_interval: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub proto_update: ProtoUpdate,
    /// Train the cosine classifier at all. With `false` only the N-pair
    /// loss is optimized and prototypes stay at their initial values.
    pub classifier: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: 4.0,
            num_codewords: 16,
            sub_dim: 12,
            num_subspaces: 12,
            hidden: 128,
            lambda1: 0.1,
            lambda2: 0.1,
            lr: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            decay_rate: 0.9,
            decay_interval: 500,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            proto_update: ProtoUpdate::AfterTraining,
            classifier: true,
        }
    }
}

impl TrainConfig {
    /// Config for a code length of `bits` with 16 codewords per subspace.
    pub fn with_bits(bits: usize) -> Result<Self> {
        let mut c = Self::default();
        c.set_bits(bits)?;
        Ok(c)
    }

    /// Sets `M = bits / log2(K)`.
    pub fn set_bits(&mut self, bits: usize) -> Result<()> {
        let per = self.num_codewords.trailing_zeros() as usize;
        if per == 0 || bits == 0 || bits % per != 0 {
            return Err(GpqError::InvalidConfig(format!(
                "{bits} bits is not a multiple of log2(K)={per}"
            )));
        }
        self.num_subspaces = bits / per;
        Ok(())
    }

    pub fn shape(&self) -> Result<SubspaceShape> {
        SubspaceShape::new(self.num_subspaces, self.sub_dim, self.num_codewords)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.lambda1,
            sem: self.lambda2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("decay_rate", self.decay_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GpqError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(GpqError::InvalidConfig("lambda1/lambda2 must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(GpqError::InvalidConfig("ADAM betas must lie in [0, 1)".into()));
        }
        if self.hidden == 0 || self.decay_interval == 0 || self.batch_size < 2 {
            return Err(GpqError::InvalidConfig(
                "hidden and decay_interval must be positive, batch_size at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate after `step` updates: `lr * decay_rate^(step / interval)`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr * self.decay_rate.powf(step as f64 / self.decay_interval as f64)
    }
}

/// Indices into the labeled and unlabeled training sets for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Seeded batch schedule pairing labeled and unlabeled items.
///
/// An epoch has `max(n_labeled, n_unlabeled) / B` batches. Both sets are
/// shuffled independently every epoch; the smaller one is recycled with a
/// fresh shuffle whenever it runs out. Epoch `e` depends only on the seed
/// and `e`.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    seed: u64,
}

pub fn make_batches(n_labeled: usize, n_unlabeled: usize, batch_size: usize, seed: u64) -> Result<BatchSchedule> {
    if n_labeled == 0 || n_unlabeled == 0 {
        return Err(GpqError::EmptyDataset(format!(
            "{n_labeled} labeled and {n_unlabeled} unlabeled items"
        )));
    }
    if batch_size == 0 || batch_size > n_labeled.min(n_unlabeled) {
        return Err(GpqError::InvalidConfig(format!(
            "batch size {batch_size} must be in 1..={}",
            n_labeled.min(n_unlabeled)
        )));
    }
    Ok(BatchSchedule {
        n_labeled,
        n_unlabeled,
        batch_size,
        seed,
    })
}

impl BatchSchedule {
    pub fn batches_per_epoch(&self) -> usize {
        self.n_labeled.max(self.n_unlabeled) / self.batch_size
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchIndices> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let needed = self.batches_per_epoch() * self.batch_size;
        let labeled = Self::stream(self.n_labeled, needed, &mut rng);
        let unlabeled = Self::stream(self.n_unlabeled, needed, &mut rng);
        labeled
            .chunks_exact(self.batch_size)
            .zip(unlabeled.chunks_exact(self.batch_size))
            .map(|(l, u)| BatchIndices {
                labeled: l.to_vec(),
                unlabeled: u.to_vec(),
            })
            .collect()
    }

    fn stream(n: usize, needed: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(needed + n);
        while out.len() < needed {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            out.extend(perm);
        }
        out.truncate(needed);
        out
    }
}

/// ADAM with bias correction, one moment buffer per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(group_sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            first: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`. All gradients are checked
    /// for finiteness before any parameter is touched.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], names: &[&str], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(GpqError::ShapeMismatch(format!(
                "optimizer has {} groups, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(GpqError::ShapeMismatch(format!(
                    "group {} has {} parameters, gradient has {}",
                    names.get(i).copied().unwrap_or("?"),
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GpqError::NonFiniteGradient(
                    names.get(i).copied().unwrap_or("?").to_string(),
                ));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything needed at inference time: encoder, codebook, classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GpqModel {
    pub encoder: EncoderParams,
    pub codebook: Codebook,
    pub prototypes: Prototypes,
}

impl GpqModel {
    pub fn shape(&self) -> &SubspaceShape {
        self.codebook.shape()
    }

    /// Intra-normalized feature of a raw input.
    pub fn feature(&self, raw: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encoder.encode(raw, self.codebook.shape())?.0)
    }

    pub fn features(&self, raws: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        raws.par_iter().map(|r| self.feature(r)).collect()
    }

    /// Checkpoint bytes: `GPQM`, version, the encoder checkpoint, then the
    /// codebook (`M K d` as u32, alpha as f32, `M K d` floats) and the
    /// prototypes (`N_c` as u32, beta as f32, `M N_c d` floats).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        binio::put_u16(&mut buf, MODEL_VERSION);
        buf.extend(self.encoder.to_bytes()?);
        let s = self.shape();
        binio::put_u32(&mut buf, binio::dim_u32(s.num_subspaces, "M")?);
        binio::put_u32(&mut buf, binio::dim_u32(s.num_codewords, "K")?);
        binio::put_u32(&mut buf, binio::dim_u32(s.sub_dim, "d")?);
        binio::put_f32(&mut buf, self.codebook.alpha as f32);
        binio::put_f64_as_f32(&mut buf, self.codebook.words());
        binio::put_u32(&mut buf, binio::dim_u32(self.prototypes.num_classes(), "N_c")?);
        binio::put_f32(&mut buf, self.prototypes.beta as f32);
        binio::put_f64_as_f32(&mut buf, self.prototypes.weights());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let encoder = EncoderParams::read(&mut r)?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let shape = SubspaceShape::new(m, d, k)?;
        if encoder.output != shape.dim {
            return Err(GpqError::ShapeMismatch(format!(
                "encoder output {} does not match codebook D={}",
                encoder.output, shape.dim
            )));
        }
        let alpha = r.f32()? as f64;
        let words = r.f32_vec(m * k * d)?;
        let codebook = Codebook::from_words(shape, words, alpha)?;
        let classes = r.u32()? as usize;
        let beta = r.f32()? as f64;
        let weights = r.f32_vec(m * classes * d)?;
        let prototypes = Prototypes::from_weights(&shape, classes, weights, beta)?;
        if r.remaining() != 0 {
            return Err(GpqError::Parse(format!(
                "{} trailing bytes after model checkpoint",
                r.remaining()
            )));
        }
        Ok(Self {
            encoder,
            codebook,
            prototypes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: GpqModel,
    pub optimizer: Adam,
}

impl ModelState {
    pub fn init(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let shape = config.shape()?;
        // Separate seeds per component keep them independent of each other.
        let encoder = EncoderParams::init(input_dim, config.hidden, shape.dim, config.seed)?;
        let codebook = Codebook::random(shape, config.alpha, config.seed.wrapping_add(1));
        let prototypes = Prototypes::random(&shape, num_classes, config.beta, config.seed.wrapping_add(2))?;
        let mut sizes: Vec<usize> = encoder.param_groups().iter().map(|g| g.len()).collect();
        sizes.push(codebook.words().len());
        sizes.push(prototypes.weights().len());
        Ok(Self {
            model: GpqModel {
                encoder,
                codebook,
                prototypes,
            },
            optimizer: Adam::new(&sizes, config.adam_beta1, config.adam_beta2, config.adam_eps),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.steps()
    }

    /// Largest deviation from unit norm over all codewords and prototypes.
    pub fn max_norm_deviation(&self) -> f64 {
        let d = self.model.codebook.shape().sub_dim;
        self.model
            .codebook
            .words()
            .chunks_exact(d)
            .chain(self.model.prototypes.weights().chunks_exact(d))
            .map(|v| (norm(v) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// One ADAM update from the given gradients, followed by unit-norm
    /// projection of codewords and prototypes.
    pub fn apply_gradients(
        &mut self,
        encoder_grads: &GradientBundle,
        codeword_grads: &[f64],
        prototype_grads: &[f64],
        config: &TrainConfig,
    ) -> Result<()> {
        let lr = config.learning_rate(self.optimizer.steps());
        let GpqModel {
            encoder,
            codebook,
            prototypes,
        } = &mut self.model;
        let mut names = encoder.group_names();
        names.extend(["codewords", "prototypes"]);
        let mut params = encoder.param_groups_mut();
        params.push(codebook.words_mut());
        params.push(prototypes.weights_mut());
        let mut grads: Vec<&[f64]> = encoder_grads.groups.iter().map(|g| g.as_slice()).collect();
        grads.push(codeword_grads);
        grads.push(prototype_grads);
        self.optimizer.step(params, &grads, &names, lr)?;
        codebook.renormalize()?;
        prototypes.renormalize()
    }
}

/// Labeled training inputs with multi-hot label rows.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

/// Mean losses over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub npq: f64,
    pub cls: f64,
    pub sem: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochMetrics {
    /// `key=value` log line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} l_npq={:.9} l_cls={:.9} l_sem={:.9} l_total={:.9} lr={:.9e}",
            self.epoch, self.npq, self.cls, self.sem, self.total, self.lr
        )
    }
}

/// Epoch-at-a-time driver around [`ModelState`].
pub struct Trainer<'a> {
    config: TrainConfig,
    labeled: &'a LabeledSet,
    unlabeled: &'a [Vec<f64>],
    schedule: BatchSchedule,
    state: ModelState,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(labeled: &'a LabeledSet, unlabeled: &'a [Vec<f64>], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if labeled.inputs.len() != labeled.labels.len() {
            return Err(GpqError::ShapeMismatch(format!(
                "{} labeled inputs but {} label rows",
                labeled.inputs.len(),
                labeled.labels.len()
            )));
        }
        let input_dim = labeled
            .inputs
            .first()
            .map(|v| v.len())
            .ok_or_else(|| GpqError::EmptyDataset("no labeled inputs".into()))?;
        let num_classes = labeled.labels[0].len();
        if labeled.inputs.iter().chain(unlabeled).any(|v| v.len() != input_dim)
            || labeled.labels.iter().any(|y| y.len() != num_classes)
        {
            return Err(GpqError::ShapeMismatch("inconsistent input or label dimensions".into()));
        }
        if labeled.inputs.iter().chain(unlabeled).flatten().any(|v| !v.is_finite()) {
            return Err(GpqError::NonFinite("training inputs".into()));
        }
        let schedule = make_batches(labeled.inputs.len(), unlabeled.len(), config.batch_size, config.seed)?;
        let state = ModelState::init(&config, input_dim, num_classes)?;
        Ok(Self {
            config,
            labeled,
            unlabeled,
            schedule,
            state,
            epoch: 0,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Prototypes only learn when the classifier runs with a nonzero weight.
    fn classifier_active(&self) -> bool {
        self.config.classifier && (self.config.lambda1 > 0.0 || self.config.lambda2 > 0.0)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let batches = self.schedule.epoch(self.epoch);
        let mut sums = [0.0f64; 4];
        for batch in &batches {
            // Inputs are checked up front, so later non-finite values come
            // from the parameters blowing up.
            let out = self.train_step(batch).map_err(|e| match e {
                GpqError::NonFinite(what) => {
                    GpqError::Diverged(format!("non-finite {what} at step {}", self.state.step()))
                }
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip(out) {
                *s += v;
            }
        }
        if self.config.proto_update == ProtoUpdate::EveryEpoch && self.classifier_active() {
            self.apply_proto_update()?;
        }
        let n = batches.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            npq: sums[0] / n,
            cls: sums[1] / n,
            sem: sums[2] / n,
            total: sums[3] / n,
            lr: self.config.learning_rate(self.state.step()),
        };
        debug!("{}", metrics.log_line());
        self.epoch += 1;
        Ok(metrics)
    }

    fn train_step(&mut self, batch: &BatchIndices) -> Result<[f64; 4]> {
        let model = &self.state.model;
        let shape = *model.codebook.shape();
        let encode_all = |ids: &[usize], src: &[Vec<f64>]| -> Result<Vec<_>> {
            ids.par_iter().map(|&i| model.encoder.encode(&src[i], &shape)).collect()
        };
        let labeled = encode_all(&batch.labeled, &self.labeled.inputs)?;
        let unlabeled = encode_all(&batch.unlabeled, self.unlabeled)?;
        let lb = LabeledBatch::new(
            labeled.iter().map(|(x, _)| x.clone()).collect(),
            batch.labeled.iter().map(|&i| self.labeled.labels[i].clone()).collect(),
            unlabeled.iter().map(|(x, _)| x.clone()).collect(),
        )?;
        let proto = self.classifier_active().then_some(&model.prototypes);
        let out = total_objective(&lb, &model.codebook, proto, self.config.loss_weights())?;
        if !out.total.is_finite() {
            return Err(GpqError::Diverged(format!(
                "non-finite objective at step {}",
                self.state.step()
            )));
        }

        let zeros = vec![0.0; shape.dim];
        let mut parts: Vec<GradientBundle> = labeled
            .par_iter()
            .zip(&out.labeled_grads)
            .map(|((_, cache), g)| model.encoder.backward(cache, g, &zeros))
            .collect::<Result<_>>()?;
        if proto.is_some() {
            parts.extend(
                unlabeled
                    .par_iter()
                    .zip(&out.unlabeled_reversal_grads)
                    .map(|((_, cache), g)| model.encoder.backward(cache, &zeros, g))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        // Fixed-order reduction keeps steps bit-reproducible.
        let mut enc_grads = GradientBundle::zeros_like(&model.encoder);
        for p in &parts {
            enc_grads.accumulate(p);
        }
        let proto_grads = if out.grad_prototypes.is_empty() {
            vec![0.0; model.prototypes.weights().len()]
        } else {
            out.grad_prototypes.clone()
        };
        self.state
            .apply_gradients(&enc_grads, &out.grad_codewords, &proto_grads, &self.config)?;
        Ok([out.npq, out.cls, out.sem, out.total])
    }

    fn apply_proto_update(&mut self) -> Result<()> {
        let model = &mut self.state.model;
        model.codebook = update_codewords_from_prototypes(&model.codebook, &model.prototypes, self.config.alpha)?;
        Ok(())
    }

    /// Applies the end-of-training prototype update (if configured) and
    /// returns the final state.
    pub fn finish(mut self) -> Result<ModelState> {
        if self.config.proto_update == ProtoUpdate::AfterTraining && self.classifier_active() {
            self.apply_proto_update()?;
        }
        Ok(self.state)
    }
}

/// Runs `config.epochs` epochs and returns the final state with per-epoch
/// metrics.
pub fn train(labeled: &LabeledSet, unlabeled: &[Vec<f64>], config: &TrainConfig) -> Result<(ModelState, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(labeled, unlabeled, config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.run_epoch()?);
    }
    Ok((trainer.finish()?, log))
}

/// Replaces every codeword by its soft assignment against the sub-prototypes
/// of the same subspace, re-normalized to unit length.
pub fn update_codewords_from_prototypes(cb: &Codebook, proto: &Prototypes, alpha: f64) -> Result<Codebook> {
    let shape = *cb.shape();
    if proto.num_subspaces() != shape.num_subspaces || proto.sub_dim() != shape.sub_dim {
        return Err(GpqError::ShapeMismatch(format!(
            "prototypes are {}x{}, codebook subspaces are {}x{}",
            proto.num_subspaces(),
            proto.sub_dim(),
            shape.num_subspaces,
            shape.sub_dim
        )));
    }
    let mut words = Vec::with_capacity(cb.words().len());
    for m in 0..shape.num_subspaces {
        for k in 0..shape.num_codewords {
            let (mut q, _) = soft_assign(cb.codeword(m, k), proto.subspace(m), alpha)?;
            crate::numerics::l2_normalize_in_place(&mut q)?;
            words.extend(q);
        }
    }
    Codebook::from_words(shape, words, cb.alpha)
}
