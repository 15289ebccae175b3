//! Reference feature extractor: a two-layer perceptron with a `tanh` hidden
//! layer, followed by intra-normalization of its output.
//!
//! The backward pass takes two gradients with respect to the normalized
//! feature. The first is propagated as usual; the second passes through a
//! gradient-reversal point sitting between the network output and the
//! intra-normalization, so it enters the parameter gradients with its sign
//! flipped.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader};
use crate::error::{GpqError, Result};
use crate::numerics::{dot, intra_normalize, SubspaceShape};

pub const ENCODER_MAGIC: &[u8; 4] = b"GPQE";
pub const ENCODER_VERSION: u16 = 1;

/// Gradients for every parameter group of an encoder, in the order of
/// [`FeatureEncoder::param_groups`], plus the gradient with respect to the
/// pre-normalization output.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub groups: Vec<Vec<f64>>,
    pub pre_norm: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like<E: FeatureEncoder + ?Sized>(encoder: &E) -> Self {
        Self {
            groups: encoder
                .param_groups()
                .iter()
                .map(|g| vec![0.0; g.len()])
                .collect(),
            pre_norm: vec![0.0; encoder.output_dim()],
        }
    }

    /// Adds the parameter gradients of `other` into `self`.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        for (dst, src) in self.groups.iter_mut().zip(&other.groups) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|x| x.is_finite())
            && self.pre_norm.iter().all(|x| x.is_finite())
    }
}

/// Contract for a differentiable feature extractor.
///
/// Any implementation can stand in for [`EncoderParams`] in the trainer.
pub trait FeatureEncoder {
    type Cache;

    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Maps a raw vector to an intra-normalized feature, keeping what
    /// `backward` needs.
    fn encode(&self, raw: &[f64], shape: &SubspaceShape) -> Result<(Vec<f64>, Self::Cache)>;

    /// Parameter gradients of `upstream . x̂ - reversal . x̂` routed back
    /// through the normalization and the network.
    fn backward(
        &self,
        cache: &Self::Cache,
        upstream: &[f64],
        reversal: &[f64],
    ) -> Result<GradientBundle>;

    fn param_groups(&self) -> Vec<&[f64]>;

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]>;

    fn group_names(&self) -> Vec<&'static str>;
}

/// Weights of the reference encoder.
///
/// `w1` is `hidden x input` and `w2` is `output x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    raw: Vec<f64>,
    hidden: Vec<f64>,
    /// Intra-normalized output.
    feature: Vec<f64>,
    /// Norm of each output sub-vector before normalization.
    sub_norms: Vec<f64>,
    sub_dim: usize,
}

impl EncoderCache {
    pub fn feature(&self) -> &[f64] {
        &self.feature
    }
}

impl EncoderParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(GpqError::InvalidShape(format!(
                "encoder dims must be positive (input={input}, hidden={hidden}, output={output})"
            )));
        }
        Ok(Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(input: usize, hidden: usize, output: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(input, hidden, output)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        for v in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *v = rng.random_range(-s1..=s1);
        }
        for v in p.w2.iter_mut().chain(p.b2.iter_mut()) {
            *v = rng.random_range(-s2..=s2);
        }
        Ok(p)
    }

    /// Network output before intra-normalization, and the hidden activations.
    pub fn forward_raw(&self, raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if raw.len() != self.input {
            return Err(GpqError::ShapeMismatch(format!(
                "raw input has length {}, encoder expects {}",
                raw.len(),
                self.input
            )));
        }
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| (dot(&self.w1[j * self.input..(j + 1) * self.input], raw) + self.b1[j]).tanh())
            .collect();
        let out: Vec<f64> = (0..self.output)
            .map(|i| dot(&self.w2[i * self.hidden..(i + 1) * self.hidden], &hidden) + self.b2[i])
            .collect();
        Ok((out, hidden))
    }

    pub fn is_finite(&self) -> bool {
        self.param_groups().iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(18 + 4 * self.num_params());
        buf.extend_from_slice(ENCODER_MAGIC);
        binio::put_u16(&mut buf, ENCODER_VERSION);
        binio::put_u32(&mut buf, binio::dim_u32(self.input, "input")?);
        binio::put_u32(&mut buf, binio::dim_u32(self.hidden, "hidden")?);
        binio::put_u32(&mut buf, binio::dim_u32(self.output, "D")?);
        for g in self.param_groups() {
            binio::put_f64_as_f32(&mut buf, g);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r)?;
        if r.remaining() != 0 {
            return Err(GpqError::Parse(format!(
                "{} trailing bytes after encoder checkpoint",
                r.remaining()
            )));
        }
        Ok(p)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(ENCODER_MAGIC)?;
        r.version(ENCODER_VERSION)?;
        let input = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let output = r.u32()? as usize;
        let mut p = Self::zeros(input, hidden, output)?;
        for g in p.param_groups_mut() {
            let values = r.f32_vec(g.len())?;
            g.copy_from_slice(&values);
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

impl FeatureEncoder for EncoderParams {
    type Cache = EncoderCache;

    fn input_dim(&self) -> usize {
        self.input
    }

    fn output_dim(&self) -> usize {
        self.output
    }

    fn encode(&self, raw: &[f64], shape: &SubspaceShape) -> Result<(Vec<f64>, EncoderCache)> {
        if self.output != shape.dim {
            return Err(GpqError::ShapeMismatch(format!(
                "encoder output {} does not match D={}",
                self.output, shape.dim
            )));
        }
        let (out, hidden) = self.forward_raw(raw)?;
        let feature = intra_normalize(&out, shape)?;
        let sub_norms = (0..shape.num_subspaces)
            .map(|m| crate::numerics::norm(shape.sub(&out, m)))
            .collect();
        let cache = EncoderCache {
            raw: raw.to_vec(),
            hidden,
            feature: feature.clone(),
            sub_norms,
            sub_dim: shape.sub_dim,
        };
        Ok((feature, cache))
    }

    fn backward(
        &self,
        cache: &EncoderCache,
        upstream: &[f64],
        reversal: &[f64],
    ) -> Result<GradientBundle> {
        if upstream.len() != self.output || reversal.len() != self.output {
            return Err(GpqError::ShapeMismatch(format!(
                "feature gradients have lengths {}/{}, expected {}",
                upstream.len(),
                reversal.len(),
                self.output
            )));
        }
        if cache.raw.len() != self.input || cache.hidden.len() != self.hidden {
            return Err(GpqError::ShapeMismatch(
                "cache was not produced by this encoder".into(),
            ));
        }
        let d = cache.sub_dim;
        // Reversal point: the second gradient flips sign before entering
        // the normalization Jacobian.
        let g: Vec<f64> = upstream.iter().zip(reversal).map(|(u, r)| u - r).collect();

        // d(y/|y|)/dy = (I - x̂ x̂ᵀ) / |y| per sub-vector.
        let mut pre_norm = vec![0.0; self.output];
        for (m, &n) in cache.sub_norms.iter().enumerate() {
            let range = m * d..(m + 1) * d;
            let xs = &cache.feature[range.clone()];
            let gs = &g[range.clone()];
            let proj = dot(xs, gs);
            for ((o, &gi), &xi) in pre_norm[range].iter_mut().zip(gs).zip(xs) {
                *o = (gi - xi * proj) / n;
            }
        }

        let mut gw2 = vec![0.0; self.output * self.hidden];
        let mut gh = vec![0.0; self.hidden];
        for (i, &gy) in pre_norm.iter().enumerate() {
            if gy == 0.0 {
                continue;
            }
            let row = i * self.hidden..(i + 1) * self.hidden;
            for ((gw, &h), (ghj, &w)) in gw2[row.clone()]
                .iter_mut()
                .zip(&cache.hidden)
                .zip(gh.iter_mut().zip(&self.w2[row]))
            {
                *gw = gy * h;
                *ghj += gy * w;
            }
        }
        let ga1: Vec<f64> = gh
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mut gw1 = vec![0.0; self.hidden * self.input];
        for (j, &ga) in ga1.iter().enumerate() {
            if ga == 0.0 {
                continue;
            }
            for (gw, &x) in gw1[j * self.input..(j + 1) * self.input]
                .iter_mut()
                .zip(&cache.raw)
            {
                *gw = ga * x;
            }
        }

        Ok(GradientBundle {
            groups: vec![gw1, ga1, gw2, pre_norm.clone()],
            pre_norm,
        })
    }

    fn param_groups(&self) -> Vec<&[f64]> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn group_names(&self) -> Vec<&'static str> {
        vec!["encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2"]
    }
}
