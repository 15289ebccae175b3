//! Codebooks, soft/hard codeword assignment and binary code packing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GpqError, Result};
use crate::numerics::{dot, l2_normalize_in_place, norm, softmax_into, SubspaceShape};

/// `M` codebooks of `K` unit-norm codewords each, plus the soft-assignment
/// scale `alpha`.
///
/// Codewords are stored subspace-major, codeword-major, component-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    shape: SubspaceShape,
    words: Vec<f64>,
    pub alpha: f64,
}

impl Codebook {
    /// Codewords drawn uniformly on the unit sphere of each subspace.
    pub fn random(shape: SubspaceShape, alpha: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = vec![0.0; shape.num_subspaces * shape.num_codewords * shape.sub_dim];
        for w in words.chunks_exact_mut(shape.sub_dim) {
            loop {
                w.iter_mut()
                    .for_each(|v| *v = StandardNormal.sample(&mut rng));
                if l2_normalize_in_place(w).is_ok() {
                    break;
                }
            }
        }
        Self { shape, words, alpha }
    }

    /// Wraps existing codewords, checking length, finiteness and unit norm.
    pub fn from_words(shape: SubspaceShape, words: Vec<f64>, alpha: f64) -> Result<Self> {
        let expected = shape.num_subspaces * shape.num_codewords * shape.sub_dim;
        if words.len() != expected {
            return Err(GpqError::ShapeMismatch(format!(
                "codebook has {} values, expected {expected}",
                words.len()
            )));
        }
        if words.iter().any(|v| !v.is_finite()) || !alpha.is_finite() || alpha < 0.0 {
            return Err(GpqError::NonFinite("codebook".into()));
        }
        for (i, w) in words.chunks_exact(shape.sub_dim).enumerate() {
            let n = norm(w);
            if (n - 1.0).abs() > 1e-6 {
                return Err(GpqError::InvalidShape(format!(
                    "codeword {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { shape, words, alpha })
    }

    pub fn shape(&self) -> &SubspaceShape {
        &self.shape
    }

    pub fn words(&self) -> &[f64] {
        &self.words
    }

    /// Raw codeword storage. Writers must restore unit norms (see
    /// [`Codebook::renormalize`]) before relying on them.
    pub fn words_mut(&mut self) -> &mut [f64] {
        &mut self.words
    }

    /// The `K x d` block of codewords for subspace `m`.
    pub fn subspace(&self, m: usize) -> &[f64] {
        let span = self.shape.num_codewords * self.shape.sub_dim;
        &self.words[m * span..(m + 1) * span]
    }

    pub fn codeword(&self, m: usize, k: usize) -> &[f64] {
        let d = self.shape.sub_dim;
        &self.subspace(m)[k * d..(k + 1) * d]
    }

    /// Re-projects every codeword onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for w in self.words.chunks_exact_mut(self.shape.sub_dim) {
            l2_normalize_in_place(w)?;
        }
        Ok(())
    }

    /// Copy with every value rounded through `f32`, as stored on disk.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            shape: self.shape,
            words: self.words.iter().map(|&v| v as f32 as f64).collect(),
            alpha: self.alpha,
        }
    }
}

/// Per-item codeword indices, one per subspace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Code(pub Vec<u32>);

impl Code {
    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn validate(&self, shape: &SubspaceShape) -> Result<()> {
        if self.0.len() != shape.num_subspaces {
            return Err(GpqError::ShapeMismatch(format!(
                "code has {} entries, expected M={}",
                self.0.len(),
                shape.num_subspaces
            )));
        }
        match self.0.iter().find(|&&k| k as usize >= shape.num_codewords) {
            Some(&k) => Err(GpqError::IndexOutOfRange {
                index: k as usize,
                limit: shape.num_codewords,
            }),
            None => Ok(()),
        }
    }
}

fn num_words(codewords: &[f64], sub_dim: usize) -> Result<usize> {
    if sub_dim == 0 || codewords.is_empty() || codewords.len() % sub_dim != 0 {
        return Err(GpqError::ShapeMismatch(format!(
            "codeword block of length {} is not a multiple of d={sub_dim}",
            codewords.len()
        )));
    }
    Ok(codewords.len() / sub_dim)
}

/// Soft assignment of a unit sub-vector to a block of codewords.
///
/// Returns the quantized sub-vector `sum_k a_k z_k` and the weights
/// `a = softmax(alpha * [x . z_k])`. Larger similarity gets larger weight,
/// so the output tends to the nearest codeword as `alpha` grows.
pub fn soft_assign(x: &[f64], codewords: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.len();
    let k = num_words(codewords, d)?;
    let mut q = vec![0.0; d];
    let mut a = vec![0.0; k];
    soft_assign_into(x, codewords, alpha, &mut q, &mut a);
    Ok((q, a))
}

pub(crate) fn soft_assign_into(x: &[f64], codewords: &[f64], alpha: f64, q: &mut [f64], a: &mut [f64]) {
    let d = x.len();
    for (s, z) in a.iter_mut().zip(codewords.chunks_exact(d)) {
        *s = dot(x, z);
    }
    let sims = a.to_vec();
    softmax_into(&sims, alpha, a);
    q.iter_mut().for_each(|v| *v = 0.0);
    for (&w, z) in a.iter().zip(codewords.chunks_exact(d)) {
        for (qi, zi) in q.iter_mut().zip(z) {
            *qi += w * zi;
        }
    }
}

/// Backward pass of [`soft_assign`]: accumulates `dL/dx` into `gx` and
/// `dL/dz` into `gz`, given `dL/dq` and the forward weights.
pub(crate) fn soft_assign_backward(
    x: &[f64],
    codewords: &[f64],
    alpha: f64,
    weights: &[f64],
    gq: &[f64],
    gx: &mut [f64],
    gz: &mut [f64],
) {
    let d = x.len();
    let u: Vec<f64> = codewords.chunks_exact(d).map(|z| dot(gq, z)).collect();
    let mean: f64 = weights.iter().zip(&u).map(|(a, u)| a * u).sum();
    for (k, z) in codewords.chunks_exact(d).enumerate() {
        let gs = alpha * weights[k] * (u[k] - mean);
        let gzk = &mut gz[k * d..(k + 1) * d];
        for i in 0..d {
            gx[i] += gs * z[i];
            gzk[i] += weights[k] * gq[i] + gs * x[i];
        }
    }
}

/// Soft quantization of a whole feature, with the assignment weights of
/// every subspace (`M x K`, row-major).
pub fn soft_quantize(x: &[f64], cb: &Codebook) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = cb.shape();
    shape.check_len(x.len(), "feature")?;
    let mut q = vec![0.0; shape.dim];
    let mut a = vec![0.0; shape.num_subspaces * shape.num_codewords];
    for m in 0..shape.num_subspaces {
        soft_assign_into(
            shape.sub(x, m),
            cb.subspace(m),
            cb.alpha,
            shape.sub_mut(&mut q, m),
            &mut a[m * shape.num_codewords..(m + 1) * shape.num_codewords],
        );
    }
    Ok((q, a))
}

/// Accumulates gradients of [`soft_quantize`] into `gx` (length `D`) and
/// `gz` (codebook-shaped).
pub(crate) fn soft_quantize_backward(
    x: &[f64],
    cb: &Codebook,
    weights: &[f64],
    gq: &[f64],
    gx: &mut [f64],
    gz: &mut [f64],
) {
    let shape = cb.shape();
    let (k, d) = (shape.num_codewords, shape.sub_dim);
    for m in 0..shape.num_subspaces {
        soft_assign_backward(
            shape.sub(x, m),
            cb.subspace(m),
            cb.alpha,
            &weights[m * k..(m + 1) * k],
            shape.sub(gq, m),
            &mut gx[m * d..(m + 1) * d],
            &mut gz[m * k * d..(m + 1) * k * d],
        );
    }
}

/// Index of the most similar codeword; the lowest index wins ties.
pub fn hard_assign(x: &[f64], codewords: &[f64]) -> Result<usize> {
    let d = x.len();
    num_words(codewords, d)?;
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, z) in codewords.chunks_exact(d).enumerate() {
        let s = dot(x, z);
        if s > best_sim {
            best = k;
            best_sim = s;
        }
    }
    Ok(best)
}

pub fn encode(x: &[f64], cb: &Codebook) -> Result<Code> {
    let shape = cb.shape();
    shape.check_len(x.len(), "feature")?;
    (0..shape.num_subspaces)
        .map(|m| hard_assign(shape.sub(x, m), cb.subspace(m)).map(|k| k as u32))
        .collect::<Result<Vec<_>>>()
        .map(Code)
}

/// Concatenation of the codewords selected by `code`.
pub fn reconstruct(code: &Code, cb: &Codebook) -> Result<Vec<f64>> {
    code.validate(cb.shape())?;
    Ok(code
        .0
        .iter()
        .enumerate()
        .flat_map(|(m, &k)| cb.codeword(m, k as usize).iter().copied())
        .collect())
}

/// Packs a code into `ceil(M log2 K / 8)` bytes.
///
/// Sub-indices are laid out in subspace order, `log2 K` bits each, filling
/// every byte from its least significant bit. Trailing bits are zero.
pub fn pack(code: &Code, shape: &SubspaceShape) -> Result<Vec<u8>> {
    code.validate(shape)?;
    let mut out = vec![0u8; shape.code_bytes()];
    pack_into(code.indices(), shape.bits_per_index(), &mut out);
    Ok(out)
}

pub(crate) fn pack_into(indices: &[u32], bits: usize, out: &mut [u8]) {
    out.iter_mut().for_each(|b| *b = 0);
    let mut pos = 0;
    for &k in indices {
        for j in 0..bits {
            if (k >> j) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
}

/// Inverse of [`pack`].
pub fn unpack(bytes: &[u8], shape: &SubspaceShape) -> Result<Code> {
    if bytes.len() != shape.code_bytes() {
        return Err(GpqError::MalformedBytes {
            expected: shape.code_bytes(),
            actual: bytes.len(),
        });
    }
    let mut indices = vec![0u32; shape.num_subspaces];
    unpack_into(bytes, shape.bits_per_index(), &mut indices);
    Ok(Code(indices))
}

pub(crate) fn unpack_into(bytes: &[u8], bits: usize, indices: &mut [u32]) {
    let mut pos = 0;
    for k in indices.iter_mut() {
        let mut v = 0u32;
        for j in 0..bits {
            v |= (((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << j;
            pos += 1;
        }
        *k = v;
    }
}
