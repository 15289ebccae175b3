//! Vector math shared across the crate: normalization, scaled softmax and entropy.
//!
//! Everything here is a pure function of its inputs and runs in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{GpqError, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-30;

/// Partition of a `dim`-dimensional vector into `num_subspaces` blocks of
/// `sub_dim` components, each quantized with `num_codewords` codewords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubspaceShape {
    pub dim: usize,
    pub num_subspaces: usize,
    pub sub_dim: usize,
    pub num_codewords: usize,
}

impl SubspaceShape {
    pub fn new(num_subspaces: usize, sub_dim: usize, num_codewords: usize) -> Result<Self> {
        if num_subspaces == 0 || sub_dim == 0 {
            return Err(GpqError::InvalidShape(format!(
                "M and d must be at least 1 (got M={num_subspaces}, d={sub_dim})"
            )));
        }
        if num_codewords < 2 || !num_codewords.is_power_of_two() {
            return Err(GpqError::InvalidShape(format!(
                "K must be a power of two >= 2 (got {num_codewords})"
            )));
        }
        Ok(Self {
            dim: num_subspaces * sub_dim,
            num_subspaces,
            sub_dim,
            num_codewords,
        })
    }

    /// Bits used by a single sub-index, `log2(K)`.
    pub fn bits_per_index(&self) -> usize {
        self.num_codewords.trailing_zeros() as usize
    }

    /// Total code length `M * log2(K)` in bits.
    pub fn code_bits(&self) -> usize {
        self.num_subspaces * self.bits_per_index()
    }

    /// Bytes per packed code.
    pub fn code_bytes(&self) -> usize {
        self.code_bits().div_ceil(8)
    }

    /// Borrow sub-vector `m` of a `dim`-length vector.
    #[inline]
    pub fn sub<'a>(&self, v: &'a [f64], m: usize) -> &'a [f64] {
        &v[m * self.sub_dim..(m + 1) * self.sub_dim]
    }

    #[inline]
    pub fn sub_mut<'a>(&self, v: &'a mut [f64], m: usize) -> &'a mut [f64] {
        &mut v[m * self.sub_dim..(m + 1) * self.sub_dim]
    }

    pub(crate) fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.dim {
            return Err(GpqError::ShapeMismatch(format!(
                "{what} has length {len}, expected D={}",
                self.dim
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out)?;
    Ok(out)
}

/// Normalizes `v` in place and returns the norm it had.
pub fn l2_normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(GpqError::NonFinite("vector norm".into()));
    }
    if n < ZERO_NORM_TOL {
        return Err(GpqError::ZeroVector { subspace: None });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

/// L2-normalizes each of the `M` sub-vectors of `x` independently.
pub fn intra_normalize(x: &[f64], shape: &SubspaceShape) -> Result<Vec<f64>> {
    shape.check_len(x.len(), "feature")?;
    let mut out = x.to_vec();
    for m in 0..shape.num_subspaces {
        l2_normalize_in_place(shape.sub_mut(&mut out, m)).map_err(|e| match e {
            GpqError::ZeroVector { .. } => GpqError::ZeroVector { subspace: Some(m) },
            other => other,
        })?;
    }
    Ok(out)
}

/// `softmax(scale * scores)`, computed with max subtraction.
///
/// A scale of zero yields the uniform distribution.
pub fn scaled_softmax(scores: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(GpqError::ShapeMismatch("softmax over empty scores".into()));
    }
    if !scale.is_finite() || scale < 0.0 {
        return Err(GpqError::NonFinite(format!("softmax scale {scale}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GpqError::NonFinite("softmax scores".into()));
    }
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, scale, &mut out);
    Ok(out)
}

/// Unchecked softmax kernel used on hot paths where inputs are known finite.
pub(crate) fn softmax_into(scores: &[f64], scale: f64, out: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (scale * (s - max)).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(GpqError::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(GpqError::InvalidDistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(GpqError::InvalidDistribution(format!(
            "entries sum to {total}"
        )));
    }
    Ok(p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn shape_rejects_bad_codeword_counts() {
        assert!(SubspaceShape::new(2, 2, 3).is_err());
        assert!(SubspaceShape::new(2, 2, 1).is_err());
        assert!(SubspaceShape::new(0, 2, 4).is_err());
        let s = SubspaceShape::new(12, 12, 16).unwrap();
        assert_eq!((s.dim, s.code_bits(), s.code_bytes()), (144, 48, 6));
        assert_eq!(SubspaceShape::new(3, 12, 16).unwrap().code_bytes(), 2);
    }

    #[test]
    fn l2_normalize_examples() {
        assert!(close(&l2_normalize(&[3.0, 4.0]).unwrap(), &[0.6, 0.8], 1e-12));
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(GpqError::ZeroVector { subspace: None })
        ));
    }

    #[test]
    fn intra_normalize_blocks() {
        let shape = SubspaceShape::new(2, 2, 2).unwrap();
        let out = intra_normalize(&[3.0, 4.0, 0.0, 5.0], &shape).unwrap();
        assert!(close(&out, &[0.6, 0.8, 0.0, 1.0], 1e-12));
    }

    #[test]
    fn intra_normalize_reports_offending_subspace() {
        let shape = SubspaceShape::new(3, 2, 2).unwrap();
        let err = intra_normalize(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0], &shape).unwrap_err();
        assert!(matches!(err, GpqError::ZeroVector { subspace: Some(1) }));
        assert!(matches!(
            intra_normalize(&[1.0; 5], &shape),
            Err(GpqError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = scaled_softmax(&[0.0, 0.0, 0.0], 20.0).unwrap();
        assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));
        // 1 / (1 + e^-20) = 0.999999997938...
        let p = scaled_softmax(&[1.0, 0.0], 20.0).unwrap();
        assert!(p[0] > 0.999999);
        assert!((p[0] - 1.0 / (1.0 + (-20.0f64).exp())).abs() < 1e-15);
        let p = scaled_softmax(&[5.0, -3.0, 0.25], 0.0).unwrap();
        assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));
        assert!(scaled_softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(scaled_softmax(&[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn softmax_survives_large_scores() {
        let p = scaled_softmax(&[1000.0, 999.0], 50.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let mut onehot = vec![0.0; 7];
        onehot[0] = 1.0;
        assert_eq!(shannon_entropy(&onehot).unwrap(), 0.0);
        let uniform = vec![0.1; 10];
        assert!((shannon_entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((shannon_entropy(&uniform).unwrap() - 2.302585).abs() < 1e-6);
        let h = shannon_entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((h - 1.039721).abs() < 1e-6);
        assert!(shannon_entropy(&[0.5, 0.4]).is_err());
        assert!(shannon_entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn entropy_upper_bound_attained_only_by_uniform() {
        for n in [2usize, 4, 16] {
            let u = vec![1.0 / n as f64; n];
            assert!((shannon_entropy(&u).unwrap() - (n as f64).ln()).abs() < 1e-12);
            let mut skew = u.clone();
            skew[0] += 0.01;
            skew[1] -= 0.01;
            assert!(shannon_entropy(&skew).unwrap() < (n as f64).ln());
        }
    }

    proptest! {
        #[test]
        fn intra_normalize_unit_blocks_and_idempotent(
            x in prop::collection::vec(0.05f64..3.0, 48),
            signs in prop::collection::vec(any::<bool>(), 48),
        ) {
            let x: Vec<f64> = x.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
            let shape = SubspaceShape::new(4, 12, 16).unwrap();
            let y = intra_normalize(&x, &shape).unwrap();
            for m in 0..4 {
                prop_assert!((norm(shape.sub(&y, m)) - 1.0).abs() < 1e-6);
            }
            let z = intra_normalize(&y, &shape).unwrap();
            prop_assert!(close(&y, &z, 1e-6));
        }

        #[test]
        fn l2_normalize_scale_invariant(
            v in prop::collection::vec(-5.0f64..5.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&v) > 1e-3);
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            prop_assert!(close(&l2_normalize(&v).unwrap(), &l2_normalize(&scaled).unwrap(), 1e-12));
        }

        #[test]
        fn softmax_shift_invariant(
            s in prop::collection::vec(-3.0f64..3.0, 1..20),
            shift in -50.0f64..50.0,
            scale in 0.0f64..40.0,
        ) {
            let shifted: Vec<f64> = s.iter().map(|x| x + shift).collect();
            let a = scaled_softmax(&s, scale).unwrap();
            let b = scaled_softmax(&shifted, scale).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|&p| p > 0.0));
        }
    }
}
