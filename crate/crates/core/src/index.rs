//! Packed binary code database with lookup-table asymmetric search.
//!
//! File layout (little-endian):
//!
//! ```text
//! "GPQI" | version u16 | M u32 | K u32 | d u32 | D u32 | count u64
//! codewords: M*K*d f32 (subspace, codeword, component)
//! codes:     count * ceil(M*log2(K)/8) bytes
//! has_ids u8 | count u64 ids (only when has_ids == 1)
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{GpqError, Result};
use crate::numerics::{dot, SubspaceShape};
use crate::quantizer::{encode, pack_into, unpack_into, Code, Codebook};

pub const INDEX_MAGIC: &[u8; 4] = b"GPQI";
pub const INDEX_VERSION: u16 = 1;

/// Quantized retrieval database.
///
/// The codebook is held at `f32` precision so that an index read back from
/// disk is identical to the one that was written. Search only uses hard
/// assignment, so the index copy of the codebook carries `alpha = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    codebook: Codebook,
    codes: Vec<u8>,
    count: usize,
    ids: Option<Vec<u64>>,
}

/// Per-query table of sub-vector to codeword similarities, `M x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    num_codewords: usize,
    table: Vec<f64>,
}

impl Lut {
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.table[m * self.num_codewords + k]
    }

    pub fn num_subspaces(&self) -> usize {
        self.table.len() / self.num_codewords
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.table
    }
}

/// A search hit: database item id and asymmetric similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

pub fn compute_lut(query: &[f64], cb: &Codebook) -> Result<Lut> {
    let shape = cb.shape();
    shape.check_len(query.len(), "query")?;
    let mut table = Vec::with_capacity(shape.num_subspaces * shape.num_codewords);
    for m in 0..shape.num_subspaces {
        let q = shape.sub(query, m);
        table.extend(cb.subspace(m).chunks_exact(shape.sub_dim).map(|z| dot(q, z)));
    }
    Ok(Lut {
        num_codewords: shape.num_codewords,
        table,
    })
}

/// Sum of the table entries selected by `code`.
pub fn asymmetric_score(code: &Code, lut: &Lut) -> Result<f64> {
    if code.0.len() != lut.num_subspaces() {
        return Err(GpqError::ShapeMismatch(format!(
            "code has {} entries, table has {} subspaces",
            code.0.len(),
            lut.num_subspaces()
        )));
    }
    let mut score = 0.0;
    for (m, &k) in code.0.iter().enumerate() {
        let k = k as usize;
        if k >= lut.num_codewords {
            return Err(GpqError::IndexOutOfRange {
                index: k,
                limit: lut.num_codewords,
            });
        }
        score += lut.get(m, k);
    }
    Ok(score)
}

/// Descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

impl RetrievalIndex {
    /// Encodes and packs every feature, preserving order.
    pub fn build(features: &[Vec<f64>], cb: &Codebook) -> Result<Self> {
        let mut codebook = cb.rounded_to_f32();
        codebook.alpha = 0.0;
        let shape = *codebook.shape();
        let width = shape.code_bytes();
        let mut codes = vec![0u8; features.len() * width];
        for (x, out) in features.iter().zip(codes.chunks_exact_mut(width)) {
            let code = encode(x, &codebook)?;
            pack_into(code.indices(), shape.bits_per_index(), out);
        }
        Ok(Self {
            codebook,
            codes,
            count: features.len(),
            ids: None,
        })
    }

    /// Attaches external item ids; one per item.
    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.count {
            return Err(GpqError::ShapeMismatch(format!(
                "{} ids for {} items",
                ids.len(),
                self.count
            )));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn shape(&self) -> &SubspaceShape {
        self.codebook.shape()
    }

    pub fn ids(&self) -> Option<&[u64]> {
        self.ids.as_deref()
    }

    pub fn code_bytes(&self) -> &[u8] {
        &self.codes
    }

    /// External id of item `i` (its position when no id table is present).
    pub fn id(&self, i: usize) -> u64 {
        self.ids.as_ref().map_or(i as u64, |ids| ids[i])
    }

    pub fn code(&self, i: usize) -> Result<Code> {
        if i >= self.count {
            return Err(GpqError::IndexOutOfRange {
                index: i,
                limit: self.count,
            });
        }
        let shape = self.shape();
        let w = shape.code_bytes();
        let mut idx = vec![0u32; shape.num_subspaces];
        unpack_into(&self.codes[i * w..(i + 1) * w], shape.bits_per_index(), &mut idx);
        Ok(Code(idx))
    }

    pub fn compute_lut(&self, query: &[f64]) -> Result<Lut> {
        compute_lut(query, &self.codebook)
    }

    /// Asymmetric score of every item, in storage order.
    pub fn scores(&self, lut: &Lut) -> Result<Vec<f64>> {
        let shape = self.shape();
        if lut.num_subspaces() != shape.num_subspaces || lut.num_codewords != shape.num_codewords {
            return Err(GpqError::ShapeMismatch("lookup table does not match index".into()));
        }
        let w = shape.code_bytes();
        let bits = shape.bits_per_index();
        let k = shape.num_codewords;
        let mut idx = vec![0u32; shape.num_subspaces];
        let mut out = Vec::with_capacity(self.count);
        for code in self.codes.chunks_exact(w).take(self.count) {
            unpack_into(code, bits, &mut idx);
            let s: f64 = idx
                .iter()
                .enumerate()
                .map(|(m, &c)| lut.table[m * k + c as usize])
                .sum();
            out.push(s);
        }
        Ok(out)
    }

    /// Exhaustive top-`k` search. Ties are broken by ascending id.
    pub fn search_topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(GpqError::InvalidConfig("k must be at least 1".into()));
        }
        let lut = self.compute_lut(query)?;
        let mut hits: Vec<Hit> = self
            .scores(&lut)?
            .into_iter()
            .enumerate()
            .map(|(i, score)| Hit { id: self.id(i), score })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = self.shape();
        let mut buf = Vec::with_capacity(31 + 4 * self.codebook.words().len() + self.codes.len());
        buf.extend_from_slice(INDEX_MAGIC);
        binio::put_u16(&mut buf, INDEX_VERSION);
        binio::put_u32(&mut buf, binio::dim_u32(s.num_subspaces, "M")?);
        binio::put_u32(&mut buf, binio::dim_u32(s.num_codewords, "K")?);
        binio::put_u32(&mut buf, binio::dim_u32(s.sub_dim, "d")?);
        binio::put_u32(&mut buf, binio::dim_u32(s.dim, "D")?);
        binio::put_u64(&mut buf, self.count as u64);
        binio::put_f64_as_f32(&mut buf, self.codebook.words());
        buf.extend_from_slice(&self.codes);
        match &self.ids {
            Some(ids) => {
                binio::put_u8(&mut buf, 1);
                ids.iter().for_each(|&id| binio::put_u64(&mut buf, id));
            }
            None => binio::put_u8(&mut buf, 0),
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        r.version(INDEX_VERSION)?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let shape = SubspaceShape::new(m, d, k)?;
        if shape.dim != dim {
            return Err(GpqError::ShapeMismatch(format!("header D={dim} but M*d={}", shape.dim)));
        }
        let count = usize::try_from(r.u64()?)
            .map_err(|_| GpqError::Parse("item count exceeds address space".into()))?;
        let words = r.f32_vec(m * k * d)?;
        let codebook = Codebook::from_words(shape, words, 0.0)?;
        let code_len = count
            .checked_mul(shape.code_bytes())
            .ok_or_else(|| GpqError::Parse("code section length overflow".into()))?;
        let codes = r.take(code_len)?.to_vec();
        let ids = match r.u8()? {
            0 => None,
            1 => Some((0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?),
            other => return Err(GpqError::Parse(format!("invalid id table flag {other}"))),
        };
        if r.remaining() != 0 {
            return Err(GpqError::Parse(format!(
                "{} trailing bytes at offset {}",
                r.remaining(),
                r.offset()
            )));
        }
        let bits = shape.bits_per_index();
        let mut idx = vec![0u32; m];
        for code in codes.chunks_exact(shape.code_bytes()) {
            unpack_into(code, bits, &mut idx);
            if let Some(&bad) = idx.iter().find(|&&v| v as usize >= k) {
                return Err(GpqError::IndexOutOfRange {
                    index: bad as usize,
                    limit: k,
                });
            }
        }
        Ok(Self {
            codebook,
            codes,
            count,
            ids,
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
