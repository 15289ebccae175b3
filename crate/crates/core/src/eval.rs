//! Retrieval metrics and the unsupervised product quantization baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GpqError, Result};
use crate::index::RetrievalIndex;
use crate::numerics::{dot, l2_normalize_in_place, SubspaceShape};
use crate::quantizer::{hard_assign, Codebook};

/// How two label sets decide relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceMode {
    /// Identical label sets.
    SingleLabel,
    /// At least one shared concept.
    MultiLabel,
}

/// Ground-truth labels for queries and database items.
#[derive(Debug, Clone)]
pub struct RelevanceJudge {
    labels: HashMap<u64, Vec<u32>>,
    mode: RelevanceMode,
}

impl RelevanceJudge {
    /// Label sets are sorted and deduplicated on construction.
    pub fn new(labels: impl IntoIterator<Item = (u64, Vec<u32>)>, mode: RelevanceMode) -> Self {
        let labels = labels
            .into_iter()
            .map(|(id, mut l)| {
                l.sort_unstable();
                l.dedup();
                (id, l)
            })
            .collect();
        Self { labels, mode }
    }

    pub fn mode(&self) -> RelevanceMode {
        self.mode
    }

    pub fn labels(&self, id: u64) -> Result<&[u32]> {
        self.labels.get(&id).map(Vec::as_slice).ok_or(GpqError::UnknownId(id))
    }

    pub fn is_relevant(&self, query: u64, item: u64) -> Result<bool> {
        let q = self.labels(query)?;
        let r = self.labels(item)?;
        Ok(match self.mode {
            RelevanceMode::SingleLabel => !q.is_empty() && q == r,
            RelevanceMode::MultiLabel => q.iter().any(|l| r.binary_search(l).is_ok()),
        })
    }
}

/// Average precision of a ranking, optionally truncated at `cutoff`.
///
/// `AP = (1/R) * sum over relevant ranks i of precision@i`, where `R` is the
/// number of relevant items in the evaluated ranking. Zero when `R = 0`.
pub fn average_precision(ranked: &[u64], judge: &RelevanceJudge, query: u64, cutoff: Option<usize>) -> Result<f64> {
    let n = cutoff.map_or(ranked.len(), |c| c.min(ranked.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &id) in ranked[..n].iter().enumerate() {
        if judge.is_relevant(query, id)? {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Fraction of relevant items among the first `k` of the ranking.
pub fn precision_at_k(ranked: &[u64], judge: &RelevanceJudge, query: u64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(GpqError::InvalidConfig("precision@k needs k >= 1".into()));
    }
    let mut rel = 0usize;
    for &id in ranked.iter().take(k) {
        rel += judge.is_relevant(query, id)? as usize;
    }
    Ok(rel as f64 / k as f64)
}

/// A query for evaluation: its id in the label table and its feature.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: u64,
    pub feature: Vec<f64>,
}

/// Per-query retrieval metrics over an index.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub average_precision: f64,
    pub precision: Vec<f64>,
}

/// Ranks the whole index for every query and computes AP and precision@k.
///
/// Queries run in parallel; results keep query order.
pub fn evaluate_queries(
    queries: &[Query],
    index: &RetrievalIndex,
    judge: &RelevanceJudge,
    cutoff: Option<usize>,
    precision_ks: &[usize],
) -> Result<Vec<QueryMetrics>> {
    queries
        .par_iter()
        .map(|q| {
            if index.is_empty() {
                return Ok(QueryMetrics {
                    average_precision: 0.0,
                    precision: vec![0.0; precision_ks.len()],
                });
            }
            let ranked: Vec<u64> = index
                .search_topk(&q.feature, index.len())?
                .into_iter()
                .map(|h| h.id)
                .collect();
            Ok(QueryMetrics {
                average_precision: average_precision(&ranked, judge, q.id, cutoff)?,
                precision: precision_ks
                    .iter()
                    .map(|&k| precision_at_k(&ranked, judge, q.id, k))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Mean average precision over `queries` (full ranking unless `cutoff`).
pub fn mean_ap(queries: &[Query], index: &RetrievalIndex, judge: &RelevanceJudge, cutoff: Option<usize>) -> Result<f64> {
    if queries.is_empty() {
        return Err(GpqError::EmptyDataset("no queries".into()));
    }
    let per = evaluate_queries(queries, index, judge, cutoff, &[])?;
    Ok(per.iter().map(|m| m.average_precision).sum::<f64>() / per.len() as f64)
}

/// Aggregated evaluation result with both output formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub precision: Vec<(usize, f64)>,
    pub map_baseline: Option<f64>,
    pub num_queries: usize,
    pub database_size: usize,
    pub code_bits: usize,
}

impl EvalReport {
    pub fn from_metrics(per_query: &[QueryMetrics], ks: &[usize], index: &RetrievalIndex) -> Self {
        let n = per_query.len().max(1) as f64;
        Self {
            map: per_query.iter().map(|m| m.average_precision).sum::<f64>() / n,
            precision: ks
                .iter()
                .enumerate()
                .map(|(j, &k)| (k, per_query.iter().map(|m| m.precision[j]).sum::<f64>() / n))
                .collect(),
            map_baseline: None,
            num_queries: per_query.len(),
            database_size: index.len(),
            code_bits: index.shape().code_bits(),
        }
    }

    /// One `key=value` pair per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "map={:.6}", self.map).unwrap();
        for (k, p) in &self.precision {
            writeln!(out, "precision@{k}={p:.6}").unwrap();
        }
        if let Some(b) = self.map_baseline {
            writeln!(out, "map_baseline={b:.6}").unwrap();
        }
        writeln!(out, "queries={}", self.num_queries).unwrap();
        writeln!(out, "database={}", self.database_size).unwrap();
        writeln!(out, "bits={}", self.code_bits).unwrap();
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<16} {:>10}", "metric", "value").unwrap();
        writeln!(out, "{:<16} {:>10.6}", "mAP", self.map).unwrap();
        for (k, p) in &self.precision {
            writeln!(out, "{:<16} {:>10.6}", format!("precision@{k}"), p).unwrap();
        }
        if let Some(b) = self.map_baseline {
            writeln!(out, "{:<16} {:>10.6}", "mAP (PQ)", b).unwrap();
        }
        out
    }
}

/// Mean over items and subspaces of the cosine similarity between each
/// sub-vector and its nearest codeword.
pub fn kmeans_objective(features: &[Vec<f64>], cb: &Codebook) -> Result<f64> {
    let shape = cb.shape();
    if features.is_empty() {
        return Err(GpqError::EmptyDataset("no features".into()));
    }
    let mut total = 0.0;
    for x in features {
        shape.check_len(x.len(), "feature")?;
        for m in 0..shape.num_subspaces {
            let xm = shape.sub(x, m);
            let k = hard_assign(xm, cb.subspace(m))?;
            total += dot(xm, cb.codeword(m, k));
        }
    }
    Ok(total / (features.len() * shape.num_subspaces) as f64)
}

/// Unsupervised PQ codebook: spherical Lloyd iterations per subspace.
pub fn pq_baseline_train(features: &[Vec<f64>], shape: SubspaceShape, iterations: usize, seed: u64) -> Result<Codebook> {
    Ok(pq_baseline_fit(features, shape, iterations, seed)?.0)
}

/// As [`pq_baseline_train`], also returning the k-means objective before the
/// first and after every iteration.
pub fn pq_baseline_fit(
    features: &[Vec<f64>],
    shape: SubspaceShape,
    iterations: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    let k = shape.num_codewords;
    if features.len() < k {
        return Err(GpqError::TooFewItems {
            needed: k,
            got: features.len(),
        });
    }
    for x in features {
        shape.check_len(x.len(), "feature")?;
    }
    let d = shape.sub_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Vec::with_capacity(shape.num_subspaces * k * d);
    for m in 0..shape.num_subspaces {
        words.extend(init_distinct(features, &shape, m, &mut rng));
    }
    let mut cb = Codebook::from_words(shape, words, 0.0)?;
    let mut history = vec![kmeans_objective(features, &cb)?];
    for _ in 0..iterations {
        let mut next = cb.words().to_vec();
        for m in 0..shape.num_subspaces {
            lloyd_update(features, &shape, m, cb.subspace(m), &mut next[m * k * d..(m + 1) * k * d]);
        }
        cb = Codebook::from_words(shape, next, 0.0)?;
        history.push(kmeans_objective(features, &cb)?);
    }
    Ok((cb, history))
}

/// `K` distinct data sub-vectors in seeded random order. Falls back to
/// repeats when the data has fewer than `K` distinct sub-vectors.
fn init_distinct(features: &[Vec<f64>], shape: &SubspaceShape, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = shape.num_codewords;
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<&[f64]> = Vec::with_capacity(k);
    for &i in &order {
        let v = shape.sub(&features[i], m);
        if !chosen.iter().any(|c| *c == v) {
            chosen.push(v);
            if chosen.len() == k {
                break;
            }
        }
    }
    let mut i = 0;
    while chosen.len() < k {
        chosen.push(shape.sub(&features[order[i]], m));
        i += 1;
    }
    chosen.concat()
}

/// One assignment + update pass on subspace `m`, writing the new codewords
/// into `out`.
fn lloyd_update(features: &[Vec<f64>], shape: &SubspaceShape, m: usize, current: &[f64], out: &mut [f64]) {
    let (k, d) = (shape.num_codewords, shape.sub_dim);
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    // (similarity to own codeword, item) for empty-cluster reseeding.
    let mut fit: Vec<(f64, usize)> = Vec::with_capacity(features.len());
    for (i, x) in features.iter().enumerate() {
        let xm = shape.sub(x, m);
        let a = hard_assign(xm, current).expect("shapes checked by caller");
        counts[a] += 1;
        sums[a * d..(a + 1) * d].iter_mut().zip(xm).for_each(|(s, v)| *s += v);
        fit.push((dot(xm, &current[a * d..(a + 1) * d]), i));
    }
    fit.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut far = fit.iter().map(|&(_, i)| i);
    for c in 0..k {
        let dst = &mut out[c * d..(c + 1) * d];
        if counts[c] == 0 {
            if let Some(i) = far.next() {
                dst.copy_from_slice(shape.sub(&features[i], m));
            }
            continue;
        }
        let mut mean = sums[c * d..(c + 1) * d].to_vec();
        if l2_normalize_in_place(&mut mean).is_ok() {
            dst.copy_from_slice(&mean);
        } else {
            dst.copy_from_slice(&current[c * d..(c + 1) * d]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::intra_normalize;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn single_label_judge(labels: &[u32]) -> RelevanceJudge {
        RelevanceJudge::new(
            labels.iter().enumerate().map(|(i, &l)| (i as u64, vec![l])),
            RelevanceMode::SingleLabel,
        )
    }

    /// Direct transcription of the AP definition over explicit relevant
    /// positions.
    fn brute_force_ap(rel: &[bool]) -> f64 {
        let positions: Vec<usize> = rel.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| i).collect();
        if positions.is_empty() {
            return 0.0;
        }
        positions
            .iter()
            .map(|&p| rel[..=p].iter().filter(|r| **r).count() as f64 / (p + 1) as f64)
            .sum::<f64>()
            / positions.len() as f64
    }

    #[test]
    fn ap_hand_cases() {
        // query id 0 has class 1; items 1..=4.
        let judge = single_label_judge(&[1, 1, 1, 0, 0]);
        assert_eq!(average_precision(&[1, 2, 3, 4], &judge, 0, None).unwrap(), 1.0);
        assert_eq!(average_precision(&[3, 1], &judge, 0, None).unwrap(), 0.5);
        assert_eq!(average_precision(&[3, 4], &judge, 0, None).unwrap(), 0.0);
        assert!(matches!(
            average_precision(&[9], &judge, 0, None),
            Err(GpqError::UnknownId(9))
        ));
        assert_eq!(average_precision(&[3, 4, 1, 2], &judge, 0, Some(2)).unwrap(), 0.0);
        assert_eq!(precision_at_k(&[1, 3, 2, 4], &judge, 0, 2).unwrap(), 0.5);
    }

    #[test]
    fn ap_matches_brute_force_on_random_rankings() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let labels: Vec<u32> = (0..21).map(|_| rng.random_range(0..3)).collect();
            let judge = single_label_judge(&labels);
            let mut ranking: Vec<u64> = (1..21).collect();
            ranking.shuffle(&mut rng);
            let rel: Vec<bool> = ranking.iter().map(|&i| labels[i as usize] == labels[0]).collect();
            let ap = average_precision(&ranking, &judge, 0, None).unwrap();
            assert!((ap - brute_force_ap(&rel)).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_invariant_to_shuffling_trailing_irrelevant_items() {
        let judge = single_label_judge(&[0, 0, 1, 0, 1, 1, 1, 1]);
        let base = average_precision(&[2, 1, 4, 3, 5, 6, 7], &judge, 0, None).unwrap();
        let shuffled = average_precision(&[2, 1, 4, 3, 7, 5, 6], &judge, 0, None).unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn multi_label_relevance_needs_one_shared_concept() {
        let judge = RelevanceJudge::new(
            [(0, vec![1, 4]), (1, vec![4, 7]), (2, vec![2]), (3, vec![])],
            RelevanceMode::MultiLabel,
        );
        assert!(judge.is_relevant(0, 1).unwrap());
        assert!(!judge.is_relevant(0, 2).unwrap());
        assert!(!judge.is_relevant(0, 3).unwrap());
    }

    #[test]
    fn random_ranking_map_near_class_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 2000usize;
        let labels: Vec<u32> = (0..n).map(|i| (i % 10) as u32).collect();
        let judge = single_label_judge(&labels);
        let mut total = 0.0;
        for q in 0..1000u64 {
            let mut ranking: Vec<u64> = (0..n as u64).filter(|&i| i != q).collect();
            ranking.shuffle(&mut rng);
            total += average_precision(&ranking, &judge, q, None).unwrap();
        }
        let map = total / 1000.0;
        assert!((map - 0.1).abs() < 0.03, "{map}");
    }

    #[test]
    fn kmeans_recovers_repeated_directions() {
        let shape = SubspaceShape::new(2, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs: Vec<Vec<f64>> = (0..2 * 4)
            .map(|_| {
                let v: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
                crate::numerics::l2_normalize(&v).unwrap()
            })
            .collect();
        let feats: Vec<Vec<f64>> = (0..200)
            .map(|i| [dirs[i % 4].clone(), dirs[4 + (i / 4) % 4].clone()].concat())
            .collect();
        let cb = pq_baseline_train(&feats, shape, 25, 7).unwrap();
        for m in 0..2 {
            for dir in &dirs[m * 4..(m + 1) * 4] {
                let best = (0..4).map(|k| dot(dir, cb.codeword(m, k))).fold(f64::MIN, f64::max);
                assert!(best > 0.999, "{best}");
            }
        }
        assert_eq!(pq_baseline_train(&feats, shape, 25, 7).unwrap(), cb);
    }

    #[test]
    fn converged_codebook_is_a_fixed_point() {
        let shape = SubspaceShape::new(1, 3, 2).unwrap();
        let feats = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        let (cb, hist) = pq_baseline_fit(&feats, shape, 1, 0).unwrap();
        let (cb2, _) = pq_baseline_fit(&feats, shape, 3, 0).unwrap();
        assert_eq!(cb, cb2);
        assert_eq!(hist, vec![1.0, 1.0]);
    }

    #[test]
    fn kmeans_objective_never_decreases() {
        let shape = SubspaceShape::new(3, 4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                let raw: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
                intra_normalize(&raw, &shape).unwrap()
            })
            .collect();
        let (_, hist) = pq_baseline_fit(&feats, shape, 25, 3).unwrap();
        assert_eq!(hist.len(), 26);
        for w in hist.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{hist:?}");
        }
        assert!(matches!(
            pq_baseline_train(&feats[..7], shape, 5, 0),
            Err(GpqError::TooFewItems { needed: 8, got: 7 })
        ));
    }
}
