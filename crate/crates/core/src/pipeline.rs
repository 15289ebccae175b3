//! Glue between datasets, splits, training, indexing and evaluation.

use crate::data::{Dataset, ProtocolSplit};
use crate::error::{GpqError, Result};
use crate::eval::{evaluate_queries, pq_baseline_train, EvalReport, Query, RelevanceJudge, RelevanceMode};
use crate::index::RetrievalIndex;
use crate::numerics::{intra_normalize, SubspaceShape};
use crate::trainer::{train, update_codewords_from_prototypes, EpochMetrics, GpqModel, LabeledSet, TrainConfig};

/// Lloyd iterations used by the unsupervised PQ baseline.
pub const BASELINE_ITERATIONS: usize = 25;

pub fn labeled_set(ds: &Dataset, ids: &[u64]) -> Result<LabeledSet> {
    Ok(LabeledSet {
        inputs: ds.rows(ids)?,
        labels: ids.iter().map(|&id| ds.label_row(id as usize)).collect(),
    })
}

/// Relevance by shared primary class for single-label data, by any shared
/// concept otherwise.
pub fn judge(ds: &Dataset) -> RelevanceJudge {
    let mode = if ds.labels.iter().all(|l| l.len() <= 1) {
        RelevanceMode::SingleLabel
    } else {
        RelevanceMode::MultiLabel
    };
    RelevanceJudge::new(
        ds.labels.iter().enumerate().map(|(i, l)| (i as u64, l.clone())),
        mode,
    )
}

pub fn train_on_split(ds: &Dataset, split: &ProtocolSplit, config: &TrainConfig) -> Result<(GpqModel, Vec<EpochMetrics>)> {
    let labeled = labeled_set(ds, &split.labeled)?;
    let unlabeled = ds.rows(&split.unlabeled)?;
    let (state, log) = train(&labeled, &unlabeled, config)?;
    Ok((state.model, log))
}

/// Encodes the database items with the model. With `proto_update` the
/// codebook is first replaced by its soft assignment to the prototypes.
pub fn build_index(model: &GpqModel, ds: &Dataset, database: &[u64], proto_update: Option<f64>) -> Result<RetrievalIndex> {
    let features = model.features(&ds.rows(database)?)?;
    let codebook = match proto_update {
        Some(alpha) => update_codewords_from_prototypes(&model.codebook, &model.prototypes, alpha)?,
        None => model.codebook.clone(),
    };
    RetrievalIndex::build(&features, &codebook)?.with_ids(database.to_vec())
}

pub fn model_queries(model: &GpqModel, ds: &Dataset, ids: &[u64]) -> Result<Vec<Query>> {
    let features = model.features(&ds.rows(ids)?)?;
    Ok(ids.iter().zip(features).map(|(&id, feature)| Query { id, feature }).collect())
}

/// Shape for PQ directly on raw inputs of width `dim` with a given bit budget
/// at `K` codewords: `M = bits / log2 K`, `d = dim / M`.
pub fn baseline_shape(dim: usize, bits: usize, num_codewords: usize) -> Result<SubspaceShape> {
    let per = num_codewords.trailing_zeros() as usize;
    if per == 0 || bits % per != 0 {
        return Err(GpqError::InvalidConfig(format!("{bits} bits with K={num_codewords}")));
    }
    let m = bits / per;
    if m == 0 || dim % m != 0 {
        return Err(GpqError::InvalidShape(format!("input dim {dim} not divisible into {m} subspaces")));
    }
    SubspaceShape::new(m, dim / m, num_codewords)
}

/// Intra-normalized raw inputs for the encoder-free baseline.
pub fn raw_features(ds: &Dataset, ids: &[u64], shape: &SubspaceShape) -> Result<Vec<Vec<f64>>> {
    ds.rows(ids)?.iter().map(|r| intra_normalize(r, shape)).collect()
}

/// mAP of unsupervised PQ trained on the database's raw inputs.
pub fn baseline_map(ds: &Dataset, split: &ProtocolSplit, bits: usize, num_codewords: usize, seed: u64) -> Result<f64> {
    let shape = baseline_shape(ds.dim, bits, num_codewords)?;
    let db = raw_features(ds, &split.database, &shape)?;
    let cb = pq_baseline_train(&db, shape, BASELINE_ITERATIONS, seed)?;
    let index = RetrievalIndex::build(&db, &cb)?.with_ids(split.database.clone())?;
    let queries: Vec<Query> = split
        .query
        .iter()
        .zip(raw_features(ds, &split.query, &shape)?)
        .map(|(&id, feature)| Query { id, feature })
        .collect();
    let per = evaluate_queries(&queries, &index, &judge(ds), None, &[])?;
    Ok(EvalReport::from_metrics(&per, &[], &index).map)
}

/// Full-ranking evaluation of `index` on the split's queries.
pub fn evaluate(model: &GpqModel, ds: &Dataset, split: &ProtocolSplit, index: &RetrievalIndex, ks: &[usize]) -> Result<EvalReport> {
    let queries = model_queries(model, ds, &split.query)?;
    let per = evaluate_queries(&queries, index, &judge(ds), None, ks)?;
    Ok(EvalReport::from_metrics(&per, ks, index))
}
