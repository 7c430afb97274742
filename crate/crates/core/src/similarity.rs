//! Cross-modal, intra-modal and hybrid scoring against a database, and
//! deterministic ranking.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate, mean_pool, AggregatorConfig, AggregatorParams};
use crate::error::{Error, Result};
use crate::linalg::{self, dot_mixed};
use crate::store::{DualSpaceDatabase, EmbeddingSet, QueryBundle};

/// Rows per scoring block.
const BLOCK_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Cross,
    Intra,
    Hybrid,
}

/// One score per database item, in database order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub kind: ScoreKind,
}

/// Scores `query` against rows `range` of `set`.
pub fn score_rows(set: &EmbeddingSet, range: Range<usize>, query: &[f64]) -> Vec<f64> {
    let dim = set.dim();
    let flat = &set.as_flat()[range.start * dim..range.end * dim];
    flat.chunks_exact(dim).map(|row| dot_mixed(row, query)).collect()
}

/// Blocked matrix-vector product over the whole set. Each score is an
/// independent dot product, so the block split never changes results.
pub fn score_set(set: &EmbeddingSet, query: &[f64]) -> Result<Vec<f64>> {
    if query.len() != set.dim() {
        return Err(Error::dim("query vector", set.dim(), query.len()));
    }
    let dim = set.dim();
    let blocks: Vec<Vec<f64>> = set
        .as_flat()
        .par_chunks(BLOCK_ROWS * dim)
        .map(|block| block.chunks_exact(dim).map(|row| dot_mixed(row, query)).collect())
        .collect();
    Ok(blocks.concat())
}

pub fn cross_modal_scores(text_embedding: &[f32], db: &DualSpaceDatabase) -> Result<ScoreVector> {
    let q = linalg::to_f64(text_embedding);
    Ok(ScoreVector {
        values: score_set(db.vlm(), &q)?,
        kind: ScoreKind::Cross,
    })
}

pub fn intra_modal_scores(aggregated_query: &[f64], db: &DualSpaceDatabase) -> Result<ScoreVector> {
    Ok(ScoreVector {
        values: score_set(db.vm(), aggregated_query)?,
        kind: ScoreKind::Intra,
    })
}

/// `(1 − λ)·cross + λ·intra`, elementwise.
pub fn hybrid_scores(lambda: f64, cross: &ScoreVector, intra: &ScoreVector) -> Result<ScoreVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if cross.values.len() != intra.values.len() {
        return Err(Error::dim("score vector", cross.values.len(), intra.values.len()));
    }
    let values = cross
        .values
        .iter()
        .zip(&intra.values)
        .map(|(c, i)| (1.0 - lambda) * c + lambda * i)
        .collect();
    Ok(ScoreVector {
        values,
        kind: ScoreKind::Hybrid,
    })
}

/// Database indices by descending score; equal scores keep ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub order: Vec<usize>,
}

impl Ranking {
    pub const TIE_RULE: &'static str = "ascending-index";

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn rank(scores: &ScoreVector, top_k: Option<usize>) -> Result<Ranking> {
    if let Some(i) = scores.values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("NaN score at index {i}")));
    }
    let values = &scores.values;
    let mut order: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    match top_k {
        Some(k) if k < order.len() => {
            if k > 0 {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            order.truncate(k);
            order.sort_unstable_by(cmp);
        }
        _ => order.sort_unstable_by(cmp),
    }
    Ok(Ranking { order })
}

/// How a query bundle is turned into scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Cross-modal only.
    TextOnly,
    /// Intra-modal with the mean-pooled image queries.
    ImageOnlyMean,
    /// Intra-modal with the attention aggregator.
    ImageOnlyAgg,
    /// λ = 0.5 fusion with mean pooling.
    HybridMean,
    /// Learned λ fusion with the attention aggregator.
    Ours,
}

impl QueryMode {
    pub const ALL: [QueryMode; 5] = [
        QueryMode::TextOnly,
        QueryMode::ImageOnlyMean,
        QueryMode::ImageOnlyAgg,
        QueryMode::HybridMean,
        QueryMode::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::TextOnly => "text-only",
            QueryMode::ImageOnlyMean => "image-only-mean",
            QueryMode::ImageOnlyAgg => "image-only-agg",
            QueryMode::HybridMean => "hybrid-mean",
            QueryMode::Ours => "ours",
        }
    }

    pub fn needs_images(self) -> bool {
        self != QueryMode::TextOnly
    }

    pub fn needs_params(self) -> bool {
        matches!(self, QueryMode::ImageOnlyAgg | QueryMode::Ours)
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = QueryMode::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown mode {s:?} (expected one of {names:?})"))
            })
    }
}

/// Scores one bundle against the database under `mode`.
pub fn score_query(
    bundle: &QueryBundle,
    db: &DualSpaceDatabase,
    params: Option<&AggregatorParams>,
    config: &AggregatorConfig,
    mode: QueryMode,
) -> Result<ScoreVector> {
    bundle.check_dims(db.text_dim(), db.image_dim())?;
    if mode.needs_images() && bundle.k() == 0 {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} needs image queries but query {} has none",
            bundle.query_id
        )));
    }
    let params = if mode.needs_params() {
        let p = params.ok_or_else(|| {
            Error::InvalidArgument(format!("mode {mode} needs aggregator parameters"))
        })?;
        p.check_dim(db.image_dim())?;
        Some(p)
    } else {
        None
    };
    let tokens = || -> Vec<Vec<f64>> { bundle.image_queries.iter().map(|v| linalg::to_f64(v)).collect() };

    match mode {
        QueryMode::TextOnly => cross_modal_scores(&bundle.text_embedding, db),
        QueryMode::ImageOnlyMean => intra_modal_scores(&mean_pool(&tokens())?, db),
        QueryMode::ImageOnlyAgg => {
            let agg = aggregate(params.expect("checked"), &tokens(), config)?;
            intra_modal_scores(&agg, db)
        }
        QueryMode::HybridMean => {
            let cross = cross_modal_scores(&bundle.text_embedding, db)?;
            let intra = intra_modal_scores(&mean_pool(&tokens())?, db)?;
            hybrid_scores(0.5, &cross, &intra)
        }
        QueryMode::Ours => {
            let p = params.expect("checked");
            let cross = cross_modal_scores(&bundle.text_embedding, db)?;
            let agg = aggregate(p, &tokens(), config)?;
            let intra = intra_modal_scores(&agg, db)?;
            hybrid_scores(p.lambda(), &cross, &intra)
        }
    }
}
