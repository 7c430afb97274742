//! Batch sampling and in-batch hard-negative mining.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainStore};
use crate::aggregator::{aggregate, AggregatorConfig, AggregatorParams};
use crate::error::{Error, Result};
use crate::linalg::{dot, to_f64};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub class_id: u32,
    pub text: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
    pub positive_vm: Vec<f64>,
    pub positive_vlm: Vec<f64>,
}

/// `M` entries from distinct classes. The negative of entry `i` is the
/// positive of some other entry `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub entries: Vec<BatchEntry>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Samples `M` classes without replacement and `N + 1` images per class
/// without replacement; the last sampled image is the positive.
pub fn build_batch(store: &TrainStore, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
    let m = config.classes_per_batch;
    let need = config.queries_per_class + 1;
    if store.classes.len() < m {
        return Err(Error::InvalidConfig(format!(
            "batch needs {m} classes but the store has {}",
            store.classes.len()
        )));
    }
    let picked = index::sample(rng, store.classes.len(), m);
    let mut entries = Vec::with_capacity(m);
    for ci in picked.iter() {
        let class = &store.classes[ci];
        let pool: Vec<usize> = class
            .images
            .iter()
            .enumerate()
            .filter(|(_, img)| config.dual_generator || img.generator == config.primary_generator)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < need {
            return Err(Error::InvalidConfig(format!(
                "class {} has {} eligible images, batch needs {need}",
                class.class_id,
                pool.len()
            )));
        }
        let chosen: Vec<usize> = index::sample(rng, pool.len(), need).iter().map(|i| pool[i]).collect();
        let (queries, positive) = chosen.split_at(need - 1);
        let pos = &class.images[positive[0]];
        entries.push(BatchEntry {
            class_id: class.class_id,
            text: to_f64(&class.text_embedding),
            queries: queries.iter().map(|&i| to_f64(&class.images[i].vm)).collect(),
            positive_vm: to_f64(&pos.vm),
            positive_vlm: to_f64(&pos.vlm),
        });
    }
    Ok(TrainBatch { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    /// Hardness under the current parameters, every step.
    Dynamic,
    /// Hardness under the initial parameters, frozen for the whole run.
    Static,
}

impl std::str::FromStr for MiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(MiningMode::Dynamic),
            "static" => Ok(MiningMode::Static),
            other => Err(Error::InvalidArgument(format!("unknown mining mode {other:?}"))),
        }
    }
}

/// For each entry, the other entry whose positive has the highest hybrid
/// similarity to this entry's query. Ties go to the smaller index.
pub fn mine_negatives(
    batch: &TrainBatch,
    params: &AggregatorParams,
    config: &AggregatorConfig,
) -> Result<Vec<usize>> {
    let m = batch.len();
    if m < 2 {
        return Err(Error::InvalidConfig("negative mining needs at least 2 entries".into()));
    }
    let lambda = params.lambda();
    let aggregates: Vec<Vec<f64>> = batch
        .entries
        .par_iter()
        .map(|e| aggregate(params, &e.queries, config))
        .collect::<Result<_>>()?;

    let negatives = (0..m)
        .map(|i| {
            let query = &batch.entries[i];
            let mut best = usize::MAX;
            let mut best_score = f64::NEG_INFINITY;
            for (j, cand) in batch.entries.iter().enumerate() {
                if j == i {
                    continue;
                }
                let s = (1.0 - lambda) * dot(&query.text, &cand.positive_vlm)
                    + lambda * dot(&aggregates[i], &cand.positive_vm);
                if best == usize::MAX || s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            best
        })
        .collect();
    Ok(negatives)
}

/// Applies the configured mining mode. Static mode scores with a snapshot of
/// the parameters taken at construction.
#[derive(Debug, Clone)]
pub struct NegativeMiner {
    mode: MiningMode,
    snapshot: AggregatorParams,
    config: AggregatorConfig,
}

impl NegativeMiner {
    pub fn new(mode: MiningMode, initial: &AggregatorParams, config: AggregatorConfig) -> Self {
        Self {
            mode,
            snapshot: initial.clone(),
            config,
        }
    }

    pub fn mode(&self) -> MiningMode {
        self.mode
    }

    pub fn mine(&self, batch: &TrainBatch, current: &AggregatorParams) -> Result<Vec<usize>> {
        let params = match self.mode {
            MiningMode::Dynamic => current,
            MiningMode::Static => &self.snapshot,
        };
        mine_negatives(batch, params, &self.config)
    }
}
