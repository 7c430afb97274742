//! Learning the aggregator projections and the mixing weight λ.
//!
//! Each step samples `M` classes with `N` query images and one positive
//! each, mines the hardest in-batch negative under the hybrid similarity,
//! and takes an Adam step on the mean two-way contrastive loss. During
//! training the positive's cross-modal similarity is clamped to 1 (by
//! default) while the negative's is computed for real.

mod adam;
mod batch;
mod loss;
mod store;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, AggregatorParams};
use crate::error::{Error, Result};
use crate::fsutil;

pub use adam::Adam;
pub use batch::{build_batch, mine_negatives, BatchEntry, MiningMode, NegativeMiner, TrainBatch};
pub use loss::{batch_loss_and_grads, contrastive_loss, pair_scores, BatchGrads, ContrastiveTerms, PairScores};
pub use store::{load_train_store, save_train_store, TrainClass, TrainImage, TrainManifest, TrainStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Classes per batch (`M`).
    pub classes_per_batch: usize,
    /// Query images per class (`N`); one more image is drawn as the positive.
    pub queries_per_class: usize,
    /// Contrastive temperature.
    pub tau: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mining: MiningMode,
    /// Sample from every generator's images; otherwise only `primary_generator`.
    pub dual_generator: bool,
    pub primary_generator: u8,
    pub repeat_inputs: bool,
    pub clamp_positive: bool,
    pub lambda_trainable: bool,
    pub num_layers: usize,
    pub logit_temperature: f64,
    /// Projection init noise; `None` means `0.01/√d`.
    pub init_noise_std: Option<f64>,
    /// Test hook: zero the projection gradients.
    pub freeze_aggregator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 32,
            queries_per_class: 5,
            tau: 0.1,
            steps: 2000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mining: MiningMode::Dynamic,
            dual_generator: true,
            primary_generator: 0,
            repeat_inputs: true,
            clamp_positive: true,
            lambda_trainable: true,
            num_layers: 2,
            logit_temperature: 1.0,
            init_noise_std: None,
            freeze_aggregator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes_per_batch < 2 {
            return bad("classes_per_batch must be >= 2");
        }
        if self.queries_per_class < 1 {
            return bad("queries_per_class must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1");
        }
        if !(self.logit_temperature > 0.0 && self.logit_temperature.is_finite()) {
            return bad("logit_temperature must be positive");
        }
        if let Some(s) = self.init_noise_std {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("init_noise_std must be non-negative");
            }
        }
        Ok(())
    }

    pub fn aggregator_config(&self) -> AggregatorConfig {
        AggregatorConfig {
            repeat_inputs: self.repeat_inputs,
            logit_temperature: self.logit_temperature,
            renormalize_output: false,
        }
    }

    pub fn initial_params(&self, dim: usize) -> Result<AggregatorParams> {
        match self.init_noise_std {
            Some(std) => AggregatorParams::init_with_noise(dim, self.num_layers, self.seed, std),
            None => AggregatorParams::init(dim, self.num_layers, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").expect("writing to a Vec cannot fail");
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_jsonl()?)
    }

    /// Trailing moving average of the loss over `window` steps.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.records.iter().map(|r| r.loss).collect();
        if window == 0 || losses.len() < window {
            return Vec::new();
        }
        losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

fn flatten(params: &AggregatorParams) -> Vec<f64> {
    let mut flat: Vec<f64> = params.projections().iter().flat_map(|m| m.data().iter().copied()).collect();
    flat.push(params.lambda_logit);
    flat
}

fn unflatten(flat: &[f64], params: &mut AggregatorParams) {
    let mut offset = 0;
    for m in params.projections_mut() {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    params.lambda_logit = flat[offset];
}

fn flatten_grads(g: &BatchGrads) -> Vec<f64> {
    let mut flat: Vec<f64> = g.projections.iter().flat_map(|m| m.data().iter().copied()).collect();
    flat.push(g.lambda_logit);
    flat
}

/// Runs the full loop. Deterministic given `config.seed`, independent of
/// the rayon worker count.
pub fn train(store: &TrainStore, config: &TrainConfig) -> Result<(AggregatorParams, TrainingLog)> {
    config.validate()?;
    let (_, image_dim) = store.dims()?;
    let mut params = config.initial_params(image_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let miner = NegativeMiner::new(config.mining, &params, config.aggregator_config());
    let mut flat = flatten(&params);
    let mut adam = Adam::new(
        flat.len(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut log = TrainingLog::default();

    for step in 0..config.steps {
        let batch = build_batch(store, config, &mut rng)?;
        let negatives = miner.mine(&batch, &params)?;
        let grads = batch_loss_and_grads(&batch, &negatives, &params, config)?;
        let grad_norm = grads.norm();
        if !grads.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: loss {} grad norm {grad_norm} (lambda {})",
                grads.loss,
                params.lambda()
            )));
        }
        log.records.push(StepRecord {
            step,
            loss: grads.loss,
            lambda: params.lambda(),
            grad_norm,
        });
        adam.step(&mut flat, &flatten_grads(&grads));
        unflatten(&flat, &mut params);
        params.round_projections_to_f32();
        flat = flatten(&params);
    }
    Ok((params, log))
}
