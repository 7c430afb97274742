//! Query-image aggregation.
//!
//! Two aggregators turn the `k` image-query embeddings of one query into a
//! single vector in the same space:
//!
//! * [`mean_pool`], the arithmetic mean;
//! * the parametric aggregator ([`aggregate_forward`]), a stack of `L`
//!   symmetric self-attention layers with identity values. A CLS token starts
//!   as the mean of the inputs; each layer re-attends it against the original
//!   inputs (or against all outputs of the previous layer when
//!   `repeat_inputs` is off). The result is the last layer's CLS output.
//!
//! Because values are the tokens themselves, every layer output is a convex
//! combination of its inputs, so the aggregate stays inside the convex hull
//! of the query embeddings.

mod attention;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

pub use attention::{attention_layer_forward, full_attention_forward, AttentionRow, LayerCache};
pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC};

use attention::{attend_rows, layer_backward};

/// Learnable state: one square projection per layer and the mixing-weight logit.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    dim: usize,
    projections: Vec<Matrix>,
    pub lambda_logit: f64,
}

impl AggregatorParams {
    pub fn new(dim: usize, projections: Vec<Matrix>, lambda_logit: f64) -> Result<Self> {
        if dim == 0 || projections.is_empty() {
            return Err(Error::InvalidArgument(
                "aggregator needs dim >= 1 and at least one layer".into(),
            ));
        }
        for p in &projections {
            if p.rows() != dim || p.cols() != dim {
                return Err(Error::dim("projection matrix", dim, p.rows().max(p.cols())));
            }
        }
        Ok(Self {
            dim,
            projections,
            lambda_logit,
        })
    }

    /// Identity projections plus N(0, (0.01/√d)²) noise, λ = 0.5.
    pub fn init(dim: usize, num_layers: usize, seed: u64) -> Result<Self> {
        Self::init_with_noise(dim, num_layers, seed, 0.01 / (dim as f64).sqrt())
    }

    pub fn init_with_noise(dim: usize, num_layers: usize, seed: u64, noise_std: f64) -> Result<Self> {
        if dim == 0 || num_layers == 0 {
            return Err(Error::InvalidArgument(
                "aggregator needs dim >= 1 and at least one layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_std)
            .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
        let projections = (0..num_layers)
            .map(|_| {
                let mut m = Matrix::identity(dim);
                for x in m.data_mut() {
                    *x += noise.sample(&mut rng);
                }
                m
            })
            .collect();
        let mut params = Self::new(dim, projections, 0.0)?;
        params.round_projections_to_f32();
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.projections.len()
    }

    pub fn projections(&self) -> &[Matrix] {
        &self.projections
    }

    pub fn projections_mut(&mut self) -> &mut [Matrix] {
        &mut self.projections
    }

    /// Mixing weight of the image term, `sigmoid(lambda_logit)`.
    pub fn lambda(&self) -> f64 {
        linalg::sigmoid(self.lambda_logit)
    }

    /// Rounds projection entries to the nearest f32 so that the checkpoint
    /// format stores them exactly.
    pub fn round_projections_to_f32(&mut self) {
        for m in &mut self.projections {
            for x in m.data_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    /// Errors unless these params operate on `dim`-dimensional tokens.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::dim("aggregator checkpoint vs image space", dim, self.dim));
        }
        Ok(())
    }
}

/// Non-learnable aggregator switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    /// Feed the original tokens to every layer (otherwise layer `l` sees all
    /// outputs of layer `l-1`).
    pub repeat_inputs: bool,
    /// Attention logits are divided by this.
    pub logit_temperature: f64,
    /// L2-normalize the aggregate.
    pub renormalize_output: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            repeat_inputs: true,
            logit_temperature: 1.0,
            renormalize_output: false,
        }
    }
}

/// Arithmetic mean of the tokens, computed as a running mean so that equal
/// tokens reproduce themselves exactly.
pub fn mean_pool(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::Empty("mean pool of zero tokens".into()))?;
    let d = first.len();
    let mut mean = first.clone();
    for (i, t) in tokens.iter().enumerate().skip(1) {
        if t.len() != d {
            return Err(Error::dim("pooled token", d, t.len()));
        }
        let inv = 1.0 / (i as f64 + 1.0);
        for (m, x) in mean.iter_mut().zip(t) {
            *m += (x - *m) * inv;
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone)]
enum CacheKind {
    Passthrough,
    Layers {
        layers: Vec<LayerCache>,
        repeat_inputs: bool,
        /// Pre-normalization output, present when the output was renormalized.
        raw_output: Option<Vec<f64>>,
    },
}

/// Intermediate state of one [`aggregate_forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    k: usize,
    dim: usize,
    num_layers: usize,
    kind: CacheKind,
}

impl ForwardCache {
    pub fn is_passthrough(&self) -> bool {
        matches!(self.kind, CacheKind::Passthrough)
    }

    pub fn layers(&self) -> &[LayerCache] {
        match &self.kind {
            CacheKind::Passthrough => &[],
            CacheKind::Layers { layers, .. } => layers,
        }
    }
}

/// Gradients of `grad_outputᵀ · output`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorGrads {
    pub projections: Vec<Matrix>,
    pub tokens: Vec<Vec<f64>>,
}

fn check_tokens(params: &AggregatorParams, tokens: &[Vec<f64>]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("aggregator needs at least one image query".into()));
    }
    for t in tokens {
        if t.len() != params.dim {
            return Err(Error::dim("image query", params.dim, t.len()));
        }
    }
    Ok(())
}

pub fn aggregate_forward(
    params: &AggregatorParams,
    tokens: &[Vec<f64>],
    config: &AggregatorConfig,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_tokens(params, tokens)?;
    let k = tokens.len();
    let mut cache = ForwardCache {
        k,
        dim: params.dim,
        num_layers: params.num_layers(),
        kind: CacheKind::Passthrough,
    };
    if k == 1 {
        return Ok((tokens[0].clone(), cache));
    }

    let temperature = config.logit_temperature;
    let last = params.num_layers() - 1;
    let mut layers = Vec::with_capacity(params.num_layers());
    let mut cls = mean_pool(tokens)?;

    if config.repeat_inputs {
        for projection in &params.projections {
            let mut inputs = tokens.to_vec();
            inputs.push(cls);
            let (mut out, layer) = attend_rows(projection, inputs, &[k], temperature);
            cls = out.pop().expect("one row");
            layers.push(layer);
        }
    } else {
        let mut current = tokens.to_vec();
        current.push(cls);
        let every_row: Vec<usize> = (0..=k).collect();
        for (l, projection) in params.projections.iter().enumerate() {
            let rows: &[usize] = if l == last { &[k] } else { &every_row };
            let (out, layer) = attend_rows(projection, current, rows, temperature);
            layers.push(layer);
            current = out;
        }
        cls = current.pop().expect("cls row");
    }

    let raw_output = if config.renormalize_output {
        let raw = cls.clone();
        linalg::normalize_in_place(&mut cls);
        Some(raw)
    } else {
        None
    };
    cache.kind = CacheKind::Layers {
        layers,
        repeat_inputs: config.repeat_inputs,
        raw_output,
    };
    Ok((cls, cache))
}

/// Forward pass without the cache.
pub fn aggregate(params: &AggregatorParams, tokens: &[Vec<f64>], config: &AggregatorConfig) -> Result<Vec<f64>> {
    aggregate_forward(params, tokens, config).map(|(out, _)| out)
}

pub fn aggregate_backward(
    params: &AggregatorParams,
    cache: &ForwardCache,
    grad_output: &[f64],
) -> Result<AggregatorGrads> {
    if cache.dim != params.dim || cache.num_layers != params.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "forward cache (dim {}, {} layers) does not match params (dim {}, {} layers)",
            cache.dim,
            cache.num_layers,
            params.dim,
            params.num_layers()
        )));
    }
    if grad_output.len() != params.dim {
        return Err(Error::dim("output gradient", params.dim, grad_output.len()));
    }
    let d = params.dim;
    let k = cache.k;
    let mut grads = AggregatorGrads {
        projections: vec![Matrix::zeros(d, d); params.num_layers()],
        tokens: vec![vec![0.0; d]; k],
    };

    let (layers, repeat_inputs, raw_output) = match &cache.kind {
        CacheKind::Passthrough => {
            grads.tokens[0] = grad_output.to_vec();
            return Ok(grads);
        }
        CacheKind::Layers {
            layers,
            repeat_inputs,
            raw_output,
        } => (layers, *repeat_inputs, raw_output),
    };

    let mut g = grad_output.to_vec();
    if let Some(raw) = raw_output {
        // d(x/|x|) = (I - y yᵀ)/|x|
        let n = linalg::norm(raw);
        let y: Vec<f64> = raw.iter().map(|x| x / n).collect();
        let gy = linalg::dot(&g, &y);
        for (gi, yi) in g.iter_mut().zip(&y) {
            *gi = (*gi - gy * yi) / n;
        }
    }

    let mut row_grads = vec![g];
    let mut cls_grad = Vec::new();
    for l in (0..layers.len()).rev() {
        let (grad_inputs, grad_projection) =
            layer_backward(&params.projections[l], &layers[l], &row_grads);
        grads.projections[l] = grad_projection;
        if repeat_inputs || l == 0 {
            for (acc, gi) in grads.tokens.iter_mut().zip(&grad_inputs) {
                linalg::axpy(1.0, gi, acc);
            }
        }
        if l == 0 {
            cls_grad = grad_inputs[k].clone();
        } else if repeat_inputs {
            row_grads = vec![grad_inputs[k].clone()];
        } else {
            row_grads = grad_inputs;
        }
    }

    // CLS_0 is the mean of the tokens.
    let share = 1.0 / k as f64;
    for acc in &mut grads.tokens {
        linalg::axpy(share, &cls_grad, acc);
    }
    Ok(grads)
}
