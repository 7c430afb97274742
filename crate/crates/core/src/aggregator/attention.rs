//! One symmetric self-attention layer: shared query/key projection, identity
//! values. Any subset of query rows can be materialized; the aggregator
//! normally needs only the CLS row.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax_in_place, Matrix};

/// Softmax row for one query token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub query: usize,
    pub weights: Vec<f64>,
}

/// Everything needed to backpropagate through one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub inputs: Vec<Vec<f64>>,
    pub projected: Vec<Vec<f64>>,
    pub rows: Vec<AttentionRow>,
    pub temperature: f64,
}

fn check_tokens(projection: &Matrix, tokens: &[Vec<f64>]) -> Result<()> {
    let d = projection.rows();
    if projection.cols() != d {
        return Err(Error::dim("projection columns", d, projection.cols()));
    }
    for t in tokens {
        if t.len() != d {
            return Err(Error::dim("attention token", d, t.len()));
        }
    }
    Ok(())
}

/// Attends the listed query rows over all `inputs`. Returns one output
/// token per requested row, in order.
pub(crate) fn attend_rows(
    projection: &Matrix,
    inputs: Vec<Vec<f64>>,
    query_rows: &[usize],
    temperature: f64,
) -> (Vec<Vec<f64>>, LayerCache) {
    let d = projection.rows();
    let projected: Vec<Vec<f64>> = inputs.iter().map(|u| projection.mul_vec(u)).collect();
    let mut rows = Vec::with_capacity(query_rows.len());
    let mut outputs = Vec::with_capacity(query_rows.len());
    for &q in query_rows {
        let mut weights: Vec<f64> = projected
            .iter()
            .map(|p| dot(&projected[q], p) / temperature)
            .collect();
        softmax_in_place(&mut weights);
        let mut out = vec![0.0; d];
        for (w, u) in weights.iter().zip(&inputs) {
            axpy(*w, u, &mut out);
        }
        outputs.push(out);
        rows.push(AttentionRow { query: q, weights });
    }
    (
        outputs,
        LayerCache {
            inputs,
            projected,
            rows,
            temperature,
        },
    )
}

/// CLS-only layer: the tokens are `base_tokens` followed by `cls_in`, and the
/// result is the attention output of that last token.
pub fn attention_layer_forward(
    projection: &Matrix,
    base_tokens: &[Vec<f64>],
    cls_in: &[f64],
    temperature: f64,
) -> Result<(Vec<f64>, LayerCache)> {
    if base_tokens.is_empty() {
        return Err(Error::Empty("attention layer needs at least one token".into()));
    }
    let mut inputs = base_tokens.to_vec();
    inputs.push(cls_in.to_vec());
    check_tokens(projection, &inputs)?;
    let k = base_tokens.len();
    let (mut out, cache) = attend_rows(projection, inputs, &[k], temperature);
    Ok((out.pop().expect("one row"), cache))
}

/// Every row of the layer; output token `i` corresponds to input token `i`.
pub fn full_attention_forward(
    projection: &Matrix,
    tokens: &[Vec<f64>],
    temperature: f64,
) -> Result<(Vec<Vec<f64>>, LayerCache)> {
    if tokens.is_empty() {
        return Err(Error::Empty("attention layer needs at least one token".into()));
    }
    check_tokens(projection, tokens)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    Ok(attend_rows(projection, tokens.to_vec(), &rows, temperature))
}

/// Backpropagates `grad_rows` (one gradient per materialized row, same order
/// as `cache.rows`) into gradients for every input token and the projection.
pub(crate) fn layer_backward(
    projection: &Matrix,
    cache: &LayerCache,
    grad_rows: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Matrix) {
    debug_assert_eq!(grad_rows.len(), cache.rows.len());
    let d = projection.rows();
    let n = cache.inputs.len();
    let mut grad_inputs = vec![vec![0.0; d]; n];
    let mut grad_projected = vec![vec![0.0; d]; n];

    for (row, g) in cache.rows.iter().zip(grad_rows) {
        let q = row.query;
        let align: Vec<f64> = cache.inputs.iter().map(|u| dot(g, u)).collect();
        let mean_align = dot(&row.weights, &align);
        for j in 0..n {
            let w = row.weights[j];
            axpy(w, g, &mut grad_inputs[j]);
            let delta = w * (align[j] - mean_align) / cache.temperature;
            if delta == 0.0 {
                continue;
            }
            axpy(delta, &cache.projected[j], &mut grad_projected[q]);
            axpy(delta, &cache.projected[q], &mut grad_projected[j]);
        }
    }

    let mut grad_projection = Matrix::zeros(d, d);
    for j in 0..n {
        grad_projection.add_outer(&grad_projected[j], &cache.inputs[j]);
        let back = projection.mul_vec_transposed(&grad_projected[j]);
        axpy(1.0, &back, &mut grad_inputs[j]);
    }
    (grad_inputs, grad_projection)
}
