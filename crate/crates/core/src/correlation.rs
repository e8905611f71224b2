//! Correlation operators.
//!
//! Plain correlation is attention plus a residual query path. Gated
//! correlation replaces the fixed residual with a learned convex-style gate
//! M⊙Q + (1−M)⊙V, M = sigmoid(gate([Q,V])), which rebalances the query and
//! value paths. Both are stacked into two-layer blocks with FFNs for network
//! use; the raw single-layer forms are exposed for op-level checks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{attention_kernel, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamList};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CorrelationMode {
    Plain,
    Gated,
}

/// Raw Eq.-level correlation: softmax(QKᵀ/√dk)V + Q, identity projections.
pub fn correlate_raw(tape: &Tape, q: &Tensor, kv: &Tensor) -> Result<(Tensor, Tensor)> {
    let (att, weights) = attention_kernel(tape, q, kv, kv)?;
    let out = tape.add(&att, q)?;
    Ok((out, weights))
}

/// Raw gated correlation: softmax(QKᵀ/√dk)V + M⊙Q + (1−M)⊙V with
/// M = sigmoid(gate([Q,V])) concatenated on the feature axis. Q and V must be
/// the same size. Returns (output, gate mask).
pub fn gated_correlate_raw(
    tape: &Tape,
    q: &Tensor,
    kv: &Tensor,
    gate: &Linear,
) -> Result<(Tensor, Tensor)> {
    if q.shape() != kv.shape() {
        return Err(Error::Contract(format!(
            "gated correlation requires Q, K, V and M of the same size; got {:?} vs {:?}",
            q.shape(),
            kv.shape()
        )));
    }
    let (att, _) = attention_kernel(tape, q, kv, kv)?;
    let mask = gate_mask(tape, q, kv, gate)?;
    let gated_q = tape.hadamard(&mask, q)?;
    let inv = one_minus(tape, &mask)?;
    let gated_v = tape.hadamard(&inv, kv)?;
    let out = tape.add(&att, &tape.add(&gated_q, &gated_v)?)?;
    Ok((out, mask))
}

pub fn gate_mask(tape: &Tape, q: &Tensor, v: &Tensor, gate: &Linear) -> Result<Tensor> {
    let joined = tape.concat(&[q, v], 1)?;
    let raw = gate.forward(tape, &joined)?;
    tape.sigmoid(&raw)
}

fn one_minus(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    tape.add_scalar(&tape.scale(x, -1.0)?, 1.0)
}

struct CorrelationLayer {
    attn: MultiHeadAttention,
    gate: Option<Linear>,
    norm: LayerNorm,
    ffn: FeedForward,
}

/// Stacked correlation block (default two layers) as used by TFAM, STAM and
/// the aggregation stages. Each layer: attention combine, post-norm, FFN.
pub struct CorrelationBlock {
    pub mode: CorrelationMode,
    layers: Vec<CorrelationLayer>,
}

impl CorrelationBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
        layer_count: usize,
        mode: CorrelationMode,
    ) -> Result<CorrelationBlock> {
        if layer_count == 0 {
            return Err(Error::Config("correlation block needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(CorrelationLayer {
                attn: MultiHeadAttention::new(rng, dim, heads)?,
                // zero-init so the mask starts exactly at 0.5
                gate: match mode {
                    CorrelationMode::Gated => Some(Linear::zeroed(2 * dim, dim)),
                    CorrelationMode::Plain => None,
                },
                norm: LayerNorm::new(dim),
                ffn: FeedForward::new(rng, dim, 4 * dim),
            });
        }
        Ok(CorrelationBlock { mode, layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, tape: &Tape, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        if self.mode == CorrelationMode::Gated && q.shape() != kv.shape() {
            return Err(Error::Contract(format!(
                "gated correlation requires Q, K, V and M of the same size; got {:?} vs {:?}",
                q.shape(),
                kv.shape()
            )));
        }
        let mut x = q.clone();
        for layer in &self.layers {
            // pre-norm: attention and gate read the normalized query state,
            // the residual paths (Q in A·V + Q, M⊙Q) keep the raw state
            let n = layer.norm.forward(tape, &x)?;
            let (att, _) = layer.attn.forward(tape, &n, kv)?;
            let combined = match &layer.gate {
                None => tape.add(&att, &x)?,
                Some(gate) => {
                    let mask = gate_mask(tape, &n, kv, gate)?;
                    let gq = tape.hadamard(&mask, &x)?;
                    let gv = tape.hadamard(&one_minus(tape, &mask)?, kv)?;
                    tape.add(&att, &tape.add(&gq, &gv)?)?
                }
            };
            x = layer.ffn.forward(tape, &combined)?;
        }
        Ok(x)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.attn.params(&format!("{prefix}.layer{i}.attn"), out);
            if let Some(g) = &layer.gate {
                g.params(&format!("{prefix}.layer{i}.gate"), out);
            }
            layer.norm.params(&format!("{prefix}.layer{i}.norm"), out);
            layer.ffn.params(&format!("{prefix}.layer{i}.ffn"), out);
        }
    }
}

/// One row of the attention-imbalance table: value count, measured row-mean
/// softmax weight, and the fixed residual weight of the query path.
#[derive(Debug, Clone, Copy)]
pub struct ImbalanceRow {
    pub n_values: usize,
    pub mean_attn_weight: f64,
    pub residual_weight: f64,
}

/// Demonstrates why the residual path dominates when kv grows: softmax rows
/// normalize to 1, so the per-value weight averages 1/N_V while the query
/// keeps weight 1.
pub fn attention_imbalance_report(
    rng: &mut ChaCha8Rng,
    dim: usize,
    n_queries: usize,
    n_values: &[usize],
) -> Result<Vec<ImbalanceRow>> {
    let mut rows = Vec::with_capacity(n_values.len());
    for &nv in n_values {
        if nv == 0 {
            return Err(Error::Contract("attention imbalance needs N_V >= 1".into()));
        }
        let tape = Tape::new();
        let q = crate::nn::xavier_uniform(rng, n_queries, dim);
        let kv = crate::nn::xavier_uniform(rng, nv, dim);
        q.set_requires_grad(false);
        kv.set_requires_grad(false);
        let (_, weights) = attention_kernel(&tape, &q, &kv, &kv)?;
        let data = weights.to_vec();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        rows.push(ImbalanceRow {
            n_values: nv,
            mean_attn_weight: mean,
            residual_weight: 1.0,
        });
    }
    Ok(rows)
}

pub fn imbalance_tsv(rows: &[ImbalanceRow]) -> String {
    let mut out = String::from("N_V\tmean_attn_weight\tresidual_weight\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\n", r.n_values, r.mean_attn_weight, r.residual_weight));
    }
    out
}
