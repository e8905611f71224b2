//! Query assembling, the 2-layer decoder over the enhanced memory, and the
//! classification/box heads.
//!
//! The query assembler runs a shared shallow 2-layer decoder SD over the
//! primal queries and each context memory, then concatenates
//! [Q_p, SD(Q_p, M_{t+i})...] on the query axis.

use rand_chacha::ChaCha8Rng;

use crate::encoder::MemoryMap;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamList};
use crate::tensor::{Tape, Tensor};

pub struct QuerySet {
    pub primal: Tensor,    // [N_p, d]
    pub assembled: Tensor, // [N_p*(1+N_c), d]
}

/// Per-query class logits (sigmoid semantics, no softmax over classes) and
/// normalized (cx, cy, w, h) boxes.
pub struct DetectionSet {
    pub logits: Tensor, // [N_q, C]
    pub boxes: Tensor,  // [N_q, 4] in (0,1)
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
}

pub struct TransformerDecoder {
    layers: Vec<DecoderLayer>,
    /// Self-attention can be bypassed to make the decoded set insensitive to
    /// query order (used by permutation tests).
    pub self_attn_enabled: bool,
}

impl TransformerDecoder {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, layer_count: usize) -> Result<TransformerDecoder> {
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(rng, dim, heads)?,
                self_norm: LayerNorm::new(dim),
                cross_attn: MultiHeadAttention::new(rng, dim, heads)?,
                cross_norm: LayerNorm::new(dim),
                ffn: FeedForward::new(rng, dim, 4 * dim),
            });
        }
        Ok(TransformerDecoder {
            layers,
            self_attn_enabled: true,
        })
    }

    /// Returns the decoded queries and the final layer's cross-attention
    /// weights (diagnostics, detached).
    pub fn forward(&self, tape: &Tape, queries: &Tensor, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mut states, last_cross) = self.forward_all(tape, queries, memory)?;
        Ok((states.pop().expect("at least one layer"), last_cross))
    }

    /// Like `forward`, but returns every layer's decoded state (for
    /// deep-supervision auxiliary losses) along with the final layer's
    /// cross-attention weights.
    pub fn forward_all(
        &self,
        tape: &Tape,
        queries: &Tensor,
        memory: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        if queries.shape()[1] != memory.shape()[1] {
            return Err(Error::dim(
                "decode",
                format!("query dim {:?} vs memory dim {:?}", queries.shape(), memory.shape()),
            ));
        }
        let mut x = queries.clone();
        let mut last_cross = Tensor::zeros(&[1, 1]);
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if self.self_attn_enabled {
                let n = layer.self_norm.forward(tape, &x)?;
                let (sa, _) = layer.self_attn.forward(tape, &n, &n)?;
                x = tape.add(&x, &sa)?;
            }
            let n = layer.cross_norm.forward(tape, &x)?;
            let (ca, attn) = layer.cross_attn.forward(tape, &n, memory)?;
            last_cross = attn;
            x = tape.add(&x, &ca)?;
            x = layer.ffn.forward(tape, &x)?;
            states.push(x.clone());
        }
        Ok((states, last_cross))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.self_attn.params(&format!("{prefix}.layer{i}.self_attn"), out);
            layer.self_norm.params(&format!("{prefix}.layer{i}.self_norm"), out);
            layer.cross_attn.params(&format!("{prefix}.layer{i}.cross_attn"), out);
            layer.cross_norm.params(&format!("{prefix}.layer{i}.cross_norm"), out);
            layer.ffn.params(&format!("{prefix}.layer{i}.ffn"), out);
        }
    }
}

/// Shared shallow decoder applied per context frame.
pub struct QueryAssembler {
    pub sd: TransformerDecoder,
}

impl QueryAssembler {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, layer_count: usize) -> Result<QueryAssembler> {
        Ok(QueryAssembler {
            sd: TransformerDecoder::new(rng, dim, heads, layer_count)?,
        })
    }

    pub fn assemble(&self, tape: &Tape, q_p: &Tensor, m_ctx: &[&MemoryMap]) -> Result<QuerySet> {
        if m_ctx.is_empty() {
            return Err(Error::Contract("query assembling requires at least one context frame".into()));
        }
        let mut parts: Vec<Tensor> = vec![q_p.clone()];
        for m in m_ctx {
            let (decoded, _) = self.sd.forward(tape, q_p, &m.tokens)?;
            parts.push(decoded);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let assembled = tape.concat(&refs, 0)?;
        Ok(QuerySet {
            primal: q_p.clone(),
            assembled,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.sd.params(&format!("{prefix}.sd"), out);
    }
}

/// Class head (single linear, sigmoid/focal semantics) and a 3-layer MLP box
/// head squashed to (0,1).
pub struct DetectionHeads {
    pub class_head: Linear,
    box_l1: Linear,
    box_l2: Linear,
    box_l3: Linear,
}

impl DetectionHeads {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, class_count: usize) -> DetectionHeads {
        let class_head = Linear::new(rng, dim, class_count);
        // focal-friendly prior: start every class probability near 0.01
        let prior_bias = -((1.0 - 0.01f64) / 0.01).ln();
        for b in class_head.bias.data_mut().iter_mut() {
            *b = prior_bias;
        }
        DetectionHeads {
            class_head,
            box_l1: Linear::new(rng, dim, dim),
            box_l2: Linear::new(rng, dim, dim),
            box_l3: Linear::new(rng, dim, 4),
        }
    }

    pub fn forward(&self, tape: &Tape, decoded: &Tensor) -> Result<DetectionSet> {
        let logits = self.class_head.forward(tape, decoded)?;
        let h = tape.relu(&self.box_l1.forward(tape, decoded)?)?;
        let h = tape.relu(&self.box_l2.forward(tape, &h)?)?;
        let raw = self.box_l3.forward(tape, &h)?;
        let boxes = tape.sigmoid(&raw)?;
        Ok(DetectionSet { logits, boxes })
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.class_head.params(&format!("{prefix}.class"), out);
        self.box_l1.params(&format!("{prefix}.box1"), out);
        self.box_l2.params(&format!("{prefix}.box2"), out);
        self.box_l3.params(&format!("{prefix}.box3"), out);
    }
}
