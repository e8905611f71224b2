//! The full detector: shared frame encoder, temporal feature aggregation
//! (TFAM), spatial transition awareness (STAM), progressive aggregation with
//! a recursive gated update, query assembling, decoder and detection heads.
//! Every temporal stage can be switched off for ablations; with no context
//! frames the model degrades to a single-frame detector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{progressive_aggregate, stam, tfam, SpatialMemory, TemporalMemory};
use crate::config::ModelConfig;
use crate::correlation::{CorrelationBlock, CorrelationMode};
use crate::decoder::{DetectionHeads, DetectionSet, QueryAssembler, TransformerDecoder};
use crate::encoder::{FrameEncoder, FrameImage, MemoryMap};
use crate::error::{Error, Result};
use crate::map_eval::Detection;
use crate::matching::{sigmoid, BoxCxcywh};
use crate::nn::ParamList;
use crate::tensor::{Tape, Tensor};

/// A context frame and its temporal offset relative to the target.
pub struct ContextFrame {
    pub image: FrameImage,
    pub offset: i64,
}

/// Intermediate feature maps, kept for the featmap tooling. All stages share
/// the target frame's token grid.
pub struct StageMaps {
    pub m_t: Tensor,
    pub h_t: Tensor,
    pub f: Vec<Tensor>,
    pub e_t: Option<Tensor>,
    pub r_t: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

pub struct ModelOutput {
    pub detections: DetectionSet,
    /// detection sets decoded from intermediate decoder layers, used for
    /// deep-supervision auxiliary losses during training (empty for a
    /// single-layer decoder)
    pub aux: Vec<DetectionSet>,
    pub stages: StageMaps,
}

pub struct PtseFormer {
    pub cfg: ModelConfig,
    pub encoder: FrameEncoder,
    tfam_block: CorrelationBlock,
    stam_block: CorrelationBlock,
    agg_block: CorrelationBlock,
    rgc_block: CorrelationBlock,
    qam: QueryAssembler,
    decoder: TransformerDecoder,
    heads: DetectionHeads,
    /// learned primal queries [N_p, d]
    pub queries: Tensor,
}

impl PtseFormer {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<PtseFormer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let gate_mode = if cfg.gated {
            CorrelationMode::Gated
        } else {
            CorrelationMode::Plain
        };
        let encoder = FrameEncoder::new(&mut rng, d, cfg.heads, cfg.encoder_layers)?;
        let tfam_block = CorrelationBlock::new(&mut rng, d, cfg.heads, cfg.tfam_layers, CorrelationMode::Plain)?;
        let stam_block = CorrelationBlock::new(&mut rng, d, cfg.heads, cfg.stam_layers, gate_mode)?;
        let agg_block = CorrelationBlock::new(&mut rng, d, cfg.heads, cfg.tfam_layers, CorrelationMode::Plain)?;
        let rgc_block = CorrelationBlock::new(&mut rng, d, cfg.heads, cfg.stam_layers, gate_mode)?;
        let qam = QueryAssembler::new(&mut rng, d, cfg.heads, cfg.qam_layers)?;
        let decoder = TransformerDecoder::new(&mut rng, d, cfg.heads, cfg.decoder_layers)?;
        let heads = DetectionHeads::new(&mut rng, d, cfg.num_classes);
        let queries = crate::nn::xavier_uniform(&mut rng, cfg.num_queries, d);
        Ok(PtseFormer {
            cfg: cfg.clone(),
            encoder,
            tfam_block,
            stam_block,
            agg_block,
            rgc_block,
            qam,
            decoder,
            heads,
            queries,
        })
    }

    pub fn params(&self) -> ParamList {
        let mut out = ParamList::new();
        out.push(("queries".into(), self.queries.clone()));
        self.encoder.params("encoder", &mut out);
        self.tfam_block.params("tfam", &mut out);
        self.stam_block.params("stam", &mut out);
        self.agg_block.params("agg", &mut out);
        self.rgc_block.params("rgc", &mut out);
        self.qam.params("qam", &mut out);
        self.decoder.params("decoder", &mut out);
        self.heads.params("heads", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn forward(&self, tape: &Tape, target: &FrameImage, ctx: &[ContextFrame]) -> Result<ModelOutput> {
        if ctx.len() > self.cfg.num_context {
            return Err(Error::Contract(format!(
                "got {} context frames, model is configured for at most {}",
                ctx.len(),
                self.cfg.num_context
            )));
        }
        let m_t = self.encoder.encode(tape, target, 0)?;
        let mut ctx_maps: Vec<MemoryMap> = Vec::with_capacity(ctx.len());
        for c in ctx {
            if c.offset == 0 {
                return Err(Error::Contract("context frames must have nonzero offsets".into()));
            }
            ctx_maps.push(self.encoder.encode(tape, &c.image, c.offset)?);
        }
        let ctx_refs: Vec<&MemoryMap> = ctx_maps.iter().collect();

        let h_t = if self.cfg.enable_tfam && !ctx_refs.is_empty() {
            tfam(tape, &self.tfam_block, &m_t, &ctx_refs)?.h_t
        } else {
            m_t.tokens.clone()
        };

        let f: Vec<Tensor> = if ctx_refs.is_empty() {
            vec![]
        } else if self.cfg.enable_stam {
            let mut out = Vec::with_capacity(ctx_refs.len());
            for c in &ctx_refs {
                out.push(stam(tape, &self.stam_block, &m_t, c)?.f_i);
            }
            out
        } else {
            ctx_refs.iter().map(|c| c.tokens.clone()).collect()
        };

        let (e_t, r_t) = if f.is_empty() {
            (None, h_t.clone())
        } else {
            let spatial: Vec<SpatialMemory> = f
                .iter()
                .zip(&ctx_refs)
                .map(|(t, c)| SpatialMemory {
                    f_i: t.clone(),
                    offset: c.frame_offset,
                })
                .collect();
            let temporal = TemporalMemory { h_t: h_t.clone() };
            let enhanced = progressive_aggregate(
                tape,
                &self.agg_block,
                &self.rgc_block,
                &temporal,
                &spatial,
                &m_t,
            )?;
            (Some(enhanced.e_t), enhanced.r_t)
        };

        let queries = if self.cfg.enable_qam && !ctx_refs.is_empty() {
            self.qam.assemble(tape, &self.queries, &ctx_refs)?.assembled
        } else {
            self.queries.clone()
        };

        let (mut states, _) = self.decoder.forward_all(tape, &queries, &r_t)?;
        let decoded = states.pop().expect("decoder has at least one layer");
        let detections = self.heads.forward(tape, &decoded)?;
        // deep supervision: detection sets from intermediate decoder layers
        let mut aux = Vec::with_capacity(states.len());
        for s in &states {
            aux.push(self.heads.forward(tape, s)?);
        }
        Ok(ModelOutput {
            detections,
            aux,
            stages: StageMaps {
                m_t: m_t.tokens.clone(),
                h_t,
                f,
                e_t,
                r_t,
                grid_h: m_t.grid_h,
                grid_w: m_t.grid_w,
            },
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.params())
    }

    pub fn load(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::load_into(path, &self.params())
    }
}

/// Flatten a detection set into per-(query, class) scored detections,
/// dropping scores below `score_threshold`.
pub fn detections_from(det: &DetectionSet, image_id: usize, score_threshold: f64) -> Vec<Detection> {
    let nq = det.logits.shape()[0];
    let classes = det.logits.shape()[1];
    let logits = det.logits.to_vec();
    let boxes = det.boxes.to_vec();
    let mut out = Vec::new();
    for q in 0..nq {
        for c in 0..classes {
            let score = sigmoid(logits[q * classes + c]);
            if score < score_threshold {
                continue;
            }
            out.push(Detection {
                image_id,
                class: c,
                score,
                bbox: BoxCxcywh::new(
                    boxes[q * 4],
                    boxes[q * 4 + 1],
                    boxes[q * 4 + 2],
                    boxes[q * 4 + 3],
                ),
            });
        }
    }
    out
}
