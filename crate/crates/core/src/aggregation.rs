//! Temporal/spatial memory extraction and progressive aggregation.
//!
//! TFAM attends from the target memory onto the concatenation of all context
//! memories (temporal memory h_t). STAM runs a gated correlation between the
//! target memory and each context memory (spatial memories f_i). The
//! aggregation stage fuses h_t with the f_i set, then re-injects the current
//! frame through a gated correlation (residual gated correlation) to produce
//! the enhanced memory R_t.

use std::io::Write;
use std::path::Path;

use crate::correlation::CorrelationBlock;
use crate::encoder::MemoryMap;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub struct TemporalMemory {
    pub h_t: Tensor,
}

pub struct SpatialMemory {
    pub f_i: Tensor,
    pub offset: i64,
}

pub struct EnhancedMemory {
    pub e_t: Tensor,
    pub r_t: Tensor,
}

fn check_grids(op: &'static str, target: &MemoryMap, ctx: &MemoryMap) -> Result<()> {
    if target.grid_h != ctx.grid_h || target.grid_w != ctx.grid_w {
        return Err(Error::Contract(format!(
            "{op}: grid mismatch {}x{} vs {}x{}",
            target.grid_h, target.grid_w, ctx.grid_h, ctx.grid_w
        )));
    }
    Ok(())
}

/// h_t = C(M_t, concat of all context memories on the token axis).
pub fn tfam(
    tape: &Tape,
    block: &CorrelationBlock,
    m_t: &MemoryMap,
    m_ctx: &[&MemoryMap],
) -> Result<TemporalMemory> {
    if m_ctx.is_empty() {
        return Err(Error::Contract("tfam requires at least one context frame".into()));
    }
    for c in m_ctx {
        check_grids("tfam", m_t, c)?;
    }
    let token_maps: Vec<&Tensor> = m_ctx.iter().map(|m| &m.tokens).collect();
    let kv = tape.concat(&token_maps, 0)?;
    let h_t = block.forward(tape, &m_t.tokens, &kv)?;
    Ok(TemporalMemory { h_t })
}

/// f_i = C^g(M_t, M_{t+i}) for one context frame.
pub fn stam(
    tape: &Tape,
    block: &CorrelationBlock,
    m_t: &MemoryMap,
    m_ctx_i: &MemoryMap,
) -> Result<SpatialMemory> {
    check_grids("stam", m_t, m_ctx_i)?;
    let f_i = block.forward(tape, &m_t.tokens, &m_ctx_i.tokens)?;
    Ok(SpatialMemory {
        f_i,
        offset: m_ctx_i.frame_offset,
    })
}

/// E_t = C(h_t, {f_i}) then R_t = C^g(E_t, M_t).
pub fn progressive_aggregate(
    tape: &Tape,
    agg_block: &CorrelationBlock,
    rgc_block: &CorrelationBlock,
    h_t: &TemporalMemory,
    f_list: &[SpatialMemory],
    m_t: &MemoryMap,
) -> Result<EnhancedMemory> {
    if f_list.is_empty() {
        return Err(Error::Contract(
            "progressive aggregation requires at least one spatial memory".into(),
        ));
    }
    let maps: Vec<&Tensor> = f_list.iter().map(|f| &f.f_i).collect();
    let kv = tape.concat(&maps, 0)?;
    let e_t = agg_block.forward(tape, &h_t.h_t, &kv)?;
    let r_t = rgc_block.forward(tape, &e_t, &m_t.tokens)?;
    Ok(EnhancedMemory { e_t, r_t })
}

/// Reduce a token map to a grid heatmap (L2 norm over features), min-max
/// normalized to 0..255.
pub fn token_heatmap(tokens: &Tensor, grid_h: usize, grid_w: usize) -> Result<Vec<u8>> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[0] != grid_h * grid_w {
        return Err(Error::dim(
            "token_heatmap",
            format!("tokens {:?} vs grid {}x{}", shape, grid_h, grid_w),
        ));
    }
    let d = shape[1];
    let data = tokens.data();
    let norms: Vec<f64> = (0..grid_h * grid_w)
        .map(|i| data[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(norms
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round() as u8)
        .collect())
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim(
            "write_pgm",
            format!("{} pixels for {}x{}", pixels.len(), width, height),
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = format!("P5\n{width} {height}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrelationMode;
    use crate::nn::xavier_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn memory(r: &mut ChaCha8Rng, gh: usize, gw: usize, d: usize, offset: i64) -> MemoryMap {
        let t = xavier_uniform(r, gh * gw, d);
        t.set_requires_grad(false);
        MemoryMap {
            tokens: t,
            grid_h: gh,
            grid_w: gw,
            frame_offset: offset,
        }
    }

    #[test]
    fn tfam_rejects_empty_context() {
        let mut r = rng(1);
        let block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let tape = Tape::new();
        assert!(tfam(&tape, &block, &m_t, &[]).is_err());
    }

    #[test]
    fn tfam_output_shape_matches_target() {
        let mut r = rng(2);
        let block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let m_t = memory(&mut r, 2, 3, 8, 0);
        let c1 = memory(&mut r, 2, 3, 8, -1);
        let c2 = memory(&mut r, 2, 3, 8, 2);
        let tape = Tape::new();
        let h = tfam(&tape, &block, &m_t, &[&c1, &c2]).unwrap();
        assert_eq!(h.h_t.shape(), vec![6, 8]);
    }

    #[test]
    fn tfam_order_invariant_over_context() {
        let mut r = rng(3);
        let block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let c1 = memory(&mut r, 2, 2, 8, -1);
        let c2 = memory(&mut r, 2, 2, 8, 1);
        let c3 = memory(&mut r, 2, 2, 8, 2);
        let tape = Tape::new();
        let a = tfam(&tape, &block, &m_t, &[&c1, &c2, &c3]).unwrap();
        let tape2 = Tape::new();
        let b = tfam(&tape2, &block, &m_t, &[&c3, &c1, &c2]).unwrap();
        for (x, y) in a.h_t.to_vec().iter().zip(b.h_t.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tfam_sensitive_to_context_content() {
        let mut r = rng(4);
        let block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let c1 = memory(&mut r, 2, 2, 8, -1);
        let c2 = memory(&mut r, 2, 2, 8, 1);
        let tape = Tape::new();
        let a = tfam(&tape, &block, &m_t, &[&c1]).unwrap();
        let tape2 = Tape::new();
        let b = tfam(&tape2, &block, &m_t, &[&c2]).unwrap();
        let diff: f64 = a
            .h_t
            .to_vec()
            .iter()
            .zip(b.h_t.to_vec())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn stam_grid_mismatch_is_contract_error() {
        let mut r = rng(5);
        let block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Gated).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let bad = memory(&mut r, 3, 2, 8, 1);
        let tape = Tape::new();
        assert!(matches!(stam(&tape, &block, &m_t, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn stam_self_correlation_is_well_defined() {
        let mut r = rng(6);
        let block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Gated).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let same = MemoryMap {
            tokens: m_t.tokens.clone(),
            grid_h: 2,
            grid_w: 2,
            frame_offset: 0,
        };
        let tape = Tape::new();
        let f = stam(&tape, &block, &m_t, &same).unwrap();
        assert_eq!(f.f_i.shape(), vec![4, 8]);
        assert!(f.f_i.all_finite());
    }

    #[test]
    fn pipeline_shapes_conserved() {
        let mut r = rng(7);
        let tfam_block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let stam_block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Gated).unwrap();
        let agg_block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let rgc_block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Gated).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let c1 = memory(&mut r, 2, 2, 8, -1);
        let c2 = memory(&mut r, 2, 2, 8, 1);
        let tape = Tape::new();
        let h = tfam(&tape, &tfam_block, &m_t, &[&c1, &c2]).unwrap();
        let f1 = stam(&tape, &stam_block, &m_t, &c1).unwrap();
        let f2 = stam(&tape, &stam_block, &m_t, &c2).unwrap();
        let e = progressive_aggregate(&tape, &agg_block, &rgc_block, &h, &[f1, f2], &m_t).unwrap();
        assert_eq!(h.h_t.shape(), vec![4, 8]);
        assert_eq!(e.e_t.shape(), vec![4, 8]);
        assert_eq!(e.r_t.shape(), vec![4, 8]);
    }

    #[test]
    fn aggregation_order_invariant_over_spatial_memories() {
        let mut r = rng(8);
        let agg_block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Plain).unwrap();
        let rgc_block = CorrelationBlock::new(&mut r, 8, 4, 2, CorrelationMode::Gated).unwrap();
        let m_t = memory(&mut r, 2, 2, 8, 0);
        let h = TemporalMemory {
            h_t: {
                let t = xavier_uniform(&mut r, 4, 8);
                t.set_requires_grad(false);
                t
            },
        };
        let mk = |r: &mut ChaCha8Rng, off| SpatialMemory {
            f_i: {
                let t = xavier_uniform(r, 4, 8);
                t.set_requires_grad(false);
                t
            },
            offset: off,
        };
        let f1 = mk(&mut r, -1);
        let f2 = mk(&mut r, 1);
        let clone_f = |f: &SpatialMemory| SpatialMemory {
            f_i: f.f_i.clone(),
            offset: f.offset,
        };
        let tape = Tape::new();
        let a = progressive_aggregate(&tape, &agg_block, &rgc_block, &h, &[clone_f(&f1), clone_f(&f2)], &m_t).unwrap();
        let tape2 = Tape::new();
        let b = progressive_aggregate(&tape2, &agg_block, &rgc_block, &h, &[f2, f1], &m_t).unwrap();
        for (x, y) in a.r_t.to_vec().iter().zip(b.r_t.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_dims_and_range() {
        let t = Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 1.0, 0.0, 3.0, 4.0, 0.5, 0.5]).unwrap();
        let hm = token_heatmap(&t, 2, 2).unwrap();
        assert_eq!(hm.len(), 4);
        assert_eq!(hm[0], 0); // min
        assert_eq!(hm[2], 255); // max (norm 5)
    }
}
