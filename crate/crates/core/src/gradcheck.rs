//! Finite-difference gradient verification. Every differentiable tape op is
//! registered exactly once; each registration compares the analytic gradient
//! against a central difference at randomly probed coordinates.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::{CorrelationBlock, CorrelationMode};
use crate::decoder::{DetectionHeads, DetectionSet, TransformerDecoder};
use crate::encoder::{FrameEncoder, FrameImage};
use crate::error::{Error, Result};
use crate::matching::{match_predictions, BoxCxcywh, GroundTruth, LossWeights};
use crate::nn::{FeedForward, MultiHeadAttention};
use crate::tensor::{Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const PROBES_PER_OP: usize = 10;

type LossFn = Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// per-input value range (lo, hi); chosen to stay away from kinks and
    /// singularities of the op under test
    ranges: Vec<(f64, f64)>,
    f: LossFn,
}

#[derive(Clone, Debug)]
pub struct OpResult {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub results: Vec<OpResult>,
    pub all_passed: bool,
    pub worst_op: String,
    pub worst_rel_err: f64,
}

/// Contract a tensor to a scalar in a way that gives every coordinate a
/// distinct weight, so gradients that vanish under a plain sum (softmax rows,
/// layer norm) stay observable.
fn weighted_sum(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let n = x.len();
    let w = Tensor::from_vec(
        &x.shape(),
        (0..n).map(|i| 0.3 + 0.1 * i as f64).collect(),
    )?;
    tape.sum(&tape.hadamard(x, &w)?)
}

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    let mut case = |name: &'static str,
                    shapes: Vec<Vec<usize>>,
                    ranges: Vec<(f64, f64)>,
                    f: LossFn| {
        v.push(Case {
            name,
            shapes,
            ranges,
            f,
        });
    };
    let r = (-1.0, 1.0);
    let pos = (0.4, 1.6);
    case("add", vec![vec![3, 4], vec![3, 4]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.add(&x[0], &x[1])?)
    }));
    case("sub", vec![vec![3, 4], vec![3, 4]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.sub(&x[0], &x[1])?)
    }));
    case("scale", vec![vec![3, 4]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.scale(&x[0], -1.7)?)
    }));
    case("add_scalar", vec![vec![3, 4]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.add_scalar(&x[0], 2.5)?)
    }));
    case("hadamard", vec![vec![3, 4], vec![3, 4]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.hadamard(&x[0], &x[1])?)
    }));
    case("div", vec![vec![3, 4], vec![3, 4]], vec![r, pos], Box::new(|t, x| {
        weighted_sum(t, &t.div(&x[0], &x[1])?)
    }));
    // min/max: keep the operands separated so probes cannot cross the tie
    case("minimum", vec![vec![3, 4], vec![3, 4]], vec![(-1.0, -0.2), (0.2, 1.0)], Box::new(|t, x| {
        weighted_sum(t, &t.minimum(&x[0], &x[1])?)
    }));
    case("maximum", vec![vec![3, 4], vec![3, 4]], vec![(-1.0, -0.2), (0.2, 1.0)], Box::new(|t, x| {
        weighted_sum(t, &t.maximum(&x[0], &x[1])?)
    }));
    case("matmul", vec![vec![3, 4], vec![4, 2]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.matmul(&x[0], &x[1])?)
    }));
    case("transpose", vec![vec![3, 4]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.transpose(&x[0])?)
    }));
    // relu/abs: inputs bounded away from the kink at 0
    case("relu", vec![vec![3, 4]], vec![(0.2, 1.2)], Box::new(|t, x| {
        weighted_sum(t, &t.relu(&x[0])?)
    }));
    case("abs", vec![vec![3, 4]], vec![(-1.2, -0.2)], Box::new(|t, x| {
        weighted_sum(t, &t.abs(&x[0])?)
    }));
    case("sigmoid", vec![vec![3, 4]], vec![(-2.0, 2.0)], Box::new(|t, x| {
        weighted_sum(t, &t.sigmoid(&x[0])?)
    }));
    case("ln", vec![vec![3, 4]], vec![pos], Box::new(|t, x| {
        weighted_sum(t, &t.ln(&x[0])?)
    }));
    case("powf", vec![vec![3, 4]], vec![pos], Box::new(|t, x| {
        weighted_sum(t, &t.powf(&x[0], 1.7)?)
    }));
    case("softmax_rows", vec![vec![3, 5]], vec![(-2.0, 2.0)], Box::new(|t, x| {
        weighted_sum(t, &t.softmax_rows(&x[0])?)
    }));
    case("layer_norm_rows", vec![vec![3, 5]], vec![(-2.0, 2.0)], Box::new(|t, x| {
        weighted_sum(t, &t.layer_norm_rows(&x[0], 1e-5)?)
    }));
    case("concat", vec![vec![2, 3], vec![2, 3]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.concat(&[&x[0], &x[1]], 1)?)
    }));
    case("slice", vec![vec![4, 5]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.slice(&x[0], 1, 1, 4)?)
    }));
    case("gather_rows", vec![vec![4, 3]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.gather_rows(&x[0], &[2, 0, 2])?)
    }));
    case("sum", vec![vec![3, 4]], vec![r], Box::new(|t, x| t.sum(&x[0])));
    case("mean", vec![vec![3, 4]], vec![r], Box::new(|t, x| {
        // add a nonlinearity so the mean path carries non-uniform gradient
        let sq = t.hadamard(&x[0], &x[0])?;
        t.mean(&sq)
    }));
    case("broadcast_add", vec![vec![3, 4], vec![4]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.broadcast_add(&x[0], &x[1])?)
    }));
    case("broadcast_mul", vec![vec![3, 4], vec![4]], vec![r, r], Box::new(|t, x| {
        weighted_sum(t, &t.broadcast_mul(&x[0], &x[1])?)
    }));
    case("reshape", vec![vec![3, 4]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.reshape(&x[0], &[2, 6])?)
    }));
    case("im2col", vec![vec![2, 4, 4]], vec![r], Box::new(|t, x| {
        weighted_sum(t, &t.im2col(&x[0], 3, 1, 1)?)
    }));
    v
}

/// Whole-module checks: the probed tensors are the module's own parameters
/// (plus any data inputs), so these exercise the full composed graphs the
/// model actually builds — attention stacks, gated correlation, the conv
/// encoder, the decoder with detection heads, and the total loss under a
/// frozen assignment.
struct CompositeCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: LossFn,
}

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn composite_cases(seed: u64) -> Result<Vec<CompositeCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();

    // multi-head attention followed by a feed-forward block
    {
        let mha = MultiHeadAttention::new(&mut rng, 8, 2)?;
        let ffn = FeedForward::new(&mut rng, 8, 16);
        let q = rand_param(&mut rng, &[3, 8], -1.0, 1.0);
        let kv = rand_param(&mut rng, &[4, 8], -1.0, 1.0);
        let mut inputs = vec![q, kv];
        let mut pl = Vec::new();
        mha.params("mha", &mut pl);
        ffn.params("ffn", &mut pl);
        inputs.extend(pl.into_iter().map(|(_, t)| t));
        v.push(CompositeCase {
            name: "module_attention_ffn",
            inputs,
            f: Box::new(move |tape, x| {
                let (attn, _) = mha.forward(tape, &x[0], &x[1])?;
                weighted_sum(tape, &ffn.forward(tape, &attn)?)
            }),
        });
    }

    // gated correlation block (the STAM / recursive-update building block)
    {
        let block = CorrelationBlock::new(&mut rng, 8, 2, 1, CorrelationMode::Gated)?;
        let q = rand_param(&mut rng, &[3, 8], -1.0, 1.0);
        let kv = rand_param(&mut rng, &[3, 8], -1.0, 1.0);
        let mut inputs = vec![q, kv];
        let mut pl = Vec::new();
        block.params("corr", &mut pl);
        inputs.extend(pl.into_iter().map(|(_, t)| t));
        v.push(CompositeCase {
            name: "module_gated_correlation",
            inputs,
            f: Box::new(move |tape, x| weighted_sum(tape, &block.forward(tape, &x[0], &x[1])?)),
        });
    }

    // conv backbone + self-attention frame encoder on a tiny image
    {
        let enc = FrameEncoder::new(&mut rng, 12, 2, 1)?;
        let img = FrameImage::new(
            16,
            16,
            (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;
        let mut pl = Vec::new();
        enc.params("enc", &mut pl);
        let inputs: Vec<Tensor> = pl.into_iter().map(|(_, t)| t).collect();
        v.push(CompositeCase {
            name: "module_frame_encoder",
            inputs,
            f: Box::new(move |tape, _| {
                weighted_sum(tape, &enc.encode(tape, &img, 0)?.tokens)
            }),
        });
    }

    // transformer decoder + detection heads
    {
        let dec = TransformerDecoder::new(&mut rng, 8, 2, 1)?;
        let heads = DetectionHeads::new(&mut rng, 8, 3);
        let queries = rand_param(&mut rng, &[4, 8], -1.0, 1.0);
        let memory = rand_param(&mut rng, &[5, 8], -1.0, 1.0);
        let mut inputs = vec![queries, memory];
        let mut pl = Vec::new();
        dec.params("dec", &mut pl);
        heads.params("heads", &mut pl);
        inputs.extend(pl.into_iter().map(|(_, t)| t));
        v.push(CompositeCase {
            name: "module_decoder_heads",
            inputs,
            f: Box::new(move |tape, x| {
                let (decoded, _) = dec.forward(tape, &x[0], &x[1])?;
                let det = heads.forward(tape, &decoded)?;
                let a = weighted_sum(tape, &det.logits)?;
                let b = weighted_sum(tape, &det.boxes)?;
                tape.add(&a, &b)
            }),
        });
    }

    // total loss with a frozen Hungarian assignment
    {
        let logits = rand_param(&mut rng, &[5, 3], -1.0, 1.0);
        let raw_boxes = rand_param(&mut rng, &[5, 4], -1.0, 1.0);
        let gt = GroundTruth {
            boxes: vec![
                BoxCxcywh::new(0.4, 0.4, 0.3, 0.3),
                BoxCxcywh::new(0.7, 0.6, 0.2, 0.25),
            ],
            classes: vec![0, 2],
        };
        let w = LossWeights::default();
        let assignment = {
            let tape = Tape::new();
            let det = DetectionSet {
                logits: logits.clone(),
                boxes: tape.sigmoid(&raw_boxes)?,
            };
            match_predictions(&det, &gt, &w)?
        };
        let inputs = vec![logits, raw_boxes];
        v.push(CompositeCase {
            name: "module_total_loss_frozen",
            inputs,
            f: Box::new(move |tape, x| {
                let det = DetectionSet {
                    logits: x[0].clone(),
                    boxes: tape.sigmoid(&x[1])?,
                };
                crate::matching::total_loss(tape, &det, &gt, &assignment, &w)
            }),
        });
    }

    Ok(v)
}

fn make_inputs(rng: &mut ChaCha8Rng, case: &Case) -> Vec<Tensor> {
    case.shapes
        .iter()
        .zip(&case.ranges)
        .map(|(shape, (lo, hi))| {
            let n: usize = shape.iter().product();
            Tensor::param(shape, (0..n).map(|_| rng.gen_range(*lo..*hi)).collect()).unwrap()
        })
        .collect()
}

fn eval_loss(f: &LossFn, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    Ok(f(&tape, inputs)?.item())
}

fn check_loss_fn(
    rng: &mut ChaCha8Rng,
    name: &str,
    inputs: &[Tensor],
    f: &LossFn,
) -> Result<OpResult> {
    // analytic gradients
    for x in inputs {
        x.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape, inputs)?;
    if loss.len() != 1 {
        return Err(Error::Contract(format!("{name}: loss must be scalar")));
    }
    tape.backward(&loss)?;
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    for _ in 0..PROBES_PER_OP {
        let which = rng.gen_range(0..inputs.len());
        let idx = rng.gen_range(0..inputs[which].len());
        let orig = inputs[which].data()[idx];
        inputs[which].data_mut()[idx] = orig + FD_STEP;
        let up = eval_loss(f, inputs)?;
        inputs[which].data_mut()[idx] = orig - FD_STEP;
        let down = eval_loss(f, inputs)?;
        inputs[which].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[which][idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(OpResult {
        name: name.to_string(),
        max_rel_err: max_rel,
        probes: PROBES_PER_OP,
        passed: max_rel < REL_TOLERANCE,
    })
}

/// Run the finite-difference check for every registered op.
pub fn run_all(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for case in cases() {
        let inputs = make_inputs(&mut rng, &case);
        results.push(check_loss_fn(&mut rng, case.name, &inputs, &case.f)?);
    }
    for case in composite_cases(seed.wrapping_add(1))? {
        results.push(check_loss_fn(&mut rng, case.name, &case.inputs, &case.f)?);
    }
    let (mut worst_op, mut worst) = (String::new(), -1.0);
    for r in &results {
        if r.max_rel_err > worst {
            worst = r.max_rel_err;
            worst_op = r.name.clone();
        }
    }
    Ok(GradCheckReport {
        all_passed: results.iter().all(|r| r.passed),
        results,
        worst_op,
        worst_rel_err: worst,
    })
}

/// Self-test: an op with a deliberately corrupted backward pass must be
/// caught by the checker. Returns true when the corruption is detected.
pub fn self_test(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // forward y = 2x, but backward claims dy/dx = 3
    let corrupted: LossFn = Box::new(|tape, x| {
        let input = x[0].clone();
        let out = Tensor::from_vec(&x[0].shape(), x[0].to_vec().iter().map(|v| 2.0 * v).collect())?;
        out.set_requires_grad(true);
        tape.record(&out, move |g| {
            let wrong: Vec<f64> = g.iter().map(|v| 3.0 * v).collect();
            input.accum_grad(&wrong);
        });
        weighted_sum(tape, &out)
    });
    let case = Case {
        name: "corrupted_scale",
        shapes: vec![vec![3, 4]],
        ranges: vec![(-1.0, 1.0)],
        f: corrupted,
    };
    let inputs = make_inputs(&mut rng, &case);
    let r = check_loss_fn(&mut rng, case.name, &inputs, &case.f)?;
    Ok(!r.passed)
}

pub fn report_text(report: &GradCheckReport) -> String {
    let mut out = String::from("op\tmax_rel_err\tprobes\tstatus\n");
    for r in &report.results {
        out.push_str(&format!(
            "{}\t{:.3e}\t{}\t{}\n",
            r.name,
            r.max_rel_err,
            r.probes,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out.push_str(&format!(
        "worst: {} ({:.3e}); overall: {}\n",
        report.worst_op,
        report.worst_rel_err,
        if report.all_passed { "ok" } else { "FAIL" }
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference() {
        let report = run_all(17).unwrap();
        for r in &report.results {
            assert!(r.passed, "{} rel err {:.3e}", r.name, r.max_rel_err);
        }
        assert!(report.all_passed);
        assert!(report.worst_rel_err < REL_TOLERANCE);
    }

    #[test]
    fn registry_covers_each_op_once() {
        let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate op registrations");
        for expected in [
            "add", "sub", "scale", "add_scalar", "hadamard", "div", "minimum", "maximum",
            "matmul", "transpose", "relu", "sigmoid", "ln", "powf", "abs", "softmax_rows",
            "layer_norm_rows", "concat", "slice", "gather_rows", "sum", "mean",
            "broadcast_add", "broadcast_mul", "reshape", "im2col",
        ] {
            assert!(names.contains(&expected), "op {expected} not registered");
        }
        assert_eq!(names.len(), 26);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        assert!(self_test(5).unwrap());
    }

    #[test]
    fn report_text_mentions_every_op() {
        let report = run_all(3).unwrap();
        let text = report_text(&report);
        assert!(text.contains("matmul"));
        assert!(text.contains("worst:"));
        // 26 ops + 5 composite modules + header + summary
        assert_eq!(text.lines().count(), 26 + 5 + 2);
    }

    #[test]
    fn composite_modules_are_registered_and_pass() {
        let report = run_all(17).unwrap();
        for name in [
            "module_attention_ffn",
            "module_gated_correlation",
            "module_frame_encoder",
            "module_decoder_heads",
            "module_total_loss_frozen",
        ] {
            let r = report.results.iter().find(|r| r.name == name).unwrap();
            assert!(r.passed, "{name} rel err {:.3e}", r.max_rel_err);
        }
    }
}
