//! Hungarian set matching and the detection losses: focal classification,
//! L1 + GIoU box regression, combined as
//! L = λ_cls·L_cls + λ_box·(λ_L1·L_L1 + λ_giou·L_giou).

use serde::{Deserialize, Serialize};

use crate::decoder::DetectionSet;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> BoxCxcywh {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn to_xyxy(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCxcywh>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Assignment {
    /// (query index, ground-truth index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum ClassCostKind {
    /// −p̂ of the ground-truth class (default)
    NegProb,
    /// focal-style positive-minus-negative cost
    Focal,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub class_cost: ClassCostKind,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_cls: 2.0,
            lambda_box: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            class_cost: ClassCostKind::NegProb,
        }
    }
}

pub fn iou_xyxy(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU − (enclosure − union)/enclosure, in (−1, 1].
/// Degenerate boxes (zero width/height) evaluate without NaN.
pub fn giou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let ax = a.to_xyxy();
    let bx = b.to_xyxy();
    let iw = (ax.2.min(bx.2) - ax.0.max(bx.0)).max(0.0);
    let ih = (ax.3.min(bx.3) - ax.1.max(bx.1)).max(0.0);
    let inter = iw * ih;
    let area_a = a.w.max(0.0) * a.h.max(0.0);
    let area_b = b.w.max(0.0) * b.h.max(0.0);
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let ew = ax.2.max(bx.2) - ax.0.min(bx.0);
    let eh = ax.3.max(bx.3) - ax.1.min(bx.1);
    let enclosure = ew * eh;
    if enclosure <= 0.0 {
        iou
    } else {
        iou - (enclosure - union) / enclosure
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar focal loss for one logit: −α_t (1−p_t)^γ log(p_t).
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    let (p_t, a_t) = if target { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -a_t * (1.0 - p_t).powf(gamma) * p_t.max(1e-12).ln()
}

/// Matching cost matrix [queries x gts]. Empty ground truth yields a matrix
/// with zero columns (all queries unmatched).
pub fn matching_cost(preds: &DetectionSet, gt: &GroundTruth, w: &LossWeights) -> Result<Vec<Vec<f64>>> {
    let nq = preds.logits.shape()[0];
    let classes = preds.logits.shape()[1];
    let logits = preds.logits.to_vec();
    let boxes = preds.boxes.to_vec();
    let mut cost = vec![vec![0.0; gt.len()]; nq];
    for (g, (gbox, gcls)) in gt.boxes.iter().zip(&gt.classes).enumerate() {
        if *gcls >= classes {
            return Err(Error::Contract(format!(
                "ground-truth class {gcls} out of range (C = {classes})"
            )));
        }
        for q in 0..nq {
            let p = sigmoid(logits[q * classes + gcls]);
            let cls_cost = match w.class_cost {
                ClassCostKind::NegProb => -p,
                ClassCostKind::Focal => {
                    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -(p.max(1e-12).ln());
                    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -((1.0 - p).max(1e-12).ln());
                    pos - neg
                }
            };
            let pb = BoxCxcywh::new(
                boxes[q * 4],
                boxes[q * 4 + 1],
                boxes[q * 4 + 2],
                boxes[q * 4 + 3],
            );
            let l1 = (pb.cx - gbox.cx).abs()
                + (pb.cy - gbox.cy).abs()
                + (pb.w - gbox.w).abs()
                + (pb.h - gbox.h).abs();
            cost[q][g] = w.lambda_cls * cls_cost + w.lambda_l1 * l1 + w.lambda_giou * (-giou(&pb, gbox));
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of every column to a distinct row (rows >= cols),
/// O(n²·m) augmenting paths with Jonker-Volgenant-style potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    if cols > rows {
        return Err(Error::Contract(format!(
            "hungarian requires rows >= cols, got {rows} x {cols}"
        )));
    }
    if cols == 0 {
        return Ok(Assignment {
            pairs: vec![],
            unmatched_queries: (0..rows).collect(),
        });
    }
    let inf = f64::INFINITY;
    // 1-indexed: jobs = columns (all must be assigned), workers = rows
    let (n, m) = (cols, rows);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut assigned_job = vec![0usize; m + 1]; // worker -> job (0 = free)
    let mut way = vec![0usize; m + 1];
    for job in 1..=n {
        assigned_job[0] = job;
        let mut w0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[w0] = true;
            let j0 = assigned_job[w0];
            let mut delta = inf;
            let mut w1 = 0usize;
            for w in 1..=m {
                if used[w] {
                    continue;
                }
                let cur = cost[w - 1][j0 - 1] - u[j0] - v[w];
                if cur < minv[w] {
                    minv[w] = cur;
                    way[w] = w0;
                }
                if minv[w] < delta {
                    delta = minv[w];
                    w1 = w;
                }
            }
            for w in 0..=m {
                if used[w] {
                    u[assigned_job[w]] += delta;
                    v[w] -= delta;
                } else {
                    minv[w] -= delta;
                }
            }
            w0 = w1;
            if assigned_job[w0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let w1 = way[w0];
            assigned_job[w0] = assigned_job[w1];
            w0 = w1;
            if w0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    let mut unmatched = Vec::new();
    for w in 1..=m {
        if assigned_job[w] > 0 {
            pairs.push((w - 1, assigned_job[w] - 1));
        } else {
            unmatched.push(w - 1);
        }
    }
    pairs.sort_by_key(|(_, g)| *g);
    Ok(Assignment {
        pairs,
        unmatched_queries: unmatched,
    })
}

pub fn match_predictions(preds: &DetectionSet, gt: &GroundTruth, w: &LossWeights) -> Result<Assignment> {
    let cost = matching_cost(preds, gt, w)?;
    hungarian(&cost)
}

fn column(tape: &Tape, m: &Tensor, j: usize) -> Result<Tensor> {
    tape.slice(m, 1, j, j + 1)
}

/// Differentiable GIoU per matched pair: pred [K,4] on tape, gt constants.
/// Returns a [K,1] tensor of GIoU values.
fn giou_tensor(tape: &Tape, pred: &Tensor, gt: &[BoxCxcywh]) -> Result<Tensor> {
    let k = gt.len();
    let half = |t: &Tensor| tape.scale(t, 0.5);
    let cx = column(tape, pred, 0)?;
    let cy = column(tape, pred, 1)?;
    let w = column(tape, pred, 2)?;
    let h = column(tape, pred, 3)?;
    let px1 = tape.sub(&cx, &half(&w)?)?;
    let py1 = tape.sub(&cy, &half(&h)?)?;
    let px2 = tape.add(&cx, &half(&w)?)?;
    let py2 = tape.add(&cy, &half(&h)?)?;
    let col = |f: &dyn Fn(&BoxCxcywh) -> f64| {
        Tensor::from_vec(&[k, 1], gt.iter().map(f).collect()).unwrap()
    };
    let gx1 = col(&|b| b.to_xyxy().0);
    let gy1 = col(&|b| b.to_xyxy().1);
    let gx2 = col(&|b| b.to_xyxy().2);
    let gy2 = col(&|b| b.to_xyxy().3);
    let garea = col(&|b| b.w * b.h);

    let iw = tape.relu(&tape.sub(&tape.minimum(&px2, &gx2)?, &tape.maximum(&px1, &gx1)?)?)?;
    let ih = tape.relu(&tape.sub(&tape.minimum(&py2, &gy2)?, &tape.maximum(&py1, &gy1)?)?)?;
    let inter = tape.hadamard(&iw, &ih)?;
    let parea = tape.hadamard(&w, &h)?;
    let union = tape.sub(&tape.add(&parea, &garea)?, &inter)?;
    let iou = tape.div(&inter, &union)?;
    let ew = tape.sub(&tape.maximum(&px2, &gx2)?, &tape.minimum(&px1, &gx1)?)?;
    let eh = tape.sub(&tape.maximum(&py2, &gy2)?, &tape.minimum(&py1, &gy1)?)?;
    let enclosure = tape.hadamard(&ew, &eh)?;
    let excess = tape.div(&tape.sub(&enclosure, &union)?, &enclosure)?;
    tape.sub(&iou, &excess)
}

/// Multi-task loss. Focal classification over all queries (matched target =
/// its gt class, unmatched = all background), box losses over matched pairs,
/// normalized by the ground-truth count. The assignment is a frozen discrete
/// input; gradients flow through the loss terms only.
pub fn total_loss(
    tape: &Tape,
    preds: &DetectionSet,
    gt: &GroundTruth,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<Tensor> {
    let nq = preds.logits.shape()[0];
    let classes = preds.logits.shape()[1];
    let norm = gt.len().max(1) as f64;

    // classification: focal over every (query, class) cell
    let mut target = vec![0.0; nq * classes];
    for (q, g) in &assignment.pairs {
        target[q * classes + gt.classes[*g]] = 1.0;
    }
    let t = Tensor::from_vec(&[nq, classes], target.clone())?;
    let alpha_t = Tensor::from_vec(
        &[nq, classes],
        target
            .iter()
            .map(|tv| if *tv > 0.5 { FOCAL_ALPHA } else { 1.0 - FOCAL_ALPHA })
            .collect(),
    )?;
    let p = tape.sigmoid(&preds.logits)?;
    let one_minus_t = tape.add_scalar(&tape.scale(&t, -1.0)?, 1.0)?;
    let one_minus_p = tape.add_scalar(&tape.scale(&p, -1.0)?, 1.0)?;
    let p_t = tape.add(&tape.hadamard(&t, &p)?, &tape.hadamard(&one_minus_t, &one_minus_p)?)?;
    let mod_factor = tape.powf(&tape.add_scalar(&tape.scale(&p_t, -1.0)?, 1.0)?, FOCAL_GAMMA)?;
    let log_pt = tape.ln(&p_t)?;
    let focal = tape.scale(
        &tape.hadamard(&alpha_t, &tape.hadamard(&mod_factor, &log_pt)?)?,
        -1.0,
    )?;
    let loss_cls = tape.scale(&tape.sum(&focal)?, 1.0 / norm)?;

    if gt.is_empty() || w.lambda_box == 0.0 {
        return tape.scale(&loss_cls, w.lambda_cls);
    }

    // box terms over matched pairs, in gt order
    let mut rows = Vec::with_capacity(assignment.pairs.len());
    let mut gt_boxes = Vec::with_capacity(assignment.pairs.len());
    for (q, g) in &assignment.pairs {
        rows.push(*q);
        gt_boxes.push(gt.boxes[*g]);
    }
    let matched = tape.gather_rows(&preds.boxes, &rows)?;
    let gt_mat = Tensor::from_vec(
        &[gt_boxes.len(), 4],
        gt_boxes.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
    )?;
    let l1 = tape.scale(&tape.sum(&tape.abs(&tape.sub(&matched, &gt_mat)?)?)?, 1.0 / norm)?;
    let g = giou_tensor(tape, &matched, &gt_boxes)?;
    let one_minus_g = tape.add_scalar(&tape.scale(&g, -1.0)?, 1.0)?;
    let loss_giou = tape.scale(&tape.sum(&one_minus_g)?, 1.0 / norm)?;

    let box_term = tape.add(
        &tape.scale(&l1, w.lambda_l1)?,
        &tape.scale(&loss_giou, w.lambda_giou)?,
    )?;
    tape.add(
        &tape.scale(&loss_cls, w.lambda_cls)?,
        &tape.scale(&box_term, w.lambda_box)?,
    )
}

#[cfg(test)]
pub(crate) fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    // exhaustive assignment of each column to a distinct row
    fn rec(cost: &[Vec<f64>], col: usize, used: &mut [bool]) -> f64 {
        if col == cost[0].len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                let c = cost[r][col] + rec(cost, col + 1, used);
                if c < best {
                    best = c;
                }
                used[r] = false;
            }
        }
        best
    }
    let mut used = vec![false; cost.len()];
    rec(cost, 0, &mut used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn total_of(cost: &[Vec<f64>], a: &Assignment) -> f64 {
        a.pairs.iter().map(|(q, g)| cost[*q][*g]).sum()
    }

    #[test]
    fn giou_identical_boxes_is_one() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.4, 0.2);
        assert!((giou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_corner_touching_squares() {
        // xyxy (0,0,1,1) and (1,1,2,2): IoU 0, union 2, enclosure 4
        let a = BoxCxcywh::new(0.5, 0.5, 1.0, 1.0);
        let b = BoxCxcywh::new(1.5, 1.5, 1.0, 1.0);
        assert!((giou(&a, &b) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn giou_degenerate_box_no_nan() {
        let a = BoxCxcywh::new(0.5, 0.5, 0.0, 0.0);
        let b = BoxCxcywh::new(0.5, 0.5, 0.0, 0.0);
        let g = giou(&a, &b);
        assert!(g.is_finite());
    }

    #[test]
    fn focal_hand_values() {
        // p_t = 0.5 positive: 0.25 * 0.25 * ln 2
        let v = focal_loss(0.0, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        // confident correct prediction -> ~0
        assert!(focal_loss(20.0, true, 0.25, 2.0) < 1e-6);
        // gamma = 0, alpha = 1 reduces to BCE
        let logit = 0.7;
        let bce = -(sigmoid(logit)).ln();
        assert!((focal_loss(logit, true, 1.0, 0.0) - bce).abs() < 1e-12);
    }

    #[test]
    fn hungarian_hand_case() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(total_of(&cost, &a), 4.0);
        assert!(a.pairs.contains(&(1, 0)) && a.pairs.contains(&(0, 1)));
    }

    #[test]
    fn hungarian_diagonal_dominant_identity() {
        let n = 5;
        let mut cost = vec![vec![10.0; n]; n];
        for (i, row) in cost.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let a = hungarian(&cost).unwrap();
        for (q, g) in a.pairs {
            assert_eq!(q, g);
        }
    }

    #[test]
    fn hungarian_rejects_more_cols_than_rows() {
        let cost = vec![vec![1.0, 2.0, 3.0]; 2];
        assert!(hungarian(&cost).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let rows = rng.gen_range(1..=6usize);
            let cols = rng.gen_range(1..=rows);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            assert_eq!(a.pairs.len(), cols);
            let bf = brute_force_min_cost(&cost);
            assert!((total_of(&cost, &a) - bf).abs() < 1e-9, "{cost:?}");
        }
    }

    #[test]
    fn assignment_invariant_under_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cost: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(0.0..3.0)).collect())
            .collect();
        let a = hungarian(&cost).unwrap();
        let shifted: Vec<Vec<f64>> = cost
            .iter()
            .map(|r| r.iter().map(|v| v + 2.5).collect())
            .collect();
        let b = hungarian(&shifted).unwrap();
        let mut pa = a.pairs.clone();
        let mut pb = b.pairs.clone();
        pa.sort();
        pb.sort();
        assert_eq!(pa, pb);
        assert!((total_of(&shifted, &b) - total_of(&cost, &a) - 2.5 * 4.0).abs() < 1e-9);
    }

    fn fixed_preds(logits: Vec<f64>, boxes: Vec<f64>, nq: usize, c: usize) -> DetectionSet {
        DetectionSet {
            logits: Tensor::param(&[nq, c], logits).unwrap(),
            boxes: Tensor::param(&[nq, 4], boxes).unwrap(),
        }
    }

    #[test]
    fn matching_cost_empty_gt_gives_empty_matrix() {
        let preds = fixed_preds(vec![0.0; 6], vec![0.5; 8], 2, 3);
        let cost = matching_cost(&preds, &GroundTruth::default(), &LossWeights::default()).unwrap();
        assert!(cost.iter().all(|r| r.is_empty()));
        let a = hungarian(&cost).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_queries, vec![0, 1]);
    }

    #[test]
    fn matching_cost_perfect_prediction_value() {
        // p = 1, exact box: cost = -lambda_cls - lambda_giou
        let w = LossWeights::default();
        let preds = fixed_preds(vec![100.0, -100.0], vec![0.5, 0.5, 0.2, 0.2], 1, 2);
        let gt = GroundTruth {
            boxes: vec![BoxCxcywh::new(0.5, 0.5, 0.2, 0.2)],
            classes: vec![0],
        };
        let cost = matching_cost(&preds, &gt, &w).unwrap();
        assert!((cost[0][0] - (-w.lambda_cls - w.lambda_giou)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_near_zero_at_optimum() {
        let tape = Tape::new();
        let nq = 3;
        let c = 3;
        // query 0 predicts class 1 perfectly; others confident background
        let mut logits = vec![-20.0; nq * c];
        logits[c + 1] = 20.0; // query 1, class 1
        let mut boxes = vec![0.5; nq * 4];
        boxes[4..8].copy_from_slice(&[0.3, 0.4, 0.2, 0.1]);
        let preds = fixed_preds(logits, boxes, nq, c);
        let gt = GroundTruth {
            boxes: vec![BoxCxcywh::new(0.3, 0.4, 0.2, 0.1)],
            classes: vec![1],
        };
        let w = LossWeights::default();
        let a = match_predictions(&preds, &gt, &w).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        let loss = total_loss(&tape, &preds, &gt, &a, &w).unwrap();
        assert!(loss.item() < 1e-3, "loss = {}", loss.item());
    }

    #[test]
    fn lambda_box_zero_ignores_boxes() {
        let tape = Tape::new();
        let preds = fixed_preds(vec![1.0, -1.0], vec![0.2, 0.2, 0.1, 0.1], 1, 2);
        let gt = GroundTruth {
            boxes: vec![BoxCxcywh::new(0.9, 0.9, 0.05, 0.05)],
            classes: vec![0],
        };
        let w = LossWeights {
            lambda_box: 0.0,
            ..Default::default()
        };
        let a = match_predictions(&preds, &gt, &w).unwrap();
        let loss = total_loss(&tape, &preds, &gt, &a, &w).unwrap();
        tape.backward(&loss).unwrap();
        let bg = preds.boxes.grad();
        assert!(bg.is_none() || bg.unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_terms_all_nonnegative() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let nq = 4;
            let c = 3;
            let logits: Vec<f64> = (0..nq * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let boxes: Vec<f64> = (0..nq * 4).map(|_| rng.gen_range(0.05..0.95)).collect();
            let preds = fixed_preds(logits, boxes, nq, c);
            let gt = GroundTruth {
                boxes: vec![
                    BoxCxcywh::new(0.3, 0.3, 0.2, 0.2),
                    BoxCxcywh::new(0.7, 0.6, 0.1, 0.3),
                ],
                classes: vec![0, 2],
            };
            let w = LossWeights::default();
            let a = match_predictions(&preds, &gt, &w).unwrap();
            let loss = total_loss(&tape, &preds, &gt, &a, &w).unwrap();
            assert!(loss.item() >= 0.0);
        }
    }

    #[test]
    fn giou_tensor_matches_scalar() {
        let tape = Tape::new();
        let pred = Tensor::from_vec(&[2, 4], vec![0.3, 0.4, 0.2, 0.1, 0.6, 0.6, 0.3, 0.3]).unwrap();
        let gts = vec![BoxCxcywh::new(0.35, 0.4, 0.2, 0.15), BoxCxcywh::new(0.5, 0.5, 0.2, 0.2)];
        let g = giou_tensor(&tape, &pred, &gts).unwrap();
        let gv = g.to_vec();
        let p0 = BoxCxcywh::new(0.3, 0.4, 0.2, 0.1);
        let p1 = BoxCxcywh::new(0.6, 0.6, 0.3, 0.3);
        assert!((gv[0] - giou(&p0, &gts[0])).abs() < 1e-12);
        assert!((gv[1] - giou(&p1, &gts[1])).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn prop_giou_symmetric_and_bounded(
            acx in 0.0..1.0f64, acy in 0.0..1.0f64, aw in 0.01..1.0f64, ah in 0.01..1.0f64,
            bcx in 0.0..1.0f64, bcy in 0.0..1.0f64, bw in 0.01..1.0f64, bh in 0.01..1.0f64,
        ) {
            let a = BoxCxcywh::new(acx, acy, aw, ah);
            let b = BoxCxcywh::new(bcx, bcy, bw, bh);
            let g1 = giou(&a, &b);
            let g2 = giou(&b, &a);
            prop_assert!((g1 - g2).abs() < 1e-12);
            prop_assert!(g1 > -1.0 && g1 <= 1.0 + 1e-12);
            // GIoU <= IoU
            let iou = iou_xyxy(a.to_xyxy(), b.to_xyxy());
            prop_assert!(g1 <= iou + 1e-12);
        }

        #[test]
        fn prop_hungarian_optimal_small(
            seed in 0u64..1000,
            rows in 1usize..7,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols = 1 + (seed as usize % rows);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            let total: f64 = a.pairs.iter().map(|(q, g)| cost[*q][*g]).sum();
            prop_assert!((total - brute_force_min_cost(&cost)).abs() < 1e-9);
        }
    }
}
