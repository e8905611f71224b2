//! Detection evaluation: per-class average precision with all-point
//! interpolation, greedy score-ordered matching at a fixed IoU threshold.

use serde::{Deserialize, Serialize};

use crate::matching::{iou_xyxy, BoxCxcywh};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BoxCxcywh,
}

#[derive(Clone, Debug)]
pub struct GtBox {
    pub image_id: usize,
    pub class: usize,
    pub bbox: BoxCxcywh,
    /// ignored boxes are neither required (recall) nor penalized (precision);
    /// used for split evaluation (occluded vs clean)
    pub ignore: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MapReport {
    /// AP per class; None when the class has no ground truth
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    pub num_detections: usize,
    pub num_gt: usize,
}

/// AP for one class with VOC-style all-point interpolation.
///
/// Detections are taken in descending score order (ties broken by image id,
/// then insertion order, for determinism) and each is matched greedily to the
/// unmatched same-image ground truth of highest IoU. A match below the
/// threshold, or no match, counts as a false positive unless the best
/// overlap is an ignored box.
pub fn ap_single_class(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> f64 {
    let num_required = gts.iter().filter(|g| !g.ignore).count();
    if num_required == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| {
        dets[*b]
            .score
            .partial_cmp(&dets[*a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[*a].image_id.cmp(&dets[*b].image_id))
            .then(a.cmp(b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for di in order {
        let d = &dets[di];
        let dx = d.bbox.to_xyxy();
        let mut best = -1.0;
        let mut best_g = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.image_id != d.image_id || matched[gi] {
                continue;
            }
            let iou = iou_xyxy(dx, g.bbox.to_xyxy());
            if iou > best {
                best = iou;
                best_g = Some(gi);
            }
        }
        match best_g {
            Some(gi) if best >= iou_threshold => {
                matched[gi] = true;
                if gts[gi].ignore {
                    continue; // neither TP nor FP
                }
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    // precision/recall curve
    let mut cum_tp = 0.0;
    let mut cum_fp = 0.0;
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    for hit in &tp {
        if *hit {
            cum_tp += 1.0;
        } else {
            cum_fp += 1.0;
        }
        prec.push(cum_tp / (cum_tp + cum_fp));
        rec.push(cum_tp / num_required as f64);
    }
    // all-point interpolation: integrate the precision envelope over recall
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    let mut i = 0;
    while i < rec.len() {
        let r = rec[i];
        if r > prev_r {
            let max_p = prec[i..].iter().cloned().fold(0.0, f64::max);
            ap += (r - prev_r) * max_p;
            prev_r = r;
        }
        i += 1;
    }
    ap
}

/// Mean AP over classes that have ground truth.
pub fn mean_ap(dets: &[Detection], gts: &[GtBox], num_classes: usize, iou_threshold: f64) -> MapReport {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == c).cloned().collect();
        let cg: Vec<GtBox> = gts.iter().filter(|g| g.class == c).cloned().collect();
        if cg.iter().all(|g| g.ignore) {
            per_class.push(None);
            continue;
        }
        let ap = ap_single_class(&cd, &cg, iou_threshold);
        per_class.push(Some(ap));
        sum += ap;
        counted += 1;
    }
    MapReport {
        per_class,
        map: if counted == 0 { 0.0 } else { sum / counted as f64 },
        num_detections: dets.len(),
        num_gt: gts.iter().filter(|g| !g.ignore).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxCxcywh {
        BoxCxcywh::new(cx, cy, w, h)
    }

    fn det(image_id: usize, score: f64, bbox: BoxCxcywh) -> Detection {
        Detection {
            image_id,
            class: 0,
            score,
            bbox,
        }
    }

    fn gt(image_id: usize, bbox: BoxCxcywh) -> GtBox {
        GtBox {
            image_id,
            class: 0,
            bbox,
            ignore: false,
        }
    }

    #[test]
    fn perfect_detections_give_ap_one() {
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2)), gt(1, b(0.6, 0.6, 0.2, 0.2))];
        let dets = vec![
            det(0, 0.9, b(0.3, 0.3, 0.2, 0.2)),
            det(1, 0.8, b(0.6, 0.6, 0.2, 0.2)),
        ];
        assert!((ap_single_class(&dets, &gts, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_give_ap_zero() {
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2))];
        assert_eq!(ap_single_class(&[], &gts, 0.5), 0.0);
    }

    #[test]
    fn hand_computed_ap_with_one_false_positive() {
        // ranked: TP (score .9), FP (.8), TP (.7); 2 gts.
        // recalls: .5, .5, 1.0; precisions: 1, .5, 2/3
        // AP = .5*1 + .5*(2/3) = 5/6
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2)), gt(1, b(0.6, 0.6, 0.2, 0.2))];
        let dets = vec![
            det(0, 0.9, b(0.3, 0.3, 0.2, 0.2)),
            det(0, 0.8, b(0.8, 0.8, 0.1, 0.1)),
            det(1, 0.7, b(0.6, 0.6, 0.2, 0.2)),
        ];
        let ap = ap_single_class(&dets, &gts, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        // second hit on an already-matched gt must count against precision
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2))];
        let dets = vec![
            det(0, 0.9, b(0.3, 0.3, 0.2, 0.2)),
            det(0, 0.8, b(0.3, 0.3, 0.2, 0.2)),
        ];
        let ap = ap_single_class(&dets, &gts, 0.5);
        // recall reaches 1 at precision 1, the duplicate only lowers later precision
        assert!((ap - 1.0).abs() < 1e-12);
        // reversing scores: first det matches, same AP
        let dets2 = vec![
            det(0, 0.8, b(0.3, 0.3, 0.2, 0.2)),
            det(0, 0.9, b(0.3, 0.3, 0.2, 0.2)),
        ];
        assert!((ap_single_class(&dets2, &gts, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn low_iou_match_is_false_positive() {
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2))];
        let dets = vec![det(0, 0.9, b(0.42, 0.42, 0.2, 0.2))];
        assert_eq!(ap_single_class(&dets, &gts, 0.5), 0.0);
    }

    #[test]
    fn ignored_gt_neither_rewards_nor_penalizes() {
        let mut g_ign = gt(0, b(0.7, 0.7, 0.2, 0.2));
        g_ign.ignore = true;
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2)), g_ign];
        // detection on the ignored box: dropped, not an FP
        let dets = vec![
            det(0, 0.9, b(0.7, 0.7, 0.2, 0.2)),
            det(0, 0.8, b(0.3, 0.3, 0.2, 0.2)),
        ];
        assert!((ap_single_class(&dets, &gts, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_skips_absent_classes() {
        let gts = vec![gt(0, b(0.3, 0.3, 0.2, 0.2))];
        let dets = vec![det(0, 0.9, b(0.3, 0.3, 0.2, 0.2))];
        let r = mean_ap(&dets, &gts, 3, 0.5);
        assert_eq!(r.per_class.len(), 3);
        assert!(r.per_class[0].is_some());
        assert!(r.per_class[1].is_none() && r.per_class[2].is_none());
        assert!((r.map - 1.0).abs() < 1e-12);
    }

    /// Brute-force oracle: AP as the exact area under the interpolated
    /// precision envelope computed from an explicit TP/FP sequence.
    fn oracle_ap(tp: &[bool], num_gt: usize) -> f64 {
        // evaluate precision at each achievable recall level r = k/num_gt,
        // using the maximum precision at or beyond that recall
        let mut ap = 0.0;
        let mut points: Vec<(f64, f64)> = Vec::new();
        let (mut t, mut f) = (0.0, 0.0);
        for hit in tp {
            if *hit {
                t += 1.0;
            } else {
                f += 1.0;
            }
            points.push((t / num_gt as f64, t / (t + f)));
        }
        let mut prev = 0.0;
        for k in 1..=num_gt {
            let r = k as f64 / num_gt as f64;
            let p = points
                .iter()
                .filter(|(pr, _)| *pr >= r - 1e-12)
                .map(|(_, pp)| *pp)
                .fold(0.0, f64::max);
            if points.iter().any(|(pr, _)| *pr >= r - 1e-12) {
                ap += (r - prev) * p;
                prev = r;
            }
        }
        ap
    }

    #[test]
    fn ap_matches_brute_force_oracle() {
        use rand::Rng as _;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            // place gts on a grid so every detection either hits exactly or misses
            let num_gt = rng.gen_range(1..=4usize);
            let mut gts = Vec::new();
            for g in 0..num_gt {
                gts.push(gt(0, b(0.1 + 0.2 * g as f64, 0.5, 0.1, 0.1)));
            }
            let mut dets = Vec::new();
            let mut tp_pattern = Vec::new();
            let mut next_gt = 0usize;
            let n_det = rng.gen_range(1..=6usize);
            let mut score = 1.0;
            for _ in 0..n_det {
                score -= 0.05;
                if next_gt < num_gt && rng.gen_bool(0.6) {
                    dets.push(det(0, score, gts[next_gt].bbox));
                    tp_pattern.push(true);
                    next_gt += 1;
                } else {
                    dets.push(det(0, score, b(0.9, 0.1, 0.05, 0.05)));
                    tp_pattern.push(false);
                }
            }
            let got = ap_single_class(&dets, &gts, 0.5);
            let want = oracle_ap(&tp_pattern, num_gt);
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }
}
